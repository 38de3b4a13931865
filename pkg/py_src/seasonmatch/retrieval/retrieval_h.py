"""
Descriptor index, match results and evaluation reports.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

# pylint: disable=too-few-public-methods

DEFAULT_TOLERANCE = 2
DEFAULT_THRESHOLDS = 50

SOURCE_HEAD = "head128"
SOURCE_TAP = "tap"


@dataclass(frozen=True)
class descriptor_index:
    """
    Reference database: count x dim descriptors and the frame index of every
    row. Both arrays are read-only once built.
    """

    descriptors: np.ndarray = field(repr=False)
    frame_indices: np.ndarray = field(repr=False)
    source: str = ""

    def __post_init__(self) -> None:
        self.descriptors.flags.writeable = False
        self.frame_indices.flags.writeable = False

    def __len__(self) -> int:
        return int(self.descriptors.shape[0])

    @property
    def dim(self) -> int:
        # pylint: disable=missing-function-docstring
        return int(self.descriptors.shape[1])


@dataclass
class match_result:
    """
    correct stays None until fraction_correct() stamps it.
    """

    query_index: int
    retrieved_index: int
    distance: float
    correct: Optional[bool] = None


class pr_point(NamedTuple):
    threshold: float
    precision: float
    recall: float


@dataclass
class eval_report:
    """
    fc per ordered (input, reference) season pair, diagonal excluded, with
    the matches behind every entry and one precision-recall curve over all
    of them.
    """

    seasons: List[str]
    fc_matrix: Dict[Tuple[str, str], float]
    matches: Dict[Tuple[str, str], List[match_result]] = field(default_factory=dict, repr=False)
    pr_curve: List[pr_point] = field(default_factory=list, repr=False)
    tolerance: int = DEFAULT_TOLERANCE
    source: str = SOURCE_HEAD

    def __post_init__(self) -> None:
        for (query, reference), fc in self.fc_matrix.items():
            if query == reference:
                raise ValueError(f"fc matrix must not hold the diagonal entry {query}")
            if not 0.0 <= fc <= 1.0:
                raise ValueError(f"fc for ({query}, {reference}) outside [0, 1]: {fc}")

    def combinations(self) -> List[Tuple[str, str]]:
        """
        @brief Ordered (input, reference) pairs present, in season order.
        """
        return [
            (query, reference)
            for query in self.seasons
            for reference in self.seasons
            if (query, reference) in self.fc_matrix
        ]

    def mean_fc(self) -> float:
        # pylint: disable=missing-function-docstring
        if not self.fc_matrix:
            raise ValueError("empty fc matrix")
        return float(np.mean(list(self.fc_matrix.values())))
