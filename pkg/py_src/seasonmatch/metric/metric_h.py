"""
Training samples and training configuration.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, NamedTuple, Optional

# pylint: disable=too-few-public-methods

LOSS_TRIPLET = "triplet"
LOSS_CONTRASTIVE = "contrastive"

DEFAULT_NEGATIVE_EXCLUSION = 3
HEAD_ONLY_LR = 1e-3
FINE_TUNE_LR = 1e-4


class frame_ref(NamedTuple):
    """(traverse position in the corpus, frame index)"""

    traverse: int
    index: int


@dataclass(frozen=True)
class pair_sample:
    POSITIVE: ClassVar[str] = "positive"
    NEGATIVE: ClassVar[str] = "negative"

    anchor: frame_ref
    other: frame_ref
    label: str

    def __post_init__(self) -> None:
        if self.label not in (self.POSITIVE, self.NEGATIVE):
            raise ValueError(f"pair label must be positive or negative, got {self.label!r}")

    @property
    def positive(self) -> bool:
        # pylint: disable=missing-function-docstring
        return self.label == self.POSITIVE


@dataclass(frozen=True)
class triplet_sample:
    neutral: frame_ref
    positive: frame_ref
    negative: frame_ref


@dataclass(frozen=True)
class train_config:
    """
    learning_rate None picks 1e-3 for the head and, when fine-tuning, 1e-4 for
    the backbone. An explicit learning_rate applies to every trained
    parameter. A learning rate of 0 runs the forward passes and records the
    loss without moving any parameter.
    """

    epochs: int = 5
    batch_size: int = 32
    learning_rate: Optional[float] = None
    margin: float = 1.0
    contrastive_margin: float = 1.0
    fine_tune: bool = False
    seed: int = 0
    negative_exclusion: int = DEFAULT_NEGATIVE_EXCLUSION
    loss: str = LOSS_TRIPLET

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate is not None and not self.learning_rate >= 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.margin > 0.0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if not self.contrastive_margin > 0.0:
            raise ValueError(f"contrastive_margin must be > 0, got {self.contrastive_margin}")
        if self.negative_exclusion < 0:
            raise ValueError(f"negative_exclusion must be >= 0, got {self.negative_exclusion}")
        if self.loss not in (LOSS_TRIPLET, LOSS_CONTRASTIVE):
            raise ValueError(f"loss must be triplet or contrastive, got {self.loss!r}")

    @property
    def lr(self) -> float:
        # pylint: disable=missing-function-docstring
        if self.learning_rate is not None:
            return self.learning_rate
        return FINE_TUNE_LR if self.fine_tune else HEAD_ONLY_LR

    @property
    def head_lr(self) -> float:
        # pylint: disable=missing-function-docstring
        return self.learning_rate if self.learning_rate is not None else HEAD_ONLY_LR
