"""
Shared fixtures: small synthetic corpora and manifest writers.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
# pylint: disable=missing-docstring,redefined-outer-name
import numpy as np
import pandas as pd
import pytest
import torch

from seasonmatch.dataset import (
    MANIFEST_COLUMNS,
    aligned_corpus,
    frame,
    save_image,
    synth_config,
    synth_corpus,
    traverse,
)


@pytest.fixture(autouse=True)
def single_thread():
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    yield
    # the CLI switches deterministic mode on for the whole process
    torch.use_deterministic_algorithms(deterministic)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(synth_config(n_places=40, n_conditions=2, seed=3))


@pytest.fixture
def write_manifest_csv(tmp_path):
    """Write rows (dicts or tuples in manifest column order) to <tmp>/<name>.csv."""

    def _write(name, rows):
        path = tmp_path / f"{name}.csv"
        frame_ = pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS))
        frame_.to_csv(path, index=False)
        return path

    return _write


@pytest.fixture
def write_png(tmp_path):
    def _write(name, value, size=(4, 4, 3)):
        path = tmp_path / name
        save_image(path, np.full(size, value, dtype=np.float32))
        return path.name

    return _write


def toy_corpus(images_by_season, step_deg=1.5e-4):
    """
    Aligned corpus from in-memory images: {season: [H x W x C, ...]}, all
    traverses the same length, GPS on a straight northward track.
    """
    traverses = []
    for c, (season, images) in enumerate(images_by_season.items()):
        frames = [
            frame(
                index=i,
                timestamp=1000 * c + i,
                lat=60.0 + i * step_deg,
                lon=10.0,
                speed=50.0,
                image=np.asarray(img, dtype=np.float32),
            )
            for i, img in enumerate(images)
        ]
        traverses.append(traverse(season, frames, source_id=f"toy:{season}"))
    return aligned_corpus(traverses)
