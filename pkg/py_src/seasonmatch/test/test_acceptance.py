"""
Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
# pylint: disable=missing-docstring,redefined-outer-name
import copy
from dataclasses import replace

import pytest

from seasonmatch.backbone import build_model, embedding_model, identity_spec
from seasonmatch.cli import EXIT_OK, main
from seasonmatch.dataset import (
    default_buffer,
    default_test_segments,
    make_partition,
    place_labeling,
    synth_config,
    synth_corpus,
)
from seasonmatch.metric import mine_triplets, train, train_config
from seasonmatch.retrieval import cross_season_matrix, same_condition_fc

pytestmark = pytest.mark.slow

PLACES = 500
CONDITIONS = 4
TRIPLETS = 20000
EPOCHS = 20
FINE_TUNE_EPOCHS = 5
SEED = 0


@pytest.fixture(scope="module")
def desk_run():
    cfg = synth_config(n_places=PLACES, n_conditions=CONDITIONS, seed=SEED)
    corpus = synth_corpus(cfg)
    repeat = synth_corpus(replace(cfg, rendering=1))
    split = make_partition(PLACES, default_test_segments(PLACES), default_buffer(PLACES))
    samples = mine_triplets(corpus, place_labeling(), TRIPLETS, SEED, split=split)
    return corpus, repeat, split, samples


@pytest.fixture(scope="module")
def head_only(desk_run):
    corpus, _, _, samples = desk_run
    model = build_model("desk", corpus.image_size(), tap="pool4", seed=SEED)
    model, history = train(model, samples, train_config(epochs=EPOCHS, seed=SEED), corpus)
    assert history[-1] < history[0]
    return model


def test_raw_pixels_match_best_within_a_condition(desk_run):
    corpus, repeat, _, _ = desk_run
    model = embedding_model(identity_spec(corpus.image_size()), head_dim=8, seed=SEED)
    cross = cross_season_matrix(corpus, model, source="tap")
    same = same_condition_fc(corpus, model, source="tap", repeat=repeat)
    assert cross.mean_fc() < min(same.values())


def test_trained_head_beats_raw_tap(desk_run, head_only):
    corpus, repeat, split, samples = desk_run
    assert len(samples) == TRIPLETS

    raw = cross_season_matrix(corpus, head_only, split, source="tap")
    head = cross_season_matrix(corpus, head_only, split)
    assert len(head.fc_matrix) == CONDITIONS * (CONDITIONS - 1)
    assert head.mean_fc() >= raw.mean_fc() + 0.05

    same = same_condition_fc(corpus, head_only, split, repeat=repeat)
    assert min(same.values()) >= 0.95


def test_fine_tuning_does_not_regress(desk_run, head_only):
    corpus, _, split, samples = desk_run
    cfg = train_config(epochs=FINE_TUNE_EPOCHS, fine_tune=True, seed=SEED)
    fine_tuned, _ = train(copy.deepcopy(head_only), samples, cfg, corpus)
    before = cross_season_matrix(corpus, head_only, split).mean_fc()
    assert cross_season_matrix(corpus, fine_tuned, split).mean_fc() >= before - 0.02


def test_cli_chain_is_byte_reproducible(tmp_path, monkeypatch):
    monkeypatch.delenv("SEASONMATCH_THREADS", raising=False)
    argv = ["all", "--seed", str(SEED), "--epochs", str(EPOCHS), "--n-triplets", str(TRIPLETS)]
    for run in ("a", "b"):
        assert main(argv + ["--outdir", str(tmp_path / run)]) == EXIT_OK

    written = sorted(
        p.relative_to(tmp_path / "a")
        for stage in ("evaluate", "report")
        for p in (tmp_path / "a" / stage).rglob("*.csv")
    )
    assert written
    for rel in written:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
