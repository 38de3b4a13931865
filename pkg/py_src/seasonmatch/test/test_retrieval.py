"""
Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
# pylint: disable=missing-docstring
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seasonmatch import retrieval
from seasonmatch.backbone import descriptor, embedding_model, identity_spec
from seasonmatch.dataset import make_partition, synth_config, synth_corpus
from seasonmatch.retrieval import (
    build_index,
    cross_season_matrix,
    default_thresholds,
    eval_report,
    evaluate_descriptors,
    fraction_correct,
    layer_sweep,
    match_result,
    precision_recall,
    query_batch,
    query_nearest,
    resolve_indices,
    same_condition_fc,
)


def _oracle(reference, frame_indices, q):
    d2 = ((reference.astype(np.float64) - q.astype(np.float64)) ** 2).sum(axis=1)
    k = int(np.argmin(d2))
    return int(frame_indices[k]), float(np.sqrt(d2[k]))


# ---------------------------------------------------------------- index and query


def test_query_examples():
    idx = build_index(np.array([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]]), [10, 11, 12], "summer")
    assert len(idx) == 3 and idx.dim == 2 and idx.source == "summer"

    m = query_nearest(idx, np.array([2.9, 4.2]), query_index=11)
    assert (m.query_index, m.retrieved_index) == (11, 11)
    assert m.distance == pytest.approx(np.hypot(0.1, 0.2))
    assert m.correct is None

    m = query_nearest(idx, descriptor(np.array([0.0, 0.0]), "head128"))
    assert m.retrieved_index == 10 and m.distance == 0.0


def test_ties_go_to_lowest_frame_index():
    idx = build_index(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), [7, 3, 5])
    assert query_nearest(idx, np.zeros(2)).retrieved_index == 3
    assert query_batch(idx, np.zeros((1, 2)))[0].retrieved_index == 3


def test_index_is_a_frozen_copy():
    values = np.ones((3, 4))
    idx = build_index(values)
    values[0, 0] = 100.0
    assert idx.descriptors[0, 0] == 1.0
    with pytest.raises(ValueError):
        idx.descriptors[0, 0] = 5.0
    assert idx.frame_indices.tolist() == [0, 1, 2]


@pytest.mark.parametrize(
    "values,indices",
    [
        (np.zeros((0, 4)), None),
        (np.zeros(4), None),
        (np.array([[1.0, np.nan]]), None),
        (np.zeros((3, 2)), [0, 1]),
    ],
)
def test_build_index_rejects_bad_input(values, indices):
    with pytest.raises(ValueError):
        build_index(values, indices)


def test_query_rejects_bad_vectors():
    idx = build_index(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        query_nearest(idx, np.zeros(4))
    with pytest.raises(ValueError):
        query_nearest(idx, np.array([0.0, np.inf, 0.0]))
    with pytest.raises(ValueError):
        query_batch(idx, np.zeros((2, 4)))


def test_query_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for instance in range(20):
        dim = (8, 64, 128)[instance % 3]
        count = int(rng.integers(1, 1001))
        reference = rng.normal(size=(count, dim)).astype(np.float32)
        frames = rng.permutation(5 * count)[:count]
        queries = rng.normal(size=(50, dim)).astype(np.float32)
        idx = build_index(reference, frames)

        batch = query_batch(idx, queries, np.arange(50))
        for q_pos, q in enumerate(queries):
            expected = _oracle(reference, frames, q)
            single = query_nearest(idx, q, q_pos)
            assert (single.retrieved_index, batch[q_pos].retrieved_index) == (expected[0],) * 2
            assert single.distance == pytest.approx(expected[1], rel=1e-12)
            assert batch[q_pos].query_index == q_pos


def test_query_batch_can_skip_the_query_row():
    idx = build_index(np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]]), [4, 5, 6])
    found = query_batch(idx, idx.descriptors, [4, 5, 6], exclude_self=True)
    assert [m.retrieved_index for m in found] == [5, 4, 5]
    assert [m.distance for m in found] == [1.0, 1.0, 4.0]
    with pytest.raises(ValueError):
        query_batch(build_index(np.zeros((1, 2))), np.zeros((1, 2)), exclude_self=True)


def test_small_reference_blocks_give_the_same_matches(monkeypatch):
    rng = np.random.default_rng(3)
    reference = rng.normal(size=(37, 8))
    queries = rng.normal(size=(11, 8))
    idx = build_index(reference)
    whole = query_batch(idx, queries)
    monkeypatch.setattr(retrieval, "_BLOCK_ELEMENTS", 20)
    blocked = query_batch(idx, queries)
    assert [m.retrieved_index for m in blocked] == [m.retrieved_index for m in whole]
    assert [m.distance for m in blocked] == pytest.approx([m.distance for m in whole], rel=1e-12)
    for q_pos, q in enumerate(queries):
        assert blocked[q_pos].retrieved_index == _oracle(reference, np.arange(37), q)[0]


# ---------------------------------------------------------------- metrics


def test_fraction_correct_and_pr_recount():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = int(rng.integers(1, 200))
        queries = rng.integers(0, 500, n)
        matches = [
            match_result(int(q), int(q + rng.integers(-6, 7)), float(rng.uniform(0.0, 3.0)))
            for q in queries
        ]
        tolerance = int(rng.integers(0, 5))
        fc = fraction_correct(matches, tolerance)
        flags = np.array([abs(m.retrieved_index - m.query_index) <= tolerance for m in matches])
        assert fc == flags.sum() / n
        assert [m.correct for m in matches] == flags.tolist()

        thresholds = np.sort(rng.uniform(-0.5, 3.5, 15))
        curve = precision_recall(matches, thresholds)
        dist = np.array([m.distance for m in matches])
        for point, t in zip(curve, thresholds):
            accepted = dist <= t
            hits = int((accepted & flags).sum())
            assert point.threshold == t
            assert point.precision == (hits / accepted.sum() if accepted.any() else 1.0)
            assert point.recall == hits / n


def test_fraction_correct_examples():
    matches = [match_result(10, 12, 0.5), match_result(10, 13, 0.1), match_result(3, 3, 0.0)]
    assert fraction_correct(matches, 2) == pytest.approx(2 / 3)
    assert fraction_correct(matches, 0) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        fraction_correct([])


def test_precision_recall_requires_correctness():
    with pytest.raises(ValueError, match="fraction_correct"):
        precision_recall([match_result(0, 0, 0.1)])


def test_pr_curve_with_default_thresholds():
    matches = [match_result(i, i if i % 2 else i + 5, float(i)) for i in range(10)]
    fraction_correct(matches, 2)
    thresholds = default_thresholds(matches, 5)
    assert thresholds.tolist() == [0.0, 2.25, 4.5, 6.75, 9.0]
    curve = precision_recall(matches)
    assert curve[-1].recall == pytest.approx(0.5)
    assert curve[-1].precision == pytest.approx(0.5)
    assert [p.threshold for p in curve] == sorted(p.threshold for p in curve)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (12, 5), elements=st.floats(-10, 10)),
    st.floats(0.1, 10.0),
    st.integers(0, 2**32 - 1),
)
def test_retrieval_is_invariant_to_isometry_scale_and_order(reference, scale, seed):
    rng = np.random.default_rng(seed)
    queries = reference[rng.permutation(12)[:6]] + rng.normal(0.0, 0.3, (6, 5))
    base = [m.retrieved_index for m in query_batch(build_index(reference), queries)]

    def distances(ref, qs):
        return np.sort(((ref[None] - qs[:, None]) ** 2).sum(axis=2), axis=1)

    # skip near-ties, where rounding may legitimately swap the winner
    d = distances(reference, queries)
    if np.any(d[:, 1] - d[:, 0] < 1e-6):
        return

    rotation, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    shift = rng.normal(size=5)
    moved = [
        m.retrieved_index
        for m in query_batch(build_index(reference @ rotation + shift), queries @ rotation + shift)
    ]
    scaled = [
        m.retrieved_index for m in query_batch(build_index(reference * scale), queries * scale)
    ]
    order = rng.permutation(12)
    permuted = [
        m.retrieved_index for m in query_batch(build_index(reference[order], order), queries)
    ]
    assert moved == base
    assert scaled == base
    assert permuted == base


# ---------------------------------------------------------------- evaluation


def test_evaluate_descriptors_four_conditions():
    rng = np.random.default_rng(2)
    values = rng.normal(size=(30, 16))
    seasons = ["summer", "fall", "winter", "spring"]
    descriptors = {s: values + rng.normal(0.0, 1e-3, values.shape) for s in seasons}
    report = evaluate_descriptors(descriptors, np.arange(100, 130), tolerance=0, thresholds=10)
    assert len(report.fc_matrix) == 12
    assert all(q != r for q, r in report.fc_matrix)
    assert report.combinations()[0] == ("summer", "fall")
    assert all(fc == 1.0 for fc in report.fc_matrix.values())
    assert report.mean_fc() == 1.0
    assert len(report.pr_curve) == 10
    assert len(report.matches[("winter", "spring")]) == 30
    assert report.matches[("winter", "spring")][0].query_index == 100


def test_evaluate_descriptors_needs_two_seasons():
    with pytest.raises(ValueError):
        evaluate_descriptors({"summer": np.zeros((3, 2))}, [0, 1, 2])


def test_eval_report_validation():
    with pytest.raises(ValueError):
        eval_report(["a", "b"], {("a", "a"): 0.5})
    with pytest.raises(ValueError):
        eval_report(["a", "b"], {("a", "b"): 1.5})
    with pytest.raises(ValueError):
        eval_report(["a", "b"], {}).mean_fc()


@pytest.fixture(scope="module")
def identical_corpus():
    cfg = synth_config(n_places=30, n_conditions=3, image_size=(8, 16, 3), strength=0.0, seed=6)
    return synth_corpus(cfg)


def test_identical_conditions_are_matched_exactly(identical_corpus):
    model = embedding_model(identity_spec((8, 16, 3)), head_dim=16, seed=1)
    part = make_partition(30, [(10, 20)], buffer=2)
    report = cross_season_matrix(identical_corpus, model, part, tolerance=0)
    assert report.source == "head128"
    assert len(report.fc_matrix) == 6
    assert all(fc == 1.0 for fc in report.fc_matrix.values())
    assert [m.query_index for m in report.matches[("summer", "fall")]] == list(range(10, 20))

    raw = cross_season_matrix(identical_corpus, model, None, tolerance=0, source="tap")
    assert raw.source == "input"
    assert raw.mean_fc() == 1.0

    sweep = layer_sweep(identical_corpus, model, ["input"], [0, 5, 9])
    assert list(sweep) == ["input"]
    assert sweep["input"].mean_fc() == 1.0


def test_same_condition_fc_never_counts_the_query_itself(identical_corpus):
    model = embedding_model(identity_spec((8, 16, 3)), head_dim=16, seed=1)
    fc = same_condition_fc(identical_corpus, model, tolerance=0)
    assert fc == {"summer": 0.0, "fall": 0.0, "winter": 0.0}

    with torch.no_grad():
        model.head.weight.zero_()
    # every descriptor ties, so frames 0..2 are the only hits within 2 of frame 0
    fc = same_condition_fc(identical_corpus, model, tolerance=2)
    assert fc == pytest.approx({"summer": 0.1, "fall": 0.1, "winter": 0.1})


def test_same_condition_fc_against_a_second_rendering(identical_corpus):
    model = embedding_model(identity_spec((8, 16, 3)), head_dim=16, seed=1)
    again = synth_corpus(
        synth_config(n_places=30, n_conditions=3, image_size=(8, 16, 3), strength=0.0, seed=6,
                     rendering=1)
    )
    fc = same_condition_fc(identical_corpus, model, [3, 9, 27], tolerance=0, repeat=again)
    assert fc == {"summer": 1.0, "fall": 1.0, "winter": 1.0}

    shorter = synth_corpus(synth_config(n_places=20, n_conditions=3, image_size=(8, 16, 3)))
    with pytest.raises(ValueError, match="repeat"):
        same_condition_fc(identical_corpus, model, [3], repeat=shorter)


def test_resolve_indices(identical_corpus):
    part = make_partition(30, [(10, 20)], buffer=2)
    assert resolve_indices(identical_corpus, part).tolist() == list(range(10, 20))
    assert len(resolve_indices(identical_corpus, None)) == 30
    with pytest.raises(IndexError):
        resolve_indices(identical_corpus, [0, 30])
    with pytest.raises(ValueError):
        resolve_indices(identical_corpus, [])
    model = embedding_model(identity_spec((8, 16, 3)), head_dim=4)
    with pytest.raises(ValueError):
        cross_season_matrix(identical_corpus, model, source="pool9")
