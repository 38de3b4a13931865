"""
Exact Euclidean nearest-neighbour retrieval and the cross-season metrics
built on it.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from ..backbone import descriptor, embed_batch, embedding_model, extract_batch
from ..dataset import aligned_corpus, partition
from .retrieval_h import *

logger = logging.getLogger(__name__)

# float64 differences per reference block in distance computations
_BLOCK_ELEMENTS = 1 << 22

Indices = Union[partition, Sequence[int], np.ndarray, None]


def build_index(
    descriptors: np.ndarray,
    frame_indices: Optional[Sequence[int]] = None,
    source: str = "",
) -> descriptor_index:
    """
    @brief Freeze a descriptor matrix into a reference index.

    @param descriptors: count x dim matrix, row order preserved.
    @param frame_indices: Frame index of every row, 0..count-1 when omitted.
    @param source: Traverse the rows were extracted from.

    @return Read-only descriptor_index holding private copies of the inputs.

    Usage:
        idx = build_index(embed_batch(m, summer.images(test)), test, source="summer")
    """
    values = np.array(descriptors, copy=True)
    if values.ndim != 2:
        raise ValueError(f"descriptor matrix must be 2-D, got shape {values.shape}")
    if values.shape[0] == 0:
        raise ValueError("cannot build an empty index")
    if not np.all(np.isfinite(values)):
        raise ValueError("descriptor matrix holds non-finite values")

    if frame_indices is None:
        indices = np.arange(values.shape[0], dtype=np.int64)
    else:
        indices = np.array(frame_indices, dtype=np.int64, copy=True)
    if indices.shape != (values.shape[0],):
        raise ValueError(
            f"{values.shape[0]} descriptors but {indices.shape[0]} frame indices"
        )
    return descriptor_index(values, indices, source)


def _query_vector(idx: descriptor_index, q) -> np.ndarray:
    values = q.values if isinstance(q, descriptor) else np.asarray(q)
    if values.ndim != 1 or values.shape[0] != idx.dim:
        raise ValueError(f"query of shape {values.shape} against index of dim {idx.dim}")
    if not np.all(np.isfinite(values)):
        raise ValueError("query holds non-finite values")
    return values.astype(np.float64)


def _nearest(idx: descriptor_index, d2: np.ndarray, query_index: int) -> match_result:
    best = d2.min()
    candidates = np.flatnonzero(d2 == best)
    k = candidates[np.argmin(idx.frame_indices[candidates])]
    return match_result(int(query_index), int(idx.frame_indices[k]), float(np.sqrt(best)))


def _squared_distances(reference: np.ndarray, q64: np.ndarray) -> np.ndarray:
    # at most _BLOCK_ELEMENTS float64 differences alive at a time
    d2 = np.empty(reference.shape[0], dtype=np.float64)
    block = max(1, _BLOCK_ELEMENTS // max(1, reference.shape[1]))
    for start in range(0, reference.shape[0], block):
        diff = reference[start : start + block].astype(np.float64) - q64
        d2[start : start + block] = np.einsum("ij,ij->i", diff, diff)
    return d2


def query_nearest(idx: descriptor_index, q, query_index: int = -1) -> match_result:
    """
    @brief Exact argmin of the Euclidean distance over the whole index.

    @param idx: Reference index.
    @param q: Query descriptor (vector or descriptor record).
    @param query_index: Frame index of the query, carried into the result.

    @return match_result without correctness flag. Distances are computed in
            float64; ties go to the lowest frame index.
    """
    if len(idx) == 0:
        raise ValueError("query against an empty index")
    q64 = _query_vector(idx, q)
    return _nearest(idx, _squared_distances(idx.descriptors, q64), query_index)


def query_batch(
    idx: descriptor_index,
    queries: np.ndarray,
    query_indices: Optional[Sequence[int]] = None,
    exclude_self: bool = False,
) -> List[match_result]:
    """
    @brief query_nearest for every row of queries, results in query order.

    @param exclude_self: Skip index rows whose frame index equals the query's
                         own, so an index can be queried with its own rows.
    """
    queries = np.asarray(queries)
    if queries.ndim != 2 or queries.shape[1] != idx.dim:
        raise ValueError(f"queries of shape {queries.shape} against index of dim {idx.dim}")
    if not np.all(np.isfinite(queries)):
        raise ValueError("queries hold non-finite values")
    if query_indices is None:
        query_indices = np.arange(queries.shape[0])
    if len(query_indices) != queries.shape[0]:
        raise ValueError(f"{queries.shape[0]} queries but {len(query_indices)} query indices")
    if exclude_self and len(idx) < 2:
        raise ValueError("excluding the query's own row needs an index of >= 2 rows")

    results: List[match_result] = []
    for row, q in enumerate(queries.astype(np.float64)):
        d2 = _squared_distances(idx.descriptors, q)
        if exclude_self:
            d2[idx.frame_indices == query_indices[row]] = np.inf
            if np.isinf(d2).all():
                raise ValueError(f"no index row besides frame {query_indices[row]}")
        results.append(_nearest(idx, d2, query_indices[row]))
    return results


def fraction_correct(matches: Sequence[match_result], tolerance: int = DEFAULT_TOLERANCE) -> float:
    """
    @brief Share of matches whose retrieved frame lies within tolerance of
           the query's own frame index; stamps match.correct on each.

    Usage:
        fc = fraction_correct(query_batch(idx, winter_desc, test), tolerance=2)
    """
    if not matches:
        raise ValueError("fraction_correct needs at least one match")
    if tolerance < 0:
        raise ValueError(f"tolerance must be >= 0, got {tolerance}")
    hits = 0
    for match in matches:
        match.correct = abs(match.retrieved_index - match.query_index) <= tolerance
        hits += match.correct
    return hits / len(matches)


def default_thresholds(
    matches: Sequence[match_result], count: int = DEFAULT_THRESHOLDS
) -> np.ndarray:
    # pylint: disable=missing-function-docstring
    if not matches:
        raise ValueError("no matches to derive thresholds from")
    top = max(match.distance for match in matches)
    return np.unique(np.linspace(0.0, top, count))


def precision_recall(
    matches: Sequence[match_result], thresholds: Optional[Iterable[float]] = None
) -> List[pr_point]:
    """
    @brief Precision and recall of accepting matches with distance <= t.

    @param matches: Matches already stamped by fraction_correct().
    @param thresholds: Distance thresholds, default_thresholds() when omitted.

    @return Curve sorted by threshold; precision is 1.0 where nothing is
            accepted, recall is counted against all matches.
    """
    if not matches:
        raise ValueError("precision_recall needs at least one match")
    if any(match.correct is None for match in matches):
        raise ValueError("matches carry no correctness flag; run fraction_correct first")

    if thresholds is None:
        thresholds = default_thresholds(matches)
    distances = np.array([match.distance for match in matches], dtype=np.float64)
    correct = np.array([bool(match.correct) for match in matches])
    curve = []
    for t in sorted(float(t) for t in thresholds):
        accepted = distances <= t
        n_accepted = int(accepted.sum())
        n_correct = int((accepted & correct).sum())
        precision = n_correct / n_accepted if n_accepted else 1.0
        curve.append(pr_point(t, precision, n_correct / len(matches)))
    return curve


def evaluate_descriptors(
    descriptors: Mapping[str, np.ndarray],
    frame_indices: Sequence[int],
    tolerance: int = DEFAULT_TOLERANCE,
    thresholds: Union[Iterable[float], int, None] = None,
    source: str = SOURCE_HEAD,
) -> eval_report:
    """
    @brief Query every season's descriptors against every other season's index.

    @param descriptors: season -> count x dim matrix, rows aligned with
                        frame_indices; mapping order gives the season order.
    @param frame_indices: Frame index of every row (the ground truth).
    @param tolerance: Frame window for a correct match.
    @param thresholds: PR thresholds over the pooled matches, or how many evenly
                       spaced ones to derive from the largest distance.
    @param source: Recorded in the report.
    """
    seasons = list(descriptors)
    if len(seasons) < 2:
        raise ValueError(f"cross-season evaluation needs >= 2 seasons, got {seasons}")
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    indexes = {s: build_index(descriptors[s], frame_indices, source=s) for s in seasons}

    fc_matrix = {}
    matches = {}
    for query in seasons:
        for reference in seasons:
            if query == reference:
                continue
            found = query_batch(indexes[reference], descriptors[query], frame_indices)
            fc = fraction_correct(found, tolerance)
            fc_matrix[(query, reference)] = fc
            matches[(query, reference)] = found
            logger.info("fc input %s / reference %s: %.4f", query, reference, fc)

    pooled = [m for found in matches.values() for m in found]
    if thresholds is None or isinstance(thresholds, int):
        thresholds = default_thresholds(pooled, thresholds or DEFAULT_THRESHOLDS)
    curve = precision_recall(pooled, thresholds)
    return eval_report(seasons, fc_matrix, matches, curve, tolerance, source)


def resolve_indices(corpus: aligned_corpus, test_indices: Indices) -> np.ndarray:
    """
    @brief Evaluation frame indices: a partition's test indices, an explicit
           list, or the whole corpus when None.
    """
    if test_indices is None:
        indices = np.arange(len(corpus), dtype=np.int64)
    elif isinstance(test_indices, partition):
        indices = test_indices.test_indices
    else:
        indices = np.asarray(test_indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("no evaluation indices")
    if indices.min() < 0 or indices.max() >= len(corpus):
        raise IndexError(f"evaluation indices outside corpus of length {len(corpus)}")
    return indices


def describe(
    corpus: aligned_corpus,
    model: embedding_model,
    indices: np.ndarray,
    source: str = SOURCE_HEAD,
    tap: Optional[str] = None,
    progress: bool = False,
) -> Dict[str, np.ndarray]:
    """
    @brief Descriptors of the given frames for every traverse, keyed by season.

    source "head128" embeds through the head; "tap" returns the raw tap
    activations (tap, or the model tap when omitted).
    """
    if source not in (SOURCE_HEAD, SOURCE_TAP):
        raise ValueError(f"source must be {SOURCE_HEAD!r} or {SOURCE_TAP!r}, got {source!r}")
    result = {}
    for t in corpus.traverses:
        images = t.images(indices)
        if source == SOURCE_HEAD:
            result[t.season] = embed_batch(model, images, progress=progress)
        else:
            result[t.season] = extract_batch(model, images, tap, progress=progress)
    return result


def cross_season_matrix(
    corpus: aligned_corpus,
    model: embedding_model,
    test_indices: Indices = None,
    tolerance: int = DEFAULT_TOLERANCE,
    source: str = SOURCE_HEAD,
    tap: Optional[str] = None,
    thresholds: Optional[Iterable[float]] = None,
) -> eval_report:
    """
    @brief fc for every ordered (input, reference) season pair over the test
           frames, plus the pooled PR curve.

    Usage:
        report = cross_season_matrix(corpus, m, part, tolerance=2)
        report.fc_matrix[("winter", "summer")]
    """
    if len(corpus.traverses) < 2:
        raise ValueError("cross-season evaluation needs >= 2 traverses")
    indices = resolve_indices(corpus, test_indices)
    descriptors = describe(corpus, model, indices, source, tap)
    label = source if source == SOURCE_HEAD else (tap or model.tap)
    return evaluate_descriptors(descriptors, indices, tolerance, thresholds, label)


def layer_sweep(
    corpus: aligned_corpus,
    model: embedding_model,
    taps: Sequence[str],
    test_indices: Indices = None,
    tolerance: int = DEFAULT_TOLERANCE,
) -> Dict[str, eval_report]:
    """
    @brief Raw-tap cross-season matrix for each layer in taps.
    """
    reports = {}
    for tap in taps:
        reports[tap] = cross_season_matrix(corpus, model, test_indices, tolerance, SOURCE_TAP, tap)
        logger.info("layer %s: mean fc %.4f", tap, reports[tap].mean_fc())
    return reports


def same_condition_fc(
    corpus: aligned_corpus,
    model: embedding_model,
    test_indices: Indices = None,
    tolerance: int = DEFAULT_TOLERANCE,
    source: str = SOURCE_HEAD,
    tap: Optional[str] = None,
    repeat: Optional[aligned_corpus] = None,
) -> Dict[str, float]:
    """
    @brief fc of matching every traverse against itself, keyed by season.

    @param repeat: A second recording of the same conditions, aligned frame by
                   frame with corpus. Its frames query the index built from
                   corpus. When omitted every frame queries the other test
                   frames of its own traverse.

    Usage:
        again = synth_corpus(dataclasses.replace(cfg, rendering=1))
        same_condition_fc(corpus, m, part, repeat=again)
    """
    indices = resolve_indices(corpus, test_indices)
    descriptors = describe(corpus, model, indices, source, tap)
    if repeat is None:
        queries = descriptors
    else:
        if repeat.seasons != corpus.seasons or len(repeat) != len(corpus):
            raise ValueError(
                f"repeat holds {repeat.seasons} x {len(repeat)}, "
                f"corpus {corpus.seasons} x {len(corpus)}"
            )
        queries = describe(repeat, model, indices, source, tap)

    result = {}
    for season, values in descriptors.items():
        idx = build_index(values, indices, source=season)
        found = query_batch(idx, queries[season], indices, exclude_self=repeat is None)
        result[season] = fraction_correct(found, tolerance)
        logger.info("same-condition fc %s: %.4f", season, result[season])
    return result
