"""
Pair/triplet mining, the contrastive and Wohlhart-Lepetit losses, and the
SGD loop that trains the embedding head (optionally the backbone too).

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..backbone import embedding_model, extract_batch, images_to_tensor
from ..dataset import aligned_corpus, partition, place_labeling
from ..formats import atomic_path
from .metric_h import *

logger = logging.getLogger(__name__)

Number = Union[float, torch.Tensor]
Split = Union[partition, Sequence[int], np.ndarray, None]


class _eligibility:
    """
    Per-index eligible partner counts over the allowed (train) indices A.

    pos[a]: partners j in A with |A[a] - j| <= s
    neg[a]: partners j in A with |A[a] - j| > max(s, e)
    """

    def __init__(self, corpus: aligned_corpus, labeling: place_labeling, exclusion: int,
                 split: Split) -> None:
        if len(corpus.traverses) < 2:
            raise ValueError(f"mining needs >= 2 traverses, corpus has {len(corpus.traverses)}")
        if exclusion < 0:
            raise ValueError(f"negative_exclusion must be >= 0, got {exclusion}")

        if split is None:
            allowed = np.arange(len(corpus), dtype=np.int64)
        elif isinstance(split, partition):
            allowed = np.asarray(split.train_indices, dtype=np.int64)
        else:
            allowed = np.asarray(split, dtype=np.int64)
        allowed = np.unique(allowed)
        if len(allowed) and (allowed[0] < 0 or allowed[-1] >= len(corpus)):
            raise IndexError(f"mining indices outside corpus of length {len(corpus)}")

        s = labeling.same_place_sep
        gap = max(s, exclusion)
        self.allowed = allowed
        self.traverses = len(corpus.traverses)
        self.pos_lo = np.searchsorted(allowed, allowed - s, side="left")
        self.pos = np.searchsorted(allowed, allowed + s, side="right") - self.pos_lo
        self.neg_below = np.searchsorted(allowed, allowed - gap, side="left")
        self.neg_hi = np.searchsorted(allowed, allowed + gap, side="right")
        self.neg = self.neg_below + (len(allowed) - self.neg_hi)

    def positive_weights(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        return (self.traverses - 1) * self.pos

    def negative_weights(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        return self.traverses * self.neg

    def triplet_weights(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        return self.positive_weights() * self.negative_weights()

    def population(self, weights: np.ndarray) -> int:
        # pylint: disable=missing-function-docstring
        return self.traverses * int(weights.sum(dtype=np.int64))

    def split_rank(self, ranks: np.ndarray, weights: np.ndarray):
        """
        Rank -> (anchor traverse, anchor position in A, rank among that
        anchor's partners).
        """
        cum = np.cumsum(weights, dtype=np.int64)
        per_traverse = int(cum[-1])
        t = ranks // per_traverse
        rem = ranks % per_traverse
        a = np.searchsorted(cum, rem, side="right")
        return t, a, rem - (cum[a] - weights[a])

    def positive_partner(self, t: np.ndarray, a: np.ndarray, rank: np.ndarray):
        # pylint: disable=missing-function-docstring
        pos = self.pos[a]
        u = rank // pos
        u = u + (u >= t)
        return u, self.allowed[self.pos_lo[a] + rank % pos]

    def negative_partner(self, a: np.ndarray, rank: np.ndarray):
        # pylint: disable=missing-function-docstring
        neg = self.neg[a]
        v = rank // neg
        k = rank % neg
        below = self.neg_below[a]
        position = np.where(k < below, k, self.neg_hi[a] + k - below)
        return v, self.allowed[position]


def _draw(rng: np.random.Generator, population: int, n: int, what: str) -> np.ndarray:
    if n < 0:
        raise ValueError(f"requested a negative number of {what}: {n}")
    if n > population:
        raise ValueError(f"requested {n} {what} but only {population} are eligible")
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(rng.choice(population, size=n, replace=False), dtype=np.int64)


def positive_population(
    corpus: aligned_corpus, labeling: place_labeling, split: Split = None
) -> int:
    """
    @brief Number of ordered cross-traverse positive pairs the miner samples from.
    """
    elig = _eligibility(corpus, labeling, 0, split)
    return elig.population(elig.positive_weights())


def negative_population(
    corpus: aligned_corpus,
    labeling: place_labeling,
    negative_exclusion: int = DEFAULT_NEGATIVE_EXCLUSION,
    split: Split = None,
) -> int:
    """
    @brief Number of ordered negative pairs: any two traverses (the same one
           included) and index separation above max(s, negative_exclusion).
    """
    elig = _eligibility(corpus, labeling, negative_exclusion, split)
    return elig.population(elig.negative_weights())


def triplet_population(
    corpus: aligned_corpus,
    labeling: place_labeling,
    negative_exclusion: int = DEFAULT_NEGATIVE_EXCLUSION,
    split: Split = None,
) -> int:
    # pylint: disable=missing-function-docstring
    elig = _eligibility(corpus, labeling, negative_exclusion, split)
    return elig.population(elig.triplet_weights())


def mine_pairs(
    corpus: aligned_corpus,
    labeling: place_labeling,
    n_pos: int,
    n_neg: int,
    seed: int = 0,
    negative_exclusion: int = DEFAULT_NEGATIVE_EXCLUSION,
    split: Split = None,
) -> List[pair_sample]:
    """
    @brief Sample positive and negative pairs uniformly without replacement.

    @param corpus: Aligned corpus with at least two traverses.
    @param labeling: Same-place predicate.
    @param n_pos: Positive pairs: different traverses, |i - j| <= s.
    @param n_neg: Negative pairs: |i - j| > max(s, negative_exclusion).
    @param seed: numpy Generator seed.
    @param negative_exclusion: Minimum separation for negatives.
    @param split: Partition (its train indices are used) or explicit index list.

    @return n_pos positive pairs followed by n_neg negative pairs.

    Usage:
        pairs = mine_pairs(corpus, place_labeling(), 1000, 1000, seed=0, split=part)
    """
    elig = _eligibility(corpus, labeling, negative_exclusion, split)
    rng = np.random.default_rng(seed)
    samples: List[pair_sample] = []

    weights = elig.positive_weights()
    ranks = _draw(rng, elig.population(weights), n_pos, "positive pairs")
    if len(ranks):
        t, a, rank = elig.split_rank(ranks, weights)
        u, j = elig.positive_partner(t, a, rank)
        i = elig.allowed[a]
        samples.extend(
            pair_sample(frame_ref(int(t[k]), int(i[k])), frame_ref(int(u[k]), int(j[k])),
                        pair_sample.POSITIVE)
            for k in range(len(ranks))
        )

    weights = elig.negative_weights()
    ranks = _draw(rng, elig.population(weights), n_neg, "negative pairs")
    if len(ranks):
        t, a, rank = elig.split_rank(ranks, weights)
        v, k_idx = elig.negative_partner(a, rank)
        i = elig.allowed[a]
        samples.extend(
            pair_sample(frame_ref(int(t[k]), int(i[k])), frame_ref(int(v[k]), int(k_idx[k])),
                        pair_sample.NEGATIVE)
            for k in range(len(ranks))
        )

    logger.info("mined %d positive and %d negative pairs (seed %d)", n_pos, n_neg, seed)
    return samples


def mine_triplets(
    corpus: aligned_corpus,
    labeling: place_labeling,
    n: int,
    seed: int = 0,
    negative_exclusion: int = DEFAULT_NEGATIVE_EXCLUSION,
    split: Split = None,
) -> List[triplet_sample]:
    """
    @brief Sample triplets uniformly without replacement: (neutral, positive)
           is a positive pair and (neutral, negative) a negative pair, the
           negative drawn from any traverse.
    """
    elig = _eligibility(corpus, labeling, negative_exclusion, split)
    rng = np.random.default_rng(seed)
    weights = elig.triplet_weights()
    ranks = _draw(rng, elig.population(weights), n, "triplets")
    if not len(ranks):
        return []

    t, a, rank = elig.split_rank(ranks, weights)
    neg_span = elig.negative_weights()[a]
    u, j = elig.positive_partner(t, a, rank // neg_span)
    v, k_idx = elig.negative_partner(a, rank % neg_span)
    i = elig.allowed[a]
    logger.info("mined %d triplets (seed %d)", n, seed)
    return [
        triplet_sample(
            frame_ref(int(t[k]), int(i[k])),
            frame_ref(int(u[k]), int(j[k])),
            frame_ref(int(v[k]), int(k_idx[k])),
        )
        for k in range(len(ranks))
    ]


def _positive_mask(label) -> Union[bool, torch.Tensor]:
    if isinstance(label, str):
        if label not in (pair_sample.POSITIVE, pair_sample.NEGATIVE):
            raise ValueError(f"pair label must be positive or negative, got {label!r}")
        return label == pair_sample.POSITIVE
    if isinstance(label, torch.Tensor):
        return label.to(torch.bool)
    return bool(label)


def contrastive_loss(d: Number, label, margin_c: float = 1.0) -> Number:
    """
    @brief Contrastive loss: d^2 for positives, max(0, margin_c - d)^2 for
           negatives.

    @param d: Euclidean distance, a float or a tensor of distances.
    @param label: "positive"/"negative", a bool, or a bool tensor (True for
                  positive) matching d.
    @param margin_c: Negative margin, > 0.

    @return float for float input, tensor with autograd history otherwise.
    """
    if not margin_c > 0.0:
        raise ValueError(f"margin_c must be > 0, got {margin_c}")
    positive = _positive_mask(label)
    if isinstance(d, torch.Tensor):
        if bool((d < 0).any()):
            raise ValueError("contrastive_loss got a negative distance")
        positive = torch.as_tensor(positive, dtype=torch.bool)
        return torch.where(positive, d * d, torch.relu(margin_c - d) ** 2)

    d = float(d)
    if d < 0.0:
        raise ValueError(f"contrastive_loss got a negative distance {d}")
    if positive:
        return d * d
    return max(0.0, margin_c - d) ** 2


def wohlhart_lepetit_loss(d_p: Number, d_n: Number, margin: float = 1.0) -> Number:
    """
    @brief Triplet loss max{0, 1 - d_n / (margin + d_p)}, bounded in [0, 1].

    @param d_p: Neutral-positive distance.
    @param d_n: Neutral-negative distance.
    @param margin: > 0.

    Evaluated as (margin + d_p - d_n) / (margin + d_p) below the zero branch so
    that the result is 0 exactly when d_n >= margin + d_p.

    Usage:
        wohlhart_lepetit_loss(1.0, 1.0, 1.0)  # 0.5
    """
    if not margin > 0.0:
        raise ValueError(f"margin must be > 0, got {margin}")
    if isinstance(d_p, torch.Tensor) or isinstance(d_n, torch.Tensor):
        d_p = torch.as_tensor(d_p)
        d_n = torch.as_tensor(d_n)
        if bool((d_p < 0).any()) or bool((d_n < 0).any()):
            raise ValueError("wohlhart_lepetit_loss got a negative distance")
        scale = margin + d_p
        return torch.relu(scale - d_n) / scale

    d_p, d_n = float(d_p), float(d_n)
    if d_p < 0.0 or d_n < 0.0:
        raise ValueError(f"wohlhart_lepetit_loss got a negative distance ({d_p}, {d_n})")
    scale = margin + d_p
    if d_n >= scale:
        return 0.0
    return (scale - d_n) / scale


def _index_samples(
    samples: Sequence,
) -> Tuple[List[frame_ref], torch.Tensor, Optional[torch.Tensor]]:
    if not samples:
        raise ValueError("no training samples: empty batch")
    if all(isinstance(s, triplet_sample) for s in samples):
        columns = [(s.neutral, s.positive, s.negative) for s in samples]
        labels = None
    elif all(isinstance(s, pair_sample) for s in samples):
        columns = [(s.anchor, s.other) for s in samples]
        labels = torch.tensor([s.positive for s in samples], dtype=torch.bool)
    else:
        raise ValueError("training samples must be all pairs or all triplets")

    rows: Dict[frame_ref, int] = {}
    for refs in columns:
        for ref in refs:
            rows.setdefault(ref, len(rows))
    index = torch.tensor([[rows[ref] for ref in refs] for refs in columns], dtype=torch.int64)
    return list(rows), index, labels


def train(
    model: embedding_model,
    samples: Sequence,
    cfg: train_config,
    corpus: aligned_corpus,
    on_epoch: Optional[Callable[[int, float, int], None]] = None,
    progress: bool = False,
) -> Tuple[embedding_model, List[float]]:
    """
    @brief Minibatch SGD on the mean batch loss.

    @param model: Initialised embedding model, updated in place.
    @param samples: All triplet_sample (Wohlhart-Lepetit loss) or all
                    pair_sample (contrastive loss).
    @param cfg: Training configuration.
    @param corpus: Corpus the sample frame references point into.
    @param on_epoch: Called as on_epoch(epoch, mean_loss, samples_seen) after
                     every epoch, e.g. to write a checkpoint.
    @param progress: Show a tqdm bar over epochs.

    @return (model, mean loss per epoch).

    Without fine_tune only the head receives gradients and the tap features
    are computed once up front. Batches are drawn by a torch.Generator seeded
    with cfg.seed.
    When fine-tuning the head steps at cfg.head_lr and the backbone at cfg.lr.
    """
    if not model.initialized:
        raise RuntimeError("embedding head is not initialised; load weights first")
    refs, index, labels = _index_samples(samples)
    for ref in refs:
        if not 0 <= ref.traverse < len(corpus.traverses) or not 0 <= ref.index < len(corpus):
            raise IndexError(f"sample frame {ref} outside corpus")

    model.set_fine_tune(cfg.fine_tune)
    images = np.stack([corpus.traverses[r.traverse].frames[r.index].pixels() for r in refs])
    if cfg.fine_tune:
        inputs = images_to_tensor(model, images)

        def encode(rows: torch.Tensor) -> torch.Tensor:
            return model(inputs[rows])

    else:
        features = torch.from_numpy(extract_batch(model, images))

        def encode(rows: torch.Tensor) -> torch.Tensor:
            return model.head(features[rows])

    groups = [{"params": list(model.head.parameters()), "lr": cfg.head_lr}]
    if cfg.fine_tune:
        groups.append({"params": list(model.backbone.parameters()), "lr": cfg.lr})
    groups = [g for g in groups if g["params"] and g["lr"] > 0.0]
    optimizer = torch.optim.SGD(groups, lr=cfg.head_lr) if groups else None
    generator = torch.Generator().manual_seed(cfg.seed)

    n = len(index)
    history: List[float] = []
    seen = 0
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not progress):
        order = torch.randperm(n, generator=generator)
        total = 0.0
        for batch, start in enumerate(range(0, n, cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            cols = index[rows]
            with torch.set_grad_enabled(optimizer is not None):
                anchor = encode(cols[:, 0])
                if labels is None:
                    d_p = F.pairwise_distance(anchor, encode(cols[:, 1]))
                    d_n = F.pairwise_distance(anchor, encode(cols[:, 2]))
                    loss = wohlhart_lepetit_loss(d_p, d_n, cfg.margin).mean()
                else:
                    d = F.pairwise_distance(anchor, encode(cols[:, 1]))
                    loss = contrastive_loss(d, labels[rows], cfg.contrastive_margin).mean()

            value = float(loss.item())
            if not np.isfinite(value):
                raise FloatingPointError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch} "
                    f"(lr={cfg.lr}, batch_size={cfg.batch_size})"
                )
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            logger.debug("epoch %d batch %d loss %.6f", epoch, batch, value)
            total += value * len(rows)

        seen += n
        mean = total / n
        history.append(mean)
        logger.info("epoch %d/%d mean loss %.6f", epoch, cfg.epochs, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean, seen)

    return model, history


_PAIR_COLUMNS = ["anchor_traverse", "anchor_index", "other_traverse", "other_index", "label"]
_TRIPLET_COLUMNS = [
    "neutral_traverse",
    "neutral_index",
    "positive_traverse",
    "positive_index",
    "negative_traverse",
    "negative_index",
]


def write_samples(samples: Sequence, path: Union[str, Path]) -> Path:
    """
    @brief Store mined samples as CSV, one sample per row.
    """
    if samples and isinstance(samples[0], triplet_sample):
        rows = [(*s.neutral, *s.positive, *s.negative) for s in samples]
        frame = pd.DataFrame(rows, columns=_TRIPLET_COLUMNS)
    else:
        rows = [(*s.anchor, *s.other, s.label) for s in samples]
        frame = pd.DataFrame(rows, columns=_PAIR_COLUMNS)
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False)
    return Path(path)


def read_samples(path: Union[str, Path]) -> List:
    # pylint: disable=missing-function-docstring
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"sample file not found: {path}")
    frame = pd.read_csv(path)
    if list(frame.columns) == _TRIPLET_COLUMNS:
        values = frame.to_numpy(dtype=np.int64)
        return [
            triplet_sample(frame_ref(*map(int, v[0:2])), frame_ref(*map(int, v[2:4])),
                           frame_ref(*map(int, v[4:6])))
            for v in values
        ]
    if list(frame.columns) == _PAIR_COLUMNS:
        return [
            pair_sample(
                frame_ref(int(r.anchor_traverse), int(r.anchor_index)),
                frame_ref(int(r.other_traverse), int(r.other_index)),
                str(r.label),
            )
            for r in frame.itertuples(index=False)
        ]
    raise ValueError(f"{path}: unrecognised sample columns {list(frame.columns)}")
