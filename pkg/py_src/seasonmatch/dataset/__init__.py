"""
Traverse ingestion, station/tunnel filtering, GPS alignment, place labels and
train/test partitions.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..formats import atomic_path
from .dataset_h import *
from .synth import synth_config, synth_corpus, write_synth

logger = logging.getLogger(__name__)

_TRAIN = 0
_TEST = 1
_DISCARD = 2


def load_traverse(
    manifest_path: Union[str, Path],
    season: Optional[str] = None,
    image_size: Optional[Tuple[int, int, int]] = None,
) -> traverse:
    """
    @brief Read a traverse manifest (index,timestamp,lat,lon,speed,image_path).

    @param manifest_path: UTF-8 CSV with a header row.
    @param season:        Season label, defaults to the manifest file stem.
    @param image_size:    Optional (H, W, C) the frame images are resized to
                          when they are loaded.

    @return Traverse with frames sorted by timestamp and re-indexed from 0.

    Rows whose timestamp, latitude, longitude or speed does not parse or lies
    outside its valid range are dropped and counted in traverse.dropped_rows.
    Relative image paths are resolved against the manifest directory.

    Usage:
        t = load_traverse("corpus/winter.csv")
    """
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")

    df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing manifest columns {missing}")

    ts = pd.to_numeric(df["timestamp"].str.strip(), errors="coerce")
    lat = pd.to_numeric(df["lat"].str.strip(), errors="coerce")
    lon = pd.to_numeric(df["lon"].str.strip(), errors="coerce")
    speed = pd.to_numeric(df["speed"].str.strip(), errors="coerce")

    valid = (
        ts.notna()
        & (ts == ts.round())
        & ts.ge(0)
        & ts.lt(2**63)
        & lat.between(-90.0, 90.0)
        & lon.between(-180.0, 180.0)
        & speed.ge(0.0)
    )
    dropped = int((~valid).sum())
    if dropped:
        for row in np.flatnonzero(~valid.to_numpy()):
            logger.debug("%s: dropping row %d (invalid timestamp or GPS)", path.name, row + 1)
        logger.warning("%s: dropped %d of %d rows with invalid GPS", path.name, dropped, len(df))

    if not valid.any():
        raise ValueError(f"{path}: no valid rows")

    ts = ts[valid].astype(np.int64).to_numpy()
    lat = lat[valid].to_numpy(dtype=np.float64)
    lon = lon[valid].to_numpy(dtype=np.float64)
    speed = speed[valid].to_numpy(dtype=np.float64)
    image_paths = df.loc[valid, "image_path"].str.strip().to_numpy()

    order = np.argsort(ts, kind="stable")
    ts = ts[order]
    dup = np.flatnonzero(np.diff(ts) == 0)
    if len(dup):
        raise ValueError(f"{path}: duplicate timestamp {ts[dup[0]]}")

    base = path.parent
    frames = []
    for k, row in enumerate(order):
        image_path = image_paths[row]
        if image_path and not Path(image_path).is_absolute():
            image_path = str(base / image_path)
        frames.append(
            frame(
                index=k,
                timestamp=int(ts[k]),
                lat=float(lat[row]),
                lon=float(lon[row]),
                speed=float(speed[row]),
                image_path=image_path,
                image_size=image_size,
            )
        )

    logger.info("%s: loaded %d frames", path.name, len(frames))
    return traverse(
        season=season if season is not None else path.stem,
        frames=frames,
        source_id=str(path),
        dropped_rows=dropped,
    )


def write_traverse(t: traverse, manifest_path: Union[str, Path]) -> Path:
    """
    @brief Write a traverse back out as a manifest CSV.

    @param t:             Traverse whose frames all have an image_path.
    @param manifest_path: Destination; image paths are written relative to its
                          directory.

    @return The manifest path.
    """
    path = Path(manifest_path)
    rows = []
    for f in t.frames:
        if not f.image_path:
            raise ValueError(f"{t.season}: frame {f.index} has no image path to write")
        rows.append(
            {
                "index": f.index,
                "timestamp": f.timestamp,
                "lat": repr(f.lat),
                "lon": repr(f.lon),
                "speed": repr(f.speed),
                "image_path": Path(
                    os.path.relpath(Path(f.image_path).resolve(), path.parent.resolve())
                ).as_posix(),
            }
        )
    with atomic_path(path) as tmp:
        pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(tmp, index=False)
    return path


def filter_frames(
    t: traverse,
    speed_min: float = DEFAULT_SPEED_MIN,
    darkness_min: float = DEFAULT_DARKNESS_MIN,
) -> traverse:
    """
    @brief Drop station frames (slow) and tunnel frames (dark).

    @param t:            Traverse to filter.
    @param speed_min:    Minimum GPS speed in km/h.
    @param darkness_min: Minimum mean image intensity in [0, 1].

    @return Traverse with exactly the frames where speed >= speed_min and
            mean intensity >= darkness_min, re-indexed from 0.

    Images are only read for frames that pass the speed test, and not at all
    when darkness_min is 0.

    Usage:
        t = filter_frames(t, speed_min=15.0, darkness_min=0.2)
    """
    if speed_min < 0 or darkness_min < 0:
        raise ValueError(
            f"thresholds must be non-negative (speed_min={speed_min}, darkness_min={darkness_min})"
        )

    kept: List[frame] = []
    for f in t.frames:
        keep = f.speed >= speed_min
        intensity = None
        if keep and darkness_min > 0:
            intensity = f.mean_intensity()
            keep = intensity >= darkness_min
        logger.debug(
            "%s frame %d: speed %.2f intensity %s -> %s",
            t.season,
            f.index,
            f.speed,
            "n/a" if intensity is None else f"{intensity:.4f}",
            "keep" if keep else "drop",
        )
        if keep:
            kept.append(replace(f, index=len(kept)))

    if not kept:
        raise ValueError(
            f"{t.season}: all {len(t)} frames filtered out; review speed_min={speed_min} "
            f"and darkness_min={darkness_min}"
        )

    logger.info("%s: kept %d of %d frames", t.season, len(kept), len(t))
    return traverse(t.season, kept, t.source_id, t.dropped_rows)


def align(
    traverses: Sequence[traverse],
    align_tol_m: float = DEFAULT_ALIGN_TOL_M,
    window: Optional[int] = None,
) -> aligned_corpus:
    """
    @brief Align traverses so that equal indices depict the same place.

    @param traverses:   Two or more traverses with GPS.
    @param align_tol_m: Largest accepted great-circle distance between matched
                        frames, in meters.
    @param window:      Optional bound on how many frames past the previous
                        match the search may look. Unbounded by default.

    @return Aligned corpus, traverses in input order.

    The shortest traverse is the reference (the first one on ties). For each
    reference frame, every other traverse contributes its nearest frame after
    its previous match; the reference frame is dropped when any matched pair
    is farther apart than align_tol_m.

    Usage:
        corpus = align([summer, winter], align_tol_m=20.0)
    """
    if len(traverses) < 2:
        raise ValueError(f"alignment needs at least 2 traverses, got {len(traverses)}")
    if align_tol_m < 0:
        raise ValueError(f"align_tol_m must be non-negative, got {align_tol_m}")
    for t in traverses:
        if len(t) == 0:
            raise ValueError(f"traverse {t.season} is empty")

    ref_k = min(range(len(traverses)), key=lambda k: len(traverses[k]))
    ref = traverses[ref_k]
    lats = [t.lats for t in traverses]
    lons = [t.lons for t in traverses]

    cursor = [-1] * len(traverses)
    picked: List[List[int]] = [[] for _ in traverses]
    dropped = 0

    for i in range(len(ref)):
        match = {ref_k: i}
        for k, t in enumerate(traverses):
            if k == ref_k:
                continue
            start = cursor[k] + 1
            stop = len(t) if window is None else min(len(t), start + window)
            if start >= stop:
                break
            d = great_circle_m(
                lats[ref_k][i], lons[ref_k][i], lats[k][start:stop], lons[k][start:stop]
            )
            j = int(np.argmin(d))
            if d[j] > align_tol_m:
                break
            match[k] = start + j

        if len(match) == len(traverses) and _pairwise_within(match, lats, lons, align_tol_m):
            for k, j in match.items():
                cursor[k] = j
                picked[k].append(j)
        else:
            dropped += 1
            logger.debug("%s frame %d: no match within %.1f m", ref.season, i, align_tol_m)

    if not picked[ref_k]:
        raise ValueError(
            f"alignment is empty: no {ref.season} frame has a match within {align_tol_m} m "
            "in every traverse"
        )
    if dropped:
        logger.warning("alignment dropped %d of %d reference frames", dropped, len(ref))

    aligned = [
        traverse(
            t.season,
            [replace(t.frames[j], index=n) for n, j in enumerate(picked[k])],
            t.source_id,
            t.dropped_rows,
        )
        for k, t in enumerate(traverses)
    ]
    logger.info("aligned %d traverses to %d frames", len(aligned), len(picked[ref_k]))
    return aligned_corpus(aligned, align_tol_m=align_tol_m)


def _pairwise_within(match: dict, lats: list, lons: list, tol: float) -> bool:
    keys = sorted(match)
    for a, ka in enumerate(keys):
        for kb in keys[a + 1 :]:
            d = great_circle_m(
                lats[ka][match[ka]], lons[ka][match[ka]], lats[kb][match[kb]], lons[kb][match[kb]]
            )
            if d > tol:
                return False
    return True


def same_place(labeling: place_labeling, i: int, j: int) -> bool:
    """
    @brief True when frames i and j are labeled as the same place.

    Usage:
        same_place(place_labeling(same_place_sep=3), 10, 13)  # True
    """
    return labeling.same_place(i, j)


def make_partition(
    n: int,
    test_segments: Iterable[Tuple[int, int]],
    buffer: int = DEFAULT_BUFFER,
) -> partition:
    """
    @brief Split [0, n) into test segments, buffer gaps and train frames.

    @param n:             Frames per traverse.
    @param test_segments: Half-open [start, end) ranges, pairwise disjoint.
    @param buffer:        Frames discarded on each side of every segment.

    @return Partition; every train index is more than buffer frames away from
            every test index.

    Usage:
        p = make_partition(100, [(40, 50)], buffer=5)
        len(p.train_indices)  # 80
    """
    if n <= 0:
        raise ValueError(f"partition needs n > 0, got {n}")
    if buffer < 0:
        raise ValueError(f"buffer must be >= 0, got {buffer}")

    segments = sorted((int(a), int(b)) for a, b in test_segments)
    for a, b in segments:
        if not 0 <= a < b <= n:
            raise ValueError(f"test segment [{a}, {b}) out of range for n={n}")
    for (a0, b0), (a1, b1) in zip(segments, segments[1:]):
        if a1 < b0:
            raise ValueError(f"test segments [{a0}, {b0}) and [{a1}, {b1}) overlap")

    mask = np.full(n, _TRAIN, dtype=np.int8)
    for a, b in segments:
        mask[max(0, a - buffer) : min(n, b + buffer)] = _DISCARD
    for a, b in segments:
        mask[a:b] = _TEST

    train_indices = np.flatnonzero(mask == _TRAIN).astype(np.int64)
    if len(train_indices) == 0:
        raise ValueError(f"empty train set: n={n}, segments={segments}, buffer={buffer}")

    p = partition(segments, buffer, train_indices, n)
    logger.info(
        "partition: %d train, %d test, %d discarded of %d",
        len(train_indices),
        len(p.test_indices),
        p.discarded,
        n,
    )
    return p


def default_test_segments(
    n: int, count: int = 3, length: Optional[int] = None
) -> List[Tuple[int, int]]:
    """
    @brief Lay out count equal test segments centred at (2k + 1) / (2 count) of
           the corpus.

    @param n:      Frames per traverse.
    @param count:  Number of segments.
    @param length: Segment length; scaled from the reference corpus (1,150 of
                   28,865 frames) when omitted.
    """
    if length is None:
        length = max(1, round(n * NORDLAND_SEGMENT / NORDLAND_FRAMES))
    segments = []
    for k in range(count):
        centre = n * (2 * k + 1) / (2 * count)
        start = max(0, int(round(centre - length / 2)))
        segments.append((start, min(n, start + length)))
    return segments


def default_buffer(n: int) -> int:
    """
    @brief Buffer scaled from the reference corpus: 141 frames at 28,865.
    """
    return max(1, round(n * DEFAULT_BUFFER / NORDLAND_FRAMES))


def parse_segments(text: str) -> List[Tuple[int, int]]:
    """
    @brief Parse "a:b,c:d" into [(a, b), (c, d)].
    """
    segments = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            a, b = item.split(":")
            segments.append((int(a), int(b)))
        except ValueError as ex:
            raise ValueError(f"bad test segment {item!r}, expected start:end") from ex
    return segments


def _partition_meta(path: Path) -> Path:
    return path.with_name(path.name + ".meta")


def write_partition(p: partition, path: Union[str, Path]) -> Path:
    """
    @brief Write the partition file: "train <idx>" lines ascending, then
           "test <segment_id> <idx>" lines by segment and index.

    total and buffer go to a "<name>.meta" file next to it, one
    "<key> <value>" record per line.
    """
    lines = [f"train {i}\n" for i in p.train_indices]
    for k, (a, b) in enumerate(p.test_segments):
        lines.extend(f"test {k} {i}\n" for i in range(a, b))
    path = Path(path)
    with atomic_path(_partition_meta(path)) as tmp:
        tmp.write_text(f"total {p.total}\nbuffer {p.buffer}\n", encoding="utf-8")
    with atomic_path(path) as tmp:
        tmp.write_text("".join(lines), encoding="utf-8")
    return path


def read_partition(path: Union[str, Path]) -> partition:
    """
    @brief Read a partition file written by write_partition.

    Without the .meta file total is the end of the last listed index and
    buffer is 0.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"partition file not found: {path}")

    meta = {}
    if _partition_meta(path).is_file():
        for text in _partition_meta(path).read_text(encoding="utf-8").splitlines():
            fields = text.split()
            if len(fields) != 2 or fields[0] not in ("total", "buffer"):
                raise ValueError(f"{_partition_meta(path)}: malformed record {text!r}")
            meta[fields[0]] = int(fields[1])

    train: List[int] = []
    tests: dict = {}
    for lineno, text in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        fields = text.split()
        if not fields:
            continue
        if fields[0] == "train" and len(fields) == 2:
            train.append(int(fields[1]))
        elif fields[0] == "test" and len(fields) == 3:
            tests.setdefault(int(fields[1]), []).append(int(fields[2]))
        else:
            raise ValueError(f"{path}:{lineno}: malformed partition record {text!r}")

    segments = []
    for k in sorted(tests):
        idx = sorted(tests[k])
        if idx != list(range(idx[0], idx[-1] + 1)):
            raise ValueError(f"{path}: test segment {k} is not contiguous")
        segments.append((idx[0], idx[-1] + 1))

    total = meta.get("total")
    if total is None:
        total = max([i + 1 for i in train] + [b for _, b in segments], default=0)
    return partition(
        segments, meta.get("buffer", 0), np.array(sorted(train), dtype=np.int64), total
    )
