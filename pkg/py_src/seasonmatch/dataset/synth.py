"""
Synthetic multi-season corpora: one procedural strip cut into overlapping
crops, one appearance transform per condition.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..formats import atomic_path
from .dataset_h import (
    MANIFEST_COLUMNS,
    SEASONS,
    aligned_corpus,
    frame,
    save_image,
    traverse,
)

logger = logging.getLogger(__name__)

# Per-season appearance at strength 1, in SEASONS order
_PRESET_BRIGHTNESS = (0.0, -0.08, 0.10, 0.04)
_PRESET_HUE = (0.0, 0.12, -0.06, 0.07)
_PRESET_NOISE = (0.02, 0.04, 0.05, 0.03)
_PRESET_WHITENING = (0.0, 0.0, 0.55, 0.10)

# Octaves of the procedural strip: (cell size in pixels, weight)
_OCTAVES = ((16, 0.45), (8, 0.25), (4, 0.18), (2, 0.12))

_SPEED_KMH = 60.0
_FRAME_STEP_M = _SPEED_KMH / 3.6
_M_PER_DEG_LAT = 111195.0
_GPS_JITTER_M = 2.0
_START_LAT = 63.43
_START_LON = 10.39
_START_TIME = 1338508800


@dataclass(frozen=True)
class synth_config:
    """
    Desk-scale stand-in for a multi-season railway corpus.

    The appearance tuples hold one value per condition; when left as None the
    built-in season preset (cycled past four conditions) is used. Every value
    is multiplied by strength, so strength=0 yields identical traverses.

    rendering reseeds the pixel noise and the GPS jitter only, giving a second
    recording of the same conditions over the same track.
    """

    n_places: int = 500
    n_conditions: int = 4
    image_size: Tuple[int, int, int] = (32, 64, 3)
    brightness: Optional[Tuple[float, ...]] = None
    hue: Optional[Tuple[float, ...]] = None
    noise: Optional[Tuple[float, ...]] = None
    whitening: Optional[Tuple[float, ...]] = None
    strength: float = 1.0
    stride: int = 4
    seed: int = 0
    rendering: int = 0

    def __post_init__(self) -> None:
        height, width, channels = self.image_size
        if self.n_places < 1:
            raise ValueError(f"n_places must be >= 1, got {self.n_places}")
        if self.n_conditions < 1:
            raise ValueError(f"n_conditions must be >= 1, got {self.n_conditions}")
        if height < 1 or width < 1 or channels not in (1, 3):
            raise ValueError(
                f"image_size must be (H>=1, W>=1, C in {{1, 3}}), got {self.image_size}"
            )
        if self.rendering < 0:
            raise ValueError(f"rendering must be >= 0, got {self.rendering}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.strength <= 4.0:
            raise ValueError(f"strength must lie in [0, 4], got {self.strength}")
        for name, lo, hi in (
            ("brightness", -0.5, 0.5),
            ("hue", -1.0, 1.0),
            ("noise", 0.0, 0.5),
            ("whitening", 0.0, 1.0),
        ):
            values = getattr(self, name)
            if values is None:
                continue
            if len(values) != self.n_conditions:
                raise ValueError(
                    f"{name} needs {self.n_conditions} values, got {len(values)}"
                )
            for value in values:
                if not lo <= value <= hi:
                    raise ValueError(f"{name} value {value} outside [{lo}, {hi}]")

    def condition_name(self, c: int) -> str:
        # pylint: disable=missing-function-docstring
        return SEASONS[c] if c < len(SEASONS) else f"cond{c}"

    def appearance(self, c: int) -> Tuple[float, float, float, float]:
        """
        @brief (brightness, hue, noise, whitening) of condition c after scaling.
        """
        values = []
        for own, preset in (
            (self.brightness, _PRESET_BRIGHTNESS),
            (self.hue, _PRESET_HUE),
            (self.noise, _PRESET_NOISE),
            (self.whitening, _PRESET_WHITENING),
        ):
            base = own[c] if own is not None else preset[c % len(preset)]
            values.append(base * self.strength)
        brightness, hue, noise, whitening = values
        return brightness, hue, max(0.0, noise), min(1.0, max(0.0, whitening))


def _smooth_field(rng: np.random.Generator, height: int, width: int, channels: int, cell: int):
    """Bilinear upsampling of a coarse uniform grid with the given cell size."""
    grid = rng.random((height // cell + 2, width // cell + 2, channels))
    ys = np.arange(height) / cell
    xs = np.arange(width) / cell
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 * (1.0 - fx) + g01 * fx
    bottom = g10 * (1.0 - fx) + g11 * fx
    return top * (1.0 - fy) + bottom * fy


def _strip(cfg: synth_config) -> np.ndarray:
    height, width, channels = cfg.image_size
    strip_width = width + cfg.stride * (cfg.n_places - 1)
    rng = np.random.default_rng([cfg.seed, 0])

    strip = np.zeros((height, strip_width, channels), dtype=np.float64)
    for cell, weight in _OCTAVES:
        strip += weight * _smooth_field(rng, height, strip_width, channels, cell)

    # sky brighter than ground
    ramp = np.linspace(1.0, 0.8, height)[:, None, None]
    strip *= ramp
    lo, hi = strip.min(), strip.max()
    return 0.25 + 0.65 * (strip - lo) / max(hi - lo, 1e-12)


def _hue_rotation(angle: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    axis = np.full(3, 1.0 / math.sqrt(3.0))
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _apply_appearance(
    base: np.ndarray, cfg: synth_config, c: int, place: int
) -> np.ndarray:
    brightness, hue, noise, whitening = cfg.appearance(c)
    img = base
    if hue and img.shape[2] == 3:
        img = img @ _hue_rotation(hue * math.pi).T
    if brightness:
        img = img + brightness
    if whitening:
        # snow settles on the lower part of the frame
        height = img.shape[0]
        mask = np.clip((np.arange(height) / height - 0.4) / 0.6, 0.0, 1.0)[:, None, None]
        img = img + whitening * mask * (1.0 - img)
    if noise:
        rng = np.random.default_rng([cfg.seed, 1, c, place, cfg.rendering])
        img = img + noise * rng.standard_normal(img.shape)
    if img is base:
        return base.astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_corpus(cfg: synth_config) -> aligned_corpus:
    """
    @brief Generate an aligned corpus of cfg.n_conditions traverses with
           cfg.n_places frames each.

    @param cfg: Generator configuration.

    @return Corpus whose frame i in every traverse is crop i of the same
            procedural strip under that condition's appearance transform.

    Crops advance cfg.stride pixels per place, so neighbouring places share
    most of their content. Frames also carry a GPS track sampled once per
    second at 60 km/h with a little per-condition jitter. Identical cfg gives
    bit-identical output.

    Usage:
        corpus = synth_corpus(synth_config(n_places=100, n_conditions=2))
    """
    height, width, _ = cfg.image_size
    strip = _strip(cfg)
    step_deg = _FRAME_STEP_M / _M_PER_DEG_LAT

    traverses: List[traverse] = []
    for c in range(cfg.n_conditions):
        jitter = np.random.default_rng([cfg.seed, 2, c, cfg.rendering]).normal(
            0.0, _GPS_JITTER_M / _M_PER_DEG_LAT, size=(cfg.n_places, 2)
        )
        frames = []
        for i in range(cfg.n_places):
            base = strip[:, i * cfg.stride : i * cfg.stride + width]
            lat = _START_LAT + i * step_deg + jitter[i, 0]
            lon = _START_LON + 0.002 * math.sin(i / 50.0) + jitter[i, 1] / math.cos(
                math.radians(_START_LAT)
            )
            frames.append(
                frame(
                    index=i,
                    timestamp=_START_TIME + c * 90 * 86400 + i,
                    lat=float(lat),
                    lon=float(lon),
                    speed=_SPEED_KMH,
                    image=_apply_appearance(base, cfg, c, i),
                )
            )
        name = cfg.condition_name(c)
        source_id = f"synth:{cfg.seed}:{c}" + (f":{cfg.rendering}" if cfg.rendering else "")
        traverses.append(traverse(name, frames, source_id=source_id))
        logger.debug("synthesised %s: %d frames of %dx%d", name, cfg.n_places, height, width)

    logger.info(
        "synthetic corpus: %d conditions x %d places (seed %d)",
        cfg.n_conditions,
        cfg.n_places,
        cfg.seed,
    )
    return aligned_corpus(traverses)


def write_synth(corpus: aligned_corpus, outdir: Union[str, Path]) -> List[Path]:
    """
    @brief Store a corpus as PNG frames plus one manifest per traverse.

    @param corpus: Corpus whose frames carry pixels.
    @param outdir: Directory receiving <season>/NNNNN.png and <season>.csv.

    @return Manifest paths in traverse order.
    """
    outdir = Path(outdir)
    manifests = []
    for t in corpus.traverses:
        image_dir = outdir / t.season
        image_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for f in t.frames:
            name = f"{f.index:05d}.png"
            with atomic_path(image_dir / name) as tmp:
                save_image(tmp, f.pixels())
            rows.append(
                {
                    "index": f.index,
                    "timestamp": f.timestamp,
                    "lat": repr(f.lat),
                    "lon": repr(f.lon),
                    "speed": repr(f.speed),
                    "image_path": f"{t.season}/{name}",
                }
            )
        manifest = outdir / f"{t.season}.csv"
        with atomic_path(manifest) as tmp:
            pd.DataFrame(rows, columns=list(MANIFEST_COLUMNS)).to_csv(tmp, index=False)
        manifests.append(manifest)
    logger.info("wrote %d synthetic manifests to %s", len(manifests), outdir)
    return manifests
