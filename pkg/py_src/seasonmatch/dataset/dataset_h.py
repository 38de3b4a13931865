"""
Corpus records: frames, traverses, aligned corpora, place labels, partitions.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

# pylint: disable=too-few-public-methods

SEASONS = ("summer", "fall", "winter", "spring")

MANIFEST_COLUMNS = ("index", "timestamp", "lat", "lon", "speed", "image_path")

EARTH_RADIUS_M = 6371008.8

DEFAULT_SPEED_MIN = 15.0
DEFAULT_DARKNESS_MIN = 0.2
DEFAULT_ALIGN_TOL_M = 20.0
DEFAULT_BUFFER = 141

# Reference corpus: frames per traverse and test segment length
NORDLAND_FRAMES = 28865
NORDLAND_SEGMENT = 1150


def great_circle_m(lat1, lon1, lat2, lon2) -> np.ndarray:
    """
    @brief Haversine distance in meters between WGS-84 points given in degrees.

    Broadcasts like numpy, so one point against a whole track is one call.
    """
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2) - np.asarray(lon1))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def load_image(
    path: Union[str, Path], size: Optional[Tuple[int, int, int]] = None
) -> np.ndarray:
    """
    @brief Read a raster into an H x W x C float32 array in [0, 1].

    @param path: Image file (PNG or any lossless format Pillow reads).
    @param size: Optional (H, W, C); the image is converted to C channels and
                 resized to H x W when it differs.

    @return Image array.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")

    with Image.open(path) as img:
        if size is not None:
            height, width, channels = size
            img = img.convert("L" if channels == 1 else "RGB")
            if img.size != (width, height):
                img = img.resize((width, height), Image.Resampling.BILINEAR)
        elif img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        pixels = np.asarray(img, dtype=np.float32) / 255.0

    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    return pixels


def save_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    # pylint: disable=missing-function-docstring
    data = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path, format="PNG")


@dataclass
class frame:
    """
    One sampled frame of a traverse.

    image is filled lazily from image_path by pixels(); frames built in memory
    (synthetic corpora) carry their pixels from the start.
    """

    index: int
    timestamp: int
    lat: float
    lon: float
    speed: float
    image_path: str = ""
    image: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    image_size: Optional[Tuple[int, int, int]] = field(default=None, repr=False, compare=False)

    def pixels(self) -> np.ndarray:
        """
        @brief Return the frame image as H x W x C reals in [0, 1].

        Usage:
            img = t.frames[0].pixels()
        """
        if self.image is None:
            if not self.image_path:
                raise FileNotFoundError(f"frame {self.index} has no pixels and no image path")
            self.image = load_image(self.image_path, self.image_size)
        return self.image

    def mean_intensity(self) -> float:
        """
        @brief Arithmetic mean over every pixel and channel of the image.
        """
        return float(self.pixels().mean(dtype=np.float64))


@dataclass
class traverse:
    """
    One season's pass along the route: frames ordered by timestamp, indexed
    0..len-1 without gaps.
    """

    season: str
    frames: List[frame]
    source_id: str = ""
    dropped_rows: int = 0

    def __post_init__(self) -> None:
        for k, f in enumerate(self.frames):
            if f.index != k:
                raise ValueError(f"{self.season}: frame {k} carries index {f.index}")
            if k and f.timestamp <= self.frames[k - 1].timestamp:
                raise ValueError(f"{self.season}: timestamps not strictly increasing at frame {k}")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, index: int) -> frame:
        return self.frames[index]

    def __iter__(self) -> Iterator[frame]:
        return iter(self.frames)

    @property
    def lats(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        return np.array([f.lat for f in self.frames], dtype=np.float64)

    @property
    def lons(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        return np.array([f.lon for f in self.frames], dtype=np.float64)

    def images(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """
        @brief Stack frame images into an N x H x W x C array.

        @param indices: Frame indices to stack, all frames when omitted.
        """
        if indices is None:
            indices = range(len(self.frames))
        return np.stack([self.frames[i].pixels() for i in indices])


@dataclass
class aligned_corpus:
    """
    Traverses of equal length where frame i of every traverse shows the same
    place. When align_tol_m is given the GPS distance at every index is checked
    against it.
    """

    traverses: List[traverse]
    align_tol_m: Optional[float] = None
    length: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.traverses:
            raise ValueError("aligned corpus needs at least one traverse")

        self.length = len(self.traverses[0])
        for t in self.traverses:
            if len(t) != self.length:
                raise ValueError(
                    f"traverse {t.season} has {len(t)} frames, expected {self.length}"
                )

        seasons = self.seasons
        if len(set(seasons)) != len(seasons):
            raise ValueError(f"duplicate season labels in corpus: {seasons}")

        if self.align_tol_m is not None:
            for k, t in enumerate(self.traverses):
                for u in self.traverses[k + 1 :]:
                    d = great_circle_m(t.lats, t.lons, u.lats, u.lons)
                    worst = int(np.argmax(d))
                    if d[worst] > self.align_tol_m:
                        raise ValueError(
                            f"{u.season} frame {worst} is {d[worst]:.1f} m from {t.season}, "
                            f"above align_tol_m={self.align_tol_m}"
                        )

    def __len__(self) -> int:
        return self.length

    @property
    def seasons(self) -> List[str]:
        # pylint: disable=missing-function-docstring
        return [t.season for t in self.traverses]

    def image_size(self) -> Tuple[int, int, int]:
        """
        @brief (H, W, C) of the corpus frames, read from the first frame.
        """
        return tuple(self.traverses[0].frames[0].pixels().shape)


@dataclass(frozen=True)
class place_labeling:
    """
    Frames i and j depict the same place when |i - j| <= same_place_sep.
    window records the sliding-window width used to group frames.
    """

    same_place_sep: int = 3
    window: int = 5

    def __post_init__(self) -> None:
        if self.same_place_sep < 0:
            raise ValueError(f"same_place_sep must be >= 0, got {self.same_place_sep}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")

    def same_place(self, i: int, j: int) -> bool:
        """
        @brief Same-place predicate: reflexive, symmetric, not transitive.

        Usage:
            place_labeling().same_place(10, 13)  # True
        """
        return abs(i - j) <= self.same_place_sep


@dataclass
class partition:
    """
    Test segments as half-open [start, end) ranges, sorted, plus the train
    indices left after removing each segment widened by buffer on both sides.
    """

    test_segments: List[Tuple[int, int]]
    buffer: int
    train_indices: np.ndarray
    total: int

    @property
    def test_indices(self) -> np.ndarray:
        # pylint: disable=missing-function-docstring
        if not self.test_segments:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(a, b, dtype=np.int64) for a, b in self.test_segments])

    @property
    def discarded(self) -> int:
        # pylint: disable=missing-function-docstring
        return self.total - len(self.train_indices) - len(self.test_indices)

    def segment_of(self, index: int) -> int:
        """
        @brief Position of the test segment holding index, -1 when none does.
        """
        for k, (a, b) in enumerate(self.test_segments):
            if a <= index < b:
                return k
        return -1
