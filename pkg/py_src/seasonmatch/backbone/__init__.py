"""
Layer-tapped feature extraction, the 128-d embedding head and the SMW1/SMD1
files that carry weights and descriptors between stages.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import logging
import zlib
from collections import OrderedDict
from ctypes import sizeof
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
from tqdm import tqdm

from ..formats import (
    SMD_HEADER_SIZE,
    SMD_MAGIC,
    SMD_VALUE_DTYPE,
    SMW_DIM,
    SMW_MAGIC,
    SMW_MIN_SIZE,
    atomic_write_bytes,
    smd_header,
    smw_magic,
    smw_record_name,
    smw_record_shape,
    smw_trailer,
)
from .backbone_h import *

logger = logging.getLogger(__name__)

DEFAULT_BATCH = 64


def build_model(
    backbone: str,
    input_size: Tuple[int, int, int],
    tap: Optional[str] = None,
    head_dim: int = HEAD_DIM,
    subtract_mean: bool = False,
    seed: int = 0,
) -> embedding_model:
    """
    @brief Instantiate a named backbone ("desk", "vgg16", "identity") for
           images of input_size.

    Usage:
        m = build_model("desk", (32, 64, 3), tap="pool4", seed=7)
    """
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}; choose from {sorted(BACKBONES)}")
    spec = BACKBONES[backbone](tuple(input_size))
    return embedding_model(spec, tap or None, head_dim, subtract_mean, seed)


def images_to_tensor(m: embedding_model, images: np.ndarray) -> torch.Tensor:
    """
    @brief N x H x W x C (or one H x W x C) image array to the model's
           N x C x H x W input tensor, checking the size against the backbone spec.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 3:
        images = images[None]
    expected = tuple(m.spec.input_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ValueError(
            f"image shape {tuple(images.shape[1:])} does not match model input {expected}"
        )
    # H x W x C -> C x H x W
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def extract_batch(
    m: embedding_model,
    images: Union[np.ndarray, Sequence[np.ndarray]],
    tap: Optional[str] = None,
    batch_size: int = DEFAULT_BATCH,
    progress: bool = False,
) -> np.ndarray:
    """
    @brief Raw tap descriptors for a stack of images.

    @param m: Model whose backbone is tapped.
    @param images: N x H x W x C array (or a list of H x W x C arrays).
    @param tap: Layer name, m.tap when omitted.
    @param batch_size: Images per forward pass.
    @param progress: Show a tqdm bar.

    @return N x tap_dim float32 array, rows flattened channel-major then
            row-major over space.
    """
    tap = m.tap if tap is None else tap
    dim = m.spec.tap_dim(tap)
    images = np.asarray(images, dtype=np.float32)
    out = np.empty((len(images), dim), dtype=np.float32)
    with torch.no_grad():
        for start in tqdm(
            range(0, len(images), batch_size), desc=f"extract {tap}", disable=not progress
        ):
            batch = images_to_tensor(m, images[start : start + batch_size])
            out[start : start + len(batch)] = m.features(batch, tap).numpy()
    if not np.all(np.isfinite(out)):
        raise ValueError(f"non-finite activations at {tap}")
    return out


def extract_features(
    m: embedding_model, image: np.ndarray, tap: Optional[str] = None
) -> descriptor:
    """
    @brief Activations after the tap layer's nonlinearity for one image.

    @param m: Model.
    @param image: H x W x C array matching m.spec.input_size.
    @param tap: Layer name, m.tap when omitted.

    @return Descriptor of dimension m.spec.tap_dim(tap).

    Usage:
        d = extract_features(m, corpus.traverses[0][5].pixels(), "pool4")
    """
    tap = m.tap if tap is None else tap
    if tap not in m.spec.shapes():
        raise KeyError(f"backbone {m.spec.name} has no layer {tap!r}")
    return descriptor(extract_batch(m, np.asarray(image)[None], tap)[0], tap)


def unflatten(m: embedding_model, values: np.ndarray, tap: Optional[str] = None) -> np.ndarray:
    """
    @brief Inverse of the descriptor flattening: reshape to the activation
           tensor (C, H, W) or (F,) of tap.
    """
    tap = m.tap if tap is None else tap
    shape = m.spec.shapes()[tap]
    return np.asarray(values).reshape(shape)


def embed_batch(
    m: embedding_model,
    images: Union[np.ndarray, Sequence[np.ndarray]],
    batch_size: int = DEFAULT_BATCH,
    progress: bool = False,
) -> np.ndarray:
    """
    @brief Head outputs for a stack of images, N x head_dim float32.
    """
    if not m.initialized:
        raise RuntimeError("embedding head is not initialised; load weights first")
    images = np.asarray(images, dtype=np.float32)
    out = np.empty((len(images), m.head_dim), dtype=np.float32)
    with torch.no_grad():
        for start in tqdm(range(0, len(images), batch_size), desc="embed", disable=not progress):
            batch = images_to_tensor(m, images[start : start + batch_size])
            out[start : start + len(batch)] = m(batch).numpy()
    if not np.all(np.isfinite(out)):
        raise ValueError("non-finite embedding")
    return out


def embed(m: embedding_model, image: np.ndarray) -> descriptor:
    """
    @brief 128-d descriptor: the head applied to the tap features, no
           activation after the head.
    """
    return descriptor(embed_batch(m, np.asarray(image)[None])[0], HEAD_SOURCE)


def _weights_bytes(m: embedding_model) -> bytes:
    chunks = [bytes(smw_magic(magic=SMW_MAGIC))]
    for name, tensor in m.state_dict().items():
        encoded = name.encode("utf-8")
        shape = tuple(tensor.shape)
        chunks.append(bytes(smw_record_name(name_len=len(encoded))))
        chunks.append(encoded)
        chunks.append(bytes(smw_record_shape(ndim=len(shape))))
        chunks.append(np.asarray(shape, dtype="<u4").tobytes())
        chunks.append(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    body = b"".join(chunks)
    return body + bytes(smw_trailer(crc32=zlib.crc32(body)))


def save_weights(m: embedding_model, path: Union[str, Path]) -> Path:
    """
    @brief Write every parameter and buffer of m to an SMW1 file.

    @param m: Model.
    @param path: Destination, replaced atomically.

    @return path.
    """
    path = Path(path)
    data = _weights_bytes(m)
    atomic_write_bytes(path, data)
    logger.debug("saved %d bytes of weights to %s", len(data), path)
    return path


def read_weights(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    """
    @brief Parse an SMW1 file into name -> float32 array records.

    The CRC-32 trailer is verified before anything else is parsed, so a
    truncated or corrupted file fails with a checksum error.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"weights file not found: {path}")
    data = path.read_bytes()
    if len(data) < SMW_MIN_SIZE:
        raise ValueError(f"{path}: checksum mismatch (file truncated to {len(data)} bytes)")

    body = data[: -sizeof(smw_trailer)]
    trailer = smw_trailer.from_buffer_copy(data[-sizeof(smw_trailer) :])
    if zlib.crc32(body) != trailer.crc32:
        raise ValueError(f"{path}: checksum mismatch")
    if smw_magic.from_buffer_copy(body).magic != SMW_MAGIC:
        raise ValueError(f"{path}: not an SMW1 weights file")

    records: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = sizeof(smw_magic)
    try:
        while offset < len(body):
            name_len = smw_record_name.from_buffer_copy(body, offset).name_len
            offset += sizeof(smw_record_name)
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            ndim = smw_record_shape.from_buffer_copy(body, offset).ndim
            offset += sizeof(smw_record_shape)
            shape = tuple(int(v) for v in np.frombuffer(body, "<u4", ndim, offset))
            offset += ndim * SMW_DIM
            count = int(np.prod(shape))
            values = np.frombuffer(body, "<f4", count, offset).reshape(shape)
            offset += count * 4
            records[name] = values.astype(np.float32)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed record at byte {offset}: {exc}") from exc
    return records


def load_weights(
    m: embedding_model, path: Union[str, Path], strict: bool = True
) -> embedding_model:
    """
    @brief Load an SMW1 file into m.

    @param m: Model whose architecture the file must match.
    @param path: SMW1 file.
    @param strict: Require every parameter of m to be present; when False a
                   partial file (e.g. backbone weights only) is accepted.

    @return m, with its head marked initialised when the file carried it.

    Usage:
        m = load_weights(build_model("desk", (32, 64, 3)), "runs/x/train/model.smw")
    """
    records = read_weights(path)
    expected = m.state_dict()
    for name, values in records.items():
        if name not in expected:
            raise ValueError(f"{path}: layer {name!r} does not exist in backbone {m.spec.name}")
        if tuple(values.shape) != tuple(expected[name].shape):
            raise ValueError(
                f"{path}: shape mismatch for layer {name!r}: file {tuple(values.shape)}, "
                f"model {tuple(expected[name].shape)}"
            )
    missing = [name for name in expected if name not in records]
    if strict and missing:
        raise ValueError(f"{path}: missing layers {missing}")

    m.load_state_dict({name: torch.from_numpy(v) for name, v in records.items()}, strict=False)
    if "head.weight" in records and "head.bias" in records:
        m.initialized = True
    logger.info("loaded %d tensors from %s", len(records), path)
    return m


def write_descriptors(path: Union[str, Path], values: np.ndarray) -> Path:
    """
    @brief Store a count x dim matrix as an SMD1 file.
    """
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValueError(f"descriptor matrix must be 2-D, got shape {values.shape}")
    header = smd_header(magic=SMD_MAGIC, count=values.shape[0], dim=values.shape[1])
    atomic_write_bytes(path, bytes(header) + values.astype(SMD_VALUE_DTYPE).tobytes())
    return Path(path)


def read_descriptors(path: Union[str, Path]) -> np.ndarray:
    # pylint: disable=missing-function-docstring
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"descriptor file not found: {path}")
    data = path.read_bytes()
    if len(data) < SMD_HEADER_SIZE:
        raise ValueError(f"{path}: truncated descriptor file")
    header = smd_header.from_buffer_copy(data)
    if header.magic != SMD_MAGIC:
        raise ValueError(f"{path}: not an SMD1 descriptor file")
    expected = SMD_HEADER_SIZE + header.count * header.dim * 4
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, SMD_VALUE_DTYPE, header.count * header.dim, SMD_HEADER_SIZE)
    return values.reshape(header.count, header.dim).astype(np.float32)
