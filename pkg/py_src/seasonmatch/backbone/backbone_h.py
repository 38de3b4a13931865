"""
Backbone layer specs, descriptor record and the embedding model.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

# pylint: disable=too-few-public-methods

HEAD_DIM = 128
HEAD_SOURCE = "head128"
INPUT_TAP = "input"

LAYER_CONV = "conv"
LAYER_POOL = "pool"
LAYER_FC = "fc"


@dataclass(frozen=True)
class layer_spec:
    """
    conv: 3x3 convolution, stride 1, padding 1, followed by ReLU.
    pool: 2x2 max pooling, stride 2.
    fc:   fully-connected layer on the flattened input, followed by ReLU.
    """

    name: str
    kind: str
    out: int = 0

    def __post_init__(self) -> None:
        if self.kind not in (LAYER_CONV, LAYER_POOL, LAYER_FC):
            raise ValueError(f"layer {self.name}: unknown kind {self.kind!r}")
        if self.kind != LAYER_POOL and self.out < 1:
            raise ValueError(f"layer {self.name}: out must be >= 1, got {self.out}")
        if self.name == INPUT_TAP:
            raise ValueError(f"{INPUT_TAP!r} is reserved for the raw image tap")


@dataclass(frozen=True)
class backbone_spec:
    """
    Ordered layer stack plus the (H, W, C) image size it is built for.
    Activation shapes follow from the stack alone, so descriptor dimensions
    can be computed without any weights.
    """

    name: str
    input_size: Tuple[int, int, int]
    layers: Tuple[layer_spec, ...] = ()

    def __post_init__(self) -> None:
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"backbone {self.name}: duplicate layer names")
        self.shapes()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """
        @brief Activation shape after every layer, keyed by tap name.

        @return Ordered mapping starting with "input"; convolutional shapes are
                (C, H, W), fully-connected ones (F,).
        """
        height, width, channels = self.input_size
        shape: Tuple[int, ...] = (channels, height, width)
        result: Dict[str, Tuple[int, ...]] = OrderedDict()
        result[INPUT_TAP] = shape
        for layer in self.layers:
            if layer.kind == LAYER_CONV:
                if len(shape) != 3:
                    raise ValueError(f"backbone {self.name}: {layer.name} follows a fc layer")
                shape = (layer.out, shape[1], shape[2])
            elif layer.kind == LAYER_POOL:
                if len(shape) != 3:
                    raise ValueError(f"backbone {self.name}: {layer.name} follows a fc layer")
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
                if shape[1] < 1 or shape[2] < 1:
                    raise ValueError(
                        f"backbone {self.name}: input {self.input_size} too small for {layer.name}"
                    )
            else:
                shape = (layer.out,)
            result[layer.name] = shape
        return result

    def taps(self) -> Tuple[str, ...]:
        # pylint: disable=missing-function-docstring
        return tuple(self.shapes())

    def tap_dim(self, tap: str) -> int:
        """
        @brief Number of activations at tap, i.e. the raw descriptor length.

        Usage:
            vgg16_spec().tap_dim("pool4")  # 100352
        """
        shapes = self.shapes()
        if tap not in shapes:
            raise KeyError(f"backbone {self.name} has no layer {tap!r}; taps: {list(shapes)}")
        return int(np.prod(shapes[tap]))


def _vgg_block(index: int, width: int, convs: int) -> Tuple[layer_spec, ...]:
    layers = [layer_spec(f"conv{index}_{k + 1}", LAYER_CONV, width) for k in range(convs)]
    layers.append(layer_spec(f"pool{index}", LAYER_POOL))
    return tuple(layers)


def vgg16_spec(input_size: Tuple[int, int, int] = (224, 224, 3)) -> backbone_spec:
    """
    @brief VGG-16 layer stack without the classifier (conv1_1 ... pool5, fc6, fc7).
    """
    layers = (
        _vgg_block(1, 64, 2)
        + _vgg_block(2, 128, 2)
        + _vgg_block(3, 256, 3)
        + _vgg_block(4, 512, 3)
        + _vgg_block(5, 512, 3)
        + (layer_spec("fc6", LAYER_FC, 4096), layer_spec("fc7", LAYER_FC, 4096))
    )
    return backbone_spec("vgg16", tuple(input_size), layers)


def desk_spec(
    input_size: Tuple[int, int, int] = (32, 64, 3), widths: Sequence[int] = (16, 32, 64, 64)
) -> backbone_spec:
    """
    @brief Reduced VGG-style stack: one conv3x3 + max-pool block per width,
           named conv1/pool1 ... convK/poolK so that pool4 exists.
    """
    layers = []
    for k, width in enumerate(widths, start=1):
        layers.append(layer_spec(f"conv{k}", LAYER_CONV, width))
        layers.append(layer_spec(f"pool{k}", LAYER_POOL))
    return backbone_spec("desk", tuple(input_size), tuple(layers))


def identity_spec(input_size: Tuple[int, int, int]) -> backbone_spec:
    # pylint: disable=missing-function-docstring
    return backbone_spec("identity", tuple(input_size), ())


BACKBONES = {
    "vgg16": vgg16_spec,
    "desk": desk_spec,
    "identity": identity_spec,
}


@dataclass
class descriptor:
    """
    Dense descriptor of one image. source is a tap name or "head128".
    """

    values: np.ndarray = field(repr=False)
    source: str

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise ValueError(f"descriptor must be a vector, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"descriptor from {self.source} has non-finite values")

    @property
    def dim(self) -> int:
        # pylint: disable=missing-function-docstring
        return int(self.values.shape[0])


class embedding_model(nn.Module):
    """
    Backbone with named layers plus a linear head without activation.

    Images enter as N x C x H x W float tensors in [0, 1]; when subtract_mean
    is set the per-channel input_mean buffer is subtracted first. Every
    conv and fc layer is followed by its ReLU, and a tap returns the
    activation after it.
    """

    def __init__(
        self,
        spec: backbone_spec,
        tap: Optional[str] = None,
        head_dim: int = HEAD_DIM,
        subtract_mean: bool = False,
        seed: int = 0,
        init_head: bool = True,
    ) -> None:
        super().__init__()
        self.spec = spec
        self.tap = tap if tap is not None else spec.taps()[-1]
        self.tap_dim = spec.tap_dim(self.tap)
        self.head_dim = head_dim
        self.subtract_mean = subtract_mean
        self.seed = seed
        if head_dim < 1:
            raise ValueError(f"head_dim must be >= 1, got {head_dim}")

        shapes = spec.shapes()
        channels = spec.input_size[2]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            blocks = OrderedDict()
            previous = shapes[INPUT_TAP]
            for layer in spec.layers:
                if layer.kind == LAYER_CONV:
                    blocks[layer.name] = nn.Sequential(
                        nn.Conv2d(previous[0], layer.out, kernel_size=3, padding=1), nn.ReLU()
                    )
                elif layer.kind == LAYER_POOL:
                    blocks[layer.name] = nn.MaxPool2d(kernel_size=2, stride=2)
                else:
                    blocks[layer.name] = nn.Sequential(
                        nn.Flatten(), nn.Linear(int(np.prod(previous)), layer.out), nn.ReLU()
                    )
                previous = shapes[layer.name]
            self.backbone = nn.ModuleDict(blocks)
            # He init: tap activations keep the input's mean square at any depth
            for module in self.backbone.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                    nn.init.zeros_(module.bias)
            self.head = nn.Linear(self.tap_dim, head_dim)

        self.register_buffer("input_mean", torch.zeros(channels, 1, 1))
        self.initialized = False
        if init_head:
            self.reset_head()

    def reset_head(self) -> None:
        """
        @brief Draw head weights uniformly from [-1/sqrt(d), 1/sqrt(d)] with
               d the tap dimension, zero the bias.
        """
        bound = 1.0 / math.sqrt(self.tap_dim)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.seed + 1)
            with torch.no_grad():
                self.head.weight.uniform_(-bound, bound)
                self.head.bias.zero_()
        self.initialized = True

    def set_fine_tune(self, fine_tune: bool) -> None:
        """
        @brief Select which parameters receive gradients: the head always,
               the backbone only when fine_tune is set.
        """
        for param in self.backbone.parameters():
            param.requires_grad_(fine_tune)
        for param in self.head.parameters():
            param.requires_grad_(True)

    def trainable_mask(self) -> Dict[str, bool]:
        # pylint: disable=missing-function-docstring
        return {name: param.requires_grad for name, param in self.named_parameters()}

    def features(self, x: torch.Tensor, tap: Optional[str] = None) -> torch.Tensor:
        """
        @brief Activations at tap for a batch, flattened channel-major.

        @param x: N x C x H x W tensor.
        @param tap: Layer name, the model tap when omitted.

        @return N x tap_dim tensor.
        """
        tap = self.tap if tap is None else tap
        if tap not in self.spec.shapes():
            raise KeyError(f"backbone {self.spec.name} has no layer {tap!r}")
        if self.subtract_mean:
            x = x - self.input_mean
        if tap != INPUT_TAP:
            for name, block in self.backbone.items():
                x = block(x)
                if name == tap:
                    break
        return torch.flatten(x, start_dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # pylint: disable=arguments-differ
        if not self.initialized:
            raise RuntimeError("embedding head is not initialised; load weights first")
        return self.head(self.features(x))

    def backbone_checksum(self) -> str:
        """
        @brief sha256 over every backbone parameter, for freeze checks.
        """
        digest = hashlib.sha256()
        for name, param in self.backbone.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(param.detach().cpu().numpy().tobytes())
        return digest.hexdigest()
