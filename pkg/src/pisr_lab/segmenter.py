"""Tiny full-resolution convolutional segmenter with semantic/center/offset heads."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from pisr_lab import tensor as T
from pisr_lab.tensor import Tensor

Params = dict[str, Tensor]

BACKBONE_WIDTHS = (16, 32)


def param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so adding modules never shifts another module's init
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def uniform_fan_in(seed: int, name: str, shape: tuple[int, ...], fan_in: int, dtype=np.float64) -> Tensor:
    a = np.sqrt(1.0 / fan_in)
    data = param_rng(seed, name).uniform(-a, a, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def init_conv(params: Params, name: str, seed: int, cin: int, cout: int, k: int, dtype=np.float64) -> None:
    fan_in = cin * k * k
    params[f"{name}.kernel"] = uniform_fan_in(seed, f"{name}.kernel", (cout, cin, k, k), fan_in, dtype)
    params[f"{name}.bias"] = uniform_fan_in(seed, f"{name}.bias", (cout,), fan_in, dtype)


def conv(params: Params, name: str, x: Tensor) -> Tensor:
    return T.conv2d(x, params[f"{name}.kernel"], params.get(f"{name}.bias"))


@dataclass
class BaseOutputs:
    F: Tensor         # C x H x W
    S_logits: Tensor  # N_sem x H x W
    S: Tensor
    M: Tensor         # 1 x H x W, post-sigmoid
    O: Tensor         # 2 x H x W, pixel units


def init_backbone(params: Params, seed: int, channels: int, dtype=np.float64) -> None:
    widths = (3,) + BACKBONE_WIDTHS + (channels,)
    for i in range(3):
        init_conv(params, f"backbone.conv{i}", seed, widths[i], widths[i + 1], 3, dtype)


def backbone(params: Params, image: Tensor) -> Tensor:
    x = image
    for i in range(3):
        x = conv(params, f"backbone.conv{i}", x)
        if i < 2:
            x = T.relu(x)
    return x


def init_heads(params: Params, prefix: str, seed: int, channels: int, n_sem: int, dtype=np.float64) -> None:
    init_conv(params, f"{prefix}.semantic", seed, channels, n_sem, 1, dtype)
    init_conv(params, f"{prefix}.center", seed, channels, 1, 1, dtype)
    init_conv(params, f"{prefix}.offset", seed, channels, 2, 1, dtype)


def heads(params: Params, prefix: str, feat: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Semantic logits, softmax probabilities, center mass and offsets."""
    logits = conv(params, f"{prefix}.semantic", feat)
    probs = T.softmax(logits, axis=0)
    center = T.sigmoid(conv(params, f"{prefix}.center", feat))
    offset = conv(params, f"{prefix}.offset", feat)
    return logits, probs, center, offset


def init(seed: int, channels: int = 32, n_sem: int = 4, dtype=np.float64) -> Params:
    params: Params = {}
    init_backbone(params, seed, channels, dtype)
    init_heads(params, "heads", seed, channels, n_sem, dtype)
    return params


def forward(params: Params, image) -> BaseOutputs:
    image = T.as_tensor(image, dtype=params["backbone.conv0.kernel"].dtype)
    feat = backbone(params, image)
    logits, probs, center, offset = heads(params, "heads", feat)
    return BaseOutputs(feat, logits, probs, center, offset)


def n_parameters(params: Params) -> int:
    return sum(p.data.size for p in params.values())
