"""Two-stage relational attention between gated encodings and the feature map.

Stage one correlates projected encodings with a 3x3-conv view of the
features, giving one response map per encoding row. Stage two mixes the
response maps across rows and projects them back onto the encodings, giving
the enhanced feature map.

There is deliberately no softmax: an all-zero encoding row then contributes
nothing at all, which is what makes gating a row to zero equivalent to
deleting it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pisr_lab import tensor as T
from pisr_lab.segmenter import uniform_fan_in
from pisr_lab.tensor import ShapeError, Tensor


@dataclass
class PraParams:
    g_s: Tensor        # C x D, no bias
    h_kernel: Tensor   # D x C x 3 x 3
    h_bias: Tensor     # D
    g_p: Tensor        # P x P
    g_p_bias: Tensor | None  # P x 1
    g_q: Tensor        # C x C_out, no bias
    enc_scale: float = 1.0
    out_scale: float | None = None  # defaults to 1 / P

    @property
    def n_categories(self) -> int:
        return self.g_p.shape[0]

    @property
    def d(self) -> int:
        return self.g_s.shape[1]

    def named(self, prefix: str = "pra") -> dict[str, Tensor]:
        out = {
            f"{prefix}.g_s.weight": self.g_s,
            f"{prefix}.h.kernel": self.h_kernel,
            f"{prefix}.h.bias": self.h_bias,
            f"{prefix}.g_p.weight": self.g_p,
            f"{prefix}.g_q.weight": self.g_q,
        }
        if self.g_p_bias is not None:
            out[f"{prefix}.g_p.bias"] = self.g_p_bias
        return out

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "pra", enc_scale: float = 1.0, out_scale: float | None = None) -> "PraParams":
        return cls(
            params[f"{prefix}.g_s.weight"], params[f"{prefix}.h.kernel"], params[f"{prefix}.h.bias"],
            params[f"{prefix}.g_p.weight"], params.get(f"{prefix}.g_p.bias"), params[f"{prefix}.g_q.weight"],
            enc_scale, out_scale,
        )


def init(seed: int, channels: int, n_categories: int, d: int | None = None, c_out: int | None = None,
         enc_scale: float = 1.0, dtype=np.float64, prefix: str = "pra") -> PraParams:
    d = channels if d is None else d
    c_out = channels if c_out is None else c_out
    p = n_categories
    return PraParams(
        g_s=uniform_fan_in(seed, f"{prefix}.g_s.weight", (channels, d), channels, dtype),
        h_kernel=uniform_fan_in(seed, f"{prefix}.h.kernel", (d, channels, 3, 3), channels * 9, dtype),
        h_bias=uniform_fan_in(seed, f"{prefix}.h.bias", (d,), channels * 9, dtype),
        g_p=uniform_fan_in(seed, f"{prefix}.g_p.weight", (p, p), p, dtype),
        g_p_bias=uniform_fan_in(seed, f"{prefix}.g_p.bias", (p, 1), p, dtype),
        g_q=uniform_fan_in(seed, f"{prefix}.g_q.weight", (channels, c_out), channels, dtype),
        enc_scale=enc_scale,
    )


def _project(E: Tensor, weight: Tensor, enc_scale: float) -> Tensor:
    if E.shape[1] != weight.shape[0]:
        raise ShapeError(f"pra: encodings {E.shape} vs projection {weight.shape}")
    x = E if enc_scale == 1.0 else T.scale(E, enc_scale)
    return T.matmul(x, weight)


def stage1(params: PraParams, E_tilde: Tensor, F: Tensor) -> Tensor:
    """P x HW response of every pixel to every encoding row."""
    if F.data.ndim != 3:
        raise ShapeError(f"pra: features must be C x H x W, got {F.shape}")
    keys = T.relu(T.conv2d(F, params.h_kernel, params.h_bias))
    d, h, w = keys.shape
    query = _project(E_tilde, params.g_s, params.enc_scale)
    return T.scale(T.matmul(query, T.reshape(keys, (d, h * w))), 1.0 / np.sqrt(d))


def stage2(params: PraParams, E_tilde: Tensor, F_sp: Tensor) -> Tensor:
    """C_out x HW enhanced features."""
    p = E_tilde.shape[0]
    if F_sp.shape[0] != p or params.g_p.shape != (p, p):
        raise ShapeError(f"pra: {p} encodings but responses {F_sp.shape} and mixing {params.g_p.shape}")
    mixed = T.matmul(params.g_p, F_sp)
    if params.g_p_bias is not None:
        mixed = T.add(mixed, params.g_p_bias)
    values = _project(E_tilde, params.g_q, params.enc_scale)
    out_scale = 1.0 / p if params.out_scale is None else params.out_scale
    return T.scale(T.matmul(T.transpose(values), mixed), out_scale)


def forward(params: PraParams, E_tilde: Tensor, F: Tensor) -> Tensor:
    """Enhanced features as a C_out x H x W map."""
    _, h, w = F.shape
    F_pan = stage2(params, E_tilde, stage1(params, E_tilde, F))
    return T.reshape(F_pan, (F_pan.shape[0], h, w))


def drop_category(params: PraParams, p: int) -> PraParams:
    """Parameters acting on P - 1 categories, with row/column ``p`` of the mixer removed.

    The output scale stays pinned to the original 1 / P so that the reduced
    module computes the same function on the remaining rows.
    """
    keep = [i for i in range(params.n_categories) if i != p]
    g_p = Tensor(params.g_p.data[np.ix_(keep, keep)])
    bias = None if params.g_p_bias is None else Tensor(params.g_p_bias.data[keep])
    out_scale = 1.0 / params.n_categories if params.out_scale is None else params.out_scale
    return PraParams(params.g_s, params.h_kernel, params.h_bias, g_p, bias, params.g_q, params.enc_scale, out_scale)
