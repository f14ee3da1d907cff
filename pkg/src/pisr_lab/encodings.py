"""Panoptic encodings: per-class and per-instance summaries of the feature map.

Class encodings correlate the soft semantic map with the features. Instance
encodings do the same with heatmaps built by regressing every pixel to one of
the top-K center candidates. A small gating network then rescales each
encoding row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pisr_lab import tensor as T
from pisr_lab.segmenter import Params, uniform_fan_in
from pisr_lab.tensor import ShapeError, Tensor


@dataclass
class InstanceCandidates:
    coords: np.ndarray  # n x 2 int (row, col), n <= K
    scores: np.ndarray  # n, descending

    def __len__(self):
        return len(self.scores)


@dataclass
class PanopticEncodings:
    E_sem: Tensor
    E_ins: Tensor
    E_pan: Tensor
    omega: Tensor
    E_tilde: Tensor


def semantic_encodings(S: Tensor, F: Tensor) -> Tensor:
    """E = S F^T for an N x HW soft map and C x HW features."""
    if S.shape[1] != F.shape[1]:
        raise ShapeError(f"encodings: maps {S.shape} and features {F.shape} disagree on HW")
    return T.matmul(S, T.transpose(F))


instance_encodings = semantic_encodings


def local_maxima(M: np.ndarray) -> np.ndarray:
    """Boolean map of pixels >= all of their (existing) 8 neighbours."""
    M = np.asarray(M, dtype=np.float64).reshape(M.shape[-2:])
    h, w = M.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = M
    keep = np.ones((h, w), dtype=bool)
    for di in range(3):
        for dj in range(3):
            if di == 1 and dj == 1:
                continue
            keep &= M >= padded[di:di + h, dj:dj + w]
    return keep


def select_centers(M, K: int) -> InstanceCandidates:
    """Top-K local maxima of the center map; ties go to the lower row-major index."""
    M = np.asarray(M.data if isinstance(M, Tensor) else M)
    M = M.reshape(M.shape[-2:])
    w = M.shape[1]
    if K <= 0:
        return InstanceCandidates(np.zeros((0, 2), dtype=np.int64), np.zeros(0))
    flat = np.flatnonzero(local_maxima(M))
    scores = M.reshape(-1)[flat]
    order = np.lexsort((flat, -scores))[:K]
    flat = flat[order]
    return InstanceCandidates(np.stack([flat // w, flat % w], axis=1).astype(np.int64), scores[order])


def things_mask(S, thing_ids) -> np.ndarray:
    """1 x HW indicator of pixels whose argmax class is a thing class."""
    S = np.asarray(S.data if isinstance(S, Tensor) else S)
    S = S.reshape(S.shape[0], -1)
    am = np.argmax(S, axis=0)  # first maximum wins ties
    return np.isin(am, np.asarray(thing_ids, dtype=np.int64)).astype(S.dtype)[None]


def pixel_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    rows, cols = np.indices((h, w), dtype=dtype)
    return np.stack([rows.reshape(-1), cols.reshape(-1)])


def instance_heatmaps(candidates: InstanceCandidates, O: Tensor, mask: np.ndarray, H: int, W: int, K: int | None = None) -> Tensor:
    """Masked center-regression heatmaps, one row per candidate, zero-padded to K rows.

    Row k at pixel x is max(0, 1 - |c_k - (x + O(x))| / sqrt(H^2 + W^2)).
    """
    K = len(candidates) if K is None else K
    O = T.reshape(O, (1, 2, H * W))
    dtype = O.dtype
    n = min(len(candidates), K)
    rows = []
    if n > 0:
        target = candidates.coords[:n].astype(dtype)[:, :, None] - pixel_grid(H, W, dtype)[None]
        diff = T.sub(Tensor(target), O)
        dist = T.sqrt(T.sum(T.mul(diff, diff), axis=1))
        heat = T.relu(T.add(T.scale(dist, -1.0 / np.sqrt(H * H + W * W)), 1.0))
        rows.append(T.mul(heat, Tensor(np.asarray(mask, dtype=dtype).reshape(1, H * W))))
    if K > n:
        rows.append(Tensor(np.zeros((K - n, H * W), dtype=dtype)))
    if not rows:
        return Tensor(np.zeros((0, H * W), dtype=dtype))
    return rows[0] if len(rows) == 1 else T.concat_rows(rows)


def concat_panoptic(E_sem: Tensor, E_ins: Tensor) -> Tensor:
    if E_sem.shape[1] != E_ins.shape[1]:
        raise ShapeError(f"concat_panoptic: {E_sem.shape} vs {E_ins.shape}")
    if E_ins.shape[0] == 0:
        return E_sem
    return T.concat_rows([E_sem, E_ins])


def reweighter_hidden(channels: int) -> int:
    return max(8, channels // 4)


def init_reweighter(params: Params, seed: int, channels: int, dtype=np.float64, prefix: str = "reweight") -> None:
    hidden = reweighter_hidden(channels)
    params[f"{prefix}.fc1.weight"] = uniform_fan_in(seed, f"{prefix}.fc1.weight", (channels, hidden), channels, dtype)
    params[f"{prefix}.fc1.bias"] = uniform_fan_in(seed, f"{prefix}.fc1.bias", (1, hidden), channels, dtype)
    params[f"{prefix}.fc2.weight"] = uniform_fan_in(seed, f"{prefix}.fc2.weight", (hidden, 1), hidden, dtype)
    params[f"{prefix}.fc2.bias"] = uniform_fan_in(seed, f"{prefix}.fc2.bias", (1, 1), hidden, dtype)


def reweight(params: Params, E_pan: Tensor, input_scale: float = 1.0, prefix: str = "reweight") -> tuple[Tensor, Tensor]:
    """Per-row gate omega in (0, 1) and the gated encodings E_pan * omega.

    ``input_scale`` multiplies the first-layer input; it is a fixed
    preconditioner for encodings that are sums over all pixels.
    """
    x = E_pan if input_scale == 1.0 else T.scale(E_pan, input_scale)
    hidden = T.relu(T.add(T.matmul(x, params[f"{prefix}.fc1.weight"]), params[f"{prefix}.fc1.bias"]))
    omega = T.sigmoid(T.add(T.matmul(hidden, params[f"{prefix}.fc2.weight"]), params[f"{prefix}.fc2.bias"]))
    return omega, T.mul(E_pan, omega)
