"""Group thing pixels around predicted centers and build a panoptic label map."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pisr_lab import tensorfile
from pisr_lab.encodings import select_centers
from pisr_lab.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class PanopticLabelMap:
    semantic: np.ndarray  # H x W int
    instance: np.ndarray  # H x W int, 0 = stuff

    @property
    def shape(self):
        return self.semantic.shape


def _np(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def assign_to_centers(centers: np.ndarray, offset: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Index of the center nearest to each pixel's regressed location.

    ``pixels`` is n x 2 (row, col); ``offset`` is 2 x H x W. Equal distances
    resolve to the first center in ``centers``.
    """
    reg = pixels + offset[:, pixels[:, 0], pixels[:, 1]].T
    d2 = ((reg[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def fuse(S_final, M_final, O_final, K: int, thing_ids) -> PanopticLabelMap:
    """Panoptic label map from final semantic scores, center mass and offsets.

    Thing pixels join their nearest top-K center; every resulting instance
    then takes the majority semantic class of its pixels. Instance ids are
    dense and ordered by the row-major position of their centers.
    """
    S = _np(S_final)
    O = _np(O_final).astype(np.float64)
    h, w = S.shape[-2:]
    semantic = np.argmax(S.reshape(S.shape[0], h, w), axis=0).astype(np.int64)
    thing = np.isin(semantic, np.asarray(thing_ids, dtype=np.int64))
    instance = np.zeros((h, w), dtype=np.int64)
    if not thing.any():
        return PanopticLabelMap(semantic, instance)

    cands = select_centers(_np(M_final), K)
    if len(cands) == 0:
        log.warning("fuse: %d thing pixels but no center candidates; leaving them as instance 0", int(thing.sum()))
        return PanopticLabelMap(semantic, instance)

    # row-major order of centers fixes both the tie-break and the id order
    flat = cands.coords[:, 0] * w + cands.coords[:, 1]
    centers = cands.coords[np.argsort(flat, kind="stable")].astype(np.float64)
    pixels = np.argwhere(thing)
    owner = assign_to_centers(centers, O, pixels)

    used = np.unique(owner)
    new_id = np.zeros(len(centers), dtype=np.int64)
    new_id[used] = np.arange(1, len(used) + 1)
    instance[pixels[:, 0], pixels[:, 1]] = new_id[owner]

    n_cls = S.shape[0]
    for k in range(1, len(used) + 1):
        sel = instance == k
        votes = np.bincount(semantic[sel], minlength=n_cls)
        semantic[sel] = int(np.argmax(votes))
    return PanopticLabelMap(semantic, instance)


def palette_color(key: int) -> tuple[int, int, int]:
    h = zlib.crc32(int(key).to_bytes(8, "little", signed=True))
    return (h & 0xFF, (h >> 8) & 0xFF, (h >> 16) & 0xFF)


def colorize(label: PanopticLabelMap) -> np.ndarray:
    """H x W x 3 uint8 image; each (class, instance) pair gets a hashed color."""
    key = label.semantic.astype(np.int64) * 1000 + label.instance
    out = np.zeros(key.shape + (3,), dtype=np.uint8)
    for k in np.unique(key):
        out[key == k] = palette_color(int(k))
    return out


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def save_label_map(prefix, label: PanopticLabelMap) -> None:
    prefix = str(prefix)
    tensorfile.save(prefix + ".sem.t", label.semantic.astype(np.float32))
    tensorfile.save(prefix + ".inst.t", label.instance.astype(np.float32))
    write_ppm(prefix + ".ppm", colorize(label))


def load_label_map(prefix) -> PanopticLabelMap:
    prefix = str(prefix)
    sem = tensorfile.load(prefix + ".sem.t").astype(np.int64)
    inst = tensorfile.load(prefix + ".inst.t").astype(np.int64)
    return PanopticLabelMap(sem, inst)
