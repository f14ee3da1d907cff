"""Toy panoptic scenes: horizontal stuff bands with rectangles and discs on top."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SceneConfigError(ValueError):
    pass


# Fixed, well separated base colors; indexed by semantic class id.
_PALETTE = np.array([
    [0.15, 0.55, 0.20],
    [0.45, 0.45, 0.50],
    [0.90, 0.20, 0.15],
    [0.15, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.70, 0.25, 0.80],
    [0.10, 0.85, 0.85],
    [0.95, 0.60, 0.75],
])


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_stuff_classes: int = 2
    n_thing_classes: int = 2
    instances_per_scene: tuple[int, int] = (1, 5)
    shape_kinds: tuple[str, ...] = ("rect", "circle")
    size_range: tuple[int, int] = (4, 10)
    gaussian_sigma: float = 3.0
    instance_jitter: float = 0.1
    pixel_noise: float = 0.05
    seed: int = 0

    @property
    def n_sem(self) -> int:
        return self.n_stuff_classes + self.n_thing_classes

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_stuff_classes, self.n_sem))

    def validate(self) -> None:
        lo, hi = self.instances_per_scene
        if self.height <= 0 or self.width <= 0:
            raise SceneConfigError("image dimensions must be positive")
        if self.n_stuff_classes < 1:
            raise SceneConfigError("need at least one stuff class")
        if lo < 0 or hi < lo:
            raise SceneConfigError(f"bad instance range {self.instances_per_scene}")
        if hi > 0 and self.n_thing_classes == 0:
            raise SceneConfigError("instances requested but there are no thing classes")
        if self.n_sem > len(_PALETTE):
            raise SceneConfigError(f"at most {len(_PALETTE)} classes supported")
        if not set(self.shape_kinds) <= {"rect", "circle"}:
            raise SceneConfigError(f"unknown shape kinds {self.shape_kinds}")


@dataclass
class SceneSample:
    image: np.ndarray        # 3 x H x W in [0, 1]
    gt_semantic: np.ndarray  # H x W int
    gt_instance: np.ndarray  # H x W int, 0 = stuff
    gt_center: np.ndarray    # 1 x H x W
    gt_offset: np.ndarray    # 2 x H x W, (d_row, d_col)
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))  # center pixels (row, col)


def center_pixels(instance_map: np.ndarray) -> np.ndarray:
    return np.floor(mass_centers(instance_map) + 0.5)


def mass_centers(instance_map: np.ndarray) -> np.ndarray:
    """Mean (row, col) of each instance id 1..max; rows for absent ids are NaN."""
    n = int(instance_map.max()) if instance_map.size else 0
    rows, cols = np.indices(instance_map.shape)
    ids = instance_map.reshape(-1)
    count = np.bincount(ids, minlength=n + 1)[1:].astype(np.float64)
    sr = np.bincount(ids, weights=rows.reshape(-1), minlength=n + 1)[1:]
    sc = np.bincount(ids, weights=cols.reshape(-1), minlength=n + 1)[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.stack([sr / count, sc / count], axis=1)


def render_center_targets(instance_map: np.ndarray, sigma: float = 3.0) -> tuple[np.ndarray, np.ndarray]:
    """Center heatmap and offset field for an instance-id map.

    Each instance's center is the pixel nearest its mass center. The heatmap
    max-composites exp(-d^2 / (2 sigma^2)) bumps placed there (sigma = 0 gives
    single-pixel peaks); offsets point from each thing pixel to it.
    """
    h, w = instance_map.shape
    centers = mass_centers(instance_map)
    rows, cols = np.indices((h, w), dtype=np.float64)
    heat = np.zeros((h, w))
    offset = np.zeros((2, h, w))
    for k, (cr, cc) in enumerate(centers, start=1):
        sel = instance_map == k
        if not sel.any():
            continue
        pr, pc = np.floor(cr + 0.5), np.floor(cc + 0.5)
        if sigma > 0:
            bump = np.exp(-((rows - pr) ** 2 + (cols - pc) ** 2) / (2.0 * sigma * sigma))
        else:
            bump = ((rows == pr) & (cols == pc)).astype(np.float64)
        np.maximum(heat, bump, out=heat)
        offset[0][sel] = pr - rows[sel]
        offset[1][sel] = pc - cols[sel]
    return heat[None], offset


def _stuff_layout(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    h, w = cfg.height, cfg.width
    n = cfg.n_stuff_classes
    cuts = np.sort(rng.integers(h // 4, h - h // 4, size=n - 1)) if n > 1 else np.zeros(0, dtype=int)
    order = rng.permutation(n)
    band = np.searchsorted(cuts, np.arange(h), side="right")
    return np.broadcast_to(order[band][:, None], (h, w)).copy()


def generate(cfg: SceneConfig, index: int) -> SceneSample:
    """Deterministically draw sample ``index`` of the scene family ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, index])
    h, w = cfg.height, cfg.width
    semantic = _stuff_layout(rng, cfg)
    instance = np.zeros((h, w), dtype=np.int64)
    color = np.empty((3, h, w))
    for c in range(cfg.n_stuff_classes):
        tint = _PALETTE[c] + rng.uniform(-cfg.instance_jitter, cfg.instance_jitter, 3)
        color[:, semantic == c] = tint[:, None]

    lo, hi = cfg.instances_per_scene
    n_inst = int(rng.integers(lo, hi + 1))
    rows, cols = np.indices((h, w))
    for k in range(1, n_inst + 1):
        cls = int(rng.choice(cfg.thing_ids))
        kind = cfg.shape_kinds[int(rng.integers(len(cfg.shape_kinds)))]
        smin, smax = cfg.size_range
        cr, cc = rng.uniform(0, h), rng.uniform(0, w)
        if kind == "rect":
            hh, hw = rng.integers(smin, smax + 1, size=2) / 2.0
            sel = (np.abs(rows + 0.5 - cr) <= hh) & (np.abs(cols + 0.5 - cc) <= hw)
        else:
            r = rng.uniform(smin, smax) / 2.0
            sel = (rows + 0.5 - cr) ** 2 + (cols + 0.5 - cc) ** 2 <= r * r
        tint = _PALETTE[cls] + rng.uniform(-cfg.instance_jitter, cfg.instance_jitter, 3)
        semantic[sel] = cls
        instance[sel] = k
        color[:, sel] = tint[:, None]

    # drop fully occluded instances and renumber the survivors in draw order
    present = np.unique(instance[instance > 0])
    remap = np.zeros(n_inst + 1, dtype=np.int64)
    remap[present] = np.arange(1, len(present) + 1)
    instance = remap[instance]

    noise = rng.uniform(-cfg.pixel_noise, cfg.pixel_noise, size=(3, h, w))
    image = np.clip(color + noise, 0.0, 1.0)
    center, offset = render_center_targets(instance, cfg.gaussian_sigma)
    return SceneSample(
        image=image,
        gt_semantic=semantic.astype(np.int64),
        gt_instance=instance,
        gt_center=center,
        gt_offset=offset,
        centers=center_pixels(instance),
    )


def generate_dataset(cfg: SceneConfig, n: int, start: int = 0) -> list[SceneSample]:
    return [generate(cfg, i) for i in range(start, start + n)]
