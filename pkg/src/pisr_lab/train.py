"""Loss assembly, deterministic SGD training, evaluation and the ablation drivers."""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from pisr_lab import tensor as T
from pisr_lab import tensorfile
from pisr_lab.fusion import PanopticLabelMap, fuse
from pisr_lab.metrics import PqReport, panoptic_quality
from pisr_lab.model import HeadOutputs, Model, ModelSpec, build_variant
from pisr_lab.scenes import SceneConfig, SceneSample, center_pixels, generate
from pisr_lab.tensor import Tensor

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "variant", "k", "pq", "pq_th", "pq_st", "miou", "loss_total")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    variant: str = "pisr"
    k: int = 8
    fusion_k: int = 8
    gamma: float = 0.5
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    epochs: int = 30
    seed: int = 0
    channels: int = 32
    enc_gain: float = 1.0
    lambda_center: float = 10.0
    lambda_offset: float = 0.1
    dtype: str = "float32"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        kw = {}
        for f in fields(cls):
            if f.name in values and values[f.name] is not None:
                kw[f.name] = type(getattr(cls(), f.name))(values[f.name])
        return cls(**kw)


@dataclass
class LossBreakdown:
    l_sem: float
    l_ins: float
    l_sem_prime: float
    l_ins_prime: float
    total: float
    gamma: float
    tensor: Tensor | None = field(default=None, repr=False)


def head_losses(out: HeadOutputs, sample: SceneSample, lambda_center: float, lambda_offset: float) -> tuple[Tensor, Tensor]:
    """Cross-entropy on semantics; weighted center MSE plus thing-masked offset L1.

    Both are returned as float64 scalars regardless of the network dtype.
    """
    n = out.S_logits.shape[0]
    l_sem = T.cast(T.cross_entropy(T.reshape(out.S_logits, (n, -1)), sample.gt_semantic), np.float64)
    thing = (sample.gt_instance > 0)[None]
    center = T.cast(T.mse(out.M, sample.gt_center.astype(out.M.dtype)), np.float64)
    offset = T.cast(T.l1(out.O, sample.gt_offset.astype(out.O.dtype), mask=thing), np.float64)
    l_ins = T.add(T.scale(center, lambda_center), T.scale(offset, lambda_offset))
    return l_sem, l_ins


def compute_loss(outputs: HeadOutputs, intermediate: HeadOutputs | None, sample: SceneSample,
                 gamma: float = 0.5, lambda_center: float = 10.0, lambda_offset: float = 0.1) -> LossBreakdown:
    """total = gamma * (L'_sem + L'_ins) + L_sem + L_ins; primed terms are 0 without intermediate heads."""
    l_sem, l_ins = head_losses(outputs, sample, lambda_center, lambda_offset)
    if intermediate is None:
        l_sem_p = l_ins_p = Tensor(np.float64(0.0))
    else:
        l_sem_p, l_ins_p = head_losses(intermediate, sample, lambda_center, lambda_offset)
    total = T.add(T.add(T.scale(T.add(l_sem_p, l_ins_p), gamma), l_sem), l_ins)
    return LossBreakdown(l_sem.item(), l_ins.item(), l_sem_p.item(), l_ins_p.item(), total.item(), gamma, total)


def recompose(b: LossBreakdown) -> float:
    return b.gamma * (b.l_sem_prime + b.l_ins_prime) + b.l_sem + b.l_ins


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    train: list[SceneSample]
    val: list[SceneSample]
    scene: SceneConfig

    @property
    def thing_ids(self) -> tuple[int, ...]:
        return self.scene.thing_ids


def synthetic_dataset(scene: SceneConfig, n_train: int, n_val: int) -> Dataset:
    samples = [generate(scene, i) for i in range(n_train + n_val)]
    return Dataset(samples[:n_train], samples[n_train:], scene)


DATA_FORMAT = "pisr-data-1"
_SAMPLE_FIELDS = ("image", "sem", "inst", "center", "offset")


def _scene_to_text(scene: SceneConfig) -> dict[str, str]:
    out = {}
    for f in fields(scene):
        v = getattr(scene, f.name)
        out[f"scene.{f.name}"] = ",".join(map(str, v)) if isinstance(v, tuple) else repr(v)
    return out


def _scene_from_text(extra: dict[str, str]) -> SceneConfig:
    kw = {}
    for f in fields(SceneConfig):
        raw = extra.get(f"scene.{f.name}")
        if raw is None:
            continue
        default = getattr(SceneConfig(), f.name)
        if isinstance(default, tuple):
            conv = type(default[0])
            kw[f.name] = tuple(conv(x.strip("'\"")) for x in raw.split(",") if x)
        else:
            kw[f.name] = type(default)(raw)
    return SceneConfig(**kw)


def save_dataset(directory, data: Dataset) -> None:
    """One tensor file per sample field, train samples first, plus a manifest echoing the scene config."""
    tensors = {}
    for i, s in enumerate(data.train + data.val):
        arrays = (s.image, s.gt_semantic, s.gt_instance, s.gt_center, s.gt_offset)
        for name, arr in zip(_SAMPLE_FIELDS, arrays):
            tensors[f"{i:04d}.{name}"] = np.asarray(arr, dtype=np.float32 if name in ("sem", "inst") else np.float64)
    extra = {"format": DATA_FORMAT, "n_train": str(len(data.train)), "n_val": str(len(data.val))}
    extra.update(_scene_to_text(data.scene))
    tensorfile.save_named(directory, tensors, extra)


def load_dataset(directory) -> Dataset:
    tensors, extra = tensorfile.load_named(directory)
    if extra.get("format") != DATA_FORMAT:
        raise ValueError(f"{directory}: not a dataset directory (format={extra.get('format')!r})")
    n_train, n_val = int(extra["n_train"]), int(extra["n_val"])
    samples = []
    for i in range(n_train + n_val):
        image, sem, inst, center, offset = (tensors[f"{i:04d}.{name}"] for name in _SAMPLE_FIELDS)
        inst = inst.astype(np.int64)
        samples.append(SceneSample(image, sem.astype(np.int64), inst, center, offset, center_pixels(inst)))
    return Dataset(samples[:n_train], samples[n_train:], _scene_from_text(extra))


def build_model(cfg: TrainConfig, scene: SceneConfig) -> Model:
    return build_variant(cfg.variant, k=cfg.k, channels=cfg.channels, n_sem=scene.n_sem,
                         thing_ids=scene.thing_ids, height=scene.height, width=scene.width,
                         seed=cfg.seed, dtype=np.dtype(cfg.dtype), enc_gain=cfg.enc_gain)


# ---------------------------------------------------------------- evaluation


def predict(model: Model, image: np.ndarray, fusion_k: int) -> PanopticLabelMap:
    out = model.forward(image).final
    return fuse(out.S.data, out.M.data, out.O.data, fusion_k, model.spec.thing_ids)


_EVAL_MODEL: Model | None = None
_GRAD_NORM_LOG = None


def _eval_init(model: Model) -> None:
    global _EVAL_MODEL
    _EVAL_MODEL = model


def _eval_one(args) -> PqReport:
    sample, fusion_k, n_sem = args
    pred = predict(_EVAL_MODEL, sample.image, fusion_k)
    gt = PanopticLabelMap(sample.gt_semantic, sample.gt_instance)
    return panoptic_quality(pred, gt, _EVAL_MODEL.spec.thing_ids, n_sem)


def evaluate(model: Model, samples: list[SceneSample], fusion_k: int = 8, jobs: int = 1) -> PqReport:
    """Dataset PQ/mIoU; per-sample reports are summed in sample order."""
    n_sem = model.spec.n_sem
    args = [(s, fusion_k, n_sem) for s in samples]
    if jobs > 1 and len(samples) > 1:
        with ProcessPoolExecutor(jobs, initializer=_eval_init, initargs=(model,)) as ex:
            reports = list(ex.map(_eval_one, args, chunksize=max(1, len(args) // (4 * jobs))))
    else:
        _eval_init(model)
        reports = [_eval_one(a) for a in args]
    total = PqReport(model.spec.thing_ids)
    for r in reports:
        total.add(r)
    return total


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    steps: list[LossBreakdown]
    config: TrainConfig

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(HISTORY_COLUMNS)
    for r in rows:
        wr.writerow([r["epoch"], r["variant"], r["k"]] + [f"{r[c]:.6f}" for c in HISTORY_COLUMNS[3:]])
    return buf.getvalue()


def train(cfg: TrainConfig, data: Dataset, jobs: int = 1, eval_every: int = 1, keep_steps: bool = True) -> TrainResult:
    """SGD with momentum, batch size 1, seeded per-epoch shuffles.

    Raises:
      DivergenceError: on the first non-finite loss, naming the step.
    """
    model = build_model(cfg, data.scene)
    params = list(model.params.values())
    velocity = [np.zeros_like(p.data) for p in params]
    lr = model.dtype.type(cfg.lr)
    mu = model.dtype.type(cfg.momentum)
    history: list[dict] = []
    steps: list[LossBreakdown] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data.train))
        epoch_loss = 0.0
        for idx in order:
            sample = data.train[idx]
            out = model.forward(sample.image)
            loss = compute_loss(out.final, out.intermediate, sample, cfg.gamma, cfg.lambda_center, cfg.lambda_offset)
            if not np.isfinite(loss.total):
                raise DivergenceError(step, loss.total)
            grads = T.grad(loss.tensor, params)
            loss.tensor = None
            if cfg.clip_norm > 0:
                norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
                if norm > cfg.clip_norm:
                    grads = [g * (cfg.clip_norm / norm) for g in grads]
            if _GRAD_NORM_LOG is not None:
                _GRAD_NORM_LOG.append(float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads))))
            if cfg.lr != 0:
                for p, v, g in zip(params, velocity, grads):
                    v *= mu
                    v += g
                    p.data -= lr * v
            epoch_loss += loss.total
            if keep_steps:
                steps.append(loss)
            step += 1
        if (epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs:
            rep = evaluate(model, data.val, cfg.fusion_k, jobs)
            history.append(dict(
                epoch=epoch + 1, variant=cfg.variant, k=model.spec.k, pq=rep.pq, pq_th=rep.pq_th,
                pq_st=rep.pq_st, miou=rep.miou, loss_total=epoch_loss / max(len(order), 1)))
            log.info("%s k=%d epoch %d: pq=%.4f th=%.4f st=%.4f miou=%.4f loss=%.4f", cfg.variant, model.spec.k,
                     epoch + 1, rep.pq, rep.pq_th, rep.pq_st, rep.miou, history[-1]["loss_total"])
    return TrainResult(model, history, steps, cfg)


def model_grad_check(seed: int = 0, variant: str = "pisr", n_params: int = 20, size: int = 16, k: int = 4,
                     channels: int = 8, tolerance: float = 1e-3, floor: float = 1e-6):
    """Finite-difference check of the full training loss w.r.t. randomly chosen parameter entries (f64).

    Entries are drawn from every parameter group in turn so that the gating
    network and the attention block are always represented. The loss is
    O(1), so central differences carry ~1e-10 of roundoff; ``floor`` keeps
    gradients far below that from being judged on relative error alone.
    """
    from pisr_lab.gradcheck import grad_check

    scene = SceneConfig(height=size, width=size, size_range=(2, max(3, size // 4)), seed=seed)
    sample = generate(scene, 0)
    model = build_variant(variant, k=k, channels=channels, n_sem=scene.n_sem, thing_ids=scene.thing_ids,
                          height=size, width=size, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]] = {}
    for name in model.params:
        groups.setdefault(name.split(".")[0], []).append(name)
    names = sorted(groups)
    picks = []
    for i in range(n_params):
        name = groups[names[i % len(names)]][rng.integers(len(groups[names[i % len(names)]]))]
        picks.append((name, int(rng.integers(model.params[name].data.size))))
    start = np.array([model.params[n].data.reshape(-1)[j] for n, j in picks]).reshape(-1, 1)
    base = {n: p.data.copy() for n, p in model.params.items()}
    for n, j in picks:
        base[n].reshape(-1)[j] = 0.0

    def loss_of(v: Tensor) -> Tensor:
        params = {n: Tensor(a) for n, a in base.items()}
        for i, (n, j) in enumerate(picks):
            onehot = np.zeros(base[n].shape)
            onehot.reshape(-1)[j] = 1.0
            entry = T.reshape(T.take_rows(v, [i]), (1,) * onehot.ndim)
            params[n] = T.add(params[n], T.mul(Tensor(onehot), entry))
        out = Model(model.spec, params).forward(sample.image)
        return compute_loss(out.final, out.intermediate, sample, 0.5, 10.0, 0.1).tensor

    return grad_check(loss_of, [start], tolerance=tolerance, floor=floor), picks


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(directory, model: Model, cfg: TrainConfig) -> None:
    s = model.spec
    extra = {f"config.{k}": str(v) for k, v in asdict(cfg).items()}
    extra.update({
        "spec.variant": s.variant, "spec.k": str(s.k), "spec.channels": str(s.channels),
        "spec.n_sem": str(s.n_sem), "spec.thing_ids": ",".join(map(str, s.thing_ids)),
        "spec.height": str(s.height), "spec.width": str(s.width), "spec.enc_gain": repr(s.enc_gain),
        "format": "pisr-checkpoint-1",
    })
    tensorfile.save_named(directory, {k: v.data for k, v in model.params.items()}, extra)


def load_checkpoint(directory) -> tuple[Model, TrainConfig]:
    tensors, extra = tensorfile.load_named(directory)
    spec = ModelSpec(
        extra["spec.variant"], int(extra["spec.k"]), int(extra["spec.channels"]), int(extra["spec.n_sem"]),
        tuple(int(t) for t in extra["spec.thing_ids"].split(",") if t), int(extra["spec.height"]), int(extra["spec.width"]),
        float(extra.get("spec.enc_gain", "1.0")),
    )
    cfg = TrainConfig.from_mapping({k[len("config."):]: v for k, v in extra.items() if k.startswith("config.")})
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in tensors.items()}
    return Model(spec, params), cfg


def write_text_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
