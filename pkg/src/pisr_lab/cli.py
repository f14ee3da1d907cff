"""Command-line entry point: ``pisr-lab <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from pisr_lab import experiments as ex
from pisr_lab import gradcheck, tensorfile
from pisr_lab import train as tr
from pisr_lab.fusion import PanopticLabelMap, save_label_map
from pisr_lab.metrics import panoptic_quality
from pisr_lab.model import VARIANTS
from pisr_lab.scenes import SceneConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("pisr_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag name -> TrainConfig field it overrides
_TRAIN_FLAGS = {"variant": "variant", "k": "k", "gamma": "gamma", "epochs": "epochs", "lr": "lr",
                "seed": "seed", "channels": "channels"}


def _add_common(p: argparse.ArgumentParser, *, data=False, out=True, train=False) -> None:
    if out:
        p.add_argument("--out", required=True, help="output directory (created)")
    if data:
        p.add_argument("--data", help="dataset directory from gen-data; generated in memory when omitted")
    p.add_argument("--config", help="key=value file; TrainConfig fields or scene.<field>")
    p.add_argument("--seed", type=int, help="defaults to $PISR_LAB_SEED, then 0")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    if train:
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--k", type=int, help="instance candidates K")
        p.add_argument("--gamma", type=float, help="intermediate loss weight")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--channels", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pisr-lab", description="Panoptic relational attention experiments on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic train/val split")
    _add_common(p)
    p.add_argument("--n", type=int, default=200, help="training scenes")
    p.add_argument("--n-val", type=int, default=50, help="validation scenes")

    p = sub.add_parser("train", help="train one variant; writes checkpoint/, history.csv and steps.csv")
    _add_common(p, data=True, train=True)

    p = sub.add_parser("eval", help="score a checkpoint on the validation split")
    _add_common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k", type=int, help="fusion K (defaults to the checkpoint's)")
    p.add_argument("--save-maps", action="store_true", help="also write predicted label maps")

    p = sub.add_parser("sweep-k", help="train pisr and pisr_no_rw across K values")
    _add_common(p, data=True, train=True)
    p.add_argument("--k-list", default="2,4,8,16,32")
    p.add_argument("--variants", default="pisr,pisr_no_rw")
    p.add_argument("--seeds", help="comma list; defaults to --seed")
    p.add_argument("--cache", help="directory of finished runs to reuse")

    p = sub.add_parser("ablate", help="train every variant and summarize final PQ")
    _add_common(p, data=True, train=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seeds", help="comma list; defaults to --seed")
    p.add_argument("--cache", help="directory of finished runs to reuse")

    p = sub.add_parser("export-heatmaps", help="write instance heatmaps and class maps as PGM images")
    _add_common(p, data=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", type=int, default=0, help="validation sample index")

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    _add_common(p, out=False)
    p.add_argument("--model", action="store_true", help="also check the full pisr loss")
    return parser


# ---------------------------------------------------------------- config resolution


def _resolve(args) -> tuple[tr.TrainConfig, SceneConfig]:
    """Defaults, then --config file, then flags."""
    cfg, scene = tr.TrainConfig(), SceneConfig()
    env_seed = os.environ.get("PISR_LAB_SEED")
    if env_seed is not None:
        cfg = replace(cfg, seed=int(env_seed))
        scene = replace(scene, seed=int(env_seed))
    if getattr(args, "config", None):
        values = tensorfile.read_manifest(args.config)
        unknown = [k for k in values if k not in tr.TrainConfig.field_names() and not k.startswith("scene.")]
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        merged = {**asdict(cfg), **{k: v for k, v in values.items() if not k.startswith("scene.")}}
        cfg = tr.TrainConfig.from_mapping(merged)
        scene_text = {**tr._scene_to_text(scene), **{k: v for k, v in values.items() if k.startswith("scene.")}}
        scene = tr._scene_from_text(scene_text)
    overrides = {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    cfg = replace(cfg, **overrides)
    if getattr(args, "seed", None) is not None:
        scene = replace(scene, seed=args.seed)
    return cfg, scene


def _print_config(command: str, args, cfg: tr.TrainConfig, scene: SceneConfig) -> None:
    print(f"# pisr-lab {command}")
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None and k not in _TRAIN_FLAGS:
            print(f"arg.{k}={v}")
    for k, v in asdict(cfg).items():
        print(f"{k}={v}")
    for k, v in tr._scene_to_text(scene).items():
        print(f"{k}={v}")
    sys.stdout.flush()


def _dataset(args, scene: SceneConfig, n_train: int = 200, n_val: int = 50) -> tr.Dataset:
    if getattr(args, "data", None):
        return tr.load_dataset(args.data)
    return tr.synthetic_dataset(scene, n_train, n_val)


def _seeds(args, cfg: tr.TrainConfig) -> tuple[int, ...]:
    if getattr(args, "seeds", None):
        return tuple(int(s) for s in args.seeds.split(",") if s.strip())
    return (cfg.seed,)


def _variants(text: str) -> tuple[str, ...]:
    out = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in out if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; expected any of {', '.join(VARIANTS)}")
    return out


def _cache(args) -> ex.RunCache | None:
    return ex.RunCache(args.cache) if args.cache else None


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, cfg, scene) -> None:
    if args.n < 0 or args.n_val < 0:
        raise UsageError("--n and --n-val must be non-negative")
    data = tr.synthetic_dataset(scene, args.n, args.n_val)
    tr.save_dataset(args.out, data)
    print(f"wrote {args.n} train + {args.n_val} val scenes to {args.out}")


def cmd_train(args, cfg, scene) -> None:
    data = _dataset(args, scene)
    out = _outdir(args)
    result = tr.train(cfg, data, jobs=args.jobs, keep_steps=True)
    tr.save_checkpoint(out / "checkpoint", result.model, cfg)
    tr.write_text_atomic(out / "history.csv", result.history_csv())
    tr.write_text_atomic(out / "steps.csv", steps_to_csv(result.steps))
    last = result.history[-1] if result.history else {}
    print(f"final pq={last.get('pq', float('nan')):.4f} miou={last.get('miou', float('nan')):.4f}")


STEP_COLUMNS = ("step", "gamma", "l_sem", "l_ins", "l_sem_prime", "l_ins_prime", "total")


def steps_to_csv(steps) -> str:
    """Per-step loss terms; floats are written with repr so they read back exactly."""
    lines = [",".join(STEP_COLUMNS)]
    for i, b in enumerate(steps):
        lines.append(",".join([str(i)] + [repr(float(getattr(b, c))) for c in STEP_COLUMNS[1:]]))
    return "\n".join(lines) + "\n"


def cmd_eval(args, cfg, scene) -> None:
    model, ckpt_cfg = tr.load_checkpoint(args.ckpt)
    data = _dataset(args, scene)
    fusion_k = args.k if args.k is not None else ckpt_cfg.fusion_k
    out = _outdir(args)
    report = tr.evaluate(model, data.val, fusion_k, args.jobs)
    tr.write_text_atomic(out / "metrics.csv", report.to_csv())
    if args.save_maps:
        maps = out / "maps"
        maps.mkdir(exist_ok=True)
        for i, s in enumerate(data.val):
            save_label_map(maps / f"{i:04d}", tr.predict(model, s.image, fusion_k))
    print(f"pq={report.pq:.4f} pq_th={report.pq_th:.4f} pq_st={report.pq_st:.4f} "
          f"sq={report.sq:.4f} rq={report.rq:.4f} miou={report.miou:.4f}")


def cmd_sweep_k(args, cfg, scene) -> None:
    ks = [int(k) for k in args.k_list.split(",") if k.strip()]
    if any(k < 0 for k in ks):
        raise UsageError("--k-list values must be non-negative")
    data = _dataset(args, scene)
    out = _outdir(args)
    rows = ex.sweep_k(cfg, ks, data, seeds=_seeds(args, cfg), variants=_variants(args.variants), jobs=args.jobs,
                      cache=_cache(args))
    tr.write_text_atomic(out / "sweep_k_runs.csv", ex.rows_to_csv(rows, ["k", "variant", "seed", "pq", "pq_th", "pq_st", "miou"]))
    summary = ex.summarize(rows, key=("k", "variant"))
    text = ex.rows_to_csv(summary, ["k", "variant", "n_seeds", "pq", "pq_th", "pq_st", "miou"])
    tr.write_text_atomic(out / "sweep_k.csv", text)
    print(text, end="")


def cmd_ablate(args, cfg, scene) -> None:
    data = _dataset(args, scene)
    out = _outdir(args)
    rows = ex.ablate(cfg, data, variants=_variants(args.variants), seeds=_seeds(args, cfg), jobs=args.jobs,
                     cache=_cache(args))
    tr.write_text_atomic(out / "ablation_runs.csv", ex.rows_to_csv(rows, ["variant", "seed", "k", "pq", "pq_th", "pq_st", "miou", "loss_total"]))
    summary = ex.summarize(rows)
    text = ex.rows_to_csv(summary, ["variant", "n_seeds", "pq", "pq_th", "pq_st", "miou"])
    tr.write_text_atomic(out / "ablation.csv", text)
    print(text, end="")


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM; values in [0, 1] map to round(255 v)."""
    img = np.round(255 * np.clip(values, 0.0, 1.0)).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_export_heatmaps(args, cfg, scene) -> None:
    model, _ = tr.load_checkpoint(args.ckpt)
    data = _dataset(args, scene)
    if not 0 <= args.index < len(data.val):
        raise UsageError(f"--index {args.index} out of range for {len(data.val)} validation scenes")
    out = _outdir(args)
    sample = data.val[args.index]
    outputs = model.forward(sample.image)
    h, w = model.spec.height, model.spec.width
    base = outputs.intermediate or outputs.final
    for c in range(model.spec.n_sem):
        write_pgm(out / f"class_{c}.pgm", base.S.data[c].reshape(h, w))
    I = outputs.extras.get("I")
    n = 0
    if I is not None:
        for k in range(I.shape[0]):
            write_pgm(out / f"instance_{k:02d}.pgm", I.data[k].reshape(h, w))
        n = I.shape[0]
    pred = tr.predict(model, sample.image, tr.TrainConfig().fusion_k)
    save_label_map(out / "panoptic", pred)
    gt = PanopticLabelMap(sample.gt_semantic, sample.gt_instance)
    save_label_map(out / "ground_truth", gt)
    rep = panoptic_quality(pred, gt, model.spec.thing_ids, model.spec.n_sem)
    print(f"wrote {model.spec.n_sem} class maps and {n} instance heatmaps; sample pq={rep.pq:.4f}")


def cmd_grad_check(args, cfg, scene) -> None:
    reports = gradcheck.op_suite(cfg.seed)
    width = max(map(len, reports))
    for name, rep in reports.items():
        print(f"{name:<{width}}  max_rel_err={rep.max_rel_error:.3e}  {'ok' if rep.passed else 'FAIL'}")
    failed = [n for n, r in reports.items() if not r.passed]
    if args.model:
        rep, _ = tr.model_grad_check(cfg.seed)
        print(f"{'pisr_loss':<{width}}  max_rel_err={rep.max_rel_error:.3e}  {'ok' if rep.passed else 'FAIL'}")
        if not rep.passed:
            failed.append("pisr_loss")
    if failed:
        raise RuntimeError(f"gradient check failed for {', '.join(failed)}")


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep-k": cmd_sweep_k,
    "ablate": cmd_ablate, "export-heatmaps": cmd_export_heatmaps, "grad-check": cmd_grad_check,
}


def _where(exc: BaseException) -> str:
    tb = traceback.extract_tb(exc.__traceback__)
    if not tb:
        return "pisr_lab"
    frame = tb[-1]
    return f"{Path(frame.filename).stem}:{frame.lineno}"


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg, scene = _resolve(args)
        _print_config(args.command, args, cfg, scene)
        COMMANDS[args.command](args, cfg, scene)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except tr.DivergenceError as e:
        print(f"error: train: diverged at step {e.step}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        print(f"error: {_where(e)}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
