"""Multi-run drivers (ablation, K sweep) with a result cache keyed by config, data and code."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from pisr_lab.model import VARIANTS
from pisr_lab.train import Dataset, TrainConfig, train, write_text_atomic

log = logging.getLogger(__name__)

# plumbing that cannot change a metric history
_NOT_RESULT_AFFECTING = {"__init__.py", "__main__.py", "cli.py", "experiments.py", "gradcheck.py"}


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def source_digest() -> str:
    """Hash of the package sources; cached results are only reused for identical code."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        if path.name in _NOT_RESULT_AFFECTING:
            continue
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class RunCache:
    """Metric histories stored as one JSON file per (config, data, code) key."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self._digest = source_digest()

    def key(self, cfg: TrainConfig, data: Dataset) -> str:
        text = repr((sorted(asdict(cfg).items()), sorted(asdict(data.scene).items()),
                     len(data.train), len(data.val), self._digest))
        return hashlib.sha256(text.encode()).hexdigest()[:24]

    def get(self, cfg: TrainConfig, data: Dataset) -> list[dict] | None:
        path = self.directory / f"{self.key(cfg, data)}.json"
        if not path.exists():
            return None
        return json.loads(path.read_text())["history"]

    def put(self, cfg: TrainConfig, data: Dataset, history: list[dict]) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self.directory / f"{self.key(cfg, data)}.json"
        write_text_atomic(path, json.dumps({"config": asdict(cfg), "history": history}, indent=1))


def _run_one(args) -> list[dict]:
    cfg, data = args
    return train(cfg, data, keep_steps=False).history


def run_many(configs: list[TrainConfig], data: Dataset, jobs: int = 1, cache: RunCache | None = None) -> list[list[dict]]:
    """Train each config independently; results come back in input order.

    With a cache, finished runs are read back instead of retrained and new
    ones are stored as soon as they complete.
    """
    results: list[list[dict] | None] = [cache.get(c, data) if cache else None for c in configs]
    todo = [i for i, r in enumerate(results) if r is None]
    if todo:
        log.info("training %d of %d runs (%d cached)", len(todo), len(configs), len(configs) - len(todo))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(min(jobs, len(todo)), initializer=_limit_threads) as ex:
            futures = {i: ex.submit(_run_one, (configs[i], data)) for i in todo}
            for i in todo:
                results[i] = futures[i].result()
                if cache:
                    cache.put(configs[i], data, results[i])
    else:
        for i in todo:
            results[i] = _run_one((configs[i], data))
            if cache:
                cache.put(configs[i], data, results[i])
    return results


def ablate(base: TrainConfig, data: Dataset, variants=VARIANTS, seeds=(0,), jobs: int = 1,
           cache: RunCache | None = None) -> list[dict]:
    """Final-epoch validation metrics for every (variant, seed)."""
    configs = [replace(base, variant=v, seed=s) for v in variants for s in seeds]
    rows = []
    for cfg, hist in zip(configs, run_many(configs, data, jobs, cache)):
        last = hist[-1]
        rows.append(dict(variant=cfg.variant, seed=cfg.seed, k=last["k"], pq=last["pq"], pq_th=last["pq_th"],
                         pq_st=last["pq_st"], miou=last["miou"], loss_total=last["loss_total"]))
    return rows


def summarize(rows: list[dict], key: tuple[str, ...] = ("variant",)) -> list[dict]:
    """Mean of the metric columns over seeds, grouped by ``key`` in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in key), []).append(r)
    out = []
    for g, rs in groups.items():
        row = dict(zip(key, g))
        row["n_seeds"] = len(rs)
        for m in ("pq", "pq_th", "pq_st", "miou"):
            row[m] = float(np.mean([r[m] for r in rs]))
        out.append(row)
    return out


def sweep_k(base: TrainConfig, k_values, data: Dataset, seeds=(0,), variants=("pisr", "pisr_no_rw"), jobs: int = 1,
            cache: RunCache | None = None) -> list[dict]:
    configs = [replace(base, variant=v, k=int(k), seed=s) for k in k_values for v in variants for s in seeds]
    rows = []
    for cfg, hist in zip(configs, run_many(configs, data, jobs, cache)):
        rows.append(dict(k=cfg.k, variant=cfg.variant, seed=cfg.seed, pq=hist[-1]["pq"],
                         pq_th=hist[-1]["pq_th"], pq_st=hist[-1]["pq_st"], miou=hist[-1]["miou"]))
    return rows


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(columns)
    for r in rows:
        wr.writerow([f"{r[c]:.6f}" if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def ablation_direction(summary: list[dict], margin: float = 0.01) -> dict:
    """Does gated PISR beat the ungated one, and every naive mixer by ``margin`` PQ?"""
    pq = {r["variant"]: r["pq"] for r in summary}
    best_naive = max(pq[v] for v in ("baseline", "concat", "eprod"))
    return dict(
        pq=pq,
        best_naive=best_naive,
        gate_helps=pq["pisr"] >= pq["pisr_no_rw"],
        beats_naive=pq["pisr"] - best_naive >= margin,
        passed=pq["pisr"] >= pq["pisr_no_rw"] and pq["pisr"] - best_naive >= margin,
    )


def k_robustness(summary: list[dict]) -> dict:
    """Compare the PQ change from K* to 4K*, K* being the best K for the ungated model.

    Only K values whose quadruple was also swept are candidates for K*.
    """
    pq = {(r["k"], r["variant"]): r["pq"] for r in summary}
    ks = sorted({k for k, _ in pq})
    candidates = [k for k in ks if 4 * k in ks and (k, "pisr_no_rw") in pq and (k, "pisr") in pq]
    if not candidates:
        raise ValueError(f"no K with 4K also swept among {ks}")
    k_star = max(candidates, key=lambda k: (pq[(k, "pisr_no_rw")], -k))
    d_gated = pq[(4 * k_star, "pisr")] - pq[(k_star, "pisr")]
    d_plain = pq[(4 * k_star, "pisr_no_rw")] - pq[(k_star, "pisr_no_rw")]
    return dict(k_star=k_star, delta_pisr=d_gated, delta_pisr_no_rw=d_plain, passed=d_gated > d_plain)
