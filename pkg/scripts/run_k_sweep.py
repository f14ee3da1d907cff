"""PQ of pisr and pisr_no_rw as the number of instance candidates K grows.

    python3 scripts/run_k_sweep.py [--jobs N]
"""

import argparse

from _common import K_LIST, RESULTS, SEEDS, setup
from pisr_lab import experiments as ex
from pisr_lab.train import write_text_atomic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg, data, cache = setup()
    rows = ex.sweep_k(cfg, K_LIST, data, SEEDS, jobs=args.jobs, cache=cache)
    RESULTS.mkdir(exist_ok=True)
    write_text_atomic(RESULTS / "sweep_k_runs.csv", ex.rows_to_csv(rows, ["k", "variant", "seed", "pq", "pq_th", "pq_st", "miou"]))
    summary = ex.summarize(rows, key=("k", "variant"))
    text = ex.rows_to_csv(summary, ["k", "variant", "n_seeds", "pq", "pq_th", "pq_st", "miou"])
    write_text_atomic(RESULTS / "sweep_k.csv", text)
    print(text, end="")
    print(ex.k_robustness(summary))


if __name__ == "__main__":
    main()
