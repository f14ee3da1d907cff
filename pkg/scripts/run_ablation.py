"""Train all six variants on 200/50 synthetic scenes for three seeds and tabulate final PQ.

    python3 scripts/run_ablation.py [--jobs N]
"""

import argparse

from _common import RESULTS, SEEDS, setup
from pisr_lab import experiments as ex
from pisr_lab.model import VARIANTS
from pisr_lab.train import write_text_atomic


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    cfg, data, cache = setup()
    rows = ex.ablate(cfg, data, VARIANTS, SEEDS, jobs=args.jobs, cache=cache)
    RESULTS.mkdir(exist_ok=True)
    write_text_atomic(RESULTS / "ablation_runs.csv",
                      ex.rows_to_csv(rows, ["variant", "seed", "k", "pq", "pq_th", "pq_st", "miou", "loss_total"]))
    text = ex.rows_to_csv(ex.summarize(rows), ["variant", "n_seeds", "pq", "pq_th", "pq_st", "miou"])
    write_text_atomic(RESULTS / "ablation.csv", text)
    print(text, end="")


if __name__ == "__main__":
    main()
