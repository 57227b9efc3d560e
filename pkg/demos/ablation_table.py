"""Reward-configuration ablation on paired seeds, printed as a table.

    python3 demos/ablation_table.py [steps]
"""

import sys

import numpy as np

from segreward.harness import ABLATION_ROWS, TrainConfig, run_ablation
from segreward.harness.training import format_table


def main(steps: int = 100) -> None:
    seeds = (0, 1)
    rows = run_ablation(TrainConfig(steps=steps), seeds=seeds)
    averaged = []
    for name, _, _ in ABLATION_ROWS:
        mine = [r for r in rows if r["row"] == name]
        means = {k: float(np.mean([r[k] for r in mine])) for k in ("tokens", "giou", "ciou", "acc_rate")}
        averaged.append({"row": name, **means})
    print(format_table(averaged, "row"))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 100)
