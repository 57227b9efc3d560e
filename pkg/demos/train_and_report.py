"""Train the template policy on the synthetic suite and show how it changes.

    python3 demos/train_and_report.py [steps]
"""

import sys

from segreward.harness import TrainConfig, train


def main(steps: int = 200) -> None:
    cfg = TrainConfig(steps=steps, trace=False)

    def show(row):
        if row["step"] % 25 == 0:
            print(
                f"step {row['step']:4d}  total {row['mean_total']:.3f}  acc_rate {row['acc_rate']:.3f}"
                f"  n1 {row['mean_n1']:5.1f}  entropy {row['answer_entropy']:.3f}"
            )

    res = train(cfg, on_step=show)
    print()
    for key in ("acc_rate", "mean_n1", "answer_entropy", "tokens", "giou", "ciou"):
        print(f"{key:>15}: {res.initial[key]:8.3f} -> {res.final[key]:8.3f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
