#!/usr/bin/env python3
"""Plot loss, lambda and learning-rate curves from one or more history.csv files."""
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("histories", nargs="+", type=Path)
    ap.add_argument("--out", type=Path, default=Path("history.png"))
    args = ap.parse_args()

    fig, axes = plt.subplots(1, 3, figsize=(14, 4))
    for path in args.histories:
        h = pd.read_csv(path)
        label = path.parent.name or str(path)
        axes[0].plot(h["step"], h["loss_action"], label=f"{label} L_a")
        axes[0].plot(h["step"], h["loss_domain"], "--", label=f"{label} L_d")
        axes[1].plot(h["step"], h["lambda"], label=label)
        axes[2].plot(h["step"], h["lr"], label=label)
    for ax, title in zip(axes, ["losses", "lambda", "learning rate"]):
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
