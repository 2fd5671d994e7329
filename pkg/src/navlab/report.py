"""Static SVG training-curve plots from train_log.csv."""
from __future__ import annotations

import csv
import os

CURVES = (
    ("sr", "success rate"),
    ("collisions", "collisions per episode"),
    ("lambda", "gate weight"),
    ("entropy", "policy entropy"),
)


def read_train_log(path):
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append({k: float(v) for k, v in row.items()})
    if not rows:
        raise ValueError(f"{path}: empty training log")
    return rows


def render_curves(log_path, out_dir):
    """Write one SVG per tracked curve; returns the file list."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_train_log(log_path)
    steps = [r["env_steps"] for r in rows]
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for column, label in CURVES:
        values = [r[column] for r in rows]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, values, lw=1.2)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        path = os.path.join(out_dir, f"curve_{column}.svg")
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written
