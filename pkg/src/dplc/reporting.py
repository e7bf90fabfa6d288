"""Run directories, metrics tables and plots."""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from dplc.evaluation import CSV_COLUMNS, MetricsRecord, SweepReport


def new_run_dir(root: str | Path, command: str) -> Path:
    """Create ``<root>/<command>_NNN`` with the next free number; never reuses one."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pattern = re.compile(rf"^{re.escape(command)}_(\d+)$")
    taken = [int(m.group(1)) for p in root.iterdir() if (m := pattern.match(p.name))]
    n = max(taken, default=0) + 1
    while True:
        path = root / f"{command}_{n:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1


def write_metrics_csv(records: Iterable[MetricsRecord], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.row().items()})
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)


def write_loss_csv(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    keys = sorted({k for rec in history for k in rec if k != "iteration"})
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *keys])
        for rec in history:
            w.writerow([rec["iteration"], *(repr(rec.get(k, "")) for k in keys)])
    return path


PLOT_METRICS = {"mse": "MSE", "rfid_surrogate": "rFID (surrogate)", "pv": "PV"}


def plot_sweep(report: SweepReport, out_dir: str | Path) -> list[Path]:
    """One log-log plot per metric; rate 0 and value 0 sit on a placeholder tick."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    paths = []
    all_rates = sorted({r.rate_bpp for r in report.records})
    positive = [r for r in all_rates if r > 0]
    zero_x = min(positive) / 4 if positive else 1.0
    for metric, label in PLOT_METRICS.items():
        values = [getattr(r, metric) for r in report.records]
        pos_vals = [v for v in values if v > 0]
        zero_y = min(pos_vals) / 10 if pos_vals else 1.0
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for tag in report.tags:
            xs = [r if r > 0 else zero_x for r in report.rates(tag)]
            ys = [v if v > 0 else zero_y for v in report.series(tag, metric)]
            ax.plot(xs, ys, marker="o", label=tag)
        ax.set_xscale("log")
        ax.set_yscale("log")
        if 0.0 in all_rates:
            ticks = [zero_x, *positive]
            ax.set_xticks(ticks)
            ax.set_xticklabels(["0", *(f"{r:g}" for r in positive)])
        ax.set_xlabel("rate (bpp)")
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def save_image_grid(images: torch.Tensor, path: str | Path) -> Path:
    """Square-ish grid of CHW images in [-1, 1] written as PNG."""
    from PIL import Image

    x = images.detach().float().clamp(-1, 1)
    n, c, h, w = x.shape
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = torch.zeros(c, rows * h, cols * w)
    for i in range(n):
        r, col = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, col * w:(col + 1) * w] = x[i]
    arr = ((grid + 1) * 127.5).round().to(torch.uint8).permute(1, 2, 0).numpy()
    if c == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")
    return Path(path)


def save_points_csv(points: torch.Tensor, path: str | Path) -> Path:
    x = points.detach().double().reshape(len(points), -1).numpy()
    header = ",".join(f"x{i}" for i in range(x.shape[1]))
    np.savetxt(path, x, delimiter=",", header=header, comments="", fmt="%.17g")
    return Path(path)
