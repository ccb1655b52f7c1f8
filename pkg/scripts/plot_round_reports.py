#!/usr/bin/env python3
"""
Compare self-training runs round by round.

Plots AP_BEV and AP_3D against the round index for every distance bucket,
one line per run directory, so the effect of uncertainty settings across
rounds can be inspected side by side.
"""

import argparse
from pathlib import Path

import matplotlib.pyplot as plt

from pseudobox_lab.data_format import DISTANCE_BUCKETS
from pseudobox_lab.io import load_reports


def load_run(run_dir):
    """
    Load the round reports of a run.

    Returns
    -------
    dict or None
        'label', 'rounds' and the per-bucket AP series, None when the run
        has no reports.json
    """
    run_dir = Path(run_dir)
    try:
        reports = load_reports(run_dir / "reports.json")
    except Exception as e:
        print(f"Error reading {run_dir}: {e}")
        return None
    series = {}
    for bucket in DISTANCE_BUCKETS:
        for metric in ("AP_BEV", "AP_3D"):
            series[(bucket, metric)] = [r.metrics[bucket][metric] for r in reports]
    return {"label": run_dir.name, "rounds": [r.round_index for r in reports], "series": series}


def plot_runs(runs, metric, output_file):
    """Plot one metric for every bucket and run."""
    fig, axes = plt.subplots(1, len(DISTANCE_BUCKETS), figsize=(5 * len(DISTANCE_BUCKETS), 4))
    fig.suptitle(f"{metric} by self-training round", fontsize=14, fontweight="bold")
    cmap = plt.get_cmap("tab10")
    for i, bucket in enumerate(DISTANCE_BUCKETS):
        ax = axes[i]
        for j, run in enumerate(runs):
            values = run["series"][(bucket, metric)]
            points = [(t, 100 * v) for t, v in zip(run["rounds"], values) if v is not None]
            if not points:
                continue
            ax.plot(
                [p[0] for p in points],
                [p[1] for p in points],
                label=run["label"],
                color=cmap(j % 10),
                marker="o",
                markersize=3,
            )
        ax.set_title(bucket)
        ax.set_xlabel("Round T")
        if i == 0:
            ax.set_ylabel(f"{metric} [%]")
        ax.set_ylim(0, 100)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=8, loc="lower right")
    plt.tight_layout()
    plt.savefig(output_file, dpi=150, bbox_inches="tight")
    plt.close(fig)
    print(f"Plot saved as: {output_file}")


def main():
    parser = argparse.ArgumentParser(description="Plot AP against self-training round")
    parser.add_argument("runs", nargs="+", type=Path, help="Run directories")
    parser.add_argument("--out", type=Path, default=Path.cwd(), help="Output directory")
    args = parser.parse_args()

    runs = [run for run in (load_run(d) for d in args.runs) if run is not None]
    if not runs:
        print("No runs with reports found")
        return
    args.out.mkdir(parents=True, exist_ok=True)
    for metric in ("AP_BEV", "AP_3D"):
        plot_runs(runs, metric, args.out / f"rounds_{metric.lower()}.png")


if __name__ == "__main__":
    main()
