"""Result emission: delimited results table, SVG bar charts, and run manifest."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import __version__  # noqa: E402

CSV_COLUMNS = ("model", "domain", "attack", "target", "shots", "mean_dice", "std_dice")
ATTACK_ORDER = ("clean", "fgsm", "pgd", "smia")
MODEL_COLORS = {"baseline": "#888888", "at-baseline": "#4477aa", "pnode": "#cc6644"}


def _row_key(row):
    attack_rank = ATTACK_ORDER.index(row["attack"]) if row["attack"] in ATTACK_ORDER else 99
    return (row["model"], row["domain"], attack_rank, row["target"])


def write_results_csv(rows, path) -> Path:
    """Write the results table with fixed column order and float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in sorted(rows, key=_row_key):
            writer.writerow([row["model"], row["domain"], row["attack"], row["target"],
                             row["shots"], f"{row['mean_dice']:.6f}", f"{row['std_dice']:.6f}"])
    return path


def write_bar_charts(rows, out_dir) -> list:
    """One grouped bar chart per domain: Dice by attack, one bar group per model."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    domains = sorted({row["domain"] for row in rows})
    paths = []
    for domain in domains:
        sub = [r for r in rows if r["domain"] == domain]
        models = sorted({r["model"] for r in sub})
        attacks = [a for a in ATTACK_ORDER if any(r["attack"] == a for r in sub)]
        if not models or not attacks:
            continue
        fig, ax = plt.subplots(figsize=(7.0, 4.0))
        width = 0.8 / len(models)
        for mi, model in enumerate(models):
            means, stds, xs = [], [], []
            for ai, attack in enumerate(attacks):
                match = [r for r in sub if r["model"] == model and r["attack"] == attack]
                if not match:
                    continue
                xs.append(ai + (mi - (len(models) - 1) / 2.0) * width)
                means.append(match[0]["mean_dice"])
                stds.append(match[0]["std_dice"])
            ax.bar(xs, means, width=width, yerr=stds, capsize=3,
                   label=model, color=MODEL_COLORS.get(model))
        ax.set_xticks(range(len(attacks)))
        ax.set_xticklabels(attacks)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("mean Dice")
        ax.set_title(f"{domain} domain")
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"dice_{domain}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths


def write_manifest(path, cfg, seeds, commit: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"pnodeseg_version = {__version__}",
        f"commit = {commit}",
        f"seeds = {','.join(str(s) for s in seeds)}",
        "",
        "# config echo",
        cfg.echo().rstrip("\n"),
    ]
    path.write_text("\n".join(lines) + "\n")
    return path
