"""Figures for evaluation reports. Everything renders off-screen to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_localization(report: dict, path) -> Path:
    """Accuracy vs. IoU threshold with and without box regression."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        for key, label, marker in (
            ("localization", "with regression", "o"),
            ("localization_no_regression", "without regression", "s"),
        ):
            acc = report.get(key) or {}
            if not acc:
                continue
            xs = [float(t) for t in acc]
            ax.plot(xs, [100 * v for v in acc.values()], marker=marker, label=label)
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, loc="lower left")
        return _save(fig, path)


def plot_query_ap(report: dict, path) -> Path:
    queries = [q for q, e in report["queries"].items() if e.get("ap") is not None]
    aps = [report["queries"][q]["ap"] for q in queries]
    order = np.argsort(aps)[::-1]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.3 * len(queries)), 2.8))
        ax.bar(range(len(queries)), [100 * aps[i] for i in order], color="0.4")
        ax.set_xticks(range(len(queries)))
        ax.set_xticklabels([queries[i] for i in order], rotation=60, ha="right")
        ax.set_ylabel("AP (%)")
        if report.get("map") is not None:
            ax.axhline(100 * report["map"], color="C3", lw=1, ls="--", label=f"mAP {100 * report['map']:.1f}")
            ax.legend(frameon=False)
        return _save(fig, path)


def plot_ap_gain(baseline: dict, augmented: dict, path, labels=("w/o NPA", "w/ NPA")) -> Path:
    """Per-query relative AP gain (bars, sorted) with both absolute APs (points)."""
    queries = [
        q for q in baseline["queries"]
        if baseline["queries"][q].get("ap") and augmented["queries"].get(q, {}).get("ap") is not None
    ]
    base = np.array([baseline["queries"][q]["ap"] for q in queries])
    aug = np.array([augmented["queries"][q]["ap"] for q in queries])
    gain = aug / base - 1.0
    order = np.argsort(gain)[::-1]
    x = np.arange(len(queries))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.35 * len(queries)), 3.0))
        ax.bar(x, 100 * gain[order], color="0.75", label="relative gain")
        ax.set_ylabel("relative AP gain (%)")
        ax.set_xticks(x)
        ax.set_xticklabels([queries[i] for i in order], rotation=60, ha="right")
        ax2 = ax.twinx()
        ax2.plot(x, 100 * base[order], "o", color="C0", ms=4, label=labels[0])
        ax2.plot(x, 100 * aug[order], "^", color="C3", ms=4, label=labels[1])
        ax2.set_ylabel("AP (%)")
        ax2.set_ylim(0, 100)
        ax2.spines["right"].set_visible(True)
        ax2.legend(frameon=False, loc="upper right")
        return _save(fig, path)


def plot_false_alarms(before: dict[str, int], after: dict[str, int], path, title: str = "") -> Path:
    """Grouped bars of per-query false-alarm counts before and after."""
    queries = list(before)
    x = np.arange(len(queries))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.5, 0.35 * len(queries)), 2.8))
        ax.bar(x - 0.2, [before[q] for q in queries], width=0.4, color="C0", label="w/o NPA")
        ax.bar(x + 0.2, [after.get(q, 0) for q in queries], width=0.4, color="C3", label="w/ NPA")
        ax.set_xticks(x)
        ax.set_xticklabels(queries, rotation=60, ha="right")
        ax.set_ylabel("false alarms in top 100")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)
