"""Matplotlib renderings of PR and FROC curves for the report path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (5.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.35,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> None:
    # drop the SVG creation date so repeated runs produce stable files
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def render_pr_curve(pr_points, path, operating_precision: float | None = None) -> Path:
    """pr_points: iterable of (threshold, precision, recall)."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        pts = sorted(pr_points, key=lambda p: p[2])
        ax.plot([p[2] for p in pts], [p[1] for p in pts], marker="o", lw=1.5)
        if operating_precision is not None:
            ax.axhline(operating_precision, color="tab:red", ls="--", lw=1.0,
                       label=f"operating precision {operating_precision:g}")
            ax.legend(loc="best")
        ax.set_xlabel("recall (macro)")
        ax.set_ylabel("precision (macro)")
        ax.set_xlim(-0.02, 1.02)
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("Precision vs recall over the score sweep")
        _save(fig, path)
    return path


def render_froc_curve(froc_points, path, budgets=(), recall_at_budget=None) -> Path:
    """froc_points: iterable of (fp_per_patient, recall)."""
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        pts = sorted(froc_points)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", lw=1.5)
        for b in budgets:
            ax.axvline(b, color="tab:gray", ls=":", lw=0.8)
            if recall_at_budget and b in recall_at_budget:
                ax.plot([b], [recall_at_budget[b]], marker="x", color="tab:red", ms=8)
        ax.set_xlabel("mean false positives per patient")
        ax.set_ylabel("recall (macro)")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("FROC")
        _save(fig, path)
    return path


def render_report_figures(report: dict, out_dir, operating_precision=None) -> list[Path]:
    """Render the report's curves as SVG files next to the delimited output."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    pr = [(p["threshold"], p["precision"], p["recall"]) for p in report.get("pr", [])]
    froc = [(p["fp_per_patient"], p["recall"]) for p in report.get("froc", [])]
    budgets = [float(b) for b in report.get("froc_at_budgets", {})]
    rab = {float(b): v for b, v in report.get("froc_at_budgets", {}).items()}
    if pr:
        written.append(render_pr_curve(pr, out_dir / "pr_curve.svg", operating_precision))
    if froc:
        written.append(render_froc_curve(froc, out_dir / "froc_curve.svg", budgets, rab))
    return written
