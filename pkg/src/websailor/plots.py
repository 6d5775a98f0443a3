"""Render run metrics into figures next to the CSV they came from."""

from __future__ import annotations

from pathlib import Path

from .metrics import read_metrics, window_rates


def render_report(metrics_csv, out_dir=None, window: float = 5.0) -> list[Path]:
    """Write throughput / connections / backlog figures for a metrics CSV.

    Returns the list of files written. Figures land beside the CSV unless
    `out_dir` says otherwise.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics_csv = Path(metrics_csv)
    out_dir = Path(out_dir) if out_dir is not None else metrics_csv.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_metrics(metrics_csv)
    entities = sorted({r.entity for r in rows})
    clients = [e for e in entities if not e.startswith("server:") and e != "total"]
    written: list[Path] = []

    def save(fig, name: str):
        path = out_dir / name
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    def finish(ax, ylabel, title, plotted):
        ax.set_xlabel("time (s)")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if plotted:
            ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.3)

    fig, ax = plt.subplots(figsize=(8, 4.5))
    plotted = 0
    for entity in clients + (["total"] if "total" in entities else []):
        rates = window_rates(rows, entity, window)
        if rates:
            ax.plot([t for t, _ in rates], [r for _, r in rates],
                    marker="o", markersize=3, label=entity)
            plotted += 1
    finish(ax, "pages / s (%gs windows)" % window, "download rate", plotted)
    save(fig, "rate.png")

    fig, ax = plt.subplots(figsize=(8, 4.5))
    plotted = 0
    for entity in clients:
        series = sorted((r.t, r.connections) for r in rows if r.entity == entity)
        if series:
            ax.step([t for t, _ in series], [c for _, c in series],
                    where="post", label=entity)
            plotted += 1
    finish(ax, "connection cap", "client connections", plotted)
    save(fig, "connections.png")

    fig, ax = plt.subplots(figsize=(8, 4.5))
    plotted = 0
    servers = [e for e in entities if e.startswith("server:")]
    for entity in servers or ["total"]:
        series = sorted((r.t, r.pending_seeds) for r in rows if r.entity == entity)
        if series:
            ax.plot([t for t, _ in series], [p for _, p in series], label=entity)
            plotted += 1
    finish(ax, "pending seeds", "dispatch backlog", plotted)
    save(fig, "pending.png")

    return written
