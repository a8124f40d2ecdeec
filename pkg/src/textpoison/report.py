"""Cross-run comparison: table, sweep CSVs, and rendered figures.

Takes the eval report JSON files produced by `pipeline`/`eval` runs and
emits a fixed-order comparison table, delimited plot data for the
poisoning-rate and training-epoch sweeps, and PNG figures rendered
alongside the CSVs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport

_RATE_HEADER = "rate,ca,asr,hit1,hit5,hit10"
_EPOCH_HEADER = "epochs,ca,asr,hit1,hit5,hit10"

plt.rcParams.update(
    {
        "figure.figsize": (6.0, 4.0),
        "axes.grid": True,
        "grid.alpha": 0.3,
        "font.size": 10,
    }
)


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def _metric_row(report: EvalReport):
    hit = report.hit_at or {}
    return (
        report.clean_accuracy,
        report.asr,
        hit.get(1),
        hit.get(5),
        hit.get(10),
    )


def format_table(named_reports) -> str:
    """Fixed-order metric rows, one column per run."""
    rows = [
        ("clean_accuracy", lambda r: r.clean_accuracy),
        ("asr", lambda r: r.asr),
        ("hit@1", lambda r: (r.hit_at or {}).get(1)),
        ("hit@5", lambda r: (r.hit_at or {}).get(5)),
        ("hit@10", lambda r: (r.hit_at or {}).get(10)),
        ("distinct-1", lambda r: r.distinct_ngrams.get(1)),
        ("distinct-2", lambda r: r.distinct_ngrams.get(2)),
        ("distinct-3", lambda r: r.distinct_ngrams.get(3)),
        ("distinct-4", lambda r: r.distinct_ngrams.get(4)),
        ("perplexity", lambda r: r.perplexity),
    ]
    names = [name for name, _ in named_reports]
    width = max(14, *(len(n) + 2 for n in names)) if names else 14
    header = "metric".ljust(14) + "".join(n.rjust(width) for n in names)
    lines = [header, "-" * len(header)]
    for label, getter in rows:
        cells = []
        for _, report in named_reports:
            value = getter(report)
            cells.append(("-" if value is None else f"{value:.4f}").rjust(width))
        lines.append(label.ljust(14) + "".join(cells))
    return "\n".join(lines)


def write_rate_sweep_csv(named_reports, path) -> None:
    """Rows sorted by poisoning rate; header rate,ca,asr,hit1,hit5,hit10."""
    entries = []
    for _, report in named_reports:
        rate = report.run_metadata.get("poison_rate")
        entries.append((rate if rate is not None else 0.0, report))
    entries.sort(key=lambda e: e[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_RATE_HEADER + "\n")
        for rate, report in entries:
            cells = (_fmt(rate),) + tuple(_fmt(v) for v in _metric_row(report))
            fh.write(",".join(cells) + "\n")


def write_epoch_sweep_csv(named_reports, path) -> None:
    entries = []
    for _, report in named_reports:
        epochs = report.run_metadata.get("victim_epochs")
        entries.append((epochs if epochs is not None else 0, report))
    entries.sort(key=lambda e: e[0])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_EPOCH_HEADER + "\n")
        for epochs, report in entries:
            cells = (str(epochs),) + tuple(_fmt(v) for v in _metric_row(report))
            fh.write(",".join(cells) + "\n")


def _sweep_series(named_reports, meta_key):
    points = []
    for _, report in named_reports:
        x = report.run_metadata.get(meta_key)
        if x is not None:
            points.append((x, report))
    points.sort(key=lambda p: p[0])
    return points


def _plot_sweep(points, xlabel, path):
    xs = [x for x, _ in points]
    fig, (ax_attack, ax_clean) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    asr = [r.asr for _, r in points]
    hit1 = [(r.hit_at or {}).get(1) for _, r in points]
    if any(v is not None for v in asr):
        ax_attack.plot(xs, [v if v is not None else float("nan") for v in asr],
                       marker="o", label="attack success")
    if any(v is not None for v in hit1):
        ax_attack.plot(xs, [v if v is not None else float("nan") for v in hit1],
                       marker="s", label="hit@1")
    ax_attack.set_xlabel(xlabel)
    ax_attack.set_ylabel("rate")
    ax_attack.set_ylim(-0.02, 1.02)
    ax_attack.set_title("attack effectiveness")
    ax_attack.legend(loc="best")

    ax_clean.plot(xs, [r.clean_accuracy for _, r in points], marker="o", color="tab:green")
    ax_clean.set_xlabel(xlabel)
    ax_clean.set_ylabel("clean zero-shot accuracy")
    ax_clean.set_ylim(-0.02, 1.02)
    ax_clean.set_title("clean accuracy")

    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def _plot_comparison_bars(named_reports, path):
    names = [name for name, _ in named_reports]
    metrics = [
        ("clean acc", [r.clean_accuracy for _, r in named_reports]),
        ("asr", [r.asr or 0.0 for _, r in named_reports]),
        ("hit@1", [(r.hit_at or {}).get(1) or 0.0 for _, r in named_reports]),
    ]
    fig, ax = plt.subplots()
    width = 0.8 / len(metrics)
    for m, (label, values) in enumerate(metrics):
        xs = [i + m * width for i in range(len(names))]
        ax.bar(xs, values, width=width, label=label)
    ax.set_xticks([i + width for i in range(len(names))])
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.legend(loc="best")
    ax.set_title("run comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def render_figures(named_reports, out_dir) -> list[str]:
    """Render comparison and sweep figures next to the CSV output."""
    out_dir = str(out_dir)
    written = []

    path = f"{out_dir}/comparison.png"
    _plot_comparison_bars(named_reports, path)
    written.append(path)

    rate_points = _sweep_series(named_reports, "poison_rate")
    if len({x for x, _ in rate_points}) >= 2:
        path = f"{out_dir}/rate_sweep.png"
        _plot_sweep(rate_points, "poisoning rate", path)
        written.append(path)

    epoch_points = _sweep_series(named_reports, "victim_epochs")
    if len({x for x, _ in epoch_points}) >= 2:
        path = f"{out_dir}/epoch_sweep.png"
        _plot_sweep(epoch_points, "victim training epochs", path)
        written.append(path)

    return written
