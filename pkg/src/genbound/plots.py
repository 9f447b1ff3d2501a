"""Static SVG rendering of artifact tables. Output bytes depend only on the table contents."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "genbound", "svg.fonttype": "path", "font.family": "DejaVu Sans", "font.size": 9}


def _save(fig, path: Path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _groups(table, key):
    keys = table.column(key)
    out = {}
    for i, k in enumerate(keys):
        out.setdefault(k, []).append(table.rows[i])
    return out


def _curve(table, path):
    c = table.columns.index
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for n, rows in sorted(_groups(table, "n").items()):
        ax.plot([r[c("sigma")] for r in rows], [r[c("bound_total")] for r in rows], label=f"bound, n={n}")
        ax.axhline(abs(rows[0][c("gap")]), linestyle="--", linewidth=0.8, color="gray")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sigma")
    ax.set_ylabel("value")
    ax.legend()
    _save(fig, path)


def _bars(table, path):
    c = table.columns.index
    groups = sorted(_groups(table, "n").items())
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = range(len(groups))
    best = [min(r[c("bound_total")] for r in rows) for _, rows in groups]
    gaps = [abs(rows[0][c("gap")]) for _, rows in groups]
    ax.bar([x - 0.2 for x in xs], best, width=0.4, label="min bound")
    ax.bar([x + 0.2 for x in xs], gaps, width=0.4, label="|gap|")
    ax.set_xticks(list(xs), [str(n) for n, _ in groups])
    ax.set_xlabel("n")
    ax.legend()
    _save(fig, path)


def _rate(table, path):
    c = table.columns.index
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for regime, rows in sorted(_groups(table, "regime").items()):
        ax.plot([r[c("n")] for r in rows], [r[c("bound_total")] for r in rows], marker=".", label=regime)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("n")
    ax.set_ylabel("bound")
    ax.legend()
    _save(fig, path)


def _generic(table, path):
    c = table.columns.index
    fig, ax = plt.subplots(figsize=(5, 3.5))
    sig = [r[c("sigma")] for r in table.rows]
    for col in ("total", "first_term", "delta_term"):
        ax.plot(sig, [r[c(col)] for r in table.rows], label=col)
    ax.set_xscale("log")
    ax.set_xlabel("sigma")
    ax.legend()
    _save(fig, path)


_RENDERERS = {"curve": [("bound_vs_sigma.svg", _curve), ("bound_vs_gap.svg", _bars)],
              "rate": [("rate_scan.svg", _rate)], "generic_curve": [("generic_curve.svg", _generic)]}


def emit_plots(artifact, out_dir) -> list:
    """Render every known curve table of ``artifact`` into ``out_dir``; returns the file names."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(_RC):
        for name, renderers in _RENDERERS.items():
            table = artifact.tables.get(name)
            if table is None or not table.rows:
                continue
            for fname, fn in renderers:
                fn(table, out / fname)
                written.append(fname)
    return written
