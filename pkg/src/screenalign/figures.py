"""Figure rendering for the report path.

Every figure lands next to its TSV twin; the delimited file remains the
canonical output and the PNG is a rendered view of the same rows.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_tail_sweep(rows, out_png):
    """Recall vs. tail fraction, one line per relation source.

    `rows` holds (source, tail_fraction, recall) triples.
    """
    by_source = {}
    for source, fraction, recall in rows:
        by_source.setdefault(source, []).append((fraction, recall))
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for source in sorted(by_source):
        points = sorted(by_source[source])
        ax.plot([p[0] for p in points], [p[1] for p in points],
                marker="o", markersize=3, label=source)
    fractions = sorted({f for _, f, _ in rows})
    ax.plot(fractions, fractions, linestyle="--", color="gray", linewidth=1,
            label="random baseline")
    ax.set_xlabel("tail fraction")
    ax.set_ylabel("recall of known pairs")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)


def render_training_curve(rows, out_png):
    """Loss and validation metric over optimizer steps.

    `rows` holds (step, split, metric, value) tuples from the metric log.
    """
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    train = [(s, v) for s, sp, m, v in rows if sp == "train" and m == "loss"]
    if train:
        ax.plot([p[0] for p in train], [p[1] for p in train],
                linewidth=1, label="train loss")
    val = [(s, v) for s, sp, m, v in rows if sp == "val"]
    if val:
        twin = ax.twinx()
        twin.plot([p[0] for p in val], [p[1] for p in val], color="tab:orange",
                  marker="o", markersize=3, linewidth=1, label="val mean R@1")
        twin.set_ylabel("val mean R@1")
        twin.set_ylim(0.0, 1.05)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
