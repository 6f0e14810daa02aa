"""Report figures rendered to image files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_traces(traces: dict, path, title: str = "training loss") -> None:
    """``traces`` maps a label to a sequence of trace rows."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in traces.items():
        ax.plot([r.step for r in rows], [r.loss for r in rows], label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if traces:
        ax.legend(fontsize=8)
    _save(fig, path)


def latency_fit(actual, predicted, path) -> None:
    actual, predicted = np.asarray(actual), np.asarray(predicted)
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(actual, predicted, s=6, alpha=0.6)
    lo, hi = float(min(actual.min(), predicted.min())), float(max(actual.max(), predicted.max()))
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("predicted (ms)")
    ax.set_title("latency predictor")
    _save(fig, path)


def search_history(history, path, budget: float | None = None) -> None:
    gens = np.array([c.generation for c in history])
    scores = np.array([c.score for c in history])
    lats = np.array([c.predicted_latency for c in history])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4))
    a1.scatter(gens, scores, s=8, alpha=0.6)
    best = [scores[gens <= g].max() for g in np.unique(gens)]
    a1.plot(np.unique(gens), best, "r-", lw=1, label="best so far")
    a1.set_xlabel("generation")
    a1.set_ylabel("score")
    a1.legend(fontsize=8)
    a2.scatter(lats, scores, c=gens, s=8, cmap="viridis")
    if budget is not None:
        a2.axvline(budget, color="k", ls="--", lw=0.8)
    a2.set_xlabel("predicted latency (ms)")
    a2.set_ylabel("score")
    _save(fig, path)


def ranking_scatter(oneshot, standalone, labels, path, accuracy: float | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.scatter(standalone, oneshot, s=16)
    for x, y, lab in zip(standalone, oneshot, labels):
        ax.annotate(lab, (x, y), fontsize=6)
    ax.set_xlabel("stand-alone score")
    ax.set_ylabel("one-shot proxy score")
    if accuracy is not None:
        ax.set_title(f"pairwise accuracy {accuracy:.3f}")
    _save(fig, path)
