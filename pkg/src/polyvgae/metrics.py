"""Ranking and regression metrics.

Conventions: AUROC gives half credit to tied positive/negative pairs; AUPRC
treats equal scores as one threshold; AP@k breaks ties by input order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import UndefinedMetricError

log = logging.getLogger(__name__)


def _prep(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    return s, y


def _tie_groups(s):
    """Sort descending; return order and the start offsets of equal-score runs."""
    order = np.argsort(-s, kind="stable")
    ss = s[order]
    starts = np.flatnonzero(np.r_[True, ss[1:] != ss[:-1]])
    return order, starts


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (n_pos * n_neg)."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both positive and negative labels")
    return _concordance(s, y) / (n_pos * n_neg)


def _concordance(s, y) -> float:
    order, starts = _tie_groups(s)
    yy = y[order]
    pos_in = np.add.reduceat(yy.astype(np.int64), starts)
    neg_in = np.add.reduceat((~yy).astype(np.int64), starts)
    # negatives strictly below each group = negatives in later groups
    neg_below = neg_in[::-1].cumsum()[::-1] - neg_in
    return float((pos_in * neg_below).sum() + 0.5 * (pos_in * neg_in).sum())


def auprc(scores, labels) -> float:
    """Average precision: sum over threshold groups of recall gain x precision."""
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    order, starts = _tie_groups(s)
    yy = y[order].astype(np.int64)
    pos_in = np.add.reduceat(yy, starts)
    ends = np.r_[starts[1:], yy.size]
    tp = pos_in.cumsum()
    precision = tp / ends
    return float((pos_in * precision).sum() / n_pos)


def ap_at_k(scores, labels, k: int = 50) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    s, y = _prep(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        log.warning("AP@%d with no positives; returning 0", k)
        return 0.0
    order = np.argsort(-s, kind="stable")[:k]
    hits = y[order].astype(np.float64)
    precision = hits.cumsum() / np.arange(1, hits.size + 1)
    return float((precision * hits).sum() / min(k, n_pos))


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    """Fraction correct; a probability equal to the threshold counts as positive."""
    p, y = _prep(probs, labels)
    if p.size == 0:
        raise UndefinedMetricError("accuracy of an empty prediction set")
    return float(((p >= threshold) == y).mean())


def rmse(pred, truth) -> float:
    p, t = _regression_inputs(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def r_squared(pred, truth) -> float:
    p, t = _regression_inputs(pred, truth)
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for constant targets")
    return 1.0 - float(((t - p) ** 2).sum()) / ss_tot


def pearson(pred, truth) -> float:
    p, t = _regression_inputs(pred, truth)
    dp, dt = p - p.mean(), t - t.mean()
    denom = math.sqrt(float((dp**2).sum()) * float((dt**2).sum()))
    if denom == 0:
        raise UndefinedMetricError("Pearson correlation is undefined when either side is constant")
    return float((dp * dt).sum()) / denom


def _regression_inputs(pred, truth):
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    t = np.asarray(truth, dtype=np.float64).reshape(-1)
    if p.size != t.size or p.size == 0:
        raise ValueError("prediction and truth must be non-empty and of equal length")
    return p, t


def regression_suite(pred, truth) -> dict[str, float]:
    """RMSE, R^2, PCC and fitness = R^2 + PCC - RMSE."""
    e = rmse(pred, truth)
    r2 = r_squared(pred, truth)
    pcc = pearson(pred, truth)
    return {"rmse": e, "r2": r2, "pcc": pcc, "fitness": r2 + pcc - e}


def classification_suite(scores, labels, probs=None, k: int = 50) -> dict[str, float]:
    """AUROC/AUPRC/AP@k/ACC for one relation; ``probs`` default to ``scores``."""
    probs = scores if probs is None else probs
    return {
        "auroc": auroc(scores, labels),
        "auprc": auprc(scores, labels),
        f"ap@{k}": ap_at_k(scores, labels, k),
        "acc": accuracy(probs, labels),
    }


def macro_average(per_relation: Mapping[str, Mapping[str, float] | None]) -> dict:
    """Unweighted mean per metric over relations with defined metrics.

    ``None`` entries mark relations whose metrics were undefined; they are
    excluded and counted under ``"excluded"``.
    """
    defined = {r: m for r, m in per_relation.items() if m is not None}
    if not defined:
        raise UndefinedMetricError("no relation has defined metrics")
    keys = list(next(iter(defined.values())))
    summary = {k: float(np.mean([m[k] for m in defined.values()])) for k in keys}
    summary["relations"] = len(defined)
    summary["excluded"] = len(per_relation) - len(defined)
    return summary


def micro_average(scores: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray], k: int = 50) -> dict:
    """Metrics over predictions pooled across relations."""
    s = np.concatenate([np.asarray(scores[r]).reshape(-1) for r in scores])
    y = np.concatenate([np.asarray(labels[r]).reshape(-1) for r in scores])
    return classification_suite(s, y, k=k)


def write_report(out_dir, per_relation: Mapping[str, Mapping], counts: Mapping[str, tuple[int, int]], summary: Mapping, stem="metrics"):
    """Write ``<stem>.csv`` (one row per relation) and ``<stem>.json``."""
    out_dir = Path(out_dir)
    keys = []
    for m in per_relation.values():
        if m:
            keys = [k for k in m if k not in ("n_pos", "n_neg")]
            break
    with (out_dir / f"{stem}.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["relation", "n_pos", "n_neg"] + keys)
        for rel, m in per_relation.items():
            n_pos, n_neg = counts.get(rel, (0, 0))
            w.writerow([rel, n_pos, n_neg] + ["" if m is None else repr(float(m[k])) for k in keys])
    (out_dir / f"{stem}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
