"""Ranking quality and exposure-fairness measures."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def _check_targets(targets) -> set:
    targets = set(int(t) for t in targets)
    if not targets:
        raise ValueError("targets must be non-empty")
    return targets


def recall_at_k(ranked, targets, k: int) -> float:
    """``|top-k & targets| / min(k, |targets|)``."""
    targets = _check_targets(targets)
    hits = sum(1 for item in list(ranked)[:k] if int(item) in targets)
    return hits / min(k, len(targets))


def ndcg_at_k(ranked, targets, k: int) -> float:
    """Binary-gain nDCG with a ``log2(position + 1)`` discount."""
    targets = _check_targets(targets)
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    gains = np.array([int(item) in targets for item in list(ranked)[:k]], dtype=np.float64)
    dcg = float(gains @ discounts[:gains.size])
    idcg = float(discounts[:min(k, len(targets))].sum())
    return dcg / idcg


def exposure_vector(topk_lists, n_items: int) -> np.ndarray:
    """Count, for every item, the number of lists that contain it."""
    o = np.zeros(n_items, dtype=np.int64)
    for lst in topk_lists:
        lst = np.asarray(lst, dtype=np.int64)
        if lst.size and (lst.min() < 0 or lst.max() >= n_items):
            raise ValueError(f"item id out of range [0, {n_items})")
        if np.unique(lst).size != lst.size:
            raise ValueError("ranked list contains duplicate items")
        o[lst] += 1
    return o


def coverage(o) -> int:
    return int(np.count_nonzero(np.asarray(o)))


def gini_index(o) -> float:
    """Relative mean absolute difference ``sum_jl |o_j - o_l| / (2 n ||o||_1)``.

    Evaluated in O(n log n): for ascending ``x``,
    ``sum_jl |x_j - x_l| = 2 sum_i (2i - n - 1) x_i`` with 1-based ``i``.
    """
    x = np.sort(np.asarray(o, dtype=np.float64))
    n = x.size
    if n == 0 or np.any(x < 0):
        raise ValueError("exposure must be a non-empty non-negative vector")
    total = x.sum()
    if total <= 0:
        raise ValueError("exposure vector is all zero")
    coef = 2.0 * np.arange(1, n + 1) - n - 1
    return float(2.0 * (coef @ x) / (2.0 * n * total))


def gini_brute(o) -> float:
    """O(n^2) reference for :func:`gini_index`."""
    x = np.asarray(o, dtype=np.float64)
    n = x.size
    s = 0.0
    for j in range(n):
        for k in range(n):
            s += abs(x[j] - x[k])
    return s / (2.0 * n * x.sum())


@dataclass
class EvalReport:
    """Metrics of one model on one holdout split, keyed by K."""

    recall: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    gini: dict[int, float] = field(default_factory=dict)
    coverage: dict[int, int] = field(default_factory=dict)
    n_users_evaluated: int = 0
    exposure: dict[int, list[int]] = field(default_factory=dict)
    effective_k: dict[int, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        key = lambda d: {str(k): v for k, v in sorted(d.items())}  # noqa: E731
        return {
            "recall": key(self.recall),
            "ndcg": key(self.ndcg),
            "gini": key(self.gini),
            "coverage": key(self.coverage),
            "n_users_evaluated": self.n_users_evaluated,
            "exposure": key(self.exposure),
            "effective_k": key(self.effective_k),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        unkey = lambda d: {int(k): v for k, v in d.items()}  # noqa: E731
        return cls(unkey(doc["recall"]), unkey(doc["ndcg"]), unkey(doc["gini"]), unkey(doc["coverage"]),
                   doc["n_users_evaluated"], unkey(doc.get("exposure", {})), unkey(doc.get("effective_k", {})),
                   list(doc.get("notes", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def rows(self) -> list[tuple[str, int, float]]:
        """Flat ``(metric, K, value)`` rows."""
        out = []
        for name in ("recall", "ndcg", "gini", "coverage"):
            for k, v in sorted(getattr(self, name).items()):
                out.append((name, k, float(v)))
        return out


def evaluate_rankings(ranked_lists, targets, n_items: int, k_list) -> EvalReport:
    """Average Recall/nDCG over users and build exposure, Gini and coverage per K.

    ``ranked_lists[n]`` must be at least ``max(k_list)`` long unless fewer items
    were eligible; ``targets[n]`` are the held-out items of the same user.
    K values above ``n_items`` are evaluated at ``n_items`` and noted.
    """
    rep = EvalReport(n_users_evaluated=len(ranked_lists))
    for k in sorted(set(k_list)):
        k_eff = min(k, n_items)
        rep.effective_k[k] = k_eff
        if k_eff != k:
            rep.notes.append(f"K={k} exceeds the number of items; evaluated at K={k_eff}")
        if not ranked_lists:
            continue
        rep.recall[k] = float(np.mean([recall_at_k(r, t, k_eff) for r, t in zip(ranked_lists, targets)]))
        rep.ndcg[k] = float(np.mean([ndcg_at_k(r, t, k_eff) for r, t in zip(ranked_lists, targets)]))
        o = exposure_vector([np.asarray(r)[:k_eff] for r in ranked_lists], n_items)
        rep.exposure[k] = o.tolist()
        rep.gini[k] = gini_index(o) if o.sum() > 0 else 0.0
        rep.coverage[k] = coverage(o)
    return rep
