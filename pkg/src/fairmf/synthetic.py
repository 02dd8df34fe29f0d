"""Seeded synthetic feedback matrices for tests, benchmarks and diagnostics."""

from __future__ import annotations

import numpy as np

from .interactions import SparseBinaryMatrix


def random_binary(n_users: int, n_items: int, density: float, seed: int = 0) -> SparseBinaryMatrix:
    rng = np.random.default_rng(seed)
    return SparseBinaryMatrix.from_dense(rng.random((n_users, n_items)) < density)


def zipf_binary(n_users: int, n_items: int, per_user: int = 10, exponent: float = 1.0,
                seed: int = 0) -> SparseBinaryMatrix:
    """Each user samples ``per_user`` distinct items with ``P(j) ~ (j + 1)^-exponent``.

    Item 0 is the most popular; the resulting popularity is heavily skewed.
    """
    rng = np.random.default_rng(seed)
    p = 1.0 / np.arange(1, n_items + 1) ** exponent
    p /= p.sum()
    k = min(per_user, n_items)
    users = np.repeat(np.arange(n_users), k)
    items = np.concatenate([rng.choice(n_items, size=k, replace=False, p=p) for _ in range(n_users)])
    return SparseBinaryMatrix.from_pairs(users, items, n_users, n_items)


def fixed_nnz_binary(n_users: int, n_items: int, nnz: int, seed: int = 0) -> SparseBinaryMatrix:
    """Exactly ``nnz`` distinct uniformly placed entries (for scaling runs)."""
    rng = np.random.default_rng(seed)
    flat = rng.choice(n_users * n_items, size=nnz, replace=False)
    return SparseBinaryMatrix.from_pairs(flat // n_items, flat % n_items, n_users, n_items)


def reference_instance() -> SparseBinaryMatrix:
    """The 30 x 20 instance the convergence diagnostics are calibrated on."""
    return random_binary(30, 20, 0.3, seed=0)
