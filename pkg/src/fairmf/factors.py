"""Latent-factor storage, initialization, Gramians, regularization weights and top-K scoring.

Factor matrices are plain row-major ``float64`` arrays of shape ``(n_rows, d)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .interactions import SparseBinaryMatrix

FMF_MAGIC = b"FMF1"
_FMF_HEADER = struct.Struct("<4sIIB")
_DTYPE_TAGS = {8: np.dtype("<f8")}

#: rows per partial sum in the chunked Gramian reduction
GRAMIAN_CHUNK = 4096


def init_factors(n_rows: int, d: int, sigma: float, seed=None) -> np.ndarray:
    """I.i.d. ``Normal(0, sigma / sqrt(d))`` factors.

    ``seed`` may be an int or a ``numpy.random.Generator``; passing a generator
    draws from it in place, which is how the solvers initialize U then V from
    one stream.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, sigma / np.sqrt(d), size=(n_rows, d))


def check_finite(f: np.ndarray, name: str = "factors") -> np.ndarray:
    if not np.isfinite(f).all():
        raise FloatingPointError(f"{name} contains non-finite values")
    return f


def gramian(f: np.ndarray, deterministic: bool = False) -> np.ndarray:
    """Return ``f.T @ f``, symmetrized.

    The default path hands the product to BLAS. ``deterministic=True`` sums
    fixed ``GRAMIAN_CHUNK``-row partial Gramians in chunk order with a
    non-BLAS kernel, which gives bit-identical results independent of the BLAS
    thread count.
    """
    f = np.asarray(f, dtype=np.float64)
    d = f.shape[1]
    if deterministic:
        g = np.zeros((d, d))
        for start in range(0, f.shape[0], GRAMIAN_CHUNK):
            block = f[start:start + GRAMIAN_CHUNK]
            g += np.einsum("ri,rj->ij", block, block, optimize=False)
    else:
        g = f.T @ f
    return 0.5 * (g + g.T)


@dataclass
class RegWeights:
    """Per-user and per-item L2 weights."""

    lambda_u: np.ndarray
    lambda_v: np.ndarray


def frequency_weights(m: SparseBinaryMatrix, lambda2: float, eta: float, alpha0: float) -> RegWeights:
    """Frequency-scaled L2 weights.

    ``lambda_u[i] = lambda2 * (|r_i| + alpha0 * n_items) ** eta`` and
    ``lambda_v[j] = lambda2 * (|r_:j| + alpha0 * n_users) ** eta``.
    """
    if lambda2 <= 0 or eta < 0 or alpha0 < 0:
        raise ValueError("need lambda2 > 0, eta >= 0, alpha0 >= 0")
    lu = lambda2 * np.power(m.user_counts() + alpha0 * m.n_items, eta, dtype=np.float64)
    lv = lambda2 * np.power(m.item_counts() + alpha0 * m.n_users, eta, dtype=np.float64)
    return RegWeights(lu, lv)


def _topk_from_scores(scores: np.ndarray, k: int, eligible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.flatnonzero(eligible)
    s = scores[idx]
    k = min(k, idx.size)
    if k == 0:
        return idx[:0], s[:0]
    if k < idx.size:
        # keep every candidate tied with the k-th best so the id tie-break is exact
        kth = np.partition(s, idx.size - k)[idx.size - k]
        cand = s >= kth
        idx, s = idx[cand], s[cand]
    order = np.lexsort((idx, -s))[:k]
    return idx[order], s[order]


def score_topk(u: np.ndarray, v: np.ndarray, k: int, exclude=()) -> list[tuple[int, float]]:
    """Rank items by ``<u, v_j>``, best first, ties broken by ascending item id.

    Items in ``exclude`` are skipped; the result has ``min(k, n_items - |exclude|)``
    entries.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = v @ np.asarray(u, dtype=np.float64)
    eligible = np.ones(v.shape[0], dtype=bool)
    ex = np.fromiter(exclude, dtype=np.int64) if not isinstance(exclude, np.ndarray) else exclude.astype(np.int64)
    eligible[ex] = False
    items, s = _topk_from_scores(scores, k, eligible)
    return [(int(i), float(x)) for i, x in zip(items, s)]


def topk_batch(u: np.ndarray, v: np.ndarray, k: int, exclude: list[np.ndarray] | None = None,
               block: int = 1024) -> list[np.ndarray]:
    """Top-k item ids for every row of ``u``; same ordering contract as :func:`score_topk`."""
    out = []
    n_items = v.shape[0]
    for start in range(0, u.shape[0], block):
        scores = u[start:start + block] @ v.T
        for r in range(scores.shape[0]):
            eligible = np.ones(n_items, dtype=bool)
            if exclude is not None:
                eligible[exclude[start + r]] = False
            out.append(_topk_from_scores(scores[r], k, eligible)[0])
    return out


def save_factors(path, f: np.ndarray) -> None:
    """Write an ``FMF1`` dump: magic, u32 rows, u32 d, u8 dtype tag, little-endian payload."""
    f = np.ascontiguousarray(f, dtype="<f8")
    n, d = f.shape
    with open(path, "wb") as fh:
        fh.write(_FMF_HEADER.pack(FMF_MAGIC, n, d, 8))
        fh.write(f.tobytes(order="C"))


def load_factors(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FMF_HEADER.size:
        raise ValueError(f"{path}: truncated factor file")
    magic, n, d, tag = _FMF_HEADER.unpack_from(data)
    if magic != FMF_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if tag not in _DTYPE_TAGS:
        raise ValueError(f"{path}: unsupported dtype tag {tag}")
    dtype = _DTYPE_TAGS[tag]
    payload = data[_FMF_HEADER.size:]
    if len(payload) != n * d * dtype.itemsize:
        raise ValueError(f"{path}: payload size {len(payload)} does not match {n}x{d}")
    return np.frombuffer(payload, dtype=dtype).reshape(n, d).astype(np.float64)
