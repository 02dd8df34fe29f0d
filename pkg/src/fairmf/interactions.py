"""Interaction-log ingestion, binarization and strong-generalization splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

_logger = logging.getLogger(__name__)

_HEADER_NAMES = {"user", "userid", "user_id", "uid", "item", "itemid", "item_id", "movieid", "iid"}


class InteractionFormatError(ValueError):
    """A line of an interaction file could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class InteractionLog:
    """Raw interaction records in file order.

    ``ratings`` and ``timestamps`` are ``None`` when the column is absent from
    every record; missing values in a partially filled column are NaN / -1.
    """

    users: list[str] = field(default_factory=list)
    items: list[str] = field(default_factory=list)
    ratings: np.ndarray | None = None
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        if len(self.users) != len(self.items):
            raise ValueError("users and items must have equal length")
        for n, (u, i) in enumerate(zip(self.users, self.items)):
            if u == "" or i == "":
                raise ValueError(f"record {n} has an empty user or item id")
        if self.ratings is not None:
            self.ratings = np.asarray(self.ratings, dtype=np.float64)
            if self.ratings.shape != (len(self.users),):
                raise ValueError("ratings length mismatch")
            if np.isinf(self.ratings).any():
                raise ValueError("ratings must be finite")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def records(self) -> list[tuple[str, str, float | None, int | None]]:
        out = []
        for n in range(len(self)):
            r = None
            if self.ratings is not None and not math.isnan(self.ratings[n]):
                r = float(self.ratings[n])
            t = None
            if self.timestamps is not None and self.timestamps[n] >= 0:
                t = int(self.timestamps[n])
            out.append((self.users[n], self.items[n], r, t))
        return out


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _looks_like_header(fields: Sequence[str]) -> bool:
    if fields[0].strip().lower() in _HEADER_NAMES or fields[1].strip().lower() in _HEADER_NAMES:
        return True
    return any(not _is_number(f) for f in fields[2:4])


def load_interactions(path, delimiter: str = "\t", header: bool | None = None) -> InteractionLog:
    """Read a delimited ``user, item[, rating[, timestamp]]`` file.

    Parameters
    ----------
    path : str or Path
        Input file.
    delimiter : str
        Field separator, ``"\\t"`` or ``","`` in practice.
    header : bool, optional
        Whether the first line is a header. ``None`` sniffs it: a first line
        whose id columns carry column names, or whose rating/timestamp columns
        are non-numeric, is treated as a header.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    InteractionFormatError
        For a line with fewer than two fields, an empty id, or a non-numeric
        rating/timestamp. The 1-based line number is carried on the error.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"interaction file not found: {path}")

    users: list[str] = []
    items: list[str] = []
    ratings: list[float] = []
    stamps: list[int] = []
    any_rating = False
    any_stamp = False

    with path.open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(delimiter)
            if len(fields) < 2:
                raise InteractionFormatError(line_no, f"expected at least 2 fields, got {len(fields)}")
            if line_no == 1 and (header or (header is None and _looks_like_header(fields))):
                continue
            u, i = fields[0].strip(), fields[1].strip()
            if not u or not i:
                raise InteractionFormatError(line_no, "empty user or item id")
            rating = math.nan
            if len(fields) > 2 and fields[2].strip():
                try:
                    rating = float(fields[2])
                except ValueError:
                    raise InteractionFormatError(line_no, f"non-numeric rating {fields[2]!r}") from None
                if not math.isfinite(rating):
                    raise InteractionFormatError(line_no, f"non-finite rating {fields[2]!r}")
                any_rating = True
            stamp = -1
            if len(fields) > 3 and fields[3].strip():
                try:
                    stamp = int(fields[3])
                except ValueError:
                    raise InteractionFormatError(line_no, f"non-integer timestamp {fields[3]!r}") from None
                any_stamp = True
            users.append(u)
            items.append(i)
            ratings.append(rating)
            stamps.append(stamp)

    return InteractionLog(
        users=users,
        items=items,
        ratings=np.asarray(ratings, dtype=np.float64) if any_rating else None,
        timestamps=np.asarray(stamps, dtype=np.int64) if any_stamp else None,
    )


class SparseBinaryMatrix:
    """Binary user-item matrix with both row (CSR) and column (CSC) access.

    Rows are users, columns items. Stored values are exactly 1.
    """

    def __init__(self, csr: sp.csr_matrix):
        csr = sp.csr_matrix(csr, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        csr.data[:] = 1.0
        csr.eliminate_zeros()
        self.csr = csr
        self.csc = csr.tocsc()
        self.csc.sort_indices()

    @classmethod
    def from_pairs(cls, users: Iterable[int], items: Iterable[int], n_users: int, n_items: int) -> "SparseBinaryMatrix":
        users = np.asarray(list(users) if not isinstance(users, np.ndarray) else users, dtype=np.int64)
        items = np.asarray(list(items) if not isinstance(items, np.ndarray) else items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= n_users):
            raise ValueError("user id out of range")
        if items.size and (items.min() < 0 or items.max() >= n_items):
            raise ValueError("item id out of range")
        coo = sp.coo_matrix((np.ones(users.size), (users, items)), shape=(n_users, n_items))
        return cls(coo.tocsr())

    @classmethod
    def from_dense(cls, dense) -> "SparseBinaryMatrix":
        dense = np.asarray(dense)
        return cls(sp.csr_matrix((dense != 0).astype(np.float64)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.csr.shape

    @property
    def n_users(self) -> int:
        return self.csr.shape[0]

    @property
    def n_items(self) -> int:
        return self.csr.shape[1]

    @property
    def nnz(self) -> int:
        return int(self.csr.nnz)

    def row(self, i: int) -> np.ndarray:
        """Sorted item ids of user ``i``."""
        return self.csr.indices[self.csr.indptr[i]:self.csr.indptr[i + 1]]

    def col(self, j: int) -> np.ndarray:
        """Sorted user ids of item ``j``."""
        return self.csc.indices[self.csc.indptr[j]:self.csc.indptr[j + 1]]

    @property
    def row_index(self) -> list[np.ndarray]:
        return [self.row(i) for i in range(self.n_users)]

    @property
    def col_index(self) -> list[np.ndarray]:
        return [self.col(j) for j in range(self.n_items)]

    def user_counts(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.csc.indptr)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """(user, item) arrays of every stored entry in row-major order."""
        rows = np.repeat(np.arange(self.n_users), self.user_counts())
        return rows, self.csr.indices.astype(np.int64)

    def transpose(self) -> "SparseBinaryMatrix":
        return SparseBinaryMatrix(self.csc.T.tocsr())

    @property
    def T(self) -> "SparseBinaryMatrix":
        return self.transpose()

    def take_rows(self, rows) -> "SparseBinaryMatrix":
        """Sub-matrix of the given users (in the given order), all items kept."""
        return SparseBinaryMatrix(self.csr[np.asarray(rows, dtype=np.int64)])

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, shape=np.array(self.shape, dtype=np.int64),
                     indptr=self.csr.indptr.astype(np.int64), indices=self.csr.indices.astype(np.int64))

    @classmethod
    def load(cls, path) -> "SparseBinaryMatrix":
        with np.load(path) as z:
            n, m = (int(x) for x in z["shape"])
            csr = sp.csr_matrix((np.ones(z["indices"].size), z["indices"], z["indptr"]), shape=(n, m))
        return cls(csr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseBinaryMatrix) or self.shape != other.shape:
            return NotImplemented if not isinstance(other, SparseBinaryMatrix) else False
        return (np.array_equal(self.csr.indptr, other.csr.indptr)
                and np.array_equal(self.csr.indices, other.csr.indices))

    def __repr__(self) -> str:
        return f"SparseBinaryMatrix(n_users={self.n_users}, n_items={self.n_items}, nnz={self.nnz})"


def binarize_and_filter(log: InteractionLog, rating_threshold: float = 4.0, min_user_count: int = 5,
                        min_item_count: int = 0) -> tuple[SparseBinaryMatrix, dict[str, int], dict[str, int]]:
    """Binarize ratings and iteratively drop sparse users and items.

    Records with ``rating >= rating_threshold`` are kept; records without a
    rating are always kept. Duplicate (user, item) pairs collapse to one
    entry. Users with fewer than ``min_user_count`` distinct items and items
    with fewer than ``min_item_count`` distinct users are removed repeatedly
    until neither rule removes anything.

    Returns the matrix plus external-id to dense-index maps, numbered in order
    of first appearance among the surviving records.
    """
    if rating_threshold < 0 or min_user_count < 0 or min_item_count < 0:
        raise ValueError("thresholds must be non-negative")

    keep = np.ones(len(log), dtype=bool)
    if log.ratings is not None:
        r = log.ratings
        keep = np.isnan(r) | (r >= rating_threshold)

    pairs = {}
    for u, i, k in zip(log.users, log.items, keep):
        if k:
            pairs.setdefault((u, i), None)
    pairs = list(pairs)

    while True:
        ucount: dict[str, int] = {}
        icount: dict[str, int] = {}
        for u, i in pairs:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        kept = [(u, i) for u, i in pairs if ucount[u] >= min_user_count and icount[i] >= min_item_count]
        if len(kept) == len(pairs):
            break
        pairs = kept

    if not pairs:
        raise ValueError("no interactions left after filtering")

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    uu = np.empty(len(pairs), dtype=np.int64)
    ii = np.empty(len(pairs), dtype=np.int64)
    for n, (u, i) in enumerate(pairs):
        uu[n] = user_map.setdefault(u, len(user_map))
        ii[n] = item_map.setdefault(i, len(item_map))
    _logger.info("binarized %d records into %d users x %d items (nnz=%d)",
                 len(log), len(user_map), len(item_map), len(pairs))
    return SparseBinaryMatrix.from_pairs(uu, ii, len(user_map), len(item_map)), user_map, item_map


@dataclass
class SplitSpec:
    """User-level train/validation/test split with per-user item partitions.

    ``holdout`` maps each validation or test user to ``(fold_in, target)``
    sorted item arrays. Users in ``excluded`` have fewer than two items; all of
    their items are in ``fold_in`` and they are skipped by the metrics.
    """

    train_users: np.ndarray
    val_users: np.ndarray
    test_users: np.ndarray
    holdout: dict[int, tuple[np.ndarray, np.ndarray]]
    excluded: set[int] = field(default_factory=set)

    def users(self, which: str) -> np.ndarray:
        return {"train": self.train_users, "val": self.val_users, "validation": self.val_users,
                "test": self.test_users}[which]

    def fold_in_matrix(self, m: SparseBinaryMatrix, which: str) -> SparseBinaryMatrix:
        """Fold-in interactions of one holdout split, rows in ``users(which)`` order."""
        users = self.users(which)
        rows = [np.full(len(self.holdout[int(u)][0]), n) for n, u in enumerate(users)]
        cols = [self.holdout[int(u)][0] for u in users]
        r = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
        c = np.concatenate(cols) if cols else np.empty(0, dtype=np.int64)
        return SparseBinaryMatrix.from_pairs(r, c, len(users), m.n_items)

    def to_json(self) -> str:
        doc = {
            "train_users": [int(u) for u in self.train_users],
            "val_users": [int(u) for u in self.val_users],
            "test_users": [int(u) for u in self.test_users],
            "holdout": {str(u): {"fold_in": [int(x) for x in f], "target": [int(x) for x in t]}
                        for u, (f, t) in sorted(self.holdout.items())},
            "excluded": sorted(int(u) for u in self.excluded),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitSpec":
        doc = json.loads(text)
        arr = lambda xs: np.asarray(xs, dtype=np.int64)  # noqa: E731
        return cls(
            train_users=arr(doc["train_users"]),
            val_users=arr(doc["val_users"]),
            test_users=arr(doc["test_users"]),
            holdout={int(u): (arr(p["fold_in"]), arr(p["target"])) for u, p in doc["holdout"].items()},
            excluded=set(doc.get("excluded", [])),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, SplitSpec):
            return NotImplemented
        return self.to_json() == other.to_json()


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def target_size(n_items: int, fold_in_frac: float) -> int:
    """Number of target items for a holdout user with ``n_items`` (>= 2) items."""
    return max(1, _round_half_up((1.0 - fold_in_frac) * n_items))


def strong_generalization_split(m: SparseBinaryMatrix, holdout_frac: tuple[float, float] = (0.1, 0.1),
                                fold_in_frac: float = 0.8, seed: int = 0) -> SplitSpec:
    """Split users into train/validation/test and partition holdout rows.

    Users are permuted with ``np.random.default_rng(seed)``; the validation
    and test sets get ``round(n * frac)`` users each and training takes the
    rest. Holdout users are then visited in ascending id order and their items
    are shuffled by the same generator: the first ``n - target_size(n)`` go to
    fold-in, the remainder to target.
    """
    val_frac, test_frac = holdout_frac
    if not (0 < val_frac < 1 and 0 < test_frac < 1 and val_frac + test_frac < 1):
        raise ValueError(f"invalid holdout fractions {holdout_frac}")
    if not 0 < fold_in_frac < 1:
        raise ValueError(f"fold_in_frac must be in (0, 1), got {fold_in_frac}")
    n = m.n_users
    if n == 0:
        raise ValueError("matrix has no users")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = _round_half_up(n * val_frac)
    n_test = _round_half_up(n * test_frac)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError("not enough users for the requested holdout fractions")
    train = np.sort(perm[:n_train])
    val = np.sort(perm[n_train:n_train + n_val])
    test = np.sort(perm[n_train + n_val:])

    holdout: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    excluded: set[int] = set()
    for u in np.sort(np.concatenate([val, test])):
        items = m.row(int(u))
        if items.size < 2:
            holdout[int(u)] = (items.astype(np.int64).copy(), np.empty(0, dtype=np.int64))
            excluded.add(int(u))
            continue
        shuffled = rng.permutation(items)
        n_fold = items.size - target_size(items.size, fold_in_frac)
        holdout[int(u)] = (np.sort(shuffled[:n_fold]).astype(np.int64), np.sort(shuffled[n_fold:]).astype(np.int64))
    return SplitSpec(train, val, test, holdout, excluded)
