"""Split, train, fold in, rank and score; hyper-parameter grids and Pareto frontiers."""

from __future__ import annotations

import csv
import hashlib
import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .factors import topk_batch
from .fiadmm import fold_in, train_fiadmm
from .ials import fold_in_ials, train_ials
from .interactions import SparseBinaryMatrix, SplitSpec
from .metrics import EvalReport, evaluate_rankings
from .params import HyperParams

_logger = logging.getLogger(__name__)

SOLVERS = ("ials", "fiadmm")
RESULT_COLUMNS = ("solver", "lambda2", "alpha0", "lambda_f", "rho", "gamma", "split", "metric", "K", "value")


def train_items(m_train: SparseBinaryMatrix, hp: HyperParams, solver: str, deterministic: bool = False):
    """Train ``solver`` and return ``(V, extra)`` where ``extra`` holds solver output."""
    if solver == "ials":
        model, trace = train_ials(m_train, hp, deterministic=deterministic)
        return model.v, {"u": model.u, "loss_trace": trace}
    if solver == "fiadmm":
        st, trace = train_fiadmm(m_train, hp, deterministic=deterministic)
        return st.v, {"state": st, "trace": trace}
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def fold_in_users(v: np.ndarray, m_fold: SparseBinaryMatrix, hp: HyperParams, solver: str,
                  deterministic: bool = False) -> np.ndarray:
    if solver == "ials":
        return fold_in_ials(v, m_fold, hp)
    if solver == "fiadmm":
        return fold_in(v, m_fold, hp, deterministic=deterministic)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def evaluate_users(u: np.ndarray, v: np.ndarray, users, split: SplitSpec, k_list) -> EvalReport:
    """Rank all non-fold-in items for each row of ``u`` and score against targets.

    ``u[n]`` belongs to ``users[n]``. Users flagged as excluded or without
    targets are skipped.
    """
    keep = [n for n, user in enumerate(users)
            if int(user) not in split.excluded and split.holdout[int(user)][1].size > 0]
    k_max = min(max(k_list), v.shape[0])
    exclude = [split.holdout[int(users[n])][0] for n in keep]
    ranked = topk_batch(u[keep], v, k_max, exclude)
    targets = [split.holdout[int(users[n])][1] for n in keep]
    return evaluate_rankings(ranked, targets, v.shape[0], k_list)


def evaluate_split(v: np.ndarray, m: SparseBinaryMatrix, split: SplitSpec, which: str, hp: HyperParams,
                   solver: str, deterministic: bool = False) -> EvalReport:
    users = split.users(which)
    m_fold = split.fold_in_matrix(m, which)
    u = fold_in_users(v, m_fold, hp, solver, deterministic)
    return evaluate_users(u, v, users, split, hp.k_list)


def run_experiment(m: SparseBinaryMatrix, split: SplitSpec, hp: HyperParams, solver: str = "fiadmm",
                   splits=("val", "test"), deterministic: bool = False) -> dict[str, EvalReport]:
    """Train on the training users' full rows and evaluate each requested holdout split."""
    if any(int(u) >= m.n_users for u in split.train_users):
        raise ValueError("split refers to users outside the matrix")
    v, _ = train_items(m.take_rows(split.train_users), hp, solver, deterministic)
    return {which: evaluate_split(v, m, split, which, hp, solver, deterministic) for which in splits}


@dataclass
class GridSpec:
    """Value lists per hyper-parameter; the grid is their cartesian product.

    Axes left as ``None`` keep the base settings' value.
    """

    lambda2: list[float] | None = None
    alpha0: list[float] | None = None
    lambda_f: list[float] | None = None
    rho: list[float] | None = None
    gamma: list[float] | None = None

    _NAMES = ("lambda2", "alpha0", "lambda_f", "rho", "gamma")

    def cells(self, base: HyperParams) -> list[HyperParams]:
        names = [n for n in self._NAMES if getattr(self, n) is not None]
        values = [list(getattr(self, n)) for n in names]
        if any(not v for v in values):
            raise ValueError("every grid axis needs at least one value")
        return [base.replace(**dict(zip(names, combo))) for combo in itertools.product(*values)]

    @classmethod
    def from_dict(cls, doc: dict) -> "GridSpec":
        unknown = set(doc) - set(cls._NAMES)
        if unknown:
            raise ValueError(f"unknown grid axes: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {n: getattr(self, n) for n in self._NAMES if getattr(self, n) is not None}


@dataclass
class ParetoPoint:
    hp: HyperParams
    quality: float
    unfairness: float


def pareto_frontier(points) -> list[int]:
    """Indices of the non-dominated ``(quality, unfairness)`` points.

    Quality is maximized and unfairness minimized. Identical points do not
    dominate each other, so ties are all kept. The result is ordered by
    unfairness ascending, then quality descending, then index.
    """
    pts = [(float(q), float(g)) for q, g in points]
    order = sorted(range(len(pts)), key=lambda i: (pts[i][1], -pts[i][0], i))
    frontier = []
    best_q = -np.inf
    for _, group in itertools.groupby(order, key=lambda i: pts[i][1]):
        group = list(group)
        top = pts[group[0]][0]
        if top > best_q:
            frontier.extend(i for i in group if pts[i][0] == top)
            best_q = top
    return frontier


@dataclass
class GridResult:
    points: list[ParetoPoint]
    frontier: list[int]
    rows: list[dict]
    failures: list[dict]

    def frontier_points(self) -> list[ParetoPoint]:
        return [self.points[i] for i in self.frontier]


def report_rows(report: EvalReport, hp: HyperParams, solver: str, which: str) -> list[dict]:
    return [dict(solver=solver, lambda2=hp.lambda2, alpha0=hp.alpha0, lambda_f=hp.lambda_f, rho=hp.rho,
                 gamma=hp.gamma, split=which, metric=metric, K=k, value=value)
            for metric, k, value in report.rows()]


def grid_search(m: SparseBinaryMatrix, split: SplitSpec, grid: GridSpec, solver: str = "fiadmm",
                base: HyperParams | None = None, quality=("ndcg", 100), unfairness=("gini", 100),
                which: str = "val", deterministic: bool = False) -> GridResult:
    """Evaluate every grid cell on one holdout split and extract the Pareto frontier.

    A cell that raises is recorded in ``failures`` and skipped.
    """
    base = base or HyperParams()
    needed = set(base.k_list) | {quality[1], unfairness[1]}
    base = base.replace(k_list=tuple(sorted(needed)))
    points, rows, failures = [], [], []
    for hp in grid.cells(base):
        try:
            rep = run_experiment(m, split, hp, solver, splits=(which,), deterministic=deterministic)[which]
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
            _logger.warning("grid cell %s failed: %s", hp, exc)
            failures.append({"hp": hp.to_dict(), "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.extend(report_rows(rep, hp, solver, which))
        points.append(ParetoPoint(hp, getattr(rep, quality[0])[quality[1]], getattr(rep, unfairness[0])[unfairness[1]]))
    front = pareto_frontier([(p.quality, p.unfairness) for p in points])
    return GridResult(points, front, rows, failures)


def write_rows_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(Path(path), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def matrix_sha256(m: SparseBinaryMatrix) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(m.shape, dtype=np.int64).tobytes())
    h.update(m.csr.indptr.astype(np.int64).tobytes())
    h.update(m.csr.indices.astype(np.int64).tobytes())
    return h.hexdigest()
