"""Command-line entry point: ``fairmf <command> [options]``.

Commands read one JSON config; command-line flags override its fields. Every
command writes a ``manifest.json`` holding the resolved config and the SHA-256
of its input data, which is enough to rerun it.

Exit status is 0 on success (diagnostic findings included), 1 on internal
errors and 2 on bad configuration or input.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import check_trajectory, reference_hyperparams, theorem_regime
from .factors import frequency_weights, load_factors, save_factors
from .fiadmm import AdmmState, EpochTrace, train_fiadmm
from .harness import (
    SOLVERS,
    GridSpec,
    evaluate_split,
    file_sha256,
    grid_search,
    matrix_sha256,
    report_rows,
    train_items,
    write_rows_csv,
)
from .interactions import (
    InteractionFormatError,
    SparseBinaryMatrix,
    SplitSpec,
    binarize_and_filter,
    load_interactions,
    strong_generalization_split,
)
from .params import HyperParams
from .synthetic import reference_instance

_logger = logging.getLogger("fairmf")

MATRIX_FILE = "matrix.npz"
SPLIT_FILE = "split.json"
MANIFEST_FILE = "manifest.json"
STATE_FILE = "state.json"
TRACE_FILE = "trace.csv"


class ConfigError(ValueError):
    """Bad configuration or input; mapped to exit status 2."""


@dataclass
class RunConfig:
    """Everything a command needs besides the input files themselves."""

    data: str | None = None
    delimiter: str = "\t"
    header: bool | None = None
    rating_threshold: float = 4.0
    min_user_count: int = 5
    min_item_count: int = 0
    holdout_frac: tuple[float, float] = (0.1, 0.1)
    fold_in_frac: float = 0.8
    split_seed: int = 0
    solver: str = "fiadmm"
    hyperparams: HyperParams = field(default_factory=HyperParams)
    grid: GridSpec | None = None
    output_dir: str = "out"
    deterministic: bool = False
    threads: int | None = None

    def to_dict(self) -> dict:
        doc = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        doc["holdout_frac"] = list(self.holdout_frac)
        doc["hyperparams"] = self.hyperparams.to_dict()
        doc["grid"] = None if self.grid is None else self.grid.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        doc = dict(doc)
        try:
            doc["hyperparams"] = HyperParams.from_dict(doc.get("hyperparams") or {})
            if doc.get("grid") is not None:
                doc["grid"] = GridSpec.from_dict(doc["grid"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if "holdout_frac" in doc:
            doc["holdout_frac"] = tuple(doc["holdout_frac"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.solver not in SOLVERS:
            raise ConfigError(f"solver must be one of {SOLVERS}, got {self.solver!r}")
        if self.threads is not None and int(self.threads) < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    """Load ``--config`` (if any) and apply command-line overrides."""
    doc: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    hp = dict(doc.get("hyperparams") or {})
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        hp[key.strip()] = _parse_value(value)
    if args.seed is not None:
        hp["seed"] = args.seed
        doc["split_seed"] = args.seed
    if getattr(args, "k", None):
        hp["k_list"] = list(args.k)
    doc["hyperparams"] = hp
    for name in ("solver", "threads", "output_dir"):
        value = getattr(args, name, None)
        if value is not None:
            doc[name] = value
    if args.deterministic:
        doc["deterministic"] = True
    if getattr(args, "input", None):
        doc["data"] = args.input
    return RunConfig.from_dict(doc)


def _write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "config": cfg.to_dict(), "inputs": inputs}
    if extra:
        doc.update(extra)
    (out / MANIFEST_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"no such file or directory: {path}")
    return path


def _load_prepared(data_dir) -> tuple[SparseBinaryMatrix, SplitSpec, dict]:
    d = Path(data_dir)
    m = SparseBinaryMatrix.load(_require(d / MATRIX_FILE))
    split = SplitSpec.from_json(_require(d / SPLIT_FILE).read_text())
    return m, split, {"matrix_sha256": matrix_sha256(m), "split_sha256": file_sha256(d / SPLIT_FILE)}


def cmd_prepare_data(args, cfg: RunConfig) -> int:
    if cfg.data is None:
        raise ConfigError("no input file given (use --input or the 'data' config field)")
    src = _require(Path(cfg.data))
    log = load_interactions(src, delimiter=cfg.delimiter, header=cfg.header)
    m, _, _ = binarize_and_filter(log, cfg.rating_threshold, cfg.min_user_count, cfg.min_item_count)
    split = strong_generalization_split(m, cfg.holdout_frac, cfg.fold_in_frac, cfg.split_seed)
    out = _out_dir(cfg)
    m.save(out / MATRIX_FILE)
    (out / SPLIT_FILE).write_text(split.to_json())
    _write_manifest(out, "prepare-data", cfg, {"data_sha256": file_sha256(src)},
                    {"shape": list(m.shape), "nnz": m.nnz})
    print(f"{m.n_users} users, {m.n_items} items, {m.nnz} interactions -> {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    m, split, hashes = _load_prepared(args.data)
    hp = cfg.hyperparams
    v, extra = train_items(m.take_rows(split.train_users), hp, cfg.solver, cfg.deterministic)
    out = _out_dir(cfg)
    save_factors(out / "V.fmf", v)
    state = {"solver": cfg.solver, "hyperparams": hp.to_dict()}
    if cfg.solver == "fiadmm":
        st, trace = extra["state"], extra["trace"]
        save_factors(out / "U.fmf", st.u)
        state.update(s=st.s.tolist(), w=st.w.tolist(), trace=trace.to_dict())
        (out / TRACE_FILE).write_text(trace.to_csv())
    else:
        save_factors(out / "U.fmf", extra["u"])
        state["loss_trace"] = [float(x) for x in extra["loss_trace"]]
        (out / TRACE_FILE).write_text("epoch,loss\n" + "".join(
            f"{k},{x!r}\n" for k, x in enumerate(state["loss_trace"])))
    (out / STATE_FILE).write_text(json.dumps(state, sort_keys=True))
    _write_manifest(out, "train", cfg, hashes)
    print(f"trained {cfg.solver} with d={hp.d} for {hp.t_train} epochs -> {out}")
    return 0


def _load_checkpoint(ckpt_dir) -> tuple[np.ndarray, dict]:
    d = Path(ckpt_dir)
    state = json.loads(_require(d / STATE_FILE).read_text())
    v = load_factors(_require(d / "V.fmf"))
    return v, state


def cmd_evaluate(args, cfg: RunConfig) -> int:
    m, split, hashes = _load_prepared(args.data)
    v, state = _load_checkpoint(args.checkpoint)
    saved = HyperParams.from_dict(state["hyperparams"])
    # fold-in settings come from the checkpoint unless overridden on the command line
    hp = saved.replace(**{k: getattr(cfg.hyperparams, k) for k in _overridden(args)})
    if v.shape[1] != hp.d:
        raise ConfigError(f"dimension mismatch: checkpoint factors have d={v.shape[1]} but config has d={hp.d}")
    if v.shape[0] != m.n_items:
        raise ConfigError(f"dimension mismatch: checkpoint has {v.shape[0]} items but data has {m.n_items}")
    solver = state.get("solver", cfg.solver)
    out = _out_dir(cfg)
    rows, reports = [], {}
    for which in args.splits:
        rep = evaluate_split(v, m, split, which, hp, solver, cfg.deterministic)
        reports[which] = rep.to_dict()
        rows.extend(report_rows(rep, hp, solver, which))
        for note in rep.notes:
            _logger.warning("%s: %s", which, note)
    write_rows_csv(out / "results.csv", rows)
    (out / "report.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    hashes["checkpoint_v_sha256"] = file_sha256(Path(args.checkpoint) / "V.fmf")
    _write_manifest(out, "evaluate", cfg, hashes, {"hyperparams_used": hp.to_dict()})
    for which, rep in reports.items():
        print(which, " ".join(f"{name}@{k}={val:.4f}" for name in ("recall", "ndcg", "gini")
                              for k, val in rep[name].items()))
    return 0


def _overridden(args) -> set[str]:
    keys = {item.partition("=")[0].strip() for item in (getattr(args, "set", None) or [])}
    if args.seed is not None:
        keys.add("seed")
    if getattr(args, "k", None):
        keys.add("k_list")
    return keys


def cmd_grid_search(args, cfg: RunConfig) -> int:
    if cfg.grid is None:
        raise ConfigError("grid-search needs a 'grid' section in the config")
    m, split, hashes = _load_prepared(args.data)
    res = grid_search(m, split, cfg.grid, cfg.solver, cfg.hyperparams, which=args.split,
                      deterministic=cfg.deterministic)
    out = _out_dir(cfg)
    write_rows_csv(out / "results.csv", res.rows)
    front = [dict(hp=p.hp.to_dict(), quality=p.quality, unfairness=p.unfairness) for p in res.frontier_points()]
    (out / "frontier.json").write_text(json.dumps({"frontier": front, "failures": res.failures},
                                                  indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "grid-search", cfg, hashes)
    print(f"{len(res.points)} cells evaluated, {len(res.failures)} failed, {len(front)} on the frontier")
    return 0


def cmd_diagnose(args, cfg: RunConfig) -> int:
    """Check a run against the convergence theory.

    With ``--checkpoint`` the recorded trace is checked (trace-level checks
    only); ``--lemmas`` retrains from the checkpoint's settings keeping every
    iterate so the per-epoch inequalities can be evaluated too. Without a
    checkpoint the calibrated synthetic reference run is diagnosed.
    """
    if args.checkpoint is None:
        m = reference_instance()
        hp = theorem_regime(m, reference_hyperparams(epochs=args.epochs or 500))
        inputs = {"matrix_sha256": matrix_sha256(m), "data": "synthetic reference instance"}
        history = None
        w = frequency_weights(m, hp.lambda2, hp.eta, hp.alpha0)
        _, trace, history = train_fiadmm(m, hp, w, deterministic=cfg.deterministic, keep_history=True)
    else:
        if args.data is None:
            raise ConfigError("--checkpoint needs --data to recompute the regularisation weights")
        m_all, split, inputs = _load_prepared(args.data)
        m = m_all.take_rows(split.train_users)
        _, state = _load_checkpoint(args.checkpoint)
        if state.get("solver") != "fiadmm" or "trace" not in state:
            raise ConfigError("diagnose needs a fiadmm checkpoint with a recorded trace")
        hp = HyperParams.from_dict(state["hyperparams"])
        w = frequency_weights(m, hp.lambda2, hp.eta, hp.alpha0)
        trace = EpochTrace.from_dict(state["trace"])
        history = None
        if args.lemmas:
            _, trace, history = train_fiadmm(m, hp, w, deterministic=cfg.deterministic, keep_history=True)
    rep = check_trajectory(m, trace, w, hp, history)
    out = _out_dir(cfg)
    (out / "diagnostics.json").write_text(rep.to_json() + "\n")
    _write_manifest(out, "diagnose", cfg, inputs, {"hyperparams_used": hp.to_dict()})
    c = rep.constants
    print(f"rho={hp.rho:.4g} (bound {c.rho_bound:.4g}, ok={rep.conditions[0]}) "
          f"gamma={hp.gamma:.4g} (bound {c.gamma_bound:.4g}, ok={rep.conditions[1]})")
    print(f"violations={rep.violations} converged={rep.converged}")
    return 0


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, help="overrides the solver and split seeds")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    p.add_argument("--deterministic", action="store_true", help="fixed-order reductions")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a hyper-parameter")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairmf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="binarize, filter and split an interaction log")
    _common(p)
    p.add_argument("--input", help="interaction log (user, item[, rating[, timestamp]])")

    p = sub.add_parser("train", help="train item factors on the training users")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by prepare-data")
    p.add_argument("--solver", choices=SOLVERS)

    p = sub.add_parser("evaluate", help="fold in holdout users and compute metrics")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="directory written by train")
    p.add_argument("--splits", nargs="+", default=["val", "test"], choices=["val", "test"])
    p.add_argument("-k", type=int, nargs="+", help="cutoffs (default 20 50 100)")

    p = sub.add_parser("grid-search", help="sweep a hyper-parameter grid and report the Pareto frontier")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--split", default="val", choices=["val", "test"])

    p = sub.add_parser("diagnose", help="check a fiadmm run against the convergence conditions")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--lemmas", action="store_true", help="retrain keeping iterates to check per-epoch bounds")
    p.add_argument("--epochs", type=int, help="epochs for the synthetic reference run")
    return parser


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
    "diagnose": cmd_diagnose,
}


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        with _thread_limit(cfg.threads):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, InteractionFormatError) as exc:
        print(f"fairmf: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # validation failures (e.g. hyper-parameter ranges) are input errors too
        print(f"fairmf: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        _logger.debug("internal error", exc_info=True)
        print(f"fairmf: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
