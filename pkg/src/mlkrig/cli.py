"""``mlkrig`` command line.

Exit codes: 0 ok, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import bench
from .covariance_assembly import SparsityPattern, save_block_sparse
from .error_bounds import bound_report
from .estimation import FitError, mle_fit
from .field_synthesis import SHAPES, sample_field, sample_points
from .index_sets import KINDS, CardinalityError, build_index_set
from .kernels import KernelSpec
from .multilevel_basis import RankDeficiencyError, build_basis, save_basis
from .partition_tree import RULES, build_tree
from .pipeline import (ConfigError, build_geometry, json_dump, kernel_from, limit_threads, load_config,
                       parse_tau, read_obs, run_pipeline, validate_config, write_csv, write_obs)
from .prediction import DENSE_OPERATOR_N, DenseKriging, predict, solve_gamma
from .sparse_solver import NotSPDError, PCGNonConvergence

log = logging.getLogger("mlkrig")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _out(args, name: str) -> Path:
    p = Path(name)
    if args.out_dir and not p.is_absolute():
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        p = Path(args.out_dir) / p
    return p


def _kernel_args(p):
    p.add_argument("--family", default="matern", choices=("matern", "gaussian"))
    p.add_argument("--nu", type=float, default=0.5)
    p.add_argument("--rho", type=float, default=1.0)


def _geometry_args(p):
    p.add_argument("--data", required=True)
    p.add_argument("--kind", default="TD", choices=KINDS)
    p.add_argument("--w", type=int, default=1)
    p.add_argument("--n0", type=int, default=None)
    p.add_argument("--rule", default="kD", choices=RULES)
    p.add_argument("--allow-rank-deficient", action="store_true")


def _geometry(args):
    X, Z = read_obs(args.data)
    S = build_index_set(args.kind, X.shape[1], args.w)
    tree = build_tree(X, args.n0 or 2 * len(S), args.rule, args.seed)
    B = build_basis(tree, X, S, allow_rank_deficient=args.allow_rank_deficient)
    return X, Z, S, tree, B


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    k = KernelSpec(args.family, args.nu, args.rho)
    X = sample_points(args.shape, args.n, args.d, args.seed)
    Z = sample_field(X, k, seed=args.seed + 1)
    write_obs(_out(args, args.out), X, Z)


def cmd_indexset(args):
    S = build_index_set(args.kind, args.d, args.w)
    print(len(S))
    if args.list:
        print(S.to_json())
    if args.out:
        _out(args, args.out).write_text(S.to_json() + "\n")


def cmd_tree(args):
    X, _ = read_obs(args.data)
    tree = build_tree(X, args.n0, args.rule, args.seed)
    stats = tree.stats()
    if args.stats:
        print(json.dumps(stats, sort_keys=True))
    if args.out:
        json_dump(stats, _out(args, args.out))


def cmd_basis(args):
    X, Z, S, tree, B = _geometry(args)
    save_basis(B, _out(args, args.out))
    print(json.dumps({"N": B.N, "p": B.p, "p_tilde": B.p_tilde, "t": B.t, "details": B.n_details}))


def cmd_assemble(args):
    X, Z, S, tree, B = _geometry(args)
    k = KernelSpec(args.family, args.nu, args.rho)
    C = SparsityPattern(B, tree, X, parse_tau(args.tau, "--tau"), args.n, args.prune).assemble(k)
    save_block_sparse(C, _out(args, args.out))
    if args.mtx:
        C.to_matrix_market(_out(args, args.mtx))
    print(json.dumps({"dim": C.dim, "nnz": C.nnz, "density": C.density}))


def cmd_estimate(args):
    cfg = validate_config(load_config(args.config))
    X, Z = read_obs(args.data)
    if Z is None:
        raise ConfigError("data", "observation file needs a 'z' column")
    cfg["N"], cfg["d"] = int(X.shape[0]), int(X.shape[1])
    S, tree, B = build_geometry(cfg, X)
    fit = mle_fit(Z, B, tree, X, cfg["kernel"]["family"], cfg["tau"], cfg["n"], cfg["optimizer"])
    json_dump({"fit": fit.to_dict(), "config": cfg,
               "diagnostics": {"t": B.t, "p": B.p, "details": B.n_details}}, _out(args, args.out))


def cmd_predict(args):
    with open(args.fit) as fh:
        fitdoc = json.load(fh)
    if "config" not in fitdoc or "fit" not in fitdoc:
        raise ConfigError("fit", "expected the output of 'mlkrig estimate'")
    cfg = validate_config(fitdoc["config"])
    X, Z = read_obs(args.data)
    T, _ = read_obs(args.targets)
    if Z is None:
        raise ConfigError("data", "observation file needs a 'z' column")
    S, tree, B = build_geometry(cfg, X)
    k = kernel_from(cfg).with_params(*fitdoc["fit"]["theta_hat"])
    sol = solve_gamma(B, k, X, Z, True, cfg["eps"])
    zhat = np.atleast_1d(predict(T, sol.beta_hat, sol.gamma, k, X, S))
    header = [f"x{i}" for i in range(T.shape[1])] + ["z_hat"]
    rows = np.column_stack([T, zhat])
    if X.shape[0] <= DENSE_OPERATOR_N and B.p == len(S):
        rows = np.column_stack([rows, DenseKriging(k, X, S).mse(T)])
        header.append("mse")
    write_csv(_out(args, args.out), header, rows.tolist())


def cmd_bounds(args):
    cfg = validate_config(load_config(args.config))
    k = kernel_from(cfg)
    X = sample_points(cfg["shape"], cfg["N"], cfg["d"], cfg["seed"])
    S, tree, B = build_geometry(cfg, X)
    tau = cfg["tau"] if math.isfinite(cfg["tau"]) else 1.0
    rep = bound_report(k, cfg["d"], cfg["index_set"]["w"], cfg["index_set"]["accuracy_offset"],
                       B.t, cfg["n"], tau, B.p_tilde)
    text = rep.to_json()
    if args.out:
        _out(args, args.out).write_text(text + "\n")
    else:
        print(text)


def cmd_run(args):
    run_pipeline(load_config(args.config), args.out_dir or ".")


def _bench(fn, timed: bool):
    def run(args):
        cfg = load_config(args.config)
        kw = {"timings": args.timings} if timed else {}
        fn(cfg, _out(args, args.out), **kw)
    return run


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mlkrig", description="Multi-level basis kriging toolkit")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="synthetic sites and one field realization")
    p.add_argument("--shape", choices=SHAPES, default="cube")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    _kernel_args(p)
    p.add_argument("--out", default="obs.csv")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("indexset", help="cardinality of a multi-index set")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--list", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_indexset)

    p = sub.add_parser("tree", help="partition tree summary")
    p.add_argument("--data", required=True)
    p.add_argument("--n0", type=int, default=32)
    p.add_argument("--rule", choices=RULES, default="kD")
    p.add_argument("--stats", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("basis", help="build and store the multi-level basis")
    _geometry_args(p)
    p.add_argument("--out", default="basis.bin")
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("assemble", help="truncated multi-level covariance")
    _geometry_args(p)
    _kernel_args(p)
    p.add_argument("--tau", default="inf")
    p.add_argument("--n", type=int, default=-1)
    p.add_argument("--prune", choices=("left", "both"), default="left")
    p.add_argument("--out", default="cw.mlks")
    p.add_argument("--mtx", default=None, help="also write MatrixMarket text")
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("estimate", help="maximum-likelihood fit of (nu, rho)")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="fit.json")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("predict", help="kriging predictions at target sites")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--out", default="pred.csv")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bounds", help="a-posteriori truncation bound report")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("run", help="full pipeline with hashed artifacts")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    for name, fn, timed in (("bench-condition", bench.bench_condition, False),
                            ("bench-sparsity", bench.bench_sparsity, True),
                            ("bench-estimation", bench.bench_estimation, False),
                            ("bench-prediction", bench.bench_prediction, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=name.replace("-", "_") + ".csv")
        if timed:
            p.add_argument("--timings", action="store_true", help="fill the wall-clock columns")
        p.set_defaults(func=_bench(fn, timed))
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with limit_threads(args.threads):
            args.func(args)
    except (ConfigError, CardinalityError, FileNotFoundError, KeyError, ValueError) as exc:
        if isinstance(exc, RankDeficiencyError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NotSPDError, FitError, PCGNonConvergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
