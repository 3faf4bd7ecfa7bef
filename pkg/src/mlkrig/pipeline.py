"""JSON configuration, validation and the end-to-end pipeline.

Every artifact written by :func:`run_pipeline` is listed with its sha256 in
``manifest.json``, so two runs can be compared by hash alone.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .covariance_assembly import SparsityPattern, save_block_sparse
from .estimation import mle_fit
from .field_synthesis import SHAPES, sample_field, sample_points
from .index_sets import KINDS, build_index_set
from .kernels import KernelSpec
from .multilevel_basis import build_basis, save_basis
from .partition_tree import RULES, build_tree
from .prediction import DenseKriging, DENSE_OPERATOR_N, predict, solve_gamma

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


DEFAULTS: dict[str, Any] = {
    "kernel": {"family": "matern"},
    "index_set": {"accuracy_offset": 0, "allow_rank_deficient": False},
    "tree": {"rule": "kD", "n0": None, "seed": 0},
    "seed": 0,
    "tau": "inf",
    "n": -1,
    "eps": 1e-3,
    "prune": "left",
    "beta": None,
    "estimate": False,
    "optimizer": {},
    "targets": 0,
}
REQUIRED = ("shape", "N", "d", "kernel", "index_set")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _need(obj: dict, key: str, path: str, kind, check=None, msg: str = ""):
    if key not in obj or obj[key] is None:
        raise ConfigError(f"{path}{key}", "required field is missing")
    v = obj[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if not isinstance(v, kind) or isinstance(v, bool) and kind is not bool:
        raise ConfigError(f"{path}{key}", f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}")
    if check is not None and not check(v):
        raise ConfigError(f"{path}{key}", msg or f"invalid value {v!r}")
    return v


def parse_tau(v, path: str = "tau") -> float:
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            raise ConfigError(path, f"expected a number or 'inf', got {v!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v >= 0:
        raise ConfigError(path, "expected a non-negative number or 'inf'")
    return float(v)


def validate_config(cfg: dict) -> dict:
    """Return a normalized copy of ``cfg`` or raise :class:`ConfigError`."""
    if not isinstance(cfg, dict):
        raise ConfigError("$", "configuration must be a JSON object")
    for key in REQUIRED:
        if key not in cfg:
            raise ConfigError(key, "required field is missing")
    c = _merge(DEFAULTS, cfg)
    _need(c, "shape", "", str, lambda s: s in SHAPES, f"must be one of {SHAPES}")
    _need(c, "N", "", int, lambda v: v >= 2, "must be >= 2")
    _need(c, "d", "", int, lambda v: v >= 1, "must be >= 1")
    k = c["kernel"]
    if not isinstance(k, dict):
        raise ConfigError("kernel", "expected an object")
    _need(k, "family", "kernel.", str, lambda s: s in ("matern", "gaussian"), "must be 'matern' or 'gaussian'")
    if k["family"] == "matern":
        k["nu"] = _need(k, "nu", "kernel.", float, lambda v: v > 0, "must be positive")
    k["rho"] = _need(k, "rho", "kernel.", float, lambda v: v > 0, "must be positive")
    s = c["index_set"]
    if not isinstance(s, dict):
        raise ConfigError("index_set", "expected an object")
    _need(s, "kind", "index_set.", str, lambda v: v in KINDS, f"must be one of {KINDS}")
    _need(s, "w", "index_set.", int, lambda v: v >= 0, "must be >= 0")
    _need(s, "accuracy_offset", "index_set.", int, lambda v: v >= 0, "must be >= 0")
    t = c["tree"]
    _need(t, "rule", "tree.", str, lambda v: v in RULES, f"must be one of {RULES}")
    if t.get("n0") is not None:
        _need(t, "n0", "tree.", int, lambda v: v >= 1, "must be >= 1")
    _need(t, "seed", "tree.", int)
    _need(c, "seed", "", int, lambda v: v >= 0, "must be >= 0")
    c["tau"] = parse_tau(c["tau"])
    _need(c, "n", "", int, lambda v: v >= -1, "must be >= -1")
    c["eps"] = _need(c, "eps", "", float, lambda v: 0 < v < 1, "must lie in (0, 1)")
    _need(c, "prune", "", str, lambda v: v in ("left", "both"), "must be 'left' or 'both'")
    _need(c, "targets", "", int, lambda v: v >= 0, "must be >= 0")
    return c


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("$", f"invalid JSON: {exc}") from None
    return raw


def kernel_from(cfg: dict) -> KernelSpec:
    k = cfg["kernel"]
    return KernelSpec(k["family"], float(k.get("nu", 0.5)), float(k["rho"]), k.get("theta"))


# ---------------------------------------------------------------- io helpers


def json_dump(obj, path) -> None:
    def default(o):
        if isinstance(o, (np.integer,)):
            return int(o)
        if isinstance(o, (np.floating,)):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)

    def clean(o):
        if isinstance(o, float) and not math.isfinite(o):
            return str(o)
        if isinstance(o, dict):
            return {str(k): clean(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [clean(v) for v in o]
        return o

    with open(path, "w") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_obs(path, points, Z=None) -> None:
    X = np.asarray(points, dtype=float)
    d = X.shape[1]
    header = [f"x{i}" for i in range(d)] + (["z"] if Z is not None else [])
    data = X if Z is None else np.column_stack([X, Z])
    write_csv(path, header, data.tolist())


def read_obs(path, with_z: bool = True) -> tuple[np.ndarray, Optional[np.ndarray]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(str(path), "empty CSV")
    header, body = rows[0], rows[1:]
    A = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    if with_z and header and header[-1] == "z":
        return A[:, :-1], A[:, -1]
    return A, None


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- pipeline


def build_geometry(cfg: dict, X: np.ndarray):
    """Index set, tree and basis for a validated config and sites ``X``."""
    s = cfg["index_set"]
    S = build_index_set(s["kind"], cfg["d"], s["w"])
    n0 = cfg["tree"]["n0"] or max(2 * len(build_index_set(s["kind"], cfg["d"], s["w"] + s["accuracy_offset"])), 1)
    tree = build_tree(X, n0, cfg["tree"]["rule"], cfg["tree"]["seed"])
    basis = build_basis(tree, X, S, s["accuracy_offset"],
                        allow_rank_deficient=bool(s.get("allow_rank_deficient", False)))
    return S, tree, basis


def run_pipeline(config: dict, out_dir) -> dict:
    """gen -> tree -> basis -> assemble -> (estimate) -> (predict), with hashes."""
    cfg = validate_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    kern = kernel_from(cfg)
    artifacts: dict[str, str] = {}

    X = sample_points(cfg["shape"], cfg["N"], cfg["d"], cfg["seed"])
    S0 = build_index_set(cfg["index_set"]["kind"], cfg["d"], cfg["index_set"]["w"])
    Z = sample_field(X, kern, cfg["beta"], S0 if cfg["beta"] is not None else None, seed=cfg["seed"] + 1)
    write_obs(out / "obs.csv", X, Z)
    artifacts["obs.csv"] = "gen"

    S, tree, basis = build_geometry(cfg, X)
    json_dump(tree.stats(), out / "tree.json")
    artifacts["tree.json"] = "tree"
    save_basis(basis, out / "basis.bin")
    artifacts["basis.bin"] = "basis"

    pat = SparsityPattern(basis, tree, X, cfg["tau"], cfg["n"], cfg["prune"])
    CW = pat.assemble(kern)
    save_block_sparse(CW, out / "cw.mlks")
    artifacts["cw.mlks"] = "assemble"
    json_dump({"dim": CW.dim, "nnz": CW.nnz, "density": CW.density, "tau": cfg["tau"], "n": cfg["n"],
               "kernel_evals": CW.kernel_evals}, out / "assemble.json")
    artifacts["assemble.json"] = "assemble"

    theta = (kern.nu, kern.rho)
    if cfg["estimate"]:
        fit = mle_fit(Z, basis, tree, X, kern.family, cfg["tau"], cfg["n"], cfg["optimizer"])
        theta = fit.theta_hat
        json_dump({"fit": fit.to_dict(), "config": cfg}, out / "fit.json")
        artifacts["fit.json"] = "estimate"

    if cfg["targets"]:
        T = sample_points(cfg["shape"], cfg["targets"], cfg["d"], cfg["seed"] + 2)
        k2 = kern.with_params(*theta)
        sol = solve_gamma(basis, k2, X, Z, True, cfg["eps"])
        zhat = predict(T, sol.beta_hat, sol.gamma, k2, X, S)
        rows = np.column_stack([T, zhat])
        header = [f"x{i}" for i in range(cfg["d"])] + ["z_hat"]
        if cfg["N"] <= DENSE_OPERATOR_N and basis.p == len(S):
            rows = np.column_stack([rows, DenseKriging(k2, X, S).mse(T)])
            header.append("mse")
        write_csv(out / "pred.csv", header, rows.tolist())
        artifacts["pred.csv"] = "predict"
        json_dump(sol.diagnostics(), out / "pred.json")
        artifacts["pred.json"] = "predict"

    manifest = {"config": cfg, "artifacts": {name: {"stage": stage, "sha256": sha256(out / name)}
                                            for name, stage in sorted(artifacts.items())}}
    json_dump(manifest, out / "manifest.json")
    return manifest


def limit_threads(n: Optional[int]):
    """Context manager limiting BLAS threads; no-op for ``None``."""
    from threadpoolctl import threadpool_limits
    if n is not None:
        os.environ["OMP_NUM_THREADS"] = str(n)
    return threadpool_limits(limits=n)
