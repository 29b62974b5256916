"""Sweep runner: build instances, sample, fit, score exactly, and write CSV reports.

Every (sweep point, seed) pair draws its randomness from
``SeedSequence(global_seed, spawn_key=(i_H, i_W, i_n, i_K, seed))``, so rows do
not depend on scheduling or on the number of worker processes.  Rows are sorted
canonically before writing.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import estimators as est
from .core import exact_seq_distribution, hellinger_squared, sample_dataset, tv_distance
from .errors import ArbcError, ConfigError, DomainError
from .instances import (
    ConsistencyGame, InstanceBundle, LinearInstance, game_best_in_class, game_log_loss_fit,
    make_consistency_game, make_delta_instance, make_h_instance, make_misspecified_linear_instance,
    make_unbounded_instance,
)
from .parity import ParityInstance
from .policies import Policy, best_in_class

CSV_HEADER = ("estimator", "instance", "H", "W", "n", "seed", "hellinger_sq", "tv", "best_in_class",
              "approx_ratio", "wallclock_ms")
PLOT_HEADER = ("estimator", "H", "median_approx_ratio", "mean_approx_ratio", "stat_floor", "rows")
NA = "na"

TOP_KEYS = {"instance", "estimators", "sweep", "output", "seed", "stat_floor", "record_wallclock", "grid_points"}
SWEEP_KEYS = {"n", "H", "W", "K", "seeds"}
OUTPUT_KEYS = {"csv", "plot_data"}
ESTIMATOR_KEYS = {"name", "params", "label"}
INSTANCE_PARAMS = {
    "delta": {"H", "W", "delta"},
    "h": {"H", "W", "eps"},
    "unbounded": {"H", "eps"},
    "consistency": {"H"},
    "linear": {"H", "weights", "scale", "radius", "mixed_prob"},
}
GAME_ESTIMATORS = {"log_loss"}
LINEAR_ESTIMATORS = est.FINITE_CLASS_ESTIMATORS | {"gaalm", "chunk_kr"}
DEFAULT_GRID_POINTS = 41


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) {extra} in {where}")


@dataclass
class EstimatorSpec:
    name: str
    params: dict = field(default_factory=dict)
    label: str | None = None

    def display(self, K: int | None) -> str:
        base = self.label or self.name
        return f"{base}[K={K}]" if K is not None and self.name == "chunk_kr" else base


@dataclass
class ExperimentConfig:
    """Parsed and validated sweep description."""

    instance: dict
    estimators: list
    n: list
    seeds: list
    seed: int
    H: list | None = None
    W: list | None = None
    K: list | None = None
    csv_path: str | None = None
    plot_path: str | None = None
    stat_floor: bool = False
    record_wallclock: bool = False
    grid_points: int = DEFAULT_GRID_POINTS

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        _reject_unknown(d, TOP_KEYS, "config")
        if "seed" not in d:
            raise ConfigError("config needs a global 'seed'")
        seed = d["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("'seed' must be a nonnegative integer")
        inst = d.get("instance")
        if inst is None:
            raise ConfigError("config needs an 'instance'")
        inst = _parse_instance(inst, base_dir)
        specs = []
        for i, e in enumerate(d.get("estimators", [])):
            if isinstance(e, str):
                e = {"name": e}
            _reject_unknown(e, ESTIMATOR_KEYS, f"estimators[{i}]")
            if e.get("name") not in est.ESTIMATORS:
                raise ConfigError(f"estimators[{i}]: unknown estimator {e.get('name')!r}")
            params = e.get("params", {})
            if not isinstance(params, dict):
                raise ConfigError(f"estimators[{i}].params must be an object")
            specs.append(EstimatorSpec(e["name"], dict(params), e.get("label")))
        sweep = d.get("sweep")
        if sweep is None:
            raise ConfigError("config needs a 'sweep'")
        _reject_unknown(sweep, SWEEP_KEYS, "sweep")
        axes = {}
        for key in ("n", "H", "W", "K"):
            if key in sweep:
                axes[key] = _axis(sweep[key], key, integer=key != "W")
        if "n" not in axes:
            raise ConfigError("sweep needs an 'n' axis")
        if "seeds" not in sweep:
            raise ConfigError("sweep needs 'seeds'")
        seeds = sweep["seeds"]
        if isinstance(seeds, int) and not isinstance(seeds, bool):
            if seeds < 1:
                raise ConfigError("seed count must be >= 1")
            seeds = list(range(seeds))
        seeds = _axis(seeds, "seeds", integer=True)
        if len(set(seeds)) != len(seeds) or min(seeds) < 0:
            raise ConfigError("seeds must be distinct nonnegative integers")
        out = d.get("output", {})
        _reject_unknown(out, OUTPUT_KEYS, "output")
        grid = d.get("grid_points", DEFAULT_GRID_POINTS)
        if isinstance(grid, bool) or not isinstance(grid, int) or grid < 2:
            raise ConfigError("grid_points must be an integer >= 2")
        cfg = cls(inst, specs, axes["n"], seeds, seed, axes.get("H"), axes.get("W"), axes.get("K"),
                  out.get("csv"), out.get("plot_data"), bool(d.get("stat_floor", False)),
                  bool(d.get("record_wallclock", False)), grid)
        cfg._check_applicable()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d, path.parent)

    @property
    def kind(self) -> str:
        return self.instance["kind"]

    def _check_applicable(self) -> None:
        if "bundle" in self.instance and (self.H or self.W):
            raise ConfigError("H and W axes cannot override an instance loaded from a bundle file")
        if self.W and self.kind not in ("delta", "h"):
            raise ConfigError(f"a W axis does not apply to {self.kind} instances")
        if self.K and not any(s.name == "chunk_kr" for s in self.estimators):
            raise ConfigError("a K axis needs a chunk_kr estimator")
        allowed = {"finite": est.FINITE_CLASS_ESTIMATORS, "consistency": GAME_ESTIMATORS,
                   "linear": LINEAR_ESTIMATORS}.get(self._family, set())
        for s in self.estimators:
            if s.name not in allowed:
                raise ConfigError(f"estimator {s.name!r} does not apply to {self.kind} instances")
            if self.stat_floor and self._family == "linear" and s.name in ("gaalm", "chunk_kr"):
                raise ConfigError(f"stat_floor needs a finite class; {s.name!r} has none")
        if self.stat_floor and self._family == "consistency":
            raise ConfigError("stat_floor is not defined for the consistency game")

    @property
    def _family(self) -> str:
        if self.kind in ("delta", "h", "unbounded", "finite"):
            return "finite"
        return self.kind

    def points(self) -> list:
        """Sweep points ``((i_H, H), (i_W, W), (i_n, n), (i_K, K))`` in config order."""
        H = list(enumerate(self.H)) if self.H else [(0, None)]
        W = list(enumerate(self.W)) if self.W else [(0, None)]
        K = list(enumerate(self.K)) if self.K else [(0, None)]
        return list(itertools.product(H, W, list(enumerate(self.n)), K))


def _axis(values, name: str, integer: bool) -> list:
    if not isinstance(values, list) or not values:
        raise ConfigError(f"sweep axis {name!r} must be a nonempty list")
    for v in values:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
            raise ConfigError(f"sweep axis {name!r} holds an invalid value {v!r}")
        if v <= 0 and name != "seeds":
            raise ConfigError(f"sweep axis {name!r} must be positive")
    return list(values)


def _parse_instance(inst: dict, base_dir) -> dict:
    if not isinstance(inst, dict):
        raise ConfigError("instance must be an object")
    if "bundle" in inst:
        _reject_unknown(inst, {"bundle"}, "instance")
        path = Path(inst["bundle"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read bundle {path}: {exc}") from exc
        kind = d.get("kind")
        if kind not in ("finite", "consistency", "linear"):
            raise ConfigError(f"bundles of kind {kind!r} cannot be benchmarked")
        return {"kind": kind, "bundle": str(path), "data": d}
    kind = inst.get("kind")
    if kind not in INSTANCE_PARAMS:
        raise ConfigError(f"instance kind must be one of {sorted(INSTANCE_PARAMS)} or a bundle path")
    _reject_unknown(inst, INSTANCE_PARAMS[kind] | {"kind"}, "instance")
    return dict(inst)


def load_bundle(d: dict):
    """Instance object from a bundle dictionary written by ``gen``."""
    kind = d.get("kind")
    if kind == "finite":
        return InstanceBundle.from_dict(d)
    if kind == "consistency":
        return make_consistency_game(int(d["horizon"]))
    if kind == "linear":
        return LinearInstance.from_dict(d)
    if kind == "parity":
        return ParityInstance(int(d["n"]), tuple(d["S"]), float(d["eta"]), int(d["horizon"]), int(d["degree"]))
    raise ConfigError(f"unknown bundle kind {kind!r}")


def build_instance(inst: dict, H=None, W=None):
    """Instance for one sweep point; ``H`` and ``W`` override the instance parameters."""
    if "bundle" in inst:
        return load_bundle(inst["data"])
    p = {k: v for k, v in inst.items() if k != "kind"}
    if H is not None:
        p["H"] = H
    if W is not None:
        p["W"] = W
    kind = inst["kind"]
    try:
        if kind == "delta":
            return make_delta_instance(p["H"], p["W"], p["delta"])
        if kind == "h":
            return make_h_instance(p["H"], p["W"], p["eps"])
        if kind == "unbounded":
            return make_unbounded_instance(p["H"], p["eps"])
        if kind == "consistency":
            return make_consistency_game(p["H"])
        return make_misspecified_linear_instance(**p)
    except KeyError as exc:
        raise ConfigError(f"{kind} instance needs parameter {exc.args[0]!r}") from exc
    except TypeError as exc:
        raise ConfigError(f"bad {kind} instance parameters: {exc}") from exc


# ----------------------------------------------------------------------------
# one sweep point


@dataclass
class _Target:
    """Everything the scorer needs for one instance and one draw of the secret."""

    name: str
    H: int
    W: float | None
    sample: Any
    p_star: Any
    mdp: Any
    best: float
    cls: list | None
    expert: Policy


class _Cache:
    def __init__(self, grid_points: int):
        self.grid_points = grid_points
        self._items: dict = {}

    def get(self, key, make):
        if key not in self._items:
            self._items[key] = make()
        return self._items[key]


def _target(inst, cache: _Cache, key, rng: np.random.Generator) -> _Target:
    if isinstance(inst, ConsistencyGame):
        z = inst.sample_secret(rng)
        expert = inst.expert(z)
        p_star = exact_seq_distribution(inst.mdp, expert)
        best = cache.get((key, "best", z), lambda: game_best_in_class(inst, z)[1])
        return _Target(f"consistency(H={inst.horizon})", inst.horizon, None,
                       lambda n, r: sample_dataset(inst.mdp, expert, n, r), p_star, inst.mdp, best, None, expert)
    if isinstance(inst, InstanceBundle):
        p_star = cache.get((key, "pstar"), inst.expert_distribution)
        return _Target(inst.name, inst.mdp.horizon, float(inst.metadata["W"]), inst.sample, p_star, inst.mdp,
                       float(inst.metadata["best_in_class"]), list(inst.policy_class), inst.expert)
    if isinstance(inst, LinearInstance):
        p_star = cache.get((key, "pstar"), inst.expert_distribution)
        grid = cache.get((key, "grid"), lambda: list(inst.grid(cache.grid_points)))
        best = cache.get((key, "best"), lambda: best_in_class(inst.mdp, grid, p_star)[1])
        return _Target(inst.name, inst.mdp.horizon, None, inst.sample, p_star, inst.mdp, float(best), grid,
                       inst.expert)
    raise DomainError(f"cannot benchmark {type(inst).__name__}")


def _make(spec: EstimatorSpec, inst, target: _Target, K, rng: np.random.Generator, policy_class=None):
    params = dict(spec.params)
    name = spec.name
    if name in est.FINITE_CLASS_ESTIMATORS:
        params["policy_class"] = policy_class if policy_class is not None else target.cls
        if name == "boosted_log_loss":
            params.setdefault("random_state", int(rng.integers(2 ** 31)))
    elif name in ("gaalm", "chunk_kr"):
        params["feature_map"] = inst.feature_map
        if name == "gaalm":
            params["param_set"] = inst.param_set
        elif K is not None:
            params["K"] = K
    try:
        return est.make_estimator(name, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc


def _fit(spec: EstimatorSpec, inst, target: _Target, data, K, rng, policy_class=None) -> Policy:
    if isinstance(inst, ConsistencyGame):
        return game_log_loss_fit(inst, data)
    return _make(spec, inst, target, K, rng, policy_class).fit(data).policy_


def _fmt(x: float) -> str:
    return repr(float(x))


def run_point(cfg: ExperimentConfig, point, seed: int, cache: _Cache | None = None) -> list:
    """All estimator rows for one sweep point and one seed."""
    (iH, H), (iW, W), (i_n, n), (iK, K) = point
    cache = cache or _Cache(cfg.grid_points)
    ss = np.random.SeedSequence(cfg.seed, spawn_key=(iH, iW, i_n, iK, seed))
    data_ss, *est_ss = ss.spawn(1 + len(cfg.estimators))
    inst_key = (iH, iW)
    inst = cache.get((inst_key, "inst"), lambda: build_instance(cfg.instance, H, W))
    rng = np.random.default_rng(data_ss)
    target = _target(inst, cache, inst_key, rng)
    data = target.sample(n, rng)
    rows = []
    for spec, e_ss in zip(cfg.estimators, est_ss):
        label = spec.display(K)
        context = f"{label} at (H={target.H}, W={W}, n={n}, K={K}) seed {seed}"
        try:
            start = time.perf_counter()
            policy = _fit(spec, inst, target, data, K, np.random.default_rng(e_ss))
            elapsed = (time.perf_counter() - start) * 1e3
            p_hat = exact_seq_distribution(target.mdp, policy)
            hell = hellinger_squared(p_hat, target.p_star)
            tv = tv_distance(p_hat, target.p_star)
        except ArbcError as exc:
            raise type(exc)(f"{context}: {exc}") from exc
        rows.append({"estimator": label, "instance": target.name, "H": target.H, "W": target.W, "n": n,
                     "seed": seed, "hellinger_sq": hell, "tv": tv, "best_in_class": target.best,
                     "wallclock_ms": elapsed if cfg.record_wallclock else None,
                     "_spec": spec.name, "_point": point})
    return rows


def _floor_for(cfg: ExperimentConfig, point, cache: _Cache) -> dict:
    """Median Hell^2 of each estimator with the expert added to the class."""
    (iH, H), (iW, W), (i_n, n), (iK, K) = point
    out = {}
    inst = cache.get(((iH, iW), "inst"), lambda: build_instance(cfg.instance, H, W))
    for j, spec in enumerate(cfg.estimators):
        vals = []
        for seed in cfg.seeds:
            ss = np.random.SeedSequence(cfg.seed, spawn_key=(iH, iW, i_n, iK, seed, 1))
            data_ss, e_ss = ss.spawn(2)
            rng = np.random.default_rng(data_ss)
            target = _target(inst, cache, (iH, iW), rng)
            data = target.sample(n, rng)
            policy = _fit(spec, inst, target, data, K, np.random.default_rng(e_ss),
                          policy_class=target.cls + [target.expert])
            vals.append(hellinger_squared(exact_seq_distribution(target.mdp, policy), target.p_star))
        out[spec.display(K)] = float(np.median(vals))
    return out


_WORKER_CACHES: dict = {}


def _worker_cache(cfg: ExperimentConfig) -> _Cache:
    key = (json.dumps(cfg.instance, sort_keys=True), cfg.grid_points)
    if key not in _WORKER_CACHES:
        _WORKER_CACHES[key] = _Cache(cfg.grid_points)
    return _WORKER_CACHES[key]


def _run_task(args) -> list:
    cfg, point, seed = args
    return run_point(cfg, point, seed, _worker_cache(cfg))


def _run_floor(args) -> tuple:
    cfg, point = args
    return point, _floor_for(cfg, point, _worker_cache(cfg))


def _finish(rows: list, floors: dict) -> list:
    out = []
    for r in rows:
        floor = floors.get((r["_point"], r["estimator"]), 0.0)
        best = r["best_in_class"]
        ratio = (r["hellinger_sq"] - floor) / best if best > 0 else None
        row = {k: v for k, v in r.items() if not k.startswith("_")}
        row["approx_ratio"] = ratio
        row["stat_floor"] = floor
        out.append(row)
    return sort_rows(out)


def sort_rows(rows: list) -> list:
    """Canonical order ``(estimator, H, n, seed)``, then instance and ``W`` to break ties."""
    return sorted(rows, key=lambda r: (r["estimator"], r["H"], r["n"], r["seed"], r["instance"],
                                       -1.0 if r["W"] is None else r["W"]))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list:
    """Result rows for every (estimator, sweep point, seed); identical for any ``jobs``."""
    if not cfg.estimators:
        warnings.warn("no estimators configured; the result table is empty", stacklevel=2)
        return []
    if jobs < 1:
        raise ConfigError("jobs must be >= 1")
    tasks = [(cfg, point, seed) for point in cfg.points() for seed in cfg.seeds]
    floor_tasks = [(cfg, point) for point in cfg.points()] if cfg.stat_floor else []
    if jobs == 1:
        cache = _Cache(cfg.grid_points)
        rows = [r for (_, point, seed) in tasks for r in run_point(cfg, point, seed, cache)]
        floor_list = [(point, _floor_for(cfg, point, cache)) for (_, point) in floor_tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = [r for part in pool.map(_run_task, tasks) for r in part]
            floor_list = list(pool.map(_run_floor, floor_tasks))
    floors = {(point, label): v for point, d in floor_list for label, v in d.items()}
    return _finish(rows, floors)


# ----------------------------------------------------------------------------
# reports


def _cell(v) -> str:
    if v is None:
        return NA
    if isinstance(v, float):
        return _fmt(v) if math.isfinite(v) else NA
    return str(v)


def csv_text(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in sort_rows(rows):
        w.writerow([_cell(r[k]) for k in CSV_HEADER])
    return buf.getvalue()


def plot_rows(rows: list) -> list:
    """Per (estimator, H): median and mean approx_ratio over rows with a defined ratio."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["estimator"], r["H"]), []).append(r)
    out = []
    for (name, H), rs in sorted(groups.items()):
        ratios = [r["approx_ratio"] for r in rs if r["approx_ratio"] is not None]
        floors = [r.get("stat_floor", 0.0) for r in rs]
        out.append({"estimator": name, "H": H,
                    "median_approx_ratio": float(np.median(ratios)) if ratios else None,
                    "mean_approx_ratio": float(np.mean(ratios)) if ratios else None,
                    "stat_floor": float(np.median(floors)), "rows": len(rs)})
    return out


def plot_text(rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PLOT_HEADER)
    for r in plot_rows(rows):
        w.writerow([_cell(r[k]) for k in PLOT_HEADER])
    return buf.getvalue()


def emit_report(rows: list, csv_path: str | Path, plot_path: str | Path | None = None) -> None:
    """Write the result CSV and, when ``plot_path`` is given, the plot-data CSV."""
    if not rows:
        raise DomainError("emit_report needs at least one row")
    Path(csv_path).write_text(csv_text(rows))
    if plot_path is not None:
        Path(plot_path).write_text(plot_text(rows))


def default_plot_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.stem + ".plot.csv")
