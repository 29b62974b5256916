"""Command-line entry point: ``arbc gen|fit|eval|bench|demo-lpn``.

Exit codes: 0 success, 1 other library error, 2 configuration error,
3 numeric cap exceeded.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import bench
from .core import Dataset, exact_seq_distribution, hellinger_squared, sample_dataset, tv_distance
from .errors import ArbcError, ConfigError, EnumerationTooLargeError, NumericCapError
from .estimators import FINITE_CLASS_ESTIMATORS, make_estimator
from .instances import (
    ConsistencyGame, InstanceBundle, LinearInstance, game_best_in_class, game_log_loss_fit, make_consistency_game,
    make_delta_instance, make_h_instance, make_misspecified_linear_instance, make_unbounded_instance,
)
from .parity import DemoConfig, ParityInstance, lpn_reduction_demo
from .policies import best_in_class, policy_from_dict

log = logging.getLogger("arbc")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_CAP = 0, 1, 2, 3


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def _need(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"{args.instance} instance needs {', '.join(missing)}")


def cmd_gen(args) -> int:
    kind = args.instance
    if kind == "delta":
        _need(args, "H", "W", "delta")
        inst = make_delta_instance(args.H, args.W, args.delta)
    elif kind == "h":
        _need(args, "H", "W", "eps")
        inst = make_h_instance(args.H, args.W, args.eps)
    elif kind == "unbounded":
        _need(args, "H", "eps")
        inst = make_unbounded_instance(args.H, args.eps)
    elif kind == "consistency":
        _need(args, "H")
        inst = make_consistency_game(args.H)
    elif kind == "linear":
        inst = make_misspecified_linear_instance(args.H or 4)
    else:
        _need(args, "H", "n_bits", "secret", "eta")
        S = tuple(int(s) for s in args.secret.split(",") if s.strip())
        inst = ParityInstance(args.n_bits, S, args.eta, args.H, args.degree)
    _write(json.dumps(inst.to_dict(), sort_keys=True) + "\n", args.out)
    if args.samples:
        if args.data is None:
            raise ConfigError("--samples needs --data for the trajectory file")
        rng = np.random.default_rng(args.seed)
        if isinstance(inst, ConsistencyGame):
            z = inst.sample_secret(rng)
            data = sample_dataset(inst.mdp, inst.expert(z), args.samples, rng)
            log.info("consistency game secret z=%d", z)
        else:
            data = inst.sample(args.samples, rng)
        data.write(args.data)
    return EXIT_OK


def _load_bundle(path: str):
    return bench.load_bundle(_read_json(path))


ALIASES = {"boosted": "boosted_log_loss", "log-loss": "log_loss", "logloss": "log_loss"}


def estimator_name(text: str) -> str:
    """Canonical estimator name; accepts hyphenated spellings and short aliases."""
    name = ALIASES.get(text, text).replace("-", "_")
    return ALIASES.get(name, name)


def fit_policy(inst, name: str, params: dict, data: Dataset, grid_points: int = bench.DEFAULT_GRID_POINTS):
    """Fit estimator ``name`` on ``data`` against the class carried by ``inst``.

    Returns ``(policy, extra)`` where ``extra`` holds estimator-specific fields.
    """
    if isinstance(inst, ConsistencyGame):
        if name != "log_loss":
            raise ConfigError("only log_loss is available on the consistency game")
        return game_log_loss_fit(inst, data), {}
    if isinstance(inst, InstanceBundle):
        cls = inst.policy_class
        if name == "layered_rho":
            return make_estimator(name, layer_classes=[cls] * data.horizon, **params).fit(data).policy_, {}
        if name not in FINITE_CLASS_ESTIMATORS:
            raise ConfigError(f"estimator {name!r} needs a feature map; this bundle has a finite class")
    elif isinstance(inst, LinearInstance):
        if name == "gaalm":
            model = make_estimator(name, feature_map=inst.feature_map, param_set=inst.param_set, **params)
            return model.fit(data).policy_, {"theta": model.coef_.tolist()}
        if name == "chunk_kr":
            return make_estimator(name, feature_map=inst.feature_map, **params).fit(data).policy_, {}
        if name not in FINITE_CLASS_ESTIMATORS:
            raise ConfigError(f"estimator {name!r} does not apply to linear instances")
        cls = list(inst.grid(grid_points))
    else:
        raise ConfigError("parity bundles have no policy class to fit")
    model = make_estimator(name, policy_class=cls, **params).fit(data)
    return model.policy_, {"selected_index": model.selected_index_}


def _fit_params(args) -> dict:
    try:
        params = json.loads(args.params) if args.params else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--params is not valid JSON ({exc})") from exc
    if not isinstance(params, dict):
        raise ConfigError("--params must be a JSON object")
    flags = {"delta": args.delta, "K": args.chunk, "eps": args.epsilon, "L": args.norm_bound}
    params.update({k: v for k, v in flags.items() if v is not None})
    if args.seed is not None and estimator_name(args.estimator) == "boosted_log_loss":
        params.setdefault("random_state", args.seed)
    return params


def cmd_fit(args) -> int:
    inst = _load_bundle(args.bundle)
    data = Dataset.read(args.data)
    name = estimator_name(args.estimator)
    start = time.perf_counter()
    try:
        policy, extra = fit_policy(inst, name, _fit_params(args), data)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {name}: {exc}") from exc
    elapsed = (time.perf_counter() - start) * 1e3
    _write(json.dumps({"estimator": name, "policy": policy.to_dict(), **extra}, sort_keys=True) + "\n", args.out)
    with np.errstate(divide="ignore"):
        loss = -float(policy.log_likelihoods(data).sum(axis=1).mean())
    line = f"estimator,n,H,loss,wallclock_ms\n{name},{len(data)},{data.horizon},{loss!r},{elapsed:.3f}\n"
    if args.summary:
        Path(args.summary).write_text(line)
    else:
        sys.stderr.write(line)
    return EXIT_OK


def evaluate(inst, policy, z: int | None = None, grid_points: int = bench.DEFAULT_GRID_POINTS) -> dict:
    """Exact Hell^2, TV, best-in-class value and their ratio for a fitted policy."""
    if isinstance(inst, ConsistencyGame):
        if z is None:
            raise ConfigError("evaluating on the consistency game needs --secret")
        mdp, expert = inst.mdp, inst.expert(z)
        best = game_best_in_class(inst, z)[1]
    elif isinstance(inst, InstanceBundle):
        mdp, expert = inst.mdp, inst.expert
        best = float(inst.metadata["best_in_class"])
    elif isinstance(inst, LinearInstance):
        mdp, expert = inst.mdp, inst.expert
        best = best_in_class(mdp, list(inst.grid(grid_points)), inst.expert_distribution())[1]
    else:
        raise ConfigError("parity bundles cannot be evaluated exactly")
    p_hat = exact_seq_distribution(mdp, policy)
    p_star = exact_seq_distribution(mdp, expert)
    hell = hellinger_squared(p_hat, p_star)
    return {"hellinger_sq": hell, "tv": tv_distance(p_hat, p_star), "best_in_class": best,
            "approx_ratio": hell / best if best > 0 else bench.NA}


def cmd_eval(args) -> int:
    inst = _load_bundle(args.bundle)
    fitted = _read_json(args.policy)
    policy = policy_from_dict(fitted.get("policy", fitted))
    z = int(args.secret) if args.secret is not None else None
    _write(json.dumps(evaluate(inst, policy, z), sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.config is None:
        raise ConfigError("bench needs --config")
    cfg = bench.ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rows = bench.run_experiment(cfg, jobs=args.jobs)
    for w in caught:
        log.warning("%s", w.message)
    out = args.out or cfg.csv_path
    if not rows:
        if out is not None:
            Path(out).write_text(",".join(bench.CSV_HEADER) + "\n")
        return EXIT_OK
    if out is None:
        sys.stdout.write(bench.csv_text(rows))
        return EXIT_OK
    plot = args.plot_data or cfg.plot_path or bench.default_plot_path(out)
    bench.emit_report(rows, out, plot)
    return EXIT_OK


def cmd_demo(args) -> int:
    try:
        cfg = DemoConfig(**_read_json(args.config)) if args.config else DemoConfig()
    except TypeError as exc:
        raise ConfigError(f"bad demo config: {exc}") from exc
    seed = 0 if args.seed is None else args.seed
    report = lpn_reduction_demo(cfg, np.random.default_rng(seed))
    _write(json.dumps(report, sort_keys=True, indent=2) + "\n", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arbc", description="Agnostic behavior cloning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen", help="write an instance bundle and optionally sampled trajectories")
    g.add_argument("--instance", required=True, choices=["delta", "h", "unbounded", "consistency", "parity", "linear"])
    g.add_argument("--H", type=int)
    g.add_argument("--W", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--eps", type=float)
    g.add_argument("--n-bits", dest="n_bits", type=int)
    g.add_argument("--secret", help="comma-separated parity indices")
    g.add_argument("--eta", type=float)
    g.add_argument("--degree", type=int, default=1)
    g.add_argument("--samples", type=int, default=0, help="number of expert trajectories to draw")
    g.add_argument("--data", help="trajectory output file (JSON lines)")
    common(g, config=False)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit an estimator to trajectories")
    f.add_argument("--bundle", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--estimator", required=True)
    f.add_argument("--params", help="JSON object of estimator parameters")
    f.add_argument("--delta", type=float, help="boosting confidence")
    f.add_argument("--chunk", type=int, help="chunk size K for chunk-kr")
    f.add_argument("--epsilon", type=float, help="target accuracy for chunk-kr")
    f.add_argument("--norm-bound", dest="norm_bound", type=float, help="bound L for chunk-kr")
    f.add_argument("--summary", help="path for the one-line CSV summary (default: stderr)")
    common(f, config=False)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="exact metrics of a fitted policy")
    e.add_argument("--bundle", required=True)
    e.add_argument("--policy", required=True)
    e.add_argument("--secret", help="game secret code (consistency bundles)")
    common(e, config=False)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run a sweep from a JSON config")
    b.add_argument("--plot-data", dest="plot_data")
    common(b)
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("demo-lpn", help="toy noisy-parity distinguisher demo")
    common(d)
    d.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (NumericCapError, EnumerationTooLargeError) as exc:
        log.error("cap exceeded: %s", exc)
        return EXIT_CAP
    except (ArbcError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
