"""Command-line front door: argument parsing, dispatch and artifact writing."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import logging
import sys
from collections.abc import Awaitable, Callable
from typing import TypeVar

import numpy as np

from mbrw import __version__, cone
from mbrw.branching import (
    MartingaleRequest,
    Pruning,
    simulate_martingales,
    summarize,
    verify_exchangeability,
)
from mbrw.cache import SpectralCache
from mbrw.config import Config
from mbrw.errors import ConditionError, ConfigError, MathError, MbrwError
from mbrw.experiments import EXPERIMENTS, ExperimentConfig, run_experiment
from mbrw.model import ModelSpec, check_conditions, load_model, model_hash
from mbrw.renewal import (
    INVOLUTION_TOL,
    VARIANTS,
    duality_involution,
    duality_sandwich,
    estimate_V,
    renewal_scan,
    reversed_bound_check,
)
from mbrw.reports import RunArtifacts, RunManifest, file_hash, read_json
from mbrw.runner import ReplicaPool
from mbrw.seeds import child_seed, replica_rng
from mbrw.spectral import (
    DEFAULT_GRID_3D,
    RESIDUAL_TOL,
    BoundaryData,
    DirectionGrid,
    SpectralData,
    big_M,
    boundary_data,
    calibrate_boundary,
    derivative_identity_gap,
    dominant_eigen,
    dominant_eigen_dual,
    eigen_residual,
)
from mbrw.spine import (
    HarmonicEvaluator,
    many_to_one_one_step,
    simulate_with_spine,
    spine_marginal_ks,
    supermartingale_check,
    verify_many_to_one,
    verify_spinal_measure,
)
from mbrw.stats import MIN_REPLICAS, estimate_of

logger = logging.getLogger(__name__)

T = TypeVar("T")

IDENTITY_TOL = 1e-8
ONE_STEP_TOL = 1e-9
KS_DEPTHS = (5, 20, 50)

Handler = Callable[[argparse.Namespace, Config, RunArtifacts], int]


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError (exit 1)."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


# ------------------------------------------------------------------
# Shared helpers
# ------------------------------------------------------------------


def _with_cache(config: Config, fn: Callable[[SpectralCache], Awaitable[T]]) -> T:
    async def _go() -> T:
        cache = SpectralCache(config.cache_path)
        await cache.initialise()
        try:
            return await fn(cache)
        finally:
            await cache.close()

    return asyncio.run(_go())


def _grid(spec: ModelSpec, config: Config, args: argparse.Namespace) -> DirectionGrid:
    if args.grid_size is None and spec.d == 3:
        return DirectionGrid.build(3, DEFAULT_GRID_3D)
    return DirectionGrid.build(spec.d, config.grid_size)


def _x0(args: argparse.Namespace, spec: ModelSpec) -> np.ndarray:
    if not getattr(args, "x0", None):
        return cone.uniform_direction(spec.d)
    try:
        coords = [float(v) for v in args.x0.split(",")]
    except ValueError:
        raise ConfigError(f"--x0 must be comma separated numbers, got: {args.x0!r}") from None
    if len(coords) != spec.d:
        raise ConfigError(f"--x0 needs {spec.d} coordinates, got {len(coords)}")
    return cone.as_direction(coords)


def _replicas(args: argparse.Namespace, default: int) -> int:
    replicas = default if args.replicas is None else args.replicas
    if replicas < 1:
        raise ConfigError(f"--replicas must be at least 1, got: {replicas}")
    return replicas


def _depth(args: argparse.Namespace, default: int) -> int:
    depth = default if args.depth is None else args.depth
    if depth < 1:
        raise ConfigError(f"--depth must be at least 1, got: {depth}")
    return depth


def _spectral(spec: ModelSpec, s: float, grid: DirectionGrid, config: Config) -> SpectralData:
    key = model_hash(spec)

    async def fetch(cache: SpectralCache) -> SpectralData:
        doc = await cache.get(key, "spectral", s, grid.size)
        if doc is not None:
            return SpectralData.from_dict(doc)
        data = dominant_eigen(spec, s, grid, config.eigen_tol, config.max_iter)
        await cache.put(key, "spectral", s, grid.size, data.to_dict())
        return data

    return _with_cache(config, fetch)


def _boundary(
    args: argparse.Namespace, spec: ModelSpec, grid: DirectionGrid, config: Config
) -> BoundaryData:
    if getattr(args, "boundary", None):
        data = BoundaryData.from_dict(read_json(args.boundary))
        if data.model_hash and data.model_hash != model_hash(spec):
            raise ConfigError(f"{args.boundary} was computed for a different model")
        return data
    alpha = getattr(args, "alpha", None)
    if alpha is None:
        raise ConfigError("this command needs --boundary FILE or --alpha VALUE")
    key = model_hash(spec)

    async def fetch(cache: SpectralCache) -> BoundaryData:
        doc = await cache.get(key, "boundary", alpha, grid.size)
        if doc is not None:
            return BoundaryData.from_dict(doc)
        data = boundary_data(spec, alpha, grid, config.eigen_tol)
        await cache.put(key, "boundary", alpha, grid.size, data.to_dict())
        return data

    return _with_cache(config, fetch)


# ------------------------------------------------------------------
# calibrate
# ------------------------------------------------------------------


def cmd_calibrate(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    calibrated, data = calibrate_boundary(spec, args.mode, args.alpha, grid, config.eigen_tol)
    out.write_json("calibrated_model.json", calibrated.to_dict())
    out.write_json("boundary.json", data.to_dict())
    out.write_json(
        "conditions.json",
        check_conditions(calibrated, m_alpha=(data.M_value, data.M_prime)).to_dict(),
    )

    async def store(cache: SpectralCache) -> None:
        await cache.put(data.model_hash, "boundary", data.alpha, grid.size, data.to_dict())

    _with_cache(config, store)
    print(
        f"alpha={data.alpha:.10g} lambda={calibrated.scale_lambda:.10g} "
        f"EN={calibrated.offspring_mean:.10g} sigma2={data.sigma2:.10g}"
    )
    return 0


# ------------------------------------------------------------------
# spectral
# ------------------------------------------------------------------


def cmd_spectral(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    primal = _spectral(spec, args.s, grid, config)
    value, slope = big_M(spec, args.s, grid, config.eigen_tol)
    doc: dict = {"s": args.s, "M": value, "M_prime": slope, "primal": primal.to_dict()}
    if args.dual:
        doc["dual"] = dominant_eigen_dual(spec, args.s, grid, config.eigen_tol, primal).to_dict()
    out.write_json("spectral.json", doc)
    return 0


# ------------------------------------------------------------------
# simulate
# ------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    depth = _depth(args, 20)
    replicas = _replicas(args, 1_000)
    spectral = tuple(_spectral(spec, s, grid, config) for s in args.s or ())
    boundary = None
    if args.boundary or args.alpha is not None:
        boundary = _boundary(args, spec, grid, config)
    pruning = None
    if args.prune_eps is not None:
        if boundary is None:
            raise ConfigError("--prune-eps needs boundary data")
        pruning = Pruning(alpha=boundary.alpha, eps=args.prune_eps)
    request = MartingaleRequest(spectral=spectral, boundary=boundary)
    with ReplicaPool(config.threads) as pool:
        series = pool.map(
            simulate_martingales,
            replicas,
            spec,
            _x0(args, spec),
            args.b0,
            depth,
            request,
            config.seed,
            config.particle_cap,
            pruning,
        )
    out.write_csv(
        "martingales.csv",
        ["replica", "n", "name", "value", "population"],
        (row for s in series for row in s.rows()),
    )
    out.write_csv(
        "population.csv",
        ["replica", "n", "population", "min_position"],
        (
            (s.replica, n, pop, s.min_position[n])
            for s in series
            for n, pop in enumerate(s.population)
        ),
    )
    out.write_json(
        "summary.json",
        {"depth": depth, "replicas": replicas, "martingales": summarize(series, config.seed)},
    )
    return 0


# ------------------------------------------------------------------
# spine
# ------------------------------------------------------------------


def spine_replica(
    replica: int,
    spec: ModelSpec,
    boundary: BoundaryData,
    x: np.ndarray,
    b: float,
    depth: int,
    seed: int,
    particle_cap: int,
) -> list[dict]:
    path, _ = simulate_with_spine(
        x,
        b,
        spec,
        HarmonicEvaluator.constant_one(boundary),
        depth,
        replica_rng(seed, replica),
        particle_cap,
        keep_tree=False,
    )
    return [{**st.to_dict(), "replica": replica} for st in path.steps]


def cmd_spine(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    boundary = _boundary(args, spec, grid, config)
    depth = _depth(args, 20)
    replicas = _replicas(args, 1_000)
    x0 = _x0(args, spec)
    with ReplicaPool(config.threads) as pool:
        paths = pool.map(
            spine_replica, replicas, spec, boundary, x0, args.b0, depth, config.seed,
            config.particle_cap,
        )
    out.write_jsonl("spine.jsonl", (rec for path in paths for rec in path))
    positions = np.array([[st["S"] for st in path] for path in paths])
    summary: dict = {
        "depth": depth,
        "replicas": replicas,
        "spine_S": [estimate_of(positions[:, k], config.seed).to_dict() for k in range(depth)],
    }
    if args.ks:
        depths = tuple(n for n in KS_DEPTHS if n <= depth) or (depth,)
        ks = spine_marginal_ks(
            spec, boundary, x0, args.b0, depths, replicas, child_seed(config.seed, "spine:ks")
        )
        summary["ks"] = {str(n): {"statistic": s, "pvalue": p} for n, (s, p) in ks.items()}
    out.write_json("spine_summary.json", summary)
    return 0


# ------------------------------------------------------------------
# renewal
# ------------------------------------------------------------------


def cmd_renewal(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    boundary = _boundary(args, spec, grid, config)
    replicas = _replicas(args, 2_000)
    windows = [(float(t), args.a) for t in range(args.t_min, args.t_max + 1)]
    scan = renewal_scan(
        spec,
        boundary,
        args.variant,
        windows,
        replicas,
        args.horizon,
        config.seed,
        y=args.y,
        x0=_x0(args, spec),
        tail_fraction=None,
    )
    out.write_csv(
        "renewal.csv",
        ["variant", "t", "a", "estimate", "se", "tail_bound"],
        (
            (e.variant, e.t, e.a, e.estimate.value, e.estimate.se, e.tail_bound)
            for e in scan
        ),
    )
    if args.estimate_v:
        table = estimate_V(
            spec,
            boundary,
            np.linspace(0.0, args.y_max, 21),
            replicas,
            child_seed(config.seed, "renewal:V"),
        )
        out.write_json("v_table.json", table.to_dict())

        async def store(cache: SpectralCache) -> None:
            await cache.put(table.model_hash, "v_table", boundary.alpha, grid.size,
                            table.to_dict())

        _with_cache(config, store)
    return 0


# ------------------------------------------------------------------
# verify
# ------------------------------------------------------------------


def _hard(name: str, fn: Callable[[], tuple[float, float]]) -> dict:
    try:
        value, bound = fn()
    except ConditionError as exc:
        return {"statistic": name, "status": "skipped", "pass": True, "detail": str(exc)}
    except MathError as exc:
        return {"statistic": name, "status": "fail", "pass": False, "detail": str(exc)}
    ok = value <= bound
    return {
        "statistic": name,
        "value": value,
        "bound": bound,
        "status": "pass" if ok else "fail",
        "pass": ok,
    }


def cmd_verify(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    boundary = _boundary(args, spec, grid, config)
    replicas = _replicas(args, 2_000)
    seed = config.seed
    x0 = _x0(args, spec)
    node = boundary.grid.nodes[boundary.grid.n_nodes // 2]

    def one_step() -> tuple[float, float]:
        lhs, rhs = many_to_one_one_step(spec, boundary.spectral, node, 0.0)
        return abs(lhs - rhs), ONE_STEP_TOL * max(1.0, abs(lhs))

    def identity() -> tuple[float, float]:
        # Calibration leaves |M(alpha)| + |M'(alpha)| of slack in the one-step identity.
        ell_max = float(np.max(np.abs(boundary.ell)))
        slack = abs(boundary.M_value) * (1.0 + ell_max) + abs(boundary.M_prime)
        slack += boundary.poisson_residual
        return float(np.max(derivative_identity_gap(spec, boundary))), IDENTITY_TOL + slack

    def reversed_bound() -> tuple[float, float]:
        report = reversed_bound_check(
            spec, 200, replicas, replica_rng(child_seed(seed, "verify:reversed"), 0)
        )
        return report.max_gap, report.bound

    hard = [
        _hard("eigen_residual", lambda: (eigen_residual(spec, boundary.spectral), RESIDUAL_TOL)),
        _hard("dual_eigen_residual", lambda: (eigen_residual(spec, boundary.dual), RESIDUAL_TOL)),
        _hard("derivative_identity", identity),
        _hard("many_to_one(n=1)", one_step),
        _hard("reversed_path_bound", reversed_bound),
        _hard("duality_involution", lambda: (duality_involution(spec, boundary), INVOLUTION_TOL)),
    ]

    statistical: list[dict] = []
    for n in (2, 3):
        comp = verify_many_to_one(
            spec, boundary.spectral, x0, 0.0, n, replicas, child_seed(seed, f"verify:m2o:{n}")
        )
        statistical.append(comp.to_dict())
    exch = verify_exchangeability(spec, x0, 2, replicas, child_seed(seed, "verify:exchange"))
    status = "inconclusive" if replicas < MIN_REPLICAS else (
        "pass" if exch.passed else "fail"
    )
    statistical.append({**exch.to_dict(), "status": status})
    evaluator = HarmonicEvaluator.constant_one(boundary)
    for comp in verify_spinal_measure(
        spec, boundary, x0, 0.0, evaluator, 3, replicas, child_seed(seed, "verify:spinal")
    ):
        statistical.append(comp.to_dict())
    sup = supermartingale_check(
        spec, x0, 0.0, evaluator, 3, replicas, child_seed(seed, "verify:super")
    )
    statistical.append({**sup.to_dict(), "status": "pass" if sup.passed else "fail"})
    sandwich = duality_sandwich(
        spec, boundary, [float(t) for t in range(0, 11)], 1.0, replicas, 500,
        child_seed(seed, "verify:sandwich"),
    )
    statistical.append(sandwich.to_dict())

    hard_ok = all(c["pass"] for c in hard)
    stat_fail = any(c["status"] == "fail" for c in statistical)
    inconclusive = any(c["status"] == "inconclusive" for c in statistical)
    ok = hard_ok and not stat_fail
    out.write_json(
        "verify.json",
        {"hard": hard, "statistical": statistical, "warning": inconclusive, "pass": ok},
    )
    if inconclusive:
        logger.warning("statistical checks inconclusive", extra={"replicas": replicas})
    return 0 if ok else MathError.exit_code


# ------------------------------------------------------------------
# experiment
# ------------------------------------------------------------------


def cmd_experiment(args: argparse.Namespace, config: Config, out: RunArtifacts) -> int:
    spec = load_model(args.model)
    grid = _grid(spec, config, args)
    boundary = _boundary(args, spec, grid, config)
    if args.config:
        exp = ExperimentConfig.load(args.config, args.name)
    else:
        exp = ExperimentConfig(name=args.name, seed=config.seed)
    overrides: dict = {}
    if args.replicas is not None:
        overrides["replicas"] = args.replicas
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.depths:
        overrides["depths"] = tuple(int(v) for v in args.depths.split(","))
    exp = dataclasses.replace(exp, **overrides)
    exp.validate(spec, config.particle_cap, boundary)
    with ReplicaPool(config.threads) as pool:
        report = run_experiment(exp, spec, boundary, pool, config.particle_cap)
    stem = f"experiment_{exp.name}"
    out.write_json(f"{stem}.json", report.to_dict())
    out.write_text(f"{stem}.txt", report.text())
    for tier, rows in sorted(report.tiers.items()):
        out.write_csv(
            f"{stem}_{tier}.csv",
            ["n", "statistic", "value", "se"],
            ((r["n"], r["statistic"], r["value"], r["se"]) for r in rows),
        )
    return 0 if report.verdict != "fail" else MathError.exit_code


# ------------------------------------------------------------------
# Parser and dispatch
# ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--depth", type=int)
    common.add_argument("--replicas", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="defaults to MBRW_THREADS")
    common.add_argument("--grid-size", type=int)
    common.add_argument("--out", default="out")

    boundary = _Parser(add_help=False)
    boundary.add_argument("--boundary", help="boundary data JSON written by calibrate")
    boundary.add_argument("--alpha", type=float)
    boundary.add_argument("--x0", help="start direction, comma separated")
    boundary.add_argument("--b0", type=float, default=0.0)

    parser = _Parser(prog="mbrw", description="Matrix branching random walk toolkit")
    parser.add_argument("--version", action="version", version=f"mbrw {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate a model to the boundary")
    p.add_argument("model")
    p.add_argument("--mode", choices=("solve_alpha", "fix_alpha"), default="solve_alpha")
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("spectral", parents=[common], help="eigen data of P_s at one s")
    p.add_argument("model")
    p.add_argument("--s", type=float, required=True)
    p.add_argument("--dual", action="store_true")
    p.set_defaults(func=cmd_spectral)

    p = sub.add_parser("simulate", parents=[common, boundary], help="simulate trees")
    p.add_argument("model")
    p.add_argument("--s", type=float, action="append", help="record W_n(s); repeatable")
    p.add_argument("--prune-eps", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("spine", parents=[common, boundary], help="spinal decomposition paths")
    p.add_argument("model")
    p.add_argument("--ks", action="store_true", help="compare spine marginals with the chain")
    p.set_defaults(func=cmd_spine)

    p = sub.add_parser("renewal", parents=[common, boundary], help="renewal measure scans")
    p.add_argument("model")
    p.add_argument("--variant", choices=VARIANTS, default="killed_primal")
    p.add_argument("--t-min", type=int, default=-20)
    p.add_argument("--t-max", type=int, default=40)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--y", type=float, default=0.0)
    p.add_argument("--horizon", type=int, default=2_000)
    p.add_argument("--estimate-v", action="store_true")
    p.add_argument("--y-max", type=float, default=20.0)
    p.set_defaults(func=cmd_renewal)

    p = sub.add_parser("verify", parents=[common, boundary], help="run the verifier battery")
    p.add_argument("model")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("experiment", parents=[common, boundary], help="run one experiment")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("model")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--depths", help="comma separated depths")
    p.set_defaults(func=cmd_experiment)
    return parser


_UNHASHED = frozenset({"threads", "out", "func"})


def _manifest(args: argparse.Namespace, config: Config) -> RunManifest:
    inputs = {}
    for key in ("model", "boundary", "config"):
        path = getattr(args, key, None)
        if path:
            inputs[key] = file_hash(path)
    arguments = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    return RunManifest(
        command=args.command,
        arguments=arguments,
        seed=config.seed,
        version=__version__,
        threads=config.threads,
        out_dir=args.out,
        inputs=inputs,
    )


def run(argv: list[str], config: Config) -> int:
    """Parse ``argv``, run the command and return its exit code."""
    artifacts: RunArtifacts | None = None
    try:
        args = build_parser().parse_args(argv)
        try:
            config = config.with_overrides(
                threads=args.threads, grid_size=args.grid_size, seed=args.seed
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        artifacts = RunArtifacts(_manifest(args, config))
        artifacts.begin()
        handler: Handler = args.func
        code = handler(args, config, artifacts)
        artifacts.finish("complete" if code == 0 else "failed")
        return code
    except MbrwError as exc:
        logger.error(
            "command failed",
            extra={"error": type(exc).__name__, "exit_code": exc.exit_code},
            exc_info=True,
        )
        print(f"mbrw: {exc}", file=sys.stderr)
        if artifacts is not None:
            try:
                artifacts.finish("failed", str(exc))
            except MbrwError:
                logger.warning("could not finalize manifest")
        return exc.exit_code
    except KeyboardInterrupt:
        if artifacts is not None:
            artifacts.finish("failed", "interrupted")
        raise
