"""Command-line front end.

Every subcommand writes its artifacts plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 1 unexpected error, 2 configuration/input error,
3 numerical breakdown, 4 certificate exhausted without convergence.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .boxqp import (
    BoxQpProblem,
    DenseHessian,
    KoopmanHessian,
    NumericalBreakdown,
    certified_iteration_bound,
    problem_from_dict,
    problem_to_dict,
    solve,
    time_factorization,
)
from .condensing import KoopmanBoxQp, NmpcSpec, build_general_qp, build_prediction_stack
from .kdv import ClosedLoopError, KdvConfig, closed_loop, generate_dataset, sinusoidal_reference
from .koopman import KoopmanModel, LiftSpec, SnapshotSet, fit_edmd, lift, one_step_rms, sample_rbf_centers

logger = logging.getLogger("koopman_boxqp")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_SCHEMA = 2
EXIT_BREAKDOWN = 3
EXIT_CERTIFICATE = 4


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config schemas
# (required fields, optional fields with defaults)

GEN_DATA_SCHEMA = (
    {"n_grid": 100, "dt": 0.01, "n_traj": 1000, "traj_len": 200},
    {"half_length": math.pi, "profile_centers": list(KdvConfig().profile_centers), "profile_width": 25.0,
     "seed": 0},
)
FIT_SCHEMA = (
    {"n_rbf": 200, "ridge": 1e-8},
    {"center_seed": 0, "center_bounds": [-1.0, 1.0], "holdout_fraction": 0.1},
)
NMPC_SCHEMA = (
    {"horizon": 10, "W_x": 1.0, "W_u": 0.05, "rho": 100.0},
    {"W_du": 0.0, "x_r": 0.0, "u_r": 0.0, "state": None},
)
SIMULATE_SCHEMA = (
    {**NMPC_SCHEMA[0], "duration": 50.0},
    {**{k: v for k, v in NMPC_SCHEMA[1].items() if k != "state"}, "epsilon": 1e-6, "dt": 0.01,
     "half_length": math.pi, "reference_amplitude": 0.5, "reference_omega": 2 * math.pi / 25,
     "y0": None, "backend": "auto"},
)


def _read_json(path) -> dict:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: JSON parse error: {exc.msg}") from exc


def load_config(path, schema) -> dict:
    """Validate a JSON config against ``(required, optional)``; no path means all defaults."""
    required, optional = schema
    if path is None:
        return {**required, **optional}
    cfg = _read_json(path)
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    for key in required:
        if key not in cfg:
            raise ConfigError(f"{path}: missing required config field {key!r}")
    unknown = set(cfg) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{path}: unknown config field(s) {sorted(unknown)}")
    return {**required, **optional, **cfg}


def _vec(value, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.shape != (n,):
        raise ConfigError(f"config field {name!r} must be a scalar or have length {n}")
    return a


def nmpc_spec_from_config(cfg: dict, n_x: int, n_u: int) -> NmpcSpec:
    try:
        return NmpcSpec(
            int(cfg["horizon"]),
            _vec(cfg["W_x"], n_x, "W_x"),
            _vec(cfg["W_u"], n_u, "W_u"),
            _vec(cfg["W_du"], n_u, "W_du"),
            _vec(cfg["x_r"], n_x, "x_r"),
            _vec(cfg["u_r"], n_u, "u_r"),
            float(cfg["rho"]),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


# ------------------------------------------------------------------ manifest


def git_blob_hash(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict, inputs, outputs, timings: dict) -> Path:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): git_blob_hash(p) for p in inputs},
        "outputs": {str(p): git_blob_hash(p) for p in outputs},
        "tool_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "timings": timings,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=_json_default))
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, GEN_DATA_SCHEMA)
    if args.seed is not None:
        cfg["seed"] = args.seed
    kcfg = KdvConfig(int(cfg["n_grid"]), float(cfg["dt"]), float(cfg["half_length"]),
                     tuple(cfg["profile_centers"]), float(cfg["profile_width"]))
    out = _out_dir(args)
    t0 = time.perf_counter()
    data, info = generate_dataset(kcfg, int(cfg["n_traj"]), int(cfg["traj_len"]), int(cfg["seed"]))
    t_gen = time.perf_counter() - t0
    path = out / "snapshots.csv"
    data.to_csv(path)
    info_path = out / "dataset_info.json"
    info_path.write_text(json.dumps({"rows": len(data), "n_traj": info.n_traj, "traj_len": info.traj_len,
                                     "discarded": info.discarded, "kdv": kcfg.to_dict()}, indent=2))
    write_manifest(out, "gen-data", cfg, {"seed": int(cfg["seed"])}, [], [path, info_path],
                   {"generate": t_gen, "total": time.perf_counter() - t0})
    print(f"wrote {len(data)} snapshot rows to {path} ({info.discarded} trajectories resampled)")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.config, FIT_SCHEMA)
    if args.seed is not None:
        cfg["center_seed"] = args.seed
    out = _out_dir(args)
    t0 = time.perf_counter()
    data = SnapshotSet.from_csv(args.data)
    train, hold = data.split_holdout(float(cfg["holdout_fraction"]))
    n_rbf = int(cfg["n_rbf"])
    centers = (sample_rbf_centers(n_rbf, data.n_x, cfg["center_bounds"], int(cfg["center_seed"]))
               if n_rbf > 0 else np.zeros((0, data.n_x)))
    spec = LiftSpec(centers, data.n_x)
    model = fit_edmd(train, spec, float(cfg["ridge"]), seed=int(cfg["center_seed"]))
    t_fit = time.perf_counter() - t0
    model_path = out / "model.json"
    model.save(model_path)
    report = {
        "n_x": model.n_x, "n_u": model.n_u, "n_psi": model.n_psi,
        "rows_train": len(train), "rows_holdout": len(hold),
        "train_rms": one_step_rms(model, train),
        "holdout_rms": one_step_rms(model, hold) if len(hold) else None,
        "holdout_rms_trivial": one_step_rms(model, hold, trivial=True) if len(hold) else None,
        "spectral_radius": float(np.abs(np.linalg.eigvals(model.A)).max()),
    }
    if model.n_psi <= 10:
        report["A"] = model.A.tolist()
        report["B"] = model.B.tolist()
    report_path = out / "fit_report.json"
    report_path.write_text(json.dumps(report, indent=2))
    write_manifest(out, "fit", cfg, {"center_seed": int(cfg["center_seed"])}, [args.data],
                   [model_path, report_path], {"fit": t_fit})
    print(f"model n_psi={model.n_psi}: train RMS {report['train_rms']:.3e}, holdout RMS {report['holdout_rms']}")
    return EXIT_OK


def _nmpc_overrides(cfg: dict, args) -> dict:
    if getattr(args, "rho", None) is not None:
        cfg["rho"] = args.rho
    if getattr(args, "horizon", None) is not None:
        cfg["horizon"] = args.horizon
    return cfg


def cmd_condense(args) -> int:
    cfg = _nmpc_overrides(load_config(args.config, NMPC_SCHEMA), args)
    model = KoopmanModel.load(args.model)
    spec = nmpc_spec_from_config(cfg, model.n_x, model.n_u)
    out = _out_dir(args)
    t0 = time.perf_counter()
    x0 = np.zeros(model.n_x) if cfg["state"] is None else _vec(cfg["state"], model.n_x, "state")
    psi0 = lift(x0, model.lift)
    stack = build_prediction_stack(model, spec.N)
    qp = KoopmanBoxQp(spec, stack)
    problem = qp.problem(psi0)
    general = build_general_qp(spec, stack, psi0)
    epsilon = args.epsilon if args.epsilon is not None else 1e-6
    problem_path = out / "problem.json"
    problem_path.write_text(json.dumps(problem_to_dict(problem, epsilon)))
    sidecar_path = out / "sidecar.json"
    sidecar_path.write_text(json.dumps({
        "E": stack.E.tolist(), "F": stack.F.tolist(), "spec": spec.to_dict(), "psi0": psi0.tolist(),
        "general_qp": {"n_dec": general.n_dec, "n_constraints": general.n_constraints},
        "boxqp": {"n": problem.n, "n_constraints": 2 * problem.n},
    }))
    write_manifest(out, "condense", cfg, {}, [args.model], [problem_path, sidecar_path],
                   {"condense": time.perf_counter() - t0})
    print(f"BoxQP with {problem.n} variables and {2 * problem.n} box constraints -> {problem_path}")
    return EXIT_OK


def cmd_solve(args) -> int:
    try:
        problem, file_eps = problem_from_dict(_read_json(args.problem))
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{args.problem}: {exc}") from exc
    epsilon = args.epsilon if args.epsilon is not None else file_eps
    out = _out_dir(args)
    rep = solve(problem, epsilon, backend=args.backend)
    report_path = out / "report.json"
    report_path.write_text(json.dumps(rep.to_dict()))
    write_manifest(out, "solve", {"epsilon": epsilon, "backend": args.backend}, {}, [args.problem],
                   [report_path], {"solve": rep.wall_time})
    print(f"{rep.iterations} iterations (certificate {rep.certified_bound}), gap {rep.final_gap:.3e}")
    return EXIT_OK if rep.converged else EXIT_CERTIFICATE


def cmd_simulate(args) -> int:
    cfg = _nmpc_overrides(load_config(args.config, SIMULATE_SCHEMA), args)
    if args.duration is not None:
        cfg["duration"] = args.duration
    if args.epsilon is not None:
        cfg["epsilon"] = args.epsilon
    model = KoopmanModel.load(args.model)
    kcfg = KdvConfig(model.n_x, float(cfg["dt"]), float(cfg["half_length"]))
    if model.n_u != kcfg.n_u:
        raise ConfigError(f"model has {model.n_u} inputs; the plant has {kcfg.n_u}")
    spec = nmpc_spec_from_config(cfg, model.n_x, model.n_u)
    amp, omega = float(cfg["reference_amplitude"]), float(cfg["reference_omega"])
    y0 = None if cfg["y0"] is None else _vec(cfg["y0"], model.n_x, "y0")
    out = _out_dir(args)
    t0 = time.perf_counter()
    log = closed_loop(kcfg, model, spec, lambda t: sinusoidal_reference(t, kcfg.n_grid, amp, omega),
                      float(cfg["duration"]), y0, float(cfg["epsilon"]), backend=cfg["backend"])
    t_sim = time.perf_counter() - t0
    paths = log.write_csv(out)
    summary = log.summary()
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2))
    write_manifest(out, "simulate", cfg, {}, [args.model], [*paths.values(), summary_path], {"simulate": t_sim})
    print(json.dumps(summary, indent=2))
    return EXIT_OK if summary["all_converged"] else EXIT_CERTIFICATE


def _parse_sizes(text: str):
    sizes = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        parts = item.split(":")
        if len(parts) == 3:
            sizes.append(tuple(int(p) for p in parts))
        elif len(parts) == 1:
            sizes.append(int(parts[0]))
        else:
            raise ConfigError(f"bad size {item!r}; use N:n_u:n_x or a plain dimension n")
    return sizes


def random_structured_problem(rng, N: int, n_u: int, n_x: int, rho: float = 100.0) -> BoxQpProblem:
    """Random instance with the relaxed-MPC Hessian layout (block lower-triangular F)."""
    F = np.zeros((N * n_x, N * n_u))
    for i in range(N):
        for j in range(i + 1):
            F[i * n_x:(i + 1) * n_x, j * n_u:(j + 1) * n_u] = rng.standard_normal((n_x, n_u)) / math.sqrt(n_x)
    Q = np.diag(rng.uniform(0.01, 1.0, N * n_u))
    q = rng.uniform(0.1, 2.0, N * n_x)
    h = rng.standard_normal(N * (n_u + n_x)) * rho * 0.1
    return BoxQpProblem(KoopmanHessian(F, Q, q, rho), h)


def random_dense_problem(rng, n: int) -> BoxQpProblem:
    A = rng.standard_normal((n, n))
    return BoxQpProblem(DenseHessian(A @ A.T / n + 0.1 * np.eye(n)), rng.standard_normal(n) * 2)


def cmd_bench(args) -> int:
    sizes = _parse_sizes(args.sizes)
    epsilon = args.epsilon if args.epsilon is not None else 1e-6
    seed = 0 if args.seed is None else args.seed
    out = _out_dir(args)
    rows = []
    t0 = time.perf_counter()
    for s_idx, size in enumerate(sizes):
        iters, ratios, t_struct, t_dense, f_struct, f_dense = [], [], [], [], [], []
        for inst in range(args.instances):
            rng = np.random.default_rng(np.random.SeedSequence([seed, s_idx, inst]))
            if isinstance(size, tuple):
                p = random_structured_problem(rng, *size)
                rep = solve(p, epsilon, backend="structured")
                t_struct.append(rep.wall_time)
                f_struct.append(time_factorization(p, "structured"))
                f_dense.append(time_factorization(p, "dense"))
                if not args.skip_dense_solve:
                    t_dense.append(solve(p, epsilon, backend="dense").wall_time)
            else:
                p = random_dense_problem(rng, size)
                rep = solve(p, epsilon)
            iters.append(rep.iterations)
            ratios.extend(rep.per_iteration_contraction)
        n = sum(size[1:]) * size[0] if isinstance(size, tuple) else size
        rows.append({
            "n": n,
            "shape": ":".join(map(str, size)) if isinstance(size, tuple) else "",
            "certified_bound": certified_iteration_bound(n, epsilon),
            "max_iterations": max(iters),
            "mean_iterations": float(np.mean(iters)),
            "mean_contraction": float(np.mean(ratios)) if ratios else float("nan"),
            "solve_time_ratio": (float(np.mean(t_struct) / np.mean(t_dense)) if t_dense else float("nan")),
            "factor_time_ratio": (float(np.mean(f_struct) / np.mean(f_dense)) if f_dense else float("nan")),
        })
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    write_manifest(out, "bench", {"sizes": args.sizes, "instances": args.instances, "epsilon": epsilon},
                   {"seed": seed}, [], [path], {"bench": time.perf_counter() - t0})
    for r in rows:
        print(f"n={r['n']:>6} bound={r['certified_bound']:>5} iterations max={r['max_iterations']} "
              f"mean={r['mean_iterations']:.1f} contraction={r['mean_contraction']:.3f} "
              f"factor struct/dense={r['factor_time_ratio']:.3g}")
    bad = [r for r in rows if r["max_iterations"] > r["certified_bound"]]
    return EXIT_CERTIFICATE if bad else EXIT_OK


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopman-boxqp", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", help="JSON config file (all required fields must be present)")
        if seed:
            p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="simulate random-input KdV trajectories")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit", help="identify a Koopman model by EDMD")
    common(p)
    p.add_argument("--data", required=True, help="snapshot CSV from gen-data")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("condense", help="build the relaxed BoxQP for one feedback state")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--rho", type=float)
    p.add_argument("--horizon", type=int)
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_condense)

    p = sub.add_parser("solve", help="solve a BoxQP problem file")
    common(p, config=False, seed=False)
    p.add_argument("--problem", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--backend", choices=["auto", "dense", "structured"], default="auto")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="closed-loop MPC on the KdV plant")
    common(p, seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--duration", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--horizon", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="iteration and timing benchmark over problem sizes")
    common(p, config=False)
    p.add_argument("--sizes", default="10:4:100", help="comma list of N:n_u:n_x shapes or plain n")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--skip-dense-solve", action="store_true", help="only time factorizations on the dense path")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (NumericalBreakdown, ClosedLoopError) as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    except Exception as exc:  # noqa: BLE001
        logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
