"""Command-line front end.

Exit codes: 0 success, 1 usage or input error, 2 propagation divergence,
3 convergence budget exhausted, 4 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data
from .heom import (
    CapacityError,
    ConvergenceError,
    DivergenceError,
    PropagationConfig,
    SystemBathModel,
    converge,
    propagate_from_site,
)
from .measures import (
    DEFAULT_PAIRS,
    InvalidStateError,
    UndefinedMeasureError,
    density_snapshot,
    trajectory_measures,
)
from .model import (
    BathSpec,
    DegenerateParametersError,
    average_energy_gap,
    efficiency_parameter,
    load_hamiltonian,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_BUDGET, EXIT_VALIDATION = 0, 1, 2, 3, 4
WORKERS_ENV = "FMOHEOM_WORKERS"
SWEEP_TIMES_PS = (0.1, 0.5, 1.0, 2.0)

log = logging.getLogger("fmoheom")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: str = "fmo8"
    lam: float = 40.0
    gamma: float = 100.0
    temperature: float = 310.0
    n_matsubara: int = 0
    depth: int = 3
    dt: float = 1.0
    t_max: float = 2000.0
    stride: float = 1.0
    site: int = 1
    output_dir: str = "runs"
    workers: int = 1
    tol: float = 0.01
    max_depth: int = 10
    max_matsubara: int = 6

    @classmethod
    def from_text(cls, text: str, source="<config>") -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or key not in kinds:
                raise UsageError(f"{source}:{lineno}: expected 'key = value' with key in "
                                 f"{', '.join(kinds)}")
            values[key] = _coerce(kinds[key], value.strip(), f"{source}:{lineno}")
        return cls(**values)

    @staticmethod
    def keys_in(text: str) -> list[str]:
        keys = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if "=" in line:
                keys.append(line.partition("=")[0].strip())
        return keys

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    def bath(self) -> BathSpec:
        return BathSpec(self.lam, self.gamma, self.temperature, self.n_matsubara)

    def propagation(self) -> PropagationConfig:
        return PropagationConfig(dt=self.dt, t_max=self.t_max, output_stride=self.stride,
                                 depth=self.depth)


def _coerce(kind, value, where):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise UsageError(f"{where}: cannot parse {value!r} as {kind}") from None
    return value


_FLAG_TO_FIELD = {"model": "model", "lam": "lam", "gamma": "gamma", "temp": "temperature",
                  "matsubara": "n_matsubara", "depth": "depth", "dt": "dt", "t_max": "t_max",
                  "stride": "stride", "site": "site", "out": "output_dir", "workers": "workers",
                  "tol": "tol", "max_depth": "max_depth", "max_matsubara": "max_matsubara"}


def resolve_config(args) -> RunConfig:
    # precedence: built-in defaults < environment < config file < flags
    cfg = RunConfig()
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            cfg.workers = int(env)
        except ValueError:
            raise UsageError(f"{WORKERS_ENV}={env!r} is not an integer") from None
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        from_file = RunConfig.from_text(path.read_text(), str(path))
        for name in RunConfig.keys_in(path.read_text()):
            setattr(cfg, name, getattr(from_file, name))
    for flag, name in _FLAG_TO_FIELD.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg


def _model_for(cfg: RunConfig):
    try:
        h = load_hamiltonian(cfg.model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if not 1 <= cfg.site <= h.n_sites:
        raise UsageError(f"initial site {cfg.site} outside 1..{h.n_sites} for model {cfg.model}")
    try:
        bath = cfg.bath()
        prop = cfg.propagation()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return SystemBathModel(h, bath), prop


def _parse_pairs(items, n_sites=None):
    if not items:
        return list(DEFAULT_PAIRS)
    pairs = []
    for item in items:
        try:
            a, b = (int(x) for x in item.replace("-", ",").split(","))
        except ValueError:
            raise UsageError(f"bad site pair {item!r}; expected e.g. 3,4") from None
        if a == b or (n_sites is not None and not (1 <= a <= n_sites and 1 <= b <= n_sites)):
            raise UsageError(f"invalid site pair {item!r}")
        pairs.append((a, b))
    return pairs


def _run_id(cfg: RunConfig) -> str:
    return data.run_id(cfg.lam, cfg.gamma, cfg.temperature)


def summarize(model: SystemBathModel, traj, series=None) -> list[str]:
    bath = model.bath
    g = average_energy_gap(model.hamiltonian)
    eff = efficiency_parameter(bath, g)
    pops = traj.populations()[-1]
    lines = [
        f"run: lambda={bath.lam:g} cm^-1 gamma={bath.gamma:g} cm^-1 T={bath.temperature:g} K "
        f"K={bath.n_matsubara} L={traj.metadata.get('depth')}",
        "final populations: " + " ".join(f"{p:.4f}" for p in pops),
    ]
    if series is not None:
        lines += [f"max E: {series.global_entanglement.max():.6f} nats",
                  f"final L_rho: {series.coherence_length[-1]:.6f}"]
    lines.append(f"Lambda: {eff.value:.4f}  ln(gamma/lambda): {eff.ln_gamma_over_lambda:.4f}  "
                 f"ln(gamma*beta): {eff.ln_gamma_beta:.4f}")
    if bath.lam == 0:
        lines.append("note: lambda = 0, unitary limit (bath decoupled)")
    return lines


def _write_run(outdir: Path, cfg: RunConfig, traj, pairs):
    # the trajectory is kept even when the measures reject one of its states
    outdir.mkdir(parents=True, exist_ok=True)
    data.write_trajectory(traj, outdir / "trajectory.dat")
    (outdir / "config.txt").write_text(cfg.to_text())
    series = trajectory_measures(traj, pairs)
    data.write_measures(series, outdir / "measures.csv")
    return series


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    model, prop = _model_for(cfg)
    pairs = _parse_pairs(args.pairs, model.n_sites)
    traj = propagate_from_site(cfg.site, model, prop)
    outdir = Path(cfg.output_dir) / _run_id(cfg)
    try:
        series = _write_run(outdir, cfg, traj, pairs)
    except InvalidStateError as exc:
        for line in summarize(model, traj):
            print(line)
        print(f"error: measures rejected the trajectory: {exc}; the state left the physical set "
              "beyond the clamp window, so reduce dt or raise L", file=sys.stderr)
        print(f"wrote {outdir}/trajectory.dat only")
        return EXIT_USAGE
    for line in summarize(model, traj, series):
        print(line)
    problems = traj.invariant_violations()
    for p in problems:
        print(f"warning: {p}")
    print(f"wrote {outdir}/trajectory.dat and {outdir}/measures.csv")
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = resolve_config(args)
    model, prop = _model_for(cfg)
    try:
        result = converge(model, prop, initial_site=cfg.site, tol_pop=cfg.tol,
                          max_depth=cfg.max_depth, max_matsubara=cfg.max_matsubara)
    except ConvergenceError as exc:
        _print_ladder(exc.ladder, cfg)
        print(f"not converged: budget exhausted, last delta {exc.last_delta:.6g}")
        return EXIT_BUDGET
    _print_ladder(result.ladder, cfg)
    print(f"converged: L={result.depth} K={result.n_matsubara} (tol {cfg.tol:g})")
    cfg.depth, cfg.n_matsubara = result.depth, result.n_matsubara
    outdir = Path(cfg.output_dir) / _run_id(cfg)
    _write_run(outdir, cfg, result.trajectory, _parse_pairs(getattr(args, "pairs", None), model.n_sites))
    print(f"wrote {outdir}")
    return EXIT_OK


def _print_ladder(ladder, cfg):
    print("L\tK\tmax_population_delta")
    for step in ladder:
        print(f"{step.depth}\t{step.n_matsubara}\t{step.delta:.6g}")


def _sweep_one(job):
    cfg, pairs, use_converge = job
    model, prop = _model_for(cfg)
    outdir = Path(cfg.output_dir)
    if use_converge:
        result = converge(model, prop, initial_site=cfg.site, tol_pop=cfg.tol,
                          max_depth=cfg.max_depth, max_matsubara=cfg.max_matsubara)
        traj = result.trajectory
        cfg.depth, cfg.n_matsubara = result.depth, result.n_matsubara
    else:
        traj = propagate_from_site(cfg.site, model, prop)
    series = _write_run(outdir, cfg, traj, pairs)
    g = average_energy_gap(model.hamiltonian)
    eff = efficiency_parameter(model.bath, g)
    row = {"lambda": cfg.lam, "gamma": cfg.gamma, "T": cfg.temperature,
           "ln_gamma_over_lambda": eff.ln_gamma_over_lambda, "ln_gamma_beta": eff.ln_gamma_beta,
           "ln_Lambda": eff.ln_value}
    for t_ps in SWEEP_TIMES_PS:
        t = 1000.0 * t_ps
        ok = series.times[-1] >= t - 1e-9
        i = series.index_at(t)
        row[f"E_{t_ps:g}ps"] = float(series.global_entanglement[i]) if ok else math.nan
    for t_ps in SWEEP_TIMES_PS:
        t = 1000.0 * t_ps
        ok = series.times[-1] >= t - 1e-9
        i = series.index_at(t)
        row[f"L_rho_{t_ps:g}ps"] = float(series.coherence_length[i]) if ok else math.nan
    return row


def _guarded(job):
    try:
        return "ok", _sweep_one(job)
    except Exception as exc:  # isolate per-run failures
        return "failed", f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    try:
        manifest = data.read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read manifest: {exc}") from None
    pairs = _parse_pairs(args.pairs)
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(args.manifest, root / "manifest.txt")
    (root / "config.txt").write_text(cfg.to_text())
    _model_for(cfg)  # fail fast on a bad model or site

    jobs = []
    for run in manifest.runs:
        c = RunConfig(**asdict(cfg))
        c.lam, c.gamma, c.temperature = run.lam, run.gamma, run.temperature
        c.site = manifest.initial_site
        c.output_dir = str(root / "runs" / run.run_id)
        jobs.append((c, pairs, args.converge))

    workers = max(1, cfg.workers)
    if workers == 1:
        outcomes = [_guarded(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_guarded, jobs))

    rows, failures = [], []
    for run, (status, payload) in zip(manifest.runs, outcomes):
        if status == "ok":
            rows.append((run.run_id, payload))
        else:
            failures.append((run.run_id, payload))
    write_aggregate(rows, root / "aggregate.csv")
    if failures:
        (root / "failures.txt").write_text("".join(f"{rid}\t{msg}\n" for rid, msg in failures))
    print(f"sweep: {len(rows)} of {len(manifest.runs)} runs succeeded; aggregate in {root / 'aggregate.csv'}")
    for rid, msg in failures:
        print(f"failed: {rid}: {msg}")
    return EXIT_OK


def write_aggregate(rows, path):
    cols = ["lambda", "gamma", "T", "ln_gamma_over_lambda", "ln_gamma_beta", "ln_Lambda"]
    cols += [f"E_{t:g}ps" for t in SWEEP_TIMES_PS] + [f"L_rho_{t:g}ps" for t in SWEEP_TIMES_PS]
    lines = ["run_id," + ",".join(cols)]
    for rid, row in rows:
        lines.append(rid + "," + ",".join(f"{row[c]:.17g}" for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_measure(args) -> int:
    try:
        if args.layout:
            traj = data.import_external(args.trajectory, args.layout)
        else:
            traj = data.read_trajectory(args.trajectory)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.model:
        try:
            data.verify_hamiltonian(traj, load_hamiltonian(args.model))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    pairs = _parse_pairs(args.pairs, traj.n_sites)
    series = trajectory_measures(traj, pairs)
    out = Path(args.out) if args.out else Path(args.trajectory).with_name("measures.csv")
    data.write_measures(series, out)
    print(f"wrote {out}")
    if args.snapshot is not None:
        snap = density_snapshot(traj, args.snapshot, args.threshold)
        print(snap.format_table())
    return EXIT_OK


def cmd_manifest(args) -> int:
    def grid(text, default):
        if text is None:
            return default
        return tuple(float(x) for x in text.split(","))

    subset = None
    if args.subset:
        subset = []
        for ln in Path(args.subset).read_text().splitlines():
            ln = ln.split("#", 1)[0].replace(",", " ").split()
            if ln:
                subset.append(tuple(float(x) for x in ln))
    try:
        manifest = data.sweep_manifest(grid(args.lambdas, data.PAPER_LAMBDA_GRID),
                                       grid(args.gammas, data.PAPER_GAMMA_GRID),
                                       grid(args.temps, data.PAPER_TEMPERATURE_GRID),
                                       subset=subset, initial_site=args.site)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data.write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} runs to {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .validation import run_checks

    try:
        results = run_checks(only=args.only, echo=print)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    failed = [r for r in results if not r.passed]
    if failed:
        print("validation FAILED: " + ", ".join(r.name for r in failed))
        return EXIT_VALIDATION
    print(f"validation passed ({len(results)} checks)")
    return EXIT_OK


def _add_run_flags(p):
    p.add_argument("--config", help="key = value configuration file (flags override it)")
    p.add_argument("--model", help="built-in model name (fmo8) or Hamiltonian file")
    p.add_argument("--lambda", dest="lam", type=float, help="reorganization energy, cm^-1")
    p.add_argument("--gamma", type=float, help="cut-off frequency, cm^-1")
    p.add_argument("--temp", type=float, help="temperature, K")
    p.add_argument("-K", "--matsubara", type=int, help="Matsubara terms")
    p.add_argument("-L", "--depth", type=int, help="hierarchy truncation level")
    p.add_argument("--dt", type=float, help="RK4 step, fs")
    p.add_argument("--t-max", dest="t_max", type=float, help="propagation time, fs")
    p.add_argument("--stride", type=float, help="output stride, fs")
    p.add_argument("--site", type=int, help="initially excited site (1-based)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, help=f"parallel runs (default ${WORKERS_ENV} or 1)")
    p.add_argument("--pairs", nargs="+", help="concurrence site pairs, e.g. 1,2 3,4")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2, which is reserved for divergence here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fmoheom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="propagate one parameter point")
    _add_run_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("converge", help="raise L and K until populations converge")
    _add_run_flags(p)
    p.add_argument("--tol", type=float, help="population tolerance (default 0.01)")
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--max-matsubara", dest="max_matsubara", type=int)
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("sweep", help="run every point of a manifest")
    p.add_argument("manifest")
    _add_run_flags(p)
    p.add_argument("--converge", action="store_true", help="run the convergence ladder per point")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--max-matsubara", dest="max_matsubara", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("measure", help="compute measures from a trajectory file")
    p.add_argument("trajectory")
    p.add_argument("--pairs", nargs="+")
    p.add_argument("--layout", help="JSON layout for an external trajectory table")
    p.add_argument("--model", help="check the trajectory's Hamiltonian checksum against this model")
    p.add_argument("--snapshot", type=float, metavar="T_FS", help="print |rho| at this time")
    p.add_argument("--threshold", type=float, default=0.005)
    p.add_argument("--out")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("manifest", help="write a sweep manifest")
    p.add_argument("out")
    p.add_argument("--lambdas", help="comma-separated lambda grid (default: 10..520 step 30)")
    p.add_argument("--gammas", help="comma-separated gamma grid (default: 25..500 step 25)")
    p.add_argument("--temps", help="comma-separated temperature grid (default: 30..510 step 20)")
    p.add_argument("--subset", help="file of 'lambda gamma T' triples to keep")
    p.add_argument("--site", type=int, default=1)
    p.set_defaults(func=cmd_manifest)

    p = sub.add_parser("validate", help="run the acceptance checks")
    p.add_argument("--only", nargs="+", help="check names to run")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidStateError, UndefinedMeasureError, DegenerateParametersError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
