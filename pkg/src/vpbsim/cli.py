"""Command-line front end.

Configuration files are flat sectioned ``key = value`` text::

    [basis]
    K = 6
    [kinetic]
    eps = 0.1
    [initial]
    theta0 = 1:1.0:0.0          # mode:cos:sin, comma-separated for several modes
    [sweep]
    eps_ladder = 0.4, 0.2, 0.1, 0.05

Unknown sections or keys are errors. Exit status is 0 on success, 1 on
validation errors (including cache problems and failed self-test items) and
2 on numerical aborts.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .collision import BGK, BOLTZMANN, KernelSpec, build_operator, cache_filename, cache_store, assemble_boltzmann, transport_coefficients
from .diagnostics import CSV_COLUMNS, EnergyConstants, energy_report, limit_deviation
from .errors import CacheError, NumericalAbort, ValidationError, VPBError
from .fluid_solver import FluidConfig, FluidSolver, initial_state, ohm_current
from .harness import FIELD_NAMES, SweepConfig, run_sweep, selftest
from .kinetic_solver import KineticConfig, KineticSolver, well_prepared_initial
from .spatial import TorusGrid
from .velocity_space import HermiteBasis, WeightSpec

CACHE_ENV = "VPB_CACHE_DIR"
TRAJECTORY_COLUMNS = ("t", "x_index", "x", "rho", "u1", "u2", "u3", "theta", "n", "j1", "j2", "j3", "omega", "phi")
ENERGY_COLUMNS = CSV_COLUMNS

# section -> key -> parser
_FLOAT, _INT, _STR, _BOOL = float, int, str, "bool"
SCHEMA = {
    "basis": {"K": _INT, "quad_order": _INT},
    "grid": {"n_points": _INT},
    "kernel": {"backend": _STR, "gamma": _FLOAT, "s": _FLOAT, "C_phi": _FLOAT, "theta_min": _FLOAT, "n_theta": _INT},
    "kinetic": {"eps": _FLOAT, "dt": _FLOAT, "t_end": _FLOAT, "scheme": _STR, "cfl_safety": _FLOAT, "n_records": _INT},
    "fluid": {"dt": _FLOAT, "t_end": _FLOAT, "n_records": _INT},
    "initial": {name: "modes" for name in FIELD_NAMES} | {"amplitude": _FLOAT, "noise": _FLOAT},
    "sweep": {"eps_ladder": "floats", "t_end": _FLOAT, "n_records": _INT, "fluid_dt": _FLOAT, "workers": _INT},
    "energy": {"N": _INT, "l": _FLOAT, "exp_weight": _BOOL, "inner": _FLOAT, "outer": _FLOAT, "velocity": _FLOAT},
    "output": {"dir": _STR, "cache_dir": _STR, "seed": _INT},
}


@dataclass(frozen=True)
class RunConfig:
    K: int = 6
    quad_order: int | None = None
    n_points: int = 64
    kernel: KernelSpec = field(default_factory=KernelSpec)
    backend: str = BGK
    eps: float = 0.1
    dt: float | None = None
    t_end: float = 0.5
    scheme: str = "imex-ars222"
    cfl_safety: float = 0.25
    n_records: int = 20
    fluid_dt: float = 2e-3
    sweep: SweepConfig = field(default_factory=SweepConfig)
    workers: int = 1
    energy_N: int = 1
    energy_l: float = 0.0
    exp_weight: bool = False
    constants: EnergyConstants = field(default_factory=EnergyConstants)
    out_dir: str = "vpb_out"
    cache_dir: str | None = None
    seed: int = 0

    def basis(self):
        return HermiteBasis(self.K, self.quad_order)

    def grid(self):
        return TorusGrid(self.n_points)

    def kinetic_config(self, basis, grid):
        interval = self.t_end / self.n_records
        if self.dt is None:
            proto = KineticConfig(self.eps, 1.0, self.t_end, self.scheme, self.backend, self.cfl_safety)
            sub = max(1, int(np.ceil(interval / proto.max_dt(basis, grid) - 1e-9)))
            dt = interval / sub
        else:
            dt = self.dt
            sub = max(1, int(round(interval / dt)))
        return KineticConfig(self.eps, dt, self.t_end, self.scheme, self.backend, self.cfl_safety, record_every=sub)

    def fluid_config(self):
        interval = self.t_end / self.n_records
        sub = max(1, int(np.ceil(interval / self.fluid_dt - 1e-9)))
        return FluidConfig(interval / sub, self.t_end, record_every=sub)

    def weight(self):
        return WeightSpec(self.energy_l, self.kernel.gamma, self.kernel.s)

    def echo(self):
        d = asdict(self)
        d["sweep"]["modes"] = {k: {str(m): list(v) for m, v in modes.items()} for k, modes in self.sweep.modes.items()}
        return d


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_modes(text):
    """``"1:1.0:0.0, 2:0.5:0"`` -> {1: (1.0, 0.0), 2: (0.5, 0.0)}."""
    out = {}
    for item in filter(None, (p.strip() for p in text.split(","))):
        parts = item.split(":")
        if len(parts) != 3:
            raise ValueError(f"mode entry {item!r} must be mode:cos:sin")
        m = int(parts[0])
        if m < 1:
            raise ValueError(f"mode number must be >= 1, got {m}")
        out[m] = (float(parts[1]), float(parts[2]))
    return out


def _convert(kind, text):
    if kind == "floats":
        return tuple(float(p) for p in text.split(",") if p.strip())
    if kind == "modes":
        return _parse_modes(text)
    if kind == _BOOL:
        return _parse_bool(text)
    return kind(text.strip())


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise ValidationError(f"{source}: line {exc.lineno}: expected a [section] header before {exc.line.strip()!r}") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ValidationError(f"{source}: line {lineno}: cannot parse {line.strip()!r}") from exc
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ValidationError(f"{source}: line {exc.lineno}: {exc.message if hasattr(exc, 'message') else exc}") from exc

    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValidationError(f"{source}: unknown section [{section}]; allowed {sorted(SCHEMA)}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ValidationError(f"{source}: unknown key {key!r} in [{section}]; allowed {sorted(SCHEMA[section])}")
            try:
                values[(section, key)] = _convert(SCHEMA[section][key], raw)
            except ValueError as exc:
                raise ValidationError(f"{source}: [{section}] {key}: {exc}") from exc
    return build_config(values)


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def build_config(values: dict) -> RunConfig:
    """Assemble and cross-validate a :class:`RunConfig` from ``{(section, key): value}``."""
    get = lambda sec, key, default: values.get((sec, key), default)
    base = RunConfig()
    kernel = KernelSpec(
        gamma=get("kernel", "gamma", base.kernel.gamma),
        s=get("kernel", "s", base.kernel.s),
        C_phi=get("kernel", "C_phi", base.kernel.C_phi),
        theta_min=get("kernel", "theta_min", base.kernel.theta_min),
        quad_orders=(get("kernel", "n_theta", base.kernel.quad_orders[0]), base.kernel.quad_orders[1]),
    )
    backend = get("kernel", "backend", base.backend)
    if backend not in (BGK, BOLTZMANN):
        raise ValidationError(f"[kernel] backend must be {BGK!r} or {BOLTZMANN!r}, got {backend!r}")
    defaults = SweepConfig()
    modes = {k: dict(v) for k, v in defaults.modes.items()}
    for name in FIELD_NAMES:
        if ("initial", name) in values:
            modes[name] = values[("initial", name)]
    n_field = modes.get("n0", {})
    if any(m == 0 for m in n_field):
        raise ValidationError("[initial] n0 must have zero mean (mode 0 not allowed)")
    K = get("basis", "K", base.K)
    n_points = get("grid", "n_points", base.n_points)
    sweep = SweepConfig(
        eps_ladder=get("sweep", "eps_ladder", defaults.eps_ladder),
        modes=modes,
        amplitude=get("initial", "amplitude", defaults.amplitude),
        t_end=get("sweep", "t_end", defaults.t_end),
        backend=backend,
        K=K,
        n_points=n_points,
        n_records=get("sweep", "n_records", defaults.n_records),
        cfl_safety=get("kinetic", "cfl_safety", defaults.cfl_safety),
        scheme=get("kinetic", "scheme", defaults.scheme),
        fluid_dt=get("sweep", "fluid_dt", defaults.fluid_dt),
        kernel=kernel,
        energy_N=get("energy", "N", defaults.energy_N),
        energy_l=get("energy", "l", defaults.energy_l),
        seed=get("output", "seed", defaults.seed),
        noise=get("initial", "noise", defaults.noise),
    )
    cfg = RunConfig(
        K=K,
        quad_order=get("basis", "quad_order", None),
        n_points=n_points,
        kernel=kernel,
        backend=backend,
        eps=get("kinetic", "eps", base.eps),
        dt=get("kinetic", "dt", None),
        t_end=get("kinetic", "t_end", base.t_end),
        scheme=get("kinetic", "scheme", base.scheme),
        cfl_safety=get("kinetic", "cfl_safety", base.cfl_safety),
        n_records=get("kinetic", "n_records", base.n_records),
        fluid_dt=get("fluid", "dt", base.fluid_dt),
        sweep=sweep,
        workers=get("sweep", "workers", base.workers),
        energy_N=get("energy", "N", base.energy_N),
        energy_l=get("energy", "l", base.energy_l),
        exp_weight=get("energy", "exp_weight", base.exp_weight),
        constants=EnergyConstants(
            get("energy", "inner", base.constants.inner),
            get("energy", "outer", base.constants.outer),
            get("energy", "velocity", base.constants.velocity),
        ),
        out_dir=get("output", "dir", base.out_dir),
        cache_dir=get("output", "cache_dir", None),
        seed=get("output", "seed", base.seed),
    )
    if ("fluid", "t_end") in values and values[("fluid", "t_end")] != cfg.t_end:
        cfg = replace(cfg, t_end=values[("fluid", "t_end")])
    if ("fluid", "n_records") in values:
        cfg = replace(cfg, n_records=values[("fluid", "n_records")])
    validate(cfg)
    return cfg


def validate(cfg: RunConfig):
    """Cross-field checks with messages naming the offending fields."""
    basis, grid = cfg.basis(), cfg.grid()
    if cfg.n_records < 1:
        raise ValidationError(f"[kinetic] n_records must be >= 1, got {cfg.n_records}")
    if cfg.workers < 1:
        raise ValidationError(f"[sweep] workers must be >= 1, got {cfg.workers}")
    if cfg.fluid_dt <= 0:
        raise ValidationError(f"[fluid] dt must be positive, got {cfg.fluid_dt}")
    kc = cfg.kinetic_config(basis, grid)
    try:
        kc.check_cfl(basis, grid)
    except ValidationError as exc:
        raise ValidationError(f"[kinetic] dt: {exc}") from exc
    if cfg.energy_N > cfg.K or cfg.energy_N + 1 > cfg.n_points // 3:
        raise ValidationError(f"[energy] N={cfg.energy_N} exceeds the derivative budget for K={cfg.K}, n_points={cfg.n_points}")
    return cfg


# ---------------------------------------------------------------------------
# outputs


def _fmt(x):
    return repr(float(x)) if np.isfinite(x) else ("nan" if np.isnan(x) else ("inf" if x > 0 else "-inf"))


def _fmt17(x):
    x = float(x)
    return f"{x:.17g}" if np.isfinite(x) else _fmt(x)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, np.integer)) else _fmt17(v) for v in r])


def trajectory_rows(grid, records):
    """``records`` yields (t, rho, u, theta, n, j, omega, phi)."""
    for t, rho, u, theta, n, j, omega, phi in records:
        for i in range(grid.n_points):
            yield (t, i, grid.x[i], rho[i], u[0, i], u[1, i], u[2, i], theta[i], n[i], j[0, i], j[1, i], j[2, i], omega[i], phi[i])


def kinetic_records(macro):
    for m in macro:
        yield (m.t, m.rho, m.u, m.theta, m.n, m.j, m.omega, m.phi)


def fluid_records(grid, fluid, coeffs):
    from .spatial import poisson_solve

    for s in fluid:
        j, omega = ohm_current(grid, s, coeffs)
        phi, _ = poisson_solve(grid, s.n)
        yield (s.t, s.rho, s.u, s.theta, s.n, j, omega, phi)


def energy_rows(report):
    for r in report.rows:
        yield tuple(getattr(r, c) for c in ENERGY_COLUMNS)


def sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, files, wall, extra=None):
    manifest = {
        "command": command,
        "config": cfg.echo(),
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "checksums": {Path(p).name: sha256(p) for p in files},
        "wall_time_s": wall,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _cache_dir(args, cfg):
    return args.cache_dir or os.environ.get(CACHE_ENV) or cfg.cache_dir


def _operator(args, cfg, basis):
    return build_operator(cfg.backend, basis, cfg.kernel, _cache_dir(args, cfg), allow_assemble=not args.no_assemble)


def _initial_fields(cfg, grid):
    return cfg.sweep.initial_fields(grid)


# ---------------------------------------------------------------------------
# subcommands


def cmd_precompute(args, cfg):
    basis = cfg.basis()
    cache_dir = _cache_dir(args, cfg)
    if cfg.backend != BOLTZMANN:
        raise ValidationError("precompute only applies to the boltzmann backend")
    if cache_dir is None:
        raise ValidationError(f"no cache directory: pass --cache-dir, set {CACHE_ENV} or [output] cache_dir")
    path = Path(cache_dir) / cache_filename(cfg.backend, basis, cfg.kernel)
    start = time.perf_counter()
    op = assemble_boltzmann(basis, cfg.kernel)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    cache_store(op, path)
    tc = transport_coefficients(op)
    print(f"wrote {path} in {time.perf_counter() - start:.1f} s  nu={tc.nu:.10g} kappa={tc.kappa:.10g} sigma={tc.sigma:.10g}")
    return 0


def cmd_run_kinetic(args, cfg):
    start = time.perf_counter()
    basis, grid = cfg.basis(), cfg.grid()
    op = _operator(args, cfg, basis)
    kc = cfg.kinetic_config(basis, grid)
    f0 = well_prepared_initial(basis, grid, *_initial_fields(cfg, grid))
    traj = KineticSolver(basis, grid, op, kc).run(f0)
    tc = transport_coefficients(op)
    report = energy_report(traj, cfg.weight(), cfg.energy_N, tc.sigma, cfg.exp_weight, cfg.constants)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "trajectory.csv", out / "energy.csv"]
    macro = [replace_phi(m, s) for m, s in zip(traj.macro_series(), traj.snapshots)]
    write_csv(files[0], TRAJECTORY_COLUMNS, trajectory_rows(grid, kinetic_records(macro)))
    write_csv(files[1], ENERGY_COLUMNS, energy_rows(report))
    write_manifest(out, cfg, "run-kinetic", files, time.perf_counter() - start,
                   {"provenance": op.provenance.hex(), "dt": kc.dt, "stats": traj.stats})
    print(f"run-kinetic: {kc.n_steps} steps, outputs in {out}")
    return 0


def replace_phi(m, snapshot):
    return replace(m, phi=snapshot.phi, grad_phi=snapshot.grad_phi)


def cmd_run_fluid(args, cfg):
    start = time.perf_counter()
    basis, grid = cfg.basis(), cfg.grid()
    op = _operator(args, cfg, basis)
    tc = transport_coefficients(op)
    fluid = FluidSolver(grid, tc, cfg.fluid_config()).run(initial_state(grid, *_initial_fields(cfg, grid)))
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "fluid.csv"]
    write_csv(files[0], TRAJECTORY_COLUMNS, trajectory_rows(grid, fluid_records(grid, fluid, tc)))
    write_manifest(out, cfg, "run-fluid", files, time.perf_counter() - start,
                   {"provenance": op.provenance.hex(), "coefficients": {"nu": tc.nu, "kappa": tc.kappa, "sigma": tc.sigma}})
    print(f"run-fluid: {len(fluid) - 1} records, outputs in {out}")
    return 0


def cmd_limit_sweep(args, cfg):
    start = time.perf_counter()
    basis, grid = cfg.basis(), cfg.grid()
    op = _operator(args, cfg, basis)
    result = run_sweep(cfg.sweep, operator=op, workers=cfg.workers, constants=cfg.constants)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for run in result.runs:
        tag = f"eps_{run.eps:g}"
        traj_path, energy_path = out / f"{tag}_trajectory.csv", out / f"{tag}_energy.csv"
        write_csv(traj_path, TRAJECTORY_COLUMNS, trajectory_rows(grid, kinetic_records(run.macro)))
        write_csv(energy_path, ENERGY_COLUMNS, [tuple(getattr(r, c) for c in ENERGY_COLUMNS) for r in run.energy_rows])
        files += [traj_path, energy_path]
    conv = out / "convergence.json"
    conv.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True, default=float) + "\n")
    files.append(conv)
    write_manifest(out, cfg, "limit-sweep", files, time.perf_counter() - start, {"provenance": op.provenance.hex()})
    slope = "undefined" if result.slope is None else f"{result.slope:.4f}"
    print(f"limit-sweep: slope {slope}; outputs in {out}")
    return 0


def cmd_selftest(args, cfg):
    items = selftest(K=args.K, corrupt_cache=args.corrupt_cache, seed=cfg.seed)
    width = max(len(i.name) for i in items)
    for i in items:
        status = "PASS" if i.passed else "FAIL"
        detail = f"  {i.detail}" if i.detail else ""
        print(f"{status}  {i.name:<{width}}  {i.value:.6g}{detail}")
    failed = sum(not i.passed for i in items)
    print(f"{len(items) - failed}/{len(items)} passed")
    return 0 if failed == 0 else 1


COMMANDS = {
    "precompute": cmd_precompute,
    "run-kinetic": cmd_run_kinetic,
    "run-fluid": cmd_run_fluid,
    "limit-sweep": cmd_limit_sweep,
    "selftest": cmd_selftest,
}


def build_parser():
    p = argparse.ArgumentParser(prog="vpbsim", description="Two-species kinetic solver and diffusive-limit harness")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="sectioned key = value config file")
        sp.add_argument("-o", "--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--cache-dir", help=f"collision cache directory (overrides ${CACHE_ENV})")
        sp.add_argument("--no-assemble", action="store_true", help="fail instead of assembling a missing operator")
        if name == "selftest":
            sp.add_argument("--K", type=int, default=4)
            sp.add_argument("--corrupt-cache", action="store_true", help="inject a truncated cache file")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config) if args.config else validate(RunConfig())
        return COMMANDS[args.command](args, cfg)
    except (ValidationError, CacheError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2
    except VPBError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
