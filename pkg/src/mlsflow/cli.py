"""Command-line driver: parse a case configuration, run it, write outputs.

Usage:
    mlsflow run <case> [--grid N|NxNxN] [--re R] [--dt T] [--relax F]
                [--out DIR] [--transient] [--compare-reference]

<case> is a built-in benchmark id (cavity2d-re1000, cavity2d-re10000,
cavity3d-re1000, channel) or the path of a config file with `key = value`
lines mirroring the RunConfig fields. Flags override file values. Exit
codes: 0 converged (and reference passed), 2 not converged, 3 reference
comparison failed, 1 usage or config error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

import numpy as np

from . import bench
from .nodeset import ChannelGeom, GridSpec
from .projection import RelaxFactors, SolverParams


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run configuration (file keys and flag names coincide)."""

    case: str
    out: str | None = None
    grid: tuple[int, ...] | None = None
    reynolds: float | None = None
    dt: float | None = None
    relax: float | None = None
    conv_tol: float | None = None
    max_outer: int | None = None
    neighbors: int | None = None
    sigma_factor: float | None = None
    transient: bool = False
    n_steps: int = 200
    compare_reference: bool = False
    write_fields: bool = True
    write_profiles: bool = True
    write_streamfunction: bool = True
    write_log: bool = True
    # channel geometry overrides
    height: float | None = None
    obstacle_height: float | None = None
    obstacle_length: float | None = None
    obstacle_offset: float | None = None
    length: float | None = None

    def validate(self):
        if self.relax is not None and not 0.0 < self.relax <= 1.0:
            raise ConfigError(f"relax must lie in (0, 1], got {self.relax}")
        if self.sigma_factor is not None and self.sigma_factor <= 1.0:
            raise ConfigError(f"sigma_factor must exceed 1, got {self.sigma_factor}")
        if self.reynolds is not None and self.reynolds <= 0:
            raise ConfigError(f"reynolds must be positive, got {self.reynolds}")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if self.grid is not None and any(c < 3 for c in self.grid):
            raise ConfigError(f"grid counts must be >= 3, got {self.grid}")
        if self.case == "channel" and self.reynolds is None:
            raise ConfigError("missing required field: reynolds")
        if self.case not in bench.BUILTIN_CASE_IDS:
            raise ConfigError(f"unknown case {self.case!r}; "
                              f"expected one of {', '.join(bench.BUILTIN_CASE_IDS)}")


_BOOL_KEYS = {"transient", "compare_reference", "write_fields", "write_profiles",
              "write_streamfunction", "write_log"}
_INT_KEYS = {"max_outer", "neighbors", "n_steps"}
_FLOAT_KEYS = {"reynolds", "dt", "relax", "conv_tol", "sigma_factor", "height",
               "obstacle_height", "obstacle_length", "obstacle_offset", "length"}
_STR_KEYS = {"case", "out"}


def _parse_grid(text: str) -> tuple[int, ...]:
    parts = text.lower().split("x")
    try:
        counts = tuple(int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"cannot parse grid {text!r}") from None
    return counts * 2 if len(counts) == 1 else counts


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean {text!r}")


def parse_config_file(path) -> dict:
    """Read `key = value` lines; unknown keys are rejected."""
    known = {f.name for f in dc_fields(RunConfig)}
    values: dict = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            if key == "grid":
                values[key] = _parse_grid(val)
            elif key in _BOOL_KEYS:
                values[key] = _parse_bool(val)
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _FLOAT_KEYS:
                values[key] = float(val)
            else:
                values[key] = val
        except ConfigError:
            raise
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: invalid value for {key!r}: {val!r}") from None
    return values


def _build_argparser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlsflow",
                                     description="meshless incompressible flow solver")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a benchmark case or a case file")
    run.add_argument("case", help="built-in case id or path to a config file")
    run.add_argument("--grid", type=str, default=None, help="N or NxN[xN]")
    run.add_argument("--re", dest="reynolds", type=float, default=None)
    run.add_argument("--dt", type=float, default=None)
    run.add_argument("--relax", type=float, default=None)
    run.add_argument("--out", type=str, default=None)
    run.add_argument("--conv-tol", dest="conv_tol", type=float, default=None)
    run.add_argument("--max-outer", dest="max_outer", type=int, default=None)
    run.add_argument("--neighbors", type=int, default=None)
    run.add_argument("--sigma-factor", dest="sigma_factor", type=float, default=None)
    run.add_argument("--transient", action="store_true")
    run.add_argument("--n-steps", dest="n_steps", type=int, default=None)
    run.add_argument("--compare-reference", action="store_true")
    return parser


def parse_config(source) -> RunConfig:
    """Build a validated RunConfig from CLI args or a config-file path."""
    if isinstance(source, (str, Path)):
        values = parse_config_file(source)
        if "case" not in values:
            raise ConfigError(f"{source}: missing required field: case")
        config = RunConfig(**values)
        config.validate()
        return config

    args = _build_argparser().parse_args(list(source))
    values: dict = {}
    case = args.case
    if case not in bench.BUILTIN_CASE_IDS and Path(case).exists():
        values = parse_config_file(case)
        if "case" not in values:
            raise ConfigError(f"{case}: missing required field: case")
        case = values.pop("case")
    flag_values = {
        "grid": _parse_grid(args.grid) if args.grid else None,
        "reynolds": args.reynolds,
        "dt": args.dt,
        "relax": args.relax,
        "out": args.out,
        "conv_tol": args.conv_tol,
        "max_outer": args.max_outer,
        "neighbors": args.neighbors,
        "sigma_factor": args.sigma_factor,
        "n_steps": args.n_steps,
    }
    for key, val in flag_values.items():
        if val is not None:
            values[key] = val
    if args.transient:
        values["transient"] = True
    if args.compare_reference:
        values["compare_reference"] = True
    config = RunConfig(case=case, **values)
    config.validate()
    return config


def config_to_spec(config: RunConfig) -> bench.CaseSpec:
    """Resolve a RunConfig into a fully-specified CaseSpec."""
    spec = bench.builtin_case(config.case, re=config.reynolds)
    grid = GridSpec(config.grid, spec.grid.stretching) if config.grid else spec.grid
    base = spec.params
    params = SolverParams(
        re=config.reynolds if config.reynolds is not None else base.re,
        dt=config.dt if config.dt is not None else base.dt,
        relax=RelaxFactors.uniform(config.relax) if config.relax is not None else base.relax,
        conv_tol=config.conv_tol if config.conv_tol is not None else base.conv_tol,
        max_outer=config.max_outer if config.max_outer is not None else base.max_outer,
        mode="transient" if config.transient else "steady",
    )
    geom = spec.channel_geom
    if config.case == "channel":
        defaults = ChannelGeom()
        geom = ChannelGeom(
            height=config.height if config.height is not None else defaults.height,
            obstacle_height=(config.obstacle_height if config.obstacle_height is not None
                             else defaults.obstacle_height),
            obstacle_length=(config.obstacle_length if config.obstacle_length is not None
                             else defaults.obstacle_length),
            obstacle_offset=(config.obstacle_offset if config.obstacle_offset is not None
                             else defaults.obstacle_offset),
            length=config.length if config.length is not None else defaults.length,
        )
    return bench.CaseSpec(spec.geometry, grid, params, reference_id=spec.reference_id,
                          channel_geom=geom,
                          neighbors=config.neighbors,
                          sigma_factor=(config.sigma_factor if config.sigma_factor
                                        is not None else 1.05),
                          n_steps=config.n_steps)


def effective_config_text(config: RunConfig, spec: bench.CaseSpec) -> str:
    """Echo of the configuration after defaults, itself a valid config file."""
    params = spec.params
    lines = [
        "# effective configuration (re-parsing this file reproduces the run)",
        f"case = {config.case}",
        f"grid = {'x'.join(str(c) for c in spec.grid.counts)}",
        f"reynolds = {params.re!r}",
        f"dt = {params.dt!r}",
        f"relax = {params.relax.u!r}",
        f"conv_tol = {params.conv_tol!r}",
        f"max_outer = {params.max_outer}",
        f"neighbors = {spec.neighbors if spec.neighbors is not None else 0}",
        f"sigma_factor = {spec.sigma_factor!r}",
        f"transient = {str(config.transient).lower()}",
        f"n_steps = {config.n_steps}",
        f"compare_reference = {str(config.compare_reference).lower()}",
        f"write_fields = {str(config.write_fields).lower()}",
        f"write_profiles = {str(config.write_profiles).lower()}",
        f"write_streamfunction = {str(config.write_streamfunction).lower()}",
        f"write_log = {str(config.write_log).lower()}",
    ]
    if spec.geometry == "channel":
        geom = spec.channel_geom
        lines += [
            f"height = {geom.height!r}",
            f"obstacle_height = {geom.obstacle_height!r}",
            f"obstacle_length = {geom.obstacle_length!r}",
            f"obstacle_offset = {geom.obstacle_offset!r}",
            f"length = {geom.length!r}",
        ]
    return "\n".join(lines) + "\n"


# -- output writers --------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_vtk(path, ns, field, psi=None):
    """Legacy-VTK ASCII dump: points as vertex cells with point data."""
    n = ns.n
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\n")
        f.write("mlsflow field dump\n")
        f.write("ASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        for pos in ns.positions:
            x, y = pos[0], pos[1]
            z = pos[2] if ns.dim == 3 else 0.0
            f.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
        f.write(f"CELLS {n} {2 * n}\n")
        for i in range(n):
            f.write(f"1 {i}\n")
        f.write(f"CELL_TYPES {n}\n")
        f.write("1\n" * n)
        f.write(f"POINT_DATA {n}\n")
        f.write("VECTORS velocity double\n")
        w = field.w if field.w is not None else np.zeros(n)
        for i in range(n):
            f.write(f"{_fmt(field.u[i])} {_fmt(field.v[i])} {_fmt(w[i])}\n")
        f.write("SCALARS pressure double 1\n")
        f.write("LOOKUP_TABLE default\n")
        for i in range(n):
            f.write(f"{_fmt(field.p[i])}\n")
        if psi is not None:
            f.write("SCALARS psi double 1\n")
            f.write("LOOKUP_TABLE default\n")
            for i in range(n):
                f.write(f"{_fmt(psi[i])}\n")


def read_vtk_point_data(path) -> dict[str, np.ndarray]:
    """Parse back a file produced by write_vtk (points plus point data)."""
    lines = Path(path).read_text().splitlines()
    data: dict[str, np.ndarray] = {}
    i = 0
    n = 0
    while i < len(lines):
        tok = lines[i].split()
        if not tok:
            i += 1
            continue
        if tok[0] == "POINTS":
            n = int(tok[1])
            pts = [np.fromstring(lines[i + 1 + j], sep=" ") for j in range(n)]
            data["points"] = np.array(pts)
            i += 1 + n
        elif tok[0] == "VECTORS":
            rows = [np.fromstring(lines[i + 1 + j], sep=" ") for j in range(n)]
            data[tok[1]] = np.array(rows)
            i += 1 + n
        elif tok[0] == "SCALARS":
            rows = [float(lines[i + 2 + j]) for j in range(n)]
            data[tok[1]] = np.array(rows)
            i += 2 + n
        else:
            i += 1
    return data


def write_summary(path, result: bench.CaseResult):
    lines = [
        f"case = {result.spec.geometry}",
        f"converged = {str(result.converged).lower()}",
        f"iterations = {int(result.quantities['outer_iterations'])}",
    ]
    for key in sorted(result.quantities):
        if key in ("outer_iterations", "converged"):
            continue
        lines.append(f"{key} = {_fmt(result.quantities[key])}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_case_outputs(result: bench.CaseResult, out_dir, config: RunConfig | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ns = result.nodeset
    if config is None or config.write_fields:
        psi = result.psi if (config is None or config.write_streamfunction) else None
        write_vtk(out / "fields.vtk", ns, result.field, psi)
    if config is None or config.write_profiles:
        for name, samples in result.profiles.items():
            with open(out / f"profile_{name}.csv", "w") as f:
                f.write("coordinate,value\n")
                for s in samples:
                    f.write(f"{_fmt(s.coordinate)},{_fmt(s.value)}\n")
    if result.vortices:
        with open(out / "vortices.csv", "w") as f:
            f.write("x,y,psi,label\n")
            for rec in result.vortices:
                f.write(f"{_fmt(rec.location[0])},{_fmt(rec.location[1])},"
                        f"{_fmt(rec.psi)},{rec.label}\n")
    if (config is None or config.write_log) and result.log_lines:
        (out / "convergence.log").write_text("\n".join(result.log_lines) + "\n")
    write_summary(out / "summary.txt", result)


def main(argv=None) -> int:
    try:
        config = parse_config(argv if argv is not None else sys.argv[1:])
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse error
        return 1 if exc.code else 0

    try:
        spec = config_to_spec(config)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    out = Path(config.out) if config.out else Path("mlsflow-out")
    try:  # preflight before the (possibly long) solve
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: output directory not writable: {exc}", file=sys.stderr)
        return 1

    result = bench.run_case(spec)
    write_case_outputs(result, out, config)
    (out / "config.echo").write_text(effective_config_text(config, spec))

    code = 0
    if not result.converged:
        print(f"not converged after {int(result.quantities['outer_iterations'])} iterations",
              file=sys.stderr)
        code = 2
    if config.compare_reference and spec.reference_id:
        records = bench.load_reference_records(spec.reference_id)
        report = bench.compare_reference(result, records)
        (out / "reference_report.txt").write_text("\n".join(report.lines()) + "\n")
        for line in report.lines():
            print(line)
        if not report.overall_pass and code == 0:
            code = 3
    print(f"outputs written to {out}")
    return code


if __name__ == "__main__":
    raise SystemExit(main())
