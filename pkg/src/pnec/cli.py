"""Command-line front end.

Configuration comes from an optional JSON file, overridden by flags. The
file uses nested objects whose dotted paths match the keys in ``SCHEMA``,
e.g. ``{"trials": 200, "solver": {"S": 5}, "noise": {"levels": [1.0]}}``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .errors import ConfigError, PnecError
from .io import read_correspondences
from .optimizer.solver import SolverConfig, pnec_estimate
from .selftest import run_selftest
from .simulation import CAMERAS, ESTIMATORS, NOISE_TYPES, Cell, NoiseSpec, SceneConfig, run_experiment

log = logging.getLogger("pnec")

COMMANDS = ("run-synthetic", "sweep-noise", "sweep-anisotropy", "sweep-offset",
            "estimate-file", "selftest")
NOISE_LEVELS = (0.5, 1.0, 1.5)
ANISOTROPY_BETAS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
OFFSET_FRACTIONS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)
CSV_COLUMNS = ("camera", "translation", "noise_type", "level", "beta_lo", "beta_hi", "offset",
               "init_perturbation", "estimator", "trials", "failures", "mean_e_rot",
               "std_e_rot", "mean_e_t", "std_e_t", "median_energy")
TRUNCATED = "# TRUNCATED"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


def _int(key, v):
    if isinstance(v, str):
        try:
            return int(v)
        except ValueError:
            raise ConfigError(key, f"expected an integer, got {v!r}") from None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    return v


def _float(key, v):
    if isinstance(v, str):
        try:
            v = float(v)
        except ValueError:
            raise ConfigError(key, f"expected a number, got {v!r}") from None
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(key, f"expected a number, got {v!r}")
    if not math.isfinite(v):
        raise ConfigError(key, "must be finite")
    return float(v)


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"expected true or false, got {v!r}")
    return v


def _str(key, v):
    if not isinstance(v, str):
        raise ConfigError(key, f"expected a string, got {v!r}")
    return v


def _optional_float(key, v):
    return None if v is None else _float(key, v)


def _choice(options):
    def check(key, v):
        v = _str(key, v)
        if v not in options:
            raise ConfigError(key, f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return check


def _list_of(item, length=None):
    def check(key, v):
        if not isinstance(v, list) or not v or (length is not None and len(v) != length):
            size = f"{length} " if length else "a nonempty list of "
            raise ConfigError(key, f"expected {size}values, got {v!r}")
        return tuple(item(f"{key}[{i}]", x) for i, x in enumerate(v))
    return check


def _optional_choice(options):
    check = _choice(options)
    return lambda key, v: None if v is None else check(key, v)


# dotted key -> validator
SCHEMA = {
    "command": _choice(COMMANDS),
    "input": _str,
    "trials": _int,
    "seed": _int,
    "parallelism": _int,
    "output": _str,
    "format": _choice(("csv", "markdown")),
    "camera": _optional_choice(CAMERAS),
    "translation": _bool,
    "estimators": _list_of(_choice(ESTIMATORS)),
    "init_perturbation": _optional_float,
    "solver.S": _int,
    "solver.K": _int,
    "solver.scf_iters": _int,
    "solver.regularization": _float,
    "solver.lm_max_iters": _int,
    "solver.lm_tolerance": _float,
    "solver.lm_initial_damping": _float,
    "solver.kappa": _float,
    "solver.resample_lattice": _bool,
    "solver.reweight": _bool,
    "solver.joint_refinement": _bool,
    "scene.n_points": _int,
    "scene.depth_range": _list_of(_float, 2),
    "scene.pinhole_cone_deg": _optional_float,
    "scene.max_rotation": _float,
    "scene.max_translation": _float,
    "scene.focal_px": _float,
    "scene.image_size": _list_of(_int, 2),
    "noise.type": _choice(NOISE_TYPES),
    "noise.level": _float,
    "noise.levels": _list_of(_float),
    "noise.betas": _list_of(_float),
    "noise.offsets": _list_of(_float),
    "noise.s_range": _list_of(_float, 2),
    "noise.beta_range": _list_of(_float, 2),
    "noise.alpha_range": _list_of(_float, 2),
}

_SOLVER_FIELDS = {
    "S": "outer_iterations", "K": "lattice_points", "scf_iters": "scf_iterations",
    "regularization": "regularization", "lm_max_iters": "lm_max_iters",
    "lm_tolerance": "lm_tolerance", "lm_initial_damping": "lm_initial_damping",
    "kappa": "kappa", "resample_lattice": "resample_lattice", "reweight": "reweight",
    "joint_refinement": "joint_refinement",
}

# flag dest -> dotted key
_FLAGS = {
    "seed": "seed", "trials": "trials", "parallelism": "parallelism", "output": "output",
    "format": "format", "solver_S": "solver.S", "solver_K": "solver.K",
    "solver_scf_iters": "solver.scf_iters", "regularization": "solver.regularization",
    "camera": "camera",
}


@dataclass
class RunConfig:
    command: str
    solver: SolverConfig = field(default_factory=SolverConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    camera: str | None = None
    levels: tuple = NOISE_LEVELS
    betas: tuple = ANISOTROPY_BETAS
    offsets: tuple = OFFSET_FRACTIONS
    estimators: tuple = ESTIMATORS
    init_perturbation: float | None = 0.05
    trials: int = 1000
    seed: int = 0
    parallelism: int = 1
    output: str | None = None
    format: str = "csv"
    input: str | None = None

    def echo(self):
        d = asdict(self)
        d["version"] = __version__
        return d


def _flatten(obj, prefix=""):
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    return _flatten(data)


class _Parser(argparse.ArgumentParser):
    # usage errors are config errors (exit 1), not argparse's exit 2
    def error(self, message):
        raise ConfigError("arguments", message)


def build_parser():
    p = _Parser(prog="pnec", description="Relative pose estimation experiments.")
    p.add_argument("command", nargs="?", help=", ".join(COMMANDS))
    p.add_argument("input", nargs="?", help="correspondence file for estimate-file")
    p.add_argument("--config", metavar="PATH", help="JSON configuration file")
    p.add_argument("--seed")
    p.add_argument("--trials")
    p.add_argument("--parallelism")
    p.add_argument("--output", metavar="PATH")
    p.add_argument("--format")
    p.add_argument("--solver.S", dest="solver_S", metavar="N", help="outer iterations")
    p.add_argument("--solver.K", dest="solver_K", metavar="N", help="lattice points")
    p.add_argument("--solver.scf-iters", dest="solver_scf_iters", metavar="N")
    p.add_argument("--regularization", metavar="C")
    p.add_argument("--camera")
    p.add_argument("--no-translation", action="store_true")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _check(condition, key, message):
    if not condition:
        raise ConfigError(key, message)


def parse_config(argv=None, environ=None):
    """Merge file values, flag overrides and ``PNEC_SEED`` into a ``RunConfig``."""
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    raw = load_config_file(args.config) if args.config else {}
    for key in raw:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
    if "seed" not in raw and environ.get("PNEC_SEED") is not None:
        raw["seed"] = environ["PNEC_SEED"]
    for dest, key in _FLAGS.items():
        value = getattr(args, dest)
        if value is not None:
            raw[key] = value
    if args.command:
        raw["command"] = args.command
    if args.input:
        raw["input"] = args.input
    if args.no_translation:
        raw["translation"] = False
    values = {}
    for key, v in raw.items():
        if key == "seed" and isinstance(v, str):
            values[key] = _int("seed", v)
        else:
            values[key] = SCHEMA[key](key, v)
    if "command" not in values:
        raise ConfigError("command", "no command given")
    return _assemble(values)


def _assemble(v):
    cfg = RunConfig(command=v["command"])
    solver = {_SOLVER_FIELDS[k[7:]]: x for k, x in v.items() if k.startswith("solver.")}
    try:
        cfg.solver = SolverConfig(**solver)
    except ValueError as exc:
        raise ConfigError("solver", str(exc)) from None
    scene = {k[6:]: x for k, x in v.items() if k.startswith("scene.")}
    scene["translation_enabled"] = v.get("translation", True)
    try:
        cfg.scene = SceneConfig(**scene)
    except ValueError as exc:
        raise ConfigError("scene", str(exc)) from None
    noise = {k[6:]: x for k, x in v.items()
             if k.startswith("noise.") and k not in ("noise.levels", "noise.betas", "noise.offsets")}
    if "type" in noise:
        noise["noise_type"] = noise.pop("type")
    try:
        cfg.noise = NoiseSpec(**noise)
    except ValueError as exc:
        raise ConfigError("noise", str(exc)) from None
    cfg.levels = v.get("noise.levels", NOISE_LEVELS)
    cfg.betas = v.get("noise.betas", ANISOTROPY_BETAS)
    cfg.offsets = v.get("noise.offsets", OFFSET_FRACTIONS)
    _check(all(x > 0 for x in cfg.levels), "noise.levels", "levels must be > 0")
    _check(all(0.5 <= b <= 1.0 for b in cfg.betas), "noise.betas", "betas must lie in [0.5, 1]")
    _check(all(0 <= o <= 1 for o in cfg.offsets), "noise.offsets", "offsets must lie in [0, 1]")
    for key in ("camera", "estimators", "init_perturbation", "trials", "seed",
                "parallelism", "output", "format", "input"):
        if key in v:
            setattr(cfg, key, v[key])
    _check(cfg.trials >= 1, "trials", "must be >= 1")
    _check(cfg.parallelism >= 1, "parallelism", "must be >= 1")
    _check(cfg.seed >= 0, "seed", "must be >= 0")
    _check(cfg.init_perturbation is None or cfg.init_perturbation >= 0,
           "init_perturbation", "must be >= 0")
    if cfg.command == "estimate-file":
        _check(cfg.input is not None, "input", "estimate-file needs a correspondence file")
    if cfg.output is not None:
        parent = Path(cfg.output).resolve().parent
        _check(parent.is_dir() and os.access(parent, os.W_OK), "output",
               f"directory {parent} is not writable")
    return cfg


def build_grid(cfg):
    """Cells of the configured sweep, in output order."""
    cameras = (cfg.camera,) if cfg.camera else CAMERAS
    scene, noise = cfg.scene, cfg.noise

    def cell(camera, noise_spec, offset=0.0):
        return Cell(camera, noise_spec, scene, offset, cfg.init_perturbation)

    if cfg.command == "run-synthetic":
        return [cell(cfg.camera or "omni", noise)]
    if cfg.command == "sweep-noise":
        return [cell(c, replace(noise, level=lv)) for c in cameras for lv in cfg.levels]
    if cfg.command == "sweep-anisotropy":
        # inhomogeneous noise with the anisotropy pinned to each beta
        return [cell(c, replace(noise, noise_type="aniso-inhomo", beta_range=(b, b)))
                for c in cameras for b in cfg.betas]
    if cfg.command == "sweep-offset":
        camera = cfg.camera or "pinhole"
        return [cell(camera, noise, off) for off in cfg.offsets]
    raise ValueError(f"{cfg.command} has no experiment grid")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def csv_rows(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def csv_header():
    return ",".join(CSV_COLUMNS) + "\n"


def _cell_label(row, varying):
    parts = []
    for key in varying:
        v = row[key]
        if key == "translation":
            parts.append("w/ t" if v else "w/o t")
        elif key in ("level",):
            parts.append(f"{v} px")
        elif key in ("beta_lo", "beta_hi"):
            if f"beta={v}" not in parts:
                parts.append(f"beta={v}")
        elif key == "offset":
            parts.append(f"offset {v}")
        else:
            parts.append(str(v))
    return " ".join(parts)


def markdown_table(rows, truncated=False):
    """Estimators as rows, cells as columns, one block per error metric."""
    keys = ("camera", "translation", "noise_type", "level", "beta_lo", "beta_hi", "offset")
    cells = []
    for row in rows:
        k = tuple(row[c] for c in keys)
        if k not in cells:
            cells.append(k)
    varying = [c for i, c in enumerate(keys) if len({k[i] for k in cells}) > 1] or ["camera", "level"]
    estimators = list(dict.fromkeys(r["estimator"] for r in rows))
    lookup = {(tuple(r[c] for c in keys), r["estimator"]): r for r in rows}
    labels = [_cell_label(dict(zip(keys, k)), varying) for k in cells]
    out = []
    for metric, title in (("mean_e_rot", "e_rot [deg]"), ("mean_e_t", "e_t [deg]")):
        if all(lookup[(k, e)][metric] is None for k in cells for e in estimators):
            continue
        out.append(f"| {title} | " + " | ".join(labels) + " |")
        out.append("|---|" + "---|" * len(labels))
        for e in estimators:
            vals = []
            for k in cells:
                v = lookup[(k, e)][metric]
                vals.append("-" if v is None or math.isnan(v) else f"{v:.3f}")
            out.append(f"| {e.upper()} | " + " | ".join(vals) + " |")
        out.append("")
    if truncated:
        out.append(TRUNCATED)
    return "\n".join(out) + "\n"


def _default_output(cfg):
    return f"{cfg.command}.{'md' if cfg.format == 'markdown' else 'csv'}"


def write_manifest(path, cfg, cells_done, n_cells, wall_times, truncated, error=None):
    manifest = {
        "config": cfg.echo(),
        "seed": cfg.seed,
        "version": __version__,
        "cells_completed": cells_done,
        "cells_total": n_cells,
        "truncated": truncated,
        "wall_time_per_trial": wall_times,
    }
    if error:
        manifest["error"] = error
    Path(path).write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def run_sweep(cfg, out=sys.stdout):
    """Run the sweep cell by cell, flushing results as they complete."""
    grid = build_grid(cfg)
    path = Path(cfg.output or _default_output(cfg))
    manifest_path = path.with_name(path.name + ".manifest.json")
    rows, wall_times = [], []
    truncated, error = False, None
    pool = ProcessPoolExecutor(cfg.parallelism) if cfg.parallelism > 1 else None
    if cfg.format == "csv":
        path.write_text(csv_header())
    try:
        for cell in grid:
            cell_rows = run_experiment([cell], cfg.trials, master_seed=cfg.seed,
                                       config=cfg.solver, estimators=cfg.estimators,
                                       executor=pool)
            for r in cell_rows:
                wall_times.append({"cell": cell.describe(), "estimator": r["estimator"],
                                   "seconds": r["mean_wall_time"]})
            rows.extend(cell_rows)
            if cfg.format == "csv":
                with path.open("a") as fh:
                    fh.write(csv_rows(cell_rows))
            log.info("cell %d/%d written", len(rows) // len(cfg.estimators), len(grid))
    except (Exception, KeyboardInterrupt) as exc:
        truncated, error = True, f"{type(exc).__name__}: {exc}"
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    if cfg.format == "csv":
        if truncated:
            with path.open("a") as fh:
                fh.write(TRUNCATED + "\n")
    else:
        path.write_text(markdown_table(rows, truncated))
    write_manifest(manifest_path, cfg, len(rows) // max(len(cfg.estimators), 1), len(grid),
                   wall_times, truncated, error)
    print(f"wrote {path} and {manifest_path}", file=out)
    if truncated:
        print(f"error: run stopped early ({error})", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def run_estimate_file(cfg, out=sys.stdout):
    cs = read_correspondences(cfg.input)
    report = pnec_estimate(cs, cfg.solver)
    text = json.dumps(report.to_dict(), indent=2)
    if cfg.output:
        Path(cfg.output).write_text(text + "\n")
    print(text, file=out)
    return EXIT_OK


def run_selftest_command(cfg, out=sys.stdout):
    results = run_selftest(seed=cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}", file=out)
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SELFTEST


def run(cfg, out=sys.stdout):
    if cfg.command == "selftest":
        return run_selftest_command(cfg, out)
    if cfg.command == "estimate-file":
        return run_estimate_file(cfg, out)
    return run_sweep(cfg, out)


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv)
                        else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    tic = time.perf_counter()
    try:
        status = run(cfg)
    except (PnecError, OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("done in %.1f s", time.perf_counter() - tic)
    return status


if __name__ == "__main__":
    sys.exit(main())
