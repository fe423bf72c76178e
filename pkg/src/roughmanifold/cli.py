"""Command-line front end.

    roughmanifold <command> --config cfg.json [--out DIR] [--seed N]

Configs are JSON objects validated against a small schema (unknown keys are
rejected).  Every command writes deterministic JSON or CSV documents into the
output directory; wall-clock timings go to a separate ``timings.csv`` and to
the log so the main outputs stay byte-identical across runs.

Exit codes: 0 ok, 2 usage, 3 domain, 4 numeric.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import drivers
from .calculus import RdeConfig
from .constrained import (
    ManifoldRoughPath,
    membership_defect,
    project_to_manifold,
    qx_constraint_check,
    right_invariant_rde,
)
from .development import (
    develop_full,
    frame_bundle,
    holonomy_angle,
    horizontality_defect,
    parallel_transport,
    roll,
    unroll,
)
from .errors import ConfigError, RoughManifoldError, UsageError
from .io import load_path, path_to_dict, trace_from_csv, write_table
from .manifolds import manifold_from_key
from .tensor import DEFAULT_P, fit_slope, path_chen_defect, rough_distance, signature_lift, weak_geometricity_defect

log = logging.getLogger("roughmanifold")

COMMANDS = ("lift", "check", "rde", "roll", "unroll", "transport", "develop", "study")

# -- schema -------------------------------------------------------------------

_COMMON = {"command", "p", "driver", "output"}
_KEYS = {
    "lift": _COMMON | {"input"},
    "check": _COMMON | {"manifold", "input", "trace_tol"},
    "rde": _COMMON | {"manifold", "fields", "x0", "solver"},
    "roll": _COMMON | {"manifold", "frame", "solver"},
    "unroll": _COMMON | {"manifold", "frame", "solver"},
    "transport": _COMMON | {"manifold", "frame", "solver"},
    "develop": _COMMON | {"manifold", "frame", "solver"},
    "study": _COMMON | {"manifold", "frame", "solver", "study", "levels"},
}
_DRIVER_KEYS = {
    "trace": {"path"},
    "path": {"path"},
    "line": {"direction", "start"},
    "circle": {"radius", "turns"},
    "lissajous": {"a", "b", "fa", "fb"},
    "pure_area": {"v", "w"},
    "brownian": {"seed", "dim", "scale", "subsample"},
    "great_circle": {"x0", "v0", "speed"},
    "latitude": {"colatitude"},
    "vertical": {"rate"},
}
_DRIVER_COMMON = {"kind", "n", "T", "lift"}
_SOLVER_KEYS = {"h", "rounds", "tol", "extrapolate", "R_max", "step_cap", "sew_tol", "sew_rounds", "check_trace"}
_STUDIES = ("roundtrip", "consistency", "holonomy")


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _unknown(section: str, given, allowed):
    extra = sorted(set(given) - set(allowed))
    _require(not extra, f"{section}: unknown key(s) {', '.join(extra)}")


def validate_config(cfg: dict, command: str) -> dict:
    """Schema check; returns a normalized copy."""
    _require(isinstance(cfg, dict), "config must be a JSON object")
    cfg = dict(cfg)
    cmd = cfg.setdefault("command", command)
    _require(cmd == command, f"config is for command {cmd!r}, not {command!r}")
    _unknown("config", cfg, _KEYS[command])
    p = cfg.setdefault("p", None)
    _require(p is None or (isinstance(p, (int, float)) and not isinstance(p, bool) and 2 <= p < 3), f"p must lie in [2, 3), got {p!r}")
    if command != "lift" or "input" not in cfg:
        if not (command == "check" and "input" in cfg):
            _require("driver" in cfg, "config needs a driver")
    if "driver" in cfg:
        drv = cfg["driver"]
        _require(isinstance(drv, dict) and "kind" in drv, "driver must be an object with a kind")
        kind = drv["kind"]
        _require(kind in _DRIVER_KEYS, f"unknown driver kind {kind!r}; choose from {', '.join(sorted(_DRIVER_KEYS))}")
        _unknown(f"driver ({kind})", drv, _DRIVER_COMMON | _DRIVER_KEYS[kind])
        if "n" in drv:
            _require(isinstance(drv["n"], int) and drv["n"] >= 1, "driver.n must be a positive integer")
        if "T" in drv:
            _require(isinstance(drv["T"], (int, float)) and drv["T"] > 0, "driver.T must be positive")
        if "lift" in drv:
            _require(drv["lift"] in ("exact", "chord"), "driver.lift must be 'exact' or 'chord'")
        if kind in ("trace", "path"):
            _require(isinstance(drv.get("path"), str), f"{kind} driver needs a file path")
    if command in ("check", "rde", "roll", "unroll", "transport", "develop", "study"):
        _require(isinstance(cfg.get("manifold"), str), "config needs a manifold key")
    if "solver" in cfg:
        _require(isinstance(cfg["solver"], dict), "solver must be an object")
        _unknown("solver", cfg["solver"], _SOLVER_KEYS)
    if "frame" in cfg:
        _require(isinstance(cfg["frame"], dict), "frame must be an object with x and optional g")
        _unknown("frame", cfg["frame"], {"x", "g"})
    if command == "rde":
        _require(cfg.setdefault("fields", "projection") in ("projection", "right_invariant"), "fields must be 'projection' or 'right_invariant'")
    if command == "study":
        _require(cfg.get("study") in _STUDIES, f"study must be one of {', '.join(_STUDIES)}")
        lv = cfg.setdefault("levels", [6, 7, 8])
        _require(isinstance(lv, list) and len(lv) >= 3 and all(isinstance(k, int) and 1 <= k <= 16 for k in lv), "levels: at least three integers in [1, 16]")
        cfg["levels"] = sorted(lv)
    return cfg


# -- builders -------------------------------------------------------------------


def build_driver(dcfg: dict, p: float | None, seed: int | None = None, n: int | None = None, base: Path | None = None):
    """Driver from its config; ``p=None`` keeps the driver's own default."""
    kind = dcfg["kind"]
    if kind == "path":
        X = load_path(_resolve(dcfg["path"], base))
        return X if p is None else X.with_p(p)
    if p is None:
        p = drivers.BROWNIAN_P if kind == "brownian" else DEFAULT_P
    n = int(n if n is not None else dcfg.get("n", 256))
    T = float(dcfg.get("T", 1.0))
    lift = dcfg.get("lift", "exact")
    if kind == "trace":
        t, v = trace_from_csv(_resolve(dcfg["path"], base).read_text())
        return signature_lift(t, v, p)
    if kind == "line":
        return drivers.line(dcfg.get("direction", [1.0, 0.0]), n, T, p, dcfg.get("start"))
    if kind == "circle":
        return drivers.circle(n, T, dcfg.get("radius", 1.0), dcfg.get("turns", 1.0), p, lift=lift)
    if kind == "lissajous":
        kw = {k: dcfg[k] for k in ("a", "b", "fa", "fb") if k in dcfg}
        return drivers.lissajous(n, T, p, lift=lift, **kw)
    if kind == "pure_area":
        return drivers.pure_area(dcfg.get("v", [1.0, 0.0]), dcfg.get("w", [0.0, 1.0]), n, T, p)
    if kind == "brownian":
        s = seed if seed is not None else int(dcfg.get("seed", 0))
        return drivers.brownian(s, n, T, int(dcfg.get("dim", 2)), p, float(dcfg.get("scale", 1.0)), int(dcfg.get("subsample", 1)))
    if kind == "great_circle":
        return drivers.great_circle(n, T, dcfg.get("speed", 1.0), p, dcfg.get("x0", (1.0, 0.0, 0.0)), dcfg.get("v0", (0.0, 1.0, 0.0)), lift=lift)
    if kind == "latitude":
        return drivers.latitude(n, dcfg.get("colatitude", math.pi / 3), T, p, lift=lift)
    if kind == "vertical":
        t = drivers.uniform_grid(n, T)
        rate = np.atleast_1d(np.asarray(dcfg.get("rate", [1.0]), dtype=float))
        return signature_lift(t, np.multiply.outer(t, rate), p)
    raise ConfigError(f"unknown driver kind {kind!r}")


def _resolve(path: str, base: Path | None) -> Path:
    q = Path(path)
    return q if q.is_absolute() or base is None else base / q


def build_solver(cfg: dict) -> RdeConfig:
    return RdeConfig(**cfg.get("solver", {}))


def build_frame(cfg: dict, M, x_default=None):
    OM = frame_bundle(M)
    fr = cfg.get("frame", {})
    if "x" in fr:
        x = np.asarray(fr["x"], dtype=float)
    elif x_default is not None:
        x = np.asarray(x_default, dtype=float)
    else:
        e = np.zeros(M.N)
        e[-1] = 1.0
        x = M.closest_point(e)
    g = np.asarray(fr["g"], dtype=float) if "g" in fr else None
    if g is not None and g.shape != (M.N, M.d):
        raise ConfigError(f"frame.g must be an {M.N} x {M.d} matrix")
    return OM.frame_at(x, g)


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _finite(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(_clean(doc), sort_keys=True, indent=1) + "\n")


def _slog_dict(slog) -> dict:
    return {k: v for k, v in vars(slog).items() if np.isscalar(v) or v is None}


# -- commands -------------------------------------------------------------------


class Context:
    def __init__(self, cfg: dict, out: Path, seed: int | None, base: Path | None):
        self.cfg, self.out, self.seed, self.base = cfg, out, seed, base
        self.timings: list[tuple[str, float]] = []

    def driver(self, n=None):
        return build_driver(self.cfg["driver"], self.cfg["p"], self.seed, n, self.base)

    def timed(self, label, fn, *a, **kw):
        t0 = time.perf_counter()
        out = fn(*a, **kw)
        dt = time.perf_counter() - t0
        self.timings.append((label, dt))
        log.info("%s: %.3f s", label, dt)
        return out


def cmd_lift(ctx: Context) -> dict:
    cfg = ctx.cfg
    if "input" in cfg:
        t, v = trace_from_csv(_resolve(cfg["input"], ctx.base).read_text())
        X = signature_lift(t, v, cfg["p"] or DEFAULT_P)
    else:
        X = ctx.driver()
    chen, wg = path_chen_defect(X), weak_geometricity_defect(X)
    rep = {"chen": chen.to_dict(), "weak_geometricity": wg.to_dict(), "passed": bool(chen.passed and wg.passed)}
    write_json(ctx.out / "path.json", path_to_dict(X))
    return rep


def cmd_check(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    if "input" in cfg:
        X = load_path(_resolve(cfg["input"], ctx.base))
        X = X if cfg["p"] is None else X.with_p(cfg["p"])
    else:
        X = ctx.driver()
    mem = membership_defect(X, M, cfg.get("trace_tol", 1e-6))
    full, trace_only = qx_constraint_check(X, M)
    wg = weak_geometricity_defect(X)
    rep = {
        "manifold": M.key,
        "membership": mem.to_dict(),
        "qx_constraint": full.to_dict(),
        "qx_trace_only": trace_only.to_dict(),
        "weak_geometricity": wg.to_dict(),
        "passed": bool(mem.passed),
    }
    if not mem.passed:
        rep["diagnostic"] = (
            "normal component of the level-2 increment is not small relative to omega^{3/p}: "
            "the area leaves the tangent directions, so this is not a rough path on the manifold"
        )
    return rep


def cmd_rde(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    Z = ctx.driver()
    scfg = build_solver(cfg)
    if cfg["fields"] == "right_invariant":
        if not M.key.startswith("so:"):
            raise ConfigError("right_invariant fields need an so:n manifold")
        n = int(round(math.sqrt(M.N)))
        g0 = np.asarray(cfg["x0"], dtype=float).reshape(n, n) if "x0" in cfg else None
        X, slog = ctx.timed("rde", right_invariant_rde, Z, n, g0, scfg, return_log=True)
    else:
        x0 = cfg.get("x0")
        X, slog = ctx.timed("rde", project_to_manifold, Z, M, x0, scfg, return_log=True)
    write_json(ctx.out / "path.json", X.to_dict())
    return {"manifold": M.key, "solver": _slog_dict(slog), "membership": X.membership().to_dict()}


def _frame_report(U) -> dict:
    return {
        "isometry_defect": U.isometry_defect(),
        "tangency_defect": U.tangency_defect(),
        "horizontality": horizontality_defect(U).to_dict(),
    }


def cmd_roll(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    Z = ctx.driver()
    u0 = build_frame(cfg, M)
    U, X = ctx.timed("roll", roll, Z, u0, M, build_solver(cfg))
    write_json(ctx.out / "frame_path.json", U.to_dict())
    write_json(ctx.out / "path.json", X.to_dict())
    return {"manifold": M.key, **_frame_report(U)}


def cmd_unroll(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    X = ManifoldRoughPath(ctx.driver(), M)
    u0 = build_frame(cfg, M, X.values[0])
    Z, U = ctx.timed("unroll", unroll, X, u0, build_solver(cfg), return_frames=True)
    write_json(ctx.out / "path.json", path_to_dict(Z))
    return {"manifold": M.key, **_frame_report(U)}


def cmd_transport(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    X = ManifoldRoughPath(ctx.driver(), M)
    u0 = build_frame(cfg, M, X.values[0])
    U = ctx.timed("transport", parallel_transport, X, u0, build_solver(cfg))
    write_json(ctx.out / "frame_path.json", U.to_dict())
    rep = {"manifold": M.key, **_frame_report(U)}
    x = U.base_values
    if M.d == 2 and np.linalg.norm(x[-1] - x[0]) <= 1e-4:
        g = U.frames
        normal = M.Q(x[0]) @ x[0] if M.key.startswith("sphere") else None
        rep["holonomy_angle"] = holonomy_angle(g[0], g[-1], normal)
    return rep


def cmd_develop(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    Z = ctx.driver()
    u0 = build_frame(cfg, M)
    U = ctx.timed("develop", develop_full, Z, u0, M, build_solver(cfg))
    write_json(ctx.out / "frame_path.json", U.to_dict())
    return {"manifold": M.key, **_frame_report(U)}


def _study_roundtrip(ctx, M, n):
    Z = ctx.driver(n)
    u0 = build_frame(ctx.cfg, M)
    scfg = build_solver(ctx.cfg)
    U, X = roll(Z, u0, M, scfg)
    Zb = unroll(X, u0, scfg)
    return {"error": rough_distance(Zb, Z), "isometry": U.isometry_defect()}


def _study_consistency(ctx, M, n):
    X = ManifoldRoughPath(ctx.driver(n), M)
    Y = project_to_manifold(X.path, M, cfg=build_solver(ctx.cfg))
    return {"error": rough_distance(Y.path, X.path), "isometry": 0.0}


def _study_holonomy(ctx, M, n):
    dcfg = ctx.cfg["driver"]
    if dcfg["kind"] != "latitude":
        raise ConfigError("the holonomy study needs a latitude driver")
    th = float(dcfg.get("colatitude", math.pi / 3))
    X = ManifoldRoughPath(ctx.driver(n), M)
    u0 = build_frame(ctx.cfg, M, X.values[0])
    U = parallel_transport(X, u0, build_solver(ctx.cfg))
    g = U.frames
    ang = holonomy_angle(g[0], g[-1], X.values[0])
    ref = (2 * math.pi * math.cos(th)) % (2 * math.pi)
    err = abs((ang - ref + math.pi) % (2 * math.pi) - math.pi)
    return {"error": err, "isometry": U.isometry_defect()}


def cmd_study(ctx: Context) -> dict:
    cfg = ctx.cfg
    M = manifold_from_key(cfg["manifold"])
    fn = {"roundtrip": _study_roundtrip, "consistency": _study_consistency, "holonomy": _study_holonomy}[cfg["study"]]
    rows = []
    for k in cfg["levels"]:
        n = 2**k
        T = float(cfg["driver"].get("T", 1.0))
        r = ctx.timed(f"level {k}", fn, ctx, M, n)
        rows.append({"level": k, "n": n, "mesh": T / n, **r})
    meshes = [r["mesh"] for r in rows]
    errs = [max(r["error"], 1e-300) for r in rows]
    order = fit_slope(meshes, errs)
    write_table(ctx.out / "study.csv", ["level", "n", "mesh", "error", "isometry"], [[r["level"], r["n"], r["mesh"], r["error"], r["isometry"]] for r in rows])
    iso_ok = all(r["isometry"] <= 1e-8 for r in rows)
    return {
        "study": cfg["study"],
        "manifold": M.key,
        "rows": rows,
        "order": order,
        "verdicts": {"order_at_least_1": bool(order >= 1.0), "isometry_1e-8": bool(iso_ok)},
        "passed": bool(order >= 1.0 and iso_ok),
    }


_DISPATCH = {
    "lift": cmd_lift,
    "check": cmd_check,
    "rde": cmd_rde,
    "roll": cmd_roll,
    "unroll": cmd_unroll,
    "transport": cmd_transport,
    "develop": cmd_develop,
    "study": cmd_study,
}


# -- entry point -------------------------------------------------------------------


def _setup_logging():
    level = os.environ.get("ROUGHMANIFOLD_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def run(command: str, cfg: dict, out: Path, seed: int | None = None, base: Path | None = None) -> dict:
    """Validate ``cfg`` and run ``command``; returns the report written to report.json."""
    cfg = validate_config(cfg, command)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, seed, base)
    rep = _DISPATCH[command](ctx)
    rep = {"command": command, **rep}
    write_json(out / "report.json", rep)
    if ctx.timings:
        write_table(out / "timings.csv", ["stage", "seconds"], ctx.timings)
    return rep


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="roughmanifold", description="Rough paths on embedded manifolds.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the driver seed")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    _setup_logging()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        cfg_path = Path(args.config)
        try:
            cfg = json.loads(cfg_path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {cfg_path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{cfg_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        rep = run(args.command, cfg, out, args.seed, cfg_path.parent)
    except RoughManifoldError as exc:
        record = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
        t = getattr(exc, "time", None)
        if t is not None:
            record["time"] = t
        if out.is_dir():
            write_json(out / "error.json", record)
        print(f"roughmanifold: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"roughmanifold: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "passed": rep.get("passed", True)}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
