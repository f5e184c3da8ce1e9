"""Config-driven experiment runner.

    topoqst run config.json [--set geometry.b=0.8 ...] [--out results]
    topoqst validate config.json
    topoqst schema
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from . import __version__
from .coupling import RangeMode, classify_couplings, write_couplings_csv
from .dynamics import rabi_quench_protocol, evolve_schedule, linear_path_schedule, \
    rm_protocol_schedule, site_state, smooth_path_schedule
from .geometry import ChainParams, DisorderSpec, build_chain, is_feasible, write_geometry_csv
from .hamiltonian import hamiltonian_from_geometry, write_matrix_csv
from .spectral import diagonalize, gap_map, identify_midgap, phase_map
from . import protocols

SCHEMA_VERSION = 1
EXPERIMENTS = ["spectrum", "phase_map", "gap_map", "rabi", "transfer", "optimize",
               "velocity_scan", "disorder"]

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_grid = {"b_min": _num, "b_max": _num, "n_b": {"type": "integer", "minimum": 1},
         "h_min": _num, "h_max": _num, "n_h": {"type": "integer", "minimum": 1}}

SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "experiment": {"enum": EXPERIMENTS},
    "model": {"enum": ["SSH", "eSSH", "RM", "eRM"]},
    "range_mode": {"enum": [m.value for m in RangeMode]},
    "seed": {"type": "integer", "minimum": 0},
    "workers": {"type": ["integer", "null"], "minimum": 1},
    "output_dir": {"type": "string"},
    "geometry": _obj({"N": {"type": "integer", "minimum": 2, "maximum": 64},
                      "a": _pos, "b": _num, "h": _num, "theta": _num,
                      "a_phys_um": _pos, "min_separation_um": {"type": "number", "minimum": 0},
                      "enforce_screen": {"type": "boolean"}}),
    "spectrum": _obj({"delta": _num}),
    "phase_map": _obj({**_grid, "max_range": {"type": ["integer", "null"], "minimum": 1}}),
    "gap_map": _obj({**_grid, "delta": _num}),
    "rabi": _obj({"t_Q": {"type": ["number", "null"], "minimum": 0},
                  "delta_Q": {"type": ["number", "null"]}, "T_end": _pos,
                  "n_samples": {"type": "integer", "minimum": 2}}),
    "schedule": _obj({"kind": {"enum": ["smooth", "linear", "rm"]},
                      "b_i": _num, "b_f": _num, "h_i": _num, "h_m": _num, "p": _pos,
                      "delta_0": {"type": "number", "minimum": 0}, "retrace": {"type": "boolean"},
                      "delta_exponent": _pos, "T": _pos}),
    "transfer": _obj({"threshold": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                      "T_min": _pos, "T_max": _pos, "n_grid": {"type": "integer", "minimum": 2},
                      "rtol": _pos, "tol": _pos, "n_samples": {"type": "integer", "minimum": 2}}),
    "optimize": _obj({"objective": {"enum": ["min_time", "max_fidelity"]},
                      "h_m_bounds": _pair, "p_bounds": _pair,
                      "grid": {"type": "array", "items": {"type": "integer", "minimum": 1},
                               "minItems": 2, "maxItems": 2},
                      "budget": {"type": "integer", "minimum": 0}, "T_fixed": _pos,
                      "screen": {"enum": ["flag", "reject"]}}),
    "velocity_scan": _obj({"N_values": {"type": "array", "minItems": 1,
                                        "items": {"type": "integer", "minimum": 2, "maximum": 64}},
                           "modes": {"type": "array", "minItems": 1,
                                     "items": {"enum": [m.value for m in RangeMode]}},
                           "model": {"enum": ["odd", "rm"]}, "T_max": {"type": ["number", "null"]}}),
    "disorder": _obj({"sigma_grid": {"type": "array", "minItems": 1,
                                     "items": {"type": "number", "minimum": 0}},
                      "n_realizations": {"type": "integer", "minimum": 1},
                      "T_fixed": _pos, "average": {"enum": ["fidelity", "amplitude"]},
                      "chunk": {"type": "integer", "minimum": 1}, "tol": _pos,
                      "threshold": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}}),
    "calibration": _obj({"mode": {"enum": ["none", "fit_linear_path", "literature_value"]},
                         "C3": _pos, "T_linear_us": _pos}),
}, required=["experiment"])
SCHEMA["$schema"] = "https://json-schema.org/draft/2020-12/schema"
SCHEMA["$id"] = f"topoqst-config-v{SCHEMA_VERSION}"

DEFAULTS = {
    "schema_version": SCHEMA_VERSION, "model": "eSSH", "seed": 0, "workers": None,
    "output_dir": "results",
    "geometry": {"N": 9, "a": 1.0, "b": 0.812, "h": -0.107, "theta": float(np.arccos(1 / np.sqrt(3))),
                 "a_phys_um": 12.0, "min_separation_um": 2.5, "enforce_screen": True},
    "spectrum": {"delta": 0.0},
    "phase_map": {"b_min": 0.0, "b_max": 1.0, "n_b": 51, "h_min": -0.5, "h_max": 0.5, "n_h": 51,
                  "max_range": None},
    "gap_map": {"b_min": 0.0, "b_max": 1.0, "n_b": 51, "h_min": -0.5, "h_max": 0.5, "n_h": 51,
                "delta": 0.0},
    "rabi": {"t_Q": None, "delta_Q": None, "T_end": 60.0, "n_samples": 512},
    "schedule": {"kind": "smooth", **protocols.ODD_PATH, "delta_0": protocols.RM_DELTA0,
                 "retrace": True, "delta_exponent": 1.0, "T": 20.0},
    "transfer": {"threshold": 0.999, "T_min": 0.5, "T_max": 80.0, "n_grid": 64, "rtol": 1e-3,
                 "tol": 1e-6, "n_samples": 256},
    "optimize": {"objective": "min_time", "h_m_bounds": [-0.6, 0.0], "p_bounds": [0.05, 2.0],
                 "grid": [16, 16], "budget": 200, "T_fixed": 20.0, "screen": "flag"},
    "velocity_scan": {"N_values": [5, 7, 9, 11, 13, 15, 17, 19], "modes": ["nn", "full"],
                      "model": "odd", "T_max": None},
    "disorder": {"sigma_grid": [0.0, 0.05, 0.1, 0.15], "n_realizations": 1000, "T_fixed": 20.1,
                 "average": "fidelity", "chunk": 200, "tol": 1e-5, "threshold": 0.999},
    "calibration": {"mode": "none", "C3": 1.0, "T_linear_us": 43.0},
}


class ConfigError(ValueError):
    def __init__(self, message, fields):
        super().__init__(message)
        self.fields = fields


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def apply_override(cfg: dict, item: str) -> None:
    """Set a dotted key from ``key=value``; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", [item])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section", [key])
    node[parts[-1]] = value


def validate_config(cfg: dict) -> dict:
    """Check against the schema and return the config with defaults filled in."""
    errors = sorted(Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.path))
    if errors:
        fields = []
        for e in errors:
            path = ".".join(str(p) for p in e.path)
            if e.validator == "additionalProperties":
                extra = set(e.instance) - set(e.schema.get("properties", {}))
                fields += [f"{path}.{k}" if path else k for k in sorted(extra)]
            else:
                fields.append(path or "<root>")
        raise ConfigError("; ".join(e.message for e in errors), fields)
    full = _merge(DEFAULTS, cfg)
    model_mode = "nn" if full["model"] in ("SSH", "RM") else "full"
    if "range_mode" in cfg and cfg["range_mode"] != model_mode:
        raise ConfigError(f"range_mode {cfg['range_mode']} contradicts model {full['model']}",
                          ["range_mode"])
    full["range_mode"] = model_mode
    if full["geometry"]["N"] % 2 == 0 and full["experiment"] == "transfer" \
            and full["schedule"]["kind"] != "rm":
        raise ConfigError("smooth and linear transfer paths need odd N", ["geometry.N"])
    return full


def load_config(path, overrides=()) -> tuple[dict, dict]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    for item in overrides:
        apply_override(raw, item)
    return raw, validate_config(raw)


def _fmt(x) -> str:
    return f"{x:.17g}"


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n",
                    encoding="utf-8")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _params(cfg) -> ChainParams:
    g = cfg["geometry"]
    return ChainParams(g["N"], g["a"], g["b"], g["h"], g["theta"])


def _static_geometry(cfg):
    g = cfg["geometry"]
    geom = build_chain(_params(cfg))
    if g["enforce_screen"] and not is_feasible(geom, g["a_phys_um"], g["min_separation_um"]):
        raise RuntimeError(f"infeasible geometry: atoms closer than {g['min_separation_um']} um")
    return geom


def _schedule(cfg, T=None):
    s = cfg["schedule"]
    T = s["T"] if T is None else T
    if s["kind"] == "linear":
        return linear_path_schedule(s["b_i"], s["b_f"], s["h_i"], T)
    if s["kind"] == "rm":
        return rm_protocol_schedule(s["b_i"], s["h_i"], s["b_f"], s["h_m"], s["p"], s["delta_0"],
                                    T, retrace=s["retrace"], delta_exponent=s["delta_exponent"])
    return smooth_path_schedule(s["b_i"], s["b_f"], s["h_i"], s["h_m"], s["p"], T)


def _delta(cfg, section) -> float:
    d = cfg[section]["delta"]
    if cfg["model"] in ("SSH", "eSSH") and d != 0:
        raise RuntimeError(f"model {cfg['model']} has no detuning; use RM or eRM")
    return d


def _grid_axes(sec):
    return np.linspace(sec["b_min"], sec["b_max"], sec["n_b"]), \
        np.linspace(sec["h_min"], sec["h_max"], sec["n_h"])


def _calibration(cfg):
    c = cfg["calibration"]
    if c["mode"] == "none":
        return None
    if c["mode"] == "literature_value":
        return protocols.calibrate_C3("literature_value", C3=c["C3"],
                                      a_phys_um=cfg["geometry"]["a_phys_um"])
    return protocols.calibrate_C3(T_linear_us=c["T_linear_us"], a_phys_um=cfg["geometry"]["a_phys_um"])


def run_spectrum(cfg, out: Path, workers) -> dict:
    geom = _static_geometry(cfg)
    delta = _delta(cfg, "spectrum")
    H = hamiltonian_from_geometry(geom, delta, cfg["range_mode"])
    spec = diagonalize(H)
    _write_rows(out / "spectrum.csv", ["index", "eigenvalue_over_J0"],
                [(i, float(e)) for i, e in enumerate(spec.eigenvalues)])
    write_matrix_csv(H, out / "hamiltonian.csv")
    write_geometry_csv(geom, out / "geometry.csv")
    write_couplings_csv(classify_couplings(geom, delta=delta), out / "couplings.csv")
    summary = {"model_tag": H.model_tag}
    try:
        rep = identify_midgap(spec, geom.N, delta)
        (out / "edge_report.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        summary["edge"] = json.loads(rep.to_json())
    except ValueError as exc:
        summary["edge_error"] = str(exc)
    return summary


def run_phase_map(cfg, out: Path, workers) -> dict:
    sec = cfg["phase_map"]
    bs, hs = _grid_axes(sec)
    ratio = phase_map(bs, hs, cfg["geometry"]["N"], cfg["geometry"]["theta"], sec["max_range"])
    _write_rows(out / "phase_map.csv", ["b_over_a", "h_over_a", "ratio_Jp_over_J"],
                [(float(b), float(h), float(ratio[i, j]))
                 for i, b in enumerate(bs) for j, h in enumerate(hs)])
    return {"n_points": int(ratio.size), "n_undefined": int(np.isnan(ratio).sum())}


def run_gap_map(cfg, out: Path, workers) -> dict:
    sec = cfg["gap_map"]
    g = cfg["geometry"]
    bs, hs = _grid_axes(sec)
    gm = gap_map(bs, hs, g["N"], _delta(cfg, "gap_map"), cfg["range_mode"], g["theta"],
                 g["a_phys_um"], g["min_separation_um"])
    gm.write_csv(out / "gap_map.csv")
    return {"n_failed": len(gm.errors), "n_infeasible": int((~gm.feasible).sum())}


def run_rabi(cfg, out: Path, workers) -> dict:
    r = cfg["rabi"]
    geom = _static_geometry(cfg)
    if geom.N % 2:
        raise RuntimeError("Rabi oscillations need an even chain")
    t_Q = r["t_Q"] if r["t_Q"] is not None else r["T_end"]
    traj = rabi_quench_protocol(geom, t_Q, r["delta_Q"], r["T_end"], r["n_samples"],
                                cfg["range_mode"])
    traj.write_populations_csv(out / "populations.csv")
    traj.write_fidelity_csv(out / "fidelity.csv")
    return {"final_fidelity": traj.final_fidelity, "max_fidelity": float(traj.fidelity_trace.max())}


def run_transfer(cfg, out: Path, workers) -> dict:
    t = cfg["transfer"]
    params = _params(cfg)
    sch = _schedule(cfg)
    res = protocols.find_transfer_time(sch, params, t["threshold"], (t["T_min"], t["T_max"]),
                                       t["n_grid"], t["rtol"], cfg["range_mode"], tol=t["tol"])
    _write_rows(out / "fidelity_curve.csv", ["T_over_invJ0", "F"],
                zip(res.T_grid.astype(float), res.fidelity_curve.astype(float)))
    traj = evolve_schedule(sch.with_T(res.T_transfer), params, range_mode=cfg["range_mode"],
                           n_samples=t["n_samples"])
    traj.write_populations_csv(out / "populations.csv")
    traj.write_fidelity_csv(out / "fidelity.csv")
    summary = {"T_transfer": res.T_transfer, "l_over_a": res.l, "velocity": res.velocity,
               "F_at_T": res.F_at_T, "n_steps": res.n_steps, "model_tag": res.model_tag,
               "path_min_separation_over_a": protocols.path_min_separation(sch, params)}
    cal = _calibration(cfg)
    if cal is not None:
        (out / "calibration.json").write_text(cal.to_json() + "\n", encoding="utf-8")
        summary["T_transfer_us"] = float(cal.to_us(res.T_transfer))
    _write_json(out / "transfer.json", summary)
    return summary


def run_optimize(cfg, out: Path, workers) -> dict:
    o = cfg["optimize"]
    t = cfg["transfer"]
    g = cfg["geometry"]
    res = protocols.optimize_path(
        _schedule(cfg), _params(cfg), o["objective"], tuple(o["h_m_bounds"]), tuple(o["p_bounds"]),
        tuple(o["grid"]), o["budget"], o["T_fixed"], (t["T_min"], t["T_max"]), t["threshold"],
        cfg["range_mode"], tol=t["tol"], screen=o["screen"],
        min_separation_um=g["min_separation_um"], a_phys_um=g["a_phys_um"])
    summary = {"h_m": res.h_m, "p": res.p, "value": res.value, "objective": res.objective,
               "n_evals": res.n_evals, "n_infeasible": len(res.infeasible),
               "infeasible": [list(x) for x in res.infeasible]}
    _write_json(out / "optimize.json", summary)
    return {k: v for k, v in summary.items() if k != "infeasible"}


def run_velocity_scan(cfg, out: Path, workers) -> dict:
    v = cfg["velocity_scan"]
    s = cfg["schedule"]
    keys = ("b_i", "b_f", "h_i", "h_m", "p")
    path = {k: s[k] for k in keys}
    if v["model"] == "rm":
        path["delta_exponent"] = s["delta_exponent"]
    rows = []
    for mode in v["modes"]:
        rows += protocols.velocity_scan(v["N_values"], mode, v["model"], v["T_max"],
                                        n_grid=cfg["transfer"]["n_grid"], tol=cfg["transfer"]["tol"],
                                        delta_0=s["delta_0"], workers=workers, **path)
    protocols.write_velocity_csv(rows, out / "velocity.csv")
    return {"failures": {f"{r['N']}/{r['mode']}": r["error"] for r in rows if "error" in r}}


def run_disorder(cfg, out: Path, workers) -> dict:
    d = cfg["disorder"]
    g = cfg["geometry"]
    spec = DisorderSpec(0.0, cfg["seed"], d["n_realizations"])
    curve = protocols.disorder_sweep(_schedule(cfg, d["T_fixed"]), _params(cfg), spec,
                                     d["sigma_grid"], cfg["range_mode"], tol=d["tol"],
                                     threshold=d["threshold"], average=d["average"],
                                     chunk=d["chunk"], workers=workers, a_phys_um=g["a_phys_um"])
    curve.write_csv(out / "disorder.csv")
    return {"n_flagged": curve.n_flagged.tolist()}


RUNNERS = {name: globals()[f"run_{name}"] for name in EXPERIMENTS}


def resolve_workers(cfg) -> int:
    env = os.environ.get("TOPOQST_WORKERS")
    if env:
        return max(1, int(env))
    return cfg["workers"] or (os.cpu_count() or 1)


def run(config_path, overrides=(), out_dir=None) -> tuple[int, Path | None]:
    """Execute one experiment; returns (exit status, output directory)."""
    t0 = time.perf_counter()
    raw, cfg = load_config(config_path, overrides)
    if out_dir is not None:
        cfg["output_dir"] = str(out_dir)
    workers = resolve_workers(cfg)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S_%fZ")
    out = Path(cfg["output_dir"]) / f"{cfg['experiment']}_{stamp}"
    out.mkdir(parents=True, exist_ok=False)
    summary = RUNNERS[cfg["experiment"]](cfg, out, workers)
    _write_json(out / "manifest.json", {
        "config": cfg, "overrides": list(overrides), "seed": cfg["seed"],
        "library_version": __version__, "schema_version": SCHEMA_VERSION, "workers": workers,
        "started_utc": stamp, "wall_clock_s": time.perf_counter() - t0,
        "files": sorted(p.name for p in out.iterdir()), "summary": summary})
    return 0, out


def _error(kind: str, message: str, fields=None, code: int = 1) -> int:
    payload = {"error": kind, "message": message}
    if fields is not None:
        payload["fields"] = fields
    print(json.dumps(payload, default=_jsonable))
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="topoqst", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment")
    p_run.add_argument("config")
    p_run.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a dotted config key")
    p_run.add_argument("--out", default=None, help="output directory")
    p_val = sub.add_parser("validate", help="check a config against the schema")
    p_val.add_argument("config")
    p_val.add_argument("--set", dest="overrides", action="append", default=[])
    sub.add_parser("schema", help="print the JSON schema")
    args = ap.parse_args(argv)

    if args.command == "schema":
        print(json.dumps(SCHEMA, indent=2))
        return 0
    try:
        if args.command == "validate":
            _, cfg = load_config(args.config, args.overrides)
            print(json.dumps({"valid": True, "experiment": cfg["experiment"]}))
            return 0
        code, out = run(args.config, args.overrides, args.out)
        print(json.dumps({"status": "ok", "output": str(out)}))
        return code
    except ConfigError as exc:
        return _error("config", str(exc), exc.fields, 2)
    except (OSError, json.JSONDecodeError) as exc:
        return _error("io", str(exc), code=2)
    except Exception as exc:  # experiment failures are reported, not raised
        return _error(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
