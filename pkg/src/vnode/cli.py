"""Command-line entry point: ``vnode train|profile|solve|sched``.

Exit codes: 0 success, 2 bad config, 3 capacity, 4 divergence, 5 infeasible.
Diagnostics go to stderr; with ``--json`` stdout carries only JSON.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CAPACITY = 3
EXIT_DIVERGENCE = 4
EXIT_INFEASIBLE = 5

log = logging.getLogger("vnode")


class ConfigError(Exception):
    pass


def load_schema(name: str) -> dict:
    return json.loads(resources.files("vnode.schemas").joinpath(f"{name}.json").read_text())


def load_config(path: str | Path, schema: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    validate(doc, schema, str(path))
    return doc


def validate(doc, schema: str, where: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as e:
        loc = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {loc}: {e.message}") from None


def _emit(args, payload: dict, human: str) -> None:
    if args.json:
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(human.rstrip("\n") + "\n")


def _write(out: Path | None, name: str, text: str | bytes) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(text, bytes):
        (out / name).write_bytes(text)
    else:
        (out / name).write_text(text)


def _devices(spec, prefix: str = "gpu"):
    from .virtual import DeviceSpec

    if isinstance(spec, int):
        return [DeviceSpec(f"{prefix}{i:02d}") for i in range(spec)]
    return [DeviceSpec.from_dict(d) for d in spec]


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    from .core import ModelSpec
    from .elastic import ResizeRequest, TrainConfig, run_training
    from .virtual import CapacityError

    cfg = load_config(args.config, "train")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    w = cfg["workload"]
    spec = ModelSpec(tuple(w["widths"]), w.get("activation", "relu"), w.get("loss", "mse"), seed)
    B, V = cfg["global_batch"], cfg["virtual_nodes"]
    if B % V:
        raise ConfigError(f"{V} virtual nodes do not divide global batch {B}")
    devices = _devices(cfg["devices"])
    if len(devices) > V:
        raise ConfigError(f"{len(devices)} devices but only {V} virtual nodes")
    schedule = [ResizeRequest("train", _devices(r["devices"]), r["step"])
                for r in cfg.get("resize_schedule", [])]
    tc = TrainConfig(spec, B, V, devices, cfg["steps"], cfg.get("lr", 0.05), seed,
                     cfg.get("dataset_size"), cfg.get("parallel", False))
    out = Path(args.out) if args.out else None
    try:
        run = run_training(tc, schedule)
    except CapacityError as e:
        log.error("capacity: %s", e)
        return EXIT_CAPACITY

    metrics = "".join(m.to_json() + "\n" for m in run.metrics)
    params = run.world.params
    _write(out, "metrics.jsonl", metrics)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        np.save(out / "params.npy", params.values)

    payload = {"steps": len(run.metrics), "num_params": len(params),
               "final_loss": run.metrics[-1].loss if run.metrics else None,
               "devices": [d.device_id for d in run.world.devices],
               "resizes": sum(1 for e in run.events if e["kind"] == "resize")}
    code = EXIT_OK
    if args.compare_against:
        try:
            ref = np.load(args.compare_against)
        except (OSError, ValueError) as e:
            raise ConfigError(f"{args.compare_against}: {e}") from None
        if ref.shape != params.values.shape:
            log.error("parameter count differs: %s vs %s", ref.shape, params.values.shape)
            return EXIT_DIVERGENCE
        div = float(np.max(np.abs(ref - params.values))) if ref.size else 0.0
        tol = cfg.get("tolerance", 0.0)
        payload["max_divergence"] = div
        payload["tolerance"] = tol
        if not div <= tol:
            log.error("max divergence %.3e exceeds tolerance %.3e", div, tol)
            code = EXIT_DIVERGENCE
    human = (f"trained {payload['steps']} steps on {len(payload['devices'])} device(s); "
             f"final loss {payload['final_loss']}")
    if "max_divergence" in payload:
        human += f"\nmax divergence vs {args.compare_against}: {payload['max_divergence']:.3e}"
    _emit(args, payload, human)
    return code


# -- profile --------------------------------------------------------------------

def cmd_profile(args) -> int:
    from .core import ModelSpec
    from .hetero import DeviceModel, candidate_batch_sizes, profile

    cfg = load_config(args.config, "profile")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    w = cfg["workload"]
    spec = ModelSpec(tuple(w["widths"]), w.get("activation", "relu"), w.get("loss", "mse"), seed)
    if cfg["max_batch"] < 1:
        raise ConfigError(f"max_batch {cfg['max_batch']} is below the smallest candidate size 1; "
                          "no points to profile")
    sizes = candidate_batch_sizes(cfg["max_batch"])
    out = Path(args.out) if args.out else None
    curves = []
    for m in cfg["device_models"]:
        m = dict(m)
        cap = m.pop("memory_capacity", None)
        curve = profile(spec, DeviceModel.from_dict(m), sizes, cap, cfg.get("steps", 20),
                        cfg.get("execute", True), seed)
        if not curve.points:
            raise ConfigError(f"{curve.device_type}: no candidate batch size fits capacity {cap}")
        curves.append(curve)
        _write(out, f"profile_{curve.device_type}.json", curve.to_json())
    payload = {"profiles": [c.to_dict() for c in curves], "batch_sizes": sizes}
    human = "\n".join(f"{c.device_type}: {len(c.points)} points, comm {c.comm_overhead:.6g} s"
                      for c in curves)
    _emit(args, payload, human)
    return EXIT_OK


# -- solve ---------------------------------------------------------------------

def cmd_solve(args) -> int:
    from .hetero import DevicePool, InfeasibleError, ProfileCurve, solve

    cfg = load_config(args.config, "solve")
    base = Path(args.config).parent
    profiles = {}
    for p in cfg["profiles"]:
        path = base / p
        try:
            curve = ProfileCurve.from_dict(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise ConfigError(f"{path}: {e}") from None
        profiles[curve.device_type] = curve
    missing = [t for t in cfg["pool"] if t not in profiles]
    if missing:
        raise ConfigError(f"no profile for device type(s) {missing}")
    pool = DevicePool.from_dict(cfg["pool"])
    v_cap = cfg.get("max_virtual_nodes", 64)
    try:
        res = solve(profiles, pool, cfg["global_batch"], v_cap, explain=args.explain)
    except InfeasibleError as e:
        log.error("infeasible: %s", e)
        if args.json:
            sys.stdout.write(json.dumps({"infeasible": str(e)}, indent=2) + "\n")
        return EXIT_INFEASIBLE
    assignment = res.assignment if args.explain else res
    payload = assignment.to_dict()
    if args.explain:
        payload["candidates"] = res.table
    _write(Path(args.out) if args.out else None, "assignment.json",
           json.dumps(payload, indent=2, sort_keys=True) + "\n")
    lines = [f"{a.device_type}: {a.num_devices} x batch {a.batch_size} "
             f"({a.virtual_nodes} virtual nodes of {a.micro_batch})" for a in assignment.per_type]
    lines.append(f"predicted step time {assignment.predicted_step_time:.6g} s")
    if args.explain:
        lines.append(f"{len(res.table)} candidates evaluated")
        for row in res.table:
            parts = ", ".join(f"{p['device_type']} {p['num_devices']}x{p['batch_size']}/"
                              f"{p['virtual_nodes']}" for p in row["per_type"])
            lines.append(f"  {row['predicted_step_time_s']:.6g}  {parts}")
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


# -- sched -------------------------------------------------------------------

def cmd_sched(args) -> int:
    from .hetero import DevicePool
    from .sched import load_trace, run_simulation
    from .sched.sim import DEFAULT_ROUND_S

    cfg = load_config(args.config, "sched")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    policy = args.policy or cfg.get("policy", "wfs")
    path = Path(args.config).parent / cfg["trace"]
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    validate(doc, "trace", str(path))
    try:
        trace = load_trace(doc)
        metrics = run_simulation(trace, policy, DevicePool.from_dict(cfg["cluster"]), seed,
                                 cfg.get("round_seconds", DEFAULT_ROUND_S),
                                 cfg.get("resize_penalty_s", 0.0))
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from None
    out = Path(args.out) if args.out else None
    _write(out, "summary.json", metrics.summary_json())
    _write(out, "utilization.jsonl", metrics.utilization_jsonl())
    _write(out, "jobs.csv", metrics.jobs_csv())
    _write(out, "events.jsonl", "".join(json.dumps(e, sort_keys=True) + "\n"
                                        for e in metrics.events))
    s = metrics.summary()
    human = (f"{policy}: {s['num_jobs']} jobs, makespan {s['makespan_s']:.1f} s, "
             f"mean utilization {s['mean_utilization']:.3f}, "
             f"median JCT {s['median_jct_s']:.1f} s, "
             f"median queueing delay {s['median_queueing_delay_s']:.1f} s")
    _emit(args, s, human)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "profile": cmd_profile, "solve": cmd_solve, "sched": cmd_sched}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vnode", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("train", "train a toy model on virtual nodes"),
                        ("profile", "profile step time per device type"),
                        ("solve", "heterogeneous batch assignment"),
                        ("sched", "simulate a cluster trace")]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="JSON config file")
        s.add_argument("--json", action="store_true", help="machine-readable stdout")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--out", default=None, help="directory for output files")
        if name == "train":
            s.add_argument("--compare-against", default=None, metavar="PATH",
                           help="params .npy to compare the final parameters with")
        if name == "solve":
            s.add_argument("--explain", action="store_true", help="dump every candidate")
        if name == "sched":
            s.add_argument("--policy", choices=["static", "wfs", "het-rounds"], default=None)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="vnode: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        log.error("--seed must fit in an unsigned 64-bit integer")
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        log.error("config: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
