"""``condlab`` command line: one subcommand per experiment, JSON in, CSV/JSON out.

    condlab <simulate|check|nn|matrix|sweep> --config cfg.json --out dir [--seed N] [--set key=value ...]

Exit status is 0 on success, 2 for bad input (missing or invalid config,
failed preconditions) and 3 for numerical failures. The output directory is
only created once the config has been read and validated, and every run
finishes by writing ``manifest.json`` with a sha256 for each emitted file.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import effective as eff
from . import matrix as mx
from . import nn
from . import stages
from .errors import NumericalFailure, PreconditionError
from .io import (
    COSINE_HEADER,
    TRAJECTORY_HEADER,
    cosine_rows,
    sha256_file,
    state_document,
    trajectory_rows,
    write_csv,
    write_json,
)
from .seeding import cell_seed

SCHEMA_VERSION = 1
SUBCOMMANDS = ("simulate", "check", "nn", "matrix", "sweep")
EXIT_OK, EXIT_PRECONDITION, EXIT_NUMERIC = 0, 2, 3


class ConfigError(PreconditionError):
    pass


_INTEGRATE = {
    "t_end": None,
    "energy_ceiling": 1e9,
    "rel_tol": 1e-10,
    "abs_tol": 1e-12,
    "min_step": 1e-14,
    "sample_stride": None,
}

DEFAULTS = {
    "simulate": {"seed": 0, "state": {"kind": "scalar"}, "write_state": False, **_INTEGRATE},
    "check": {"seed": 0, "state": {"kind": "scalar"}, "integrate": True, **_INTEGRATE, "t_end": 50.0},
    "nn": {
        "seed": 0,
        "data_seed": None,
        "m": 40,
        "d": 1,
        "n": 100,
        "alpha": 2.0,
        "epsilon": None,
        "lr_schedule": [[0, 5e-3], ["plateau_exit", 5e-4]],
        "iters": 400_000,
        "log_every": 100,
        "stop_loss": 1e-3,
        "plateau_drop": 0.5,
        "checkpoint_every": 0,
        "full_width": False,
    },
    "matrix": {
        "seed": 0,
        "m": 10,
        "measurement_family": "coordinate",
        "n": None,
        "target_spec": {"diagonal": [1.0, -1.0]},
        "init_std": None,
        "lr": None,
        "iters": 100_000,
        "log_every": 100,
        "stop_loss": 1e-3,
        "top_k": 4,
        "effective_ceiling": 1e9,
    },
    "sweep": {"seed": 0, "subcommand": "nn", "grid": None, "base": {}, "workers": 1},
}

STATE_KINDS = ("scalar", "balanced", "random", "explicit")
FAMILIES = ("coordinate", "entries", "gaussian")


# -- config handling ---------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    version = cfg.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    return cfg


def parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        keys, value = parse_override(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {item!r}: {k} is not an object")
        node[keys[-1]] = value
    return cfg


def resolve(subcommand: str, cfg: dict, seed: int | None = None) -> dict:
    """Merge defaults, reject unknown keys and validate values."""
    defaults = DEFAULTS[subcommand]
    unknown = sorted(set(cfg) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown {subcommand} config keys: {', '.join(unknown)}")
    out = {**copy.deepcopy(defaults), **copy.deepcopy(cfg)}
    if seed is not None:
        out["seed"] = seed
    if not isinstance(out["seed"], int) or isinstance(out["seed"], bool) or out["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    _VALIDATORS[subcommand](out)
    return out


def _positive(cfg, *keys, allow_none=False):
    for k in keys:
        v = cfg[k]
        if v is None and allow_none:
            continue
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            raise ConfigError(f"{k} must be a positive number, got {v!r}")


def _validate_integrate(cfg):
    _positive(cfg, "energy_ceiling", "rel_tol", "abs_tol", "min_step")
    _positive(cfg, "t_end", "sample_stride", allow_none=True)
    state = cfg["state"]
    if not isinstance(state, dict) or state.get("kind") not in STATE_KINDS:
        raise ConfigError(f"state.kind must be one of {STATE_KINDS}")
    if state["kind"] == "random" and not (isinstance(state.get("m"), int) and state["m"] >= 1):
        raise ConfigError("random state needs an integer m >= 1")
    if state["kind"] == "explicit" and not all(k in state for k in ("a", "b", "c")):
        raise ConfigError("explicit state needs a, b and c")


def _validate_nn(cfg):
    for k in ("m", "n", "iters", "log_every"):
        if not isinstance(cfg[k], int) or cfg[k] < (0 if k == "iters" else 1):
            raise ConfigError(f"{k} must be a positive integer")
    if cfg["d"] != 1:
        raise ConfigError("the tanh(x) dataset is one-dimensional; d must be 1")
    if (cfg["alpha"] is None) == (cfg["epsilon"] is None):
        raise ConfigError("set exactly one of alpha and epsilon")
    _positive(cfg, "epsilon", "stop_loss", allow_none=True)
    sched = cfg["lr_schedule"]
    if not isinstance(sched, list) or not all(isinstance(p, list) and len(p) == 2 for p in sched):
        raise ConfigError("lr_schedule must be a list of [iteration, lr] pairs")
    for it, lr in sched:
        if not (it == nn.PLATEAU_EXIT or (isinstance(it, int) and it >= 0)):
            raise ConfigError(f"bad schedule iteration {it!r}")
        if not isinstance(lr, (int, float)) or not lr > 0:
            raise ConfigError(f"bad learning rate {lr!r}")


def _validate_matrix(cfg):
    if not isinstance(cfg["m"], int) or cfg["m"] < 1:
        raise ConfigError("m must be a positive integer")
    if cfg["measurement_family"] not in FAMILIES:
        raise ConfigError(f"measurement_family must be one of {FAMILIES}")
    if cfg["measurement_family"] == "gaussian" and not (isinstance(cfg["n"], int) and cfg["n"] >= 1):
        raise ConfigError("gaussian measurements need an integer n >= 1")
    diag = cfg["target_spec"].get("diagonal") if isinstance(cfg["target_spec"], dict) else None
    if not isinstance(diag, list) or len(diag) > cfg["m"]:
        raise ConfigError("target_spec.diagonal must be a list no longer than m")
    _positive(cfg, "init_std", "lr", allow_none=True)
    _positive(cfg, "effective_ceiling")


def _validate_sweep(cfg):
    if cfg["subcommand"] not in ("simulate", "check", "nn", "matrix"):
        raise ConfigError("sweep.subcommand must name a single-run subcommand")
    grid = cfg["grid"]
    if not isinstance(grid, dict) or not isinstance(grid.get("param"), str):
        raise ConfigError("grid must be an object with param and values")
    values = grid.get("values")
    if not isinstance(values, list) or not values:
        raise ConfigError("grid.values must be a non-empty list")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")
    for idx, value in enumerate(values):
        base = dict(cfg["base"])
        base = apply_overrides(base, [f"{grid['param']}={json.dumps(value)}"])
        resolve(cfg["subcommand"], base, cell_seed(cfg["seed"], idx))


_VALIDATORS = {
    "simulate": _validate_integrate,
    "check": _validate_integrate,
    "nn": _validate_nn,
    "matrix": _validate_matrix,
    "sweep": _validate_sweep,
}


# -- pipelines -----------------------------------------------------------------


def _build_state(spec: dict, seed: int) -> eff.EffectiveState:
    kind = spec["kind"]
    if kind == "scalar":
        return eff.scalar_state(float(spec.get("value", 1.0)))
    if kind == "balanced":
        return eff.balanced_example()
    if kind == "random":
        return eff.random_state(spec["m"], np.random.default_rng(seed), float(spec.get("std", 1.0)))
    return eff.EffectiveState(spec["a"], spec["b"], spec["c"])


def _integrate_opts(cfg) -> eff.IntegrateOptions:
    return eff.IntegrateOptions(
        t_end=math.inf if cfg["t_end"] is None else float(cfg["t_end"]),
        energy_ceiling=float(cfg["energy_ceiling"]),
        rel_tol=float(cfg["rel_tol"]),
        abs_tol=float(cfg["abs_tol"]),
        min_step=float(cfg["min_step"]),
        sample_stride=cfg["sample_stride"],
    )


def _blew_up(traj) -> bool:
    return traj.stop_reason in (eff.StopReason.ENERGY_CEILING, eff.StopReason.MIN_STEP)


def run_simulate(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    s0 = _build_state(cfg["state"], seed)
    traj = eff.integrate(s0, _integrate_opts(cfg))
    write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, trajectory_rows(traj), seed)
    write_csv(out / "fsc.csv", ("t", "holds", "cond1_pos", "cond2_pos", "min_margin"), stages.fsc_series(traj), seed)
    if cfg["write_state"]:
        write_json(out / "state.json", state_document(traj, seed))
    summary = {
        "seed": seed,
        "m": traj.m,
        "stop_reason": traj.stop_reason.value,
        "final_t": traj.final.t,
        "final_energy": float(traj.energies[-1]),
        "snapshots": len(traj),
    }
    if _blew_up(traj) and traj.energies[0] > 0:
        b = eff.blowup_bracket(traj)
        summary["bracket"] = {
            "upper_time": b.upper_time,
            "lower_time": b.lower_time,
            "c_estimate": b.c_estimate,
            "c_estimate_is_empirical": True,
        }
    write_json(out / "summary.json", summary)
    return summary


def run_check(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    s0 = _build_state(cfg["state"], seed)
    assumption = eff.check_blowup_assumption(s0)
    fsc0 = stages.check_fsc(s0)
    report = {
        "seed": seed,
        "m": s0.m,
        "energy0": eff.energy(s0),
        "assumption_holds": assumption.holds,
        "norm_gap": assumption.norm_gap,
        "discriminant": assumption.discriminant,
        "fsc_holds_at_start": fsc0.holds,
    }
    if cfg["integrate"]:
        traj = eff.integrate(s0, _integrate_opts(cfg))
        cons = eff.conservation_check(traj)
        report.update(
            stop_reason=traj.stop_reason.value,
            final_t=traj.final.t,
            final_energy=float(traj.energies[-1]),
            energy_monotone=bool(np.all(np.diff(traj.energies) >= -1e-9 * np.maximum(1, np.abs(traj.energies[1:])))),
            conservation_max_drift=cons.max_drift,
        )
        if traj.energies[0] > 0:
            lb = eff.lower_bound_check(traj)
            report["lower_bound"] = {"valid": lb.valid, "worst_margin": lb.worst_margin}
        if _blew_up(traj) and traj.energies[0] > 0:
            b = eff.blowup_bracket(traj)
            report["bracket"] = {"upper_time": b.upper_time, "lower_time": b.lower_time, "c_estimate": b.c_estimate}
        persist = stages.fsc_persistence(traj)
        report["fsc_first_hold_t"] = persist.first_hold_t
        report["fsc_violated_after"] = persist.violated_after
        if _blew_up(traj) and persist.first_hold_t is not None:
            v = stages.condensation_verdict(traj)
            report["condensation"] = {
                "condensed": v.condensed,
                "min_cos_xi_on_c1": v.min_cos_xi_on_c1,
                "min_cos_psi_on_c1": v.min_cos_psi_on_c1,
                "ratio_errors": v.ratio_errors,
                "min_abs_c_on_c1": v.min_abs_c_on_c1,
                "c1": list(v.partition.c1),
                "c2": list(v.partition.c2),
            }
        write_csv(out / "trajectory.csv", TRAJECTORY_HEADER, trajectory_rows(traj), seed)
    write_json(out / "report.json", report)
    return report


def run_nn(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    m = 200 if cfg["full_width"] else cfg["m"]
    data_seed = seed if cfg["data_seed"] is None else cfg["data_seed"]
    data = nn.tanh_dataset(cfg["n"], seed=data_seed)
    spec = nn.InitSpec(epsilon=cfg["epsilon"], alpha=cfg["alpha"], seed=seed)
    net0 = nn.init_net(m, cfg["d"], spec)
    sched = [tuple(p) for p in cfg["lr_schedule"]]
    base_lr = next((lr for it, lr in sched if it == 0), sched[0][1] if sched else 5e-3)
    opts = nn.TrainOptions(
        lr=base_lr,
        iters=cfg["iters"],
        log_every=cfg["log_every"],
        lr_schedule=sched,
        checkpoint_every=cfg["checkpoint_every"],
        stop_loss=cfg["stop_loss"],
        plateau_drop=cfg["plateau_drop"],
    )
    v = nn.target_direction(data)
    summary = {"seed": seed, "data_seed": data_seed, "m": m, "epsilon": spec.scale(m)}
    try:
        log = nn.train(net0, data, opts, v=v)
    except nn.TrainingDiverged as exc:
        write_csv(out / "train_log.csv", ("iter", "loss", "fsc_count", "energy"), exc.log.rows(), seed)
        summary.update(status="numerical_failure", error=str(exc), last_checkpoint_iter=exc.last_checkpoint[0])
        write_json(out / "summary.json", summary)
        raise
    write_csv(out / "train_log.csv", ("iter", "loss", "fsc_count", "energy"), log.rows(), seed)
    cos = nn.cosine_similarity_map(log.net.w1, v)
    write_csv(out / "cosine.csv", COSINE_HEADER, cosine_rows(cos), seed)
    pair = cos["pairwise_cos"]
    write_csv(out / "pairwise_cos.csv", tuple(f"r{k}" for k in range(m)), [tuple(r) for r in pair], seed)
    summary.update(
        status="ok",
        final_iter=log.final_iter,
        final_loss=log.final_loss,
        plateau_exit_iter=log.plateau_exit_iter,
        max_fsc_count=log.max_fsc_count,
        min_abs_cos_active_rows=nn.condensation_alignment(log.net.w1, v),
        plateau_exit_is_surrogate=True,
    )
    write_json(out / "summary.json", summary)
    return summary


def build_problem(cfg: dict) -> mx.SensingProblem:
    target = mx.low_rank_target(cfg["m"], cfg["target_spec"]["diagonal"])
    family = cfg["measurement_family"]
    if family == "coordinate":
        return mx.coordinate_problem(target)
    if family == "entries":
        return mx.entry_problem(target)
    return mx.gaussian_problem(target, cfg["n"], np.random.default_rng(cfg["seed"] + 1))


def run_matrix(cfg: dict, out: Path) -> dict:
    seed, m = cfg["seed"], cfg["m"]
    problem = build_problem(cfg)
    std = float(m) ** -3 if cfg["init_std"] is None else cfg["init_std"]
    lr = 0.2 * problem.n if cfg["lr"] is None else cfg["lr"]
    net0 = mx.random_net(m, std, np.random.default_rng(seed))
    opts = mx.TrainOptions(
        lr=lr, iters=cfg["iters"], log_every=cfg["log_every"], top_k=cfg["top_k"], stop_loss=cfg["stop_loss"]
    )
    log = mx.train_deep_linear(net0, problem, opts)
    header = ("iter", "loss", *(f"sv{k + 1}" for k in range(cfg["top_k"])))
    write_csv(out / "matrix_log.csv", header, log.rows(cfg["top_k"]), seed)

    state, _ = mx.diagonalize_and_transform(mx.build_v(problem), net0)
    unit = mx.MatrixEffectiveState(state.a / std, state.b / std, state.c / std, state.lam, state.neglected)
    traj = mx.mc_integrate(unit, energy_ceiling=cfg["effective_ceiling"], t_end=1e6)
    energies = traj.energies
    monotone = bool(np.all(np.diff(energies) >= -1e-9 * np.maximum(1.0, np.abs(energies[1:]))))
    write_csv(out / "mc_energy.csv", ("t", "E"), list(zip(traj.times, energies)), seed)

    svs = log.first_below_svs
    summary = {
        "seed": seed,
        "m": m,
        "measurement_family": cfg["measurement_family"],
        "measurements": problem.n,
        "init_std": std,
        "lr": lr,
        "commutator_defect": problem.commutator_defect(),
        "first_below_iter": log.first_below_iter,
        "first_below_loss": log.first_below_loss,
        "first_below_svs": None if svs is None else svs,
        "svs_above_half": None if svs is None else int(np.sum(svs > 0.5)),
        "max_other_sv": None if svs is None else float(np.sort(svs)[::-1][2:].max(initial=0.0)),
        "effective_stop_reason": traj.stop_reason.value,
        "effective_energy_monotone": monotone,
    }
    write_json(out / "summary.json", summary)
    return summary


RUNNERS = {"simulate": run_simulate, "check": run_check, "nn": run_nn, "matrix": run_matrix}


def _run_cell(task):
    subcommand, cfg, out = task
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        summary = RUNNERS[subcommand](cfg, out)
        status, error = "ok", None
    except NumericalFailure as exc:
        summary, status, error = {}, "numerical_failure", str(exc)
    except PreconditionError as exc:
        summary, status, error = {}, "precondition_error", str(exc)
    write_manifest(out, {"subcommand": subcommand, "seed": cfg["seed"], "status": status})
    return status, error, summary


def run_sweep(cfg: dict, out: Path) -> dict:
    grid, sub = cfg["grid"], cfg["subcommand"]
    tasks, cells = [], []
    for idx, value in enumerate(grid["values"]):
        seed = cell_seed(cfg["seed"], idx)
        cell_cfg = resolve(sub, apply_overrides(cfg["base"], [f"{grid['param']}={json.dumps(value)}"]), seed)
        cell_dir = out / f"cell_{idx:03d}"
        tasks.append((sub, cell_cfg, str(cell_dir)))
        cells.append({"index": idx, "value": value, "seed": seed, "dir": cell_dir.name})
    if cfg["workers"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]

    metric = "max_fsc_count" if sub == "nn" else None
    rows = []
    for cell, (status, error, summary) in zip(cells, results):
        cell.update(status=status, error=error)
        rows.append((cell["value"], cell["seed"], status, summary.get(metric) if metric else None))
    header = (grid["param"], "seed", "status", metric or "metric")
    write_csv(out / "summary.csv", header, rows, cfg["seed"])
    report = {"seed": cfg["seed"], "subcommand": sub, "param": grid["param"], "cells": cells}
    write_json(out / "sweep.json", report)
    report["failed"] = sum(c["status"] != "ok" for c in cells)
    return report


RUNNERS["sweep"] = run_sweep


# -- manifest and entry point ----------------------------------------------------


def write_manifest(out: Path, extra: dict | None = None) -> Path:
    files = []
    for path in sorted(p for p in out.rglob("*") if p.is_file()):
        if path == out / "manifest.json":
            continue
        files.append({"path": path.relative_to(out).as_posix(), "sha256": sha256_file(path), "bytes": path.stat().st_size})
    return write_json(out / "manifest.json", {**(extra or {}), "files": files})


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condlab", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="JSON config with schema_version 1")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--workers", type=int, default=None, help="parallel sweep cells")
    return ap


def run(subcommand, config_path, out_dir, seed=None, overrides=(), workers=None) -> int:
    """Run one subcommand; returns the process exit status."""
    try:
        cfg = apply_overrides(load_config(config_path), overrides)
        if workers is not None:
            if subcommand != "sweep":
                raise ConfigError("--workers only applies to sweep")
            cfg["workers"] = workers
        cfg = resolve(subcommand, cfg, seed)
    except PreconditionError as exc:
        print(f"condlab: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    status, code = "ok", EXIT_OK
    try:
        result = RUNNERS[subcommand](cfg, out)
        if subcommand == "sweep" and result["failed"]:
            print(f"condlab: {result['failed']} sweep cell(s) failed", file=sys.stderr)
    except NumericalFailure as exc:
        print(f"condlab: numerical failure: {exc}", file=sys.stderr)
        status, code = "numerical_failure", EXIT_NUMERIC
    except PreconditionError as exc:
        print(f"condlab: {exc}", file=sys.stderr)
        status, code = "precondition_error", EXIT_PRECONDITION
    write_manifest(out, {"subcommand": subcommand, "seed": cfg["seed"], "status": status})
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.seed, args.overrides, args.workers)


if __name__ == "__main__":
    sys.exit(main())
