"""Experiment orchestration behind the command line.

A config is a YAML mapping with optional sections ``datagen``, ``training``,
``sweep``, ``mpc``, ``scenario``, ``run`` and ``compare``; see ``demos/configs``
for complete examples.  Every command writes its tables under ``--out``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import scenarios
from .datagen import (DatagenConfig, Dataset, DatasetError, error_quantile, generate_dataset,
                      read_dataset, split_dataset, write_dataset)
from .neural import TrainConfig
from .planner import (ClosedLoopLog, MpcConfig, Scenario, ScenarioError, TubeSpec,
                      closed_loop_run, load_scenario)
from .sim import TrackerParams
from .tables import write_table
from .tube import TubeModelConfig, evaluate, history_sweep, load_model, save_model, train_tube_model

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_SOLVER = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class SolverDominatedRun(RuntimeError):
    """More than half of the closed-loop steps fell back to the previous input."""


# ---------------------------------------------------------------- config

_SECTIONS = ("datagen", "training", "sweep", "mpc", "scenario", "run", "compare")


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    datagen: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)
    scenario: dict = field(default_factory=dict)
    run: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(raw) - set(_SECTIONS) - {"seed", "out"}
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}; allowed: "
                              f"seed, out, {', '.join(_SECTIONS)}")
        for s in _SECTIONS:
            if raw.get(s) is not None and not isinstance(raw[s], dict):
                raise ConfigError(f"{path}: section {s!r} must be a mapping")
        return cls(**{k: v for k, v in raw.items() if v is not None}, base_dir=path.parent)

    def path(self, p) -> Path:
        """Resolve a path from the config relative to the config file."""
        p = Path(p)
        return p if p.is_absolute() else Path(os.path.normpath(self.base_dir / p))

    # -- typed views, each validated by its owner ---------------------------------

    def datagen_config(self) -> DatagenConfig:
        d = self.datagen.get("config", {})
        try:
            cfg = DatagenConfig.from_dict(d)
            cfg.reference.validate()
            cfg.randomization.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"datagen.config: {exc}") from exc
        return cfg

    def model_config(self) -> TubeModelConfig:
        d = dict(self.training.get("model", {}))
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        try:
            return TubeModelConfig(**d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training.model: {exc}") from exc

    def train_config(self, seed: int) -> TrainConfig:
        d = {"seed": seed, **self.training.get("train", {})}
        try:
            return TrainConfig(**d).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"training.train: {exc}") from exc

    def mpc_config(self) -> MpcConfig:
        try:
            return MpcConfig(**self.mpc).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"mpc: {exc}") from exc

    def tracker_params(self, section: dict) -> TrackerParams:
        try:
            return TrackerParams.from_dict(section.get("tracker", {})).validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"tracker: {exc}") from exc


def _out_dir(cfg: ExperimentConfig, out) -> Path:
    p = Path(out) if out is not None else cfg.path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset_path(cfg: ExperimentConfig, section: dict, out: Path) -> Path:
    return cfg.path(section["dataset"]) if "dataset" in section else out / "dataset"


def _load_dataset(path: Path) -> Dataset:
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} not found; run `dyntube datagen` first "
                                f"or point the config at an existing dataset")
    return read_dataset(path)


def dataset_hash(path) -> str:
    """SHA-256 over the files of a dataset directory in name order."""
    h = hashlib.sha256()
    for f in sorted(Path(path).iterdir()):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- datagen

def cmd_datagen(cfg: ExperimentConfig, seed: int | None = None, out=None) -> Path:
    seed = cfg.seed if seed is None else seed
    out = _out_dir(cfg, out)
    dg = cfg.datagen
    n_envs, refs = int(dg.get("n_envs", 16)), int(dg.get("refs_per_env", 4))
    ds = generate_dataset(n_envs, refs, cfg.datagen_config(), master_seed=seed,
                          workers=int(dg.get("workers", 1)))
    path = out / "dataset"
    write_dataset(ds, path)
    back = read_dataset(path)
    if not back == ds:
        raise DatasetError(f"round trip of {path} did not reproduce the dataset")
    errs = ds.ok().errors().ravel()
    qs = {f"q{int(q * 100)}": float(np.quantile(errs, q)) for q in (0.5, 0.9, 0.99)}
    row = {"records": len(ds), "failed": int(ds.failed.sum()), "n_steps": ds.n_steps,
           "v_bar": ds.meta["v_bar"], **qs, "sha256": dataset_hash(path)}
    write_table(out / "datagen_summary.csv", list(row), [row])
    print(f"datagen: {row['records']} records ({row['failed']} failed), {ds.n_steps} steps each")
    print(f"  error quantiles q50={qs['q50']:.6f} q90={qs['q90']:.6f} q99={qs['q99']:.6f}")
    print(f"  throughput {ds.stats['substeps_per_s']:.3e} substeps/s "
          f"({ds.stats['elapsed_s']:.2f} s)")
    print(f"  written to {path}")
    return path


# ---------------------------------------------------------------- train

def _split(cfg: ExperimentConfig, ds: Dataset, seed: int):
    return split_dataset(ds, float(cfg.training.get("holdout_frac", 0.2)), seed)


def cmd_train(cfg: ExperimentConfig, seed: int | None = None, out=None) -> Path:
    seed = cfg.seed if seed is None else seed
    out = _out_dir(cfg, out)
    ds = _load_dataset(_dataset_path(cfg, cfg.training, out))
    train, hold = _split(cfg, ds, seed)
    mcfg, tcfg = cfg.model_config(), cfg.train_config(seed)
    model = train_tube_model(train, mcfg, tcfg, holdout=hold)
    path = out / "model"
    save_model(model, path)
    curve = [{"epoch": r["epoch"], "loss": r["loss"]} for r in model.log]
    write_table(out / "training_curve.csv", ["epoch", "loss"], curve)
    m = evaluate(load_model(path), hold)
    row = {"H": mcfg.H, "N": mcfg.N, "mode": mcfg.mode, "alpha": mcfg.alpha, **m}
    write_table(out / "train_summary.csv", list(row), [row])
    print(f"train: {mcfg.mode} H={mcfg.H} N={mcfg.N} alpha={mcfg.alpha}")
    print(f"  holdout correctness {m['correctness']:.4f}  MEC {m['mec']:.6f}  "
          f"({m['n_windows']} windows)")
    print(f"  checkpoint {path}")
    return path


# ---------------------------------------------------------------- sweep

def cmd_sweep(cfg: ExperimentConfig, seed: int | None = None, out=None) -> Path:
    seed = cfg.seed if seed is None else seed
    out = _out_dir(cfg, out)
    sw = cfg.sweep
    ds = _load_dataset(_dataset_path(cfg, sw if "dataset" in sw else cfg.training, out))
    train, hold = _split(cfg, ds, seed)
    H_list = [int(h) for h in sw.get("H_list", [1, 5, 10, 25])]
    modes = tuple(sw.get("modes", ["recursive"]))
    if not H_list or any(h < 1 for h in H_list):
        raise ConfigError("sweep.H_list must hold integers >= 1")
    rows = history_sweep(train, hold, H_list, cfg.model_config(), cfg.train_config(seed), modes)
    path = write_table(out / "sweep.csv", ["H", "mode", "correctness", "mec", "traj_correctness"],
                       rows)
    for r in rows:
        print(f"sweep: H={r['H']:3d} {r['mode']:9s} correctness={r['correctness']:.4f} "
              f"MEC={r['mec']:.6f}")
    return path


# ---------------------------------------------------------------- closed loop

@dataclass
class RunSummary:
    scenario: str
    mode: str
    tube: str
    seed: int
    outcome: str
    stalled: bool
    steps: int
    steps_to_goal: int  # -1 when the goal was not reached
    min_clearance: float
    tube_correctness: float
    infeasible_steps: int
    failed_steps: int
    mean_speed: float
    mean_solve_ms: float
    p95_solve_ms: float
    max_solve_ms: float

    TIMING = ("mean_solve_ms", "p95_solve_ms", "max_solve_ms")

    @classmethod
    def from_log(cls, lg: ClosedLoopLog, scenario: Scenario, mode: str, seed: int) -> "RunSummary":
        st = lg.array("status") if lg.steps else np.array([])
        times = lg.array("solve_time") * 1e3 if lg.steps else np.zeros(1)
        proj = lg.array("proj") if lg.steps else scenario.start[None]
        return cls(
            scenario=scenario.name, mode=mode, tube=lg.tube_mode, seed=int(seed),
            outcome=lg.outcome, stalled=bool(lg.stalled), steps=lg.n_steps,
            steps_to_goal=lg.n_steps if lg.outcome == "reached" else -1,
            min_clearance=min(_clearance(scenario, p) for p in proj),
            tube_correctness=lg.tube_validity() if lg.steps else 1.0,
            infeasible_steps=int(np.sum(st == "infeasible")),
            failed_steps=int(np.sum(st == "failed")),
            mean_speed=float(np.linalg.norm(lg.array("v"), axis=1).mean()) if lg.steps else 0.0,
            mean_solve_ms=float(times.mean()), p95_solve_ms=float(np.percentile(times, 95)),
            max_solve_ms=float(times.max()))

    def row(self, timing: bool = False) -> dict:
        d = asdict(self)
        if not timing:
            for k in self.TIMING:
                d.pop(k)
        return d

    @classmethod
    def columns(cls, timing: bool = False) -> list[str]:
        names = list(cls.__dataclass_fields__)
        return names if timing else [n for n in names if n not in cls.TIMING]


def _clearance(sc: Scenario, p) -> float:
    """Distance to the nearest obstacle surface or world wall (always finite)."""
    walls = np.concatenate([p - sc.bounds[:, 0], sc.bounds[:, 1] - p])
    return float(min(sc.clearance(p), walls.min()))


def resolve_scenario(cfg: ExperimentConfig, section: dict | None = None) -> Scenario:
    sc = dict(section if section is not None else cfg.scenario)
    try:
        if "file" in sc:
            return load_scenario(cfg.path(sc["file"]))
        name = sc.get("builtin", "narrow_gap")
        args = dict(sc.get("args", {}))
        if name == "narrow_gap" and "gap" not in args and "gap_scale" in sc:
            ref = sc.get("gap_reference", 0.0345)
            w_ref = _w_bar_value(cfg, ref)
            args["gap"] = scenarios.gap_width(w_ref, float(sc["gap_scale"]))
        return scenarios.builtin(name, **args)
    except TypeError as exc:
        raise ConfigError(f"scenario: {exc}") from exc


def _w_bar_value(cfg: ExperimentConfig, spec) -> float:
    """A number, or the path of a dataset whose 90% error quantile is used."""
    if isinstance(spec, (int, float)):
        return float(spec)
    if isinstance(spec, dict):
        return error_quantile(_load_dataset(cfg.path(spec["dataset"])), float(spec.get("q", 0.9)))
    return error_quantile(_load_dataset(cfg.path(spec)), 0.9)


def _mode_setup(cfg: ExperimentConfig, mode: dict, base: MpcConfig, scenario: Scenario):
    kind = mode.get("tube", "dynamic")
    if kind == "dynamic":
        if "model" not in mode:
            raise ConfigError("a dynamic tube mode needs `model: <checkpoint dir>`")
        mpath = cfg.path(mode["model"])
        if not mpath.exists():
            raise FileNotFoundError(f"model checkpoint {mpath} not found; run `dyntube train`")
        tube = TubeSpec.dynamic(load_model(mpath))
    elif kind == "fixed":
        if "w_bar" not in mode:
            raise ConfigError("a fixed tube mode needs `w_bar: <number | dataset path>`")
        tube = TubeSpec.fixed(_w_bar_value(cfg, mode["w_bar"]))
    elif kind == "none":
        tube = TubeSpec.none()
    else:
        raise ConfigError(f"unknown tube mode {kind!r}")
    sc = scenario
    if "v_bar" in mode:
        sc = Scenario(scenario.name, scenario.obstacles, scenario.start, scenario.goal,
                      float(mode["v_bar"]), scenario.goal_tolerance, scenario.bounds).validate()
    return base.with_tube(tube).validate(), sc


def _run_one(args):
    sc, mpc, params, seed, max_steps, mode = args
    lg = closed_loop_run(sc, mpc, params, seed, max_steps)
    return lg, RunSummary.from_log(lg, sc, mode, seed)


def _run_many(jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_run_one, jobs))
    return [_run_one(j) for j in jobs]


def _write_series(lg: ClosedLoopLog, out: Path) -> None:
    """Plot-ready series: executed path, tracked path, speeds and tube radii."""
    if not lg.steps:
        return
    rows = [{"k": s.k, "z_x": float(s.z[0]), "z_y": float(s.z[1]), "p_x": float(s.proj[0]),
             "p_y": float(s.proj[1]), "speed": float(np.linalg.norm(s.v)), "e": s.e,
             "w1": float(s.w[1])} for s in lg.steps]
    write_table(out / "series_path.csv", list(rows[0]), rows)
    tube_rows = [{"k": s.k, "node": j, "w": float(w)} for s in lg.steps for j, w in enumerate(s.w)]
    write_table(out / "series_tube.csv", ["k", "node", "w"], tube_rows)


def _check_solver(summaries) -> None:
    for s in summaries:
        if s.steps and s.failed_steps > s.steps / 2:
            raise SolverDominatedRun(f"{s.mode} seed {s.seed}: {s.failed_steps}/{s.steps} "
                                     f"steps fell back to the previous input")


def cmd_run(cfg: ExperimentConfig, seed: int | None = None, out=None) -> RunSummary:
    seed = cfg.seed if seed is None else seed
    out = _out_dir(cfg, out)
    run = cfg.run
    scenario = resolve_scenario(cfg, run.get("scenario"))
    mode = run.get("mode", {"tube": "dynamic", "model": "model"})
    mpc, sc = _mode_setup(cfg, mode, cfg.mpc_config(), scenario)
    params = cfg.tracker_params(run)
    lg, summary = _run_one((sc, mpc, params, seed, int(run.get("max_steps", 400)),
                            mode.get("name", mode.get("tube", "dynamic"))))
    (out / "log.csv").write_text(lg.to_csv())
    write_table(out / "summary.csv", RunSummary.columns(), [summary.row()])
    write_table(out / "timing.csv", ["mean_solve_ms", "p95_solve_ms", "max_solve_ms"],
                [{k: getattr(summary, k) for k in RunSummary.TIMING}])
    _write_series(lg, out)
    print(f"run: {sc.name} [{summary.mode}] outcome={summary.outcome}"
          f"{' (stalled)' if summary.stalled else ''} steps={summary.steps} "
          f"infeasible_steps={summary.infeasible_steps} min_clearance={summary.min_clearance:.4f} "
          f"tube_correctness={summary.tube_correctness:.3f}")
    print(f"  solve time mean {summary.mean_solve_ms:.1f} ms, p95 {summary.p95_solve_ms:.1f} ms")
    _check_solver([summary])
    return summary


def cmd_compare(cfg: ExperimentConfig, seed: int | None = None, out=None) -> list[RunSummary]:
    seed = cfg.seed if seed is None else seed
    out = _out_dir(cfg, out)
    cmp = cfg.compare
    scenario = resolve_scenario(cfg, cmp.get("scenario"))
    modes = cmp.get("modes")
    if not modes:
        raise ConfigError("compare.modes must list at least one tube mode")
    n_seeds = int(cmp.get("n_seeds", 1))
    seeds = [int(s) for s in cmp.get("seeds", [seed + i for i in range(n_seeds)])]
    params = cfg.tracker_params(cmp)
    base = cfg.mpc_config()
    jobs = []
    for i, m in enumerate(modes):
        mpc, sc = _mode_setup(cfg, m, base, scenario)
        name = m.get("name", f"{m.get('tube', 'dynamic')}_{i}")
        max_steps = int(m.get("max_steps", cmp.get("max_steps", 400)))
        jobs += [(sc, mpc, params, s, max_steps, name) for s in seeds]
    results = _run_many(jobs, int(cmp.get("workers", 1)))
    summaries = [r[1] for r in results]
    write_table(out / "compare.csv", RunSummary.columns(), [s.row() for s in summaries])
    write_table(out / "compare_timing.csv", ["mode", "seed", *RunSummary.TIMING],
                [{"mode": s.mode, "seed": s.seed, **{k: getattr(s, k) for k in RunSummary.TIMING}}
                 for s in summaries])
    agg = aggregate(summaries)
    write_table(out / "compare_aggregate.csv", list(agg[0]), agg)
    for a in agg:
        print(f"compare: {a['mode']:12s} reached {a['reached']}/{a['runs']} "
              f"mean steps-to-goal {a['mean_steps_to_goal']:.1f} collisions {a['collisions']}")
    for a, b, r in ratios(agg):
        print(f"  steps-to-goal ratio {a}/{b} = {r:.3f}")
    _check_solver(summaries)
    return summaries


def aggregate(summaries) -> list[dict]:
    rows = []
    for mode in dict.fromkeys(s.mode for s in summaries):
        ss = [s for s in summaries if s.mode == mode]
        reached = [s.steps_to_goal for s in ss if s.outcome == "reached"]
        rows.append({"mode": mode, "runs": len(ss), "reached": len(reached),
                     "collisions": sum(s.outcome == "collision" for s in ss),
                     "stalled": sum(s.stalled for s in ss),
                     "mean_steps_to_goal": float(np.mean(reached)) if reached else math.inf,
                     "min_clearance": min(s.min_clearance for s in ss),
                     "tube_correctness": float(np.mean([s.tube_correctness for s in ss]))})
    return rows


def ratios(agg) -> list[tuple]:
    """Completion-step ratios between every pair of modes that reached the goal."""
    done = [a for a in agg if a["reached"]]
    return [(a["mode"], b["mode"], a["mean_steps_to_goal"] / b["mean_steps_to_goal"])
            for a in done for b in done if a is not b]


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "sweep": cmd_sweep,
            "run": cmd_run, "compare": cmd_compare}
