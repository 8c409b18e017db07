"""Nominal and tube MPC for the single-integrator planner, and the closed loop.

Both problems are solved by sequential convex programming over the input
sequence ``v`` only: positions are an exact affine function of ``v`` so the
dynamics never appear as constraints.  Every iteration linearizes the
obstacle distances (and, for a learned tube, the network) around the current
iterate and solves a QP with

* hard rows: input box intersected with a trust region, world bounds,
* soft rows: linearized ``dist(z_j, c_i) - r_i - w_j >= 0`` with an L1 penalty.

A step is accepted only when the penalized merit does not increase;
otherwise the trust region is halved.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .qp import AdmmQp, QpNumericalError, QpProblem, QpSettings
from .sim import DT, HistoryBuffer, TrackerParams, TrackerState, tracker_step
from .tube import TubeModel, tube_jacobians

LOG_FORMAT_VERSION = 1


class ScenarioError(ValueError):
    pass


class SolverFailure(RuntimeError):
    """Numerical breakdown inside a solve (as opposed to an infeasible problem)."""


# ---------------------------------------------------------------- scenario

@dataclass
class Obstacle:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        self.radius = float(self.radius)


@dataclass
class Scenario:
    name: str
    obstacles: list
    start: np.ndarray
    goal: np.ndarray
    v_bar: float = 0.2
    goal_tolerance: float = 0.05
    bounds: np.ndarray = field(default_factory=lambda: np.array([[-2.0, 2.0], [-2.0, 2.0]]))

    def __post_init__(self):
        self.obstacles = [o if isinstance(o, Obstacle) else Obstacle(o[0], o[1]) for o in self.obstacles]
        self.start = np.asarray(self.start, dtype=float).reshape(2)
        self.goal = np.asarray(self.goal, dtype=float).reshape(2)
        self.bounds = np.asarray(self.bounds, dtype=float).reshape(2, 2)
        self.v_bar = float(self.v_bar)
        self.goal_tolerance = float(self.goal_tolerance)

    def validate(self) -> "Scenario":
        if not self.v_bar > 0:
            raise ScenarioError("v_bar must be > 0")
        if not self.goal_tolerance > 0:
            raise ScenarioError("goal_tolerance must be > 0")
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ScenarioError("world bounds must have lo < hi")
        for o in self.obstacles:
            if not o.radius > 0:
                raise ScenarioError(f"obstacle radius must be > 0, got {o.radius}")
        for name, p in (("start", self.start), ("goal", self.goal)):
            if not self.inside_bounds(p):
                raise ScenarioError(f"{name} {p.tolist()} lies outside the world bounds")
        if self.in_collision(self.start):
            raise ScenarioError("start lies inside an obstacle")
        return self

    def inside_bounds(self, p) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.bounds[:, 0]) and np.all(p <= self.bounds[:, 1]))

    def clearance(self, p) -> float:
        """Signed distance from ``p`` to the nearest obstacle surface."""
        if not self.obstacles:
            return float("inf")
        return float(min(np.linalg.norm(np.asarray(p) - o.center) - o.radius for o in self.obstacles))

    def in_collision(self, p) -> bool:
        return self.clearance(p) < 0

    @property
    def centers(self) -> np.ndarray:
        return np.array([o.center for o in self.obstacles]).reshape(-1, 2)

    @property
    def radii(self) -> np.ndarray:
        return np.array([o.radius for o in self.obstacles], dtype=float)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "obstacles": [{"x": float(o.center[0]), "y": float(o.center[1]), "radius": o.radius}
                          for o in self.obstacles],
            "start": self.start.tolist(), "goal": self.goal.tolist(),
            "v_bar": self.v_bar, "goal_tolerance": self.goal_tolerance,
            "bounds": self.bounds.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            obs = [Obstacle((o["x"], o["y"]), o["radius"]) for o in d.get("obstacles", [])]
            kw = {k: d[k] for k in ("v_bar", "goal_tolerance", "bounds") if k in d}
            return cls(d.get("name", "scenario"), obs, d["start"], d["goal"], **kw).validate()
        except (KeyError, TypeError) as exc:
            raise ScenarioError(f"malformed scenario: {exc}") from exc


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(yaml.safe_dump(s.to_dict(), sort_keys=False))


def load_scenario(path) -> Scenario:
    d = yaml.safe_load(Path(path).read_text())
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    return Scenario.from_dict(d)


# ---------------------------------------------------------------- config

@dataclass
class TubeSpec:
    kind: str = "none"  # none | fixed | dynamic
    w_bar: float = 0.0
    model: TubeModel | None = None

    @classmethod
    def none(cls) -> "TubeSpec":
        return cls("none")

    @classmethod
    def fixed(cls, w_bar: float) -> "TubeSpec":
        if w_bar < 0:
            raise ValueError("fixed tube radius must be >= 0")
        return cls("fixed", float(w_bar))

    @classmethod
    def dynamic(cls, model: TubeModel) -> "TubeSpec":
        return cls("dynamic", 0.0, model)

    def validate(self, N: int) -> "TubeSpec":
        if self.kind not in ("none", "fixed", "dynamic"):
            raise ValueError(f"unknown tube mode {self.kind!r}")
        if self.kind == "dynamic":
            if self.model is None:
                raise ValueError("dynamic tube needs a model")
            if self.model.cfg.N != N:
                raise ValueError(f"model horizon {self.model.cfg.N} != MPC horizon {N}")
        return self


@dataclass
class MpcConfig:
    N: int = 25
    dt: float = DT
    q: float = 10.0
    r: float = 0.1
    q_f: float = 100.0
    r_r: float = 20.0
    scp_max_iters: int = 30
    realtime_iters: int = 4
    qp_iters: int = 400
    trust_region_radius: float | None = None  # default v_bar / 2
    slack_penalty: float = 1e3
    convergence_tol: float = 1e-5
    feasibility_tol: float = 1e-4
    history: int = 25  # history length kept when the tube is not learned
    tube: TubeSpec = field(default_factory=TubeSpec)

    def validate(self) -> "MpcConfig":
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        for name in ("q", "r", "q_f", "r_r", "slack_penalty", "convergence_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.scp_max_iters < 1 or self.realtime_iters < 1 or self.qp_iters < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.trust_region_radius is not None and not self.trust_region_radius > 0:
            raise ValueError("trust_region_radius must be > 0")
        self.tube.validate(self.N)
        return self

    def with_tube(self, tube: TubeSpec) -> "MpcConfig":
        return replace(self, tube=tube)

    @property
    def H(self) -> int:
        return self.tube.model.cfg.H if self.tube.kind == "dynamic" else self.history


@dataclass
class MpcSolution:
    z: np.ndarray
    v: np.ndarray
    w: np.ndarray
    status: str  # converged | iter_capped | infeasible
    objective: float
    max_violation: dict
    iterations: int = 0
    merit_history: list = field(default_factory=list)
    solve_time: float = 0.0

    @property
    def ok(self) -> bool:
        return self.status != "infeasible"

    def shifted(self) -> np.ndarray:
        """Input guess for the next receding-horizon solve."""
        return np.vstack([self.v[1:], self.v[-1:]])


# ---------------------------------------------------------------- geometry

def tube_constraint_value(z_j, w_j, obstacle) -> float:
    """``|z - c|^2 - (w + r)^2``; the tube ball clears the disc iff >= 0."""
    if isinstance(obstacle, Obstacle):
        c, r = obstacle.center, obstacle.radius
    else:
        c, r = np.asarray(obstacle[0], dtype=float), float(obstacle[1])
    d = np.asarray(z_j, dtype=float) - c
    return float(d @ d - (w_j + r) ** 2)


def _signed_margin(z, w, centers, radii):
    """(len(z), n_obs) margins ``|z_j - c_i| - r_i - w_j`` and unit normals."""
    d = z[:, None, :] - centers[None, :, :]
    dist = np.linalg.norm(d, axis=2)
    nhat = d / np.maximum(dist, 1e-12)[:, :, None]
    return dist - radii[None, :] - w[:, None], nhat


def rollout_plan(z_init, v, dt: float) -> np.ndarray:
    """Positions z_0..z_N; accumulation order matches ``z + dt * v`` step by step."""
    v = np.asarray(v, dtype=float).reshape(-1, 2)
    return np.add.accumulate(np.vstack([np.asarray(z_init, dtype=float).reshape(1, 2), dt * v]), axis=0)


def _shift_matrix(N: int, dt: float) -> np.ndarray:
    """S with ``z.ravel() = tile(z_init) + S @ v.ravel()`` (node 0 rows are zero)."""
    L = np.tril(np.ones((N + 1, N)), -1)
    return np.kron(L, np.eye(2)) * dt


# ---------------------------------------------------------------- costs

@dataclass
class _Quadratic:
    P: np.ndarray
    c: np.ndarray
    const: float

    def __call__(self, v) -> float:
        v = np.ravel(v)
        return float(0.5 * v @ self.P @ v + self.c @ v + self.const)


def _state_weights(cfg: MpcConfig) -> np.ndarray:
    wq = np.full(cfg.N + 1, cfg.q)
    wq[-1] = cfg.q_f
    return np.repeat(wq, 2)


def nominal_cost(z_init, goal, cfg: MpcConfig) -> _Quadratic:
    """q sum_{j<N} |z_j - g|^2 + q_f |z_N - g|^2 + r sum |v_j|^2."""
    N = cfg.N
    S = _shift_matrix(N, cfg.dt)
    Q = _state_weights(cfg)
    d = np.tile(np.asarray(z_init, dtype=float) - np.asarray(goal, dtype=float), N + 1)
    P = 2 * (S.T @ (Q[:, None] * S) + cfg.r * np.eye(2 * N))
    return _Quadratic(P, 2 * S.T @ (Q * d), float(d @ (Q * d)))


def tracking_cost(z_init, z_ref, v_ref, cfg: MpcConfig) -> _Quadratic:
    """Deviation from a reference plan plus an input-rate penalty."""
    N = cfg.N
    S = _shift_matrix(N, cfg.dt)
    Q = _state_weights(cfg)
    d = np.tile(np.asarray(z_init, dtype=float), N + 1) - np.ravel(z_ref)
    vr = np.ravel(v_ref)
    D = np.kron(np.eye(N - 1, N, 1) - np.eye(N - 1, N), np.eye(2)) if N > 1 else np.zeros((0, 2))
    P = 2 * (S.T @ (Q[:, None] * S) + cfg.r * np.eye(2 * N) + cfg.r_r * D.T @ D)
    c = 2 * (S.T @ (Q * d) - cfg.r * vr)
    return _Quadratic(P, c, float(d @ (Q * d) + cfg.r * vr @ vr))


# ---------------------------------------------------------------- tube models

def linearize_tube_dynamics(model: TubeModel, hist: HistoryBuffer, z_plan, v_plan):
    """Tube at the plan with its exact Jacobians ``dw/dz_plan`` (N+1, N+1, 2)
    and ``dw/dv_plan`` (N+1, N, 2)."""
    return tube_jacobians(model, hist, z_plan, v_plan)


def _tube_fn(cfg: MpcConfig, hist: HistoryBuffer | None, S: np.ndarray):
    """Return ``f(z, v) -> (w, dw/dv)`` for the configured tube mode."""
    N = cfg.N
    spec = cfg.tube
    if spec.kind == "none":
        return lambda z, v: (np.zeros(N + 1), np.zeros((N + 1, 2 * N)))
    if spec.kind == "fixed":
        return lambda z, v: (np.full(N + 1, spec.w_bar), np.zeros((N + 1, 2 * N)))
    if hist is None:
        raise ValueError("a dynamic tube needs the error history")
    if hist.H != spec.model.cfg.H:
        raise ValueError(f"history length {hist.H} != model H {spec.model.cfg.H}")

    def f(z, v):
        w, Jz, Jv = tube_jacobians(spec.model, hist, z, v)
        return w, Jv.reshape(N + 1, 2 * N) + Jz.reshape(N + 1, 2 * (N + 1)) @ S
    return f


# ---------------------------------------------------------------- SCP

class _Scp:
    def __init__(self, scenario: Scenario, z_init, cfg: MpcConfig, cost: _Quadratic, tube_fn):
        self.sc, self.cfg, self.cost, self.tube_fn = scenario, cfg, cost, tube_fn
        self.z_init = np.asarray(z_init, dtype=float).reshape(2)
        self.S = _shift_matrix(cfg.N, cfg.dt)
        self.centers, self.radii = scenario.centers, scenario.radii
        self.qp = AdmmQp(QpSettings(max_iter=cfg.qp_iters))

    def evaluate(self, v):
        z = rollout_plan(self.z_init, v, self.cfg.dt)
        w, Jw = self.tube_fn(z, v)
        if self.centers.size:
            h, nhat = _signed_margin(z, w, self.centers, self.radii)
            h[0], nhat[0] = np.inf, 0.0  # node 0 is fixed by the initial condition
        else:
            h, nhat = np.zeros((len(z), 0)), np.zeros((len(z), 0, 2))
        J = self.cost(v)
        viol = float(np.maximum(0.0, -h).sum())
        return dict(v=v, z=z, w=w, Jw=Jw, h=h, nhat=nhat, J=J,
                    merit=J + self.cfg.slack_penalty * viol)

    def _qp(self, it, radius):
        cfg, N, vb = self.cfg, self.cfg.N, self.sc.v_bar
        v = np.ravel(it["v"])
        n = 2 * N
        q = self.cost.P @ v + self.cost.c
        lo = np.maximum(-vb - v, -radius)
        hi = np.minimum(vb - v, radius)
        S1 = self.S[2:]
        zf = np.ravel(it["z"][1:])
        blo = np.tile(self.sc.bounds[:, 0], N) - zf
        bhi = np.tile(self.sc.bounds[:, 1], N) - zf
        A = np.vstack([np.eye(n), S1])
        l = np.concatenate([lo, np.minimum(blo, 0.0)])
        u = np.concatenate([hi, np.maximum(bhi, 0.0)])
        G = h = None
        if self.centers.size:
            S3 = self.S.reshape(N + 1, 2, n)
            grad = np.einsum("jic,jcn->jin", it["nhat"], S3) - it["Jw"][:, None, :]
            # Keep only pairs the step could plausibly bring into contact.
            reach = (np.sqrt(2) * radius * cfg.dt * np.arange(N + 1)
                     + radius * np.abs(it["Jw"]).sum(axis=1) + 0.05)
            keep = it["h"] < reach[:, None]
            if keep.any():
                G = grad[keep]
                h = -it["h"][keep]
        prob = QpProblem(self.cost.P, q, A, l, u, G, h, mu=cfg.slack_penalty)
        try:
            return self.qp.solve(prob).x.reshape(N, 2)
        except QpNumericalError as exc:
            raise SolverFailure(str(exc)) from exc

    def run(self, v0, max_iters: int) -> MpcSolution:
        t0 = time.perf_counter()
        cfg, vb = self.cfg, self.sc.v_bar
        v = np.clip(np.asarray(v0, dtype=float).reshape(cfg.N, 2), -vb, vb)
        it = self.evaluate(v)
        merits = [it["merit"]]
        radius = cfg.trust_region_radius or vb / 2
        converged, n_it = False, 0
        for n_it in range(1, max_iters + 1):
            dv = self._qp(it, radius)
            if not np.all(np.isfinite(dv)):
                raise SolverFailure("QP returned a non-finite step")
            step = float(np.max(np.abs(dv)))
            if step <= cfg.convergence_tol:
                converged = True
                break
            cand = self.evaluate(np.clip(it["v"] + dv, -vb, vb))
            if cand["merit"] <= it["merit"] + 1e-12 * (1 + abs(it["merit"])):
                gain = it["merit"] - cand["merit"]
                it = cand
                merits.append(it["merit"])
                if gain <= 1e-9 * (1 + abs(it["merit"])):
                    converged = True
                    break
            else:
                radius *= 0.5
                if radius < 1e-7:
                    converged = True
                    break
        viol = float(np.max(np.maximum(0.0, -it["h"]), initial=0.0))
        if viol > cfg.feasibility_tol:
            status = "infeasible"
        else:
            status = "converged" if converged else "iter_capped"
        z = it["z"]
        bviol = float(max(0.0, np.max(self.sc.bounds[:, 0] - z[1:]), np.max(z[1:] - self.sc.bounds[:, 1])))
        return MpcSolution(
            z=z, v=it["v"], w=np.maximum(it["w"], 0.0), status=status, objective=it["J"],
            max_violation={"obstacle": viol, "bounds": bviol,
                           "input": float(max(0.0, np.max(np.abs(it["v"])) - vb))},
            iterations=n_it, merit_history=merits, solve_time=time.perf_counter() - t0)


def _check_scenario(scenario, z_init, cfg):
    cfg.validate()
    z_init = np.asarray(z_init, dtype=float).reshape(2)
    if not np.all(np.isfinite(z_init)):
        raise ValueError("z_init must be finite")
    return z_init


def solve_nominal(scenario: Scenario, z_init, cfg: MpcConfig, warm_start=None,
                  max_iters: int | None = None) -> MpcSolution:
    """Point-mass MPC toward the goal; obstacles constrain the plan nodes only."""
    if cfg.tube.kind != "none":
        cfg = cfg.with_tube(TubeSpec.none())
    z_init = _check_scenario(scenario, z_init, cfg)
    v0 = np.zeros((cfg.N, 2)) if warm_start is None else warm_start
    scp = _Scp(scenario, z_init, cfg, nominal_cost(z_init, scenario.goal, cfg),
               _tube_fn(cfg, None, None))
    return scp.run(v0, max_iters or cfg.scp_max_iters)


def solve_dynamic_tube(scenario: Scenario, z_init, hist: HistoryBuffer | None, cfg: MpcConfig,
                       warm_start=None, reference: MpcSolution | None = None,
                       max_iters: int | None = None) -> MpcSolution:
    """Tube MPC tracking a nominal reference; the tube mode comes from ``cfg.tube``.

    ``reference`` defaults to a fresh :func:`solve_nominal` solution and
    ``warm_start`` to the reference inputs.
    """
    z_init = _check_scenario(scenario, z_init, cfg)
    if reference is None:
        reference = solve_nominal(scenario, z_init, cfg)
    cost = tracking_cost(z_init, reference.z, reference.v, cfg)
    tube = _tube_fn(cfg, hist, _shift_matrix(cfg.N, cfg.dt))
    v0 = reference.v if warm_start is None else warm_start
    return _Scp(scenario, z_init, cfg, cost, tube).run(v0, max_iters or cfg.scp_max_iters)


# ---------------------------------------------------------------- closed loop

@dataclass
class StepRecord:
    k: int
    z: np.ndarray       # planner state before the step
    v: np.ndarray       # applied input
    proj: np.ndarray    # tracker position after the step
    e: float            # |z_{k+1} - proj|
    w: np.ndarray       # tube profile of the executed plan
    status: str
    solve_time: float


@dataclass
class ClosedLoopLog:
    scenario: str
    tube_mode: str
    steps: list = field(default_factory=list)
    outcome: str = "timeout"  # reached | timeout | collision
    stalled: bool = False
    warmup: int = 0
    z_final: np.ndarray | None = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def array(self, name) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.steps])

    def tube_validity(self) -> float:
        """Share of steps whose realised error stayed inside the node-1 tube."""
        if not self.steps:
            return float("nan")
        return float(np.mean([s.e <= s.w[1] for s in self.steps]))

    def planner_path(self) -> np.ndarray:
        if not self.steps:
            return np.zeros((0, 2))
        return np.vstack([self.array("z"), self.z_final[None]])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# format-version: {LOG_FORMAT_VERSION}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["k", "z_x", "z_y", "v_x", "v_y", "p_x", "p_y", "e", "w0", "w1",
                     "status", "solve_time"])
        for s in self.steps:
            wr.writerow([s.k, *map(repr, s.z.tolist()), *map(repr, s.v.tolist()),
                         *map(repr, s.proj.tolist()), repr(s.e), repr(float(s.w[0])),
                         repr(float(s.w[1])), s.status, repr(s.solve_time)])
        return buf.getvalue()


def _log_rows(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def recompute_errors(csv_text: str, dt: float = DT) -> np.ndarray:
    """Errors implied by the logged states: |z_k + dt v_k - p_k|."""
    rows = _log_rows(csv_text)
    z = np.array([[float(r["z_x"]), float(r["z_y"])] for r in rows])
    v = np.array([[float(r["v_x"]), float(r["v_y"])] for r in rows])
    p = np.array([[float(r["p_x"]), float(r["p_y"])] for r in rows])
    return np.linalg.norm(z + dt * v - p, axis=1)


def closed_loop_run(scenario: Scenario, cfg: MpcConfig, params: TrackerParams, seed: int,
                    max_steps: int = 400, stall_window: int = 50, stall_tol: float = 1e-3,
                    verbose: bool = False) -> ClosedLoopLog:
    """Receding-horizon loop against the surrogate tracker.

    The first tube solve may use ``cfg.scp_max_iters`` iterations, later ones
    ``cfg.realtime_iters``.  A run whose planner has moved less than
    ``stall_tol`` over the last ``stall_window`` steps is stopped early as a
    timeout with ``stalled=True``.
    """
    scenario.validate()
    cfg.validate()
    params.validate(cfg.dt)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    z = scenario.start.copy()
    x = TrackerState.at_rest(z)
    H = cfg.H
    hist = HistoryBuffer.filled(H, z, 0.0)
    # Warm-up at standstill so the history holds genuine measurements.
    for _ in range(H):
        x = tracker_step(x, z, np.zeros(2), params, rng)
        hist.push(z, np.zeros(2), float(np.linalg.norm(z - x.p)))
    log = ClosedLoopLog(scenario.name, cfg.tube.kind, warmup=H)
    nominal = tube = None
    v_prev = np.zeros(2)
    for k in range(max_steps):
        t0 = time.perf_counter()
        iters = cfg.scp_max_iters if tube is None else cfg.realtime_iters
        try:
            nominal = solve_nominal(scenario, z, cfg,
                                    warm_start=None if nominal is None else nominal.shifted(),
                                    max_iters=iters)
            tube = solve_dynamic_tube(scenario, z, hist, cfg,
                                      warm_start=None if tube is None else tube.shifted(),
                                      reference=nominal, max_iters=iters)
            v_apply, w_prof, status = tube.v[0].copy(), tube.w, tube.status
        except (SolverFailure, np.linalg.LinAlgError) as exc:
            if verbose:
                print(f"step {k}: solver failure ({exc}); holding last input")
            v_apply, status = v_prev.copy(), "failed"
            w_prof = np.full(cfg.N + 1, np.nan) if tube is None else tube.w
        dt_solve = time.perf_counter() - t0
        x = tracker_step(x, z, v_apply, params, rng)
        z_next = z + cfg.dt * v_apply
        e = float(np.linalg.norm(z_next - x.p))
        hist.push(z, v_apply, e)
        log.steps.append(StepRecord(k, z.copy(), v_apply, x.p.copy(), e, np.array(w_prof),
                                    status, dt_solve))
        z, v_prev = z_next, v_apply
        if scenario.in_collision(x.p):
            log.outcome = "collision"
            break
        if np.linalg.norm(z - scenario.goal) <= scenario.goal_tolerance:
            log.outcome = "reached"
            break
        if k + 1 >= stall_window:
            past = log.steps[-stall_window].z
            if np.linalg.norm(z - past) < stall_tol:
                log.stalled = True
                break
    log.z_final = z
    return log


def export_log(log: ClosedLoopLog, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "log.csv").write_text(log.to_csv())
    (out / "log_summary.json").write_text(json.dumps({
        "scenario": log.scenario, "tube_mode": log.tube_mode, "outcome": log.outcome,
        "stalled": log.stalled, "steps": log.n_steps, "warmup": log.warmup,
    }, indent=2))
