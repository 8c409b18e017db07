"""Planning model, surrogate tracking plant and tracking error.

The planner is a 2D single integrator ``z+ = z + dt * v``.  The tracker is a
point mass with a first-order actuator lag, a constant disturbance
acceleration and per-substep velocity noise, driven by a clipped
proportional / damping / feed-forward law.

All array kernels (``_control``, ``_substep``) work on stacked batches so the
scalar API and the batched rollout engine in :mod:`dyntube.datagen` share the
exact same floating point path.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

DT = 0.1


def _vec(x) -> np.ndarray:
    return np.array(x, dtype=float).reshape(2)


@dataclass
class TrackerState:
    p: np.ndarray
    vel: np.ndarray = field(default_factory=lambda: np.zeros(2))
    act: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.p = _vec(self.p)
        self.vel = _vec(self.vel)
        self.act = _vec(self.act)

    @classmethod
    def at_rest(cls, p) -> "TrackerState":
        return cls(p=p)

    def copy(self) -> "TrackerState":
        return TrackerState(self.p.copy(), self.vel.copy(), self.act.copy())


@dataclass(frozen=True)
class TrackerParams:
    tau: float = 0.25
    kp: float = 4.0
    kd: float = 2.0
    kf: float = 1.0
    cp: float = 0.5
    cv: float = 1.0
    cf: float = 0.3
    ca: float = 1.5
    sigma: float = 0.002
    bias: tuple = (0.0, 0.0)
    dt_sim: float = 0.01
    substeps: int = 10

    def __post_init__(self):
        object.__setattr__(self, "bias", tuple(float(b) for b in self.bias))

    @property
    def dt(self) -> float:
        return self.substeps * self.dt_sim

    def validate(self, dt: float | None = None) -> "TrackerParams":
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        for name in ("kp", "kd", "kf", "cp", "cv", "cf", "ca", "sigma"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if len(self.bias) != 2 or not np.all(np.isfinite(self.bias)):
            raise ValueError("bias must be a finite 2-vector")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be > 0")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError("substeps must be an integer >= 1")
        if dt is not None and abs(self.substeps * self.dt_sim - dt) > 1e-12:
            raise ValueError(
                f"substeps * dt_sim = {self.substeps * self.dt_sim} does not match dt = {dt}"
            )
        return self

    def replace(self, **kw) -> "TrackerParams":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["bias"] = list(self.bias)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerParams":
        return cls(**d)


@dataclass
class HistoryBuffer:
    """Rolling window of the last ``H`` steps.

    ``e_hist`` holds e_{k-H+1..k} (the newest entry is the current measured
    error), ``z_hist`` and ``v_hist`` hold z_{k-H..k-1} and v_{k-H..k-1}.
    """

    e_hist: np.ndarray
    z_hist: np.ndarray
    v_hist: np.ndarray

    def __post_init__(self):
        self.e_hist = np.asarray(self.e_hist, dtype=float).reshape(-1)
        self.z_hist = np.asarray(self.z_hist, dtype=float).reshape(-1, 2)
        self.v_hist = np.asarray(self.v_hist, dtype=float).reshape(-1, 2)
        H = len(self.e_hist)
        if len(self.z_hist) != H or len(self.v_hist) != H:
            raise ValueError("history rings must share one length")
        if H < 1:
            raise ValueError("history length must be >= 1")
        if np.any(self.e_hist < 0):
            raise ValueError("tracking errors must be nonnegative")

    @property
    def H(self) -> int:
        return len(self.e_hist)

    @classmethod
    def filled(cls, H: int, z, e: float = 0.0) -> "HistoryBuffer":
        z = _vec(z)
        return cls(np.full(H, float(e)), np.tile(z, (H, 1)), np.zeros((H, 2)))

    def push(self, z, v, e_next: float) -> None:
        """Record the step z_k --v_k--> z_{k+1} and the error measured after it."""
        if e_next < 0:
            raise ValueError("tracking errors must be nonnegative")
        self.z_hist = np.vstack([self.z_hist[1:], _vec(z)])
        self.v_hist = np.vstack([self.v_hist[1:], _vec(v)])
        self.e_hist = np.append(self.e_hist[1:], float(e_next))

    def copy(self) -> "HistoryBuffer":
        return HistoryBuffer(self.e_hist.copy(), self.z_hist.copy(), self.v_hist.copy())


def planner_step(z, v, dt: float = DT) -> np.ndarray:
    if not dt > 0:
        raise ValueError("dt must be > 0")
    return np.asarray(z, dtype=float) + dt * np.asarray(v, dtype=float)


def clip_vec(u, c: float) -> np.ndarray:
    if c < 0:
        raise ValueError("clip radius must be >= 0")
    return np.clip(np.asarray(u, dtype=float), -c, c)


def _control(p, vel, z_ref, v_ref, kp, kd, kf, cp, cv, cf, ca):
    # Shared by the scalar API and the batched engine; gains may be arrays of
    # shape (B, 1) broadcasting against (B, 2) states.
    e_p = np.clip(z_ref - p, -cp, cp)
    e_v = np.clip(-vel, -cv, cv)
    e_f = np.clip(v_ref, -cf, cf)
    return np.clip(kp * e_p + kd * e_v + kf * e_f, -ca, ca)


def _substep(p, vel, act, z_ref, v_ref, noise, g):
    """One plant substep; ``g`` is a mapping of (possibly batched) parameters."""
    a_cmd = _control(p, vel, z_ref, v_ref, g["kp"], g["kd"], g["kf"],
                     g["cp"], g["cv"], g["cf"], g["ca"])
    act = act + g["lag"] * (a_cmd - act)
    vel = vel + g["dt_sim"] * (act + g["bias"]) + g["sigma"] * noise
    p = p + g["dt_sim"] * vel
    return p, vel, act


def _gains(params: TrackerParams) -> dict:
    return {
        "kp": params.kp, "kd": params.kd, "kf": params.kf,
        "cp": params.cp, "cv": params.cv, "cf": params.cf, "ca": params.ca,
        "lag": params.dt_sim / params.tau, "dt_sim": params.dt_sim,
        "bias": np.asarray(params.bias, dtype=float), "sigma": params.sigma,
    }


def raibert_control(x: TrackerState, z_ref, v_ref, params: TrackerParams) -> np.ndarray:
    return _control(x.p, x.vel, _vec(z_ref), _vec(v_ref), params.kp, params.kd,
                    params.kf, params.cp, params.cv, params.cf, params.ca)


def tracker_step(x: TrackerState, z_ref, v_ref, params: TrackerParams,
                 rng: np.random.Generator | None = None) -> TrackerState:
    """Advance the plant by one planner step (``params.substeps`` substeps).

    The reference is held for the whole step and the command is recomputed on
    every substep.  ``rng`` may be omitted only when ``params.sigma == 0``.
    """
    if params.sigma > 0:
        if rng is None:
            raise ValueError("a random stream is required when sigma > 0")
        noise = rng.standard_normal((params.substeps, 2))
    else:
        noise = np.zeros((params.substeps, 2))
    g = _gains(params)
    z_ref, v_ref = _vec(z_ref), _vec(v_ref)
    p, vel, act = x.p, x.vel, x.act
    for i in range(params.substeps):
        p, vel, act = _substep(p, vel, act, z_ref, v_ref, noise[i], g)
    return TrackerState(p, vel, act)


def project(x: TrackerState) -> np.ndarray:
    return x.p.copy()


def tracking_error(x: TrackerState, z) -> float:
    return float(np.linalg.norm(_vec(z) - x.p))
