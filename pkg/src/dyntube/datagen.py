"""Randomized rollout data for tube learning.

Every record is simulated from its own random stream, derived from
``(master_seed, env_id, record_id)``, so a dataset is bitwise reproducible
whatever the number of worker processes.  Records are simulated in stacked
batches with the same kernels as :func:`dyntube.sim.tracker_step`.
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .sim import DT, TrackerParams, TrackerState, _substep, planner_step, tracker_step

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC = "dyntube-dataset"


class DatasetError(Exception):
    pass


class DatasetFormatError(DatasetError):
    """Missing or corrupt metadata document."""


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetShapeError(DatasetError):
    pass


@dataclass
class ReferenceGenConfig:
    trajectory_length: int = 200
    v_bar: float = 0.2
    segment_len_range: tuple = (5, 30)
    hold_prob: float = 0.15
    turn_prob: float = 0.35
    stop_prob: float = 0.15
    smooth: int = 3
    seed: int = 0

    def validate(self, min_length: int = 1) -> "ReferenceGenConfig":
        probs = (self.hold_prob, self.turn_prob, self.stop_prob)
        if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ValueError("segment mode probabilities must lie in [0, 1] and sum to <= 1")
        lo, hi = self.segment_len_range
        if not 1 <= lo <= hi:
            raise ValueError("segment_len_range must satisfy 1 <= min <= max")
        if self.v_bar < 0:
            raise ValueError("v_bar must be >= 0")
        if self.trajectory_length < min_length:
            raise ValueError(f"trajectory_length must be >= {min_length}")
        return self


_RANDOMIZED = ("tau", "kp", "kd", "kf", "sigma")


def _default_ranges() -> dict:
    return {
        "tau": (0.18, 0.35),
        "kp": (3.5, 4.5),
        "kd": (1.7, 2.3),
        "kf": (0.8, 1.2),
        "sigma": (0.001, 0.003),
    }


@dataclass
class RandomizationConfig:
    """Uniform ranges for the randomized plant parameters.

    ``ranges`` holds absolute ``(lo, hi)`` bounds; parameters without an entry
    stay at ``nominal``.  The bias is drawn uniformly in ``[-bias_max, bias_max]^2``.
    """

    nominal: TrackerParams = field(default_factory=TrackerParams)
    ranges: dict = field(default_factory=_default_ranges)
    bias_max: float = 0.04

    @classmethod
    def fixed(cls, nominal: TrackerParams | None = None) -> "RandomizationConfig":
        nominal = nominal or TrackerParams()
        return cls(nominal=nominal, ranges={}, bias_max=0.0)

    def validate(self) -> "RandomizationConfig":
        for name, (lo, hi) in self.ranges.items():
            if name not in _RANDOMIZED:
                raise ValueError(f"cannot randomize {name!r}")
            nom = getattr(self.nominal, name)
            if not lo <= nom <= hi:
                raise ValueError(f"range for {name} {lo, hi} excludes nominal {nom}")
        if self.bias_max < 0:
            raise ValueError("bias_max must be >= 0")
        return self

    def to_dict(self) -> dict:
        return {"nominal": self.nominal.to_dict(),
                "ranges": {k: list(v) for k, v in self.ranges.items()},
                "bias_max": self.bias_max}

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationConfig":
        d = dict(d)
        nominal = TrackerParams.from_dict(d.pop("nominal")) if "nominal" in d else TrackerParams()
        ranges = {k: tuple(v) for k, v in {**_default_ranges(), **d.pop("ranges", {})}.items()}
        return cls(nominal=nominal, ranges=ranges, **d)


@dataclass
class DatagenConfig:
    reference: ReferenceGenConfig = field(default_factory=ReferenceGenConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)
    z0_box: tuple = (-1.0, 1.0)
    e0_max: float = 0.05
    dt: float = DT

    def to_dict(self) -> dict:
        return {"reference": asdict(self.reference),
                "randomization": self.randomization.to_dict(),
                "z0_box": list(self.z0_box), "e0_max": self.e0_max, "dt": self.dt}

    @classmethod
    def from_dict(cls, d: dict) -> "DatagenConfig":
        d = dict(d)
        ref = d.pop("reference", {})
        if "segment_len_range" in ref:
            ref = {**ref, "segment_len_range": tuple(ref["segment_len_range"])}
        rand = RandomizationConfig.from_dict(d.pop("randomization", {}))
        if "z0_box" in d:
            d["z0_box"] = tuple(d["z0_box"])
        return cls(reference=ReferenceGenConfig(**ref), randomization=rand, **d)


@dataclass
class RolloutRecord:
    z_traj: np.ndarray
    v_traj: np.ndarray
    proj_traj: np.ndarray
    env_id: int = 0
    seed: int = 0

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.z_traj - self.proj_traj, axis=-1)


@dataclass(eq=False)
class Dataset:
    """Stacked records: ``z``/``proj`` are (n, N+1, 2) and ``v`` is (n, N, 2)."""

    z: np.ndarray
    v: np.ndarray
    proj: np.ndarray
    env_id: np.ndarray
    seed: np.ndarray
    failed: np.ndarray
    meta: dict

    def __post_init__(self):
        n = len(self.z)
        if not (self.z.ndim == 3 and self.z.shape[2] == 2 and self.proj.shape == self.z.shape
                and self.v.shape == (n, self.z.shape[1] - 1, 2)
                and len(self.env_id) == len(self.seed) == len(self.failed) == n):
            raise DatasetShapeError("inconsistent record array shapes")

    def __len__(self) -> int:
        return len(self.z)

    @property
    def n_steps(self) -> int:
        return self.v.shape[1]

    @property
    def dt(self) -> float:
        return float(self.meta["dt"])

    def __getitem__(self, i: int) -> RolloutRecord:
        return RolloutRecord(self.z[i], self.v[i], self.proj[i],
                             int(self.env_id[i]), int(self.seed[i]))

    @property
    def records(self) -> list[RolloutRecord]:
        return [self[i] for i in range(len(self))]

    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.z - self.proj, axis=-1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.z[idx], self.v[idx], self.proj[idx], self.env_id[idx],
                       self.seed[idx], self.failed[idx], dict(self.meta))

    def ok(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.failed))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        arrays = ("z", "v", "proj", "env_id", "seed", "failed")
        return (all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays)
                and _canon(self.meta) == _canon(other.meta))


def _canon(meta: dict) -> str:
    return json.dumps(meta, sort_keys=True, default=list)


# ---------------------------------------------------------------- references

def _box_direction(rng: np.random.Generator, v_bar: float) -> np.ndarray:
    theta = rng.uniform(0.0, 2 * np.pi)
    u = np.array([np.cos(theta), np.sin(theta)])
    return u * (v_bar / np.max(np.abs(u)))


def _sample_segments(cfg: ReferenceGenConfig, rng: np.random.Generator):
    """Raw piecewise-constant segments as a list of (length, velocity)."""
    lo, hi = cfg.segment_len_range
    out, total, cur = [], 0, np.zeros(2)
    p_stop, p_hold, p_turn = cfg.stop_prob, cfg.hold_prob, cfg.turn_prob
    while total < cfg.trajectory_length:
        length = int(rng.integers(lo, hi + 1))
        mode = rng.random()
        direction = _box_direction(rng, cfg.v_bar)
        speed = rng.random()
        if mode < p_stop:
            cur = np.zeros(2)
        elif mode < p_stop + p_hold:
            pass
        elif mode < p_stop + p_hold + p_turn:
            cur = direction * speed
        else:
            # straight run hugging the input box, as saturated MPC plans do
            cur = direction * (0.9 + 0.1 * speed)
        out.append((length, cur.copy()))
        total += length
    return out


def sample_reference(cfg: ReferenceGenConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Shaped random planner inputs, shape (trajectory_length, 2)."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    v = np.concatenate([np.tile(vel, (n, 1)) for n, vel in _sample_segments(cfg, rng)])
    v = v[: cfg.trajectory_length]
    if cfg.smooth > 1:
        k = cfg.smooth
        padded = np.pad(v, ((k // 2, k - 1 - k // 2), (0, 0)), mode="edge")
        v = sum(padded[i: i + len(v)] for i in range(k)) / k
    return np.clip(v, -cfg.v_bar, cfg.v_bar)


def sample_env_params(cfg: RandomizationConfig, rng: np.random.Generator) -> TrackerParams:
    cfg.validate()
    updates = {}
    for name in _RANDOMIZED:
        lo, hi = cfg.ranges.get(name, (getattr(cfg.nominal, name),) * 2)
        updates[name] = float(rng.uniform(lo, hi))
    b = cfg.bias_max
    bias = rng.uniform(-b, b, size=2) if b > 0 else np.array(cfg.nominal.bias)
    updates["bias"] = tuple(float(x) for x in bias)
    return cfg.nominal.replace(**updates).validate()


# ---------------------------------------------------------------- rollouts

def rollout(params: TrackerParams, v_seq, z0, x0: TrackerState, dt: float = DT,
            rng: np.random.Generator | None = None) -> RolloutRecord:
    """Drive the plant along the planner trajectory generated by ``v_seq``."""
    params.validate(dt)
    v_seq = np.asarray(v_seq, dtype=float).reshape(-1, 2)
    z = np.empty((len(v_seq) + 1, 2))
    proj = np.empty_like(z)
    z[0] = z0
    proj[0] = x0.p
    x = x0.copy()
    for k, v in enumerate(v_seq):
        x = tracker_step(x, z[k], v, params, rng)
        z[k + 1] = planner_step(z[k], v, dt)
        proj[k + 1] = x.p
    return RolloutRecord(z, v_seq.copy(), proj)


def _stack_params(plist: list[TrackerParams]) -> dict:
    col = lambda name: np.array([getattr(p, name) for p in plist], dtype=float)[:, None]
    return {
        "kp": col("kp"), "kd": col("kd"), "kf": col("kf"), "cp": col("cp"),
        "cv": col("cv"), "cf": col("cf"), "ca": col("ca"), "sigma": col("sigma"),
        "lag": plist[0].dt_sim / col("tau"), "dt_sim": plist[0].dt_sim,
        "bias": np.array([p.bias for p in plist], dtype=float),
    }


def _simulate_batch(plist, v, z0, p0, noise, dt):
    """Batched twin of :func:`rollout`; arguments are stacked over records."""
    g = _stack_params(plist)
    n_rec, n_steps, _ = v.shape
    z = np.empty((n_rec, n_steps + 1, 2))
    proj = np.empty_like(z)
    z[:, 0], proj[:, 0] = z0, p0
    p, vel, act = p0.copy(), np.zeros_like(p0), np.zeros_like(p0)
    for k in range(n_steps):
        zk, vk = z[:, k], v[:, k]
        for i in range(noise.shape[2]):
            p, vel, act = _substep(p, vel, act, zk, vk, noise[:, k, i], g)
        z[:, k + 1] = zk + dt * vk
        proj[:, k + 1] = p
    return z, proj


def _record_seed(master_seed: int, env_id: int, rec_id: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(env_id, rec_id))
    return int(ss.generate_state(1, np.uint64)[0])


def _env_params(cfg: DatagenConfig, master_seed: int, env_id: int) -> TrackerParams:
    rng = np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(env_id,)))
    return sample_env_params(cfg.randomization, rng)


def initial_conditions(cfg: DatagenConfig, rng: np.random.Generator):
    lo, hi = cfg.z0_box
    z0 = rng.uniform(lo, hi, size=2)
    radius = cfg.e0_max * np.sqrt(rng.random())
    angle = rng.uniform(0.0, 2 * np.pi)
    x0 = TrackerState.at_rest(z0 + radius * np.array([np.cos(angle), np.sin(angle)]))
    return z0, x0


def _draw_record(cfg: DatagenConfig, params: TrackerParams, seed: int):
    rng = np.random.default_rng(seed)
    z0, x0 = initial_conditions(cfg, rng)
    v = sample_reference(cfg.reference, rng)
    noise = rng.standard_normal((len(v), params.substeps, 2))
    return z0, x0.p, v, noise


def _run_jobs(cfg: DatagenConfig, master_seed: int, jobs: list, batch: int = 256):
    outs = []
    for start in range(0, len(jobs), batch):
        chunk = jobs[start: start + batch]
        plist = [_env_params(cfg, master_seed, e) for e, _ in chunk]
        seeds = [_record_seed(master_seed, e, r) for e, r in chunk]
        draws = [_draw_record(cfg, p, s) for p, s in zip(plist, seeds)]
        z0, p0, v, noise = (np.stack(a) for a in zip(*draws))
        with np.errstate(all="ignore"):
            z, proj = _simulate_batch(plist, v, z0, p0, noise, cfg.dt)
        outs.append((z, v, proj, np.array(seeds, dtype=np.uint64)))
    return outs


def generate_dataset(n_envs: int, refs_per_env: int, cfg: DatagenConfig | None = None,
                     master_seed: int = 0, workers: int = 1) -> Dataset:
    """Simulate ``n_envs * refs_per_env`` records with per-environment parameters."""
    cfg = cfg or DatagenConfig()
    if n_envs < 1 or refs_per_env < 1:
        raise ValueError("n_envs and refs_per_env must be >= 1")
    cfg.reference.validate()
    cfg.randomization.validate()
    cfg.randomization.nominal.validate(cfg.dt)

    jobs = [(e, r) for e in range(n_envs) for r in range(refs_per_env)]
    t0 = time.perf_counter()
    if workers > 1 and len(jobs) > 1:
        parts = np.array_split(np.arange(len(jobs)), min(workers, len(jobs)))
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_run_jobs, cfg, master_seed, [jobs[i] for i in part])
                    for part in parts]
            outs = [o for f in futs for o in f.result()]
    else:
        outs = _run_jobs(cfg, master_seed, jobs)
    elapsed = time.perf_counter() - t0

    z, v, proj, seeds = (np.concatenate(a) for a in zip(*outs))
    failed = ~(np.isfinite(proj).all(axis=(1, 2)) & np.isfinite(z).all(axis=(1, 2)))
    for i in np.flatnonzero(failed):
        log.warning("record %d (env %d) produced non-finite states", i, jobs[i][0])
    meta = {
        "format_version": FORMAT_VERSION,
        "dt": cfg.dt,
        "v_bar": cfg.reference.v_bar,
        "n_steps": int(v.shape[1]),
        "master_seed": int(master_seed),
        "n_envs": int(n_envs),
        "refs_per_env": int(refs_per_env),
        "config": cfg.to_dict(),
    }
    ds = Dataset(z, v, proj, np.array([e for e, _ in jobs], dtype=np.int64), seeds,
                 failed, meta)
    substeps = len(jobs) * v.shape[1] * cfg.randomization.nominal.substeps
    ds.stats = {"elapsed_s": elapsed, "substeps_per_s": substeps / max(elapsed, 1e-9)}
    return ds


def split_dataset(d: Dataset, holdout_frac: float, seed: int = 0):
    """Record-level random partition into (train, holdout)."""
    if not 0 < holdout_frac < 1:
        raise ValueError("holdout_frac must lie in (0, 1)")
    n = len(d)
    n_hold = int(np.floor(holdout_frac * n + 0.5))
    if n >= 2:
        n_hold = min(max(n_hold, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    hold, train = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
    return d.subset(train), d.subset(hold)


def error_quantile(d: Dataset, q: float) -> float:
    """Empirical quantile of all per-step tracking errors (failed records skipped)."""
    return float(np.quantile(d.ok().errors().ravel(), q))


# ---------------------------------------------------------------- storage

_ARRAYS = {"z": 1, "v": 0, "proj": 1}  # extra steps relative to n_steps


def write_dataset(d: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, n_steps = len(d), d.n_steps
    meta = {
        "magic": MAGIC,
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "dtype": "<f8",
        "n_records": n,
        "n_steps": n_steps,
        "arrays": {name: [n, n_steps + extra, 2] for name, extra in _ARRAYS.items()},
        "index": {"dtype": "<i8", "columns": ["env_id", "seed", "failed"], "shape": [n, 3]},
        "meta": d.meta,
    }
    for name in _ARRAYS:
        getattr(d, name).astype("<f8").tofile(path / f"{name}.bin")
    index = np.stack([d.env_id.astype(np.int64), d.seed.astype(np.uint64).view(np.int64),
                      d.failed.astype(np.int64)], axis=1)
    index.astype("<i8").tofile(path / "index.bin")
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _read_array(file: Path, dtype: str, shape) -> np.ndarray:
    if not file.exists():
        raise DatasetTruncatedError(f"missing payload {file.name}")
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    size = file.stat().st_size
    if size < expected:
        raise DatasetTruncatedError(f"{file.name}: {size} bytes, expected {expected}")
    if size != expected:
        raise DatasetShapeError(f"{file.name}: {size} bytes disagrees with shape {shape}")
    return np.fromfile(file, dtype=dtype).reshape(shape)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetFormatError(f"no metadata document in {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetFormatError(f"unreadable metadata document in {path}: {exc}") from exc
    if not isinstance(meta, dict) or meta.get("magic") != MAGIC:
        raise DatasetFormatError(f"{path} is not a dyntube dataset")
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetVersionError(
            f"dataset format version {meta.get('format_version')}, expected {FORMAT_VERSION}")
    if meta.get("endianness") != "little" or meta.get("dtype") != "<f8":
        raise DatasetFormatError("unsupported payload encoding")
    n, n_steps = meta["n_records"], meta["n_steps"]
    arrays = {}
    for name, extra in _ARRAYS.items():
        shape = meta["arrays"][name]
        if list(shape) != [n, n_steps + extra, 2]:
            raise DatasetShapeError(f"recorded shape of {name} {shape} is inconsistent")
        arrays[name] = _read_array(path / f"{name}.bin", "<f8", shape).astype(float)
    index = _read_array(path / "index.bin", "<i8", (n, 3))
    return Dataset(arrays["z"], arrays["v"], arrays["proj"], index[:, 0].copy(),
                   index[:, 1].view(np.uint64).copy(), index[:, 2].astype(bool),
                   meta["meta"])
