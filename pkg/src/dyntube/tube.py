"""Learned tracking-error tubes.

Index conventions for a prediction at time k with history H and horizon N:

* ``e_hist``  e_{k-H+1..k}   (H values, newest last; e_k is the current error)
* ``z``       z_{k-H..k+N}   (H history positions followed by the N+1 plan nodes)
* ``v``       v_{k-H..k+N-1} (H history inputs followed by the N plan inputs)

The returned tube ``w`` covers k..k+N; ``w[0]`` is pinned to the measured e_k.

The one-shot model maps ``[e_hist | z | v]`` to w_{k+1..k+N} in one call.  The
recursive model predicts w_{j+1} from the window ending at j of the spliced
error sequence (measured up to k, its own predictions afterwards), the
positions z_{j-H+1..j}, the inputs v_{j-H+1..j} and the offset (j-k)/N.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset
from .neural import (AdamState, Mlp, StaleTapeError, Tape, TrainConfig, adam_step,
                     clip_grad_norm, mlp_backward, mlp_forward, params_from_bytes,
                     params_to_bytes, quantile_loss_grad, round_to_f32, stop_gradient)
from .sim import HistoryBuffer

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MODES = ("one_shot", "recursive")


class NoCorrectIndicesError(ValueError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass
class TubeModelConfig:
    H: int = 25
    N: int = 25
    alpha: float = 0.9
    mode: str = "recursive"
    canonicalize: bool = True
    hidden: tuple = (64, 64)
    beta: float = 5.0

    def validate(self) -> "TubeModelConfig":
        if self.H < 1 or self.N < 1:
            raise ValueError("H and N must be >= 1")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        return self

    @property
    def n_features(self) -> int:
        H, N = self.H, self.N
        if self.mode == "one_shot":
            return H + 2 * (H + N + 1) + 2 * (H + N)
        return 5 * H + 1

    @property
    def n_outputs(self) -> int:
        return self.N if self.mode == "one_shot" else 1


@dataclass
class TubeModel:
    net: Mlp
    cfg: TubeModelConfig
    in_mean: np.ndarray
    in_std: np.ndarray
    out_scale: float = 1.0
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.net.n_in != self.cfg.n_features or self.net.sizes[-1] != self.cfg.n_outputs:
            raise ConfigMismatchError("network shape does not match the feature layout")

    @classmethod
    def untrained(cls, cfg: TubeModelConfig, seed: int = 0, zero: bool = False) -> "TubeModel":
        cfg.validate()
        net = Mlp([cfg.n_features, *cfg.hidden, cfg.n_outputs], beta=cfg.beta, seed=seed,
                  zero=zero)
        return cls(net, cfg, np.zeros(cfg.n_features), np.ones(cfg.n_features))


# ---------------------------------------------------------------- features

def _check_lengths(cfg, e_hist, z, v):
    H, N = cfg.H, cfg.N
    if e_hist.shape[-1] != H or z.shape[-2] != H + N + 1 or v.shape[-2] != H + N:
        raise ValueError(
            f"expected {H} errors, {H + N + 1} positions and {H + N} inputs; got "
            f"{e_hist.shape[-1]}, {z.shape[-2]}, {v.shape[-2]}")


def _stack(hist: HistoryBuffer, z_plan, v_plan):
    z_plan = np.asarray(z_plan, dtype=float).reshape(-1, 2)
    v_plan = np.asarray(v_plan, dtype=float).reshape(-1, 2)
    return hist.e_hist, np.vstack([hist.z_hist, z_plan]), np.vstack([hist.v_hist, v_plan])


def oneshot_features(E, Z, V, cfg: TubeModelConfig) -> np.ndarray:
    """Batched one-shot layout from E (B, H), Z (B, H+N+1, 2), V (B, H+N, 2)."""
    if cfg.canonicalize:
        Z = Z - Z[:, cfg.H: cfg.H + 1]
    B = len(E)
    return np.concatenate([E, Z.reshape(B, -1), V.reshape(B, -1)], axis=1)


def assemble_features_oneshot(hist: HistoryBuffer, z_plan, v_plan, cfg: TubeModelConfig):
    e, Z, V = _stack(hist, z_plan, v_plan)
    _check_lengths(cfg, e, Z, V)
    return oneshot_features(e[None], Z[None], V[None], cfg)[0]


def recursive_features(Et, Z, V, t: int, cfg: TubeModelConfig) -> np.ndarray:
    """Step-``t`` window; ``Et`` is the spliced error sequence starting at k-H+1."""
    H, B = cfg.H, len(Z)
    zw = Z[:, t + 1: t + H + 1]
    if cfg.canonicalize:
        zw = zw - zw[:, -1:]
    return np.concatenate([Et[:, t: t + H], zw.reshape(B, -1),
                           V[:, t + 1: t + H + 1].reshape(B, -1),
                           np.full((B, 1), t / cfg.N)], axis=1)


def recursive_static(Z, V, cfg: TubeModelConfig) -> np.ndarray:
    """Position/input/offset part of every recursive window: (B, N, 4H+1)."""
    H, N, B = cfg.H, cfg.N, len(Z)
    idx = np.arange(N)[:, None] + np.arange(1, H + 1)[None, :]
    zw, vw = Z[:, idx], V[:, idx]  # (B, N, H, 2)
    if cfg.canonicalize:
        zw = zw - zw[:, :, -1:]
    offs = np.broadcast_to((np.arange(N) / N)[None, :, None], (B, N, 1))
    return np.concatenate([zw.reshape(B, N, 2 * H), vw.reshape(B, N, 2 * H), offs], axis=2)


def _normalize(model: TubeModel, x):
    return (x - model.in_mean) / model.in_std


def _recursive_inputs(model: TubeModel, Z, V):
    H = model.cfg.H
    Xs = (recursive_static(Z, V, model.cfg) - model.in_mean[H:]) / model.in_std[H:]
    return Xs, model.in_mean[:H], model.in_std[:H]


# ---------------------------------------------------------------- prediction

def predict_batch(model: TubeModel, E, Z, V) -> np.ndarray:
    """Tubes (B, N+1) for stacked windows."""
    cfg = model.cfg
    N, H = cfg.N, cfg.H
    W = np.empty((len(E), N + 1))
    W[:, 0] = E[:, -1]
    if cfg.mode == "one_shot":
        W[:, 1:] = model.out_scale * model.net(_normalize(model, oneshot_features(E, Z, V, cfg)))
        return W
    Et = np.concatenate([E, np.empty((len(E), N))], axis=1)
    Xs, mu, sd = _recursive_inputs(model, Z, V)
    for t in range(N):
        x = np.concatenate([(Et[:, t: t + H] - mu) / sd, Xs[:, t]], axis=1)
        Et[:, H + t] = model.out_scale * model.net(x)[:, 0]
    W[:, 1:] = Et[:, H:]
    return W


def _single(model, hist, z_plan, v_plan, mode):
    if model.cfg.mode != mode:
        raise ConfigMismatchError(f"model is {model.cfg.mode}, not {mode}")
    if hist.H != model.cfg.H:
        raise ConfigMismatchError(f"history length {hist.H} != model H {model.cfg.H}")
    e, Z, V = _stack(hist, z_plan, v_plan)
    _check_lengths(model.cfg, e, Z, V)
    return predict_batch(model, e[None], Z[None], V[None])[0]


def predict_oneshot(model: TubeModel, hist: HistoryBuffer, z_plan, v_plan) -> np.ndarray:
    return _single(model, hist, z_plan, v_plan, "one_shot")


def predict_recursive(model: TubeModel, hist: HistoryBuffer, z_plan, v_plan) -> np.ndarray:
    return _single(model, hist, z_plan, v_plan, "recursive")


def predict(model: TubeModel, hist: HistoryBuffer, z_plan, v_plan) -> np.ndarray:
    return _single(model, hist, z_plan, v_plan, model.cfg.mode)


def tube_jacobians(model: TubeModel, hist: HistoryBuffer, z_plan, v_plan):
    """Tube and its exact Jacobians w.r.t. the plan.

    Returns ``(w, Jz, Jv)`` with ``Jz`` of shape (N+1, N+1, 2) and ``Jv`` of
    shape (N+1, N, 2): ``Jz[i, m, c] = d w_i / d z_plan[m, c]``.  The recursive
    model is differentiated through its own feedback.
    """
    cfg = model.cfg
    if hist.H != cfg.H:
        raise ConfigMismatchError(f"history length {hist.H} != model H {cfg.H}")
    H, N = cfg.H, cfg.N
    e, Z, V = _stack(hist, z_plan, v_plan)
    _check_lengths(cfg, e, Z, V)
    s = model.out_scale
    Jz = np.zeros((N + 1, N + 1, 2))
    Jv = np.zeros((N + 1, N, 2))
    w = np.empty(N + 1)
    w[0] = e[-1]

    if cfg.mode == "one_shot":
        x = _normalize(model, oneshot_features(e[None], Z[None], V[None], cfg))
        out, tape = mlp_forward(model.net, np.repeat(x, N, axis=0))
        w[1:] = s * out[0]
        _, gx = mlp_backward(model.net, tape, np.eye(N))
        gx = s * gx / model.in_std
        gz = gx[:, H: H + 2 * (H + N + 1)].reshape(N, H + N + 1, 2)
        if cfg.canonicalize:
            gz[:, H] -= gz.sum(axis=1)
        gv = gx[:, H + 2 * (H + N + 1):].reshape(N, H + N, 2)
        Jz[1:] = gz[:, H:]
        Jv[1:] = gv[:, H:]
        return w, Jz, Jv

    # Forward-mode accumulation of d(spliced error)/d(plan) through the recursion.
    Et = np.concatenate([e, np.empty(N)])[None]
    dEz = np.zeros((H + N, N + 1, 2))
    dEv = np.zeros((H + N, N, 2))
    for t in range(N):
        x = _normalize(model, recursive_features(Et, Z[None], V[None], t, cfg))
        out, tape = mlp_forward(model.net, x[0])
        Et[0, H + t] = s * out[0]
        _, g = mlp_backward(model.net, tape, np.ones(1))
        g = s * g / model.in_std
        gE, gZ, gV = g[:H], g[H: 3 * H].reshape(H, 2), g[3 * H: 5 * H].reshape(H, 2)
        dz = np.tensordot(gE, dEz[t: t + H], axes=1)
        dv = np.tensordot(gE, dEv[t: t + H], axes=1)
        # window position i is Z[t+1+i] (plan node t+1+i-H when >= H)
        lo = max(0, H - t - 1)
        nodes = np.arange(lo, H) + t + 1 - H
        dz[nodes] += gZ[lo:]
        if cfg.canonicalize:
            dz[t] -= gZ.sum(axis=0)
        dv[nodes] += gV[lo:]
        dEz[H + t], dEv[H + t] = dz, dv
    w[1:] = Et[0, H:]
    Jz[1:], Jv[1:] = dEz[H:], dEv[H:]
    return w, Jz, Jv


# ---------------------------------------------------------------- metrics

def correctness_rate(w, e) -> float:
    w, e = np.asarray(w, dtype=float), np.asarray(e, dtype=float)
    if w.shape != e.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {e.shape}")
    return float(np.mean(w >= e))


def mec(w, e) -> float:
    """Mean Error when Correct: mean slack ``w - e`` over covered indices."""
    w, e = np.asarray(w, dtype=float), np.asarray(e, dtype=float)
    if w.shape != e.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {e.shape}")
    ok = w >= e
    if not ok.any():
        raise NoCorrectIndicesError("no index where the tube covers the error")
    return float(np.mean((w - e)[ok]))


# ---------------------------------------------------------------- windows

class _Windows:
    """Window sampler over the valid (record, k) pairs of a dataset."""

    def __init__(self, ds: Dataset, H: int, N: int):
        ds = ds.ok()
        self.z, self.v, self.e = ds.z, ds.v, ds.errors()
        self.H, self.N = H, N
        n_steps = ds.n_steps
        self.k_lo, self.k_hi = H, n_steps - N
        if len(ds) == 0 or self.k_hi < self.k_lo:
            raise ValueError(
                f"dataset too short: need records of at least H+N={H + N} steps, "
                f"have {n_steps} steps over {len(ds)} usable records")
        self.n_k = self.k_hi - self.k_lo + 1
        self.count = len(ds) * self.n_k

    def pairs(self, flat):
        return flat // self.n_k, self.k_lo + flat % self.n_k

    def gather(self, rec, k):
        H, N = self.H, self.N
        r = rec[:, None]
        E = self.e[r, k[:, None] + np.arange(-H + 1, 1)]
        Z = self.z[r, k[:, None] + np.arange(-H, N + 1)]
        V = self.v[r, k[:, None] + np.arange(-H, N)]
        target = self.e[r, k[:, None] + np.arange(0, N + 1)]
        return E, Z, V, target

    def grid(self, stride: int):
        """Deterministic evaluation windows: every ``stride``-th k of every record."""
        ks = np.arange(self.k_lo, self.k_hi + 1, stride)
        rec = np.repeat(np.arange(len(self.z)), len(ks))
        return rec, np.tile(ks, len(self.z))


def _fit_normalization(model: TubeModel, win: _Windows, rng, n: int = 20_000):
    cfg = model.cfg
    flat = rng.choice(win.count, size=min(n, win.count), replace=False)
    E, Z, V, target = win.gather(*win.pairs(flat))
    if cfg.mode == "one_shot":
        X = oneshot_features(E, Z, V, cfg)
    else:
        # teacher-forced windows stand in for the spliced sequence
        Et = np.lib.stride_tricks.sliding_window_view(
            np.concatenate([E, target[:, 1:]], axis=1)[:, :-1], cfg.H, axis=1)
        X = np.concatenate([Et, recursive_static(Z, V, cfg)], axis=2).reshape(-1, cfg.n_features)
    model.in_mean = X.mean(axis=0)
    std = X.std(axis=0)
    model.in_std = np.where(std > 1e-8, std, 1.0)
    model.out_scale = float(max(np.mean(win.e), 1e-6))


def training_loss_and_grad(model: TubeModel, E, Z, V, target, alpha: float, delta: float):
    """Batch quantile loss and its parameter gradients.

    Errors and tubes enter the loss in units of ``model.out_scale``.  For the
    recursive model the fed-back predictions are constants of the backward
    pass (gradient stopped on the spliced error window).
    """
    cfg, net, s = model.cfg, model.net, model.out_scale
    H, N = cfg.H, cfg.N
    Wn = np.empty((len(E), N + 1))
    Wn[:, 0] = E[:, -1] / s
    if cfg.mode == "one_shot":
        out, tape = mlp_forward(net, _normalize(model, oneshot_features(E, Z, V, cfg)))
        Wn[:, 1:] = out
        loss, g = quantile_loss_grad(Wn, target / s, alpha, delta)
        grads, _ = mlp_backward(net, tape, g[:, 1:])
        return loss, grads
    Et = np.concatenate([E, np.empty((len(E), N))], axis=1)
    tapes = []
    mask = np.zeros(cfg.n_features, dtype=bool)
    mask[:H] = True
    Xs, mu, sd = _recursive_inputs(model, Z, V)
    for t in range(N):
        x = np.concatenate([(Et[:, t: t + H] - mu) / sd, Xs[:, t]], axis=1)
        out, tape = mlp_forward(net, x)
        tapes.append(stop_gradient(tape, mask))
        Et[:, H + t] = s * out[:, 0]
        Wn[:, t + 1] = out[:, 0]
    loss, g = quantile_loss_grad(Wn, target / s, alpha, delta)
    grads, _ = mlp_backward(net, Tape.concat(tapes), g[:, 1:].T.reshape(-1, 1))
    return loss, grads


def evaluate(model: TubeModel, ds: Dataset, stride: int = 5) -> dict:
    """Holdout metrics over predicted indices k+1..k+N of a window grid."""
    win = _Windows(ds, model.cfg.H, model.cfg.N)
    rec, k = win.grid(stride)
    W, T = [], []
    for i in range(0, len(rec), 4096):
        E, Z, V, target = win.gather(rec[i: i + 4096], k[i: i + 4096])
        W.append(predict_batch(model, E, Z, V)[:, 1:])
        T.append(target[:, 1:])
    W, T = np.concatenate(W), np.concatenate(T)
    per_window = np.mean(W >= T, axis=1)
    return {
        "correctness": correctness_rate(W, T),
        "mec": mec(W, T),
        "traj_correctness": float(np.mean([per_window[rec == r].mean() for r in np.unique(rec)])),
        "mean_w": float(W.mean()),
        "mean_e": float(T.mean()),
        "n_windows": int(len(W)),
    }


def train_tube_model(train: Dataset, cfg: TubeModelConfig, tcfg: TrainConfig,
                     holdout: Dataset | None = None, verbose: bool = False) -> TubeModel:
    """Fit a tube model with mini-batch Adam on uniformly sampled windows.

    The training curve (epoch, mean loss, optional holdout metrics) is kept in
    ``model.log``.  Parameters are rounded to float32 at the end so the model
    survives a checkpoint round trip bit for bit.
    """
    cfg.validate()
    tcfg.validate()
    if abs(cfg.alpha - tcfg.alpha) > 0:
        cfg = TubeModelConfig(**{**asdict(cfg), "alpha": tcfg.alpha})
    win = _Windows(train, cfg.H, cfg.N)
    rng = np.random.default_rng(tcfg.seed)
    model = TubeModel.untrained(cfg, seed=tcfg.seed)
    _fit_normalization(model, win, rng)
    state = AdamState.zeros_like(model.net.params)
    per_epoch = min(tcfg.windows_per_epoch or win.count, win.count)
    n_batches = max(1, per_epoch // tcfg.batch_size)
    total = n_batches * tcfg.epochs
    step = 0
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        flat = rng.choice(win.count, size=n_batches * tcfg.batch_size,
                          replace=win.count < n_batches * tcfg.batch_size)
        losses = []
        for b in range(n_batches):
            batch = flat[b * tcfg.batch_size: (b + 1) * tcfg.batch_size]
            E, Z, V, target = win.gather(*win.pairs(batch))
            loss, grads = training_loss_and_grad(model, E, Z, V, target, cfg.alpha,
                                                 tcfg.huber_delta)
            clip_grad_norm(grads, tcfg.grad_clip_norm)
            frac = step / max(total - 1, 1)
            lr = tcfg.learning_rate * (tcfg.lr_decay + (1 - tcfg.lr_decay)
                                       * 0.5 * (1 + np.cos(np.pi * frac)))
            adam_step(model.net.params, grads, state, lr)
            model.net.touch()
            losses.append(loss)
            step += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "seconds": time.perf_counter() - t0}
        if holdout is not None and (epoch == tcfg.epochs - 1 or verbose):
            row.update({f"holdout_{k}": v for k, v in evaluate(model, holdout).items()})
        model.log.append(row)
        if verbose:
            log.info("epoch %d %s", epoch, row)
    round_to_f32(model.net)
    return model


# ---------------------------------------------------------------- checkpoints

def save_model(model: TubeModel, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "endianness": "little",
        "dtype": "<f4",
        "sizes": model.net.sizes,
        "beta": model.net.beta,
        "config": {**asdict(model.cfg), "hidden": list(model.cfg.hidden)},
        "in_mean": model.in_mean.tolist(),
        "in_std": model.in_std.tolist(),
        "out_scale": model.out_scale,
    }
    (path / "params.bin").write_bytes(params_to_bytes(model.net))
    (path / "model.json").write_text(json.dumps(meta, indent=2))


def load_model(path) -> TubeModel:
    path = Path(path)
    meta = json.loads((path / "model.json").read_text())
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
    c = meta["config"]
    cfg = TubeModelConfig(**{**c, "hidden": tuple(c["hidden"])}).validate()
    net = Mlp(meta["sizes"], beta=meta["beta"])
    params_from_bytes(net, (path / "params.bin").read_bytes())
    return TubeModel(net, cfg, np.array(meta["in_mean"]), np.array(meta["in_std"]),
                     float(meta["out_scale"]))


def history_sweep(train: Dataset, holdout: Dataset, H_list, base: TubeModelConfig,
                  tcfg: TrainConfig, modes=MODES) -> list[dict]:
    """Train one model per (H, mode) with shared seeds and report holdout metrics."""
    rows = []
    for H in H_list:
        for mode in modes:
            cfg = TubeModelConfig(**{**asdict(base), "H": int(H), "mode": mode})
            model = train_tube_model(train, cfg, tcfg)
            m = evaluate(model, holdout)
            rows.append({"H": int(H), "mode": mode, "correctness": m["correctness"],
                         "mec": m["mec"], "traj_correctness": m["traj_correctness"]})
            log.info("sweep H=%d %s -> %s", H, mode, rows[-1])
    return rows
