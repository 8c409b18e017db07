"""Small numpy MLP with reverse-mode gradients, quantile losses and Adam."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class StaleTapeError(RuntimeError):
    """Backward pass requested with a tape recorded before a parameter update."""


def softplus(x, beta: float = 1.0):
    y = beta * np.asarray(x, dtype=float)
    out = np.abs(y)
    np.negative(out, out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    out += np.maximum(y, 0.0)
    out /= beta
    return out


def softplus_grad(x, beta: float = 1.0):
    return expit(beta * x)


class Mlp:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    Hidden layers and the output head both use a softplus with sharpness
    ``beta``, so outputs are strictly positive.  ``linear=True`` swaps every
    activation for the identity (used to check gradients against closed forms).
    """

    def __init__(self, sizes, beta: float = 5.0, seed: int = 0, linear: bool = False,
                 zero: bool = False):
        if beta <= 0:
            raise ValueError("beta must be > 0")
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        self.sizes = [int(s) for s in sizes]
        self.beta = float(beta)
        self.linear = linear
        self.version = 0
        rng = np.random.default_rng(seed)
        self.layers = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            if zero:
                W = np.zeros((n_in, n_out))
            else:
                bound = np.sqrt(6.0 / (n_in + n_out))
                W = rng.uniform(-bound, bound, size=(n_in, n_out))
            self.layers.append((W, np.zeros(n_out)))

    @property
    def params(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def set_params(self, flat_list) -> None:
        it = iter(flat_list)
        self.layers = [(np.array(next(it), dtype=float), np.array(next(it), dtype=float))
                       for _ in self.layers]
        self.touch()

    def touch(self) -> None:
        self.version += 1

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    def _act(self, x):
        return x if self.linear else softplus(x, self.beta)

    def _act_grad(self, x):
        return np.ones_like(x) if self.linear else softplus_grad(x, self.beta)

    def __call__(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=float)
        for W, b in self.layers:
            h = self._act(h @ W + b)
        return h


@dataclass
class Tape:
    inputs: list  # layer inputs, each (B, n_in_l)
    pre: list     # pre-activations, each (B, n_out_l)
    version: int
    squeeze: bool = False
    stop: np.ndarray | None = None  # boolean mask over input features

    @classmethod
    def concat(cls, tapes: list["Tape"]) -> "Tape":
        first = tapes[0]
        if any(t.version != first.version for t in tapes):
            raise StaleTapeError("cannot merge tapes from different parameter versions")
        return cls([np.concatenate(xs) for xs in zip(*(t.inputs for t in tapes))],
                   [np.concatenate(zs) for zs in zip(*(t.pre for t in tapes))],
                   first.version, False, first.stop)


def mlp_forward(net: Mlp, x) -> tuple[np.ndarray, Tape]:
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != net.n_in:
        raise ValueError(f"input has {h.shape[-1]} features, network expects {net.n_in}")
    inputs, pre = [], []
    for W, b in net.layers:
        inputs.append(h)
        z = h @ W + b
        pre.append(z)
        h = net._act(z)
    return (h[0] if squeeze else h), Tape(inputs, pre, net.version, squeeze)


def mlp_backward(net: Mlp, tape: Tape, out_grad):
    """Return ``(param_grads, input_grad)``; parameter gradients sum over the batch."""
    if tape.version != net.version:
        raise StaleTapeError("tape predates the current network parameters")
    g = np.asarray(out_grad, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    grads = [None] * (2 * len(net.layers))
    for li in range(len(net.layers) - 1, -1, -1):
        W, _ = net.layers[li]
        g = g * net._act_grad(tape.pre[li])
        grads[2 * li] = tape.inputs[li].T @ g
        grads[2 * li + 1] = g.sum(axis=0)
        g = g @ W.T
    if tape.stop is not None:
        g = np.where(tape.stop, 0.0, g)
    return grads, (g[0] if tape.squeeze else g)


def stop_gradient(x, mask=None):
    """Sever gradient flow.

    On a :class:`Var` returns a detached copy with the same value.  On a
    :class:`Tape` returns a tape whose backward pass yields zero input gradient
    on the features selected by ``mask`` (all features when omitted); parameter
    gradients are unaffected.
    """
    if isinstance(x, Var):
        return Var(x.value)
    if isinstance(x, Tape):
        n_in = x.inputs[0].shape[-1]
        m = np.ones(n_in, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        if x.stop is not None:
            m = m | x.stop
        return Tape(x.inputs, x.pre, x.version, x.squeeze, m)
    raise TypeError(f"cannot stop gradients through {type(x).__name__}")


class Var:
    """Scalar/array reverse-mode node supporting the few ops losses need."""

    def __init__(self, value, parents=()):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents  # tuples of (Var, local vector-Jacobian product)
        self.grad = None

    def __add__(self, other):
        other = other if isinstance(other, Var) else Var(other)
        return Var(self.value + other.value,
                   ((self, lambda g: g), (other, lambda g: g)))

    def __mul__(self, other):
        other = other if isinstance(other, Var) else Var(other)
        a, b = self.value, other.value
        return Var(a * b, ((self, lambda g: g * b), (other, lambda g: g * a)))

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        shape = self.value.shape
        return Var(self.value.sum(), ((self, lambda g: np.broadcast_to(g, shape)),))

    def backward(self):
        order, seen = [], set()

        def visit(v):
            if id(v) in seen:
                return
            seen.add(id(v))
            for p, _ in v.parents:
                visit(p)
            order.append(v)

        visit(self)
        for v in order:
            v.grad = np.zeros_like(v.value)
        self.grad = np.ones_like(self.value)
        for v in reversed(order):
            for p, vjp in v.parents:
                p.grad = p.grad + vjp(v.grad)


# ---------------------------------------------------------------- losses

def check_loss(w, e, alpha: float) -> np.ndarray:
    w, e = np.asarray(w, dtype=float), np.asarray(e, dtype=float)
    if w.shape != e.shape:
        raise ValueError(f"length mismatch: {w.shape} vs {e.shape}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    d = w - e
    return np.where(d >= 0, alpha * d, (alpha - 1.0) * d)


def huber(s, delta: float = 1.0):
    if delta <= 0:
        raise ValueError("delta must be > 0")
    s = np.asarray(s, dtype=float)
    out = np.where(s <= delta, 0.5 * s * s, delta * (s - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def _huber_grad(s, delta):
    return np.minimum(s, delta)


def quantile_loss(w, e, alpha: float, delta: float = 1.0) -> float:
    """Huber of the L1 norm of the check residuals of one prediction window.

    ``alpha`` is the target coverage P(e <= w): the residual weights
    over-prediction by ``1 - alpha`` and under-prediction by ``alpha``, whose
    minimizer is the alpha-quantile of ``e``.
    """
    return huber(check_loss(w, e, 1.0 - alpha).sum(axis=-1), delta)


def quantile_loss_grad(w, e, alpha: float, delta: float = 1.0):
    """Mean window loss over a (B, n) batch and its gradient w.r.t. ``w``."""
    w, e = np.atleast_2d(w), np.atleast_2d(e)
    s = check_loss(w, e, 1.0 - alpha).sum(axis=-1)
    slope = np.where(w - e >= 0, 1.0 - alpha, -alpha)
    B = len(w)
    loss = float(np.mean(huber(s, delta)))
    grad = _huber_grad(s, delta)[:, None] * slope / B
    return loss, grad


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: list, grads: list, state: AdamState, lr: float = 1e-3):
    """In-place Adam update of ``params``; returns ``(params, state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: list, max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


@dataclass
class TrainConfig:
    alpha: float = 0.9
    huber_delta: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    seed: int = 0
    grad_clip_norm: float = 10.0
    windows_per_epoch: int | None = 40_000
    lr_decay: float = 0.1

    def validate(self) -> "TrainConfig":
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.huber_delta <= 0 or self.learning_rate <= 0:
            raise ValueError("huber_delta and learning_rate must be > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        return self


# ---------------------------------------------------------------- checkpoint

def params_to_bytes(net: Mlp) -> bytes:
    return np.concatenate([p.ravel() for p in net.params]).astype("<f4").tobytes()


def params_from_bytes(net: Mlp, blob: bytes) -> None:
    flat = np.frombuffer(blob, dtype="<f4").astype(float)
    expected = sum(p.size for p in net.params)
    if flat.size != expected:
        raise ValueError(f"checkpoint holds {flat.size} parameters, network needs {expected}")
    out, i = [], 0
    for p in net.params:
        out.append(flat[i: i + p.size].reshape(p.shape))
        i += p.size
    net.set_params(out)


def round_to_f32(net: Mlp) -> None:
    net.set_params([p.astype(np.float32).astype(float) for p in net.params])
