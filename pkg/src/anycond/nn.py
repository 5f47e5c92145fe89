"""Minimal dense-network engine with hand-derived backprop.

Supports exactly the architecture family the package needs: stacks of dense
layers, pre-activation residual blocks (ReLU + inverted dropout inside the
branch), and a standalone ReLU. Everything is float64. Forward passes return
a trace that backward consumes; gradients with respect to both parameters and
the network input are produced, since one network's output feeds another's
input during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import ConfigError, TrainingError, UsageError

TRAIN = "train"
EVAL = "eval"


@dataclass
class Dense:
    w: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w.shape[0]


@dataclass
class Relu:
    pass


@dataclass
class ResidualBlock:
    """Pre-activation block: x + W2·drop(relu(W1·drop(relu(x)) + b1)) + b2."""

    first: Dense
    second: Dense


Layer = Union[Dense, Relu, ResidualBlock]


@dataclass
class NetworkParams:
    """Layer list plus the structure descriptor it was built from."""

    layers: list[Layer]
    input_dim: int
    hidden_dim: int
    n_blocks: int
    output_dim: int

    def dense_layers(self) -> list[Dense]:
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append(layer)
            elif isinstance(layer, ResidualBlock):
                out.extend((layer.first, layer.second))
        return out

    def check_finite(self) -> None:
        for d in self.dense_layers():
            if not (np.isfinite(d.w).all() and np.isfinite(d.b).all()):
                raise TrainingError("non-finite network parameter detected")

    def copy(self) -> "NetworkParams":
        return map_dense(self, lambda a: a.copy())


def map_dense(params: NetworkParams, fn) -> NetworkParams:
    """Structure-preserving map over every weight/bias array."""

    def md(d: Dense) -> Dense:
        return Dense(w=fn(d.w), b=fn(d.b))

    layers: list[Layer] = []
    for layer in params.layers:
        if isinstance(layer, Dense):
            layers.append(md(layer))
        elif isinstance(layer, ResidualBlock):
            layers.append(ResidualBlock(first=md(layer.first), second=md(layer.second)))
        else:
            layers.append(Relu())
    return NetworkParams(
        layers=layers,
        input_dim=params.input_dim,
        hidden_dim=params.hidden_dim,
        n_blocks=params.n_blocks,
        output_dim=params.output_dim,
    )


def zip_dense(a: NetworkParams, b: NetworkParams, fn) -> NetworkParams:
    out = map_dense(a, lambda x: x)
    for da, db in zip(out.dense_layers(), b.dense_layers()):
        da.w = fn(da.w, db.w)
        da.b = fn(da.b, db.b)
    return out


def flatten_params(params: NetworkParams) -> np.ndarray:
    return np.concatenate([np.concatenate([d.w.ravel(), d.b.ravel()]) for d in params.dense_layers()])


def unflatten_params(params: NetworkParams, vec: np.ndarray) -> NetworkParams:
    out = params.copy()
    pos = 0
    for d in out.dense_layers():
        n = d.w.size
        d.w = vec[pos : pos + n].reshape(d.w.shape).copy()
        pos += n
        n = d.b.size
        d.b = vec[pos : pos + n].copy()
        pos += n
    if pos != vec.size:
        raise ConfigError("parameter vector length mismatch")
    return out


def build_residual_mlp(
    input_dim: int,
    hidden_dim: int,
    n_blocks: int,
    output_dim: int,
    rng: np.random.Generator,
) -> NetworkParams:
    """He-initialized [Dense, Block*n, Relu, Dense] network, zero biases."""
    if min(input_dim, hidden_dim, output_dim) < 1 or n_blocks < 0:
        raise ConfigError("network dimensions must be positive")

    def he(out_d: int, in_d: int) -> Dense:
        w = rng.standard_normal((out_d, in_d)) * np.sqrt(2.0 / in_d)
        return Dense(w=w, b=np.zeros(out_d))

    layers: list[Layer] = [he(hidden_dim, input_dim)]
    for _ in range(n_blocks):
        layers.append(ResidualBlock(first=he(hidden_dim, hidden_dim), second=he(hidden_dim, hidden_dim)))
    layers.append(Relu())
    layers.append(he(output_dim, hidden_dim))
    return NetworkParams(
        layers=layers,
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        n_blocks=n_blocks,
        output_dim=output_dim,
    )


@dataclass
class ForwardTrace:
    """Per-layer caches required to backpropagate (and to replay bit-exactly)."""

    params_token: int
    mode: str
    dropout_rate: float
    x: np.ndarray
    caches: list = field(default_factory=list)
    output: np.ndarray | None = None


def _dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(np.float64) / keep


def forward(
    params: NetworkParams,
    x: np.ndarray,
    mode: str = EVAL,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    keep_trace: bool = True,
):
    """Run the network; returns (output, trace).

    ``x`` may be a single vector or an (n, input_dim) batch. Train mode uses
    inverted dropout inside residual blocks, so eval mode is deterministic and
    matches the train-mode expectation.
    """
    if mode not in (TRAIN, EVAL):
        raise ConfigError(f"unknown mode {mode!r}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigError("dropout_rate must be in [0, 1)")
    squeeze = np.ndim(x) == 1
    h = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if h.shape[1] != params.input_dim:
        raise ConfigError(f"input width {h.shape[1]} != network input dim {params.input_dim}")
    use_dropout = mode == TRAIN and dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ConfigError("train-mode dropout requires an rng")

    trace = ForwardTrace(params_token=id(params), mode=mode, dropout_rate=dropout_rate, x=h) if keep_trace else None
    for layer in params.layers:
        if isinstance(layer, Dense):
            cache = h
            h = h @ layer.w.T + layer.b
        elif isinstance(layer, Relu):
            cache = h > 0.0
            h = np.maximum(h, 0.0)
        else:  # ResidualBlock
            x_in = h
            a1 = np.maximum(x_in, 0.0)
            m1 = _dropout_mask(a1.shape, dropout_rate, rng) if use_dropout else None
            d1 = a1 * m1 if m1 is not None else a1
            z1 = d1 @ layer.first.w.T + layer.first.b
            a2 = np.maximum(z1, 0.0)
            m2 = _dropout_mask(a2.shape, dropout_rate, rng) if use_dropout else None
            d2 = a2 * m2 if m2 is not None else a2
            h = x_in + d2 @ layer.second.w.T + layer.second.b
            cache = (x_in > 0.0, m1, d1, z1 > 0.0, m2, d2)
        if trace is not None:
            trace.caches.append(cache)
    if trace is not None:
        trace.output = h
    out = h[0] if squeeze else h
    return out, trace


def replay(params: NetworkParams, trace: ForwardTrace) -> np.ndarray:
    """Recompute the forward output from the trace, reusing stored dropout masks."""
    _check_trace(params, trace)
    h = trace.x
    for layer, cache in zip(params.layers, trace.caches):
        if isinstance(layer, Dense):
            h = h @ layer.w.T + layer.b
        elif isinstance(layer, Relu):
            h = np.maximum(h, 0.0)
        else:
            _, m1, _, _, m2, _ = cache
            a1 = np.maximum(h, 0.0)
            d1 = a1 * m1 if m1 is not None else a1
            z1 = d1 @ layer.first.w.T + layer.first.b
            a2 = np.maximum(z1, 0.0)
            d2 = a2 * m2 if m2 is not None else a2
            h = h + d2 @ layer.second.w.T + layer.second.b
    return h


def _check_trace(params: NetworkParams, trace: ForwardTrace) -> None:
    if trace is None or trace.params_token != id(params) or len(trace.caches) != len(params.layers):
        raise UsageError("trace does not match these parameters (stale or foreign trace)")


def backward(params: NetworkParams, trace: ForwardTrace, output_gradient: np.ndarray):
    """Backpropagate; returns (param_gradients, input_gradient).

    ``param_gradients`` shares the structure of ``params``; ``input_gradient``
    has the shape of the traced input.
    """
    _check_trace(params, trace)
    g = np.atleast_2d(np.asarray(output_gradient, dtype=np.float64))
    if g.shape != trace.output.shape:
        raise UsageError(f"output_gradient shape {g.shape} != traced output {trace.output.shape}")

    grads = map_dense(params, np.zeros_like)
    for layer, glayer, cache in zip(
        reversed(params.layers), reversed(grads.layers), reversed(trace.caches)
    ):
        if isinstance(layer, Dense):
            x_in = cache
            glayer.w += g.T @ x_in
            glayer.b += g.sum(axis=0)
            g = g @ layer.w
        elif isinstance(layer, Relu):
            g = g * cache
        else:
            pre1, m1, d1, pre2, m2, d2 = cache
            gb = g  # gradient at block output; skip path passes g through
            glayer.second.w += gb.T @ d2
            glayer.second.b += gb.sum(axis=0)
            gd2 = gb @ layer.second.w
            if m2 is not None:
                gd2 = gd2 * m2
            gz1 = gd2 * pre2
            glayer.first.w += gz1.T @ d1
            glayer.first.b += gz1.sum(axis=0)
            gd1 = gz1 @ layer.first.w
            if m1 is not None:
                gd1 = gd1 * m1
            g = g + gd1 * pre1
    return grads, g


@dataclass
class AdamState:
    m: NetworkParams
    v: NetworkParams
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        return cls(
            m=map_dense(params, np.zeros_like),
            v=map_dense(params, np.zeros_like),
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def adam_step(
    params: NetworkParams,
    state: AdamState,
    grads: NetworkParams,
    learning_rate: float,
):
    """One Adam update with bias correction; returns (new_params, new_state)."""
    for d in grads.dense_layers():
        if not (np.isfinite(d.w).all() and np.isfinite(d.b).all()):
            raise TrainingError("non-finite gradient passed to adam_step")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_m = zip_dense(state.m, grads, lambda m, g: b1 * m + (1.0 - b1) * g)
    new_v = zip_dense(state.v, grads, lambda v, g: b2 * v + (1.0 - b2) * g * g)
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t

    def update(p, pair):
        m, v = pair
        return p - learning_rate * (m / c1) / (np.sqrt(v / c2) + eps)

    # zip over params with (m, v) pairs via two passes to keep helpers simple
    stepped = zip_dense(params, new_m, lambda p, m: np.stack([p, m]))
    new_params = zip_dense(stepped, new_v, lambda pm, v: update(pm[0], (pm[1], v)))
    new_state = AdamState(m=new_m, v=new_v, t=t, beta1=b1, beta2=b2, eps=eps)
    new_params.check_finite()
    return new_params, new_state


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_grad(x: np.ndarray) -> np.ndarray:
    return expit(x)
