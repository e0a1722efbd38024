"""Minimal MLP kernels with explicit backpropagation, input encodings, Adam.

Hidden layers use leaky-relu (slope 0.01), the output layer is linear and may
be zero-initialized so a freshly built network outputs exactly 0 for any
input. No autodiff framework: forward passes return the cache the matching
backward pass consumes, and all gradients are exact reverse-mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.01


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    zero_init_last: bool = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.zero_init_last)


def init_mlp(sizes: list[int], rng: np.random.Generator, zero_init_last: bool = True) -> MlpParams:
    """He-initialized MLP with the given layer sizes (input first, output last)."""
    ws, bs = [], []
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, sizes[i + 1]))
        ws.append(w)
        bs.append(np.zeros(sizes[i + 1]))
    if zero_init_last:
        ws[-1][:] = 0.0
    return MlpParams(ws, bs, zero_init_last)


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Returns (output, cache). Input shape (B, D_in)."""
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ValueError(
            f"input dim {x.shape[-1]} does not match first layer {params.weights[0].shape[0]}"
        )
    acts = [x]
    h = x
    n = params.n_layers
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n - 1:
            h = np.where(h > 0, h, LEAKY_SLOPE * h)
        acts.append(h)
    return h, acts


def mlp_backward(params: MlpParams, cache: list[np.ndarray], gout: np.ndarray):
    """Returns ((weight grads, bias grads), input grad)."""
    n = params.n_layers
    gws = [None] * n
    gbs = [None] * n
    g = gout
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            post = cache[i + 1]  # post-activation output of layer i
            g = g * np.where(post > 0, 1.0, LEAKY_SLOPE)
        x_in = cache[i]
        gws[i] = x_in.T @ g
        gbs[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return (gws, gbs), g


def fourier_encode(x: np.ndarray, n_freq: int) -> np.ndarray:
    """Concatenate x with (sin, cos)(2^j pi x), j = 0..n_freq-1. x in [-1, 1]."""
    x = np.asarray(x, dtype=float)
    parts = [x]
    for j in range(n_freq):
        a = (2.0**j) * np.pi * x
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    return np.concatenate(parts, axis=-1)


def fourier_dim(d: int, n_freq: int) -> int:
    return d * (1 + 2 * n_freq)


@dataclass
class EncoderConfig:
    """Input encoding for the deformation networks."""

    n_frequencies: int = 6
    view_embed_dim: int = 16
    n_views: int = 1

    def __post_init__(self):
        if self.n_frequencies < 0:
            raise ValueError("n_frequencies must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    skipped: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_tensors(tensors: list[np.ndarray]) -> "AdamState":
        return AdamState(m=[np.zeros_like(t) for t in tensors], v=[np.zeros_like(t) for t in tensors])


def adam_step(state: AdamState, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> AdamState:
    """One bias-corrected Adam update, in place on `params`.

    Tensors with any non-finite gradient are skipped (their moments still
    decay) and counted in state.skipped.
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.isfinite(g).all():
            state.skipped += 1
            state.m[i] *= b1
            state.v[i] *= b2
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return state
