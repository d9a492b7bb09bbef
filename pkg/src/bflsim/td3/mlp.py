"""Fully connected networks with hand-written reverse mode.

Parameters are a list of ``(W, b)`` pairs with ``W`` of shape ``(in, out)``.
Hidden layers use ReLU. Two output heads exist:

``linear``
    raw affine output (critics).
``actor``
    the output splits in two halves of ``n`` units; softmax over the first
    half (bandwidth shares), sigmoid over the second (power fractions).
    With a finite ``bound`` the pre-activations pass through
    ``bound * tanh(z / bound)`` first, so no share or fraction can reach 0.
    ``power_cap`` scales the sigmoid half into ``(0, power_cap)``.

All functions take a batch ``x`` of shape ``(B, in)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, softmax

HEADS = ("linear", "actor")


def init_mlp(sizes, rng: np.random.Generator, final_scale: float = 3e-3):
    """He-uniform hidden layers, small uniform output layer, zero biases."""
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        limit = final_scale if last else np.sqrt(6.0 / fan_in)
        params.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return params


def layer_sizes(params):
    return [params[0][0].shape[0]] + [W.shape[1] for W, _ in params]


def _check(params, x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params[0][0].shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input "
                         f"{params[0][0].shape[0]}")
    for (W0, _), (W1, b1) in zip(params[:-1], params[1:]):
        if W0.shape[1] != W1.shape[0] or b1.shape != (W1.shape[1],):
            raise ValueError("layer shapes do not chain")
    return x


def _bounded(z, bound):
    return z if bound is None else bound * np.tanh(z / bound)


def actor_head(z, bound=None, power_cap=1.0):
    """Squash pre-activations ``z`` of shape ``(B, 2n)``."""
    z = _bounded(z, bound)
    n = z.shape[-1] // 2
    return np.concatenate([softmax(z[..., :n], axis=-1), power_cap * expit(z[..., n:])], axis=-1)


def _forward(params, x):
    acts = [x]
    h = x
    for i, (W, b) in enumerate(params):
        h = h @ W + b
        if i < len(params) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mlp_preactivation(params, x):
    """Network output before any head squashing."""
    return _forward(params, _check(params, x))[-1]


def mlp_forward(params, x, head: str = "linear", pre_noise=None, bound=None, power_cap=1.0):
    """Forward pass; ``pre_noise`` is added to the output before the head."""
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    z = mlp_preactivation(params, x)
    if pre_noise is not None:
        z = z + pre_noise
    return actor_head(z, bound, power_cap) if head == "actor" else z


def _head_backward(z, upstream, bound, power_cap):
    if bound is not None:
        t = np.tanh(z / bound)
        return _head_backward(bound * t, upstream, None, power_cap) * (1.0 - t * t)
    n = z.shape[-1] // 2
    s = softmax(z[:, :n], axis=-1)
    g_s = upstream[:, :n]
    dz_s = s * (g_s - np.sum(g_s * s, axis=-1, keepdims=True))
    q = expit(z[:, n:])
    dz_q = upstream[:, n:] * power_cap * q * (1.0 - q)
    return np.concatenate([dz_s, dz_q], axis=-1)


def mlp_gradient(params, x, upstream, head: str = "linear", pre_noise=None, bound=None,
                 power_cap=1.0):
    """Vector-Jacobian product of :func:`mlp_forward`.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` mirrors
    ``params``; gradients are summed over the batch.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    x = _check(params, x)
    acts = _forward(params, x)
    g = np.asarray(upstream, dtype=float).reshape(acts[-1].shape)
    if head == "actor":
        z = acts[-1] if pre_noise is None else acts[-1] + pre_noise
        g = _head_backward(z, g, bound, power_cap)
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        g = g @ W.T
        if i > 0:
            g = g * (acts[i] > 0)
    return grads, g


def flatten(params) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])


def unflatten(flat, sizes):
    flat = np.asarray(flat, dtype=float)
    params, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        params.append((W.copy(), b.copy()))
    if pos != flat.size:
        raise ValueError("parameter vector length does not match layer sizes")
    return params


def copy_params(params):
    return [(W.copy(), b.copy()) for W, b in params]


class MLP:
    """Thin object wrapper holding parameters and a head."""

    def __init__(self, sizes, head="linear", rng=None, params=None, bound=None, power_cap=1.0):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        if bound is not None and not bound > 0:
            raise ValueError("bound must be positive")
        if not 0 < power_cap <= 1:
            raise ValueError("power_cap must lie in (0, 1]")
        self.head = head
        self.bound = bound
        self.power_cap = float(power_cap)
        self.params = params if params is not None else init_mlp(sizes, rng or np.random.default_rng(0))
        self.sizes = layer_sizes(self.params)

    def __call__(self, x, pre_noise=None):
        return mlp_forward(self.params, x, self.head, pre_noise, self.bound, self.power_cap)

    def preactivation(self, x):
        return mlp_preactivation(self.params, x)

    def gradient(self, x, upstream, pre_noise=None):
        return mlp_gradient(self.params, x, upstream, self.head, pre_noise, self.bound,
                            self.power_cap)

    def squash(self, z):
        return actor_head(z, self.bound, self.power_cap)

    def copy(self):
        return MLP(self.sizes, self.head, params=copy_params(self.params), bound=self.bound,
                   power_cap=self.power_cap)
