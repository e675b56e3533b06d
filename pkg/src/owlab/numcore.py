"""Numeric substrate: stable softmax kernels, a tiny MLP with hand-written
backprop, finite-difference checking, and the SGD schedule used everywhere.

Everything operates on float64 numpy arrays. The MLP is deliberately small
(tanh hidden layers, identity output) because every network in this project
is assembled from it and gradient-checked against central differences.
"""

import math
from dataclasses import dataclass, field

import numpy as np

# Additive logit mask: large enough that exp(MASK_LOGIT - max) underflows to
# exactly zero in float64, so masked classes carry no probability mass at all.
MASK_LOGIT = -1e10


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values."""


def as_array(x):
    """Coerce input to a float64 ndarray (no copy when already one)."""
    return np.asarray(x, dtype=np.float64)


def softmax(logits, axis=-1):
    """Numerically stable softmax along `axis` (max-shifted)."""
    z = as_array(logits)
    if z.size == 0:
        raise ValueError("softmax of an empty array is undefined")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def masked_softmax(logits, seen):
    """Softmax over the last axis restricted to the `seen` classes.

    Unseen positions get an additive mask of MASK_LOGIT before the softmax,
    which drives their probability to exactly zero in float64. `seen` is a
    boolean mask over the last axis; it must select at least one class.
    """
    z = as_array(logits).copy()
    seen = np.asarray(seen, dtype=bool)
    if seen.shape != z.shape[-1:]:
        raise ValueError(
            f"seen mask has shape {seen.shape}, expected {z.shape[-1:]}"
        )
    if not seen.any():
        raise ValueError("masked_softmax needs at least one seen class")
    z[..., ~seen] = MASK_LOGIT
    return softmax(z)


def softmax_vjp(probs, upstream):
    """Backprop through softmax: returns dL/dlogits given dL/dprobs.

    Uses the closed form p * (g - <p, g>) along the last axis, which avoids
    materializing the Jacobian.
    """
    p = as_array(probs)
    g = as_array(upstream)
    inner = np.sum(p * g, axis=-1, keepdims=True)
    return p * (g - inner)


def logsumexp(z, axis=-1):
    """Shifted log-sum-exp along `axis`."""
    z = as_array(z)
    m = np.max(z, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(z - m), axis=axis))
    return out


# ---------------------------------------------------------------------------
# A small fully-connected network with manual backprop.
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights and biases of a feed-forward net: tanh hidden, identity output.

    weights[i] has shape (fan_in, fan_out); biases[i] has shape (fan_out,).
    """

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        if not self.weights:
            raise ValueError("an MLP needs at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
        for i in range(len(self.weights) - 1):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ValueError(
                    f"layers {i}->{i + 1} disagree: "
                    f"{self.weights[i].shape[1]} vs {self.weights[i + 1].shape[0]}"
                )

    @property
    def in_dim(self):
        return self.weights[0].shape[0]

    @property
    def out_dim(self):
        return self.weights[-1].shape[1]

    @classmethod
    def create(cls, dims, rng):
        """Glorot-uniform init for the layer sizes in `dims` (len >= 2)."""
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases)


def mlp_forward(params, x):
    """Run the net; returns (output, cache) where cache feeds mlp_backward.

    Accepts a single vector or a batch of rows.
    """
    x = as_array(x)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != params.in_dim:
        raise ValueError(f"input dim {h.shape[-1]} != {params.in_dim}")
    activations = [h]  # post-activation values, layer by layer
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i < n_layers - 1:
            h = np.tanh(h)
        activations.append(h)
    cache = (activations, single)
    return (h[0] if single else h), cache


def mlp_backward(params, cache, upstream):
    """Backprop through a cached forward pass.

    Returns (grad_weights, grad_biases, grad_input) with the same shapes as
    the parameters / input. `upstream` is dL/doutput.
    """
    activations, single = cache
    g = as_array(upstream)
    if single:
        g = g[None, :]
    n_layers = len(params.weights)
    grad_w = [None] * n_layers
    grad_b = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        if i < n_layers - 1:
            # undo tanh: activations[i+1] already holds tanh(pre-activation)
            g = g * (1.0 - activations[i + 1] ** 2)
        grad_w[i] = activations[i].T @ g
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grad_w, grad_b, (g[0] if single else g)


def mlp_forward_backward(params, x, upstream=None):
    """Convenience wrapper: forward pass plus, optionally, a backward pass.

    With upstream=None returns (y, None, None); otherwise
    (y, (grad_weights, grad_biases), grad_input).
    """
    y, cache = mlp_forward(params, x)
    if upstream is None:
        return y, None, None
    gw, gb, gx = mlp_backward(params, cache, upstream)
    return y, (gw, gb), gx


# ---------------------------------------------------------------------------
# Finite differences.
# ---------------------------------------------------------------------------


def finite_diff_grad(fn, point, h=1e-5):
    """Central-difference gradient of a scalar function at `point`.

    fn maps an ndarray to a float; the returned array matches point's shape.
    """
    p = as_array(point).copy()
    grad = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(p)
        flat[i] = orig - h
        lo = fn(p)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-8):
    """Worst-case relative disagreement between two arrays.

    Per element: |a - n| / max(|a|, |n|, floor). The floor keeps
    near-zero entries from blowing up the ratio.
    """
    a = as_array(analytic)
    n = as_array(numeric)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {n.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


# ---------------------------------------------------------------------------
# Optimization.
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Momentum-SGD hyperparameters with a warmup-then-decay schedule."""

    learning_rate: float = 0.01
    final_rate: float = 0.0001
    warmup_iters: int = 150
    momentum: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.final_rate <= self.learning_rate:
            raise ValueError("final_rate must lie in (0, learning_rate]")
        if self.warmup_iters < 0:
            raise ValueError("warmup_iters must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def learning_rate_at(cfg, step, total_steps, warmup=None):
    """Learning rate for 0-based `step` out of `total_steps`.

    Linear warmup to cfg.learning_rate over the first `warmup` steps
    (cfg.warmup_iters unless overridden), then cosine decay that lands on
    cfg.final_rate at the last step. Warmup longer than the run is clipped.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    w = cfg.warmup_iters if warmup is None else warmup
    w = min(w, total_steps)
    if step < w:
        return cfg.learning_rate * (step + 1) / w
    span = total_steps - 1 - w
    if span <= 0:
        return cfg.learning_rate
    t = (step - w) / span
    return cfg.final_rate + 0.5 * (cfg.learning_rate - cfg.final_rate) * (
        1.0 + math.cos(math.pi * t)
    )


@dataclass
class MomentumSgd:
    """Heavy-ball SGD over a dict of named parameter arrays.

    Names listed in `skip` are left completely untouched by step(): no
    parameter update and no velocity update, so a frozen set stays bitwise
    identical for as long as it is skipped.
    """

    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params, grads, lr, skip=()):
        skip = frozenset(skip)
        for name, g in grads.items():
            if name in skip:
                continue
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}")
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(params[name])
            v = self.momentum * v - lr * as_array(g)
            self.velocity[name] = v
            params[name] = params[name] + v

    def reset(self):
        self.velocity.clear()
