"""Dense MLP forward/backward, Adam, and finite-difference gradient checking.

Matrices are float64 numpy arrays with samples in columns: an input batch has
shape ``(in_dim, batch)``. Parameters and gradients share one nested layout,
a tuple of ``(weight, bias)`` pairs with ``weight`` of shape ``(out, in)`` and
``bias`` of shape ``(out, 1)``, so optimizers and checkers can walk either one
without knowing which is which.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("linear", "sigmoid")

Layers = tuple[tuple[np.ndarray, np.ndarray], ...]


@dataclass(frozen=True)
class MlpParams:
    layers: Layers
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        prev_out = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0], 1):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ShapeError(f"layer {i} expects {w.shape[1]} inputs, previous layer gives {prev_out}")
            prev_out = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def with_layers(self, layers: Layers) -> "MlpParams":
        return replace(self, layers=tuple((w, b) for w, b in layers))

    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def digest(self) -> str:
        """SHA-256 over the raw parameter bytes; equal digests mean bitwise-equal nets."""
        h = hashlib.sha256()
        for w, b in self.layers:
            h.update(np.ascontiguousarray(w).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_grad(pre, post, kind):
    if kind == "tanh":
        return 1.0 - post * post
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    if kind == "sigmoid":
        return post * (1.0 - post)
    return None  # linear: identity


def mlp_forward(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on a batch of column vectors.

    Returns the output of shape ``(out_dim, batch)`` and the cache that
    :func:`mlp_backward` needs.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in_dim {params.in_dim}")
    cache = ForwardCache()
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        kind = params.output_activation if i == last else params.hidden_activation
        cache.inputs.append(h)
        z = w @ h + b
        h = _activate(z, kind)
        cache.pre.append(z)
        cache.post.append(h)
    return h, cache


def mlp_backward(
    params: MlpParams, cache: ForwardCache, output_grad: np.ndarray
) -> tuple[Layers, np.ndarray]:
    """Backpropagate ``output_grad`` through the cached forward pass.

    The returned parameter gradients (same layout as ``params.layers``) and
    input gradient are those of ``sum(output * output_grad)``.
    """
    out = cache.post[-1] if cache.post else None
    if out is None or output_grad.shape != out.shape:
        got = None if out is None else out.shape
        raise ShapeError(f"output_grad shape {output_grad.shape} does not match output {got}")
    grads = [None] * len(params.layers)
    delta = output_grad
    last = len(params.layers) - 1
    for i in range(last, -1, -1):
        w, _ = params.layers[i]
        kind = params.output_activation if i == last else params.hidden_activation
        act = _activation_grad(cache.pre[i], cache.post[i], kind)
        if act is not None:
            delta = delta * act
        grads[i] = (delta @ cache.inputs[i].T, delta.sum(axis=1, keepdims=True))
        delta = w.T @ delta
    return tuple(grads), delta


def init_mlp(
    layer_dims: Sequence[int],
    activations: tuple[str, str],
    rng: np.random.Generator,
) -> MlpParams:
    """Glorot-uniform weights, zero biases.

    ``activations`` is ``(hidden, output)``, e.g. ``("tanh", "linear")``.
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ConfigError("layer_dims needs at least an input and an output size")
    if any(int(d) < 1 for d in dims):
        raise ConfigError(f"layer sizes must be positive, got {dims}")
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-s, s, size=(fan_out, fan_in))
        layers.append((w, np.zeros((fan_out, 1))))
    hidden, output = activations
    return MlpParams(tuple(layers), hidden, output)


# ---------------------------------------------------------------------------
# nested-gradient helpers


def zeros_like(layers: Layers) -> Layers:
    return tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in layers)


def add_scaled(a: Layers, b: Layers, scale: float = 1.0) -> Layers:
    """Return ``a + scale * b`` for two gradients with the same layout."""
    _check_same_layout(a, b)
    return tuple((wa + scale * wb, ba + scale * bb) for (wa, ba), (wb, bb) in zip(a, b))


def flatten(layers: Layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


def unflatten(vec: np.ndarray, like: Layers) -> Layers:
    out, pos = [], 0
    for w, b in like:
        nw, nb = w.size, b.size
        out.append((vec[pos:pos + nw].reshape(w.shape), vec[pos + nw:pos + nw + nb].reshape(b.shape)))
        pos += nw + nb
    if pos != vec.size:
        raise ShapeError(f"vector of length {vec.size} does not fit layout of {pos} values")
    return tuple(out)


def _check_same_layout(a: Layers, b: Layers) -> None:
    if len(a) != len(b) or any(
        wa.shape != wb.shape or ba.shape != bb.shape for (wa, ba), (wb, bb) in zip(a, b)
    ):
        raise ShapeError("gradient layouts differ")


def all_finite(layers: Layers) -> bool:
    return all(np.isfinite(w).all() and np.isfinite(b).all() for w, b in layers)


# ---------------------------------------------------------------------------
# Adam


@dataclass(frozen=True)
class AdamState:
    """Adam moments stored as flat vectors in :func:`flatten` order.

    ``moments_as_layers`` gives them back in the parameter layout.
    """

    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if self.m.shape != self.v.shape:
            raise ShapeError("first and second moments differ in size")

    @classmethod
    def for_params(cls, params: MlpParams, lr=2e-4, beta1=0.5, beta2=0.999, eps=1e-8) -> "AdamState":
        n = params.num_params()
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def moments_as_layers(self, params: MlpParams) -> tuple[Layers, Layers]:
        return unflatten(self.m, params.layers), unflatten(self.v, params.layers)


def adam_step(
    params: MlpParams, grads: Layers, state: AdamState, lr_scale: float = 1.0
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam descent step; nothing is modified in place.

    ``lr_scale`` multiplies the stored learning rate for this step only, which
    is how schedules are applied.
    """
    _check_same_layout(params.layers, grads)
    g = flatten(grads)
    if g.shape != state.m.shape:
        raise ShapeError(f"optimizer holds {state.m.size} moments for {g.size} parameters")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * (g * g)
    step = state.lr * lr_scale / (1.0 - b1 ** t)
    p = flatten(params.layers) - step * m / (np.sqrt(v / (1.0 - b2 ** t)) + state.eps)
    if not np.isfinite(p).all():
        raise NumericError("Adam step produced non-finite parameters")
    return params.with_layers(unflatten(p, params.layers)), replace(state, m=m, v=v, step_count=t)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    loss_fn: Callable[[MlpParams], tuple[float, Layers]],
    params: MlpParams,
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``loss_fn(params)`` must return ``(value, grads)`` and be deterministic.
    The result is ``max |analytic - fd| / max(1, |analytic|, |fd|)`` over all
    parameters.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    value, grads = loss_fn(params)
    if not np.isfinite(value):
        raise NumericError(f"loss is not finite: {value}")
    analytic = flatten(grads)
    base = flatten(params.layers)
    worst = 0.0
    for i in range(base.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = base.copy()
            probe[i] += sign * eps
            v, _ = loss_fn(params.with_layers(unflatten(probe, params.layers)))
            if not np.isfinite(v):
                raise NumericError(f"loss is not finite at parameter {i}")
            vals.append(v)
        fd = (vals[0] - vals[1]) / (2.0 * eps)
        err = abs(analytic[i] - fd) / max(1.0, abs(analytic[i]), abs(fd))
        worst = max(worst, err)
    return worst
