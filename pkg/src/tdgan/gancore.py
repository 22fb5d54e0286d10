"""Conditional generator/discriminator, the digesting and reminding losses, and their gradients.

Conventions: samples are columns, labels are integer arrays, and conditioning
is a one-hot block stacked under the network input. The generator *descends*
the digesting value ``(1/m) sum log(1 - D(G(u, y), y))``; discriminators
*ascend* ``(1/m) sum [log D(x, y) + log(1 - D(x_hat, y))]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError, StateError
from .numeric import (
    AdamState,
    ForwardCache,
    Layers,
    MlpParams,
    adam_step,
    add_scaled,
    init_mlp,
    mlp_backward,
    mlp_forward,
    zeros_like,
)

CLAMP = 1e-12


@dataclass(frozen=True)
class GanHyper:
    lam: float = 1.0
    m: int = 64
    n: int = 64
    d_iters: int = 1
    noise_dim: int = 4
    g_hidden: tuple[int, ...] = (64, 64)
    d_hidden: tuple[int, ...] = (64, 64)
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # constant lr for the first half of a task, then linear decay towards zero
    lr_decay: bool = True
    nonsaturating: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        if self.m < 1 or self.n < 1 or self.d_iters < 1 or self.noise_dim < 1:
            raise ConfigError("m, n, d_iters and noise_dim must be at least 1")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise ConfigError("learning rates must be positive")


@dataclass(frozen=True)
class Generator:
    net: MlpParams
    noise_dim: int
    vocab_size: int

    def __post_init__(self):
        if self.net.in_dim != self.noise_dim + self.vocab_size:
            raise ShapeError("generator input must be noise_dim + vocab_size wide")

    @property
    def data_dim(self) -> int:
        return self.net.out_dim


@dataclass(frozen=True)
class Discriminator:
    net: MlpParams
    vocab_size: int

    def __post_init__(self):
        if self.net.out_dim != 1 or self.net.output_activation != "sigmoid":
            raise ShapeError("discriminator must have one sigmoid output")

    @property
    def data_dim(self) -> int:
        return self.net.in_dim - self.vocab_size


def make_generator(data_dim: int, vocab_size: int, hyper: GanHyper, rng: np.random.Generator) -> Generator:
    dims = [hyper.noise_dim + vocab_size, *hyper.g_hidden, data_dim]
    return Generator(init_mlp(dims, ("tanh", "linear"), rng), hyper.noise_dim, vocab_size)


def make_discriminator(data_dim: int, vocab_size: int, hyper: GanHyper, rng: np.random.Generator) -> Discriminator:
    dims = [data_dim + vocab_size, *hyper.d_hidden, 1]
    return Discriminator(init_mlp(dims, ("relu", "sigmoid"), rng), vocab_size)


def onehot(labels, vocab_size: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ShapeError("labels must be a flat array")
    if labels.size and (labels.min() < 0 or labels.max() >= vocab_size):
        raise DomainError(f"labels outside vocabulary [0, {vocab_size})")
    out = np.zeros((vocab_size, labels.size))
    out[labels, np.arange(labels.size)] = 1.0
    return out


def sample_noise(noise_dim: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    return rng.random((noise_dim, batch))


# ---------------------------------------------------------------------------
# forward / backward wrappers


def gen_forward(g: Generator, u: np.ndarray, y) -> tuple[np.ndarray, ForwardCache]:
    u = np.asarray(u, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if u.ndim != 2 or u.shape[0] != g.noise_dim or u.shape[1] != y.size:
        raise ShapeError(f"noise shape {u.shape} does not fit noise_dim {g.noise_dim} and {y.size} labels")
    if u.size and (u.min() < 0.0 or u.max() > 1.0):
        raise DomainError("noise entries must lie in [0, 1]")
    return mlp_forward(g.net, np.vstack([u, onehot(y, g.vocab_size)]))


def gen_backward(g: Generator, cache: ForwardCache, dx: np.ndarray) -> Layers:
    grads, _ = mlp_backward(g.net, cache, dx)
    return grads


def disc_forward(d: Discriminator, x: np.ndarray, y) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] != d.data_dim or x.shape[1] != y.size:
        raise ShapeError(f"sample shape {x.shape} does not fit data_dim {d.data_dim} and {y.size} labels")
    return mlp_forward(d.net, np.vstack([x, onehot(y, d.vocab_size)]))


def _log_clamped(p):
    """log of the clamped probability and its derivative w.r.t. p (zero where clamped)."""
    pc = np.clip(p, CLAMP, 1.0 - CLAMP)
    inside = (p >= CLAMP) & (p <= 1.0 - CLAMP)
    return np.log(pc), np.where(inside, 1.0 / pc, 0.0)


# ---------------------------------------------------------------------------
# discriminator side


def disc_objective(
    d: Discriminator, real: tuple[np.ndarray, np.ndarray], fake: tuple[np.ndarray, np.ndarray]
) -> tuple[float, Layers]:
    """Value and parameter gradient of ``mean log D(real) + mean log(1 - D(fake))``."""
    (xr, yr), (xf, yf) = real, fake
    if np.shape(xr)[1] != np.shape(xf)[1]:
        raise ShapeError("real and fake batches must have equal size")
    m = xr.shape[1]
    pr, cr = disc_forward(d, xr, yr)
    pf, cf = disc_forward(d, xf, yf)
    log_r, dlog_r = _log_clamped(pr)
    log_f, dlog_f = _log_clamped(1.0 - pf)
    value = float(log_r.sum() / m + log_f.sum() / m)
    gr, _ = mlp_backward(d.net, cr, dlog_r / m)
    gf, _ = mlp_backward(d.net, cf, -dlog_f / m)
    return value, add_scaled(gr, gf)


def disc_update(
    d: Discriminator,
    real: tuple[np.ndarray, np.ndarray],
    fake: tuple[np.ndarray, np.ndarray],
    opt: AdamState,
    lr_scale: float = 1.0,
) -> tuple[Discriminator, AdamState, float]:
    """One ascent step on the discriminator objective; returns the pre-step objective."""
    value, grads = disc_objective(d, real, fake)
    if not np.isfinite(value):
        raise NumericError("discriminator objective is not finite")
    neg = tuple((-gw, -gb) for gw, gb in grads)
    net, opt = adam_step(d.net, neg, opt, lr_scale)
    return Discriminator(net, d.vocab_size), opt, value


def digesting_feedback(
    d: Discriminator, x_hat: np.ndarray, y, nonsaturating: bool = False
) -> tuple[np.ndarray, float]:
    """Per-sample gradient of the generator's loss term w.r.t. the fake samples.

    With the default minimax form the loss term is ``(1/m) sum log(1 - D)``;
    with ``nonsaturating`` it is ``-(1/m) sum log D``. Only this gradient and
    the scalar value leave the discriminator.
    """
    m = x_hat.shape[1]
    p, cache = disc_forward(d, x_hat, y)
    if nonsaturating:
        logs, dlog = _log_clamped(p)
        value = float(-logs.sum() / m)
        out_grad = -dlog / m
    else:
        logs, dlog = _log_clamped(1.0 - p)
        value = float(logs.sum() / m)
        out_grad = -dlog / m
    _, dinput = mlp_backward(d.net, cache, out_grad)
    return dinput[: d.data_dim], value


# ---------------------------------------------------------------------------
# generator side


def digesting_gen_grads(
    g: Generator,
    discs: Sequence[Discriminator],
    pis: Sequence[float],
    label_batches: Sequence[np.ndarray],
    rng: np.random.Generator,
    nonsaturating: bool = False,
    noise: Sequence[np.ndarray] | None = None,
) -> tuple[Layers, float]:
    """Monolithic digesting loss: ``sum_k pi_k (1/m) sum_i log(1 - D_k(G(u_i, y_i^k), y_i^k))``.

    Noise for center ``k`` is drawn from ``rng`` in center order unless given
    explicitly via ``noise``. Per-center contributions are accumulated in
    center order.
    """
    if not discs:
        raise StateError("digesting loss needs at least one online discriminator")
    if not (len(discs) == len(pis) == len(label_batches)):
        raise ShapeError("discs, pis and label batches must align")
    if abs(sum(pis) - 1.0) > 1e-9:
        raise ConfigError("mixture weights must sum to 1")
    total = zeros_like(g.net.layers)
    value = 0.0
    for k, (d, pi, y) in enumerate(zip(discs, pis, label_batches)):
        u = noise[k] if noise is not None else sample_noise(g.noise_dim, len(y), rng)
        x_hat, cache = gen_forward(g, u, y)
        dx, v = digesting_feedback(d, x_hat, y, nonsaturating)
        total = add_scaled(total, gen_backward(g, cache, pi * dx))
        value += pi * v
    return total, value


def reminding_loss_and_grads(
    g: Generator, g_frozen: Generator, y, u: np.ndarray
) -> tuple[Layers, float]:
    """Mean squared distance between the current and frozen generator on shared (u, y)."""
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    if n == 0:
        raise ConfigError("reminding batch must be nonempty")
    x_cur, cache = gen_forward(g, u, y)
    x_old, _ = gen_forward(g_frozen, u, y)
    diff = x_cur - x_old
    value = float((diff * diff).sum() / n)
    return gen_backward(g, cache, 2.0 * diff / n), value


def generator_update(
    g: Generator,
    digesting_grads: Layers,
    reminding_grads: Layers | None,
    lam: float,
    opt: AdamState,
    lr_scale: float = 1.0,
) -> tuple[Generator, AdamState]:
    """Adam descent on ``digesting + lam * reminding``; pass ``None`` to skip reminding."""
    grads = digesting_grads if reminding_grads is None else add_scaled(digesting_grads, reminding_grads, lam)
    net, opt = adam_step(g.net, grads, opt, lr_scale)
    return Generator(net, g.noise_dim, g.vocab_size), opt


def optimal_disc_value(p_density: float, q_density: float) -> float:
    """Optimal discriminator output p / (p + q) for fixed real and fake densities."""
    if p_density < 0 or q_density < 0:
        raise DomainError("densities must be nonnegative")
    if p_density == 0 and q_density == 0:
        raise DomainError("p and q are both zero; the optimal discriminator is undefined")
    return p_density / (p_density + q_density)


def generate(g: Generator, y, rng: np.random.Generator) -> np.ndarray:
    """Draw fresh noise and return G(u, y) for each label in ``y``."""
    y = np.asarray(y, dtype=np.int64)
    x, _ = gen_forward(g, sample_noise(g.noise_dim, y.size, rng), y)
    return x
