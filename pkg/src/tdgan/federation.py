"""The central-generator / temporary-discriminator training protocol.

A :class:`GeneratorNode` never touches real data. Each online
:class:`DiscriminatorNode` owns one private :class:`CenterDataset` and talks to
the generator only through :class:`Message` objects routed by a transport.
The in-process transport below is synchronous; anything offering the same
three methods (``request_labels``, ``push_fakes``, ``request_feedback``) can
replace it.

Message field order is part of the interface and must not change:

    LabelBatch(center_id, labels)        discriminator -> generator
    FakeBatch(center_id, x_hat, labels)  generator -> discriminator
    Feedback(center_id, grad, value)     discriminator -> generator
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence, Union

import numpy as np

from .datamodel import (
    CenterDataset,
    CondGaussianMixture,
    LabelStore,
    labelstore_merge,
    labelstore_sample,
    mixture_weights,
)
from .errors import ConfigError, ProtocolError, StateError
from .gancore import (
    Discriminator,
    GanHyper,
    Generator,
    digesting_feedback,
    disc_update,
    gen_backward,
    gen_forward,
    generator_update,
    make_discriminator,
    make_generator,
    reminding_loss_and_grads,
    sample_noise,
)
from .numeric import AdamState, Layers, add_scaled, zeros_like

# ---------------------------------------------------------------------------
# randomness


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


class Streams:
    """Counter-based random streams: ``get(*path)`` always returns the same stream for the same path.

    Each stream is keyed by the root seed(s) plus a path such as
    ``("center", task, k, iteration)``, so consumers never share state and
    adding a consumer cannot shift anybody else's draws.
    """

    def __init__(self, *root):
        self.root = tuple(_key(r) for r in root)

    def get(self, *path) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([*self.root, *(_key(p) for p in path)]))


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class LabelBatch:
    center_id: str
    labels: np.ndarray


@dataclass(frozen=True)
class FakeBatch:
    center_id: str
    x_hat: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True)
class Feedback:
    center_id: str
    grad: np.ndarray
    value: float


Message = Union[LabelBatch, FakeBatch, Feedback]


# ---------------------------------------------------------------------------
# nodes


class DiscriminatorNode:
    """One temporary data center: a private dataset plus its local discriminator."""

    def __init__(self, dataset: CenterDataset, vocab_size: int):
        self.center_id = dataset.center_id
        self._dataset = dataset
        self.vocab_size = vocab_size
        self.disc: Discriminator | None = None
        self.opt: AdamState | None = None
        self.online = False
        self._hyper: GanHyper | None = None
        self._rng: np.random.Generator | None = None
        self._last_labels: np.ndarray | None = None
        self.last_objective: float | None = None

    @property
    def n(self) -> int:
        return self._dataset.n

    @property
    def label_counts(self) -> dict[int, int]:
        return dict(self._dataset.label_counts)

    def come_online(self, hyper: GanHyper, rng: np.random.Generator) -> None:
        # a center never keeps an old discriminator: each task starts from scratch
        self.disc = make_discriminator(self._dataset.truth.dim, self.vocab_size, hyper, rng)
        self.opt = AdamState.for_params(self.disc.net, hyper.d_lr, hyper.beta1, hyper.beta2)
        self._hyper = hyper
        self.online = True

    def go_offline(self) -> None:
        self.disc = self.opt = self._rng = self._last_labels = None
        self.online = False

    def begin_iteration(self, rng: np.random.Generator) -> None:
        self._require_online()
        self._rng = rng

    def label_batch(self, m: int) -> LabelBatch:
        self._require_online()
        labels = self._dataset.sample_labels(m, self._rng)
        self._last_labels = labels
        return LabelBatch(self.center_id, labels)

    def receive_fakes(self, batch: FakeBatch, lr_scale: float = 1.0) -> float:
        """Discriminator ascent step on real samples paired with the fakes' labels."""
        self._check_batch(batch)
        real = self._dataset._draw_real(batch.labels, self._rng)
        self.disc, self.opt, self.last_objective = disc_update(
            self.disc, (real, batch.labels), (batch.x_hat, batch.labels), self.opt, lr_scale
        )
        return self.last_objective

    def feedback(self, batch: FakeBatch) -> Feedback:
        self._check_batch(batch)
        grad, value = digesting_feedback(self.disc, batch.x_hat, batch.labels, self._hyper.nonsaturating)
        return Feedback(self.center_id, grad, value)

    def _check_batch(self, batch: FakeBatch) -> None:
        self._require_online()
        if batch.center_id != self.center_id:
            raise ProtocolError(f"fake batch for {batch.center_id} delivered to {self.center_id}")
        if self._last_labels is None or not np.array_equal(batch.labels, self._last_labels):
            raise ProtocolError(f"{self.center_id}: fake batch does not answer the last label batch")
        self._last_labels = None

    def _require_online(self) -> None:
        if not self.online:
            raise ProtocolError(f"center {self.center_id} is offline")


@dataclass
class GeneratorNode:
    gen: Generator
    frozen: Generator | None = None
    store: LabelStore = field(default_factory=LabelStore)
    opt: AdamState | None = None
    reminding_steps: int = 0

    @classmethod
    def create(cls, data_dim: int, vocab_size: int, hyper: GanHyper, rng: np.random.Generator) -> "GeneratorNode":
        return cls(make_generator(data_dim, vocab_size, hyper, rng))


def snapshot(g: Generator) -> Generator:
    """Deep, read-only copy of a generator."""
    layers = []
    for w, b in g.net.layers:
        w, b = w.copy(), b.copy()
        w.flags.writeable = False
        b.flags.writeable = False
        layers.append((w, b))
    return Generator(g.net.with_layers(tuple(layers)), g.noise_dim, g.vocab_size)


# ---------------------------------------------------------------------------
# transport


class InProcessTransport:
    """Synchronous message router with a built-in audit of generator-bound traffic.

    Every message is counted by (direction, type). Messages reaching the
    generator are checked on the way: only LabelBatch and Feedback may pass,
    and a Feedback must match the shape of the FakeBatch it answers. Set
    ``keep=True`` to retain the messages themselves in ``log``.
    """

    ALLOWED_TO_GENERATOR = (LabelBatch, Feedback)

    def __init__(self, nodes: Iterable[DiscriminatorNode], keep: bool = False):
        self.nodes = {node.center_id: node for node in nodes}
        self.counts: Counter = Counter()
        self.keep = keep
        self.log: list[tuple[str, Message]] = []

    def _node(self, center_id: str) -> DiscriminatorNode:
        try:
            node = self.nodes[center_id]
        except KeyError:
            raise ProtocolError(f"unknown center {center_id}") from None
        if not node.online:
            raise ProtocolError(f"center {center_id} is offline")
        return node

    def _record(self, direction: str, msg: Message) -> None:
        self.counts[(direction, type(msg).__name__)] += 1
        if self.keep:
            self.log.append((direction, msg))

    def _to_generator(self, msg) -> Message:
        if not isinstance(msg, self.ALLOWED_TO_GENERATOR):
            raise ProtocolError(f"{type(msg).__name__} may not be delivered to the generator")
        self._record("to_generator", msg)
        return msg

    def request_labels(self, center_id: str, m: int) -> LabelBatch:
        return self._to_generator(self._node(center_id).label_batch(m))

    def push_fakes(self, batch: FakeBatch, lr_scale: float = 1.0) -> None:
        self._record("to_center", batch)
        self._node(batch.center_id).receive_fakes(batch, lr_scale)

    def request_feedback(self, batch: FakeBatch) -> Feedback:
        self._record("to_center", batch)
        fb = self._node(batch.center_id).feedback(batch)
        if fb.grad.shape != batch.x_hat.shape:
            raise ProtocolError(f"feedback shape {fb.grad.shape} does not match fake batch {batch.x_hat.shape}")
        return self._to_generator(fb)


# ---------------------------------------------------------------------------
# scenario description


@dataclass(frozen=True)
class TaskSpec:
    centers: tuple[CenterDataset, ...]
    iterations: int
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.centers:
            raise ConfigError("every task needs at least one center")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate center ids in task: {ids}")

    def label_counts(self) -> dict[int, int]:
        total: Counter = Counter()
        for c in self.centers:
            total.update({y: n for y, n in c.label_counts.items() if n > 0})
        return dict(sorted(total.items()))


@dataclass(frozen=True)
class Scenario:
    vocab_size: int
    data_dim: int
    truth: CondGaussianMixture
    tasks: tuple[TaskSpec, ...]
    hyper: GanHyper = field(default_factory=GanHyper)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("scenario has no tasks")
        if self.truth.dim != self.data_dim or self.truth.vocab_size != self.vocab_size:
            raise ConfigError("ground truth does not match the scenario's data_dim / vocab_size")

    def task_hyper(self, index: int) -> GanHyper:
        return replace(self.hyper, **self.tasks[index].overrides)


# ---------------------------------------------------------------------------
# training


def lr_schedule(it: int, iterations: int, decay: bool) -> float:
    """Learning-rate multiplier: flat for the first half of a task, then linear towards zero."""
    if not decay or iterations <= 1:
        return 1.0
    half = iterations / 2.0
    if it < half:
        return 1.0
    return (iterations - it) / (iterations - half)


@dataclass
class IterationRecord:
    digesting_value: float
    reminding_value: float | None


def collect_digesting(
    node: GeneratorNode,
    centers: Sequence[DiscriminatorNode],
    pis: Sequence[float],
    hyper: GanHyper,
    transport: InProcessTransport,
    gen_rng: np.random.Generator,
) -> tuple[Layers, float, list[np.ndarray], list[np.ndarray]]:
    """Second exchange of an iteration: gather Feedback and backprop it through G.

    Returns the pi-weighted gradient, the digesting value, and the label and
    noise batches used (so a caller can recompute the same quantity directly).
    """
    g = node.gen
    grads = zeros_like(g.net.layers)
    value = 0.0
    labels_used, noise_used = [], []
    for center, pi in zip(centers, pis):
        lb = transport.request_labels(center.center_id, hyper.m)
        u = sample_noise(g.noise_dim, lb.labels.size, gen_rng)
        x_hat, cache = gen_forward(g, u, lb.labels)
        fb = transport.request_feedback(FakeBatch(center.center_id, x_hat, lb.labels))
        grads = add_scaled(grads, gen_backward(g, cache, pi * fb.grad))
        value += pi * fb.value
        labels_used.append(lb.labels)
        noise_used.append(u)
    return grads, value, labels_used, noise_used


def train_iteration(
    node: GeneratorNode,
    centers: Sequence[DiscriminatorNode],
    pis: Sequence[float],
    hyper: GanHyper,
    t: int,
    streams: Streams,
    it: int,
    transport: InProcessTransport,
    lr_scale: float = 1.0,
    reminding: bool = True,
) -> IterationRecord:
    """One pass of the per-iteration protocol; updates ``node`` and the centers in place."""
    for k, center in enumerate(centers):
        if not center.online:
            raise ProtocolError(f"center {center.center_id} is offline")
        center.begin_iteration(streams.get("center", t, k, it))
    gen_rng = streams.get("gen", t, it)

    for _ in range(hyper.d_iters):
        for center in centers:
            lb = transport.request_labels(center.center_id, hyper.m)
            u = sample_noise(node.gen.noise_dim, lb.labels.size, gen_rng)
            x_hat, _ = gen_forward(node.gen, u, lb.labels)
            transport.push_fakes(FakeBatch(center.center_id, x_hat, lb.labels), lr_scale)

    dig_grads, dig_value, _, _ = collect_digesting(node, centers, pis, hyper, transport, gen_rng)

    rem_grads = rem_value = None
    if t > 1 and reminding:
        if node.frozen is None:
            raise StateError("reminding requires a frozen generator from the previous task")
        rng = streams.get("remind", t, it)
        y = labelstore_sample(node.store, hyper.n, rng)
        u = sample_noise(node.gen.noise_dim, hyper.n, rng)
        rem_grads, rem_value = reminding_loss_and_grads(node.gen, node.frozen, y, u)
        node.reminding_steps += 1

    node.gen, node.opt = generator_update(node.gen, dig_grads, rem_grads, hyper.lam, node.opt, lr_scale)
    return IterationRecord(dig_value, rem_value)


def run_task(
    node: GeneratorNode,
    centers: Sequence[DiscriminatorNode],
    t: int,
    hyper: GanHyper,
    streams: Streams,
    iterations: int,
    transport: InProcessTransport | None = None,
    reminding: bool = True,
) -> GeneratorNode:
    """Train on the centers online at step ``t`` (1-based), then fold their labels into the store."""
    if not centers:
        raise ProtocolError("a task needs at least one online center")
    if t > 1 and node.frozen is None:
        raise StateError(f"task {t} needs the frozen generator of task {t - 1}")
    transport = transport or InProcessTransport(centers)
    for k, center in enumerate(centers):
        center.come_online(hyper, streams.get("disc-init", t, k))
    node.opt = AdamState.for_params(node.gen.net, hyper.g_lr, hyper.beta1, hyper.beta2)
    pis = mixture_weights([c.n for c in centers])
    frozen_digest = node.frozen.net.digest() if node.frozen is not None else None

    for it in range(iterations):
        scale = lr_schedule(it, iterations, hyper.lr_decay)
        train_iteration(node, centers, pis, hyper, t, streams, it, transport, scale, reminding)

    if node.frozen is not None and node.frozen.net.digest() != frozen_digest:
        raise StateError("frozen generator changed during a task")
    merged: Counter = Counter()
    for c in centers:
        merged.update(c.label_counts)
        c.go_offline()
    node.store = labelstore_merge(node.store, dict(merged))
    node.frozen = snapshot(node.gen)
    return node


@dataclass
class ScenarioResult:
    node: GeneratorNode
    snapshots: list[Generator]
    transports: list[InProcessTransport]


def run_scenario(
    scenario: Scenario,
    seed: int = 0,
    lam: float | None = None,
    reminding: bool = True,
    iters_scale: float = 1.0,
    keep_messages: bool = False,
) -> ScenarioResult:
    """Run every task in order and return the generator as it stood after each one."""
    streams = Streams(scenario.seed, seed)
    node = GeneratorNode.create(scenario.data_dim, scenario.vocab_size, scenario.hyper, streams.get("gen-init"))
    snapshots, transports = [], []
    for i, task in enumerate(scenario.tasks):
        hyper = scenario.task_hyper(i)
        if lam is not None:
            hyper = replace(hyper, lam=lam)
        centers = [DiscriminatorNode(c, scenario.vocab_size) for c in task.centers]
        transport = InProcessTransport(centers, keep=keep_messages)
        node = run_task(node, centers, i + 1, hyper, streams, scaled_iterations(task.iterations, iters_scale),
                        transport, reminding)
        snapshots.append(node.frozen)
        transports.append(transport)
    return ScenarioResult(node, snapshots, transports)


def scaled_iterations(iterations: int, scale: float) -> int:
    if scale <= 0:
        raise ConfigError("iters_scale must be positive")
    if iterations == 0:
        return 0
    return max(1, int(round(iterations * scale)))
