"""Ground-truth evaluation, comparison baselines, and numerical checks of the loss guarantees."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .datamodel import (
    CenterDataset,
    CondGaussianMixture,
    LabelStore,
    labelstore_merge,
    labelstore_sample,
    sample_conditional_batch,
    support,
)
from .errors import ConfigError, DomainError, NumericError
from .federation import Scenario, Streams, TaskSpec, run_scenario
from .gancore import (
    Discriminator,
    GanHyper,
    Generator,
    disc_forward,
    disc_update,
    generate,
    generator_update,
    make_discriminator,
    make_generator,
    reminding_loss_and_grads,
    sample_noise,
)
from .numeric import AdamState

METHODS = ("tdgan", "finetune", "joint", "local")
N_EVAL = 2000


@dataclass(frozen=True, order=True)
class MetricRow:
    method: str
    seed: int
    task: int
    label: int
    metric: str
    value: float


def sort_rows(rows: Iterable[MetricRow]) -> list[MetricRow]:
    return sorted(rows, key=lambda r: (r.method, r.seed, r.task, r.label, r.metric))


# ---------------------------------------------------------------------------
# distance


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Energy distance between two sample sets given as ``(dim, count)`` arrays.

    ``2 E|A - B| - E|A - A'| - E|B - B'|`` with every mean taken over all
    ordered pairs, self-pairs included. This V-statistic form is nonnegative,
    exactly zero for identical sets, and exactly symmetric because the
    arguments are put in a canonical order before summing.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ConfigError("energy distance needs nonempty sample sets")
    if a.shape[0] != b.shape[0]:
        raise ConfigError("sample sets differ in dimension")
    if (a.shape[1], a.tobytes()) > (b.shape[1], b.tobytes()):
        a, b = b, a
    at, bt = a.T, b.T
    cross = cdist(at, bt).mean()
    within_a = cdist(at, at).mean()
    within_b = cdist(bt, bt).mean()
    return float(max(2.0 * cross - within_a - within_b, 0.0))


def null_quantile(
    truth: CondGaussianMixture, label: int, n_eval: int = N_EVAL, reps: int = 200,
    q: float = 95.0, seed: int = 0,
) -> float:
    """Monte-Carlo quantile of truth-vs-truth energy distance for one label."""
    streams = Streams(seed, "null", label)
    vals = []
    for r in range(reps):
        rng = streams.get(r)
        ys = np.full(n_eval, label)
        vals.append(energy_distance(sample_conditional_batch(truth, ys, rng),
                                    sample_conditional_batch(truth, ys, rng)))
    return float(np.percentile(vals, q))


# ---------------------------------------------------------------------------
# evaluation


def eval_generator(
    g: Generator | Callable[[np.ndarray, np.random.Generator], np.ndarray],
    truth: CondGaussianMixture,
    labels: Iterable[int],
    n_eval: int,
    streams: Streams,
    method: str = "tdgan",
    seed: int = 0,
    task: int = 1,
) -> list[MetricRow]:
    """Per-label energy distance between generated and true samples.

    ``g`` is either a :class:`Generator` or any sampler ``f(labels, rng)``
    returning ``(dim, len(labels))`` samples. Evaluation streams are keyed by
    (task, label) only, so every method is scored against the same true draws.
    """
    sampler = g if callable(g) and not isinstance(g, Generator) else (lambda ys, rng: generate(g, ys, rng))
    rows = []
    for y in sorted(labels):
        if y not in truth.components:
            raise DomainError(f"label {y} has no ground truth")
        ys = np.full(n_eval, y)
        real = sample_conditional_batch(truth, ys, streams.get("eval-real", task, y))
        fake = sampler(ys, streams.get("eval-fake", task, y))
        rows.append(MetricRow(method, seed, task, int(y), "energy_distance", energy_distance(fake, real)))
    return rows


def _single_task(centers: Sequence[CenterDataset], iterations: int, overrides: dict | None = None) -> TaskSpec:
    return TaskSpec(tuple(centers), iterations, dict(overrides or {}))


def pooled_center(scenario: Scenario, tasks: Sequence[TaskSpec] | None = None, center_id: str = "pooled") -> CenterDataset:
    counts: dict[int, int] = {}
    for task in tasks or scenario.tasks:
        for y, c in task.label_counts().items():
            counts[y] = counts.get(y, 0) + c
    return CenterDataset(center_id, dict(sorted(counts.items())), scenario.truth)


def run_method(
    scenario: Scenario, method: str, seed: int, iters_scale: float = 1.0, n_eval: int = N_EVAL,
) -> list[MetricRow]:
    """Train with one of the four methods and score it; rows come back in canonical order.

    tdgan and finetune are evaluated after every task on all labels seen so
    far. joint trains once on the pooled data of all tasks (iterations summed)
    and reports under the last task index. local trains one GAN per center
    and reports that center's labels under the center's task; when two
    centers of a task share a label their distances are averaged.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    eval_streams = Streams(scenario.seed, seed, "eval")
    rows: list[MetricRow] = []
    if method in ("tdgan", "finetune"):
        result = run_scenario(
            scenario, seed,
            lam=0.0 if method == "finetune" else None,
            reminding=method == "tdgan",
            iters_scale=iters_scale,
        )
        store = LabelStore()
        for t, (task, g) in enumerate(zip(scenario.tasks, result.snapshots), start=1):
            store = labelstore_merge(store, task.label_counts())
            rows += eval_generator(g, scenario.truth, support(store), n_eval, eval_streams, method, seed, t)
    elif method == "joint":
        total = sum(task.iterations for task in scenario.tasks)
        joint = replace(scenario, tasks=(_single_task([pooled_center(scenario)], total, scenario.tasks[0].overrides),))
        g = run_scenario(joint, seed, iters_scale=iters_scale).snapshots[0]
        labels = set().union(*(task.label_counts() for task in scenario.tasks))
        rows += eval_generator(g, scenario.truth, labels, n_eval, eval_streams, method, seed, len(scenario.tasks))
    else:
        for t, task in enumerate(scenario.tasks, start=1):
            per_label: dict[int, list[float]] = {}
            for center in task.centers:
                local = replace(scenario, tasks=(_single_task([center], task.iterations, task.overrides),))
                g = run_scenario(local, seed, iters_scale=iters_scale).snapshots[0]
                labels = [y for y, c in center.label_counts.items() if c > 0]
                for row in eval_generator(g, scenario.truth, labels, n_eval, eval_streams, method, seed, t):
                    per_label.setdefault(row.label, []).append(row.value)
            rows += [MetricRow(method, seed, t, y, "energy_distance", float(np.mean(v)))
                     for y, v in sorted(per_label.items())]
    return sort_rows(rows)


# ---------------------------------------------------------------------------
# numerical checks of the two lemmas


def verify_optimal_discriminator(
    p_sampler: Callable[[int, np.random.Generator], np.ndarray],
    p_pdf: Callable[[np.ndarray], np.ndarray],
    q_sampler: Callable[[int, np.random.Generator], np.ndarray],
    q_pdf: Callable[[np.ndarray], np.ndarray],
    steps: int = 20000,
    batch: int = 256,
    grid: np.ndarray | None = None,
    hyper: GanHyper | None = None,
    seed: int = 0,
    init: Discriminator | None = None,
) -> float:
    """Train a fresh 1-D discriminator on p (real) vs q (fake); report mean |D - p/(p+q)| on ``grid``.

    Samplers take ``(count, rng)`` and return ``(1, count)`` arrays. A budget
    of ``steps=0`` scores the untrained network; ``init`` replaces the
    random initialization.
    """
    grid = np.linspace(-4.0, 5.0, 201) if grid is None else np.asarray(grid, dtype=float)
    p, q = np.asarray(p_pdf(grid), float), np.asarray(q_pdf(grid), float)
    if not (np.isfinite(p).all() and np.isfinite(q).all()):
        raise NumericError("densities are not finite on the grid")
    target = p / (p + q)
    hyper = hyper or GanHyper(d_lr=1e-3)
    streams = Streams(seed, "lemma2")
    d = init if init is not None else make_discriminator(1, 1, hyper, streams.get("init"))
    opt = AdamState.for_params(d.net, hyper.d_lr, hyper.beta1, hyper.beta2)
    y = np.zeros(batch, dtype=np.int64)
    for it in range(steps):
        rng = streams.get("step", it)
        real, fake = p_sampler(batch, rng), q_sampler(batch, rng)
        scale = 1.0 if it < steps // 2 else (steps - it) / (steps - steps // 2)
        d, opt, _ = disc_update(d, (real, y), (fake, y), opt, scale)
    out, _ = disc_forward(d, grid[None, :], np.zeros(grid.size, dtype=np.int64))
    return float(np.mean(np.abs(out[0] - target)))


def verify_reminding_convergence(
    g_frozen: Generator,
    g: Generator,
    steps: int = 10000,
    batch: int = 256,
    store: LabelStore | None = None,
    lr: float = 1e-3,
    seed: int = 0,
) -> tuple[float, list[float]]:
    """Minimize the reminding loss alone, starting from ``g``; return the final loss and its trajectory.

    Labels come from ``store`` (uniform over the vocabulary by default) and a
    fixed batch of shared noise is reused every step, so the objective is
    deterministic. The final value is recomputed after the last update.
    """
    store = store or LabelStore({y: 1 for y in range(g.vocab_size)})
    streams = Streams(seed, "lemma1")
    rng = streams.get("batch")
    ys = labelstore_sample(store, batch, rng)
    u = sample_noise(g.noise_dim, batch, rng)
    opt = AdamState.for_params(g.net, lr, 0.9, 0.999)
    history = []
    for it in range(steps):
        grads, value = reminding_loss_and_grads(g, g_frozen, ys, u)
        history.append(value)
        scale = 1.0 if it < steps // 2 else (steps - it) / (steps - steps // 2)
        g, opt = generator_update(g, grads, None, 0.0, opt, scale)
    _, final = reminding_loss_and_grads(g, g_frozen, ys, u)
    history.append(final)
    return final, history


LEMMA1_THRESHOLD = 1e-3
LEMMA2_THRESHOLD = 0.05


def _normal(mu: float):
    def sampler(count: int, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(mu, 1.0, size=(1, count))

    def pdf(x: np.ndarray) -> np.ndarray:
        return np.exp(-0.5 * (x - mu) ** 2) / np.sqrt(2.0 * np.pi)

    return sampler, pdf


def lemma2_check(seed: int = 0) -> tuple[float, float]:
    """Discriminator trained on N(0,1) vs N(1,1); returns (grid error, threshold)."""
    p_sampler, p_pdf = _normal(0.0)
    q_sampler, q_pdf = _normal(1.0)
    err = verify_optimal_discriminator(p_sampler, p_pdf, q_sampler, q_pdf, steps=20000, batch=256, seed=seed)
    return err, LEMMA2_THRESHOLD


def lemma1_check(seed: int = 0) -> tuple[float, float]:
    """Fresh toy generator pulled onto an independently initialized frozen one; returns (final loss, threshold)."""
    hyper = GanHyper(noise_dim=2, g_hidden=(16, 16))
    streams = Streams(seed, "lemma1-init")
    frozen = make_generator(2, 4, hyper, streams.get("frozen"))
    g = make_generator(2, 4, hyper, streams.get("fresh"))
    final, _ = verify_reminding_convergence(frozen, g, steps=10000, batch=256, seed=seed)
    return final, LEMMA1_THRESHOLD
