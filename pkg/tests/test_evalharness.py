from itertools import product

import numpy as np
import pytest
from scipy.stats import norm

from tdgan.datamodel import CenterDataset, CondGaussianMixture, sample_conditional_batch
from tdgan.errors import ConfigError, DomainError, NumericError
from tdgan.evalharness import (
    MetricRow,
    energy_distance,
    eval_generator,
    null_quantile,
    run_method,
    sort_rows,
    verify_optimal_discriminator,
    verify_reminding_convergence,
)
from tdgan.federation import Scenario, Streams, TaskSpec
from tdgan.gancore import Discriminator, GanHyper, make_generator
from tdgan.numeric import MlpParams

TRUTH = CondGaussianMixture.build(1, 2, {0: [(1.0, 0.0, 1.0)], 1: [(1.0, 3.0, 1.0)]})
HYPER = GanHyper(m=16, n=16, noise_dim=2, g_hidden=(8,), d_hidden=(8,), g_lr=1e-3, d_lr=1e-3)


def brute_energy(a, b):
    """Direct triple-loop evaluation of the all-pairs formula."""
    def mean_dist(x, y):
        return np.mean([np.linalg.norm(x[:, i] - y[:, j]) for i, j in product(range(x.shape[1]), range(y.shape[1]))])

    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


# --- energy distance


def test_energy_identical_sets_is_zero():
    a = np.random.default_rng(0).normal(size=(2, 50))
    assert energy_distance(a, a) == 0.0


def test_energy_singletons():
    assert energy_distance(np.array([[0.0]]), np.array([[1.0]])) == 2.0


def test_energy_two_point_sets_by_enumeration():
    # cross mean (1+3+1+1)/4 = 1.5, within means (0+2+2+0)/4 = 1 each
    a, b = np.array([[0.0, 2.0]]), np.array([[1.0, 3.0]])
    assert energy_distance(a, b) == pytest.approx(1.0, abs=1e-15)
    assert energy_distance(a, b) == pytest.approx(brute_energy(a, b), abs=1e-15)


def test_energy_matches_brute_force_in_2d():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 7)), rng.normal(loc=0.5, size=(2, 5))
    assert energy_distance(a, b) == pytest.approx(brute_energy(a, b), abs=1e-12)


def test_energy_is_exactly_symmetric():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.normal(size=(1, 31)), rng.normal(size=(1, 31))
        assert energy_distance(a, b) == energy_distance(b, a)


def test_energy_rejects_empty_or_mismatched():
    with pytest.raises(ConfigError):
        energy_distance(np.zeros((1, 0)), np.zeros((1, 3)))
    with pytest.raises(ConfigError):
        energy_distance(np.zeros((1, 2)), np.zeros((2, 2)))


# --- evaluation


def test_null_quantile_is_small_and_deterministic():
    q = null_quantile(TRUTH, 0, n_eval=500, reps=40)
    assert 0.0 < q < 0.05
    assert q == null_quantile(TRUTH, 0, n_eval=500, reps=40)


def test_exact_sampler_is_within_null():
    eps = null_quantile(TRUTH, 1, n_eval=2000, reps=40)
    exact = lambda ys, rng: sample_conditional_batch(TRUTH, ys, rng)
    rows = eval_generator(exact, TRUTH, [1], 2000, Streams(5), "tdgan", 0, 1)
    assert rows[0].value <= eps


def test_constant_generator_is_far():
    constant = lambda ys, rng: np.zeros((1, len(ys)))
    (row,) = eval_generator(constant, TRUTH, [0], 2000, Streams(0))
    assert row.value > 0.1


def test_eval_unknown_label_is_domain_error():
    with pytest.raises(DomainError):
        eval_generator(lambda ys, rng: np.zeros((1, len(ys))), TRUTH, [5], 10, Streams(0))


def test_rows_sort_canonically():
    rows = [MetricRow("tdgan", 1, 2, 0, "energy_distance", 0.1), MetricRow("joint", 2, 1, 3, "energy_distance", 0.2),
            MetricRow("tdgan", 1, 1, 1, "energy_distance", 0.3)]
    assert [(r.method, r.task) for r in sort_rows(rows)] == [("joint", 1), ("tdgan", 1), ("tdgan", 2)]


# --- baselines


def one_task_scenario() -> Scenario:
    task = TaskSpec((CenterDataset("A", {0: 4, 1: 4}, TRUTH),), 20)
    return Scenario(2, 1, TRUTH, (task,), HYPER, seed=3)


def test_one_task_collapses_tdgan_finetune_joint_local():
    s = one_task_scenario()
    values = {m: [(r.task, r.label, r.value) for r in run_method(s, m, 1, n_eval=200)]
              for m in ("tdgan", "finetune", "joint", "local")}
    assert values["tdgan"] == values["finetune"] == values["joint"] == values["local"]


def test_run_method_is_pure():
    s = one_task_scenario()
    assert run_method(s, "tdgan", 2, n_eval=100) == run_method(s, "tdgan", 2, n_eval=100)


def test_unknown_method():
    with pytest.raises(ConfigError):
        run_method(one_task_scenario(), "average", 0)


def test_local_averages_shared_labels_and_joint_reports_last_task():
    t1 = TaskSpec((CenterDataset("A", {0: 4}, TRUTH), CenterDataset("B", {0: 2, 1: 2}, TRUTH)), 4)
    t2 = TaskSpec((CenterDataset("C", {1: 4}, TRUTH),), 4)
    s = Scenario(2, 1, TRUTH, (t1, t2), HYPER)
    local = run_method(s, "local", 0, n_eval=50)
    assert [(r.task, r.label) for r in local] == [(1, 0), (1, 1), (2, 1)]
    joint = run_method(s, "joint", 0, n_eval=50)
    assert [(r.task, r.label) for r in joint] == [(2, 0), (2, 1)]
    tdgan = run_method(s, "tdgan", 0, n_eval=50)
    assert [(r.task, r.label) for r in tdgan] == [(1, 0), (1, 1), (2, 0), (2, 1)]


# --- lemma harnesses (short budgets; the full budgets live in the acceptance suite)


def test_untrained_zero_discriminator_error_matches_quadrature():
    grid = np.linspace(-4.0, 5.0, 201)
    zero = Discriminator(MlpParams(((np.zeros((1, 2)), np.zeros((1, 1))),), "relu", "sigmoid"), 1)
    err = verify_optimal_discriminator(
        lambda c, r: r.normal(0, 1, (1, c)), norm(0, 1).pdf,
        lambda c, r: r.normal(1, 1, (1, c)), norm(1, 1).pdf,
        steps=0, grid=grid, init=zero,
    )
    p, q = norm(0, 1).pdf(grid), norm(1, 1).pdf(grid)
    assert err == pytest.approx(np.mean(np.abs(0.5 - p / (p + q))), abs=1e-15)


def test_equal_densities_give_half():
    err = verify_optimal_discriminator(
        lambda c, r: r.normal(0, 1, (1, c)), norm(0, 1).pdf,
        lambda c, r: r.normal(0, 1, (1, c)), norm(0, 1).pdf,
        steps=2000, batch=256,
    )
    assert err <= 0.05


def test_nonfinite_density_is_numeric_error():
    bad = lambda x: np.full_like(x, np.nan)
    with pytest.raises(NumericError):
        verify_optimal_discriminator(None, bad, None, bad, steps=0)


def test_reminding_from_frozen_copy_starts_at_zero():
    g = make_generator(1, 3, HYPER, np.random.default_rng(0))
    final, history = verify_reminding_convergence(g, g, steps=5)
    assert history[0] == 0.0 and final == 0.0


def test_reminding_loss_trailing_average_is_monotone():
    rng = np.random.default_rng(1)
    frozen = make_generator(1, 3, HYPER, rng)
    g = make_generator(1, 3, HYPER, rng)
    final, history = verify_reminding_convergence(frozen, g, steps=2000)
    window = np.convolve(history, np.ones(100) / 100, mode="valid")
    assert final < history[0]
    # nonincreasing up to float rounding in the running mean
    assert (np.diff(window) <= 1e-12).all()
