from dataclasses import replace

import numpy as np
import pytest

from tdgan.cli import load_scenario
from tdgan.datamodel import CenterDataset, CondGaussianMixture, LabelStore
from tdgan.errors import ConfigError, ProtocolError, StateError
from tdgan.federation import (
    DiscriminatorNode,
    FakeBatch,
    Feedback,
    GeneratorNode,
    InProcessTransport,
    LabelBatch,
    Scenario,
    Streams,
    TaskSpec,
    collect_digesting,
    lr_schedule,
    run_scenario,
    run_task,
    scaled_iterations,
    snapshot,
    train_iteration,
)
from tdgan.gancore import GanHyper, digesting_gen_grads

HYPER = GanHyper(m=16, n=16, noise_dim=2, g_hidden=(8,), d_hidden=(8,), g_lr=1e-3, d_lr=1e-3)
TRUTH = CondGaussianMixture.build(1, 4, {y: [(1.0, 2.0 * y - 3.0, 0.25)] for y in range(4)})


def tiny_scenario(iterations=3, hyper=HYPER) -> Scenario:
    t1 = TaskSpec((CenterDataset("A", {0: 8, 1: 8}, TRUTH), CenterDataset("B", {1: 4}, TRUTH)), iterations)
    t2 = TaskSpec((CenterDataset("C", {2: 8, 3: 8}, TRUTH),), iterations)
    return Scenario(4, 1, TRUTH, (t1, t2), hyper, seed=7, name="tiny")


def online_centers(datasets, t=1, streams=None):
    streams = streams or Streams(0)
    centers = [DiscriminatorNode(d, 4) for d in datasets]
    for k, c in enumerate(centers):
        c.come_online(HYPER, streams.get("disc-init", t, k))
    return centers


def digests(result):
    return [g.net.digest() for g in result.snapshots]


# --- snapshot and streams


def test_snapshot_is_a_read_only_deep_copy():
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    snap = snapshot(node.gen)
    assert snap.net.digest() == node.gen.net.digest()
    w, _ = snap.net.layers[0]
    assert not w.flags.writeable
    node.gen.net.layers[0][0][0, 0] += 1.0
    assert snap.net.digest() != node.gen.net.digest()


def test_streams_are_path_keyed():
    s = Streams(1, 2)
    assert s.get("gen", 1, 0).random() == Streams(1, 2).get("gen", 1, 0).random()
    assert s.get("gen", 1, 0).random() != s.get("gen", 1, 1).random()
    assert s.get("gen", 1, 0).random() != Streams(1, 3).get("gen", 1, 0).random()


def test_lr_schedule_is_flat_then_linear():
    assert [lr_schedule(i, 4, True) for i in range(4)] == [1.0, 1.0, 1.0, 0.5]
    assert lr_schedule(3, 4, False) == 1.0


def test_scaled_iterations():
    assert scaled_iterations(100, 0.25) == 25
    assert scaled_iterations(100, 1e-6) == 1
    assert scaled_iterations(0, 2.0) == 0
    with pytest.raises(ConfigError):
        scaled_iterations(100, 0.0)


# --- task lifecycle


def test_zero_iteration_task_only_merges_and_freezes():
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    before = node.gen.net.digest()
    centers = online_centers([CenterDataset("A", {0: 3, 2: 1}, TRUTH)])
    run_task(node, centers, 1, HYPER, Streams(0), 0)
    assert node.gen.net.digest() == before
    assert node.frozen.net.digest() == before
    assert node.store == LabelStore({0: 3, 2: 1})
    assert not centers[0].online and centers[0].disc is None


def test_reminding_never_fires_in_first_task():
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    centers = online_centers([CenterDataset("A", {0: 3}, TRUTH)])
    run_task(node, centers, 1, HYPER, Streams(0), 4)
    assert node.reminding_steps == 0
    centers = online_centers([CenterDataset("B", {1: 3}, TRUTH)], t=2)
    run_task(node, centers, 2, HYPER, Streams(0), 4)
    assert node.reminding_steps == 4


def test_later_task_without_frozen_generator_is_state_error():
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    centers = online_centers([CenterDataset("A", {0: 3}, TRUTH)], t=2)
    with pytest.raises(StateError):
        run_task(node, centers, 2, HYPER, Streams(0), 1)


def test_store_is_merged_only_at_task_end():
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    run_task(node, online_centers([CenterDataset("A", {0: 4}, TRUTH)]), 1, HYPER, Streams(0), 1)
    centers = online_centers([CenterDataset("B", {1: 4}, TRUTH)], t=2)
    transport = InProcessTransport(centers)
    streams = Streams(0)
    train_iteration(node, centers, [1.0], HYPER, 2, streams, 0, transport)
    assert node.store == LabelStore({0: 4})


def test_discriminator_is_fresh_each_task():
    dataset = CenterDataset("A", {0: 4}, TRUTH)
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(0))
    first = online_centers([dataset])
    run_task(node, first, 1, HYPER, Streams(0), 2)
    again = online_centers([dataset], t=2)
    assert again[0].opt.step_count == 0


def test_run_scenario_is_deterministic():
    a = run_scenario(tiny_scenario(), seed=3)
    b = run_scenario(tiny_scenario(), seed=3)
    c = run_scenario(tiny_scenario(), seed=4)
    assert digests(a) == digests(b)
    assert digests(a) != digests(c)


def test_lambda_zero_is_bitwise_finetune():
    tdgan0 = run_scenario(tiny_scenario(), seed=1, lam=0.0)
    finetune = run_scenario(tiny_scenario(), seed=1, lam=0.0, reminding=False)
    assert digests(tdgan0) == digests(finetune)
    assert tdgan0.node.reminding_steps == 3 and finetune.node.reminding_steps == 0


def test_reminding_changes_second_task_only():
    with_r = run_scenario(tiny_scenario(), seed=1)
    without = run_scenario(tiny_scenario(), seed=1, reminding=False)
    assert digests(with_r)[0] == digests(without)[0]
    assert digests(with_r)[1] != digests(without)[1]


# --- messages


def test_message_counts_per_iteration():
    iterations = 5
    result = run_scenario(tiny_scenario(iterations), seed=0)
    for transport, k in zip(result.transports, (2, 1)):
        assert transport.counts[("to_generator", "LabelBatch")] == 2 * k * iterations
        assert transport.counts[("to_generator", "Feedback")] == k * iterations
        assert transport.counts[("to_center", "FakeBatch")] == 2 * k * iterations
        assert set(transport.counts) == {
            ("to_generator", "LabelBatch"), ("to_generator", "Feedback"), ("to_center", "FakeBatch")
        }


def test_extra_discriminator_iterations_add_exchanges():
    hyper = replace(HYPER, d_iters=3)
    result = run_scenario(tiny_scenario(2, hyper), seed=0)
    t = result.transports[1]
    assert t.counts[("to_generator", "LabelBatch")] == (3 + 1) * 2
    assert t.counts[("to_generator", "Feedback")] == 2


def test_transport_gradient_matches_monolithic():
    datasets = [CenterDataset("A", {0: 8, 1: 8}, TRUTH), CenterDataset("B", {1: 4, 3: 4}, TRUTH)]
    centers = online_centers(datasets)
    node = GeneratorNode.create(1, 4, HYPER, np.random.default_rng(5))
    transport = InProcessTransport(centers)
    for k, c in enumerate(centers):
        c.begin_iteration(np.random.default_rng(100 + k))
    pis = [2 / 3, 1 / 3]
    grads, value, labels, noise = collect_digesting(node, centers, pis, HYPER, transport, np.random.default_rng(9))
    ref, ref_value = digesting_gen_grads(node.gen, [c.disc for c in centers], pis, labels, None, noise=noise)
    assert abs(value - ref_value) <= 1e-12
    for (a, b), (c, d) in zip(grads, ref):
        assert np.abs(a - c).max() <= 1e-12 and np.abs(b - d).max() <= 1e-12


def test_offline_center_is_protocol_error():
    centers = online_centers([CenterDataset("A", {0: 4}, TRUTH)])
    transport = InProcessTransport(centers)
    centers[0].go_offline()
    with pytest.raises(ProtocolError):
        transport.request_labels("A", 4)
    with pytest.raises(ProtocolError):
        transport.request_labels("nobody", 4)


def test_fakes_must_answer_the_last_label_batch():
    centers = online_centers([CenterDataset("A", {0: 4, 1: 4}, TRUTH)])
    transport = InProcessTransport(centers)
    centers[0].begin_iteration(np.random.default_rng(0))
    lb = transport.request_labels("A", 6)
    with pytest.raises(ProtocolError):
        transport.push_fakes(FakeBatch("A", np.zeros((1, 5)), lb.labels[:5]))
    transport.push_fakes(FakeBatch("A", np.zeros((1, 6)), lb.labels))
    # each label batch is answered once; a replay is refused
    with pytest.raises(ProtocolError):
        transport.push_fakes(FakeBatch("A", np.zeros((1, 6)), lb.labels))


def test_only_labels_and_feedback_reach_the_generator():
    transport = InProcessTransport(online_centers([CenterDataset("A", {0: 4}, TRUTH)]))
    with pytest.raises(ProtocolError):
        transport._to_generator(FakeBatch("A", np.zeros((1, 2)), np.zeros(2, int)))


def _audit(scenario, monkeypatch):
    """Run with every real draw recorded; return (real arrays, generator-bound messages)."""
    drawn = []
    original = CenterDataset._draw_real

    def recorder(self, labels, rng):
        out = original(self, labels, rng)
        drawn.append(out)
        return out

    monkeypatch.setattr(CenterDataset, "_draw_real", recorder)
    result = run_scenario(scenario, seed=0, iters_scale=1e-9, keep_messages=True)
    inbound = [msg for t in result.transports for direction, msg in t.log if direction == "to_generator"]
    return drawn, inbound


@pytest.mark.parametrize("name", ["two_task_disjoint", "two_task_multicenter", "three_task_hetero"])
def test_no_real_sample_reaches_the_generator(name, monkeypatch):
    drawn, inbound = _audit(load_scenario(name), monkeypatch)
    assert drawn and inbound
    for msg in inbound:
        assert isinstance(msg, (LabelBatch, Feedback))
        payload = msg.labels if isinstance(msg, LabelBatch) else msg.grad
        if isinstance(msg, LabelBatch):
            assert payload.dtype.kind == "i"
        for real in drawn:
            assert not np.shares_memory(payload, real)
            assert payload.shape != real.shape or not np.array_equal(payload, real)
