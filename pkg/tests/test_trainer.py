import dataclasses

import numpy as np
import pytest

from kalman_drift import nn
from kalman_drift.config import TrainerConfig
from kalman_drift.data import make_task_sequence
from kalman_drift.kalman import KalmanState
from kalman_drift.trainer import (
    DataExpiredError, DriftStream, MetricSink, pretrain, run_experiment, task_steps,
    train_task_conventional, train_task_kalman,
)
from conftest import toy_splits

TOY = TrainerConfig(architecture=(16, 12, 10), lr=0.3, batch_size=16, epochs_per_task=5,
                    eval_every=5, seed=3, validation_size=60)


def stream_for(config, splits=None):
    return DriftStream(splits or toy_splits(), config.task_sequence())


def test_pretrain_learns_toy_task(splits):
    stream = stream_for(TOY, splits)
    sink = MetricSink()
    params, state = pretrain(TOY, stream.open(0), stream.evals, sink)
    assert nn.evaluate(params, splits.test, TOY.architecture) > 0.9
    np.testing.assert_array_equal(state.estimate, params)
    assert np.all(state.covariance >= TOY.noise_floor)
    # one record per learner at each evaluation point
    assert len(sink.records("conventional")) == len(sink.records("kalman")) > 0


def test_pretrain_deterministic(splits):
    results = []
    for _ in range(2):
        stream = stream_for(TOY, splits)
        results.append(pretrain(TOY, stream.open(0), stream.evals, MetricSink()))
    (p1, s1), (p2, s2) = results
    assert p1.tobytes() == p2.tobytes()
    assert s1.covariance.tobytes() == s2.covariance.tobytes()


def test_pretrain_rejects_non_identity_task(splits):
    stream = stream_for(TOY, splits)
    with pytest.raises(ValueError):
        pretrain(TOY, stream.open(1), stream.evals, MetricSink())


def test_single_batch_single_epoch_is_one_sgd_step():
    splits = toy_splits(n_train=10)
    config = dataclasses.replace(TOY, batch_size=16, epochs_per_task=1)
    stream = stream_for(config, splits)
    data = stream.open(1)
    params = nn.init_params(config.architecture, 0)
    new = train_task_conventional(params, data, config, stream.evals, MetricSink())
    train = data.train("test")
    _, grad = nn.loss_and_grad(params, nn.Batch(train.images, train.labels), config.architecture)
    # a batch is the whole set in shuffled order; the mean gradient is order-invariant
    np.testing.assert_allclose(new - params, -config.lr * grad, rtol=1e-10, atol=1e-15)


def collect(step_list):
    return lambda step, params: step_list.append(params.copy())


def hundred_step_setup():
    # 100 steps: 400 train rows / batch 16 = 25 batches x 4 epochs
    config = dataclasses.replace(TOY, epochs_per_task=4)
    splits = toy_splits(n_train=400)
    stream = stream_for(config, splits)
    params = nn.init_params(config.architecture, 11)
    assert task_steps(400, 16, 4) == 100
    return config, stream, params


def test_gain_one_limit_matches_conventional():
    config, stream, params = hundred_step_setup()
    data = stream.open(1)
    conv, kal = [], []
    train_task_conventional(params.copy(), data, config, stream.evals, MetricSink(), on_step=collect(conv))
    state = KalmanState(params.copy(), np.full(params.shape, 1e300), floor=1e300)
    train_task_kalman(state, data, config, stream.evals, MetricSink(), on_step=collect(kal))
    assert len(conv) == len(kal) == 100
    worst = max(np.abs(a - b).max() for a, b in zip(conv, kal))
    assert worst <= 1e-9


def test_gain_zero_limit_freezes_params():
    config, stream, params = hundred_step_setup()
    data = stream.open(1)
    traj = []
    state = KalmanState(params.copy(), np.full(params.shape, 1e-4), floor=1e-12)
    final, _ = train_task_kalman(state, data, config, stream.evals, MetricSink(),
                                 on_step=collect(traj), noise_fn=lambda p, b: np.full(p.shape, 1e300))
    assert len(traj) == 100
    assert max(np.abs(t - params).max() for t in traj) <= 1e-9
    assert np.abs(final - params).max() <= 1e-9


def test_kalman_step_follows_algorithm(splits):
    """One batch by hand: SGD from the estimate, noise at the stepped model, fuse."""
    config = dataclasses.replace(TOY, batch_size=1000, epochs_per_task=1)
    stream = stream_for(config, splits)
    data = stream.open(1)
    arch = config.architecture
    rng = np.random.default_rng(0)
    x0 = nn.init_params(arch, 5)
    p0 = rng.random(x0.shape) * 1e-3 + 1e-6
    final, state = train_task_kalman(KalmanState(x0.copy(), p0.copy(), 1e-12), data, config,
                                     stream.evals, MetricSink())
    train = data.train("test")
    batch = nn.Batch(train.images, train.labels)
    _, g = nn.loss_and_grad(x0, batch, arch)
    z = x0 - config.lr * g
    _, gz = nn.loss_and_grad(z, batch, arch)
    r = np.maximum(gz**2, 1e-12)
    k = p0 / (p0 + r)
    np.testing.assert_allclose(final, x0 + k * (z - x0), rtol=1e-9, atol=1e-14)
    np.testing.assert_allclose(state.covariance, np.maximum((1 - k) * p0, 1e-12), rtol=1e-9)
    assert np.all(state.covariance <= p0)


def test_closed_task_data_cannot_be_read(splits):
    stream = stream_for(TOY, splits)
    data = stream.open(1)
    data.train("x")
    data.close()
    with pytest.raises(DataExpiredError):
        data.train("x")
    assert len(stream.access.violations()) == 1


def run_toy(config=TOY, threads=None, splits=None):
    return run_experiment(config, stream_for(config, splits), threads=threads)


def test_run_experiment_no_replay_and_schedule():
    report = run_toy()
    access = report.access
    assert access.violations() == []
    for task_index, closed in access.closed_at.items():
        reads = [e.seq for e in access.events if e.task_index == task_index]
        assert reads and max(reads) < closed
    # tasks close in order
    closes = [access.closed_at[i] for i in range(3)]
    assert closes == sorted(closes)


def test_record_counts_steps_and_bounds():
    report = run_toy()
    steps_per_task = task_steps(240, TOY.batch_size, TOY.epochs_per_task)
    per_task = -(-steps_per_task // TOY.eval_every)
    for learner, records in report.series.items():
        assert len(records) == 3 * per_task
        steps = [r.global_step for r in records]
        assert all(b > a for a, b in zip(steps, steps[1:]))
        assert steps[-1] == 3 * steps_per_task
        for r in records:
            assert 0 <= r.acc_pretrain_val <= 1 and 0 <= r.acc_pretrain_test <= 1
            assert 0 <= r.acc_current_val <= 1 and r.loss >= 0


def test_summary_drop_definition():
    report = run_toy()
    for learner, records in report.series.items():
        end0 = [r for r in records if r.task_index == 0][-1]
        end2 = [r for r in records if r.task_index == 2][-1]
        summary = report.summary["learners"][learner]
        assert summary["pretrain_test_drop"] == end0.acc_pretrain_test - end2.acc_pretrain_test
        assert summary["tasks"][2]["acc_current_val"] == end2.acc_current_val


def test_single_task_run_has_zero_drop():
    config = dataclasses.replace(TOY, tasks=("identity",))
    report = run_toy(config)
    for learner in ("conventional", "kalman"):
        assert {r.task_index for r in report.series[learner]} == {0}
        assert report.summary["learners"][learner]["pretrain_test_drop"] == 0.0


def test_runs_are_deterministic_and_thread_independent():
    a, b, c = run_toy(), run_toy(), run_toy(threads=2)
    assert a.series == b.series == c.series
    for learner in a.final_params:
        assert a.final_params[learner].tobytes() == c.final_params[learner].tobytes()


def test_lineages_are_isolated():
    both = run_toy()
    conv = run_toy(dataclasses.replace(TOY, learner="conventional"))
    kal = run_toy(dataclasses.replace(TOY, learner="kalman"))
    assert list(conv.series) == ["conventional"] and list(kal.series) == ["kalman"]
    assert conv.series["conventional"] == both.series["conventional"]
    assert kal.series["kalman"] == both.series["kalman"]


def test_conventional_forgets_and_kalman_retains_on_toy():
    report = run_toy()
    drops = {k: v["pretrain_test_drop"] for k, v in report.summary["learners"].items()}
    # label shift makes the conventional learner predict label + 1 on the original task
    assert drops["conventional"] > 0.5
    assert drops["kalman"] < drops["conventional"]


def test_default_sequence_config():
    assert [t.name for t in TrainerConfig().task_sequence()] == [t.name for t in make_task_sequence()]
