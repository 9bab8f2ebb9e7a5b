"""Sequential-task training of a conventional and a Kalman-filtered learner.

Both learners start from one pre-trained network and then see the remaining
tasks in order. Each task's training and validation data is opened when the
task starts and closed when it ends; the access log records every read so a
run can prove that no task's data was touched again after its task ended.
"""
from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nn
from .config import LEARNERS, TrainerConfig
from .data import Dataset, MnistSplits, TaskSpec, apply_transform, batches, num_batches
from .kalman import KalmanState, init_kalman, kalman_predict, kalman_update, measurement_noise

log = logging.getLogger(__name__)

StepHook = Callable[[int, np.ndarray], None]
NoiseFn = Callable[[np.ndarray, nn.Batch], np.ndarray]


@dataclass(frozen=True)
class MetricRecord:
    global_step: int
    task_index: int
    learner: str
    acc_pretrain_val: float
    acc_pretrain_test: float
    acc_current_val: float
    loss: float


class MetricSink:
    """Append-only record stream, safe to feed from several lineages at once."""

    def __init__(self):
        self._records: list[MetricRecord] = []
        self._lock = threading.Lock()

    def append(self, record: MetricRecord) -> None:
        with self._lock:
            self._records.append(record)

    def records(self, learner: str | None = None) -> list[MetricRecord]:
        with self._lock:
            out = list(self._records)
        if learner is not None:
            out = [r for r in out if r.learner == learner]
        return out

    def __len__(self) -> int:
        return len(self._records)


# -- instrumented data access ---------------------------------------------------

class DataExpiredError(RuntimeError):
    """A task's data was requested after the task ended."""


@dataclass(frozen=True)
class AccessEvent:
    seq: int
    task_index: int
    split: str
    reader: str
    after_close: bool


class AccessLog:
    def __init__(self):
        self.events: list[AccessEvent] = []
        self.closed_at: dict[int, int] = {}
        self._seq = 0
        self._lock = threading.Lock()

    def _next(self) -> int:
        self._seq += 1
        return self._seq

    def read(self, task_index: int, split: str, reader: str) -> AccessEvent:
        with self._lock:
            event = AccessEvent(self._next(), task_index, split, reader,
                                task_index in self.closed_at)
            self.events.append(event)
        return event

    def close(self, task_index: int) -> None:
        with self._lock:
            self.closed_at.setdefault(task_index, self._next())

    def violations(self) -> list[AccessEvent]:
        return [e for e in self.events
                if e.task_index in self.closed_at and e.seq > self.closed_at[e.task_index]]


class TaskData:
    """Training and validation split of one task, read through the access log."""

    def __init__(self, index: int, task: TaskSpec, train: Dataset, validation: Dataset,
                 access: AccessLog):
        self.index = index
        self.task = task
        self._splits: dict[str, Dataset] | None = {"train": train, "validation": validation}
        self._access = access

    def _get(self, split: str, reader: str) -> Dataset:
        event = self._access.read(self.index, split, reader)
        if event.after_close or self._splits is None:
            raise DataExpiredError(f"task {self.index} ({self.task.name}) {split} data read after the task ended")
        return self._splits[split]

    def train(self, reader: str) -> Dataset:
        return self._get("train", reader)

    def validation(self, reader: str) -> Dataset:
        return self._get("validation", reader)

    @property
    def num_train(self) -> int:
        return len(self._splits["train"]) if self._splits else 0

    def close(self) -> None:
        self._splits = None
        self._access.close(self.index)


@dataclass(frozen=True)
class EvalSets:
    """Held-out data of the pre-training task, evaluated throughout the run."""
    validation: Dataset
    test: Dataset


class DriftStream:
    """Hands out task data one task at a time."""

    def __init__(self, splits: MnistSplits, tasks: Sequence[TaskSpec], access: AccessLog | None = None):
        if not tasks:
            raise ValueError("task sequence is empty")
        if tasks[0].transform.kind != "identity":
            raise ValueError("the first task must use the identity transform")
        self.tasks = list(tasks)
        self.access = access or AccessLog()
        self.evals = EvalSets(splits.validation, splits.test)
        self._train = splits.train
        self._validation = splits.validation

    def open(self, index: int) -> TaskData:
        task = self.tasks[index]
        return TaskData(index, task,
                        apply_transform(self._train, task.transform),
                        apply_transform(self._validation, task.transform),
                        self.access)


# -- training loops ---------------------------------------------------------------

def epoch_seed(seed: int, task_index: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, task_index, epoch]).generate_state(1)[0])


def task_steps(n_train: int, batch_size: int, epochs: int) -> int:
    return num_batches(n_train, batch_size) * epochs


def full_gradient(params: np.ndarray, dataset: Dataset, arch, chunk: int = 4096) -> np.ndarray:
    """Mean-loss gradient over the whole dataset, accumulated in chunks."""
    total = np.zeros_like(params)
    for start in range(0, len(dataset), chunk):
        part = nn.Batch(dataset.images[start:start + chunk], dataset.labels[start:start + chunk])
        _, grad = nn.loss_and_grad(params, part, arch)
        total += grad * len(part.labels)
    return total / len(dataset)


def _run_task(
    params: np.ndarray,
    step: Callable[[np.ndarray, nn.Batch], tuple[np.ndarray, float]],
    data: TaskData,
    config: TrainerConfig,
    evals: EvalSets,
    sink,
    learners: Sequence[str],
    start_step: int,
    on_step: StepHook | None,
) -> np.ndarray:
    arch = config.architecture
    reader = learners[0]
    total = task_steps(data.num_train, config.batch_size, data.task.epochs)
    done = 0
    loss_sum, loss_count = 0.0, 0
    for epoch in range(data.task.epochs):
        train = data.train(reader)
        for batch in batches(train, config.batch_size, epoch_seed(config.seed, data.index, epoch)):
            params, loss = step(params, batch)
            done += 1
            loss_sum += loss
            loss_count += 1
            if on_step is not None:
                on_step(done, params)
            if done % config.eval_every == 0 or done == total:
                acc_val = nn.evaluate(params, evals.validation, arch)
                acc_test = nn.evaluate(params, evals.test, arch)
                acc_cur = acc_val if data.index == 0 else nn.evaluate(params, data.validation(reader), arch)
                for learner in learners:
                    sink.append(MetricRecord(start_step + done, data.index, learner,
                                             acc_val, acc_test, acc_cur, loss_sum / loss_count))
                loss_sum, loss_count = 0.0, 0
    return params


def _sgd(arch, lr):
    def step(params, batch):
        loss, grad = nn.loss_and_grad(params, batch, arch)
        return nn.sgd_step(params, grad, lr), loss
    return step


def pretrain(
    config: TrainerConfig,
    data: TaskData,
    evals: EvalSets,
    sink,
    learners: Sequence[str] = LEARNERS,
    on_step: StepHook | None = None,
) -> tuple[np.ndarray, KalmanState]:
    """Train a fresh network on task 0 with plain SGD and seed the filter.

    The filter's initial covariance comes from the mean gradient of the
    trained network over the full task-0 training split. One metric record
    per learner is emitted at every evaluation point.
    """
    if data.task.transform.kind != "identity":
        raise ValueError("pre-training must run on the identity task")
    arch = config.architecture
    params = nn.init_params(arch, config.seed)
    params = _run_task(params, _sgd(arch, config.lr), data, config, evals, sink,
                       learners, 0, on_step)
    grad = full_gradient(params, data.train(learners[0]), arch)
    state = init_kalman(params, grad, config.noise_floor, config.noise_transform)
    return params, state


def train_task_conventional(
    params: np.ndarray,
    data: TaskData,
    config: TrainerConfig,
    evals: EvalSets,
    sink,
    start_step: int = 0,
    on_step: StepHook | None = None,
) -> np.ndarray:
    return _run_task(params, _sgd(config.architecture, config.lr), data, config, evals,
                     sink, ("conventional",), start_step, on_step)


def train_task_kalman(
    state: KalmanState,
    data: TaskData,
    config: TrainerConfig,
    evals: EvalSets,
    sink,
    start_step: int = 0,
    on_step: StepHook | None = None,
    noise_fn: NoiseFn | None = None,
) -> tuple[np.ndarray, KalmanState]:
    """Kalman-filtered SGD on one task.

    Per batch: take an SGD step from the current estimate, measure the noise
    of the stepped model on the same batch, then fuse the stepped model into
    the estimate. The fused estimate is the model that is evaluated and that
    takes the next step.
    """
    arch = config.architecture
    if noise_fn is None:
        def noise_fn(params, batch):
            return measurement_noise(params, batch, arch, config.noise_floor, config.noise_transform)

    current = state

    def step(estimate, batch):
        nonlocal current
        loss, grad = nn.loss_and_grad(estimate, batch, arch)
        measured = nn.sgd_step(estimate, grad, config.lr)
        noise = noise_fn(measured, batch)
        current = kalman_update(kalman_predict(current), measured, noise)
        return current.estimate, loss

    params = _run_task(state.estimate, step, data, config, evals, sink,
                       ("kalman",), start_step, on_step)
    return params, current


# -- experiment -------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    tasks: list[TaskSpec]
    series: dict[str, list[MetricRecord]]
    summary: dict
    final_params: dict[str, np.ndarray] = field(default_factory=dict)
    kalman_state: KalmanState | None = None
    access: AccessLog | None = None


def _summarise(tasks: Sequence[TaskSpec], series: dict[str, list[MetricRecord]],
               initial_cov: np.ndarray, access: AccessLog) -> dict:
    learners = {}
    for learner, records in series.items():
        finals = []
        for index, task in enumerate(tasks):
            last = [r for r in records if r.task_index == index][-1]
            finals.append({
                "task_index": index,
                "name": task.name,
                "transform": task.transform.describe(),
                "global_step": last.global_step,
                "acc_pretrain_val": last.acc_pretrain_val,
                "acc_pretrain_test": last.acc_pretrain_test,
                "acc_current_val": last.acc_current_val,
            })
        learners[learner] = {
            "tasks": finals,
            "pretrain_test_drop": finals[0]["acc_pretrain_test"] - finals[-1]["acc_pretrain_test"],
            "pretrain_val_drop": finals[0]["acc_pretrain_val"] - finals[-1]["acc_pretrain_val"],
        }
    return {
        "learners": learners,
        "kalman_initial_covariance": {
            "median": float(np.median(initial_cov)),
            "mean": float(np.mean(initial_cov)),
            "max": float(np.max(initial_cov)),
        },
        "data_reads_after_task_end": len(access.violations()),
    }


def run_experiment(
    config: TrainerConfig,
    stream: DriftStream,
    sink: MetricSink | None = None,
    threads: int | None = None,
) -> ExperimentReport:
    """Pre-train once, then carry each requested learner through tasks 1..end.

    Lineages share nothing but the pre-trained starting point. With
    ``threads > 1`` they train side by side within each task; task data is
    closed only after every lineage has finished with it.
    """
    sink = sink if sink is not None else MetricSink()
    learners = config.learners()
    evals = stream.evals
    tasks = stream.tasks

    data = stream.open(0)
    log.info("pre-training on %s for %d epochs", tasks[0].name, tasks[0].epochs)
    params, state = pretrain(config, data, evals, sink, learners)
    step = task_steps(data.num_train, config.batch_size, tasks[0].epochs)
    data.close()
    initial_cov = state.covariance.copy()

    models: dict[str, object] = {}
    if "conventional" in learners:
        models["conventional"] = params.copy()
    if "kalman" in learners:
        models["kalman"] = state.copy()

    workers = max(1, min(threads or len(models), len(models)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for index in range(1, len(tasks)):
            data = stream.open(index)
            log.info("task %d: %s (%s)", index, tasks[index].name, tasks[index].transform.describe())
            futures = {}
            if "conventional" in models:
                futures["conventional"] = pool.submit(
                    train_task_conventional, models["conventional"], data, config, evals, sink, step)
            if "kalman" in models:
                futures["kalman"] = pool.submit(
                    train_task_kalman, models["kalman"], data, config, evals, sink, step)
            for learner, future in futures.items():
                result = future.result()
                models[learner] = result[1] if learner == "kalman" else result
            step += task_steps(data.num_train, config.batch_size, tasks[index].epochs)
            data.close()

    series = {learner: sorted(sink.records(learner), key=lambda r: r.global_step)
              for learner in learners}
    final_params = {learner: (m.estimate if isinstance(m, KalmanState) else m)
                    for learner, m in models.items()}
    return ExperimentReport(
        config=config.to_dict(),
        tasks=tasks,
        series=series,
        summary=_summarise(tasks, series, initial_cov, stream.access),
        final_params=final_params,
        kalman_state=models.get("kalman"),
        access=stream.access,
    )


def records_in_order(report: ExperimentReport) -> Iterable[MetricRecord]:
    for learner in LEARNERS:
        yield from report.series.get(learner, [])
