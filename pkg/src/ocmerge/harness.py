"""End-to-end lifelong runs over a stream: fine-tune, merge, evaluate.

Methods
-------
merge_tcp        per-task fine-tuning from the base, orthogonal merging, task-to-class inference
merge_naive      same weights as merge_tcp, global argmax over every seen class
avg_merge        per-task fine-tuning, uniform task-vector averaging, global argmax
seq_finetune     keep fine-tuning one set of weights task after task (no merging)
zero_shot        base weights only
per_task_oracle  each task evaluated with its own fine-tuned weights (upper reference)
"""
from __future__ import annotations

import math
import os
import time
from dataclasses import astuple, dataclass, field, replace

import numpy as np

from .aggregator import Bag, TrainConfig, forward, init_params, subsample, train_task
from .checkpoint import Checkpoint, save
from .errors import ConfigError, NumericalError
from .merge import average_merge, finalize, init_state, merge_step
from .metrics import MODES, AccuracyMatrix, MetricReport, balanced_accuracy, metric_report, overall_accuracy
from .prompts import PromptBank, masked_infer, naive_infer, tcp_infer
from .stream import Stream, make_bag, task_key

METHODS = ("merge_tcp", "merge_naive", "avg_merge", "seq_finetune", "zero_shot", "per_task_oracle")
MERGE_METHODS = ("merge_tcp", "merge_naive", "avg_merge")


@dataclass
class HarnessConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    base_gain: float = 1.0
    base_noise: float = 1.5
    base_bias: float = 0.1
    base_scale: float = 4.0
    pretrain_epochs: int = 6         # 0 keeps the raw random base
    pretrain_bags: int = 5           # per class
    per_param: bool = False
    bank_scope: str = "seen"       # seen | all
    mean_mode: str = "final"       # final | running
    eval_k: int = 64

    def __post_init__(self):
        if self.bank_scope not in ("seen", "all"):
            raise ConfigError(f"bank_scope must be 'seen' or 'all', got {self.bank_scope!r}")
        if self.mean_mode not in ("final", "running"):
            raise ConfigError(f"mean_mode must be 'final' or 'running', got {self.mean_mode!r}")
        if self.pretrain_epochs < 0 or self.pretrain_bags < 1:
            raise ConfigError("pretrain_epochs must be >= 0 and pretrain_bags >= 1")


@dataclass
class RunResult:
    method: str
    seed: int
    fold: int
    task_names: list[str]
    matrices: dict[str, AccuracyMatrix]
    report: MetricReport
    timings: dict
    checkpoints: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "fold": self.fold,
            "tasks": self.task_names,
            "metrics": self.report.to_dict(),
            "accuracy": {mode: m.rows() for mode, m in self.matrices.items()},
        }


class TaskCache:
    """Weights shared between methods: the base and per-task fine-tunes.

    Keys never depend on task order, so reordering a stream reuses them.
    """

    def __init__(self):
        self._store: dict[tuple, object] = {}

    def get(self, key):
        return self._store.get(key)

    def put(self, key, value) -> None:
        self._store[key] = value


def pretrain_set(stream: Stream, hyper: HarnessConfig, seed: int) -> tuple[list[Bag], np.ndarray]:
    """Fresh bags labelled by task, against the task-mean prompts.

    Tasks are visited in name order and drawn from their own seeded
    generators, so the result does not depend on the stream's task order.
    The stream's train and test bags are never touched.
    """
    order = sorted(range(len(stream)), key=lambda t: stream.tasks[t].name)
    bags = []
    for label, t in enumerate(order):
        rng = np.random.default_rng([seed, stream.config.seed, task_key(stream.tasks[t].name), 0x9E7])
        for proto in stream.bank.task(t).class_embeddings:
            bags += [make_bag(rng, proto, stream.config, label, label) for _ in range(hyper.pretrain_bags)]
    means = np.vstack([stream.bank.task(t).task_embedding for t in order])
    return bags, means


def base_params(stream: Stream, hyper: HarnessConfig, seed: int, cache: TaskCache | None = None) -> Checkpoint:
    """Stand-in for pretrained weights.

    A random near-identity aggregator, then (unless ``pretrain_epochs`` is
    0) a short coarse pretraining that only teaches which task a slide
    belongs to. The base thus recognises tasks but not the classes within
    them, which is what fine-tuning is for.
    """
    key = ("base", seed, stream.config.seed, stream.config.d, hyper.base_gain, hyper.base_noise,
           hyper.base_bias, hyper.base_scale, hyper.pretrain_epochs, hyper.pretrain_bags,
           astuple(hyper.train), tuple(sorted(td.name for td in stream.tasks)))
    hit = cache.get(key) if cache is not None else None
    if hit is not None:
        return hit
    base = init_params(stream.config.d, seed, hyper.base_gain, hyper.base_noise, hyper.base_bias, hyper.base_scale)
    if hyper.pretrain_epochs > 0:
        bags, means = pretrain_set(stream, hyper, seed)
        cfg = replace(hyper.train, epochs=hyper.pretrain_epochs)
        base, _ = train_task(bags, base, means, cfg, np.random.default_rng([seed, 0x9E7]))
    base = base.with_meta(kind="base", seed=str(seed))
    if cache is not None:
        cache.put(key, base)
    return base


def _cache_key(stream: Stream, hyper: HarnessConfig, seed: int, name: str) -> tuple:
    return ("task", seed, stream.config.seed, stream.config.fold, name, stream.config.d, hyper.base_gain,
            hyper.base_noise, hyper.base_bias, hyper.base_scale, hyper.pretrain_epochs, hyper.pretrain_bags,
            astuple(hyper.train))


def train_rng(seed: int, fold: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, fold, task_key(name), 0x7A1])


def _embeddings(stream: Stream, t: int, params: Checkpoint, hyper: HarnessConfig, seed: int) -> np.ndarray:
    """Slide embeddings of task ``t``'s test bags, one row each."""
    name = stream.tasks[t].name
    rows = []
    for i, bag in enumerate(stream.test_bags(t)):
        # same subsample for every method and step so comparisons are paired
        rng = np.random.default_rng([seed, stream.config.fold, task_key(name), i, 0xE7A1])
        rows.append(forward(subsample(bag, hyper.eval_k, rng).patches, params)[0])
    return np.vstack(rows)


def _score(z: np.ndarray, stream: Stream, t: int, bank: PromptBank, tcp: bool) -> dict[str, float]:
    """Overall/balanced CLASS-IL and balanced TASK-IL accuracy for task ``t``."""
    labels = np.array([b.label for b in stream.test_bags(t)])
    n_classes = bank.task(t).n_classes
    class_il, task_il = [], []
    for row in z:
        zr = row[None, :]
        pred = tcp_infer(zr, bank) if tcp else naive_infer(zr, bank)
        # a wrong task can never be a correct class
        class_il.append(pred.class_id if pred.task_id == t else n_classes)
        task_il.append(masked_infer(zr, bank, t).class_id)
    return {
        "class_il_overall": overall_accuracy(labels, class_il),
        "class_il_balanced": balanced_accuracy(labels, class_il, n_classes),
        "task_il_balanced": balanced_accuracy(labels, task_il, n_classes),
    }


def _fine_tune(stream: Stream, t: int, init: Checkpoint, hyper: HarnessConfig, seed: int):
    name = stream.tasks[t].name
    e = stream.bank.task(t).class_embeddings
    params, history = train_task(stream.train_bags(t), init, e, hyper.train, train_rng(seed, stream.config.fold, name))
    if history and not all(math.isfinite(x) for x in history):
        raise NumericalError(f"task {name}: non-finite training loss")
    return params.with_meta(task=name), history


def run_stream(stream: Stream, method: str, hyper: HarnessConfig | None = None, seed: int = 0,
               cache: TaskCache | None = None, ckpt_dir=None) -> RunResult:
    """Process the stream's tasks in order and fill the accuracy matrices row by row.

    With ``ckpt_dir`` set, the weights in use after each task are saved there.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    if len(stream) == 0:
        raise ConfigError("stream has no tasks")
    hyper = hyper or HarnessConfig()
    fold = stream.config.fold
    bank = stream.bank.with_normalize(hyper.train.normalize)
    T = len(stream)
    base = base_params(stream, hyper, seed, cache)
    tcp = method == "merge_tcp"
    log = stream.access_log

    values = {mode: np.full((T, T), np.nan) for mode in MODES}
    ft_time, merge_time, eval_time = [], [], 0.0
    n_eval = 0
    state = init_state(base, per_param=hyper.per_param) if method in ("merge_tcp", "merge_naive") else None
    finetuned: list[Checkpoint] = []
    current = base
    ckpt_paths = []
    if ckpt_dir is not None:
        os.makedirs(ckpt_dir, exist_ok=True)

    for k in range(T):
        if log is not None:
            log.current = k
        name = stream.tasks[k].name
        t0 = time.perf_counter()
        if method == "zero_shot":
            current = base
        elif method == "seq_finetune":
            current, _ = _fine_tune(stream, k, current, hyper, seed)
        else:
            key = _cache_key(stream, hyper, seed, name)
            hit = cache.get(key) if cache is not None else None
            if hit is None:
                theta, _ = _fine_tune(stream, k, base, hyper, seed)
                hit = (theta, time.perf_counter() - t0)
                if cache is not None:
                    cache.put(key, hit)
            finetuned.append(hit[0])
        # cached weights report the time it took to train them originally
        ft_time.append(hit[1] if method not in ("zero_shot", "seq_finetune") else time.perf_counter() - t0)

        t1 = time.perf_counter()
        if state is not None:
            state = merge_step(state, finetuned[-1])
            current = finalize(state)
        elif method == "avg_merge":
            current = average_merge(base, finetuned)
        merge_time.append(time.perf_counter() - t1)

        if ckpt_dir is not None and method != "zero_shot":
            path = os.path.join(ckpt_dir, f"after_{k:02d}_{name}.msld")
            save(current if method != "per_task_oracle" else finetuned[-1], path)
            ckpt_paths.append(path)

        t2 = time.perf_counter()
        seen = range(T) if hyper.bank_scope == "all" else range(k + 1)
        eval_bank = bank.subset(seen)
        for t in range(k + 1):
            params = finetuned[t] if method == "per_task_oracle" else current
            z = _embeddings(stream, t, params, hyper, seed)
            n_eval += z.shape[0]
            for mode, acc in _score(z, stream, t, eval_bank, tcp).items():
                if not math.isfinite(acc):
                    raise NumericalError(f"{method}: non-finite {mode} on task {t} after {k}")
                values[mode][k, t] = acc
        eval_time += time.perf_counter() - t2

    if log is not None:
        log.current = None
    matrices = {mode: AccuracyMatrix(v, mode) for mode, v in values.items()}
    report = metric_report(matrices, stream.class_counts(), stream.test_sizes(), hyper.mean_mode)
    timings = {
        "finetune_s_per_task": float(np.mean(ft_time)),
        "merge_s_per_task": float(np.mean(merge_time)),
        "train_total_s": float(np.sum(ft_time) + np.sum(merge_time)),
        "inference_s": eval_time,
        "slides_per_s": n_eval / eval_time if eval_time > 0 else 0.0,
    }
    return RunResult(method, seed, fold, [td.name for td in stream.tasks], matrices, report, timings, ckpt_paths)
