"""Frozen class-prompt embedding banks and the three inference modes.

* ``tcp_infer``: pick the task whose mean prompt is most similar to the
  slide embedding, then the best class inside that task (CLASS-IL).
* ``naive_infer``: global argmax over every class of every task (CLASS-IL).
* ``masked_infer``: argmax restricted to the known task (TASK-IL).

Ties always resolve to the lowest index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, InfeasibleGeometry, ShapeError, UnknownTask
from .linalg import as_matrix


@dataclass(frozen=True)
class TaskPrompts:
    name: str
    class_names: tuple[str, ...]
    class_embeddings: np.ndarray  # c x d

    def __post_init__(self):
        e = as_matrix(self.class_embeddings, f"prompts[{self.name}]").copy()
        e.flags.writeable = False
        object.__setattr__(self, "class_embeddings", e)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if e.shape[0] < 2:
            raise ConfigError(f"task {self.name!r}: needs at least 2 classes, got {e.shape[0]}")
        if len(self.class_names) != e.shape[0]:
            raise ConfigError(f"task {self.name!r}: {len(self.class_names)} names for {e.shape[0]} rows")

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0]

    @property
    def task_embedding(self) -> np.ndarray:
        e = self.class_embeddings
        return np.sum(e, axis=0, keepdims=True) / e.shape[0]


@dataclass(frozen=True)
class PromptBank:
    tasks: tuple[TaskPrompts, ...]
    normalize: bool = False

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        dims = {t.class_embeddings.shape[1] for t in self.tasks}
        if len(dims) > 1:
            raise ShapeError(f"prompt bank mixes embedding widths {sorted(dims)}")

    @property
    def d(self) -> int:
        return self.tasks[0].class_embeddings.shape[1]

    def __len__(self) -> int:
        return len(self.tasks)

    def task(self, t: int) -> TaskPrompts:
        if not 0 <= t < len(self.tasks):
            raise UnknownTask(f"task id {t} not in bank of {len(self.tasks)} tasks")
        return self.tasks[t]

    def subset(self, indices) -> "PromptBank":
        return PromptBank(tuple(self.task(i) for i in indices), self.normalize)

    def with_normalize(self, flag: bool) -> "PromptBank":
        return PromptBank(self.tasks, flag)

    def to_checkpoint(self) -> Checkpoint:
        meta = {"normalize": "1" if self.normalize else "0"}
        for tp in self.tasks:
            meta[f"classes.{tp.name}"] = json.dumps(list(tp.class_names))
        return Checkpoint({tp.name: tp.class_embeddings for tp in self.tasks}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "PromptBank":
        tasks = []
        for name, emb in ckpt.items():
            key = f"classes.{name}"
            if key not in ckpt.meta:
                raise ConfigError(f"prompt checkpoint lacks class names for task {name!r}")
            tasks.append(TaskPrompts(name, tuple(json.loads(ckpt.meta[key])), emb))
        return cls(tuple(tasks), ckpt.meta.get("normalize", "0") == "1")


@dataclass
class Prediction:
    task_id: int
    class_id: int
    task_scores: np.ndarray
    class_scores: np.ndarray = field(repr=False)


def _row(z, d: int) -> np.ndarray:
    z = as_matrix(z, "z")
    if z.shape != (1, d):
        raise ShapeError(f"slide embedding must be 1 x {d}, got {z.shape[0]} x {z.shape[1]}")
    return z[0]


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def class_logits(z, bank: PromptBank, t: int) -> np.ndarray:
    """Dot products of ``z`` with each class prompt of task ``t``."""
    e = bank.task(t).class_embeddings
    zr = _row(z, bank.d)
    if bank.normalize:
        zr, e = _unit(zr), _unit(e)
    return e @ zr


def task_embedding(bank: PromptBank, t: int) -> np.ndarray:
    """Mean of the task's class prompts, as a 1 x d matrix."""
    return bank.task(t).task_embedding


def task_scores(z, bank: PromptBank) -> np.ndarray:
    zr = _row(z, bank.d)
    means = np.vstack([tp.task_embedding for tp in bank.tasks])
    if bank.normalize:
        zr, means = _unit(zr), _unit(means)
    return means @ zr


def _require_tasks(bank: PromptBank) -> None:
    if len(bank) == 0:
        raise ConfigError("prompt bank is empty")


def tcp_infer(z, bank: PromptBank) -> Prediction:
    _require_tasks(bank)
    ts = task_scores(z, bank)
    t_hat = int(np.argmax(ts))
    cs = class_logits(z, bank, t_hat)
    return Prediction(t_hat, int(np.argmax(cs)), ts, cs)


def naive_infer(z, bank: PromptBank) -> Prediction:
    _require_tasks(bank)
    per_task = [class_logits(z, bank, t) for t in range(len(bank))]
    flat = np.concatenate(per_task)
    winner = int(np.argmax(flat))
    bounds = np.cumsum([len(s) for s in per_task])
    t_hat = int(np.searchsorted(bounds, winner, side="right"))
    offset = 0 if t_hat == 0 else int(bounds[t_hat - 1])
    ts = np.array([s.max() for s in per_task])
    return Prediction(t_hat, winner - offset, ts, per_task[t_hat])


def masked_infer(z, bank: PromptBank, true_task: int) -> Prediction:
    cs = class_logits(z, bank, true_task)
    ts = np.full(len(bank), -np.inf)
    ts[true_task] = cs.max()
    return Prediction(true_task, int(np.argmax(cs)), ts, cs)


def synth_prompt_bank(
    class_counts,
    d: int,
    seed: int,
    rho_in: float = 0.3,
    rho_out: float = 0.0,
    task_names=None,
    class_names=None,
    normalize: bool = False,
) -> PromptBank:
    """Unit-norm class prompts with prescribed pairwise cosines.

    Prompts of the same task have cosine ``rho_in``; prompts of different
    tasks have cosine ``rho_out``. The target Gram matrix is factorised and
    the factor rotated by a seeded random orthogonal matrix.
    """
    counts = [int(c) for c in class_counts]
    if any(c < 2 for c in counts):
        raise ConfigError(f"every task needs >= 2 classes, got {counts}")
    total = sum(counts)
    owner = np.repeat(np.arange(len(counts)), counts)
    gram = np.where(owner[:, None] == owner[None, :], rho_in, rho_out).astype(np.float64)
    np.fill_diagonal(gram, 1.0)

    evals, evecs = np.linalg.eigh(gram)
    tol = 1e-10 * total
    if evals[0] < -tol:
        raise InfeasibleGeometry(
            f"rho_in={rho_in}, rho_out={rho_out}: Gram matrix not positive semidefinite "
            f"(min eigenvalue {evals[0]:.3g})"
        )
    rank = int(np.count_nonzero(evals > tol))
    if rank > d:
        raise InfeasibleGeometry(f"{total} prompts with these similarities need {rank} dimensions, d={d}")
    evals, evecs = evals[::-1][:rank], evecs[:, ::-1][:, :rank]
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))  # total x rank

    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))
    emb = factor @ q[:rank, :]
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)

    names = task_names or [f"task{i}" for i in range(len(counts))]
    tasks, start = [], 0
    for i, c in enumerate(counts):
        cn = class_names[i] if class_names else [f"class{j}" for j in range(c)]
        tasks.append(TaskPrompts(names[i], tuple(cn), emb[start:start + c]))
        start += c
    return PromptBank(tuple(tasks), normalize)
