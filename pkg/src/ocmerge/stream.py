"""Synthetic lifelong-learning streams of slide bags.

Each class owns a prompt embedding that doubles as its prototype. A bag
holds ``round(signal_fraction * n)`` patches drawn around the prototype and
the rest drawn around the origin, both with isotropic Gaussian noise.

On disk a stream is a directory::

    stream.json          generating config
    prompts.msld         prompt bank (checkpoint format)
    task_00.msbg ...     one bag file per task

Bag files use the checkpoint conventions (little-endian, no padding)::

    b"MSBG" | u32 version=1 | u32 name_len, name | u32 n_train | u32 n_test
    { u32 label, u32 task_id, i32 site_id (-1 = none), u64 rows, u64 cols, f64[] }*
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .aggregator import Bag
from .checkpoint import _Reader, load, read_file, save, write_file
from .errors import ConfigError, IOFailure
from .prompts import PromptBank, synth_prompt_bank

BAG_MAGIC = b"MSBG"
BAG_VERSION = 1

# WSIs per subtype for six cohorts; the default stream scales these by 1/10.
COHORTS = (
    ("BRCA", ("IDC", "ILC"), (726, 149)),
    ("RCC", ("CC", "P", "ChRCC"), (498, 289, 118)),
    ("NSCLC", ("SCC", "A"), (845, 109)),
    ("ESCA", ("SCC", "A"), (114, 86)),
    ("TGCT", ("S", "MGCT"), (66, 29)),
    ("CESC", ("A", "SCC"), (270, 49)),
)

# Rare and common cohorts interleaved, as indices into COHORTS.
ALTERNATING_ORDERS = (
    (0, 5, 1, 4, 2, 3),
    (3, 2, 4, 1, 5, 0),
    (5, 0, 4, 1, 3, 2),
    (2, 3, 1, 4, 0, 5),
)


@dataclass
class TaskSpec:
    name: str
    class_names: list[str]
    train_counts: list[int]
    test_counts: list[int]

    def __post_init__(self):
        n = len(self.class_names)
        if n < 2:
            raise ConfigError(f"task {self.name!r}: needs >= 2 classes")
        if len(self.train_counts) != n or len(self.test_counts) != n:
            raise ConfigError(f"task {self.name!r}: count lists must match {n} classes")
        if min(self.train_counts) < 1 or min(self.test_counts) < 1:
            raise ConfigError(f"task {self.name!r}: every class needs >= 1 train and test bag")


@dataclass
class StreamConfig:
    tasks: list[TaskSpec]
    d: int = 32
    patches_min: int = 32
    patches_max: int = 96
    signal_fraction: float = 0.5
    noise: float = 0.5
    rho_in: float = 0.7
    rho_out: float = 0.0
    n_sites: int = 0
    shift_std: float = 0.0
    ood_test: bool = False
    seed: int = 0
    fold: int = 0

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("stream needs at least one task")
        if not 0.0 < self.signal_fraction <= 1.0:
            raise ConfigError(f"signal_fraction must be in (0, 1], got {self.signal_fraction}")
        if not 1 <= self.patches_min <= self.patches_max:
            raise ConfigError("need 1 <= patches_min <= patches_max")
        if self.noise < 0 or self.shift_std < 0:
            raise ConfigError("noise and shift_std must be non-negative")
        if self.ood_test and self.n_sites < 2:
            raise ConfigError("ood_test needs n_sites >= 2")
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError("task names must be unique")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "StreamConfig":
        data = dict(data)
        data["tasks"] = [TaskSpec(**t) for t in data["tasks"]]
        return cls(**data)


def default_tasks(scale: float = 0.1, test_fraction: float = 1 / 3, min_test: int = 5,
                  min_train: int = 3) -> list[TaskSpec]:
    """Six tasks with the ``COHORTS`` class counts, bag counts scaled by ``scale``.

    ``test_fraction`` of each class goes to test (at least ``min_test``
    bags); the default matches one held-out fold of three.
    """
    tasks = []
    for name, classes, counts in COHORTS:
        train, test = [], []
        for c in counts:
            n = int(np.floor(c * scale + 0.5))
            n_test = max(min_test, int(np.floor(n * test_fraction + 0.5)))
            test.append(n_test)
            train.append(max(min_train, n - n_test))
        tasks.append(TaskSpec(name, list(classes), train, test))
    return tasks


def default_config(**overrides) -> StreamConfig:
    return StreamConfig(tasks=default_tasks(), **overrides)


@dataclass
class TaskData:
    name: str
    train: list[Bag]
    test: list[Bag]


class AccessLog:
    """Records ``(processing_task, accessed_task)`` for every training-set read."""

    def __init__(self):
        self.current: int | None = None
        self.reads: list[tuple[int | None, int]] = []

    def violations(self) -> list[tuple[int, int]]:
        return [(j, i) for j, i in self.reads if j is not None and i < j]


@dataclass
class Stream:
    config: StreamConfig
    bank: PromptBank
    tasks: list[TaskData]
    access_log: AccessLog | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.tasks)

    def train_bags(self, t: int) -> list[Bag]:
        if self.access_log is not None:
            self.access_log.reads.append((self.access_log.current, t))
        return self.tasks[t].train

    def test_bags(self, t: int) -> list[Bag]:
        return self.tasks[t].test

    def class_counts(self) -> list[int]:
        return [tp.n_classes for tp in self.bank.tasks]

    def test_sizes(self) -> list[int]:
        return [len(td.test) for td in self.tasks]


def task_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_bag(rng, proto, cfg: StreamConfig, label: int, task_id: int, site: int | None = None, shifts=None) -> Bag:
    """One bag: a signal share of patches around ``proto``, the rest around the origin."""
    d = cfg.d
    n = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
    n_sig = max(1, int(np.floor(cfg.signal_fraction * n + 0.5)))
    patches = cfg.noise * rng.standard_normal((n, d))
    patches[:n_sig] += proto
    patches = patches[rng.permutation(n)]
    if site is not None and shifts is not None:
        patches += shifts[site]
    return Bag(patches, label, task_id, site)


def gen_stream(config: StreamConfig) -> Stream:
    """Deterministic stream from ``config.seed`` (prompts) and ``config.fold`` (bags)."""
    bank = synth_prompt_bank(
        [len(t.class_names) for t in config.tasks],
        config.d,
        seed=config.seed,
        rho_in=config.rho_in,
        rho_out=config.rho_out,
        task_names=[t.name for t in config.tasks],
        class_names=[t.class_names for t in config.tasks],
    )
    shifts = None
    if config.n_sites > 0:
        srng = np.random.default_rng([config.seed, 0x517E])
        shifts = config.shift_std * srng.standard_normal((config.n_sites, config.d))
    tasks = []
    for t, spec in enumerate(config.tasks):
        rng = np.random.default_rng([config.seed, config.fold, task_key(spec.name)])
        protos = bank.tasks[t].class_embeddings
        train, test = [], []
        for j in range(len(spec.class_names)):
            for split, count in ((train, spec.train_counts[j]), (test, spec.test_counts[j])):
                for _ in range(count):
                    site = None
                    if config.n_sites > 0:
                        if config.ood_test:
                            # train on the first half of sites, test on the rest
                            half = config.n_sites // 2
                            lo, hi = (0, half) if split is train else (half, config.n_sites)
                        else:
                            lo, hi = 0, config.n_sites
                        site = int(rng.integers(lo, hi))
                    split.append(make_bag(rng, protos[j], config, j, t, site, shifts))
        tasks.append(TaskData(spec.name, train, test))
    return Stream(config, bank, tasks)


def _relabel(bags: list[Bag], task_id: int) -> list[Bag]:
    return [Bag(b.patches, b.label, task_id, b.site_id) for b in bags]


def permute_tasks(stream: Stream, order) -> Stream:
    """Reorder tasks; bag contents and prompts are shared, task ids renumbered."""
    order = [int(i) for i in order]
    if sorted(order) != list(range(len(stream))):
        raise ConfigError(f"{order} is not a permutation of {len(stream)} tasks")
    tasks = []
    for new_id, old in enumerate(order):
        td = stream.tasks[old]
        tasks.append(TaskData(td.name, _relabel(td.train, new_id), _relabel(td.test, new_id)))
    cfg = replace(stream.config, tasks=[stream.config.tasks[i] for i in order])
    bank = stream.bank.subset(order)
    return Stream(cfg, bank, tasks)


def _bag_bytes(bags: list[Bag]) -> list[bytes]:
    out = []
    for b in bags:
        site = -1 if b.site_id is None else b.site_id
        rows, cols = b.patches.shape
        out.append(struct.pack("<IIiQQ", b.label, b.task_id, site, rows, cols))
        out.append(np.ascontiguousarray(b.patches).astype("<f8", copy=False).tobytes())
    return out


def task_to_bytes(td: TaskData) -> bytes:
    name = td.name.encode("utf-8")
    parts = [BAG_MAGIC, struct.pack("<I", BAG_VERSION), struct.pack("<I", len(name)), name,
             struct.pack("<II", len(td.train), len(td.test))]
    parts += _bag_bytes(td.train) + _bag_bytes(td.test)
    return b"".join(parts)


def task_from_bytes(buf: bytes, what: str = "bag file") -> TaskData:
    r = _Reader(buf, what)
    r.header(BAG_MAGIC, BAG_VERSION)
    name = r.string()
    n_train, n_test = r.u32(), r.u32()

    def read_bag() -> Bag:
        label, task_id, site = r.u32(), r.u32(), r.i32()
        return Bag(r.matrix(), label, task_id, None if site < 0 else site)

    train = [read_bag() for _ in range(n_train)]
    test = [read_bag() for _ in range(n_test)]
    r.done()
    return TaskData(name, train, test)


def save_stream(stream: Stream, out_dir) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IOFailure(f"cannot create {out_dir}: {exc.strerror}") from exc
    payload = json.dumps(stream.config.to_dict(), indent=2, sort_keys=True) + "\n"
    write_file(os.path.join(out_dir, "stream.json"), payload.encode("utf-8"))
    save(stream.bank.to_checkpoint(), os.path.join(out_dir, "prompts.msld"))
    for t, td in enumerate(stream.tasks):
        write_file(os.path.join(out_dir, f"task_{t:02d}.msbg"), task_to_bytes(td))


def load_stream(in_dir) -> Stream:
    try:
        cfg = StreamConfig.from_dict(json.loads(read_file(os.path.join(in_dir, "stream.json"))))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{in_dir}/stream.json: {exc}") from exc
    bank = PromptBank.from_checkpoint(load(os.path.join(in_dir, "prompts.msld")))
    tasks = []
    for t in range(len(cfg.tasks)):
        path = os.path.join(in_dir, f"task_{t:02d}.msbg")
        tasks.append(task_from_bytes(read_file(path), path))
    return Stream(cfg, bank, tasks)
