"""INI run configuration: [stream], [train], [merge], [run], optional [task:NAME].

Every key is declared in ``SCHEMA`` with its type and a help line; anything
else is rejected. Missing keys fall back to the dataclass defaults.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields, replace
from importlib import resources

from .aggregator import TrainConfig
from .errors import ConfigError
from .harness import METHODS, HarnessConfig
from .stream import StreamConfig, TaskSpec, default_tasks


def _bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _list(kind):
    def parse(raw: str):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if not items:
            raise ValueError("empty list")
        return [kind(x) for x in items]
    parse.__name__ = f"list[{kind.__name__}]"
    return parse


def _choice(*options):
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in options:
            raise ValueError(f"{value!r} not one of {', '.join(options)}")
        return value
    parse.__name__ = "|".join(options)
    return parse


SCHEMA = {
    "stream": {
        "d": (int, "embedding width of patches and prompts"),
        "patches_min": (int, "fewest patches in a bag"),
        "patches_max": (int, "most patches in a bag"),
        "signal_fraction": (float, "share of patches drawn around the class prototype, in (0, 1]"),
        "noise": (float, "patch noise standard deviation"),
        "rho_in": (float, "cosine between prompts of the same task"),
        "rho_out": (float, "cosine between prompts of different tasks"),
        "n_sites": (int, "number of acquisition sites (0 = no site shift)"),
        "shift_std": (float, "standard deviation of the per-site additive shift"),
        "ood_test": (_bool, "test bags come from sites never seen in training"),
        "scale": (float, "bag-count scale applied to the built-in cohort sizes"),
        "test_fraction": (float, "share of each class held out for testing"),
        "min_test": (int, "fewest test bags per class"),
        "min_train": (int, "fewest train bags per class"),
    },
    "train": {
        "epochs": (int, "fine-tuning epochs per task"),
        "lr": (float, "learning rate"),
        "beta1": (float, "first-moment decay"),
        "beta2": (float, "second-moment decay"),
        "eps": (float, "optimizer epsilon"),
        "weight_decay": (float, "decoupled weight decay"),
        "k": (int, "patches subsampled per bag per step"),
        "normalize": (_bool, "cosine instead of raw dot-product logits"),
        "eval_k": (int, "patches subsampled per bag at evaluation"),
        "base_gain": (float, "identity gain of the base projections"),
        "base_noise": (float, "noise level of the base projections"),
        "base_bias": (float, "noise level of the base biases"),
        "base_scale": (float, "output scale of the base (sets logit magnitude)"),
        "pretrain_epochs": (int, "task-level pretraining epochs for the base (0 = none)"),
        "pretrain_bags": (int, "pretraining bags per class"),
    },
    "merge": {
        "per_param": (_bool, "one lambda per parameter matrix instead of one global lambda"),
    },
    "run": {
        "methods": (_list(_choice(*METHODS)), "comma-separated methods: " + ", ".join(METHODS)),
        "seeds": (_list(int), "comma-separated seeds; each seeds both the stream and the run"),
        "folds": (_list(int), "comma-separated fold ids (independent bag draws)"),
        "orders": (_choice("identity", "alternating"), "task order: as listed, or the four alternating orders"),
        "bank_scope": (_choice("seen", "all"), "prompts available at evaluation: seen tasks or all tasks"),
        "mean_mode": (_choice("final", "running"), "Mean ACC over the last row or over every step"),
        "checkpoints": (_bool, "write merged checkpoints after every task"),
        "stream_dir": (str, "load this saved stream instead of generating one (seeds/folds then ignored)"),
    },
}
TASK_KEYS = {
    "classes": (_list(str), "class names"),
    "train": (_list(int), "train bags per class"),
    "test": (_list(int), "test bags per class"),
}


@dataclass
class RunConfig:
    stream: StreamConfig
    harness: HarnessConfig
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0])
    folds: list[int] = field(default_factory=lambda: [0])
    orders: str = "identity"
    checkpoints: bool = True
    stream_dir: str | None = None
    source: str = "<defaults>"


def keys_help() -> str:
    """Text listing of every configuration key, for ``--help``."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        lines += [f"  {k:16s} {kind.__name__:24s} {text}" for k, (kind, text) in keys.items()]
    lines.append("[task:NAME]  (optional, repeatable; replaces the built-in tasks)")
    lines += [f"  {k:16s} {kind.__name__:24s} {text}" for k, (kind, text) in TASK_KEYS.items()]
    return "\n".join(lines)


def default_config_text() -> str:
    return resources.files("ocmerge").joinpath("default.ini").read_text(encoding="utf-8")


def _section(parser, name: str, schema: dict, where: str) -> dict:
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in schema:
            raise ConfigError(f"{where}: unknown key [{name}] {key}")
        kind = schema[key][0]
        try:
            out[key] = kind(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: [{name}] {key}: {exc}") from exc
    return out


def parse_config(text: str, where: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc.message if hasattr(exc, 'message') else exc}".splitlines()[0]) from exc

    task_sections = [s for s in parser.sections() if s.startswith("task:")]
    for s in parser.sections():
        if s not in SCHEMA and s not in task_sections:
            raise ConfigError(f"{where}: unknown section [{s}]")

    st = _section(parser, "stream", SCHEMA["stream"], where)
    tr = _section(parser, "train", SCHEMA["train"], where)
    mg = _section(parser, "merge", SCHEMA["merge"], where)
    rn = _section(parser, "run", SCHEMA["run"], where)

    if task_sections:
        tasks = []
        for s in task_sections:
            spec = _section(parser, s, TASK_KEYS, where)
            missing = [k for k in TASK_KEYS if k not in spec]
            if missing:
                raise ConfigError(f"{where}: [{s}] missing {', '.join(missing)}")
            tasks.append(TaskSpec(s[len("task:"):], spec["classes"], spec["train"], spec["test"]))
    else:
        shape = {k: st.pop(k) for k in ("scale", "test_fraction", "min_test", "min_train") if k in st}
        tasks = default_tasks(**shape)
    for k in ("scale", "test_fraction", "min_test", "min_train"):
        if k in st:
            raise ConfigError(f"{where}: [stream] {k} only applies to the built-in tasks")
    stream = StreamConfig(tasks=tasks, **st)

    train_fields = {f.name for f in fields(TrainConfig)}
    train = TrainConfig(**{k: v for k, v in tr.items() if k in train_fields})
    harness = HarnessConfig(train=train, per_param=mg.get("per_param", False),
                            **{k: v for k, v in tr.items() if k not in train_fields},
                            **{k: rn.pop(k) for k in ("bank_scope", "mean_mode") if k in rn})

    stream_dir = rn.get("stream_dir")
    if stream_dir is not None:
        if not os.path.isabs(stream_dir) and where not in ("<string>", "<defaults>"):
            stream_dir = os.path.join(os.path.dirname(os.path.abspath(where)), stream_dir)
        if not os.path.isfile(os.path.join(stream_dir, "stream.json")):
            raise ConfigError(f"{where}: [run] stream_dir {stream_dir} holds no stream.json")
        rn["stream_dir"] = stream_dir
    return RunConfig(stream=stream, harness=harness, source=where, **rn)


def load_config(path=None) -> RunConfig:
    """Parse ``path``, or the bundled defaults when ``path`` is None."""
    if path is None:
        return parse_config(default_config_text(), "<defaults>")
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        from .errors import IOFailure
        raise IOFailure(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def with_overrides(cfg: RunConfig, seed: int | None = None, methods=None) -> RunConfig:
    if seed is not None:
        cfg = replace(cfg, seeds=[seed])
    if methods:
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
        cfg = replace(cfg, methods=list(methods))
    return cfg
