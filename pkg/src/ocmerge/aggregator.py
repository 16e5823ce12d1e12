"""Attention-pooling slide aggregator trained against frozen class prompts.

Forward pass for a bag ``V`` (n x d)::

    H = tanh(V @ W_in + b_in^T)       n x d
    a = softmax(H @ w_a)              n x 1, over patches
    Z = (a^T H) @ W_out + b_out^T     1 x d

Logits are ``Z @ E^T`` for the task's prompt matrix ``E`` (c x d); training
minimises softmax cross-entropy on them. Only the aggregator is trained; the
prompts receive no gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, NumericalError, ShapeError

PARAM_NAMES = ("w_in", "b_in", "w_a", "w_out", "b_out")


@dataclass
class Bag:
    patches: np.ndarray
    label: int
    task_id: int
    site_id: int | None = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float64)
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise ShapeError(f"bag needs >= 1 patch row, got shape {self.patches.shape}")


@dataclass
class TrainConfig:
    epochs: int = 10
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    k: int = 64
    normalize: bool = False


def param_shapes(d: int) -> dict[str, tuple[int, int]]:
    return {"w_in": (d, d), "b_in": (d, 1), "w_a": (d, 1), "w_out": (d, d), "b_out": (d, 1)}


def init_params(d: int, seed: int, gain: float = 1.0, noise: float = 0.5, bias: float = 0.1,
                scale: float = 1.0) -> Checkpoint:
    """Seeded stand-in for pretrained weights.

    Both projections start as ``gain * I`` plus Gaussian noise of standard
    deviation ``noise / sqrt(d)``, so the untrained model already maps
    patches roughly into prompt space (the zero-shot regime) without being
    a perfect classifier. Biases are Gaussian with standard deviation
    ``bias / sqrt(d)``. The output projection and bias are multiplied by
    ``scale``, which sets the logit magnitude without moving any argmax.
    """
    rng = np.random.default_rng([seed, 0xBA5E])
    s = noise / math.sqrt(d)
    sb = bias / math.sqrt(d)
    return Checkpoint({
        "w_in": gain * np.eye(d) + s * rng.standard_normal((d, d)),
        "b_in": sb * rng.standard_normal((d, 1)),
        "w_a": s * rng.standard_normal((d, 1)),
        "w_out": scale * (gain * np.eye(d) + s * rng.standard_normal((d, d))),
        "b_out": scale * sb * rng.standard_normal((d, 1)),
    }, {"kind": "base", "seed": str(seed)})


def _check_params(params: Checkpoint, d: int) -> None:
    expected = param_shapes(d)
    for name, shape in expected.items():
        if name not in params:
            raise ShapeError(f"aggregator params missing {name!r}")
        if params[name].shape != shape:
            raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")


def _forward(v: np.ndarray, p) -> tuple[np.ndarray, dict]:
    h = np.tanh(v @ p["w_in"] + p["b_in"].T)
    s = h @ p["w_a"]
    s = s - s.max()
    e = np.exp(s)
    a = e / e.sum()
    pooled = a.T @ h
    z = pooled @ p["w_out"] + p["b_out"].T
    return z, {"v": v, "h": h, "a": a, "pooled": pooled}


def forward(bag_patches, params: Checkpoint) -> np.ndarray:
    """Slide embedding ``Z`` (1 x d) for one bag."""
    v = np.asarray(bag_patches, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"bag patches must be 2-D, got {v.shape}")
    _check_params(params, v.shape[1])
    return _forward(v, params)[0]


def _unit_rows(e: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(e, axis=1, keepdims=True)
    return np.divide(e, n, out=np.zeros_like(e), where=n > 0)


def loss_and_grads(bag: Bag, params: Checkpoint, class_embeddings,
                   normalize: bool = False) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy of the bag label and exact gradients for all five parameters."""
    e = np.asarray(class_embeddings, dtype=np.float64)
    if not 0 <= bag.label < e.shape[0]:
        raise ConfigError(f"label {bag.label} out of range for {e.shape[0]} classes")
    v = bag.patches
    _check_params(params, v.shape[1])
    z, c = _forward(v, params)

    if normalize:
        zn = float(np.linalg.norm(z))
        zu = z / zn if zn > 0 else z
        eu = _unit_rows(e)
        logits = (zu @ eu.T)[0]
    else:
        logits = (z @ e.T)[0]
    shifted = logits - logits.max()
    logsumexp = math.log(np.exp(shifted).sum())
    loss = logsumexp - shifted[bag.label]
    prob = np.exp(shifted - logsumexp)
    dlogits = prob.copy()
    dlogits[bag.label] -= 1.0

    if normalize:
        dzu = dlogits[None, :] @ eu
        dz = (dzu - zu * (zu @ dzu.T).item()) / zn if zn > 0 else np.zeros_like(z)
    else:
        dz = dlogits[None, :] @ e

    h, a, pooled = c["h"], c["a"], c["pooled"]
    g = {}
    g["w_out"] = pooled.T @ dz
    g["b_out"] = dz.T
    dpooled = dz @ params["w_out"].T
    dh = a @ dpooled
    da = h @ dpooled.T
    ds = a * (da - (a.T @ da).item())
    g["w_a"] = h.T @ ds
    dh += ds @ params["w_a"].T
    dpre = dh * (1.0 - h * h)
    g["w_in"] = c["v"].T @ dpre
    g["b_in"] = dpre.sum(axis=0, keepdims=True).T
    return float(loss), g


def subsample(bag: Bag, k: int, rng: np.random.Generator) -> Bag:
    """Keep ``k`` random patches (without replacement, original order)."""
    if k < 1:
        raise ConfigError(f"subsample size must be >= 1, got {k}")
    n = bag.patches.shape[0]
    if n <= k:
        return bag
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return Bag(bag.patches[idx], bag.label, bag.task_id, bag.site_id)


@dataclass
class AdamW:
    """Decoupled weight decay Adam over a dict of arrays."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p = params[name]
            p *= 1.0 - self.lr * self.weight_decay
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train_task(train_bags, params_init: Checkpoint, class_embeddings, hyper: TrainConfig,
               rng: np.random.Generator) -> tuple[Checkpoint, list[float]]:
    """Fine-tune from ``params_init`` with per-bag AdamW steps.

    Bags are reshuffled each epoch and subsampled to ``hyper.k`` patches
    before every forward pass. Returns the final parameters and the mean
    loss of each epoch.
    """
    bags = list(train_bags)
    if not bags:
        raise ConfigError("train_task: empty training set")
    if hyper.epochs == 0:
        return params_init, []
    e = np.asarray(class_embeddings, dtype=np.float64)
    params = {k: np.array(params_init[k]) for k in PARAM_NAMES}
    opt = AdamW(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps, hyper.weight_decay)
    history = []
    for epoch in range(hyper.epochs):
        total = 0.0
        for i in rng.permutation(len(bags)):
            bag = subsample(bags[i], hyper.k, rng)
            loss, grads = loss_and_grads(bag, params, e, hyper.normalize)
            if not math.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch + 1}, bag {int(i)} "
                    f"(label {bag.label}, {bag.patches.shape[0]} patches)"
                )
            opt.step(params, grads)
            total += loss
        history.append(total / len(bags))
    meta = {**params_init.meta, "kind": "finetuned", "epochs": str(hyper.epochs)}
    return Checkpoint({k: params[k] for k in PARAM_NAMES}, meta), history
