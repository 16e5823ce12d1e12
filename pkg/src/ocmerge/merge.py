"""Orthogonal continual merging of task vectors.

Each new task vector is projected onto the SVD-orthogonal complement of the
accumulated merge (diagonal of the core masked out), added to the running
numerator, and the whole merge is rescaled so its distance from the base
equals the mean task-vector norm seen so far.

``MergeState.acc_delta`` stores the running numerator; the merged delta is
``acc_delta / lam``. Feeding the numerator back in is exactly
``lam_{t-1} * merged_delta_{t-1}``, which is what the update rule asks for.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .checkpoint import Checkpoint, TaskVector, apply_delta, check_compatible, task_vector, zeros_like
from .errors import DegenerateMergeError, EmptyMergeError, ShapeError
from .linalg import as_matrix, frobenius_inner, frobenius_norm, matmul, svd_full

LAMBDA_FLOOR = 1e-12


class LambdaFloorWarning(RuntimeWarning):
    """Merge numerator vanished while earlier tasks had non-zero norm."""


@dataclass(frozen=True)
class ParamLambda:
    lam: float = 1.0
    norm_sum: float = 0.0


@dataclass(frozen=True)
class MergeState:
    base: Checkpoint
    acc_delta: TaskVector
    lam: float = 1.0
    t: int = 0
    norm_sum: float = 0.0
    per_param: dict[str, ParamLambda] | None = None
    floored: bool = False

    @property
    def per_param_mode(self) -> bool:
        return self.per_param is not None


@dataclass
class ProjectionRecord:
    name: str
    proj_norm: float
    delta_norm: float
    residual_inner: float
    acc_norm: float

    def within_tolerance(self) -> bool:
        return abs(self.residual_inner) <= 1e-9 * (1.0 + self.proj_norm * self.acc_norm)


@dataclass
class ProjectionReport:
    t: int
    lam: float
    records: list[ProjectionRecord] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {
                "t": self.t,
                "param": r.name,
                "proj_norm": r.proj_norm,
                "delta_norm": r.delta_norm,
                "residual_inner": r.residual_inner,
            }
            for r in self.records
        ]


def init_state(base: Checkpoint, per_param: bool = False) -> MergeState:
    pp = {k: ParamLambda() for k in base} if per_param else None
    return MergeState(base=base, acc_delta=zeros_like(base), per_param=pp)


def diagonal_mask(m: int, n: int) -> np.ndarray:
    mask = np.ones((m, n))
    k = min(m, n)
    mask[np.arange(k), np.arange(k)] = 0.0
    return mask


def project_orthogonal(delta_t, acc_delta) -> np.ndarray:
    """``U ((U^T delta_t V) * M) V^T`` where ``acc_delta = U S V^T`` (full SVD).

    ``M`` is all ones except zeros on the min(m, n) diagonal positions, so
    the result has zero Frobenius inner product with ``acc_delta``.
    """
    delta_t = as_matrix(delta_t, "delta_t")
    acc_delta = as_matrix(acc_delta, "acc_delta")
    if delta_t.shape != acc_delta.shape:
        raise ShapeError(f"project_orthogonal: {delta_t.shape} vs {acc_delta.shape}")
    svd = svd_full(acc_delta)
    core = matmul(matmul(svd.u.T, delta_t), svd.v)
    core *= diagonal_mask(*core.shape)
    return matmul(matmul(svd.u, core), svd.v.T)


def _global_norm(mats) -> float:
    return math.hypot(*(frobenius_norm(m) for m in mats))


def update_lambda(state: MergeState, projected_sum, delta_norm: float, norm_sum: float | None = None):
    """Scale for step ``state.t + 1``: ``t * ||lam_prev*merged + G|| / sum_i ||delta_i||``.

    ``projected_sum`` is the new numerator (a checkpoint, or a single matrix
    in per-parameter use) and ``delta_norm`` the norm of the incoming task
    vector. Returns ``(lam, floored)``.
    """
    t = state.t + 1
    if t == 1:
        return 1.0, False
    if norm_sum is None:
        norm_sum = state.norm_sum
    total = norm_sum + delta_norm
    if isinstance(projected_sum, Checkpoint):
        numer = _global_norm(projected_sum.values())
    else:
        numer = frobenius_norm(projected_sum)
    if numer == 0.0:
        if total == 0.0:
            raise DegenerateMergeError(f"task {t}: every task vector is zero, nothing to merge")
        warnings.warn(
            f"task {t}: merge numerator is zero, lambda floored to {LAMBDA_FLOOR}",
            LambdaFloorWarning,
            stacklevel=2,
        )
        return LAMBDA_FLOOR, True
    return t * numer / total, False


def merge_step(state: MergeState, theta_t: Checkpoint, report: ProjectionReport | None = None) -> MergeState:
    """Fold fine-tuned weights ``theta_t`` into the running merge."""
    check_compatible(theta_t, state.base)
    delta = task_vector(theta_t, state.base)
    t = state.t + 1
    if state.t == 0:
        pp = None
        if state.per_param_mode:
            pp = {k: ParamLambda(1.0, frobenius_norm(delta[k])) for k in delta}
        if report is not None:
            report.t, report.lam = 1, 1.0
            for k in delta:
                n = frobenius_norm(delta[k])
                report.records.append(ProjectionRecord(k, n, n, 0.0, 0.0))
        return replace(state, acc_delta=delta, lam=1.0, t=1,
                       norm_sum=_global_norm(delta.values()), per_param=pp, floored=False)

    numer = {}
    projections = {}
    for name in state.base:
        g = project_orthogonal(delta[name], state.acc_delta[name])
        projections[name] = g
        numer[name] = state.acc_delta[name] + g
    numer_ckpt = Checkpoint(numer)
    delta_norm = _global_norm(delta.values())
    floored = False

    if state.per_param_mode:
        pp = {}
        lams = []
        for name in state.base:
            prev = state.per_param[name]
            dn = frobenius_norm(delta[name])
            lam, fl = update_lambda(state, numer[name], dn, norm_sum=prev.norm_sum)
            floored |= fl
            pp[name] = ParamLambda(lam, prev.norm_sum + dn)
            lams.append(lam)
        lam_global = float(np.mean(lams))
    else:
        pp = None
        lam_global, floored = update_lambda(state, numer_ckpt, delta_norm)

    if report is not None:
        report.t, report.lam = t, lam_global
        for name in state.base:
            g, acc = projections[name], state.acc_delta[name]
            report.records.append(ProjectionRecord(
                name,
                proj_norm=frobenius_norm(g),
                delta_norm=frobenius_norm(delta[name]),
                residual_inner=frobenius_inner(g, acc),
                acc_norm=frobenius_norm(acc),
            ))
    return replace(state, acc_delta=numer_ckpt, lam=lam_global, t=t,
                   norm_sum=state.norm_sum + delta_norm, per_param=pp,
                   floored=state.floored or floored)


def merged_delta(state: MergeState) -> TaskVector:
    if state.t == 0:
        raise EmptyMergeError("no task has been merged yet")
    if state.per_param_mode:
        return Checkpoint({k: state.acc_delta[k] / state.per_param[k].lam for k in state.base})
    return Checkpoint({k: state.acc_delta[k] / state.lam for k in state.base})


def finalize(state: MergeState) -> Checkpoint:
    """Materialise merged weights ``base + acc_delta / lam``."""
    if state.t == 0:
        raise EmptyMergeError("finalize called before any merge_step")
    if state.per_param_mode:
        merged = Checkpoint({k: state.base[k] + state.acc_delta[k] / state.per_param[k].lam
                             for k in state.base})
    else:
        merged = apply_delta(state.base, state.acc_delta, 1.0 / state.lam)
    return merged.with_meta(merged_tasks=state.t, lam=repr(state.lam))


def average_merge(base: Checkpoint, thetas: list[Checkpoint]) -> Checkpoint:
    """Task arithmetic with uniform weights: ``base + mean_i (theta_i - base)``."""
    if not thetas:
        raise EmptyMergeError("average_merge needs at least one checkpoint")
    for th in thetas:
        check_compatible(th, base)
    out = {}
    for k in base:
        acc = np.zeros(base[k].shape)
        for th in thetas:
            acc += th[k] - base[k]
        out[k] = base[k] + acc / len(thetas)
    return Checkpoint(out)


def state_to_checkpoint(state: MergeState) -> Checkpoint:
    """Pack a merge state into one checkpoint (``base.*`` and ``acc.*`` entries)."""
    entries = {}
    for k in state.base:
        entries[f"base.{k}"] = state.base[k]
    for k in state.base:
        entries[f"acc.{k}"] = state.acc_delta[k]
    meta = {
        "kind": "merge_state",
        "t": str(state.t),
        "lam": repr(state.lam),
        "norm_sum": repr(state.norm_sum),
        "floored": "1" if state.floored else "0",
        "params": json.dumps(list(state.base)),
    }
    if state.per_param_mode:
        meta["per_param"] = json.dumps({k: [repr(v.lam), repr(v.norm_sum)] for k, v in state.per_param.items()})
    return Checkpoint(entries, meta)


def state_from_checkpoint(ckpt: Checkpoint) -> MergeState:
    meta = ckpt.meta
    if meta.get("kind") != "merge_state":
        raise ShapeError("checkpoint is not a merge state (meta kind != merge_state)")
    try:
        names = json.loads(meta["params"])
        base = Checkpoint({k: ckpt[f"base.{k}"] for k in names})
        acc = Checkpoint({k: ckpt[f"acc.{k}"] for k in names})
        pp = None
        if "per_param" in meta:
            pp = {k: ParamLambda(float(v[0]), float(v[1])) for k, v in json.loads(meta["per_param"]).items()}
        return MergeState(base, acc, float(meta["lam"]), int(meta["t"]), float(meta["norm_sum"]), pp,
                          meta.get("floored") == "1")
    except (KeyError, ValueError, TypeError) as exc:
        raise ShapeError(f"malformed merge state: {exc}") from exc
