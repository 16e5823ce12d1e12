"""Acceptance criteria, one test each, at the stated tolerances.

Every test prints a single ``[PASS]`` / ``[FAIL]`` line (shown even under
pytest's output capture). Run directly with ``python3 tests/test_acceptance.py``
for just the summary lines.
"""
import json
import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))
from conftest import low_rank  # noqa: E402
from ocmerge.aggregator import PARAM_NAMES, Bag, init_params, loss_and_grads  # noqa: E402
from ocmerge.checkpoint import Checkpoint  # noqa: E402
from ocmerge.cli import main as cli_main  # noqa: E402
from ocmerge.config import load_config  # noqa: E402
from ocmerge.harness import MERGE_METHODS, TaskCache, run_stream  # noqa: E402
from ocmerge.linalg import svd_full  # noqa: E402
from ocmerge.merge import finalize, init_state, merge_step, project_orthogonal  # noqa: E402
from ocmerge.metrics import backward_transfer, balanced_accuracy, forgetting, mean_acc  # noqa: E402
from ocmerge.stream import ALTERNATING_ORDERS, AccessLog, gen_stream, permute_tasks  # noqa: E402

_capsys = None


@pytest.fixture(autouse=True)
def _grab_capsys(capsys):
    global _capsys
    _capsys = capsys
    yield
    _capsys = None


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
    if _capsys is not None:
        with _capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_01_orthogonality():
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(500):
        m, n = (int(x) for x in rng.integers(1, 65, size=2))
        rank = min(m, n) if i % 2 else int(rng.integers(0, min(m, n) + 1))
        acc = low_rank(rng, m, n, rank)
        g = project_orthogonal(rng.standard_normal((m, n)), acc)
        bound = 1e-9 * (1 + np.linalg.norm(g) * np.linalg.norm(acc))
        worst = max(worst, abs(np.sum(g * acc)) / bound)
    report(1, "orthogonality", worst <= 1.0, f"500 pairs up to 64x64, worst |<G,acc>|/bound = {worst:.2e}")


# ---------------------------------------------------------------- 2

def _ckpt(rng, scale):
    return Checkpoint({"w_in": scale * rng.standard_normal((8, 8)), "b_in": scale * rng.standard_normal((8, 1)),
                       "w_out": scale * rng.standard_normal((8, 6))})


def _dist(a, b):
    return float(np.sqrt(sum(np.sum((a[k] - b[k]) ** 2) for k in a)))


def test_02_norm_identity():
    rng = np.random.default_rng(202)
    worst_rel, worst_excess = 0.0, -np.inf
    for _ in range(200):
        T = int(rng.integers(2, 9))
        base = _ckpt(rng, 1.0)
        state = init_state(base)
        norms = []
        for _ in range(T):
            theta = _ckpt(rng, float(rng.uniform(0.05, 5.0)))
            norms.append(_dist(theta, base))
            state = merge_step(state, theta)
        drift = _dist(finalize(state), base)
        target = sum(norms) / T
        worst_rel = max(worst_rel, abs(drift - target) / target)
        worst_excess = max(worst_excess, drift - max(norms))
    ok = worst_rel <= 1e-9 and worst_excess <= 1e-9
    report(2, "norm consistency", ok,
           f"200 streams of 2-8 tasks, worst rel err {worst_rel:.2e}, max(drift - max norm) {worst_excess:.3g}")


# ---------------------------------------------------------------- 3

def test_03_single_task_identity():
    rng = np.random.default_rng(303)
    worst_single, worst_repeat = 0.0, 0.0
    for _ in range(50):
        base, theta = _ckpt(rng, 1.0), _ckpt(rng, 1.0)
        s1 = merge_step(init_state(base), theta)
        m1 = finalize(s1)
        worst_single = max(worst_single, max(float(np.max(np.abs(m1[k] - theta[k]))) for k in base))
        worst_repeat = max(worst_repeat, _dist(finalize(merge_step(s1, theta)), m1))
    ok = worst_single <= 1e-12 and worst_repeat <= 1e-10
    report(3, "single-task identity", ok,
           f"max |finalize - theta_1| {worst_single:.2e}, repeat-merge change {worst_repeat:.2e}")


# ---------------------------------------------------------------- 4

def _factor_error(a, res):
    m, n = a.shape
    rec = np.linalg.norm(res.reconstruct() - a) / np.linalg.norm(a) if np.any(a) else 0.0
    return max(np.linalg.norm(res.u.T @ res.u - np.eye(m)) / np.sqrt(m),
               np.linalg.norm(res.v.T @ res.v - np.eye(n)) / np.sqrt(n), rec)


def _gram_eigenvalues(a):
    g = a.T @ a if a.shape[0] >= a.shape[1] else a @ a.T
    return np.clip(np.linalg.eigvalsh(g)[::-1], 0.0, None)


def test_04_svd_contract():
    rng = np.random.default_rng(404)
    worst_fact = worst_sv = 0.0
    for _ in range(1000):
        a = rng.standard_normal((int(rng.integers(1, 65)), int(rng.integers(1, 49))))
        res = svd_full(a)
        oracle = np.sqrt(_gram_eigenvalues(a))
        worst_fact = max(worst_fact, _factor_error(a, res))
        worst_sv = max(worst_sv, float(np.max(np.abs(res.sigma - oracle)) / oracle[0]))
    # extra rank-deficient set: square roots of near-zero eigenvalues only carry
    # sqrt(eps) accuracy, so these compare squared values, where the oracle is exact to rounding
    worst_def = 0.0
    for _ in range(250):
        m, n = int(rng.integers(1, 65)), int(rng.integers(1, 49))
        a = low_rank(rng, m, n, int(rng.integers(1, min(m, n) + 1)))
        res = svd_full(a)
        lam = _gram_eigenvalues(a)
        worst_fact = max(worst_fact, _factor_error(a, res))
        worst_def = max(worst_def, float(np.max(np.abs(res.sigma ** 2 - lam)) / lam[0]))
    ok = worst_fact <= 1e-10 and worst_sv <= 1e-9 and worst_def <= 1e-9
    report(4, "SVD contract", ok,
           f"1000 random matrices up to 64x48, factor/reconstruction {worst_fact:.2e}, singular values "
           f"{worst_sv:.2e}; 250 rank-deficient, squared values {worst_def:.2e}")


# ---------------------------------------------------------------- 5

def test_05_gradient_check():
    rng = np.random.default_rng(505)
    d, h = 8, 1e-6
    worst = 0.0
    for i in range(100):
        params = init_params(d, i, noise=float(rng.uniform(0.2, 1.5)), bias=0.5)
        e = rng.standard_normal((int(rng.integers(2, 5)), d))
        bag = Bag(rng.standard_normal((int(rng.integers(2, 12)), d)), int(rng.integers(e.shape[0])), 0)
        normalize = bool(i % 2)
        _, grads = loss_and_grads(bag, params, e, normalize)
        base = {k: np.array(v) for k, v in params.items()}
        for name in PARAM_NAMES:
            num = np.zeros(base[name].shape)
            for idx in np.ndindex(*num.shape):
                vals = []
                for sign in (1.0, -1.0):
                    p = {k: v.copy() for k, v in base.items()}
                    p[name][idx] += sign * h
                    vals.append(loss_and_grads(bag, Checkpoint(p), e, normalize)[0])
                num[idx] = (vals[0] - vals[1]) / (2 * h)
            denom = max(np.linalg.norm(grads[name]), np.linalg.norm(num), 1e-7)
            worst = max(worst, float(np.linalg.norm(grads[name] - num) / denom))
    report(5, "gradient check", worst <= 1e-4, f"100 instances at d=8, worst relative error {worst:.2e}")


# ---------------------------------------------------------------- 6

def test_06_metric_oracle():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(1000):
        T = int(rng.integers(2, 9))
        rows = [list(rng.uniform(0, 1, k + 1)) for k in range(T)]
        fgt = sum(max(rows[k][t] for k in range(t, T)) - rows[-1][t] for t in range(T - 1)) / (T - 1)
        bwt = sum(rows[-1][t] - rows[t][t] for t in range(T - 1)) / (T - 1)
        final = sum(rows[-1]) / T
        c = int(rng.integers(1, 7))
        n = int(rng.integers(1, 80))
        yt, yp = rng.integers(0, c, n), rng.integers(0, c + 1, n)
        hits = {}
        for a, b in zip(yt, yp):
            hits.setdefault(a, []).append(a == b)
        bacc = sum(sum(v) / len(v) for v in hits.values()) / len(hits)
        worst = max(worst, abs(forgetting(rows) - fgt), abs(backward_transfer(rows) - bwt),
                    abs(mean_acc(rows) - final), abs(balanced_accuracy(yt, yp, c) - bacc))
    hand = [[0.9], [0.8, 0.85], [0.7, 0.8, 0.9]]
    hf, hb = forgetting(hand), backward_transfer(hand)
    ok = worst <= 1e-12 and abs(hf - 0.125) <= 1e-12 and abs(hb + 0.125) <= 1e-12
    report(6, "metric oracle", ok, f"1000 cases, worst deviation {worst:.2e}; hand example FGT {hf:.6f} BWT {hb:.6f}")


# ---------------------------------------------------------------- 7 and 8

@pytest.fixture(scope="module")
def default_runs():
    cfg = load_config()
    results = {}
    for seed in cfg.seeds:
        for fold in cfg.folds:
            stream = gen_stream(replace(cfg.stream, seed=seed, fold=fold))
            cache = TaskCache()
            r = {m: run_stream(stream, m, cfg.harness, seed=seed, cache=cache).report
                 for m in ("merge_tcp", "merge_naive", "zero_shot", "seq_finetune")}
            perm = {m: [run_stream(permute_tasks(stream, o), m, cfg.harness, seed=seed, cache=cache).report.mean_acc
                        for o in ALTERNATING_ORDERS] for m in ("merge_tcp", "seq_finetune")}
            results[(seed, fold)] = (r, perm)
    return results


def test_07_ordering(default_runs):
    chain = fgt = 0
    for r, _ in default_runs.values():
        b = [r[m].bacc for m in ("merge_tcp", "merge_naive", "zero_shot", "seq_finetune")]
        chain += b[0] >= b[1] >= b[2] >= b[3]
        fgt += r["merge_tcp"].fgt < r["seq_finetune"].fgt
    n = len(default_runs)
    means = {m: np.mean([r[m].bacc for r, _ in default_runs.values()])
             for m in ("merge_tcp", "merge_naive", "zero_shot", "seq_finetune")}
    detail = (f"tcp >= naive >= zero-shot >= seq in {chain}/{n} runs (need 8), FGT(tcp) < FGT(seq) in {fgt}/{n}; "
              "mean bACC " + " ".join(f"{m}={v:.3f}" for m, v in means.items()))
    report(7, "qualitative ordering", chain >= 8 and fgt == n, detail)


def test_08_order_robustness(default_runs):
    # per order, Mean ACC averaged over the seed x fold runs; std taken across the four orders
    per_order = {m: np.mean([perm[m] for _, perm in default_runs.values()], axis=0)
                 for m in ("merge_tcp", "seq_finetune")}
    std = {m: float(np.std(v)) for m, v in per_order.items()}
    worst_single = max(float(np.std(perm["merge_tcp"])) for _, perm in default_runs.values())
    ok = std["merge_tcp"] <= 0.02 and std["merge_tcp"] < std["seq_finetune"]
    report(8, "order robustness", ok,
           f"std over 4 orders: merge_tcp {100 * std['merge_tcp']:.2f} pp, seq_finetune "
           f"{100 * std['seq_finetune']:.2f} pp (largest single-stream merge_tcp std {100 * worst_single:.2f} pp)")


# ---------------------------------------------------------------- 9

def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            if f.endswith((".json", ".csv", ".jsonl", ".msld", ".msbg")) and f != "timings.json":
                p = os.path.join(d, f)
                out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_09_determinism(tmp_path, capsys):
    trees = []
    for rep in ("first", "second"):
        d = str(tmp_path / rep)
        cmds = [
            ["gen-stream", "--out", f"{d}/stream", "--seed", "2", "--fold", "1"],
            ["base", "--stream", f"{d}/stream", "--out", f"{d}/base.msld", "--seed", "2"],
            ["train-task", "--stream", f"{d}/stream", "--task", "ESCA", "--base", f"{d}/base.msld",
             "--out", f"{d}/esca.msld", "--seed", "2"],
            ["train-task", "--stream", f"{d}/stream", "--task", "TGCT", "--base", f"{d}/base.msld",
             "--out", f"{d}/tgct.msld", "--seed", "2"],
            ["merge", "--init", f"{d}/base.msld", "--new", f"{d}/esca.msld", "--out", f"{d}/s1.msld"],
            ["merge", "--state", f"{d}/s1.msld", "--new", f"{d}/tgct.msld", "--out", f"{d}/s2.msld",
             "--report", f"{d}/proj.jsonl", "--finalize", f"{d}/merged.msld"],
            ["run-stream", "--seed", "0", "--out", f"{d}/run", "--jobs", "3" if rep == "second" else "1"],
        ]
        codes = [cli_main(c) for c in cmds]
        capsys.readouterr()
        assert codes == [0] * len(cmds), codes
        trees.append(_tree(d))
    same = trees[0] == trees[1]
    n_json = sum(k.endswith((".json", ".csv", ".jsonl")) for k in trees[0])
    json.loads(trees[0]["run/metrics.json"])
    report(9, "determinism", same,
           f"7 CLI commands rerun, {len(trees[0])} files ({n_json} JSON/CSV) byte-identical: {same}")


# ---------------------------------------------------------------- 10

def test_10_no_rehearsal():
    cfg = load_config()
    bad, reads = [], 0
    for method in MERGE_METHODS:
        stream = gen_stream(replace(cfg.stream, seed=0, fold=0))
        stream.access_log = AccessLog()
        run_stream(stream, method, cfg.harness, seed=0)
        reads += len(stream.access_log.reads)
        bad += stream.access_log.violations()
    report(10, "no rehearsal", not bad and reads > 0,
           f"{reads} training-set reads over {', '.join(MERGE_METHODS)}; reads of earlier tasks: {len(bad)}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:warnings"]))
