from dataclasses import replace

import numpy as np
import pytest

from ocmerge.aggregator import TrainConfig
from ocmerge.errors import ConfigError, InfeasibleGeometry
from ocmerge.harness import METHODS, MERGE_METHODS, HarnessConfig, TaskCache, base_params, run_stream
from ocmerge.stream import (ALTERNATING_ORDERS, AccessLog, StreamConfig, TaskSpec, default_config, default_tasks,
                            gen_stream, load_stream, make_bag, permute_tasks, save_stream)


def small_config(**kw):
    tasks = [TaskSpec(n, ["x", "y"], [4, 3], [3, 3]) for n in ("A", "B", "C")]
    return StreamConfig(tasks=tasks, d=12, patches_min=8, patches_max=16, **kw)


FAST = HarnessConfig(train=TrainConfig(epochs=2, k=8), pretrain_epochs=1, pretrain_bags=2, eval_k=8)


def test_default_task_table():
    tasks = default_tasks()
    assert [t.name for t in tasks] == ["BRCA", "RCC", "NSCLC", "ESCA", "TGCT", "CESC"]
    assert [t.train_counts for t in tasks] == [[49, 10], [33, 19, 7], [57, 6], [6, 4], [3, 3], [18, 3]]
    assert [t.test_counts for t in tasks] == [[24, 5], [17, 10, 5], [28, 5], [5, 5], [5, 5], [9, 5]]
    assert sorted(ALTERNATING_ORDERS[0]) == list(range(6))


def test_signal_patch_mean_within_monte_carlo_bound():
    # signal_fraction = 1 makes every patch a signal patch
    cfg = StreamConfig(tasks=default_tasks(), d=16, signal_fraction=1.0, noise=0.5, patches_min=1, patches_max=1)
    rng = np.random.default_rng(0)
    proto = np.random.default_rng(1).standard_normal(16)
    n = 10_000
    patches = np.vstack([make_bag(rng, proto, cfg, 0, 0).patches for _ in range(n)])
    assert np.all(np.abs(patches.mean(axis=0) - proto) <= 3 * 0.5 / np.sqrt(n))


def test_bag_mean_matches_signal_share():
    cfg = StreamConfig(tasks=default_tasks(), d=16, signal_fraction=0.4, noise=0.5)
    rng = np.random.default_rng(0)
    proto = np.zeros(16)
    proto[3] = 1.0
    means = np.vstack([make_bag(rng, proto, cfg, 0, 0).patches.mean(axis=0) for _ in range(4000)])
    # each bag holds round(0.4 n) signal patches; the rounding bias is far below the tolerance
    np.testing.assert_allclose(means.mean(axis=0), 0.4 * proto, atol=0.01)


def test_noiseless_limit():
    s = gen_stream(small_config(signal_fraction=1.0, noise=0.0))
    for t in range(len(s)):
        for bag in s.train_bags(t) + s.test_bags(t):
            proto = s.bank.task(t).class_embeddings[bag.label]
            assert np.array_equal(bag.patches, np.broadcast_to(proto, bag.patches.shape))


def test_generation_is_deterministic_and_fold_dependent():
    a, b = gen_stream(small_config(seed=3)), gen_stream(small_config(seed=3))
    assert all(np.array_equal(x.patches, y.patches) for x, y in zip(a.train_bags(0), b.train_bags(0)))
    c = gen_stream(small_config(seed=3, fold=1))
    assert not np.array_equal(a.train_bags(0)[0].patches, c.train_bags(0)[0].patches)
    assert np.array_equal(a.bank.task(0).class_embeddings, c.bank.task(0).class_embeddings)


def test_save_load_round_trip(tmp_path):
    s = gen_stream(small_config(n_sites=2, shift_std=0.1, ood_test=True))
    save_stream(s, tmp_path / "st")
    back = load_stream(tmp_path / "st")
    assert back.config == s.config
    for t in range(len(s)):
        for x, y in zip(s.test_bags(t), back.test_bags(t)):
            assert np.array_equal(x.patches, y.patches) and (x.label, x.site_id) == (y.label, y.site_id)
    # out-of-distribution test sites never appear in training
    assert {b.site_id for b in s.train_bags(0)} == {0} and {b.site_id for b in s.test_bags(0)} == {1}


def test_permute_tasks():
    s = gen_stream(small_config())
    p = permute_tasks(s, [2, 0, 1])
    assert [t.name for t in p.tasks] == ["C", "A", "B"]
    assert p.train_bags(0)[0].task_id == 0 and p.bank.task(0).name == "C"
    with pytest.raises(ConfigError):
        permute_tasks(s, [0, 0, 1])
    same = permute_tasks(s, [0, 1, 2])
    assert same.config == s.config and same.bank == s.bank
    # [2, 0, 1] is undone by its inverse [1, 2, 0]
    back = permute_tasks(p, [1, 2, 0])
    assert back.config == s.config
    assert all(np.array_equal(x.patches, y.patches) for x, y in zip(back.train_bags(2), s.train_bags(2)))


def test_config_validation():
    with pytest.raises(ConfigError):
        small_config(signal_fraction=0.0)
    with pytest.raises(ConfigError):
        small_config(ood_test=True)
    with pytest.raises(ConfigError):
        TaskSpec("A", ["x"], [1], [1])
    with pytest.raises(InfeasibleGeometry):
        gen_stream(replace(default_config(), d=4))
    with pytest.raises(ConfigError):
        HarnessConfig(bank_scope="none")


@pytest.mark.parametrize("method", MERGE_METHODS + ("seq_finetune", "per_task_oracle"))
def test_no_rehearsal(method):
    s = gen_stream(small_config())
    s.access_log = AccessLog()
    run_stream(s, method, FAST)
    assert s.access_log.reads, "training reads were not logged"
    assert s.access_log.violations() == []


def test_single_task_degenerates():
    s = gen_stream(StreamConfig(tasks=[TaskSpec("A", ["x", "y"], [4, 4], [3, 3])], d=8, patches_min=8,
                                patches_max=12))
    cache = TaskCache()
    r = {m: run_stream(s, m, FAST, cache=cache) for m in METHODS}
    assert r["merge_tcp"].report.fgt == 0.0 and r["merge_tcp"].report.bwt == 0.0
    # one task: the merge is the fine-tune itself, so every fine-tuned method agrees
    for m in ("merge_naive", "avg_merge", "seq_finetune", "per_task_oracle"):
        for mode, matrix in r[m].matrices.items():
            assert matrix.rows() == r["merge_tcp"].matrices[mode].rows(), (m, mode)


def test_zero_shot_columns_constant_with_full_bank():
    s = gen_stream(small_config())
    res = run_stream(s, "zero_shot", replace(FAST, bank_scope="all"))
    for m in res.matrices.values():
        v = m.values
        for t in range(len(s)):
            assert np.all(v[t:, t] == v[t, t])
    assert res.report.fgt == 0.0


def test_runs_are_reproducible_and_cache_neutral(tmp_path):
    s = gen_stream(small_config())
    a = run_stream(s, "merge_tcp", FAST, seed=1, ckpt_dir=tmp_path / "a")
    b = run_stream(s, "merge_tcp", FAST, seed=1, cache=TaskCache(), ckpt_dir=tmp_path / "b")
    assert a.summary() == b.summary()
    assert [open(p, "rb").read() for p in a.checkpoints] == [open(p, "rb").read() for p in b.checkpoints]
    assert len(a.checkpoints) == len(s)


def test_base_ignores_task_order():
    s = gen_stream(small_config())
    b1 = base_params(s, FAST, 0)
    b2 = base_params(permute_tasks(s, [1, 2, 0]), FAST, 0)
    assert b1.equals(b2)


def test_unknown_method():
    with pytest.raises(ConfigError):
        run_stream(gen_stream(small_config()), "rehearsal", FAST)
