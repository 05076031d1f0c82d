import math

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings, strategies as st

import oracles
from ducb.estimators import (ClippedConfig, ClippedIndexer, ExpertIndex, MoMConfig, MoMIndexer,
                             SampleLog, UnboundedDivergenceError, clipped_estimate, clipped_index,
                             g_beta, group_mean, mom_estimate, mom_index, num_groups,
                             partition_groups, solve_beta, z_weight)
from ducb.experts import SoftmaxExpert, TabularExpert


def random_problem(rng, N, C, K, n):
    experts = [TabularExpert(rng.dirichlet(np.ones(K), size=C)) for _ in range(N)]
    beh = rng.integers(0, N, n)
    ctx = rng.integers(0, C, n)
    arms = [int(rng.choice(K, p=experts[j].probs[x])) for j, x in zip(beh, ctx)]
    rew = rng.random(n)
    log = SampleLog.from_arrays(experts, beh, ctx.tolist(), arms, rew)
    samples = list(zip(beh.tolist(), ctx.tolist(), arms, rew.tolist()))
    pi = [e.probs.tolist() for e in experts]
    return experts, log, samples, pi


def self_log(rewards, K=2):
    e = TabularExpert([[0.5, 0.5]])
    n = len(rewards)
    return SampleLog.from_arrays([e], np.zeros(n, int), [0] * n, [0] * n, rewards)


# --- z weight and beta ---------------------------------------------------------

def test_z_weight_examples():
    assert z_weight(self_log([1, 0, 1]), [1.0]) == 3.0
    e = TabularExpert([[0.5, 0.5]])
    log = SampleLog.from_arrays([e, e], [0, 0, 1, 1, 1, 1], [0] * 6, [0] * 6, [0] * 6)
    assert z_weight(log, [1.0, 2.0]) == 4.0
    assert z_weight(SampleLog([e]), [1.0]) == 0.0
    with pytest.raises(UnboundedDivergenceError):
        z_weight(log, [math.inf, math.inf])
    with pytest.raises(ValueError):
        z_weight(log, [0.5, 1.0])


def test_solve_beta_examples():
    assert solve_beta(0.0) == 0.0
    b1 = solve_beta(1.0)
    assert abs(g_beta(b1) - 1.0) <= 1e-10
    assert b1 == pytest.approx(0.8526, abs=1e-4)
    b10 = solve_beta(10.0)
    assert abs(g_beta(b10) - 10.0) <= 1e-8
    ref = scipy.optimize.brentq(lambda b: b / math.log(2 / b) - 10.0, 1e-12, 2 - 1e-15, xtol=1e-15)
    assert b10 == pytest.approx(ref, abs=1e-9)
    with pytest.raises(ValueError):
        solve_beta(-1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-6, 50.0))
def test_solve_beta_inverts_g(v):
    b = solve_beta(v, 1e-10)
    assert 0 < b < 2
    assert abs(g_beta(b) - v) <= 1e-10


def test_beta_decreases_when_z_equals_t():
    betas = [solve_beta(math.sqrt(math.log(t) / t)) for t in (10, 100, 1000)]
    assert betas[0] > betas[1] > betas[2]


# --- clipped estimator ---------------------------------------------------------

def test_clipped_self_estimate_is_sample_mean():
    assert clipped_estimate(self_log([1, 0, 1]), 0, [1.0], 0.5) == pytest.approx(2 / 3)


def _two_expert_log(pk, pj, rewards, behavior):
    experts = [TabularExpert([pk]), TabularExpert([pj])]
    n = len(rewards)
    return SampleLog.from_arrays(experts, behavior, [0] * n, [0] * n, rewards)


def test_clipped_drops_over_threshold_sample():
    # rho = 0.75/0.25 = 3 > 2 ln 4 * 1
    log = _two_expert_log([0.75, 0.25], [0.25, 0.75], [1.0], [1])
    assert clipped_estimate(log, 0, [1.0, 1.0], 0.5) == 0.0
    assert clipped_estimate(log, 0, [1.0, 1.0], 0.0) == 3.0


def test_clipped_two_behavior_experts():
    log = _two_expert_log([0.5, 0.5], [0.5, 0.5], [1.0, 1.0], [0, 1])
    assert clipped_estimate(log, 0, [1.0, 2.0], 1e-9) == pytest.approx(1.0)


def test_clipped_index_sentinel():
    e = TabularExpert([[0.5, 0.5]])
    idx = clipped_index(SampleLog([e]), 0, [1.0], 2)
    assert idx.insufficient and idx.ucb == math.inf and idx.estimate == 0.0


def test_clipped_index_hand_log_matches_script():
    experts = [TabularExpert([[0.2, 0.8], [0.6, 0.4]]), TabularExpert([[0.5, 0.5], [0.3, 0.7]])]
    samples = [(0, 0, 1, 1.0), (1, 1, 0, 0.0), (1, 0, 0, 1.0), (0, 1, 0, 1.0)]
    beh, ctx, arms, rew = zip(*samples)
    log = SampleLog.from_arrays(experts, beh, list(ctx), arms, rew)
    m_row = [1.0, 1.7]
    pi = [e.probs.tolist() for e in experts]
    for c1 in (1.0, 16.0):
        idx = clipped_index(log, 0, m_row, 4, ClippedConfig(c1=c1))
        est, rad = oracles.clipped_ucb(samples, pi, 0, m_row, 4, c1)
        assert idx.estimate == pytest.approx(est, abs=1e-9)
        assert idx.radius == pytest.approx(rad, abs=1e-9)
        assert idx.ucb == idx.estimate + idx.radius


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.99))
def test_clipped_matches_brute_force(seed, eps):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 4))
    experts, log, samples, pi = random_problem(rng, N, 2, 3, int(rng.integers(1, 13)))
    m = 1 + 3 * rng.random(N)
    for k in range(N):
        assert clipped_estimate(log, k, m, eps) == pytest.approx(oracles.clipped(samples, pi, k, m, eps), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_clipped_range_and_monotone_in_level(seed):
    rng = np.random.default_rng(seed)
    experts, log, _, _ = random_problem(rng, 3, 2, 3, 15)
    m = 1 + 2 * rng.random(3)
    Z = z_weight(log, m)
    prev = -1.0
    for eps in (1.9, 1.0, 0.5, 0.1, 0.01, 1e-6):
        est = clipped_estimate(log, 0, m, eps)
        assert 0 <= est <= 2 * math.log(2 / eps) * len(log) / Z + 1e-12
        assert est >= prev - 1e-12
        prev = est


# --- partition and group means --------------------------------------------------

def _counts_log(n_per_expert):
    e = TabularExpert([[0.5, 0.5]])
    beh = [j for j, n in enumerate(n_per_expert) for _ in range(n)]
    rng = np.random.default_rng(0)
    beh = list(rng.permutation(beh))
    n = len(beh)
    return SampleLog.from_arrays([e] * len(n_per_expert), beh, [0] * n, [0] * n, [0.0] * n)


def test_partition_examples():
    assert [len(g) for g in partition_groups(_counts_log([6]), 3)] == [2, 2, 2]
    gs = partition_groups(_counts_log([5, 3]), 2)
    assert [g.counts.tolist() for g in gs] == [[3, 2], [2, 1]]
    log = _counts_log([4, 2])
    (only,) = partition_groups(log, 1)
    assert len(only) == len(log)
    with pytest.raises(ValueError):
        partition_groups(log, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=4), st.integers(1, 7))
def test_partition_is_balanced_partition(counts, g):
    log = _counts_log(counts)
    gs = partition_groups(log, g)
    assert sum(len(x) for x in gs) == len(log)
    rounds = sorted(r for x in gs for r in x.rounds.tolist())
    assert rounds == sorted(log.rounds.tolist())
    for j, n in enumerate(counts):
        per = [x.counts[j] for x in gs]
        assert set(per) <= {n // g, -(-n // g)}


def test_group_mean_examples():
    assert group_mean(self_log([1, 0]), 0, [1.0]) == 0.5
    log = _two_expert_log([0.5, 0.5], [0.25, 0.75], [1.0], [1])
    assert group_mean(log, 0, [1.0, 2.0]) == pytest.approx(2.0)
    assert group_mean(self_log([0, 0, 0]), 0, [1.0]) == 0.0
    with pytest.raises(ValueError):
        group_mean(SampleLog([TabularExpert([[1.0]])]), 0, [1.0])


def test_mom_single_group_is_weighted_mean():
    rng = np.random.default_rng(1)
    experts, log, samples, pi = random_problem(rng, 2, 2, 2, 10)
    cfg = MoMConfig(c2=0.1)  # l(t) = 1 for moderate t
    assert num_groups(10, cfg) == 1
    assert mom_estimate(log, 0, [1.0, 1.5], 10, cfg) == pytest.approx(group_mean(log, 0, [1.0, 1.5]))


def _log_with_group_means(means):
    # one expert, each group a single sample with the requested reward
    return self_log(means)


@pytest.mark.parametrize("means,expected", [((0.2, 0.5, 0.9), 0.5), ((0.2, 0.4, 0.6, 0.8), 0.5)])
def test_mom_median_convention(means, expected):
    log = _log_with_group_means(means)
    cfg = MoMConfig(c2=100.0)  # clamps to one group per sample
    assert mom_estimate(log, 0, [1.0], 50, cfg) == pytest.approx(expected)


def test_mom_radius_examples():
    log = self_log([1, 0, 1, 1, 0, 1, 0, 0])
    t = 8
    cfg = MoMConfig.practice()
    assert mom_index(log, 0, [1.0], t, cfg).radius == pytest.approx(math.sqrt(2 * 2 * math.log(t) / t))
    e = TabularExpert([[0.5, 0.5]])
    n = 8
    log2 = SampleLog.from_arrays([e, e], [1] * n, [0] * n, [0] * n, [1.0] * n)
    sig = 1.7
    assert mom_index(log2, 0, [sig, sig], t, cfg).radius == pytest.approx(sig * math.sqrt(4 * math.log(t) / t))
    assert mom_index(SampleLog([e]), 0, [1.0], 2, cfg).insufficient


def test_mom_index_hand_log_matches_script():
    experts = [TabularExpert([[0.2, 0.8], [0.6, 0.4]]), TabularExpert([[0.5, 0.5], [0.3, 0.7]])]
    samples = [(0, 0, 1, 1.0), (1, 1, 0, 0.0), (1, 0, 0, 1.0), (0, 1, 0, 1.0), (1, 1, 1, 1.0), (0, 0, 0, 0.0)]
    beh, ctx, arms, rew = zip(*samples)
    log = SampleLog.from_arrays(experts, beh, list(ctx), arms, rew)
    pi = [e.probs.tolist() for e in experts]
    for k, srow in ((0, [1.0, 1.3]), (1, [1.2, 1.0])):
        for t, cfg in ((6, MoMConfig.practice()), (3, MoMConfig(c2=1.0, c3=5.0))):
            idx = mom_index(log, k, srow, t, cfg)
            est, rad = oracles.mom(samples, pi, k, srow, t, cfg.c2, cfg.c3)
            assert idx.estimate == pytest.approx(est, abs=1e-9)
            assert idx.radius == pytest.approx(rad, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mom_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    N = int(rng.integers(1, 4))
    experts, log, samples, pi = random_problem(rng, N, 2, 3, int(rng.integers(1, 13)))
    s = 1 + rng.random(N)
    t = int(rng.integers(2, 30))
    for k in range(N):
        got = mom_index(log, k, s, t, MoMConfig.practice())
        est, rad = oracles.mom(samples, pi, k, s, t, 4.0, 2.0)
        assert got.estimate == pytest.approx(est, abs=1e-9)
        assert got.radius == pytest.approx(rad, abs=1e-9)


# --- sample log ----------------------------------------------------------------

def test_sample_log_invariants_and_growth():
    rng = np.random.default_rng(0)
    experts = [TabularExpert(rng.dirichlet(np.ones(3), size=2)) for _ in range(2)]
    log = SampleLog(experts, capacity=4)
    for t in range(1, 40):
        j = int(rng.integers(2))
        x = int(rng.integers(2))
        log.append(t, j, x, 1, float(rng.integers(2)))
    assert log.counts.sum() == len(log) == 39
    assert np.all((log.behavior_probs > 0) & (log.behavior_probs <= 1))
    with pytest.raises(ValueError):
        log.append(40, 0, 0, 0, 1.5)
    with pytest.raises(IndexError):
        log.append(40, 5, 0, 0, 1.0)
    extra = TabularExpert(rng.dirichlet(np.ones(3), size=2))
    log.add_experts([extra])
    assert log.target_probs.shape == (39, 3)
    assert np.array_equal(log.target_probs[:, 2], extra.probs[np.array(log.contexts), log.arms])


def test_from_arrays_equals_appending():
    rng = np.random.default_rng(1)
    experts, log, samples, _ = random_problem(rng, 3, 2, 3, 20)
    other = SampleLog(experts)
    for t, (j, x, v, y) in enumerate(samples, 1):
        other.append(t, j, x, v, y)
    for name in ("behavior", "arms", "rewards", "behavior_probs", "ranks", "target_probs", "counts"):
        assert np.array_equal(getattr(log, name), getattr(other, name)), name


# --- incremental indexers agree with the reference ----------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_indexers_match_reference(seed):
    rng = np.random.default_rng(seed)
    N, C, K, n = 4, 3, 3, 80
    experts = [TabularExpert(rng.dirichlet(np.ones(K), size=C)) for _ in range(N)]
    m = 1 + 2 * rng.random((N, N))
    np.fill_diagonal(m, 1.0)
    log = SampleLog(experts)
    clipped = ClippedIndexer(log, m, ClippedConfig.practice())
    mom = MoMIndexer(log, m, MoMConfig.practice())
    checkpoints = set(rng.choice(np.arange(1, n + 1), 6, replace=False).tolist()) | {n}
    for t in range(1, n + 1):
        j, x = int(rng.integers(N)), int(rng.integers(C))
        v = int(rng.choice(K, p=experts[j].probs[x]))
        log.append(t, j, x, v, float(rng.random() < 0.5))
        if t in checkpoints:
            ce, cr, _ = clipped.compute()
            me, mr, _ = mom.compute()
            for k in range(N):
                a = clipped_index(log, k, m[k], t, ClippedConfig.practice())
                b = mom_index(log, k, m[k], t, MoMConfig.practice())
                assert ce[k] == pytest.approx(a.estimate, abs=1e-9) and cr[k] == pytest.approx(a.radius, abs=1e-9)
                assert me[k] == pytest.approx(b.estimate, abs=1e-9) and mr[k] == pytest.approx(b.radius, abs=1e-9)


def test_indexers_after_adding_experts_with_vector_contexts():
    rng = np.random.default_rng(3)
    experts = [SoftmaxExpert(rng.normal(size=(3, 2))) for _ in range(2)]
    log = SampleLog(experts)
    for t in range(1, 31):
        x = np.round(rng.normal(size=2), 1)
        j = int(rng.integers(2))
        v = int(rng.choice(3, p=experts[j].evaluate(x)))
        log.append(t, j, x, v, float(v == 0))
    new = [SoftmaxExpert(rng.normal(size=(3, 2)))]
    log.add_experts(new)
    sig = 1 + rng.random((3, 3))
    np.fill_diagonal(sig, 1.0)
    mom = MoMIndexer(log, sig)
    clipped = ClippedIndexer(log, sig)
    me, mr, _ = mom.compute()
    ce, cr, _ = clipped.compute()
    for k in range(3):
        assert me[k] == pytest.approx(mom_index(log, k, sig[k], 30).estimate, abs=1e-9)
        assert ce[k] == pytest.approx(clipped_index(log, k, sig[k], 30).estimate, abs=1e-9)


def test_indexers_empty_log_sentinels():
    e = TabularExpert([[0.5, 0.5]])
    log = SampleLog([e, e])
    for ix in (ClippedIndexer(log, np.ones((2, 2))), MoMIndexer(log, np.ones((2, 2)))):
        est, rad, flag = ix.compute(2)
        assert np.all(rad == math.inf) and np.all(flag)


def test_configs():
    assert ClippedConfig.practice().c1 == 1.0 and ClippedConfig().c1 == 16.0
    assert (MoMConfig.practice().c2, MoMConfig.practice().c3) == (4.0, 2.0)
    assert (MoMConfig().c2, MoMConfig().c3) == (8.0, 64.0)
    with pytest.raises(ValueError):
        ClippedConfig(c1=0)
    with pytest.raises(ValueError):
        ClippedConfig(beta_tol=1e-3)
    assert ExpertIndex(0.25, 0.5).ucb == 0.75
