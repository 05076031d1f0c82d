import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ducb.divergence import (DivergenceMatrix, conditional_f_divergence, empirical_divergences,
                             exact_divergences, f1, f2, m_divergence, median_of_means,
                             sigma_divergence)
from ducb.experts import SoftmaxExpert, TabularExpert


def brute_divergence(P, Q, w, f):
    total = 0.0
    for x in range(len(w)):
        for v in range(len(P[x])):
            total += w[x] * Q[x][v] * f(P[x][v] / Q[x][v])
    return total


def test_identical_is_zero():
    p = [[0.2, 0.8], [0.6, 0.4]]
    for f in (f1, f2):
        assert conditional_f_divergence(p, p, [0.5, 0.5], f) == 0.0


def test_chi_square_example():
    assert conditional_f_divergence([0.5, 0.5], [0.25, 0.75], [1.0], f2) == pytest.approx(1 / 3, abs=1e-15)
    assert sigma_divergence([0.5, 0.5], [0.25, 0.75], [1.0]) == pytest.approx(math.sqrt(4 / 3), abs=1e-12)


def test_f1_example():
    assert conditional_f_divergence([1.0, 0.0], [0.5, 0.5], [1.0], f1) == pytest.approx(math.e - 1, abs=1e-12)
    assert m_divergence([1.0, 0.0], [0.5, 0.5], [1.0]) == pytest.approx(2.0, abs=1e-12)
    assert sigma_divergence([1.0, 0.0], [0.5, 0.5], [1.0]) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_identical_mixed_contexts_give_one():
    p = [[0.9, 0.1], [0.9, 0.1]]
    assert m_divergence(p, p, [0.3, 0.7]) == 1.0
    assert sigma_divergence(p, p, [0.3, 0.7]) == 1.0


def test_unbounded_reported_as_inf():
    assert conditional_f_divergence([0.5, 0.5], [1.0, 0.0], [1.0], f2) == math.inf
    assert m_divergence([0.5, 0.5], [1.0, 0.0], [1.0]) == math.inf
    # zero-weight contexts do not matter
    assert conditional_f_divergence([[0.5, 0.5], [1, 0]], [[1.0, 0.0], [1, 0]], [0.0, 1.0], f2) == 0.0


def test_f1_overflow_guard():
    assert f1(1000.0) == math.inf
    assert f1(1.0) == 0.0
    assert f1(0.0) == -1.0


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_matches_brute_force(C, K, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(K), size=C)
    Q = rng.dirichlet(np.ones(K), size=C)
    w = rng.dirichlet(np.ones(C))
    for f in (f1, f2):
        got = conditional_f_divergence(P, Q, w, f)
        want = brute_divergence(P.tolist(), Q.tolist(), w.tolist(), lambda x: float(f(x)))
        assert got == pytest.approx(max(want, 0.0), rel=1e-10, abs=1e-12)
        assert got >= 0


def test_exact_matrix_properties():
    rng = np.random.default_rng(1)
    experts = [TabularExpert(rng.dirichlet(np.ones(3), size=2)) for _ in range(4)]
    d = exact_divergences(experts, [0.4, 0.6])
    assert np.all(np.diag(d.m) == 1.0) and np.all(np.diag(d.sigma) == 1.0)
    assert np.all(d.m >= 1) and np.all(np.isfinite(d.m)) and np.all(d.sigma >= 1)
    assert d.m[0, 1] == pytest.approx(m_divergence(experts[0].probs, experts[1].probs, [0.4, 0.6]))
    back = DivergenceMatrix.from_dict(d.to_dict())
    assert np.array_equal(back.m, d.m)


def test_serialization_of_infinite_entries():
    d = DivergenceMatrix(np.array([[1, np.inf], [2, 1]]), np.ones((2, 2)))
    enc = d.to_dict()
    assert enc["m"][0][1] == "inf"
    assert DivergenceMatrix.from_dict(enc).m[0, 1] == math.inf
    assert d.unbounded_pairs() == [(0, 1)]


def test_median_of_means_round_robin():
    v = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    # groups {1,3,5}, {2,4,6} -> means 3, 4 -> median 3.5
    assert median_of_means(v, 2) == 3.5
    assert median_of_means(v, 100) == np.median(v)
    assert median_of_means(v, 1) == v.mean()


def test_empirical_identical_experts():
    e = TabularExpert([[0.2, 0.8], [0.5, 0.5]])
    d = empirical_divergences([e, e, e], [0, 1, 1, 0, 1])
    assert np.all(d.m == 1.0) and np.all(d.sigma == 1.0)


def test_empirical_groups_clamped():
    rng = np.random.default_rng(0)
    experts = [TabularExpert(rng.dirichlet(5 * np.ones(2), size=3)) for _ in range(2)]
    d = empirical_divergences(experts, [0, 2], num_groups=5)
    assert np.all(np.isfinite(d.m))


def test_empirical_ignores_outlier_context():
    # every context is identical except one where the experts disagree sharply
    calm = [0.5, 0.5]
    a = TabularExpert([calm, [0.999, 0.001]])
    b = TabularExpert([[0.4, 0.6], [0.001, 0.999]])
    contexts = [0] * 99 + [1]
    robust = empirical_divergences([a, b], contexts, num_groups=5)
    clean = empirical_divergences([a, b], [0] * 100, num_groups=5)
    assert robust.sigma[0, 1] == clean.sigma[0, 1]
    plain_mean = exact_divergences([a, b], [0.99, 0.01])
    assert plain_mean.sigma[0, 1] > clean.sigma[0, 1] * 2


def test_empirical_softmax_contexts():
    rng = np.random.default_rng(0)
    experts = [SoftmaxExpert(rng.normal(size=(3, 2))) for _ in range(3)]
    d = empirical_divergences(experts, rng.normal(size=(50, 2)), max_contexts=20)
    assert d.size == 3 and np.all(d.sigma >= 1)


def test_empirical_error_shrinks_with_more_contexts():
    rng = np.random.default_rng(7)
    C = 8
    experts = [TabularExpert(rng.dirichlet(2 * np.ones(3), size=C)) for _ in range(3)]
    w = rng.dirichlet(np.ones(C))
    exact = exact_divergences(experts, w)
    errors = []
    for n in (10**3, 10**4, 10**5):
        errs = []
        for seed in range(5):
            ctx = np.random.default_rng(seed).choice(C, n, p=w)
            emp = empirical_divergences(experts, ctx)
            errs.append(np.max(np.abs(emp.sigma - exact.sigma) / exact.sigma))
        errors.append(np.mean(errs))
    assert errors[0] > errors[1] > errors[2]


def test_f1_never_nan_for_large_ratios():
    x = np.concatenate([np.linspace(0, 700, 7001), [1e-300, 1e300]])
    v = f1(x)
    assert not np.any(np.isnan(v))
    assert np.all(v >= -1)
