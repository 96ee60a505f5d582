import json
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freqmark.verify import (InsufficientQueries, HttpOracle, binomial_tail, compute_threshold,
                             min_queries, serve_oracle, verify_ownership)


def exact_tail(n, m, p):
    p = Fraction(p)
    return sum(comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(m, n + 1))


def oracle_threshold(n, p, alpha):
    """Smallest m/n with an exactly enumerated tail below alpha, or None."""
    for m in range(n + 1):
        if exact_tail(n, m, p) < Fraction(str(alpha)):
            return Fraction(m, n)
    return None


@pytest.mark.parametrize("n", [2, 3, 5, 8, 13, 20])
@pytest.mark.parametrize("classes,alpha", [(2, 0.4), (2, 0.05), (3, 0.01), (10, 1e-3), (4, 0.2)])
def test_threshold_matches_enumeration(n, classes, alpha):
    want = oracle_threshold(n, Fraction(1, classes), alpha)
    if want is None:
        with pytest.raises(InsufficientQueries):
            compute_threshold(n, classes, alpha)
    else:
        assert compute_threshold(n, classes, alpha) == pytest.approx(float(want), abs=1e-12)


def test_declared_default_threshold():
    # n=500, ten classes, alpha=1e-6; exact enumeration gives m=86
    assert oracle_threshold(500, Fraction(1, 10), Fraction(1, 10 ** 6)) == Fraction(86, 500)
    assert compute_threshold(500, 10) == 0.172


def test_single_query_is_insufficient():
    with pytest.raises(InsufficientQueries) as err:
        compute_threshold(1, 2, 0.4)
    assert err.value.minimum == 2
    assert compute_threshold(2, 2, 0.4) == 1.0
    assert min_queries(1e-6, 0.1) == 7


@given(st.integers(1, 60), st.integers(0, 61), st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.9]))
def test_tail_matches_exact(n, m, p):
    assert binomial_tail(n, m, p) == pytest.approx(float(exact_tail(n, min(m, n + 1), p)) if m <= n else 0.0,
                                                   rel=1e-9, abs=1e-300)


@given(st.integers(7, 400), st.sampled_from([2, 3, 10]), st.sampled_from([1e-2, 1e-4, 1e-6]))
def test_threshold_properties(n, classes, alpha):
    try:
        tau = compute_threshold(n, classes, alpha)
    except InsufficientQueries:
        return
    m = round(tau * n)
    assert binomial_tail(n, m, 1 / classes) < alpha <= binomial_tail(n, m - 1, 1 / classes)
    assert 1 / classes < tau <= 1


def test_threshold_arg_errors():
    for args in ((0, 10), (10, 1), (10, 10, 0.0), (10, 10, 1.0)):
        with pytest.raises(ValueError):
            compute_threshold(*args)


class Constant:
    def __init__(self, label):
        self.label = label

    def predict(self, images):
        return np.full(len(images), self.label)


def test_constant_oracles(tiny_split):
    _, _, dv = tiny_split
    hit = verify_ownership(Constant(0), dv, 0, alpha=0.01)
    assert hit.wsr == 1.0 and hit.decision == "owned" and hit.owned
    miss = verify_ownership(Constant(1), dv, 0, alpha=0.01)
    assert miss.wsr == 0.0 and miss.decision == "not-owned" and miss.p_value == 1.0


def test_explicit_tau_and_monotone_decision(tiny_split):
    _, _, dv = tiny_split
    n = len(dv)
    labels = np.zeros(n, dtype=np.int64)
    labels[n // 2:] = 1

    def half(images):
        return labels[:len(images)]

    assert verify_ownership(half, dv, 0, tau=0.5).decision == "owned"
    assert verify_ownership(half, dv, 0, tau=0.51).decision == "not-owned"


def test_withheld_when_queries_fail(tiny_split):
    _, _, dv = tiny_split
    calls = {"n": 0}

    def flaky(images):
        calls["n"] += 1
        if len(images) > 1 or calls["n"] % 3 == 0:
            raise ConnectionError("down")
        return np.zeros(len(images), dtype=np.int64)

    rep = verify_ownership(flaky, dv, 0, alpha=0.01)
    assert rep.failures > 0.05 * rep.queries and rep.decision == "withheld"
    assert rep.answered + rep.failures == rep.queries


def test_report_serialisation(tiny_split):
    _, _, dv = tiny_split
    rep = verify_ownership(Constant(0), dv, 0, alpha=0.01)
    d = json.loads(rep.to_json())
    assert d["decision"] == "owned" and d["queries"] == len(dv)
    md = rep.to_markdown()
    assert "| decision | owned |" in md and "100.00%" in md


def test_http_oracle_roundtrip(tiny_model, tiny_split):
    _, _, dv = tiny_split
    server = serve_oracle(tiny_model)
    try:
        url = "http://%s:%d/" % server.server_address[:2]
        remote = HttpOracle(url)
        assert np.array_equal(remote.predict(dv.images), tiny_model.predict(dv.images))
        a = verify_ownership(remote, dv, 0, alpha=0.01, parallelism=4)
        b = verify_ownership(tiny_model, dv, 0, alpha=0.01)
        assert a.to_dict() == b.to_dict()
    finally:
        server.shutdown()


def test_unreachable_oracle_is_withheld(tiny_split):
    _, _, dv = tiny_split
    rep = verify_ownership(HttpOracle("http://127.0.0.1:9/", timeout=0.5), dv, 0, alpha=0.01)
    assert rep.decision == "withheld" and rep.answered == 0 and rep.failures == len(dv)


@pytest.mark.parametrize("classes,alpha", [(10, 1e-6), (2, 0.05), (3, 0.01)])
def test_threshold_nonincreasing_in_n(classes, alpha):
    """The stated invariant, checked literally. It fails: tau = m/n moves on a lattice,
    so it rises whenever m steps up (C=10, alpha=1e-6: n=8 -> 7/8, n=9 -> 8/9).
    The enumeration oracle confirms each rise independently of the implementation."""
    taus = {}
    for n in range(1, 41):
        want = oracle_threshold(n, Fraction(1, classes), alpha)
        if want is not None:
            taus[n] = want
    rises = [(n, taus[n - 1], taus[n]) for n in taus if n - 1 in taus and taus[n] > taus[n - 1]]
    assert not rises, f"tau rises with n at {[(n, str(a), str(b)) for n, a, b in rises[:3]]}"


@given(st.integers(1, 400), st.sampled_from([2, 3, 10]), st.sampled_from([0.05, 1e-3, 1e-6]))
def test_required_hits_nondecreasing_in_n(n, classes, alpha):
    # what does hold: the number of target hits demanded never drops as n grows
    try:
        a = round(compute_threshold(n, classes, alpha) * n)
    except InsufficientQueries:
        return
    b = round(compute_threshold(n + 1, classes, alpha) * (n + 1))
    assert a <= b <= a + 1
