import math
from dataclasses import replace

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from distofo.bounds import (
    BoundInputs,
    build_report,
    corollary1_select,
    estimate_E0,
    factored_constants,
    lemma1_constants,
    rho_constrained,
    rho_unconstrained,
    theorem1_bound,
    theorem2_bound,
)
from distofo.errors import (
    RequiresStrongConvexityAboveOne,
    StepSizeConditionViolated,
    UnboundedConstraintSet,
)
from distofo.netgraph import averaging_matrix, from_matrix, metropolis_weights, standard_graphs
from distofo.objective import LocalObjective, ReducedObjective, Region, estimate_constants
from distofo.plant import AffinePlant


def _inputs(**kw):
    base = dict(n=3, tau=2, eta=1e-4, delta=0.01, tr_w2tau=1.2, tr_dev2=0.2, lambda2=0.66,
                L0=1.0, L1=2.0, m=1.5, E0=3.0)
    base.update(kw)
    return BoundInputs(**base)


def test_rho_examples():
    assert rho_unconstrained(2.0, 0.1) == pytest.approx(0.92, abs=1e-15)
    assert rho_constrained(1.0, 1.0, 0.1) == pytest.approx(0.9, abs=1e-15)


def test_zero_deviation_gives_zero_re():
    assert lemma1_constants(_inputs(tr_dev2=0.0)).R_e == 0.0


def test_small_eta_limit():
    inp = _inputs(E0=0.0)
    limit = 16 * inp.L0 ** 2 * inp.tr_w2tau * (inp.n + 4) ** 2
    r = [lemma1_constants(replace(inp, eta=e)).R for e in (1e-4, 1e-6, 1e-9)]
    assert abs(r[-1] - limit) < abs(r[0] - limit)
    assert r[-1] == pytest.approx(limit, rel=1e-12)


def test_lemma1_step_size_gate():
    inp = _inputs()
    with pytest.raises(StepSizeConditionViolated):
        lemma1_constants(replace(inp, eta=2 * inp.step_size_limit))
    assert lemma1_constants(replace(inp, eta=0.99 * inp.step_size_limit)).alpha < 1


def test_lemma1_path3_against_factored(path3_problem):
    graph, plant, objs, _ = path3_problem
    w = metropolis_weights(graph, 4)
    e0 = estimate_E0(plant, objs, w, np.zeros(3), 0.01, 4, 500, np.random.default_rng(0))
    inp = BoundInputs.from_weights(w, 4, 1e-4, 0.01, 1.0, 2.0, 1.5, E0=e0.value)
    lem = lemma1_constants(inp)
    ref = factored_constants(inp)
    assert all(math.isfinite(x) for x in (lem.R, lem.R_f, lem.R_e))
    for key in ("alpha", "R", "R_f", "R_e"):
        assert getattr(lem, key) == pytest.approx(ref[key], rel=1e-12)


def test_theorem1_requires_m_above_one():
    with pytest.raises(RequiresStrongConvexityAboveOne):
        theorem1_bound(_inputs(m=1.0))


def test_theorem1_zero_eta_degenerate():
    t = theorem1_bound(_inputs(eta=0.0))
    assert t.p == 0.0 and t.rho == 1.0 and t.degenerate


def test_theorem1_step_gate():
    inp = _inputs()
    with pytest.raises(StepSizeConditionViolated):
        theorem1_bound(replace(inp, eta=1.01 * inp.step_size_limit))


def test_theorem1_curve_shape():
    t = theorem1_bound(_inputs(), init_gap=2.0)
    assert t.curve(t.tau) == pytest.approx(2.0 + t.limit)
    ks = np.arange(t.tau + 1, t.tau + 100)
    assert np.all(np.diff(t.curve(ks)) <= 0)


def test_theorem2_gates():
    with pytest.raises(UnboundedConstraintSet):
        theorem2_bound(_inputs())
    with pytest.raises(UnboundedConstraintSet):
        theorem2_bound(_inputs(diameter=math.inf))
    inp = _inputs(diameter=1.0)
    with pytest.raises(StepSizeConditionViolated):
        theorem2_bound(replace(inp, eta=2 * inp.step_size_limit))


def test_theorem2_singleton_set():
    t = theorem2_bound(_inputs(diameter=0.0), init_gap=0.0)
    # iterates pinned at u*: empirical gap 0 lies under the curve
    assert np.all(t.curve(np.arange(3, 50)) >= 0.0)
    assert t.R_prime == pytest.approx(2 + 4 * math.sqrt(1.2 * 4 * 49))


def test_corollary_complete_averaging():
    w = averaging_matrix(4)
    inp = BoundInputs.from_weights(w, 1, 1e-4, 0.01, 1.0, 1.5, 2.0, E0=1.0)
    sel = corollary1_select(1e-2, inp)
    assert sel.tau == 1
    direct = theorem1_bound(replace(inp.with_tau(sel.tau), eta=sel.eta, delta=sel.delta))
    assert direct.limit < 1e-2
    assert direct.lemma.alpha == pytest.approx(0.25, rel=1e-12)


def test_corollary_monotone_in_eps(path3_problem):
    graph, *_ = path3_problem
    w = metropolis_weights(graph, 1)
    inp = BoundInputs.from_weights(w, 1, 1e-4, 0.01, 2.1, 2.2, 1.4, E0=30.0)
    taus = [corollary1_select(eps, inp).tau for eps in (1e-1, 5e-2, 2.5e-2, 1.25e-2, 6e-3, 3e-3)]
    assert all(b >= a for a, b in zip(taus, taus[1:]))


def test_corollary_loose_eps_and_gates():
    w = metropolis_weights(standard_graphs("path", 3))
    inp = BoundInputs.from_weights(w, 1, 1e-4, 0.01, 1.0, 1.5, 1.2, E0=1.0)
    sel = corollary1_select(1e9, inp)
    assert sel.tau == 1 and sel.limit < 1e9
    assert 0 < sel.eta < (inp.m - 1) / inp.m
    with pytest.raises(ValueError):
        corollary1_select(0.0, inp)
    with pytest.raises(RequiresStrongConvexityAboveOne):
        corollary1_select(1e-2, replace(inp, m=0.5))


def test_re_nonincreasing_in_tau():
    w = metropolis_weights(standard_graphs("tree-of-fig2"))
    base = BoundInputs.from_weights(w, 1, 1e-6, 0.01, 1.0, 1.5, 1.2, E0=0.0)
    re = [lemma1_constants(base.with_tau(t)).R_e for t in range(1, 30)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(re, re[1:]))


def test_e0_constant_objective_is_zero():
    plant = AffinePlant(np.zeros((3, 3)), np.zeros(3))
    objs = [LocalObjective(lambda u, y: 4.2)] * 3
    w = metropolis_weights(standard_graphs("path", 3), 3)
    e0 = estimate_E0(plant, objs, w, np.zeros(3), 100.0, 3, 200)
    # W^p phi_0 equals W^q phi_0^init up to rounding in the matrix products
    assert e0.value <= 1e-25


def test_e0_single_cell():
    plant = AffinePlant(np.zeros((2, 2)), np.zeros(2))
    objs = [LocalObjective(lambda u, y: u * u)] * 2
    e0 = estimate_E0(plant, objs, metropolis_weights(standard_graphs("path", 2)), np.zeros(2),
                     0.1, 1, 100)
    assert e0.cell == (1, 1)


def test_e0_gaussian_moment_oracle():
    # symbolic expectation of ((a (u + d v)^2 - a (u + d w)^2) v / d)^2, v, w ~ N(0, 1)
    a, u, d, v, w = sp.symbols("a u d v w")
    expr = sp.expand((a * ((u + d * v) ** 2 - (u + d * w) ** 2) * v / d) ** 2)
    poly = sp.Poly(expr, v, w)
    mom = lambda k: 0 if k % 2 else sp.factorial2(k - 1)  # noqa: E731
    closed = sum(c * mom(i) * mom(j) for (i, j), c in poly.terms())
    av, uv, dv = 1.3, 0.4, 0.2
    exact = float(closed.subs({a: av, u: uv, d: dv}))
    assert exact == pytest.approx(av ** 2 * (16 * uv ** 2 + 12 * dv ** 2), rel=1e-12)

    plant = AffinePlant(np.zeros((1, 1)), np.zeros(1))
    objs = [LocalObjective(lambda x, y: av * x * x)]
    est = estimate_E0(plant, objs, from_matrix(np.ones((1, 1)), 1), np.array([uv]), dv, 1,
                      20000, np.random.default_rng(1))
    assert abs(est.mean - exact) <= 3 * est.stderr
    assert est.value == pytest.approx(est.mean + 3 * est.stderr)


def test_report_text_and_flags():
    w = metropolis_weights(standard_graphs("path", 3))
    good = BoundInputs.from_weights(w, 2, 1e-4, 0.01, 1.0, 2.0, 1.5, E0=3.0, diameter=1.0,
                                    epsilon=1e-2)
    rep = build_report(good, 0.5, 0.7, provenance={"scale_c": 4.0})
    assert rep.hypotheses_ok and rep.step_size_ok
    for key in ("alpha", "R", "R_f", "R_e", "rho", "p", "rho_prime", "R_prime"):
        assert getattr(rep, key) >= 0
    assert rep.tau_min >= 1
    text = rep.to_text()
    assert "alpha = " in text and "provenance.scale_c = 4.0" in text
    assert "provenance.metropolis_variant = lazy" in text
    bad = build_report(replace(good, eta=1.0, m=0.5))
    assert not bad.hypotheses_ok and bad.R is None and bad.rho is None
    assert len(bad.violations) >= 2


def test_theorem1_constants_factored_identity():
    inp = _inputs()
    t = theorem1_bound(inp)
    ref = factored_constants(inp)
    for key in ("a1", "a2", "a3", "p", "rho", "limit"):
        assert getattr(t, key) == pytest.approx(ref[key], rel=1e-12)


valid_inputs = st.builds(
    lambda n, tau, frac, delta, tr, dev_frac, l0, l1, m, e0, diam: _inputs(
        n=n, tau=tau, delta=delta, tr_w2tau=tr, tr_dev2=dev_frac * (tr - 1.0), L0=l0, L1=l1,
        m=m, E0=e0, diameter=diam,
        eta=frac * min(delta / math.sqrt(4 * n * l0 ** 2 * tr), (m - 1) / m, 2 * m / l1 ** 2)),
    st.integers(2, 20), st.integers(1, 50), st.floats(0.01, 0.99), st.floats(1e-3, 1.0),
    st.floats(1.0, 10.0), st.floats(0.0, 1.0), st.floats(0.1, 50.0), st.floats(1.0, 20.0),
    st.floats(1.01, 5.0), st.floats(0.0, 100.0), st.floats(0.0, 10.0))


@settings(max_examples=1000)
@given(valid_inputs)
def test_dual_implementation_agreement(inp):
    inp = replace(inp, L1=max(inp.L1, inp.m))
    lem = lemma1_constants(inp)
    t1 = theorem1_bound(inp)
    ref = factored_constants(inp)
    for key, val in (("alpha", lem.alpha), ("R", lem.R), ("R_f", lem.R_f), ("R_e", lem.R_e),
                     ("a1", t1.a1), ("a2", t1.a2), ("a3", t1.a3), ("p", t1.p),
                     ("rho", t1.rho), ("limit", t1.limit)):
        assert val == pytest.approx(ref[key], rel=1e-12, abs=1e-300), key
    if 1.0 - 2.0 * inp.m * inp.eta + inp.L1 ** 2 * inp.eta ** 2 >= 0:
        t2 = theorem2_bound(inp)
        assert t2.rho == pytest.approx(ref["rho_prime"], rel=1e-12)
        assert t2.R_prime == pytest.approx(ref["R_prime"], rel=1e-12)
        assert t2.limit == pytest.approx(ref["limit_prime"], rel=1e-12)


@settings(max_examples=200)
@given(valid_inputs)
def test_contraction_factors_below_one(inp):
    inp = replace(inp, L1=max(inp.L1, inp.m))
    if 0 < inp.eta < (inp.m - 1) / inp.m:
        assert theorem1_bound(inp).rho < 1
    if 0 < inp.eta < 2 * inp.m / inp.L1 ** 2:
        assert rho_constrained(inp.m, inp.L1, inp.eta) < 1


def test_constants_from_path3_fixture(path3_problem):
    graph, plant, objs, c = path3_problem
    consts = estimate_constants(ReducedObjective(plant, objs), Region(np.zeros(3), 0.5, ))
    assert consts.m > 1 and c == 4.0
