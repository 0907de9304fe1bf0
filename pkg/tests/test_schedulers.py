import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lomdm import schedulers as S
from lomdm.core import RandomStream, Vocabulary
from lomdm.model import TabularHead

DENSE = np.linspace(0.0, 1.0, 2001)[1:]


def test_smoothstep_values():
    assert S.smoothstep(0.5) == 0.5
    assert S.smoothstep(-1.0) == 0.0 and S.smoothstep(2.0) == 1.0
    assert S.smoothstep(0.25) == 0.15625


def test_smoothstep_monotone_and_c1():
    u = np.linspace(-0.5, 1.5, 4001)
    assert np.all(np.diff(S.smoothstep(u)) >= 0)
    d = S.smoothstep_derivative(u)
    assert d[0] == 0 and d[-1] == 0 and np.all(d >= 0)


def test_polynomial_example():
    ev = S.eval(S.Polynomial(0.7), 0, None, 0.25)
    assert ev.alpha == pytest.approx(1 - 0.25**0.7, abs=1e-15)
    assert ev.alpha == pytest.approx(0.6213, abs=5e-4)
    assert ev.velocity == pytest.approx(2.8, rel=1e-15)


def test_arm_examples():
    spec = S.ArmEpsilon(2, 0.1)
    assert S.eval(spec, 1, None, 0.25).alpha == pytest.approx(0.525, abs=1e-15)
    assert S.eval(spec, 0, None, 0.25).alpha == pytest.approx(0.975, abs=1e-15)


def test_linear_example():
    ev = S.eval(S.Linear(), 0, None, 0.5)
    assert ev.alpha == 0.5 and ev.velocity == 2.0


def test_eval_domain_and_context_errors():
    with pytest.raises(ValueError):
        S.eval(S.Linear(), 0, None, 0.0)
    with pytest.raises(ValueError):
        S.eval(S.Linear(), 0, None, 1.5)
    with pytest.raises(ValueError):
        S.eval(S.GenMd4Fixed((0.5, 1.0)), 0, None, 0.5)


def _all_specs():
    vocab = Vocabulary(3)
    head = TabularHead.random(vocab, 4, RandomStream(0).child("h"))
    ctx = np.array([0, 2, 1, 1])
    return [
        (S.Linear(), None, 4),
        (S.Polynomial(0.7), None, 4),
        (S.Polynomial(2.5), None, 4),
        (S.ArmEpsilon(4, 0.05), None, 4),
        (S.ArmEpsilon(4, 0.1, order=(2, 0, 3, 1)), None, 4),
        (S.Bd3lmEpsilon(4, 2, 0.1), None, 4),
        (S.GenMd4Fixed((0.3, 1.0, 1.7)), ctx, 4),
        (S.LearnedHead(head, "phi"), ctx, 4),
        (S.LearnedHead(head, "psi"), np.array([3, 2, 3, 1]), 4),
    ]


@pytest.mark.parametrize("spec,ctx,L", _all_specs())
def test_freeform_validity(spec, ctx, L):
    rep = S.validate_freeform(spec, contexts=None if ctx is None else [ctx], t_grid=DENSE, length=L)
    assert rep.start_residual == 0.0 and rep.end_residual <= 1e-15
    assert rep.max_increase < 0
    assert rep.valid


@pytest.mark.parametrize("spec,ctx,L", _all_specs())
def test_velocity_identity(spec, ctx, L):
    ev = S.evaluate(spec, DENSE, context=ctx, length=L)
    lhs = ev.velocity * ev.one_minus_alpha
    np.testing.assert_allclose(lhs, -ev.dalpha_dt, rtol=1e-12, atol=0)
    assert np.all(ev.velocity > 0)
    inner = (DENSE > 0) & (DENSE < 1)
    assert np.all((ev.alpha[inner] > 0) & (ev.alpha[inner] < 1))


def test_arm_slope_bounded_by_eps():
    ev = S.evaluate(S.ArmEpsilon(5, 0.05), DENSE)
    assert np.all(ev.dalpha_dt <= -0.05 + 1e-15)


def test_polynomial_velocity_times_t_is_exponent():
    ev = S.evaluate(S.Polynomial(0.7), DENSE, length=3)
    np.testing.assert_allclose(ev.velocity * DENSE[:, None], 0.7, rtol=1e-15)


def test_learned_head_rejects_bad_constants():
    with pytest.raises(ValueError):
        S.LearnedHead(lambda c: c, "phi", 0.5, 0.6)
    with pytest.raises(ValueError):
        S.LearnedHead(lambda c: c, "phi", 0.7, 0.0)
    with pytest.raises(ValueError):
        S.LearnedHead(lambda c: c, "chi", 0.7, 0.6)


def test_ratio_bound_values():
    lo, hi = S.velocity_ratio_bound(0.7, 0.65)
    assert lo == pytest.approx(0.05 / 1.35) and hi == pytest.approx(27.0)
    assert round(lo, 4) == 0.0370
    assert S.velocity_ratio_bound(1.0, 0.0) == (1.0, 1.0)
    with pytest.raises(ValueError):
        S.velocity_ratio_bound(0.6, 0.6)


@settings(max_examples=100)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=9), st.lists(st.floats(-50, 50), min_size=2, max_size=9),
       st.floats(1e-6, 1.0))
def test_learned_ratio_inside_bound(raw_phi, raw_psi, t):
    L = min(len(raw_phi), len(raw_psi))
    phi = S.LearnedHead(lambda c, r=np.array(raw_phi[:L]): r, "phi")
    psi = S.LearnedHead(lambda c, r=np.array(raw_psi[:L]): r, "psi")
    ctx = np.zeros(L, dtype=np.int64)
    ratio = S.evaluate(phi, t, context=ctx).velocity / S.evaluate(psi, t, context=ctx).velocity
    lo, hi = S.velocity_ratio_bound(0.7, 0.65)
    assert np.all((ratio > lo) & (ratio < hi))


@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_learned_exponent_mean_is_c1(raw):
    spec = S.LearnedHead(lambda c, r=np.array(raw): r, "phi", 0.7, 0.65)
    e = spec.exponents(np.zeros(len(raw), dtype=np.int64))
    assert abs(e.mean() - 0.7) < 1e-12
    assert np.all((e > 0.05) & (e < 1.35))


def test_records_round_trip():
    for spec in (S.Linear(), S.Polynomial(0.7), S.ArmEpsilon(3, 0.1, (2, 1, 0)), S.Bd3lmEpsilon(4, 2, 0.05),
                 S.GenMd4Fixed((0.5, 1.5))):
        assert S.from_record(S.to_record(spec)) == spec
    learned = S.LearnedHead(lambda c: c, "psi", 0.8, 0.3)
    back = S.from_record(S.to_record(learned), head=learned.head)
    assert (back.role, back.c1, back.c2) == ("psi", 0.8, 0.3)
    with pytest.raises(ValueError):
        S.from_record({"kind": "nope"})
    with pytest.raises(ValueError):
        S.from_record({"kind": "polynomial", "v": 1})
