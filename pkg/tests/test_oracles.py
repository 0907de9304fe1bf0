import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lomdm.core import RandomStream, TimeGrid, Vocabulary, enumerate_absorbing_trajectories
from lomdm.diffusion import reverse_step
from lomdm.model import NetworkShape, NeuralDenoiser, SchedulerHeads, TabularDenoiser, TabularHead, encode_states
from lomdm.oracles import (
    PropositionReport,
    arm_factorized_nll,
    check_arm_limit,
    check_bd3lm_windows,
    check_genmd4_equivalence,
    check_mdlm_reduction,
    check_rloo_unbiased,
    exact_likelihood,
    exact_likelihood_paths,
    genmd4_integrand,
    likelihood_table,
    loglog_slope,
    mdlm_loss,
    oemdm_integrand,
    prefix_inputs,
    reweighted_row,
    sample_mask_onsets,
)
from lomdm.schedulers import ArmEpsilon, Bd3lmEpsilon, LearnedHead, Linear, Polynomial

V2 = Vocabulary(2)

# frozen from the brute-force path sum for TabularDenoiser.random(V=2, L=2, seed 4), T=3, Polynomial(0.7)
FROZEN_LIKELIHOOD = {
    (0, 0): 0.6688050599360598,
    (0, 1): 0.17939786338851268,
    (1, 0): 0.044698281161478795,
    (1, 1): 0.10709879551394874,
}


def test_exact_likelihood_frozen_values():
    den = TabularDenoiser.random(V2, 2, RandomStream(4))
    grid = TimeGrid(3)
    for x, p in FROZEN_LIKELIHOOD.items():
        assert exact_likelihood(np.array(x), den, Polynomial(0.7), grid, V2) == pytest.approx(p, rel=1e-13)
    assert sum(FROZEN_LIKELIHOOD.values()) == pytest.approx(1.0, abs=1e-14)


def _path_sum_by_hand(x, den, spec, grid, vocab):
    """Independent path sum: product of per-step reverse kernels along every absorbing trajectory."""
    total = 0.0
    for tr in enumerate_absorbing_trajectories(x, grid, vocab.mask_id):
        p = 1.0
        for tau in range(grid.steps, 0, -1):
            k = reverse_step(tr.states[tau], den(tr.states[tau]), spec, float(grid.s_of(tau)),
                             float(grid.t_of(tau)), vocab)
            p *= np.prod(k[np.arange(len(x)), tr.states[tau - 1]])
        rows = den(tr.states[0])
        p *= np.prod(rows[np.arange(len(x)), x])
        total += p
    return total


@pytest.mark.parametrize("spec", [Linear(), Polynomial(0.7), ArmEpsilon(3, 0.1), Bd3lmEpsilon(3, 3, 0.1)])
def test_dp_matches_path_sums(spec):
    vocab = Vocabulary(2)
    den = TabularDenoiser.random(vocab, 3, RandomStream(7))
    grid = TimeGrid(3)
    x = np.array([1, 0, 1])
    dp = exact_likelihood(x, den, spec, grid, vocab)
    assert dp == pytest.approx(exact_likelihood_paths(x, den, spec, grid, vocab), rel=1e-12)
    assert dp == pytest.approx(_path_sum_by_hand(x, den, spec, grid, vocab), rel=1e-12)


def test_dp_with_learned_reverse_scheduler():
    vocab = Vocabulary(2)
    den = TabularDenoiser.random(vocab, 2, RandomStream(7))
    spec = LearnedHead(TabularHead.random(vocab, 2, RandomStream(8)), "psi")
    grid = TimeGrid(4)
    table = likelihood_table(den, spec, grid, vocab, 2)
    assert sum(table.values()) == pytest.approx(1.0, abs=1e-12)
    x = np.array([0, 1])
    assert table[(0, 1)] == pytest.approx(_path_sum_by_hand(x, den, spec, grid, vocab), rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_likelihood_table_sums_to_one(seed, T):
    vocab = Vocabulary(2)
    den = TabularDenoiser.random(vocab, 2, RandomStream(seed))
    table = likelihood_table(den, Polynomial(1.3), TimeGrid(T), vocab, 2)
    assert sum(table.values()) == pytest.approx(1.0, abs=1e-12)
    assert all(0 < p < 1 for p in table.values())


def test_prefix_inputs_and_arm_factors():
    x = np.array([1, 0, 1])
    ins = prefix_inputs(x, 2, order=[2, 0, 1])
    np.testing.assert_array_equal(ins[0], [2, 2, 2])
    np.testing.assert_array_equal(ins[1], [2, 2, 1])
    np.testing.assert_array_equal(ins[2], [1, 2, 1])
    den = TabularDenoiser.random(V2, 2, RandomStream(4))
    # read the table directly: p(x0 | m m) * p(x1 | x0 m)
    p0 = den.table[encode_states(np.array([2, 2]), V2), 0, 0]
    p1 = den.table[encode_states(np.array([0, 2]), V2), 1, 1]
    assert arm_factorized_nll(den, np.array([0, 1]), V2) == pytest.approx(-np.log(p0 * p1), rel=1e-14)
    assert arm_factorized_nll(den, np.array([0, 1]), V2) == pytest.approx(1.2005728680294765, rel=1e-13)


def test_arm_limit_report():
    den = TabularDenoiser.random(V2, 2, RandomStream(0))
    rep = check_arm_limit(den, np.array([1, 0]), vocab=V2)
    assert isinstance(rep, PropositionReport)
    assert rep.passed, rep.as_record()
    assert rep.details["monotone"]
    assert abs(rep.details["slope"] - 1.0) <= 0.3
    with pytest.raises(ValueError):
        check_arm_limit(den, np.array([1, 0]), grid=TimeGrid(4), vocab=V2)


def test_loglog_slope_of_power_law():
    eps = np.array([0.1, 0.05, 0.025])
    assert loglog_slope(eps, 3 * eps**2) == pytest.approx(2.0)


def test_mdlm_loss_by_hand():
    z = np.array([[2, 1], [2, 2]])
    conf = np.array([[0.5, 1.0], [0.25, 0.5]])
    got = mdlm_loss(np.array([0.5, 0.25]), z, conf, 2)
    np.testing.assert_allclose(got, [np.log(2) / 0.5, (np.log(4) + np.log(2)) / 0.25])


def test_mdlm_reduction_report():
    den = TabularDenoiser.random(V2, 3, RandomStream(0))
    rep = check_mdlm_reduction(den, np.array([1, 0, 1]), 500, RandomStream(1), V2)
    assert rep.passed and rep.details["velocity_max"] == 0.0
    rep = check_mdlm_reduction(den, np.array([1, 0, 1]), 500, RandomStream(1), V2, fwd=Polynomial(0.7))
    assert rep.details["velocity_max"] == 0.0


@settings(max_examples=200)
@given(
    st.lists(st.floats(0.05, 5.0), min_size=2, max_size=5),
    st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5),
    st.integers(0, 4),
    st.floats(0.01, 1.0),
)
def test_genmd4_identity(exps, weights, x_token, t):
    V = len(exps)
    row = np.array(weights[:V]) / np.sum(weights[:V])
    rep = check_genmd4_equivalence(exps, np.append(row, 0.0), x_token % V, t)
    assert rep.passed, rep.details


def test_genmd4_pieces():
    A = np.array([1.0, 3.0])
    row = np.array([0.25, 0.75, 0.0])
    tilted = reweighted_row(A, row)
    np.testing.assert_allclose(tilted, [0.1, 0.9, 0.0])
    a = genmd4_integrand(A, row, 1)
    assert a == pytest.approx(-3 * np.log(0.75) - 3 + 2.5)
    assert oemdm_integrand(A, row, 1) == pytest.approx(a, abs=1e-12)
    with pytest.raises(ValueError):
        check_genmd4_equivalence([0.0, 1.0], row, 0, 0.5)


def test_mask_onsets_are_absorbing_and_within_grid():
    grid = TimeGrid(16)
    onset = sample_mask_onsets(Bd3lmEpsilon(4, 2, 0.05), grid, 4, 1000, RandomStream(0))
    assert onset.shape == (1000, 4)
    assert np.all((onset >= 0) & (onset <= 16))


def test_bd3lm_windows():
    grid = TimeGrid(32)
    tight = check_bd3lm_windows(0.05, 4, 2, grid, 20_000, RandomStream(0))
    loose = check_bd3lm_windows(0.1, 4, 2, grid, 20_000, RandomStream(0))
    assert tight.passed and loose.passed
    assert tight.max_deviation < loose.max_deviation
    single = check_bd3lm_windows(0.1, 4, 1, grid, 1000, RandomStream(0))
    assert single.max_deviation == 0.0


def test_rloo_unbiased_small():
    torch.manual_seed(0)
    shape = NetworkShape(vocab_size=2, length=3, width=8, layers=1, heads=2, dropout=0.0)
    den = NeuralDenoiser(shape).double()
    heads = SchedulerHeads(shape, zero_init=False).double()
    rep = check_rloo_unbiased(np.array([1, 0, 1]), den, heads, 0.6, 5000, RandomStream(2), max_coords=32)
    assert rep.passed, rep.details


def test_state_space_enumeration_matches_product():
    # the DP visits every masked pattern; check the pattern count the trajectory oracle implies
    x = np.array([0, 1])
    grid = TimeGrid(2)
    trajs = enumerate_absorbing_trajectories(x, grid, 2)
    assert len(trajs) == len(list(itertools.product(range(grid.steps + 1), repeat=2)))
