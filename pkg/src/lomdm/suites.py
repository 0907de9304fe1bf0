"""Verification suites shared by the ``verify`` command and the acceptance tests.

Each suite returns a :class:`PropositionReport`.  Sizes are parameters so the
command line can run quick versions while the acceptance tests run the full ones.
"""

from __future__ import annotations

import time

import numpy as np
import torch

from .core import RandomStream, TimeGrid, Vocabulary
from .diffusion import ancestral_sample_batch
from .model import (
    Features,
    NetworkShape,
    NeuralDenoiser,
    SchedulerHeads,
    TabularDenoiser,
    TabularHead,
    finite_diff_check,
    stop_gradient_probe,
)
from .objective import ObjectiveNoise, combined_objective, nelbo_discrete_exact, velocity_term
from .oracles import (
    PropositionReport,
    check_arm_limit,
    check_bd3lm_windows,
    check_genmd4_equivalence,
    check_mdlm_reduction,
    check_rloo_unbiased,
    exact_likelihood,
    likelihood_table,
)
from .schedulers import LearnedHead, Linear, Polynomial, evaluate, velocity_ratio_bound


def _timed(report: PropositionReport, start: float) -> PropositionReport:
    report.details["seconds"] = round(time.perf_counter() - start, 3)
    return report


def elbo_suite(n_models: int = 20, steps: int = 64, seed: int = 0, margin: float = -1e-9) -> PropositionReport:
    """Exact discrete bound against the exact likelihood on random tabular models."""
    start = time.perf_counter()
    root = RandomStream(seed).child("elbo")
    worst = np.inf
    count = 0
    grid = TimeGrid(steps)
    for k in range(n_models):
        rng = root.child("model", k)
        V = 2 + k % 2
        L = 2 + (k // 2) % 2
        vocab = Vocabulary(V)
        den = TabularDenoiser.random(vocab, L, rng.child("denoiser"))
        x = rng.child("x").integers(0, V, size=L)
        phi = TabularHead.random(vocab, L, rng.child("phi"))
        psi = TabularHead.random(vocab, L, rng.child("psi"))
        pairs = [
            (Linear(), Linear()),
            (Polynomial(0.7), Polynomial(0.7)),
            (LearnedHead(phi, "phi"), LearnedHead(psi, "psi")),
            (LearnedHead(phi, "phi"), LearnedHead(phi, "psi")),
        ]
        for fwd, rev in pairs:
            nll = -np.log(exact_likelihood(x, den, rev, grid, vocab))
            bound = nelbo_discrete_exact(x, den, fwd, rev, grid, vocab)
            worst = min(worst, bound - nll)
            count += 1
    return _timed(PropositionReport("elbo_validity", count, float(-worst), margin, bool(worst >= margin),
                                    details={"min_gap": float(worst)}), start)


def mdlm_suite(n: int = 10_000, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    rng = RandomStream(seed).child("mdlm")
    vocab = Vocabulary(3)
    den = TabularDenoiser.random(vocab, 3, rng.child("denoiser"))
    x = np.array([2, 0, 1])
    rep = check_mdlm_reduction(den, x, n, rng.child("samples"), vocab)
    poly = check_mdlm_reduction(den, x, n, rng.child("poly"), vocab, fwd=Polynomial(0.7))
    rep.details["polynomial_velocity_max"] = poly.details["velocity_max"]
    rep.passed = rep.passed and poly.passed
    return _timed(rep, start)


def arm_suite(seed: int = 0, lengths=(2, 3)) -> PropositionReport:
    start = time.perf_counter()
    vocab = Vocabulary(2)
    root = RandomStream(seed).child("arm")
    reports = []
    for L in lengths:
        den = TabularDenoiser.random(vocab, L, root.child("denoiser", L))
        x = root.child("x", L).integers(0, 2, size=L)
        reports.append(check_arm_limit(den, x, vocab=vocab))
        reports.append(check_arm_limit(den, x, vocab=vocab, order=tuple(reversed(range(L)))))
    worst = max(abs(r.details["slope"] - 1.0) for r in reports)
    ok = all(r.passed for r in reports)
    details = {"slopes": [r.details["slope"] for r in reports], "monotone": [r.details["monotone"] for r in reports],
               "deltas": [list(r.deviations.values()) for r in reports]}
    return _timed(PropositionReport("arm_limit", len(reports), worst, 0.3, ok, details=details), start)


def velocity_suite(n: int = 1_000_000, seed: int = 0) -> PropositionReport:
    """Nonnegativity, and near-zero values only for near-equal velocity pairs."""
    start = time.perf_counter()
    g = RandomStream(seed).child("velocity").generator
    A = np.exp(g.uniform(np.log(1e-2), np.log(1e2), n))
    A_hat = np.exp(g.uniform(np.log(1e-2), np.log(1e2), n))
    equal = A[: n // 100]
    vals = velocity_term(A, A_hat)
    eq_vals = velocity_term(equal, equal)
    negative = int((vals < 0).sum())
    tiny = vals <= 1e-12
    flagged = np.nonzero(tiny & (np.abs(A - A_hat) > 1e-9))[0]
    spurious = int(flagged.size)
    ok = negative == 0 and spurious == 0 and float(np.max(np.abs(eq_vals))) <= 1e-12
    # near A = A_hat the term is A d^2/2 - A d^3/3 + ..., d = A_hat/A - 1, so such pairs can be exact
    d = A_hat[flagged] / A[flagged] - 1.0
    series = A[flagged] * (d**2 / 2 - d**3 / 3 + d**4 / 4)
    pairs = [{"A": float(a), "A_hat": float(b), "value": float(v), "series": float(s)}
             for a, b, v, s in zip(A[flagged], A_hat[flagged], vals[flagged], series)]
    return _timed(PropositionReport(
        "velocity_term", n, float(max(-vals.min(), 0.0)), 1e-12, ok,
        details={"negative": negative, "near_zero_without_equal_pair": spurious,
                 "equal_pair_max": float(np.max(np.abs(eq_vals))), "flagged_pairs": pairs}), start)


def ratio_suite(n: int = 100_000, c1: float = 0.7, c2: float = 0.65, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    rng = RandomStream(seed).child("ratio")
    lo, hi = velocity_ratio_bound(c1, c2)
    vocab = Vocabulary(4)
    L = 6
    phi = LearnedHead(TabularHead.random(vocab, L, rng.child("phi"), scale=8.0), "phi", c1, c2)
    psi = LearnedHead(TabularHead.random(vocab, L, rng.child("psi"), scale=8.0), "psi", c1, c2)
    x = rng.child("x").integers(0, vocab.size, size=(n, L))
    z = np.where(rng.child("mask").uniform((n, L)) < 0.5, vocab.mask_id, x)
    t = rng.child("t").uniform(n) * (1 - 1e-6) + 1e-6
    ratio = evaluate(phi, t, context=x).velocity / evaluate(psi, t, context=z).velocity
    inside = bool(np.all((ratio > lo) & (ratio < hi)))
    return _timed(PropositionReport("velocity_ratio", n * L, float(max(ratio.max() / hi, lo / ratio.min())), 1.0,
                                    inside, details={"min": float(ratio.min()), "max": float(ratio.max()),
                                                     "bound": [lo, hi]}), start)


def genmd4_suite(n: int = 10_000, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    g = RandomStream(seed).child("genmd4").generator
    worst = 0.0
    for _ in range(n):
        V = int(g.integers(2, 8))
        w = g.uniform(0.1, 2.0, V)
        row = np.concatenate([g.dirichlet(np.ones(V)), [0.0]])
        x_tok = int(g.integers(0, V))
        t = float(g.uniform(0.05, 1.0))
        worst = max(worst, check_genmd4_equivalence(w, row, x_tok, t).max_deviation)
    return _timed(PropositionReport("genmd4_equivalence", n, worst, 1e-12, worst <= 1e-12), start)


def sampler_suite(n: int = 100_000, steps: int = 8, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    rng = RandomStream(seed).child("sampler")
    vocab = Vocabulary(2)
    L = 2
    den = TabularDenoiser.random(vocab, L, rng.child("denoiser"))
    grid = TimeGrid(steps)
    spec = Linear()
    x, traj = ancestral_sample_batch(den, spec, grid, L, n, rng.child("draws"), vocab, return_trajectories=True)
    table = likelihood_table(den, spec, grid, vocab, L)
    worst = 0.0
    for seq, p in table.items():
        freq = float(np.all(x == np.array(seq), axis=1).mean())
        se = np.sqrt(p * (1 - p) / n)
        worst = max(worst, abs(freq - p) / se)
    masked = traj == vocab.mask_id
    absorbing = masked[:, -1].all(-1) & ~np.any(masked[:, :-1] & ~masked[:, 1:], axis=(1, 2))
    consistent = np.all(masked | (traj == x[:, None, :]), axis=(1, 2))
    frac = float((absorbing & consistent).mean())
    return _timed(PropositionReport("sampler_vs_oracle", n, worst, 3.0, worst <= 3.0 and frac == 1.0,
                                    details={"absorbing_fraction": frac,
                                             "total_probability": float(sum(table.values()))}), start)


def rloo_suite(n_pairs: int = 100_000, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    rng = RandomStream(seed).child("rloo")
    torch.manual_seed(rng.child("init").torch_seed())
    shape = NetworkShape(2, 3, width=16, layers=1, heads=2, dropout=0.0)
    den = NeuralDenoiser(shape).double().eval()
    heads = SchedulerHeads(shape, zero_init=False).double().eval()
    rep = check_rloo_unbiased(np.array([1, 0, 1]), den, heads, 0.6, n_pairs, rng.child("pairs"))
    return _timed(rep, start)


def gradient_instance(seed: int = 0, V: int = 3, L: int = 4, batch: int = 3):
    """A float64 neural instance with frozen noise, for gradient checks."""
    rng = RandomStream(seed).child("gradient")
    torch.manual_seed(rng.child("init").torch_seed())
    shape = NetworkShape(V, L, width=16, layers=1, heads=2, dropout=0.0)
    den = NeuralDenoiser(shape).double().eval()
    heads = SchedulerHeads(shape, zero_init=False).double().eval()
    x = torch.as_tensor(rng.child("x").integers(0, V, size=(batch, L)))
    noise = ObjectiveNoise.draw(batch, L, rng.child("noise"), t_min=0.2)
    features: dict = {}
    with torch.no_grad():
        base = combined_objective(x, den, heads, noise=noise, frozen_features=features)
    frozen = (base.first.loss.detach(), base.second.loss.detach())

    def objective():
        return combined_objective(x, den, heads, noise=noise, frozen_losses=frozen, frozen_features=features,
                                  floor=None).total

    return den, heads, x, noise, objective


def gradient_suite(seed: int = 0, tolerance: float = 1e-4) -> PropositionReport:
    start = time.perf_counter()
    den, heads, x, noise, objective = gradient_instance(seed)
    params = {
        "theta": list(den.parameters()),
        "phi": list(heads.phi.parameters()),
        "psi": list(heads.psi.parameters()),
    }
    reports = finite_diff_check(objective, params, step=1e-5, tolerance=tolerance,
                                rng=RandomStream(seed).child("fd-coords"))

    # a backbone weight that reaches the heads only through detached features
    def head_only():
        feats = Features(den.backbone(x).detach())
        return heads.exponents("phi", feats).pow(2).sum() + heads.exponents("psi", feats).pow(3).sum()

    probe = stop_gradient_probe(head_only, den.token_embedding.weight, index=1)
    worst = max(r.max_relative_error for r in reports)
    ok = all(r.passed for r in reports) and probe.expected_detached
    return _timed(PropositionReport(
        "gradient", sum(r.coordinates for r in reports), worst, tolerance, ok,
        deviations={r.group: r.max_relative_error for r in reports},
        details={"stop_gradient_analytic": probe.analytic, "stop_gradient_numeric": probe.finite_difference}),
        start)


def bd3lm_suite(n: int = 50_000, seed: int = 0) -> PropositionReport:
    start = time.perf_counter()
    rng = RandomStream(seed).child("bd3lm")
    grid = TimeGrid(64)
    fracs = {}
    for eps in (0.1, 0.05):
        fracs[eps] = check_bd3lm_windows(eps, 4, 2, grid, n, rng.child("eps", int(eps * 1000))).max_deviation
    single = check_bd3lm_windows(0.1, 4, 1, grid, n, rng.child("single")).max_deviation
    ratio = fracs[0.05] / fracs[0.1] if fracs[0.1] > 0 else float("nan")
    ok = 0.35 <= ratio <= 0.65 and single == 0.0 and fracs[0.1] <= 4 * 0.1
    return _timed(PropositionReport("bd3lm_windows", 3 * n, abs(ratio - 0.5), 0.15, ok, deviations=fracs,
                                    details={"single_block_violations": single, "halving_ratio": ratio}), start)


SUITE_FUNCTIONS = {
    "velocity": velocity_suite,
    "ratio": ratio_suite,
    "mdlm": mdlm_suite,
    "genmd4": genmd4_suite,
    "elbo": elbo_suite,
    "arm": arm_suite,
    "bd3lm": bd3lm_suite,
    "sampler": sampler_suite,
    "rloo": rloo_suite,
    "gradient": gradient_suite,
}

QUICK_SIZES = {
    "velocity": {"n": 100_000},
    "ratio": {"n": 10_000},
    "mdlm": {"n": 2_000},
    "genmd4": {"n": 1_000},
    "elbo": {"n_models": 6},
    "sampler": {"n": 40_000},
    "rloo": {"n_pairs": 20_000},
    "bd3lm": {"n": 20_000},
}


def run_suite(name: str, seed: int = 0, quick: bool = False) -> PropositionReport:
    kwargs = dict(QUICK_SIZES.get(name, {})) if quick else {}
    return SUITE_FUNCTIONS[name](seed=seed, **kwargs)
