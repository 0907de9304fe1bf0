"""Brute-force ground truth on tiny instances and numerical checks of the model's guarantees."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .core import (
    RandomStream,
    TimeGrid,
    Vocabulary,
    enumerate_absorbing_trajectories,
    masked_set_array,
)
from .diffusion import reverse_step
from .model import Features, NeuralDenoiser, SchedulerHeads
from .objective import (
    InfiniteLossError,
    loss_terms,
    nelbo_mc,
    rloo_loss,
    velocity_term_torch,
)
from .schedulers import (
    ArmEpsilon,
    Bd3lmEpsilon,
    GenMd4Fixed,
    LearnedHead,
    Linear,
    evaluate,
)

ARM_EPSILONS = (0.1, 0.05, 0.025, 0.0125)


@dataclass
class PropositionReport:
    name: str
    instances: int
    max_deviation: float
    tolerance: float
    passed: bool
    deviations: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def as_record(self) -> dict:
        return {
            "name": self.name, "instances": self.instances, "max_deviation": self.max_deviation,
            "tolerance": self.tolerance, "passed": self.passed,
            "deviations": {str(k): v for k, v in self.deviations.items()}, "details": self.details,
        }


# ---------------------------------------------------------------------------
# exact likelihood


def _reverse_stay(rev, s, t, z, length):
    """Stay-masked probability per (state, position) for the step t -> s."""
    if isinstance(rev, LearnedHead):
        e = evaluate(rev, 1.0, context=z).velocity
        return (s / t) ** e
    om_t = evaluate(rev, t, length=length).one_minus_alpha
    om_s = evaluate(rev, s, length=length).one_minus_alpha
    return np.broadcast_to(om_s / om_t, z.shape)


def exact_likelihood(x, denoiser, rev, grid: TimeGrid, vocab: Vocabulary) -> float:
    """Model probability of ``x`` summed over every absorbing path that ends at ``x``.

    Paths that reach ``x`` only visit corruptions of ``x``, so the sum runs as a
    forward pass over the ``2**L`` mask patterns, one transition matrix per step.
    """
    x = vocab.check_sequence(x)
    L = x.shape[0]
    z, masks = masked_set_array(x, vocab.mask_id)
    rows = np.asarray(denoiser(z), dtype=np.float64)
    conf = np.take_along_axis(rows, np.broadcast_to(x, z.shape)[..., None], axis=-1)[..., 0]
    src = masks[:, None, :]
    dst = masks[None, :, :]
    message = np.zeros(len(z))
    message[-1] = 1.0  # all positions masked at t = 1
    for tau in range(grid.steps, 0, -1):
        stay = _reverse_stay(rev, float(grid.s_of(tau)), float(grid.t_of(tau)), z, L)
        reveal = ((1.0 - stay) * conf)[:, None, :]
        factor = np.where(src, np.where(dst, stay[:, None, :], reveal), np.where(dst, 0.0, 1.0))
        message = message @ factor.prod(-1)
    final = np.where(masks, conf, 1.0).prod(-1)
    return float(message @ final)


def exact_likelihood_paths(x, denoiser, rev, grid: TimeGrid, vocab: Vocabulary) -> float:
    """Same quantity by explicit enumeration of the trajectories; slow, for cross-checks."""
    x = vocab.check_sequence(x)
    total = 0.0
    for traj in enumerate_absorbing_trajectories(x, grid, vocab.mask_id):
        p = 1.0
        for tau in range(grid.steps, 0, -1):
            z_t, z_s = traj.states[tau], traj.states[tau - 1]
            kernel = reverse_step(z_t, denoiser(z_t), rev, float(grid.s_of(tau)), float(grid.t_of(tau)), vocab)
            p *= float(np.prod(kernel[np.arange(x.shape[0]), z_s]))
            if p == 0.0:
                break
        z0 = traj.states[0]
        rows = denoiser(z0)
        p *= float(np.prod(np.where(z0 == vocab.mask_id, rows[np.arange(x.shape[0]), x], 1.0)))
        total += p
    return total


def likelihood_table(denoiser, rev, grid: TimeGrid, vocab: Vocabulary, length: int) -> dict:
    return {
        seq: exact_likelihood(np.array(seq), denoiser, rev, grid, vocab)
        for seq in itertools.product(range(vocab.size), repeat=length)
    }


# ---------------------------------------------------------------------------
# autoregressive limit


def prefix_inputs(x, mask_id: int, order=None) -> list[np.ndarray]:
    """Inputs in which the first k positions of ``order`` are revealed, k = 0..L-1."""
    x = np.asarray(x, dtype=np.int64)
    order = list(range(x.shape[0])) if order is None else list(order)
    out = []
    for k in range(x.shape[0]):
        y = np.full_like(x, mask_id)
        y[order[:k]] = x[order[:k]]
        out.append(y)
    return out


def arm_factorized_nll(denoiser, x, vocab: Vocabulary, order=None) -> float:
    x = vocab.check_sequence(x)
    order = list(range(x.shape[0])) if order is None else list(order)
    nll = 0.0
    for k, y in enumerate(prefix_inputs(x, vocab.mask_id, order)):
        i = order[k]
        p = float(denoiser(y)[i, x[i]])
        if p <= 0.0:
            raise InfiniteLossError(f"zero probability for position {i}")
        nll -= np.log(p)
    return float(nll)


def _window_counts(grid: TimeGrid, n_windows: int) -> np.ndarray:
    t = grid.t_of(np.arange(1, grid.steps + 1))
    k = np.arange(1, n_windows + 1)
    start, end = 1.0 - k / n_windows, 1.0 - (k - 1) / n_windows
    return ((t[None, :] >= start[:, None] - 1e-12) & (t[None, :] <= end[:, None] + 1e-12)).sum(-1)


def loglog_slope(eps, values) -> float:
    return float(np.polyfit(np.log(eps), np.log(values), 1)[0])


def check_arm_limit(denoiser, x, epsilons=ARM_EPSILONS, grid: Optional[TimeGrid] = None,
                    vocab: Optional[Vocabulary] = None, order=None, slope_tolerance: float = 0.3) -> PropositionReport:
    x = np.asarray(x, dtype=np.int64)
    L = x.shape[0]
    vocab = vocab or denoiser.vocab
    grid = grid or TimeGrid(16 * L)
    if _window_counts(grid, L).min() < 4:
        raise ValueError(f"grid T={grid.steps} puts fewer than 4 points in some window of L={L}")
    target = float(np.exp(-arm_factorized_nll(denoiser, x, vocab, order)))
    eps = sorted(float(e) for e in epsilons)[::-1]
    deltas = {
        e: abs(exact_likelihood(x, denoiser, ArmEpsilon(L, e, None if order is None else tuple(order)), grid, vocab) - target)
        for e in eps
    }
    values = np.array([deltas[e] for e in eps])
    monotone = bool(np.all(np.diff(values) <= 0))
    slope = loglog_slope(eps, values) if np.all(values > 0) else float("nan")
    ok = monotone and abs(slope - 1.0) <= slope_tolerance
    return PropositionReport(
        "arm_limit" if order is None else "arm_limit_permuted", len(eps), float(values.max()),
        slope_tolerance, ok, deltas, {"slope": slope, "monotone": monotone, "target": target},
    )


# ---------------------------------------------------------------------------
# MDLM reduction


def mdlm_loss(t, z, confidence, mask_id: int) -> np.ndarray:
    """Masked cross-entropy weighted by 1/t, coded directly."""
    z = np.asarray(z)
    nll = np.where(z == mask_id, -np.log(np.where(z == mask_id, confidence, 1.0)), 0.0)
    return nll.sum(-1) / np.asarray(t)


def check_mdlm_reduction(denoiser, x, n: int, rng: RandomStream, vocab: Vocabulary,
                         fwd=None, rev=None, tolerance: float = 1e-12) -> PropositionReport:
    fwd = fwd or Linear()
    rev = rev or fwd
    est = nelbo_mc(x, denoiser, fwd, rev, n, rng, vocab)
    bd = est.samples
    vel_max = float(np.max(np.abs(bd.l_velocity)))
    details = {"velocity_max": vel_max}
    dev = 0.0
    if isinstance(fwd, Linear):
        # rebuild the masked sequences from the per-token records
        L = len(x)
        z = np.broadcast_to(np.asarray(x), (n, L)).copy()
        conf = np.ones((n, L))
        z[bd.per_token["item"], bd.per_token["position"]] = vocab.mask_id
        conf[bd.per_token["item"], bd.per_token["position"]] = bd.per_token["confidence"]
        ref = mdlm_loss(bd.t, z, conf, vocab.mask_id)
        dev = float(np.max(np.abs(bd.l_main - ref) / np.maximum(1.0, np.abs(ref))))
        details["main_relative_deviation"] = dev
    worst = max(vel_max, dev)
    return PropositionReport("mdlm_reduction", n, worst, tolerance, worst <= tolerance, details=details)


# ---------------------------------------------------------------------------
# vocabulary-wise schedulers


def genmd4_integrand(A_gen, row, x_token: int) -> float:
    """Velocity-form integrand of a vocabulary-wise scheduler for one masked position."""
    A_gen = np.asarray(A_gen, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)[: A_gen.size]
    return float(-A_gen[x_token] * np.log(row[x_token]) - A_gen[x_token] + A_gen @ row)


def reweighted_row(A_gen, row) -> np.ndarray:
    """Denoiser row tilted by the vocabulary velocities; the mask coordinate is carried along."""
    A_gen = np.asarray(A_gen, dtype=np.float64)
    row = np.asarray(row, dtype=np.float64)
    weights = np.concatenate([A_gen, np.zeros(row.size - A_gen.size)])
    if row.size > A_gen.size:
        weights[A_gen.size:] = 1.0
    tilted = weights * row
    return tilted / (A_gen @ row[: A_gen.size] + row[A_gen.size:].sum())


def oemdm_integrand(A_gen, row, x_token: int) -> float:
    A_gen = np.asarray(A_gen, dtype=np.float64)
    A = float(A_gen[x_token])
    A_hat = float(A_gen @ np.asarray(row, dtype=np.float64)[: A_gen.size])
    tilted = reweighted_row(A_gen, row)
    main, vel = loss_terms(A, A_hat, tilted[x_token])
    return float(main + vel)


def check_genmd4_equivalence(vocab_exponents, denoiser_row, x_token: int, t: float,
                             tolerance: float = 1e-12) -> PropositionReport:
    """Compare both integrands with velocities taken from a fixed vocabulary-wise scheduler at ``t``."""
    exps = np.asarray(vocab_exponents, dtype=np.float64)
    if np.any(exps <= 0):
        raise ValueError("vocabulary exponents must be positive")
    spec = GenMd4Fixed(tuple(exps))
    A_gen = evaluate(spec, t, context=np.arange(exps.size)).velocity
    row = np.asarray(denoiser_row, dtype=np.float64)
    a = genmd4_integrand(A_gen, row, x_token)
    b = oemdm_integrand(A_gen, row, x_token)
    dev = abs(a - b)
    return PropositionReport("genmd4_equivalence", 1, dev, tolerance, dev <= tolerance,
                             details={"genmd4": a, "oemdm": b})


# ---------------------------------------------------------------------------
# RLOO


def _all_corruption_losses(x, denoiser: NeuralDenoiser, heads: SchedulerHeads, t: float, e_phi):
    """Detached per-state loss for every corruption of ``x`` at a fixed time."""
    V = denoiser.shape.vocab_size
    z_np, masks = masked_set_array(x.numpy(), V)
    z = torch.as_tensor(z_np)
    with torch.no_grad():
        logp, hidden = denoiser(z)
        e_psi = heads.exponents("psi", Features(hidden))
        A = (e_phi.detach() / t).expand_as(e_psi)
        A_hat = e_psi / t
        log_conf = logp.gather(-1, x.expand_as(z).unsqueeze(-1)).squeeze(-1)
        m = torch.as_tensor(masks)
        terms = torch.where(m, -A * log_conf + velocity_term_torch(A, A_hat), torch.zeros_like(A))
    return z, torch.as_tensor(masks), terms.sum(-1)


def check_rloo_unbiased(x, denoiser: NeuralDenoiser, heads: SchedulerHeads, t: float, n_pairs: int,
                        rng: RandomStream, loss_fn: Optional[Callable] = None, max_coords: int = 256,
                        threshold: float = 4.0) -> PropositionReport:
    """Two-sample estimator mean against the exact score-function gradient for the forward head.

    Every sampled pair lands on one of the ``2**L`` corruptions, so per-pair
    gradients are combinations of ``2**L`` enumerated score vectors.  Mean and
    variance per coordinate are therefore exact sums over pair counts.
    """
    x = torch.as_tensor(np.asarray(x, dtype=np.int64))
    params = [p for p in heads.phi.parameters()]
    with torch.no_grad():
        feats = Features(denoiser.backbone(x.unsqueeze(0)).detach())
    e_phi = heads.exponents("phi", feats)[0]
    z, masks, losses = _all_corruption_losses(x, denoiser, heads, t, e_phi)
    if loss_fn is not None:
        losses = torch.as_tensor([float(loss_fn(row.numpy())) for row in z], dtype=torch.float64)
    losses = losses.double()
    log_t = float(np.log(t))
    log_om = e_phi.double() * log_t
    logq = torch.where(masks, log_om, torch.log(-torch.expm1(log_om))).sum(-1)
    S = z.shape[0]

    def flat_grad(value):
        if not value.requires_grad:
            return torch.zeros(sum(p.numel() for p in params), dtype=torch.float64)
        gs = torch.autograd.grad(value, params, retain_graph=True, allow_unused=True)
        return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1).double() for p, g in zip(params, gs)])

    scores = torch.stack([flat_grad(logq[k]) for k in range(S)])  # (S, P)
    q = logq.detach().exp()
    exact = (q * losses) @ scores

    # sample pairs of corruptions
    om = np.exp(log_om.detach().numpy())
    u = rng.child("pairs").uniform((n_pairs, 2, x.shape[0]))
    bits = (u < om).astype(np.int64)
    codes = (bits * (1 << np.arange(x.shape[0]))).sum(-1)  # (n, 2)
    lq = logq.detach()[torch.as_tensor(codes)].clone().requires_grad_(True)
    f = losses[torch.as_tensor(codes)]
    surrogate = rloo_loss(f[:, 0], f[:, 1], lq[:, 0], lq[:, 1]).sum()
    (w,) = torch.autograd.grad(surrogate, [lq])  # d surrogate / d logq, (n, 2)
    W = torch.zeros(n_pairs, S, dtype=torch.float64)
    W.scatter_add_(1, torch.as_tensor(codes), w)
    mean = W.mean(0) @ scores
    second = torch.einsum("zk,zp,kp->p", (W.T @ W) / n_pairs, scores, scores)
    var = (second - mean**2) * n_pairs / (n_pairs - 1)
    se = torch.sqrt(torch.clamp(var, min=0.0) / n_pairs)

    P = scores.shape[1]
    sel = rng.child("coords").generator.choice(P, size=min(max_coords, P), replace=False)
    gap = (mean - exact).abs()[sel]
    se_sel = se[sel]
    z_scores = torch.where(se_sel > 0, gap / torch.where(se_sel > 0, se_sel, torch.ones_like(se_sel)),
                           torch.where(gap <= 1e-12, torch.zeros_like(gap), torch.full_like(gap, float("inf"))))
    worst = float(z_scores.max()) if z_scores.numel() else 0.0
    return PropositionReport(
        "rloo_unbiased", n_pairs, worst, threshold, worst <= threshold,
        details={"coordinates": int(sel.size), "exact_norm": float(exact.norm()),
                 "mean_norm": float(mean.norm()), "max_abs_gap": float(gap.max()) if gap.numel() else 0.0},
    )


# ---------------------------------------------------------------------------
# block windows


def sample_mask_onsets(spec, grid: TimeGrid, length: int, n: int, rng: RandomStream) -> np.ndarray:
    """First grid index at which each position is masked along coupled forward paths.

    One uniform per (path, position) drives the whole path: position i is masked at
    t exactly when its uniform falls below ``1 - alpha_i(t)``, which is absorbing
    because ``1 - alpha`` increases in t.
    """
    om = evaluate(spec, grid.t_values, length=length).one_minus_alpha  # (T+1, L)
    u = rng.uniform((n, length))
    masked = u[:, None, :] < om[None]
    return np.argmax(masked, axis=1)  # always masked at t = 1


def check_bd3lm_windows(eps: float, length: int, blocks: int, grid: TimeGrid, n: int,
                        rng: RandomStream) -> PropositionReport:
    spec = Bd3lmEpsilon(length, blocks, eps)
    counts = _window_counts(grid, blocks)
    if counts.min() < 1:
        raise ValueError(f"grid T={grid.steps} leaves a block window without grid points")
    onset = sample_mask_onsets(spec, grid, length, n, rng)
    t_onset = grid.t_of(onset)
    b = spec.block_of()
    start, end = 1.0 - b / blocks, 1.0 - (b - 1) / blocks
    outside = (t_onset < start - 1e-12) | (t_onset > end + 1e-12)
    frac = float(outside.any(-1).mean())
    se = float(np.sqrt(max(frac * (1 - frac), 1.0 / n) / n))
    bound = length * eps
    return PropositionReport(
        "bd3lm_windows", n, frac, bound, frac <= bound + 3 * se,
        details={"eps": eps, "stderr": se, "per_position": outside.mean(0).tolist()},
    )
