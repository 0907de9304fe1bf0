"""Negative ELBO: per-token terms, Monte Carlo and exact discrete-time estimators, RLOO surrogate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import RandomStream, TimeGrid, Vocabulary, masked_set_array
from .model import Features, NeuralDenoiser, SchedulerHeads
from .schedulers import LearnedHead, evaluate

T_MIN = 1e-4
CONFIDENCE_FLOOR = 1e-12


class InfiniteLossError(FloatingPointError):
    """A masked token was assigned zero probability, so the bound is infinite."""


def velocity_term(A, A_hat):
    """``A log(A/A_hat) - (A - A_hat)`` written as ``A (r - 1 - log r)`` with ``r = A_hat/A``."""
    A = np.asarray(A, dtype=np.float64)
    delta = np.asarray(A_hat, dtype=np.float64) / A - 1.0
    return A * (delta - np.log1p(delta))


def loss_terms(A, A_hat, confidence):
    A = np.asarray(A, dtype=np.float64)
    A_hat = np.asarray(A_hat, dtype=np.float64)
    confidence = np.asarray(confidence, dtype=np.float64)
    if np.any(A <= 0) or np.any(A_hat <= 0):
        raise ValueError("velocities must be positive")
    if np.any(confidence <= 0):
        raise InfiniteLossError("zero confidence on a masked target token")
    return -A * np.log(confidence), velocity_term(A, A_hat)


# ---------------------------------------------------------------------------
# breakdowns

TOKEN_DTYPE = np.dtype([
    ("item", np.int64), ("position", np.int64), ("A", np.float64), ("A_hat", np.float64),
    ("confidence", np.float64), ("main", np.float64), ("velocity", np.float64),
])


@dataclass
class LossBreakdown:
    """Per-item integrand values; ``per_token`` lists masked positions only."""

    l_main: np.ndarray
    l_velocity: np.ndarray
    t: np.ndarray
    per_token: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.l_main + self.l_velocity


def breakdown(x, z, t, A, A_hat, confidence, mask_id: int, floor: Optional[float] = None) -> LossBreakdown:
    """Integrand for a batch of ``(x, z_t, t)``; arrays are ``(n, L)`` except ``t`` which is ``(n,)``."""
    z = np.atleast_2d(z)
    masked = z == mask_id
    A = np.broadcast_to(A, z.shape)
    A_hat = np.broadcast_to(A_hat, z.shape)
    conf = np.where(masked, confidence, 1.0)
    if floor is not None:
        conf = np.maximum(conf, floor)
    main, vel = loss_terms(np.where(masked, A, 1.0), np.where(masked, A_hat, 1.0), conf)
    main = np.where(masked, main, 0.0)
    vel = np.where(masked, vel, 0.0)
    items, positions = np.nonzero(masked)
    per_token = np.empty(items.size, dtype=TOKEN_DTYPE)
    per_token["item"], per_token["position"] = items, positions
    per_token["A"], per_token["A_hat"] = A[masked], A_hat[masked]
    per_token["confidence"], per_token["main"], per_token["velocity"] = conf[masked], main[masked], vel[masked]
    return LossBreakdown(main.sum(-1), vel.sum(-1), np.asarray(t, dtype=np.float64).reshape(-1), per_token)


# ---------------------------------------------------------------------------
# Monte Carlo estimator


@dataclass
class NelboEstimate:
    estimate: float
    stderr: float
    samples: LossBreakdown


def nelbo_mc(x, denoiser, fwd, rev, n: int, rng: RandomStream, vocab: Vocabulary,
             t_min: float = T_MIN) -> NelboEstimate:
    """Unbiased estimate of the continuous-time bound truncated to ``t >= t_min``.

    Times are drawn uniformly on ``(t_min, 1]`` and each integrand is scaled by
    ``1 - t_min`` so the mean estimates the truncated integral.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    x = vocab.check_sequence(x)
    L = x.shape[0]
    t = t_min + (1.0 - t_min) * (1.0 - rng.child("time").uniform(n))
    fe = evaluate(fwd, t, context=x, length=L)
    u = rng.child("mask").uniform((n, L))
    z = np.where(u < fe.one_minus_alpha, vocab.mask_id, x[None, :])
    A_hat = _reverse_velocity(rev, t, z, L)
    rows = np.asarray(denoiser(z), dtype=np.float64)
    conf = np.take_along_axis(rows, np.broadcast_to(x, z.shape)[..., None], axis=-1)[..., 0]
    bd = breakdown(np.broadcast_to(x, z.shape), z, t, fe.velocity, A_hat, conf, vocab.mask_id)
    values = (1.0 - t_min) * bd.total
    se = float(values.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")
    return NelboEstimate(float(values.mean()), se, bd)


def _reverse_velocity(rev, t, z, length):
    if isinstance(rev, LearnedHead):
        codes, inverse = np.unique(z, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        e = evaluate(rev, 1.0, context=codes).velocity
        return e[inverse] / t[:, None]
    return evaluate(rev, t, context=None, length=length).velocity


# ---------------------------------------------------------------------------
# exact discrete-time bound


def _xlogy_ratio(a, b):
    """``a log(a/b)`` with ``0 log 0 = 0``; infinite when ``a > 0 = b``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    return out


def two_atom_kl(q_unmask, p_unmask, q_stay, p_stay):
    """KL between the posterior (mass on x and on mask) and the model kernel, per masked position."""
    return _xlogy_ratio(q_unmask, p_unmask) + _xlogy_ratio(q_stay, p_stay)


@dataclass
class DiscreteBound:
    reconstruction: float
    diffusion: float
    prior: float = 0.0

    @property
    def total(self) -> float:
        return self.reconstruction + self.diffusion + self.prior


def forward_state_probs(x, fwd, t, vocab: Vocabulary):
    """Probabilities of every corruption of ``x`` at each time in ``t``; shape ``(len(t), 2**L)``."""
    x = np.asarray(x, dtype=np.int64)
    _, masks = masked_set_array(x, vocab.mask_id)
    om = evaluate(fwd, np.asarray(t), context=x, length=x.shape[0]).one_minus_alpha
    per = np.where(masks[None], om[:, None, :], 1.0 - om[:, None, :])
    return per.prod(-1)


def nelbo_discrete_exact(x, denoiser, fwd, rev, grid: TimeGrid, vocab: Vocabulary,
                         return_parts: bool = False):
    """Exact discrete-time bound on ``-log p(x)`` by enumerating every corruption of ``x``."""
    x = vocab.check_sequence(x)
    L = x.shape[0]
    z, masks = masked_set_array(x, vocab.mask_id)
    T = grid.steps
    t_vals = grid.t_values
    s_vals = grid.s_of(np.arange(1, T + 1))
    q_state = forward_state_probs(x, fwd, t_vals, vocab)
    rows = np.asarray(denoiser(z), dtype=np.float64)
    conf = np.take_along_axis(rows, np.broadcast_to(x, z.shape)[..., None], axis=-1)[..., 0]

    with np.errstate(divide="ignore"):
        log_conf = np.log(conf)
    recon = float(np.sum(q_state[0] * np.where(masks, -log_conf, 0.0).sum(-1)))

    om_f = evaluate(fwd, t_vals, context=x, length=L).one_minus_alpha  # (T+1, L)
    om_r_t = _reverse_one_minus(rev, t_vals, z, L)  # (T+1, 2**L, L)
    om_r_s = _reverse_one_minus(rev, s_vals, z, L)  # (T, 2**L, L)
    q_stay = (om_f[:-1] / om_f[1:])[:, None, :]
    q_unmask = 1.0 - q_stay
    p_stay = om_r_s / om_r_t[1:]
    p_unmask = (1.0 - p_stay) * conf[None]
    kl = two_atom_kl(q_unmask, p_unmask, q_stay, p_stay)
    diffusion = float(np.sum(q_state[1:] * np.where(masks[None], kl, 0.0).sum(-1)))
    bound = DiscreteBound(recon, diffusion)
    return bound if return_parts else bound.total


def _reverse_one_minus(rev, times, z, length):
    times = np.asarray(times, dtype=np.float64)
    if isinstance(rev, LearnedHead):
        e = evaluate(rev, 1.0, context=z).velocity  # exponents, since A(1) = e
        return times[:, None, None] ** e[None]
    om = evaluate(rev, times, context=None, length=length).one_minus_alpha
    return np.broadcast_to(om[:, None, :], (times.size, z.shape[0], length))


# ---------------------------------------------------------------------------
# training objective


def rloo_loss(loss_z1, loss_z2, logq_z1, logq_z2):
    """Two-sample leave-one-out score-function surrogate; losses enter as constants."""
    if isinstance(loss_z1, torch.Tensor):
        loss_z1, loss_z2 = loss_z1.detach(), loss_z2.detach()
    return 0.5 * (logq_z1 - logq_z2) * (loss_z1 - loss_z2)


@dataclass
class ObjectiveNoise:
    """All randomness of one objective evaluation, frozen so it can be replayed."""

    t: torch.Tensor
    u1: torch.Tensor
    u2: torch.Tensor

    @classmethod
    def draw(cls, batch: int, length: int, rng: RandomStream, t_min: float = T_MIN, dtype=torch.float64):
        t = t_min + (1.0 - t_min) * (1.0 - rng.child("time").uniform(batch))
        u1 = rng.child("corruption", 1).uniform((batch, length))
        u2 = rng.child("corruption", 2).uniform((batch, length))
        as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
        return cls(as_t(t), as_t(u1), as_t(u2))


@dataclass
class CorruptionTerms:
    z: torch.Tensor
    masked: torch.Tensor
    A: torch.Tensor
    A_hat: torch.Tensor
    log_conf: torch.Tensor
    main: torch.Tensor
    velocity: torch.Tensor
    logq: torch.Tensor
    z_hidden: Optional[torch.Tensor] = None

    @property
    def loss(self) -> torch.Tensor:
        return (self.main + self.velocity).sum(-1)

    def to_breakdown(self, t: torch.Tensor, x: torch.Tensor) -> LossBreakdown:
        m = self.masked.detach().numpy()
        items, positions = np.nonzero(m)
        per_token = np.empty(items.size, dtype=TOKEN_DTYPE)
        per_token["item"], per_token["position"] = items, positions
        for name, src in (("A", self.A), ("A_hat", self.A_hat), ("main", self.main), ("velocity", self.velocity)):
            per_token[name] = src.detach().double().numpy()[m]
        per_token["confidence"] = self.log_conf.detach().double().exp().numpy()[m]
        return LossBreakdown(self.main.detach().double().sum(-1).numpy(),
                             self.velocity.detach().double().sum(-1).numpy(),
                             t.detach().double().numpy(), per_token)


@dataclass
class CombinedObjective:
    total: torch.Tensor
    first: CorruptionTerms
    second: CorruptionTerms
    rloo: torch.Tensor
    t: torch.Tensor

    def breakdowns(self, x) -> tuple[LossBreakdown, LossBreakdown]:
        return self.first.to_breakdown(self.t, x), self.second.to_breakdown(self.t, x)


def velocity_term_torch(A, A_hat):
    delta = A_hat / A - 1.0
    return A * (delta - torch.log1p(delta))


def _corruption_terms(x, u, t, e_phi, denoiser, heads, floor, head_hidden=None):
    V = denoiser.shape.vocab_size
    tt = t.unsqueeze(-1)
    log_t = torch.log(tt)
    log_om = e_phi * log_t  # log(1 - alpha_phi)
    om = torch.exp(log_om)
    masked = u < om.detach()
    z = torch.where(masked, torch.full_like(x, V), x)
    logp, hidden = denoiser(z)
    feats = Features(hidden.detach() if head_hidden is None else head_hidden)
    e_psi = heads.exponents("psi", feats)
    A = e_phi / tt
    A_hat = e_psi / tt
    log_conf = logp.gather(-1, x.unsqueeze(-1)).squeeze(-1)
    if floor is not None:
        log_conf = torch.clamp(log_conf, min=float(np.log(floor)))
    zero = torch.zeros_like(A)
    main = torch.where(masked, -A * torch.where(masked, log_conf, zero), zero)
    vel = torch.where(masked, velocity_term_torch(A, A_hat), zero)
    logq = torch.where(masked, log_om, torch.log(-torch.expm1(log_om))).sum(-1)
    return CorruptionTerms(z, masked, A, A_hat, log_conf, main, vel, logq, feats.hidden)


def combined_objective(x: torch.Tensor, denoiser: NeuralDenoiser, heads: SchedulerHeads,
                       c1: Optional[float] = None, c2: Optional[float] = None,
                       t=None, rng: Optional[RandomStream] = None, noise: Optional[ObjectiveNoise] = None,
                       frozen_losses: Optional[tuple] = None, frozen_features: Optional[dict] = None,
                       floor: Optional[float] = CONFIDENCE_FLOOR, per_token: bool = False) -> CombinedObjective:
    """Two corruptions per text, their averaged bound, plus the RLOO term for the forward head.

    ``frozen_losses`` replaces the stop-gradient loss values inside the RLOO term and
    ``frozen_features`` does the same for the features the heads read.  An empty dict
    is filled on the first call and replayed afterwards.  Together they let finite
    differences see the same surrogate that autograd does.
    """
    if c1 is not None or c2 is not None:
        if (c1, c2) != (heads.c1, heads.c2):
            raise ValueError(f"heads carry c1={heads.c1}, c2={heads.c2}; got c1={c1}, c2={c2}")
    if x.dim() == 1:
        x = x.unsqueeze(0)
    B, L = x.shape
    if noise is None:
        if rng is None:
            raise ValueError("provide either rng or noise")
        noise = ObjectiveNoise.draw(B, L, rng, dtype=next(denoiser.parameters()).dtype)
    t_vec = noise.t if t is None else torch.full((B,), float(t), dtype=noise.t.dtype)

    cache = frozen_features if frozen_features is not None else {}
    if "x" not in cache:
        cache["x"] = denoiser.backbone(x).detach()
    e_phi = heads.exponents("phi", Features(cache["x"]))
    terms = []
    for key, u in (("z1", noise.u1), ("z2", noise.u2)):
        out = _corruption_terms(x, u, t_vec, e_phi, denoiser, heads, floor, cache.get(key))
        cache.setdefault(key, out.z_hidden)
        terms.append(out)
    first, second = terms
    l1, l2 = (first.loss, second.loss) if frozen_losses is None else frozen_losses
    rloo = rloo_loss(l1, l2, first.logq, second.logq)
    per_text = 0.5 * (first.loss + second.loss) + rloo
    total = per_text.mean()
    if per_token:
        total = total / L
    return CombinedObjective(total, first, second, rloo, t_vec)
