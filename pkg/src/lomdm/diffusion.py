"""Forward corruption, posterior and reverse kernels, and ancestral sampling.

A kernel is an ``(L, V+1)`` array whose row ``i`` is the law of the next value
at position ``i``; the last column is the mask symbol.
"""

from __future__ import annotations

import numpy as np

from .core import (
    MembershipError,
    RandomStream,
    TimeGrid,
    Vocabulary,
    in_masked_set,
    sample_rows,
)
from .schedulers import LearnedHead, evaluate, evaluate_checked

KERNEL_TOL = 1e-12


def _one_minus_alpha(spec, t, context, length):
    return evaluate(spec, t, context=context, length=length).one_minus_alpha


def forward_sample(x, spec, t: float, rng: RandomStream, vocab: Vocabulary) -> np.ndarray:
    x = vocab.check_sequence(x)
    ev = evaluate_checked(spec, t, context=x, length=x.shape[0])
    u = rng.uniform(x.shape[0])
    return np.where(u < ev.one_minus_alpha, vocab.mask_id, x)


def forward_logprob(z, x, spec, t: float, vocab: Vocabulary) -> float:
    x = vocab.check_sequence(x)
    z = np.asarray(z, dtype=np.int64)
    if not in_masked_set(z, x, vocab.mask_id):
        raise MembershipError(f"{z.tolist()} is not a corruption of {x.tolist()}")
    ev = evaluate_checked(spec, t, context=x, length=x.shape[0])
    masked = z == vocab.mask_id
    with np.errstate(divide="ignore"):
        terms = np.where(masked, np.log(ev.one_minus_alpha), np.log(ev.alpha))
    return float(terms.sum())


def _check_times(s, t):
    if not 0.0 <= s < t <= 1.0:
        raise ValueError(f"need 0 <= s < t <= 1, got s={s}, t={t}")


def _unmask_and_stay(spec, s, t, context, length):
    """Per-position (unmask, stay) probabilities for a masked position between t and s."""
    om_t = _one_minus_alpha(spec, t, context, length)
    om_s = _one_minus_alpha(spec, s, context, length) if s > 0 else np.zeros(length)
    stay = om_s / om_t
    return 1.0 - stay, stay


def true_posterior_step(z_t, x, spec, s: float, t: float, vocab: Vocabulary) -> np.ndarray:
    _check_times(s, t)
    x = vocab.check_sequence(x)
    z_t = np.asarray(z_t, dtype=np.int64)
    if not in_masked_set(z_t, x, vocab.mask_id):
        raise MembershipError(f"{z_t.tolist()} is not a corruption of {x.tolist()}")
    L = x.shape[0]
    unmask, stay = _unmask_and_stay(spec, s, t, x, L)
    kernel = np.zeros((L, vocab.size + 1))
    masked = z_t == vocab.mask_id
    rows = np.arange(L)
    kernel[rows[~masked], z_t[~masked]] = 1.0
    kernel[rows[masked], x[masked]] = unmask[masked]
    kernel[rows[masked], vocab.mask_id] = stay[masked]
    return kernel


def apply_subs(raw_scores, z_t, vocab: Vocabulary) -> np.ndarray:
    """Softmax over real tokens for masked positions, one-hot carry-over elsewhere."""
    raw = np.asarray(raw_scores, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("denoiser scores must be finite")
    z_t = np.asarray(z_t, dtype=np.int64)
    real = raw[..., : vocab.size]
    real = np.exp(real - real.max(axis=-1, keepdims=True))
    real /= real.sum(axis=-1, keepdims=True)
    out = np.zeros(raw.shape[:-1] + (vocab.size + 1,))
    out[..., : vocab.size] = real
    unmasked = z_t != vocab.mask_id
    carry = np.zeros_like(out)
    np.put_along_axis(carry, np.where(unmasked, z_t, 0)[..., None], 1.0, axis=-1)
    return np.where(unmasked[..., None], carry, out)


def check_subs(rows, z_t, vocab: Vocabulary, tol: float = 1e-9) -> None:
    rows = np.asarray(rows)
    z_t = np.asarray(z_t, dtype=np.int64)
    if np.any(rows[..., vocab.mask_id] != 0.0):
        raise ValueError("denoiser output puts mass on the mask symbol")
    if np.any(np.abs(rows.sum(axis=-1) - 1.0) > tol) or np.any(rows < 0):
        raise ValueError("denoiser output rows are not simplices")
    unmasked = z_t != vocab.mask_id
    held = np.take_along_axis(rows, np.where(unmasked, z_t, 0)[..., None], axis=-1)[..., 0]
    if np.any(unmasked & (np.abs(held - 1.0) > tol)):
        raise ValueError("denoiser output does not carry over unmasked tokens")


def reverse_step(z_t, denoiser_output, spec, s: float, t: float, vocab: Vocabulary) -> np.ndarray:
    """Reverse kernel; a learned reverse scheduler is conditioned on ``z_t``."""
    _check_times(s, t)
    z_t = vocab.check_masked(z_t)
    rows = np.asarray(denoiser_output, dtype=np.float64)
    check_subs(rows, z_t, vocab)
    L = z_t.shape[0]
    unmask, stay = _unmask_and_stay(spec, s, t, z_t, L)
    masked = z_t == vocab.mask_id
    kernel = np.where(masked[:, None], unmask[:, None] * rows, rows)
    kernel[:, vocab.mask_id] = np.where(masked, stay, 0.0)
    return kernel


def _batched_stay(spec, s, t, z, length):
    """Stay-masked probabilities for a batch of masked sequences, shape (n, L)."""
    if isinstance(spec, LearnedHead):
        # the reverse head is re-instantiated on every current state
        codes, inverse = np.unique(z, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        om_t = evaluate(spec, t, context=codes).one_minus_alpha
        om_s = evaluate(spec, s, context=codes).one_minus_alpha if s > 0 else np.zeros_like(om_t)
        return (om_s / om_t)[inverse]
    om_t = _one_minus_alpha(spec, t, None, length)
    om_s = _one_minus_alpha(spec, s, None, length) if s > 0 else np.zeros(length)
    return np.broadcast_to(om_s / om_t, z.shape)


def ancestral_sample_batch(
    denoiser, reverse_spec, grid: TimeGrid, length: int, n: int, rng: RandomStream,
    vocab: Vocabulary, return_trajectories: bool = False,
):
    """Draw ``n`` sequences by running the reverse chain from all-mask at t=1.

    Each (step, sample, position) consumes one uniform from an array drawn up front
    from ``rng``, so the result depends only on the seed, labels and ``n``.
    """
    T = grid.steps
    u = rng.child("ancestral").uniform((T + 1, n, length))
    z = np.full((n, length), vocab.mask_id, dtype=np.int64)
    traj = np.empty((T + 1, n, length), dtype=np.int64) if return_trajectories else None
    for tau in range(T, 0, -1):
        if traj is not None:
            traj[tau] = z
        t, s = float(grid.t_of(tau)), float(grid.s_of(tau))
        rows = np.asarray(denoiser(z), dtype=np.float64)
        stay = _batched_stay(reverse_spec, s, t, z, length)
        masked = z == vocab.mask_id
        kernel = (1.0 - stay)[..., None] * rows
        kernel[..., vocab.mask_id] = stay
        draws = sample_rows(kernel, u[tau])
        z = np.where(masked, draws, z)
    if traj is not None:
        traj[0] = z
    # reconstruction at t(0): masked positions take a token from the denoiser row
    rows = np.asarray(denoiser(z), dtype=np.float64)
    draws = sample_rows(rows, u[0])
    x = np.where(z == vocab.mask_id, draws, z)
    if traj is not None:
        return x, traj.transpose(1, 0, 2)
    return x


def ancestral_sample(denoiser, reverse_spec, grid: TimeGrid, length: int, rng: RandomStream,
                     vocab: Vocabulary, return_trajectory: bool = False):
    out = ancestral_sample_batch(denoiser, reverse_spec, grid, length, 1, rng, vocab, return_trajectory)
    if return_trajectory:
        return out[0][0], out[1][0]
    return out[0]
