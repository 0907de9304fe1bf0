"""Denoisers and velocity heads.

Two denoiser families share one calling convention: ``denoiser(z)`` takes an
integer array of shape ``(..., L)`` and returns SUBS-constrained probabilities of
shape ``(..., L, V+1)`` as a float64 numpy array.

* :class:`TabularDenoiser` stores an explicit probability row per (state, position)
  and backs every brute-force oracle.
* :class:`NeuralDenoiser` is a small pre-LN transformer used for training.  Its
  backbone hidden states double as the (detached) features read by the
  :class:`SchedulerHeads`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .core import RandomStream, Vocabulary, check_simplex

# ---------------------------------------------------------------------------
# tabular models


def encode_states(z, vocab: Vocabulary) -> np.ndarray:
    """Base-(V+1) integer code of each masked sequence along the last axis."""
    z = np.asarray(z, dtype=np.int64)
    L = z.shape[-1]
    weights = (vocab.size + 1) ** np.arange(L, dtype=np.int64)
    return (z * weights).sum(axis=-1)


class TabularDenoiser:
    """Explicit probability table indexed by the code of the masked input.

    ``table`` has shape ``((V+1)**L, L, V)``.  Rows for unmasked positions are
    ignored because carry-over overrides them.
    """

    def __init__(self, vocab: Vocabulary, length: int, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        expected = ((vocab.size + 1) ** length, length, vocab.size)
        if table.shape != expected:
            raise ValueError(f"table shape {table.shape} != {expected}")
        if np.any(table < 0) or np.any(np.abs(table.sum(-1) - 1.0) > 1e-12):
            raise ValueError("tabular rows must be simplices over real tokens")
        self.vocab = vocab
        self.length = length
        self.table = table

    @classmethod
    def from_logits(cls, vocab, length, logits):
        logits = np.asarray(logits, dtype=np.float64)
        p = np.exp(logits - logits.max(-1, keepdims=True))
        return cls(vocab, length, p / p.sum(-1, keepdims=True))

    @classmethod
    def uniform(cls, vocab, length):
        n = (vocab.size + 1) ** length
        return cls(vocab, length, np.full((n, length, vocab.size), 1.0 / vocab.size))

    @classmethod
    def random(cls, vocab, length, rng: RandomStream, scale: float = 1.5):
        n = (vocab.size + 1) ** length
        return cls.from_logits(vocab, length, scale * rng.generator.standard_normal((n, length, vocab.size)))

    @classmethod
    def memorizing(cls, vocab, x):
        """Predicts ``x`` with certainty from every input."""
        x = vocab.check_sequence(x)
        n = (vocab.size + 1) ** x.shape[0]
        table = np.zeros((n, x.shape[0], vocab.size))
        table[:, np.arange(x.shape[0]), x] = 1.0
        return cls(vocab, x.shape[0], table)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.int64)
        rows = self.table[encode_states(z, self.vocab)]
        out = np.zeros(z.shape + (self.vocab.size + 1,))
        out[..., : self.vocab.size] = rows
        unmasked = z != self.vocab.mask_id
        carry = np.zeros_like(out)
        np.put_along_axis(carry, np.where(unmasked, z, 0)[..., None], 1.0, axis=-1)
        return np.where(unmasked[..., None], carry, out)

    def features(self, z) -> np.ndarray:
        """Canonical one-hot encoding of the input, flattened per sequence."""
        z = np.asarray(z, dtype=np.int64)
        return np.eye(self.vocab.size + 1)[z].reshape(z.shape[:-1] + (-1,))


class TabularHead:
    """Raw per-position scores from a fixed linear map of the one-hot input."""

    def __init__(self, vocab: Vocabulary, length: int, weight: np.ndarray, bias: Optional[np.ndarray] = None):
        self.vocab = vocab
        self.length = length
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.zeros(length) if bias is None else np.asarray(bias, dtype=np.float64)
        if self.weight.shape != (length, length * (vocab.size + 1)):
            raise ValueError(f"weight shape {self.weight.shape} mismatches L={length}, V={vocab.size}")

    @classmethod
    def random(cls, vocab, length, rng: RandomStream, scale: float = 2.0):
        g = rng.generator
        return cls(vocab, length, scale * g.standard_normal((length, length * (vocab.size + 1))),
                   scale * g.standard_normal(length))

    def __call__(self, context) -> np.ndarray:
        z = np.asarray(context, dtype=np.int64)
        onehot = np.eye(self.vocab.size + 1)[z].reshape(z.shape[:-1] + (-1,))
        return onehot @ self.weight.T + self.bias


# ---------------------------------------------------------------------------
# neural models


def norm_sig(v: torch.Tensor) -> torch.Tensor:
    """Per-position sigmoid minus the sequence mean of sigmoids."""
    s = torch.sigmoid(v)
    return s - s.mean(dim=-1, keepdim=True)


def subs_log_probs(logits: torch.Tensor, z: torch.Tensor, vocab_size: int) -> torch.Tensor:
    """Log-probabilities over V+1 symbols; mask excluded, unmasked inputs copied."""
    real = torch.log_softmax(logits[..., :vocab_size], dim=-1)
    mask_col = torch.full_like(real[..., :1], -math.inf)
    logp = torch.cat([real, mask_col], dim=-1)
    unmasked = z != vocab_size
    carry = torch.full_like(logp, -math.inf)
    carry.scatter_(-1, torch.where(unmasked, z, 0).unsqueeze(-1), 0.0)
    return torch.where(unmasked.unsqueeze(-1), carry, logp)


@dataclass(frozen=True)
class NetworkShape:
    vocab_size: int
    length: int
    width: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.0

    def as_dict(self) -> dict:
        return dict(vocab_size=self.vocab_size, length=self.length, width=self.width,
                    layers=self.layers, heads=self.heads, dropout=self.dropout)


def _block(shape: NetworkShape) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(
        shape.width, shape.heads, dim_feedforward=4 * shape.width, dropout=shape.dropout,
        activation="gelu", batch_first=True, norm_first=True,
    )


class NeuralDenoiser(nn.Module):
    """Token + position embeddings, a stack of pre-LN blocks, projection to V+1 logits."""

    def __init__(self, shape: NetworkShape):
        super().__init__()
        self.shape = shape
        V, d = shape.vocab_size, shape.width
        self.vocab = Vocabulary(V)
        self.token_embedding = nn.Embedding(V + 1, d)
        self.position_embedding = nn.Parameter(torch.zeros(shape.length, d))
        nn.init.normal_(self.position_embedding, std=0.02)
        self.blocks = nn.ModuleList([_block(shape) for _ in range(shape.layers)])
        self.norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, V + 1)

    def backbone(self, z: torch.Tensor) -> torch.Tensor:
        h = self.token_embedding(z) + self.position_embedding
        for block in self.blocks:
            h = block(h)
        return self.norm(h)

    def forward(self, z: torch.Tensor):
        """Return SUBS log-probabilities and the backbone hidden states from one pass."""
        hidden = self.backbone(z)
        return subs_log_probs(self.output(hidden), z, self.shape.vocab_size), hidden

    @torch.no_grad()
    def probabilities(self, z) -> np.ndarray:
        was_training = self.training
        self.eval()
        try:
            zt = torch.as_tensor(np.asarray(z, dtype=np.int64))
            logp, _ = self(zt.reshape(-1, zt.shape[-1]))
            p = logp.double().exp().numpy()
        finally:
            self.train(was_training)
        # renormalise in float64 so rows are simplices to double precision
        p /= p.sum(-1, keepdims=True)
        return p.reshape(tuple(zt.shape) + (self.shape.vocab_size + 1,))

    def as_numpy(self) -> Callable:
        return self.probabilities


@dataclass(frozen=True)
class Features:
    hidden: torch.Tensor
    detached: bool = True


def extract_features(denoiser: NeuralDenoiser, z: torch.Tensor, hidden: Optional[torch.Tensor] = None) -> Features:
    """Detached backbone states; pass ``hidden`` to reuse a pass the denoiser already made."""
    if hidden is None:
        hidden = denoiser.backbone(z)
    return Features(hidden.detach(), detached=True)


class VelocityHead(nn.Module):
    """One attention block and an MLP mapping features to one raw score per position."""

    def __init__(self, shape: NetworkShape, zero_init: bool = True):
        super().__init__()
        d = shape.width
        self.block = _block(shape)
        self.mlp = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))
        if zero_init:
            # constant scores give exponent c1 everywhere at initialisation
            nn.init.zeros_(self.mlp[-1].weight)
            nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, features: Features) -> torch.Tensor:
        if not features.detached:
            raise ValueError("velocity heads must read detached features")
        return self.mlp(self.block(features.hidden)).squeeze(-1)


class SchedulerHeads(nn.Module):
    def __init__(self, shape: NetworkShape, c1: float = 0.7, c2: float = 0.65, zero_init: bool = True):
        super().__init__()
        if c2 < 0 or not c1 > c2:
            raise ValueError(f"need c1 > c2 >= 0, got c1={c1}, c2={c2}")
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.phi = VelocityHead(shape, zero_init)
        self.psi = VelocityHead(shape, zero_init)

    def head(self, role: str) -> VelocityHead:
        if role not in ("phi", "psi"):
            raise ValueError(f"unknown head role {role!r}")
        return self.phi if role == "phi" else self.psi

    def exponents(self, role: str, features: Features) -> torch.Tensor:
        if self.c2 == 0.0:
            return torch.full(features.hidden.shape[:-1], self.c1, dtype=features.hidden.dtype)
        return self.c1 + self.c2 * norm_sig(self.head(role)(features))


def head_velocity(heads: SchedulerHeads, role: str, features: Features, t):
    """Per-position ``(alpha, A)`` for a learned scheduler at time ``t``."""
    t = torch.as_tensor(t, dtype=features.hidden.dtype)
    if torch.any(t <= 0) or torch.any(t > 1):
        raise ValueError(f"t must lie in (0, 1], got {t}")
    tt = t.unsqueeze(-1) if t.dim() else t
    e = heads.exponents(role, features)
    return 1.0 - tt**e, e / tt


def learned_head_callable(denoiser: NeuralDenoiser, heads: SchedulerHeads, role: str) -> Callable:
    """Wrap a neural head as a numpy ``context -> raw scores`` map for scheduler specs."""

    @torch.no_grad()
    def call(context):
        was = denoiser.training, heads.training
        denoiser.eval()
        heads.eval()
        try:
            z = torch.as_tensor(np.asarray(context, dtype=np.int64))
            feats = extract_features(denoiser, z.reshape(-1, z.shape[-1]))
            raw = heads.head(role)(feats).double().numpy()
        finally:
            denoiser.train(was[0])
            heads.train(was[1])
        return raw.reshape(tuple(z.shape))

    return call


# ---------------------------------------------------------------------------
# gradients


class NonFiniteGradientError(FloatingPointError):
    pass


def gradient(objective: Callable[[], torch.Tensor], params: dict) -> dict:
    """Reverse-mode gradients of a scalar objective for named parameter groups.

    Non-finite values anywhere in the graph raise with the offending operation named.
    """
    names = [(g, i) for g, ps in params.items() for i in range(len(ps))]
    flat = [params[g][i] for g, i in names]
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Anomaly Detection has been enabled")
            with torch.autograd.detect_anomaly(check_nan=True):
                value = objective()
                if not torch.isfinite(value):
                    raise NonFiniteGradientError(f"objective is {value.item()}")
                grads = torch.autograd.grad(value, flat, allow_unused=True)
    except RuntimeError as exc:
        raise NonFiniteGradientError(str(exc).splitlines()[0]) from exc
    out = {g: [None] * len(ps) for g, ps in params.items()}
    for (g, i), p, gr in zip(names, flat, grads):
        out[g][i] = torch.zeros_like(p) if gr is None else gr
    return out


@dataclass
class FiniteDiffReport:
    group: str
    coordinates: int
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def finite_diff_check(
    objective: Callable[[], torch.Tensor], params: dict, step: float = 1e-5, tolerance: float = 1e-4,
    coords_per_group: int = 200, rng: Optional[RandomStream] = None, floor: float = 1e-6,
) -> list[FiniteDiffReport]:
    """Compare analytic and central-difference gradients on sampled coordinates.

    The relative error is ``|a - f| / max(|a|, |f|, floor)`` so that coordinates
    with vanishing gradient are judged on an absolute scale.
    """
    rng = rng or RandomStream(0).child("finite-diff")
    analytic = gradient(objective, params)
    reports = []
    for group, plist in params.items():
        sizes = [p.numel() for p in plist]
        total = sum(sizes)
        k = min(coords_per_group, total)
        picks = np.sort(rng.generator.choice(total, size=k, replace=False))
        offsets = np.cumsum([0] + sizes)
        worst = 0.0
        for flat_idx in picks:
            j = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            local = int(flat_idx - offsets[j])
            p = plist[j]
            view = p.data.view(-1)
            orig = view[local].item()
            with torch.no_grad():
                view[local] = orig + step
                up = objective().item()
                view[local] = orig - step
                down = objective().item()
                view[local] = orig
            fd = (up - down) / (2 * step)
            a = analytic[group][j].reshape(-1)[local].item()
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            worst = max(worst, rel)
        reports.append(FiniteDiffReport(group, k, worst, tolerance))
    return reports


@dataclass
class StopGradientProbe:
    analytic: float
    finite_difference: float

    @property
    def expected_detached(self) -> bool:
        return self.analytic == 0.0 and self.finite_difference != 0.0


def stop_gradient_probe(objective: Callable[[], torch.Tensor], param: torch.Tensor, index: int = 0,
                        step: float = 1e-5) -> StopGradientProbe:
    """Analytic vs numeric derivative for a weight that reaches the objective only through features."""
    (g,) = torch.autograd.grad(objective(), [param], allow_unused=True)
    a = 0.0 if g is None else g.reshape(-1)[index].item()
    view = param.data.view(-1)
    orig = view[index].item()
    with torch.no_grad():
        view[index] = orig + step
        up = objective().item()
        view[index] = orig - step
        down = objective().item()
        view[index] = orig
    return StopGradientProbe(a, (up - down) / (2 * step))


def denoise(params, z) -> np.ndarray:
    """Probability rows of either denoiser family."""
    if isinstance(params, NeuralDenoiser):
        return params.as_numpy()(z)
    return params(z)


def check_rows(rows) -> None:
    for row in np.asarray(rows).reshape(-1, np.asarray(rows).shape[-1]):
        check_simplex(row, tol=1e-12)
