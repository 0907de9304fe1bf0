"""Per-position noise schedulers alpha(t) with analytic derivatives and velocities.

Every scheduler maps (position, optional context, t) to ``alpha`` in [0, 1] with
``alpha(0) = 1`` and ``alpha(1) = 0``.  The velocity is ``A = -alpha'(t) / (1 - alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class Linear:
    pass


@dataclass(frozen=True)
class Polynomial:
    w: float

    def __post_init__(self):
        if not self.w > 0:
            raise ValueError(f"polynomial exponent must be positive, got {self.w}")


@dataclass(frozen=True)
class ArmEpsilon:
    """Smoothstep windows, one per position, left-to-right unless ``order`` is given.

    ``order[k]`` is the position revealed k-th in generation, so it receives the
    window of rank ``k + 1``.
    """

    length: int
    eps: float
    order: Optional[tuple] = None

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be positive")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        if self.order is not None:
            order = tuple(int(i) for i in self.order)
            if sorted(order) != list(range(self.length)):
                raise ValueError(f"order must be a permutation of 0..{self.length - 1}")
            object.__setattr__(self, "order", order)

    def ranks(self) -> np.ndarray:
        """1-based window rank for each position."""
        if self.order is None:
            return np.arange(1, self.length + 1)
        r = np.empty(self.length, dtype=np.int64)
        r[list(self.order)] = np.arange(1, self.length + 1)
        return r


@dataclass(frozen=True)
class Bd3lmEpsilon:
    length: int
    blocks: int
    eps: float

    def __post_init__(self):
        if self.blocks < 1 or self.length % self.blocks:
            raise ValueError(f"length {self.length} is not a multiple of block count {self.blocks}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")

    @property
    def block_length(self) -> int:
        return self.length // self.blocks

    def block_of(self) -> np.ndarray:
        """1-based block index of each position."""
        return np.arange(self.length) // self.block_length + 1


@dataclass(frozen=True)
class GenMd4Fixed:
    """Polynomial scheduler whose exponent depends on the clean token at each position."""

    exponents: tuple

    def __post_init__(self):
        e = tuple(float(v) for v in self.exponents)
        if not e or min(e) <= 0:
            raise ValueError("vocabulary exponents must all be positive")
        object.__setattr__(self, "exponents", e)


PHI = "phi"
PSI = "psi"


@dataclass(frozen=True)
class LearnedHead:
    """Exponent ``c1 + c2 * norm_sig(head(context))`` per position.

    ``head`` maps a length-L context (clean sequence for the forward role, masked
    sequence for the reverse role) to L raw scores.
    """

    head: Callable = field(compare=False)
    role: str = PHI
    c1: float = 0.7
    c2: float = 0.65

    def __post_init__(self):
        if self.role not in (PHI, PSI):
            raise ValueError(f"role must be '{PHI}' or '{PSI}', got {self.role!r}")
        if not (self.c1 > self.c2 > 0):
            raise ValueError(
                f"need c1 > c2 > 0 so every exponent stays positive and the NELBO finite; got c1={self.c1}, c2={self.c2}"
            )

    def exponents(self, context) -> np.ndarray:
        raw = np.asarray(self.head(np.asarray(context)), dtype=np.float64)
        return self.c1 + self.c2 * norm_sig(raw)


SchedulerSpec = Linear | Polynomial | ArmEpsilon | Bd3lmEpsilon | GenMd4Fixed | LearnedHead


def needs_context(spec) -> bool:
    return isinstance(spec, (GenMd4Fixed, LearnedHead))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class SchedulerEval:
    alpha: np.ndarray
    one_minus_alpha: np.ndarray
    dalpha_dt: np.ndarray
    velocity: np.ndarray


def smoothstep(u):
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


def smoothstep_derivative(u):
    u = np.asarray(u, dtype=np.float64)
    inside = (u > 0.0) & (u < 1.0)
    return np.where(inside, 6.0 * u * (1.0 - u), 0.0)


def norm_sig(v):
    """Sigmoid minus its mean over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    s = 0.5 * (1.0 + np.tanh(0.5 * v))
    return s - s.mean(axis=-1, keepdims=True)


def velocity_ratio_bound(c1: float, c2: float) -> tuple[float, float]:
    if c2 < 0 or not c1 > c2:
        raise ValueError(f"ratio bound needs c1 > c2 >= 0, got c1={c1}, c2={c2}")
    k = (c1 + c2) / (c1 - c2)
    return 1.0 / k, k


def _exponent_table(spec, context, length) -> np.ndarray:
    """Per-position exponents for the polynomial-type variants, shape (..., L)."""
    if isinstance(spec, Linear):
        return np.ones(length)
    if isinstance(spec, Polynomial):
        return np.full(length, float(spec.w))
    if isinstance(spec, GenMd4Fixed):
        ctx = np.asarray(context, dtype=np.int64)
        table = np.asarray(spec.exponents)
        if np.any(ctx >= table.size):
            raise ValueError("GenMd4Fixed context must be a clean sequence over its vocabulary")
        return table[ctx]
    if isinstance(spec, LearnedHead):
        # heads score a whole batch of contexts along the leading axes
        return spec.exponents(np.asarray(context))
    raise TypeError(f"not a polynomial-type scheduler: {spec!r}")


def evaluate(spec, t, context=None, length: Optional[int] = None) -> SchedulerEval:
    """Vectorised evaluation over positions; ``t`` broadcasts against the leading axes.

    ``t`` may be 0 here, which yields the boundary ``alpha = 1`` and an infinite
    velocity for polynomial-type variants.  Use :func:`eval` for the checked
    single-position interface.
    """
    if needs_context(spec) and context is None:
        raise ValueError(f"{type(spec).__name__} requires a context sequence")
    if context is not None:
        length = np.asarray(context).shape[-1]
    elif isinstance(spec, (ArmEpsilon, Bd3lmEpsilon)):
        length = spec.length if length is None else length
    if length is None:
        raise ValueError("length is required for context-free schedulers")
    t = np.asarray(t, dtype=np.float64)
    tt = t[..., None]

    if isinstance(spec, (ArmEpsilon, Bd3lmEpsilon)):
        if length != spec.length:
            raise ValueError(f"scheduler built for L={spec.length}, got L={length}")
        if isinstance(spec, ArmEpsilon):
            rank, n_windows = spec.ranks(), spec.length
        else:
            rank, n_windows = spec.block_of(), spec.blocks
        start = 1.0 - rank / n_windows
        width = 1.0 / n_windows
        u = (tt - start) / width
        eps = spec.eps
        one_minus = eps * tt + (1.0 - eps) * smoothstep(u)
        alpha = 1.0 - one_minus
        dalpha = -eps - (1.0 - eps) * smoothstep_derivative(u) / width
        with np.errstate(divide="ignore", invalid="ignore"):
            velocity = -dalpha / one_minus
        return SchedulerEval(alpha, one_minus, dalpha, velocity)

    e = _exponent_table(spec, context, length)
    with np.errstate(divide="ignore", invalid="ignore"):
        one_minus = tt**e
        alpha = 1.0 - one_minus
        velocity = e / tt
        dalpha = -velocity * one_minus
    return SchedulerEval(alpha, one_minus, dalpha, velocity)


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~(t > 0.0)) or np.any(t > 1.0):
        raise ValueError(f"t must lie in (0, 1], got {t}")
    return t


def evaluate_checked(spec, t, context=None, length=None) -> SchedulerEval:
    return evaluate(spec, _check_t(t), context=context, length=length)


def eval(spec, position: int, context, t: float) -> SchedulerEval:  # noqa: A001
    """Scalar evaluation at one position (0-based)."""
    length = None
    if context is None:
        length = spec.length if isinstance(spec, (ArmEpsilon, Bd3lmEpsilon)) else position + 1
    ev = evaluate_checked(spec, float(t), context=context, length=length)
    return SchedulerEval(*(float(np.asarray(a)[..., position]) for a in (
        ev.alpha, ev.one_minus_alpha, ev.dalpha_dt, ev.velocity)))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class FreeformReport:
    start_residual: float
    end_residual: float
    max_increase: float
    tolerance: float = 1e-10

    @property
    def valid(self) -> bool:
        return (
            self.start_residual <= self.tolerance
            and self.end_residual <= self.tolerance
            and self.max_increase <= self.tolerance
        )


def validate_freeform(spec, contexts=None, t_grid=None, length=None) -> FreeformReport:
    """Check boundary values and monotonicity of alpha on a dense grid."""
    if t_grid is None:
        t_grid = np.linspace(0.0, 1.0, 1001)[1:]
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.max(np.diff(np.concatenate([[0.0], t_grid]))) > 1e-3 + 1e-15:
        raise ValueError("t_grid spacing must be at most 1e-3")
    ctx_list = [None] if contexts is None else list(contexts)
    start, end, inc = 0.0, 0.0, -np.inf
    for ctx in ctx_list:
        full = np.concatenate([[0.0], t_grid])
        a = evaluate(spec, full, context=ctx, length=length).alpha
        start = max(start, float(np.max(np.abs(a[0] - 1.0))))
        end = max(end, float(np.max(np.abs(evaluate(spec, 1.0, context=ctx, length=length).alpha))))
        inc = max(inc, float(np.max(np.diff(a, axis=0))))
    return FreeformReport(start, end, inc)


# ---------------------------------------------------------------------------
# configuration records


def to_record(spec) -> dict:
    if isinstance(spec, Linear):
        return {"kind": "linear"}
    if isinstance(spec, Polynomial):
        return {"kind": "polynomial", "w": spec.w}
    if isinstance(spec, ArmEpsilon):
        rec = {"kind": "arm", "length": spec.length, "eps": spec.eps}
        if spec.order is not None:
            rec["order"] = list(spec.order)
        return rec
    if isinstance(spec, Bd3lmEpsilon):
        return {"kind": "bd3lm", "length": spec.length, "blocks": spec.blocks, "eps": spec.eps}
    if isinstance(spec, GenMd4Fixed):
        return {"kind": "genmd4", "exponents": list(spec.exponents)}
    if isinstance(spec, LearnedHead):
        return {"kind": "learned", "role": spec.role, "c1": spec.c1, "c2": spec.c2}
    raise TypeError(f"unknown scheduler {spec!r}")


def from_record(rec: dict, head: Optional[Callable] = None):
    rec = dict(rec)
    kind = rec.pop("kind", None)
    builders = {
        "linear": lambda: Linear(**rec),
        "polynomial": lambda: Polynomial(**rec),
        "arm": lambda: ArmEpsilon(**{**rec, "order": tuple(rec["order"]) if "order" in rec else None}),
        "bd3lm": lambda: Bd3lmEpsilon(**rec),
        "genmd4": lambda: GenMd4Fixed(tuple(rec["exponents"])),
    }
    if kind == "learned":
        if head is None:
            raise ValueError("a learned scheduler record needs a head to bind to")
        return LearnedHead(head=head, **rec)
    if kind not in builders:
        raise ValueError(f"unknown scheduler kind {kind!r}")
    try:
        return builders[kind]()
    except TypeError as exc:
        raise ValueError(f"bad fields for scheduler kind {kind!r}: {exc}") from None
