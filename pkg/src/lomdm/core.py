"""Token-space primitives shared by every other module.

Sequences are plain integer numpy arrays.  Real tokens are ``0..V-1`` and the
mask symbol is the reserved id ``V``.
"""

from __future__ import annotations

import itertools
import zlib
from dataclasses import dataclass, field

import numpy as np

MAX_MASKED_SET_LENGTH = 16
MAX_TRAJECTORIES = 10**6
SIMPLEX_TOL = 1e-9


class EnumerationLimitError(ValueError):
    """Raised when an exhaustive enumeration would exceed its size guard."""


class SimplexError(ValueError):
    """Raised when a probability vector is not a valid simplex point."""


class MembershipError(ValueError):
    """Raised when a masked sequence is not a corruption of the given sequence."""


@dataclass(frozen=True)
class Vocabulary:
    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError(f"vocabulary size must be positive, got {self.size}")

    @property
    def mask_id(self) -> int:
        return self.size

    def check_sequence(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.int64)
        if x.ndim != 1:
            raise ValueError("a sequence must be one-dimensional")
        if np.any(x < 0) or np.any(x >= self.size):
            raise ValueError(f"sequence holds ids outside 0..{self.size - 1}")
        return x

    def check_masked(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.int64)
        if np.any(z < 0) or np.any(z > self.mask_id):
            raise ValueError(f"masked sequence holds ids outside 0..{self.mask_id}")
        return z


def in_masked_set(z, x, mask_id: int) -> bool:
    """Membership predicate for the set of corruptions of ``x``."""
    z = np.asarray(z)
    x = np.asarray(x)
    if z.shape != x.shape:
        return False
    return bool(np.all((z == x) | (z == mask_id)))


def require_membership(z, x, mask_id: int) -> None:
    if not in_masked_set(z, x, mask_id):
        raise MembershipError(f"{np.asarray(z).tolist()} is not a corruption of {np.asarray(x).tolist()}")


def mask_patterns(length: int) -> np.ndarray:
    """All ``2**length`` boolean masks, row ``k`` masks position ``i`` iff bit ``i`` of ``k`` is set."""
    if length > MAX_MASKED_SET_LENGTH:
        raise EnumerationLimitError(
            f"masked-set enumeration refused for L={length} (limit {MAX_MASKED_SET_LENGTH})"
        )
    codes = np.arange(2**length, dtype=np.int64)
    return ((codes[:, None] >> np.arange(length)) & 1).astype(bool)


def masked_set_array(x, mask_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Every corruption of ``x`` as a ``(2**L, L)`` array, paired with its mask pattern."""
    x = np.asarray(x, dtype=np.int64)
    masks = mask_patterns(x.shape[0])
    z = np.where(masks, mask_id, x[None, :])
    return z, masks


def enumerate_masked_set(x, mask_id: int) -> list[np.ndarray]:
    z, _ = masked_set_array(x, mask_id)
    return [row.copy() for row in z]


@dataclass(frozen=True)
class TimeGrid:
    """Discretisation of [0, 1] into ``steps`` reverse steps plus one reconstruction step."""

    steps: int

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"a time grid needs at least one step, got T={self.steps}")

    def t_of(self, tau):
        return (np.asarray(tau, dtype=np.float64) + 1.0) / (self.steps + 1)

    def s_of(self, tau):
        return np.asarray(tau, dtype=np.float64) / (self.steps + 1)

    @property
    def t_values(self) -> np.ndarray:
        return self.t_of(np.arange(self.steps + 1))


def time_grid(T: int) -> TimeGrid:
    return TimeGrid(int(T))


@dataclass(frozen=True)
class Trajectory:
    """States ``z_{t(0)}, ..., z_{t(T)}`` of one discrete-time path."""

    states: np.ndarray
    endpoint: np.ndarray

    def is_absorbing(self, mask_id: int) -> bool:
        states = np.asarray(self.states)
        masked = states == mask_id
        if not masked[-1].all():
            return False
        if np.any(masked[:-1] & ~masked[1:]):
            return False
        return bool(np.all(masked | (states == np.asarray(self.endpoint)[None, :])))


def enumerate_absorbing_trajectories(x, grid: TimeGrid, mask_id: int) -> list[Trajectory]:
    """All absorbing paths ending at ``x``, one per choice of first-masked grid index per position."""
    x = np.asarray(x, dtype=np.int64)
    L = x.shape[0]
    n = (grid.steps + 1) ** L
    if n > MAX_TRAJECTORIES:
        raise EnumerationLimitError(f"(T+1)^L = {n} trajectories exceeds {MAX_TRAJECTORIES}")
    taus = np.arange(grid.steps + 1)
    out = []
    for kappa in itertools.product(range(grid.steps + 1), repeat=L):
        masked = taus[:, None] >= np.asarray(kappa, dtype=np.int64)[None, :]
        states = np.where(masked, mask_id, x[None, :])
        out.append(Trajectory(states=states, endpoint=x.copy()))
    return out


def _label_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


@dataclass
class RandomStream:
    """Counter-based random stream keyed by a seed and a path of (tag, index) labels.

    Two streams with the same seed and label path produce the same draws on every
    platform, since Philox output depends only on its key and counter.
    """

    seed: int
    path: tuple = ()
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, tag: str, index: int = 0) -> "RandomStream":
        return RandomStream(self.seed, self.path + (_label_key(tag), int(index)))

    def uniform(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def torch_seed(self) -> int:
        return int(self.generator.integers(0, 2**62))


def stream(seed: int, tag: str = "root", index: int = 0) -> RandomStream:
    return RandomStream(int(seed)).child(tag, index)


def check_simplex(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise SimplexError("probabilities must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise SimplexError(f"probabilities must be finite and nonnegative: {p.tolist()}")
    if abs(p.sum() - 1.0) > tol:
        raise SimplexError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def sample_categorical(probabilities, rng: RandomStream) -> int:
    p = check_simplex(probabilities)
    u = rng.uniform()
    k = int(np.searchsorted(np.cumsum(p), u, side="right"))
    # roundoff can push u past the last cumulative value
    k = min(k, p.size - 1)
    while p[k] == 0.0:
        k -= 1
    return k


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of each row of ``probs`` with the matching uniform in ``u``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (u[..., None] >= cdf).sum(axis=-1)
    last = probs.shape[-1] - 1
    idx = np.minimum(idx, last)
    # never land on a zero-probability coordinate after clipping
    bad = np.take_along_axis(probs, idx[..., None], axis=-1)[..., 0] == 0.0
    if np.any(bad):
        nz_last = last - np.argmax(probs[..., ::-1] > 0, axis=-1)
        idx = np.where(bad, nz_last, idx)
    return idx
