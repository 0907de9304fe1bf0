"""Joint training of the denoiser and both velocity heads, evaluation, and checkpoints."""

from __future__ import annotations

import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
import torch

from .core import RandomStream, Vocabulary
from .model import Features, NetworkShape, NeuralDenoiser, SchedulerHeads
from .objective import T_MIN, ObjectiveNoise, _corruption_terms, combined_objective

MAGIC = b"OEMDM1"
FORMAT_VERSION = 1
MODES = ("lomdm", "mdlm")
DECAYS = ("constant", "cosine")


@dataclass
class TrainingConfig:
    length: int
    vocab_size: int
    batch_size: int = 64
    steps: int = 2000
    c1: float = 0.7
    c2: float = 0.65
    lr_backbone: float = 3e-4
    lr_heads: float = 1e-5
    warmup: int = 100
    decay: str = "constant"
    weight_decay: float = 0.0
    t_min: float = T_MIN
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    mode: str = "lomdm"
    width: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1
    eval_samples: int = 8
    alphabet: str = ""

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even and at least 2, got {self.batch_size}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.decay not in DECAYS:
            raise ValueError(f"decay must be one of {DECAYS}, got {self.decay!r}")
        if self.c2 < 0 or not self.c1 > self.c2:
            raise ValueError(f"need c1 > c2 >= 0 for a finite bound, got c1={self.c1}, c2={self.c2}")
        if self.mode == "lomdm" and self.c2 == 0:
            raise ValueError("lomdm mode needs c2 > 0; use mode 'mdlm' for a fixed scheduler")

    @property
    def shape(self) -> NetworkShape:
        return NetworkShape(self.vocab_size, self.length, self.width, self.layers, self.heads, self.dropout)


def mdlm_baseline(config: TrainingConfig) -> TrainingConfig:
    """The same run with the fixed linear scheduler (exponent 1, no learnable spread)."""
    return TrainingConfig(**{**asdict(config), "mode": "mdlm", "c1": 1.0, "c2": 0.0})


@dataclass
class MetricsRecord:
    step: int
    loss: float
    l_main: float
    l_velocity: float
    val_nelbo: Optional[float] = None
    corr_phi_conf: Optional[float] = None
    corr_psi_conf: Optional[float] = None
    corr_phi_psi: Optional[float] = None
    wall: float = 0.0

    def as_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def comparable(self) -> dict:
        d = asdict(self)
        d.pop("wall")
        return d


class TrainState:
    def __init__(self, config: TrainingConfig, denoiser: NeuralDenoiser, heads: SchedulerHeads,
                 optimizer: torch.optim.Optimizer, step: int = 0):
        self.config = config
        self.denoiser = denoiser
        self.heads = heads
        self.optimizer = optimizer
        self.step = step

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.config.vocab_size)


def _make_optimizer(config, denoiser, heads):
    groups = [{"params": list(denoiser.parameters()), "lr": 0.0, "base_lr": config.lr_backbone}]
    head_params = list(heads.parameters())
    groups.append({"params": head_params, "lr": 0.0, "base_lr": config.lr_heads})
    return torch.optim.AdamW(groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=config.weight_decay)


def init_state(config: TrainingConfig) -> TrainState:
    torch.manual_seed(RandomStream(config.seed).child("init").torch_seed())
    denoiser = NeuralDenoiser(config.shape)
    heads = SchedulerHeads(config.shape, config.c1, config.c2)
    if config.mode == "mdlm":
        heads.requires_grad_(False)
    return TrainState(config, denoiser, heads, _make_optimizer(config, denoiser, heads))


def learning_rate_factor(step: int, warmup: int, total: int = 0, decay: str = "constant") -> float:
    """Linear warmup from 0, then constant or cosine down to 0 at ``total``; ``step`` counts completed updates."""
    factor = 1.0 if warmup <= 0 else min(1.0, (step + 1) / warmup)
    if decay == "cosine" and total > warmup and step >= warmup:
        progress = min(1.0, (step - warmup) / (total - warmup))
        factor *= 0.5 * (1.0 + math.cos(math.pi * progress))
    return factor


def _step_stream(config: TrainingConfig, step: int) -> RandomStream:
    return RandomStream(config.seed).child("step", step)


class NonFiniteLossError(FloatingPointError):
    pass


def train_step(state: TrainState, batch: np.ndarray, rng: RandomStream) -> MetricsRecord:
    """One update on ``batch`` (B/2 texts, each corrupted twice)."""
    cfg = state.config
    start = time.perf_counter()
    x = torch.as_tensor(np.asarray(batch, dtype=np.int64))
    torch.manual_seed(rng.child("torch").torch_seed())
    state.denoiser.train()
    state.heads.train()
    noise = ObjectiveNoise.draw(x.shape[0], x.shape[1], rng, cfg.t_min, dtype=torch.float32)
    obj = combined_objective(x, state.denoiser, state.heads, noise=noise, per_token=True)
    if not torch.isfinite(obj.total):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {obj.total.item()}")
    factor = learning_rate_factor(state.step, cfg.warmup, cfg.steps, cfg.decay)
    for group in state.optimizer.param_groups:
        group["lr"] = group["base_lr"] * factor
    state.optimizer.zero_grad(set_to_none=True)
    obj.total.backward()
    state.optimizer.step()
    state.step += 1
    L = x.shape[1]
    main = 0.5 * (obj.first.main.sum(-1) + obj.second.main.sum(-1)).mean().item() / L
    vel = 0.5 * (obj.first.velocity.sum(-1) + obj.second.velocity.sum(-1)).mean().item() / L
    return MetricsRecord(state.step, obj.total.item(), main, vel, wall=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    nelbo_per_token: float
    stderr: float
    perplexity_bound: float
    sequences: int
    samples: int


@torch.no_grad()
def bound_samples(state: TrainState, sequences: np.ndarray, n_mc: int, seed: int) -> np.ndarray:
    """Per-(sequence, sample) continuous-time bound values, truncated at ``t_min``."""
    cfg = state.config
    state.denoiser.eval()
    state.heads.eval()
    x = torch.as_tensor(np.repeat(np.asarray(sequences, dtype=np.int64), n_mc, axis=0))
    noise = ObjectiveNoise.draw(x.shape[0], x.shape[1], RandomStream(seed).child("eval"), cfg.t_min,
                                dtype=torch.float32)
    out = []
    for lo in range(0, x.shape[0], 1024):
        xb = x[lo:lo + 1024]
        e_phi = state.heads.exponents("phi", Features(state.denoiser.backbone(xb)))
        terms = _corruption_terms(xb, noise.u1[lo:lo + 1024], noise.t[lo:lo + 1024], e_phi,
                                  state.denoiser, state.heads, floor=None)
        out.append(terms.loss.double().numpy())
    values = (1.0 - cfg.t_min) * np.concatenate(out)
    return values.reshape(len(sequences), n_mc)


def evaluate(state: TrainState, sequences: np.ndarray, n_mc: int = 8, seed: int = 1234) -> EvalReport:
    values = bound_samples(state, sequences, n_mc, seed) / state.config.length
    per_seq = values.mean(1)
    est = float(per_seq.mean())
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else float("nan")
    return EvalReport(est, se, float(math.exp(est)), len(sequences), n_mc)


def pearson(a, b) -> Optional[float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return None
    return float(np.clip(np.corrcoef(a, b)[0, 1], -1.0, 1.0))


@torch.no_grad()
def correlation_diagnostics(state: TrainState, batch: np.ndarray, rng: RandomStream) -> dict:
    """Correlations among forward velocity, reverse velocity and confidence over masked positions."""
    cfg = state.config
    state.denoiser.eval()
    state.heads.eval()
    x = torch.as_tensor(np.asarray(batch, dtype=np.int64))
    noise = ObjectiveNoise.draw(x.shape[0], x.shape[1], rng, cfg.t_min, dtype=torch.float32)
    e_phi = state.heads.exponents("phi", Features(state.denoiser.backbone(x)))
    terms = _corruption_terms(x, noise.u1, noise.t, e_phi, state.denoiser, state.heads, floor=None)
    m = terms.masked.numpy()
    A = terms.A.numpy()[m]
    A_hat = terms.A_hat.numpy()[m]
    conf = terms.log_conf.exp().numpy()[m]
    return {
        "corr_phi_conf": pearson(A, conf),
        "corr_psi_conf": pearson(A_hat, conf),
        "corr_phi_psi": pearson(A, A_hat),
    }


# ---------------------------------------------------------------------------
# training loop


def sample_batch(config: TrainingConfig, data: np.ndarray, step: int) -> np.ndarray:
    idx = _step_stream(config, step).child("batch").integers(0, len(data), size=config.batch_size // 2)
    return data[idx]


def train(config: TrainingConfig, train_data: np.ndarray, valid_data: Optional[np.ndarray] = None,
          state: Optional[TrainState] = None, out_dir: Optional[Path] = None,
          on_metrics: Optional[Callable[[MetricsRecord], None]] = None) -> tuple[TrainState, list]:
    """Run (or resume) training up to ``config.steps`` updates."""
    state = state or init_state(config)
    train_data = np.asarray(train_data, dtype=np.int64)
    if train_data.ndim != 2 or train_data.shape[1] != config.length or len(train_data) == 0:
        raise ValueError(f"training data must be a non-empty (N, {config.length}) array")
    records = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    while state.step < config.steps:
        step = state.step
        rec = train_step(state, sample_batch(config, train_data, step), _step_stream(config, step))
        due = config.eval_every and (state.step % config.eval_every == 0 or state.step == config.steps)
        if due and valid_data is not None and len(valid_data):
            rec.val_nelbo = evaluate(state, valid_data, config.eval_samples).nelbo_per_token
            diag = correlation_diagnostics(state, valid_data[: 4 * config.batch_size],
                                           RandomStream(config.seed).child("diagnostics"))
            rec.corr_phi_conf, rec.corr_psi_conf, rec.corr_phi_psi = (
                diag["corr_phi_conf"], diag["corr_psi_conf"], diag["corr_phi_psi"])
        records.append(rec)
        if on_metrics is not None:
            on_metrics(rec)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"step{state.step:06d}.ckpt")
    if out_dir is not None:
        save_checkpoint(state, out_dir / "final.ckpt")
    return state, records


def write_metrics(records: Iterable[MetricsRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.as_json() + "\n")


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


def _pack_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        flag = 64
    elif arr.dtype == np.float32:
        flag = 32
    else:
        raise CheckpointError(f"array {name} has unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(struct.pack("<B", flag))
    buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _state_arrays(state: TrainState) -> list[tuple[str, np.ndarray]]:
    arrays = []
    for prefix, module in (("denoiser", state.denoiser), ("heads", state.heads)):
        for name, tensor in module.state_dict().items():
            arrays.append((f"{prefix}/{name}", tensor.detach().cpu().numpy()))
    opt = state.optimizer.state_dict()["state"]
    for idx in sorted(opt):
        for key in sorted(opt[idx]):
            val = opt[idx][key]
            arr = val.detach().cpu().numpy() if isinstance(val, torch.Tensor) else np.asarray(val, dtype=np.float64)
            arrays.append((f"optimizer/{idx}/{key}", arr))
    return arrays


def checkpoint_bytes(state: TrainState) -> bytes:
    arrays = _state_arrays(state)
    meta = {
        "config": asdict(state.config),
        "step": state.step,
        "vocab": {"size": state.config.vocab_size, "alphabet": state.config.alphabet},
        "rng": {"seed": state.config.seed, "next_step": state.step},
        "arrays": [name for name, _ in arrays],
    }
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _pack_array(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    try:
        path.write_bytes(checkpoint_bytes(state))
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc.strerror}") from exc
    return path


def state_from_bytes(data: bytes) -> TrainState:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {FORMAT_VERSION})")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}") from None
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for k in range(count):
        (n,) = r.unpack("<H", f"name length of array {k}")
        name = r.take(n, f"name of array {k}").decode("utf-8")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        (flag,) = r.unpack("<B", f"precision flag of {name}")
        if flag not in (32, 64):
            raise CheckpointError(f"bad precision flag {flag} for {name}")
        dtype = np.dtype("<f4" if flag == 32 else "<f8")
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(size, f"payload of {name}"), dtype=dtype).reshape(dims).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last array")
    if list(arrays) != meta.get("arrays"):
        raise CheckpointError("array table does not match the metadata listing")

    config = TrainingConfig(**meta["config"])
    denoiser = NeuralDenoiser(config.shape)
    heads = SchedulerHeads(config.shape, config.c1, config.c2)
    if config.mode == "mdlm":
        heads.requires_grad_(False)
    for prefix, module in (("denoiser", denoiser), ("heads", heads)):
        sd = module.state_dict()
        for name in sd:
            key = f"{prefix}/{name}"
            if key not in arrays:
                raise CheckpointError(f"missing array {key}")
            if tuple(arrays[key].shape) != tuple(sd[name].shape):
                raise CheckpointError(f"array {key} has shape {arrays[key].shape}, expected {tuple(sd[name].shape)}")
            sd[name] = torch.from_numpy(arrays[key])
        module.load_state_dict(sd)
    optimizer = _make_optimizer(config, denoiser, heads)
    opt_sd = optimizer.state_dict()
    opt_state: dict = {}
    for key, arr in arrays.items():
        if key.startswith("optimizer/"):
            _, idx, field_name = key.split("/")
            opt_state.setdefault(int(idx), {})[field_name] = torch.from_numpy(arr)
    opt_sd["state"] = opt_state
    optimizer.load_state_dict(opt_sd)
    return TrainState(config, denoiser, heads, optimizer, step=int(meta["step"]))


def load_checkpoint(path) -> TrainState:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc.strerror}") from exc
    return state_from_bytes(data)
