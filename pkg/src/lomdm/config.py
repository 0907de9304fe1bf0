"""Run configuration: a YAML document validated against a strict schema."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

SUITES = ("velocity", "ratio", "mdlm", "genmd4", "elbo", "arm", "bd3lm", "sampler", "rloo", "gradient")


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CorpusSection(_Section):
    path: Optional[str] = None
    grammar: str = "kv"
    seed: int = 0
    n_train: int = 20000
    n_valid: int = 512
    length: int = 16
    max_vocab: Optional[int] = None


class ModelSection(_Section):
    width: int = 64
    layers: int = 2
    heads: int = 4
    dropout: float = 0.1


class TrainingSection(_Section):
    batch_size: int = 32
    steps: int = 2000
    c1: float = 0.7
    c2: float = 0.65
    lr_backbone: float = 3e-4
    lr_heads: float = 1e-5
    warmup: int = 100
    decay: Literal["constant", "cosine"] = "constant"
    weight_decay: float = 0.0
    t_min: float = 1e-4
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    eval_samples: int = 4
    mode: Literal["lomdm", "mdlm"] = "lomdm"

    @model_validator(mode="after")
    def _finite_bound(self):
        if self.c2 < 0 or not self.c1 > self.c2:
            raise ValueError(
                f"c1 must exceed c2 >= 0 (otherwise exponents can reach 0 and the bound is not finite); "
                f"got c1={self.c1}, c2={self.c2}"
            )
        if self.mode == "lomdm" and self.c2 == 0:
            raise ValueError("mode 'lomdm' needs c2 > 0")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even, got {self.batch_size}")
        return self


class SamplingSection(_Section):
    nfe: int = 8
    n_samples: int = 16
    seed: int = 0


class EvalSection(_Section):
    n_mc: int = 8
    seed: int = 1234


class VerifySection(_Section):
    suites: list[str] = list(SUITES)

    @model_validator(mode="after")
    def _known(self):
        unknown = [s for s in self.suites if s not in SUITES]
        if unknown:
            raise ValueError(f"unknown suites {unknown}; choose from {list(SUITES)}")
        return self


class RunConfig(_Section):
    corpus: CorpusSection = CorpusSection()
    model: ModelSection = ModelSection()
    training: TrainingSection = TrainingSection()
    sampling: SamplingSection = SamplingSection()
    eval: EvalSection = EvalSection()
    verify: VerifySection = VerifySection()
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None

    def resolve_paths(self, base: Path) -> "RunConfig":
        def fix(p):
            return None if p is None else str((base / p).resolve())

        data = self.model_dump()
        data["out_dir"] = fix(self.out_dir)
        data["checkpoint"] = fix(self.checkpoint)
        data["corpus"]["path"] = fix(self.corpus.path)
        return RunConfig(**data)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown key '{loc}'")
        else:
            msg = err["msg"].removeprefix("Value error, ")
            parts.append(f"{loc or 'config'}: {msg}")
    return "; ".join(parts)


def parse_config(text: str, base: Path = Path(".")) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"config parse error{where}: {problem}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping at the top level")
    try:
        cfg = RunConfig(**doc)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    return cfg.resolve_paths(base)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent.resolve())


def default_config(base: Path = Path(".")) -> RunConfig:
    return RunConfig().resolve_paths(base)
