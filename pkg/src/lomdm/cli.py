"""Command line: verify, train, sample, eval, exact."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import SUITES, ConfigError, RunConfig, default_config, load_config
from .core import EnumerationLimitError, RandomStream, TimeGrid, Vocabulary
from .corpus import Corpus, CorpusError, ingest_corpus, synthetic_corpus
from .diffusion import ancestral_sample_batch
from .model import TabularDenoiser, learned_head_callable
from .objective import nelbo_mc
from .oracles import likelihood_table
from .schedulers import LearnedHead, Linear, Polynomial
from .trainer import CheckpointError, NonFiniteLossError, TrainingConfig, evaluate, load_checkpoint, train

log = logging.getLogger("lomdm")

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_NUMERIC = 5

ERROR_CODES = {
    ConfigError: ("config_error", EXIT_CONFIG),
    CorpusError: ("data_error", EXIT_DATA),
    CheckpointError: ("checkpoint_error", EXIT_CHECKPOINT),
    EnumerationLimitError: ("size_limit", EXIT_DATA),
    NonFiniteLossError: ("non_finite", EXIT_NUMERIC),
    FloatingPointError: ("non_finite", EXIT_NUMERIC),
    OSError: ("io_error", EXIT_DATA),
}


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.model_dump_json().encode("utf-8")).hexdigest()[:16]


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    data = cfg.model_dump()
    changes = []

    def put(section, key, value):
        if value is None:
            return
        target = data if section is None else data[section]
        if target[key] != value:
            changes.append(f"{section + '.' if section else ''}{key}: {target[key]!r} -> {value!r}")
        target[key] = value

    put("training", "seed", args.seed)
    put("sampling", "seed", args.seed)
    put("eval", "seed", args.seed)
    put("sampling", "nfe", getattr(args, "nfe", None))
    put("training", "steps", getattr(args, "steps", None))
    out = getattr(args, "out", None)
    if out is not None and args.command in ("train",):
        put(None, "out_dir", str(Path(out).resolve()))
    suite = getattr(args, "suite", None)
    if suite:
        put("verify", "suites", [suite])
    for line in changes:
        log.info("override %s", line)
    try:
        return RunConfig(**data)
    except Exception as exc:  # pydantic validation of the merged document
        raise ConfigError(str(exc)) from None


def build_corpus(cfg: RunConfig) -> Corpus:
    c = cfg.corpus
    if c.path is not None:
        return ingest_corpus(c.path, c.length, c.max_vocab)
    corpus = synthetic_corpus(c.n_train + c.n_valid, c.seed, c.grammar)
    if corpus.length != c.length:
        raise CorpusError(f"grammar {c.grammar!r} produces length {corpus.length}, config asks for {c.length}")
    return corpus


def training_config(cfg: RunConfig, corpus: Corpus) -> TrainingConfig:
    t, m = cfg.training, cfg.model
    return TrainingConfig(
        length=corpus.length, vocab_size=corpus.vocab.size, batch_size=t.batch_size, steps=t.steps,
        c1=t.c1, c2=t.c2, lr_backbone=t.lr_backbone, lr_heads=t.lr_heads, warmup=t.warmup, decay=t.decay,
        weight_decay=t.weight_decay, t_min=t.t_min, seed=t.seed, eval_every=t.eval_every,
        checkpoint_every=t.checkpoint_every, mode=t.mode, width=m.width, layers=m.layers, heads=m.heads,
        dropout=m.dropout, eval_samples=t.eval_samples, alphabet=corpus.alphabet,
    )


def _emit(obj, out) -> None:
    text = json.dumps(obj, sort_keys=True)
    if out is None:
        print(text)
    else:
        with open(out, "a", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out_dir) / "final.ckpt"


# ---------------------------------------------------------------------------
# commands


def cmd_verify(cfg: RunConfig, args) -> int:
    from .suites import run_suite

    failed = []
    for name in cfg.verify.suites:
        rep = run_suite(name, seed=cfg.training.seed, quick=not args.full)
        _emit(rep.as_record(), args.out)
        log.info("%s %s (max deviation %.3g, tolerance %.3g)", "PASS" if rep.passed else "FAIL",
                 name, rep.max_deviation, rep.tolerance)
        if not rep.passed:
            failed.append(name)
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    corpus = build_corpus(cfg)
    train_split, valid_split = corpus.split(min(cfg.corpus.n_valid, len(corpus.sequences) // 2))
    tcfg = training_config(cfg, corpus)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    metrics_path = out_dir / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")

    def sink(rec):
        with open(metrics_path, "a", encoding="utf-8") as fh:
            fh.write(rec.as_json() + "\n")

    state, _ = train(tcfg, train_split.sequences, valid_split.sequences, out_dir=out_dir, on_metrics=sink)
    log.info("trained %d steps; checkpoint at %s", state.step, out_dir / "final.ckpt")
    return EXIT_OK


def _reverse_spec(state):
    c = state.config
    if c.mode == "mdlm" or c.c2 == 0:
        return Polynomial(c.c1) if c.c1 != 1.0 else Linear()
    head = learned_head_callable(state.denoiser, state.heads, "psi")
    return LearnedHead(head, "psi", c.c1, c.c2)


def cmd_sample(cfg: RunConfig, args) -> int:
    state = load_checkpoint(_checkpoint_path(cfg))
    corpus = Corpus(np.zeros((0, state.config.length), dtype=np.int64), state.config.alphabet)
    n = args.n if args.n is not None else cfg.sampling.n_samples
    grid = TimeGrid(cfg.sampling.nfe)
    rng = RandomStream(cfg.sampling.seed).child("sample")
    xs = ancestral_sample_batch(state.denoiser.as_numpy(), _reverse_spec(state), grid, state.config.length, n,
                                rng, state.vocab)
    lines = [f"# config={config_hash(cfg)} seed={cfg.sampling.seed} nfe={cfg.sampling.nfe} n={n}"]
    lines += [corpus.decode(x) if corpus.alphabet else " ".join(map(str, x)) for x in xs]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    if args.fixture == "memorize":
        corpus = build_corpus(cfg)
        vocab = corpus.vocab
        x = corpus.sequences[0]
        den = TabularDenoiser.memorizing(vocab, x) if len(x) <= 6 else _MemorizingRows(vocab, x)
        est = nelbo_mc(x, den, Linear(), Linear(), cfg.eval.n_mc, RandomStream(cfg.eval.seed), vocab)
        per_token = est.estimate / len(x)
        report = {"fixture": "memorize", "nelbo_per_token": per_token, "perplexity_bound": float(np.exp(per_token))}
    else:
        state = load_checkpoint(_checkpoint_path(cfg))
        corpus = build_corpus(cfg)
        _, valid = corpus.split(min(cfg.corpus.n_valid, len(corpus.sequences) // 2))
        rep = evaluate(state, valid.sequences, cfg.eval.n_mc, cfg.eval.seed)
        report = {"nelbo_per_token": rep.nelbo_per_token, "stderr": rep.stderr,
                  "perplexity_bound": rep.perplexity_bound, "sequences": rep.sequences, "samples": rep.samples}
    _emit(report, args.out)
    return EXIT_OK


class _MemorizingRows:
    """Memorising denoiser without a state table, for sequences too long to tabulate."""

    def __init__(self, vocab: Vocabulary, x):
        self.vocab = vocab
        self.x = np.asarray(x)

    def __call__(self, z):
        z = np.asarray(z)
        out = np.zeros(z.shape + (self.vocab.size + 1,))
        np.put_along_axis(out, np.broadcast_to(self.x, z.shape)[..., None], 1.0, axis=-1)
        return out


def cmd_exact(cfg: RunConfig, args) -> int:
    vocab = Vocabulary(args.vocab)
    rng = RandomStream(cfg.training.seed).child("exact")
    den = TabularDenoiser.random(vocab, args.length, rng.child("denoiser"))
    grid = TimeGrid(cfg.sampling.nfe)
    specs = {"linear": Linear(), "polynomial": Polynomial(args.w)}
    for name, spec in specs.items():
        table = likelihood_table(den, spec, grid, vocab, args.length)
        _emit({"scheduler": name, "steps": grid.steps, "vocab": vocab.size, "length": args.length,
               "likelihood": {"".join(map(str, k)): v for k, v in table.items()},
               "total": float(sum(table.values()))}, args.out)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "exact": cmd_exact}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output path (file, or directory for train)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lomdm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", parents=[common], help="run the verification suites")
    v.add_argument("--suite", choices=SUITES)
    v.add_argument("--full", action="store_true", help="acceptance-size runs instead of quick ones")
    t = sub.add_parser("train", parents=[common], help="train denoiser and schedulers")
    t.add_argument("--steps", type=int)
    s = sub.add_parser("sample", parents=[common], help="draw sequences by ancestral sampling")
    s.add_argument("--nfe", type=int)
    s.add_argument("--n", type=int, help="number of sequences")
    e = sub.add_parser("eval", parents=[common], help="report the perplexity bound")
    e.add_argument("--fixture", choices=["memorize"])
    x = sub.add_parser("exact", parents=[common], help="exact likelihood tables for tiny random models")
    x.add_argument("--nfe", type=int)
    x.add_argument("--vocab", type=int, default=2)
    x.add_argument("--length", type=int, default=2)
    x.add_argument("--w", type=float, default=0.7, help="polynomial exponent")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else default_config()
        cfg = apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except tuple(ERROR_CODES) as exc:
        for kind, (code, status) in ERROR_CODES.items():
            if isinstance(exc, kind):
                break
        sys.stderr.write(json.dumps({"error": code, "message": str(exc)}) + "\n")
        return status
    except ValueError as exc:
        sys.stderr.write(json.dumps({"error": "invalid_input", "message": str(exc)}) + "\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
