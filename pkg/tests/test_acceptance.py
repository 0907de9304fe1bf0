"""Acceptance suite: every criterion at its stated size and tolerance.

Each test records one PASS/FAIL line, shown in the terminal summary.
"""

import time

import numpy as np
import pytest

from lomdm import suites
from lomdm.corpus import synthetic_corpus
from lomdm.schedulers import velocity_ratio_bound
from lomdm.trainer import TrainingConfig, mdlm_baseline, train


def _finish(report_line, number, title, rep, detail, budget=None):
    seconds = rep.details.get("seconds", 0.0)
    ok = rep.passed and (budget is None or seconds < budget)
    timing = f", {seconds:.1f}s" + (f" (budget {budget}s)" if budget else "")
    report_line(number, title, ok, detail + timing)
    assert rep.passed, rep.as_record()
    if budget is not None:
        assert seconds < budget


def test_criterion_01_elbo_validity(report_line):
    rep = suites.elbo_suite(n_models=20, steps=64)
    _finish(report_line, 1, "ELBO validity", rep,
            f"{rep.instances} model/scheduler cases, min gap {rep.details['min_gap']:.3e} (margin -1e-9)", 120)


def test_criterion_02_mdlm_reduction(report_line):
    rep = suites.mdlm_suite(n=10_000)
    _finish(report_line, 2, "MDLM reduction", rep,
            f"max |l_velocity| {rep.details['velocity_max']:.1e}, "
            f"max l_main deviation {rep.details['main_relative_deviation']:.1e} (tol 1e-12)")


def test_criterion_03_arm_limit(report_line):
    rep = suites.arm_suite()
    slopes = ", ".join(f"{s:.3f}" for s in rep.details["slopes"])
    _finish(report_line, 3, "ARM limit", rep,
            f"log-log slopes [{slopes}] (1 +- 0.3), monotone {all(rep.details['monotone'])}", 300)


def test_criterion_04_velocity_term(report_line):
    rep = suites.velocity_suite(n=1_000_000)
    flagged = "; ".join(f"A={p['A']:.6g} A_hat={p['A_hat']:.6g} term={p['value']:.4e} series={p['series']:.4e}"
                        for p in rep.details["flagged_pairs"])
    _finish(report_line, 4, "velocity term", rep,
            f"{rep.details['negative']} negative, {rep.details['near_zero_without_equal_pair']} values <= 1e-12 "
            f"with |A - A_hat| > 1e-9 [{flagged}], equal pairs max {rep.details['equal_pair_max']:.1e}")


def test_criterion_05_finiteness_ratio(report_line):
    lo, hi = velocity_ratio_bound(0.7, 0.65)
    assert round(lo, 4) == 0.0370 and round(hi, 4) == 27.0
    rep = suites.ratio_suite(n=100_000)
    _finish(report_line, 5, "velocity ratio bound", rep,
            f"ratios in [{rep.details['min']:.4f}, {rep.details['max']:.4f}] vs ({lo:.4f}, {hi:.1f})")


def test_criterion_06_genmd4_identity(report_line):
    rep = suites.genmd4_suite(n=10_000)
    _finish(report_line, 6, "GenMD4 identity", rep, f"max difference {rep.max_deviation:.1e} (tol 1e-12)")


def test_criterion_07_gradients(report_line):
    rep = suites.gradient_suite()
    groups = ", ".join(f"{k} {v:.1e}" for k, v in rep.deviations.items())
    _finish(report_line, 7, "gradient correctness", rep,
            f"max relative error {groups} (tol 1e-4); stop-gradient analytic "
            f"{rep.details['stop_gradient_analytic']:.1e} vs numeric {rep.details['stop_gradient_numeric']:.2e}")


def test_criterion_08_rloo_unbiased(report_line):
    rep = suites.rloo_suite(n_pairs=100_000)
    _finish(report_line, 8, "RLOO unbiasedness", rep,
            f"{rep.instances} seed pairs, {rep.details.get('coordinates', '?')} coordinates, "
            f"worst |z| {rep.max_deviation:.2f} (threshold 4)")


def test_criterion_09_sampler(report_line):
    rep = suites.sampler_suite(n=100_000, steps=8)
    _finish(report_line, 9, "sampler vs oracle", rep,
            f"worst endpoint deviation {rep.max_deviation:.2f} standard errors (3), "
            f"absorbing fraction {rep.details['absorbing_fraction']:.3f}")


# desk-scale training comparison
TRAIN_STEPS = 3000
TRAIN_BUDGET = 30 * 60


def desk_config(corpus) -> TrainingConfig:
    return TrainingConfig(
        length=corpus.length, vocab_size=corpus.vocab.size, batch_size=32, steps=TRAIN_STEPS, c1=0.7, c2=0.65,
        lr_backbone=1e-3, lr_heads=1e-3, warmup=100, decay="cosine", width=64, layers=2, heads=4, dropout=0.1,
        eval_every=TRAIN_STEPS, eval_samples=4, seed=0, alphabet=corpus.alphabet,
    )


@pytest.mark.slow
def test_criterion_10_training_direction(report_line):
    start = time.perf_counter()
    corpus = synthetic_corpus(20_000, seed=0)
    train_split, valid_split = corpus.split(512)
    cfg = desk_config(corpus)
    _, lomdm_recs = train(cfg, train_split.sequences, valid_split.sequences)
    _, mdlm_recs = train(mdlm_baseline(cfg), train_split.sequences, valid_split.sequences)
    seconds = time.perf_counter() - start
    lo, base = lomdm_recs[-1], mdlm_recs[-1]
    corr = lo.corr_phi_conf
    ok = (lo.val_nelbo <= base.val_nelbo and corr is not None and corr > 0 and seconds < TRAIN_BUDGET)
    report_line(10, "training direction", ok,
                f"val NELBO/token LoMDM {lo.val_nelbo:.4f} vs MDLM {base.val_nelbo:.4f}, "
                f"corr(A_phi, confidence) {np.nan if corr is None else corr:.3f}, {seconds:.0f}s "
                f"(budget {TRAIN_BUDGET}s, {TRAIN_STEPS} steps)")
    assert lo.val_nelbo <= base.val_nelbo
    assert corr is not None and corr > 0
    assert seconds < TRAIN_BUDGET
