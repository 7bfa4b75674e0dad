import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equitab.baseline import BaselineModel
from equitab.errors import CostGuardError
from equitab.harness import lab_episodes
from equitab.lab import (
    GapReport,
    ensemble_sweep,
    gap_estimate,
    pointwise_loss,
    sq_identity_check,
    symmetrize,
    violation_rate,
)
from equitab.model import EquiTabModel, ModelConfig
from equitab.prior import EpisodeBatch, PriorConfig, as_batch, sample_episode

CFG = ModelConfig(d=16, n_layers=2, n_heads=2, hidden=16, p_max=8, decoder_hidden=8, q_max=5)


@pytest.fixture(scope="module")
def baseline():
    return BaselineModel.initialize(CFG, seed=4, dtype=np.float64)


@pytest.fixture(scope="module")
def equitab():
    return EquiTabModel.initialize(CFG, seed=4, dtype=np.float64)


def episodes(n, q, seed=0, total=24):
    return lab_episodes(n, (q, q), seed, total=total)


def constant_first_class(batch):
    batch = as_batch(batch)
    N, M, p, q = batch.dims
    out = np.zeros((batch.B, M, q))
    out[..., 0] = 1.0
    return out


# ---------------------------------------------------------------------------
# violation rate
# ---------------------------------------------------------------------------


def test_equitab_violation_zero(equitab):
    assert violation_rate(equitab, episodes(8, 5), n_perms=5) == 0.0


def test_random_baseline_violation_positive(baseline):
    assert violation_rate(baseline, episodes(8, 5), n_perms=5) > 0


def test_exhaustive_symmetrization_violation_zero(baseline):
    fbar = symmetrize(baseline, 3, "exhaustive")
    assert violation_rate(fbar, episodes(8, 3), n_perms=6) <= 1e-4


def test_violation_counts(baseline):
    rate, flips, total = violation_rate(baseline, episodes(4, 4), n_perms=3, return_counts=True)
    assert total == sum(ep.M for ep in episodes(4, 4)) * 3
    assert rate == flips / total and 0 <= rate <= 1


def test_violation_needs_a_permutation(baseline):
    with pytest.raises(ValueError):
        violation_rate(baseline, episodes(1, 3), n_perms=0)


# ---------------------------------------------------------------------------
# symmetrize
# ---------------------------------------------------------------------------


def test_symmetrizing_equivariant_model_is_fixed_point(equitab):
    ep = episodes(1, 4)[0]
    np.testing.assert_allclose(symmetrize(equitab, 4)(ep), equitab(ep), atol=1e-4)


def test_constant_predictor_symmetrizes_to_uniform():
    ep = episodes(1, 2)[0]
    np.testing.assert_allclose(symmetrize(constant_first_class, 2)(ep), 0.5)


def test_cost_guard():
    with pytest.raises(CostGuardError):
        symmetrize(constant_first_class, 5, "exhaustive")
    fbar = symmetrize(constant_first_class, 5, "exhaustive", allow_large=True)
    assert len(fbar.permutations) == 120


def test_sampled_agrees_with_exhaustive_in_expectation(baseline):
    batch = EpisodeBatch.from_episodes([episodes(1, 3, seed=1)[0]])
    exact = symmetrize(baseline, 3, "exhaustive")(batch)[..., 0].mean()
    stats = [symmetrize(baseline, 3, "sampled", n=6, seed=s)(batch)[..., 0].mean() for s in range(50)]
    stderr = np.std(stats, ddof=1) / math.sqrt(len(stats))
    assert abs(np.mean(stats) - exact) <= 3 * stderr


# ---------------------------------------------------------------------------
# gap
# ---------------------------------------------------------------------------


def test_pointwise_losses():
    p = np.array([[0.25, 0.75]])
    y = np.array([[0.0, 1.0]])
    np.testing.assert_allclose(pointwise_loss(p, y, "ce"), [-math.log(0.75)])
    np.testing.assert_allclose(pointwise_loss(p, y, "sq"), [0.125])
    with pytest.raises(ValueError):
        pointwise_loss(p, y, "hinge")


def test_constant_predictor_sq_gap_is_half():
    report = gap_estimate(constant_first_class, episodes(6, 2), "sq", "exhaustive")
    assert report.gap == pytest.approx(0.5, abs=1e-15)
    assert report.sq_identity_rhs == pytest.approx(0.5, abs=1e-15)
    assert report.gap_stderr == pytest.approx(0.0, abs=1e-15)


def test_equitab_gap_zero(equitab):
    report = gap_estimate(equitab, episodes(6, 3), "ce", "exhaustive")
    assert report.gap_near_zero()
    assert abs(report.gap) < 1e-12
    assert report.violation_rate == 0.0


def test_report_fields(baseline):
    report = gap_estimate(baseline, episodes(5, 3), "sq", "exhaustive")
    assert report.gap == report.loss_f - report.loss_fbar
    assert 0 <= report.violation_rate <= 1
    assert report.n_episodes == 5 and report.n_perms == 6 and report.exhaustive
    lines = report.to_text().splitlines()
    assert lines[0] == "loss: sq" and all(": " in line for line in lines)
    parsed = json.loads(report.summary_line())
    assert parsed["gap"] == report.gap
    assert json.loads(gap_estimate(baseline, episodes(2, 3), "ce").summary_line())["sq_identity_lhs"] is None


def test_ce_report_has_nan_identity(baseline):
    report = gap_estimate(baseline, episodes(3, 3), "ce", "exhaustive")
    assert math.isnan(report.sq_identity_lhs) and math.isnan(report.sq_identity_rhs)
    assert isinstance(report, GapReport)


def test_ce_gap_non_negative_random_baseline(baseline):
    report = gap_estimate(baseline, lab_episodes(64, (2, 4), 3, total=24), "ce", "exhaustive")
    assert report.gap >= -2 * report.gap_stderr


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.integers(2, 4))
def test_sq_gap_non_negative_exhaustive(seed, q):
    model = BaselineModel.initialize(CFG, seed, np.float64)
    report = gap_estimate(model, episodes(3, q, seed=seed), "sq", "exhaustive")
    assert report.gap >= -1e-9


# ---------------------------------------------------------------------------
# squared-loss identity
# ---------------------------------------------------------------------------


def test_identity_exhaustive_random_baseline(baseline):
    check = sq_identity_check(baseline, episodes(32, 3, seed=2), "exhaustive")
    assert check.passed, str(check)
    assert check.margin <= 1e-6


def test_identity_equitab_both_sides_zero(equitab):
    check = sq_identity_check(equitab, episodes(8, 3), "exhaustive")
    assert check.passed
    assert abs(check.lhs) <= 1e-6 and abs(check.rhs) <= 1e-6


def test_identity_sampled_q5(baseline):
    check = sq_identity_check(baseline, episodes(32, 5, seed=5), "sampled", n_perms=8, seed=1)
    assert check.passed, str(check)


def test_failed_check_reports_both_sides():
    text = str(sq_identity_check(constant_first_class, episodes(2, 2), "exhaustive", exact_tol=-1.0))
    assert text.startswith("FAIL") and "gap=" in text and "|diff|=" in text


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def test_sweep_reuses_episodes_and_sigmas(baseline):
    from equitab.harness import predictor_for

    eps = episodes(6, 5)
    sweep = ensemble_sweep(lambda n: predictor_for(baseline, n, 0), eps, (1, 2), n_perms=3, seed=0)
    assert [n for n, _ in sweep] == [1, 2]
    assert sweep[0][1] == violation_rate(predictor_for(baseline, 1, 0), eps, 3, 0)


def test_lab_episodes_deterministic():
    a, b = lab_episodes(3, (2, 4), 7), lab_episodes(3, (2, 4), 7)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.X, y.X)
    assert all(2 <= ep.q <= 4 for ep in a)


def test_lab_handles_random_mlp_prior(equitab):
    eps = [sample_episode(PriorConfig(family="random-mlp", total=24, n_range=(12, 12), q_range=(3, 3)), s)
           for s in range(3)]
    assert violation_rate(equitab, eps, 4) == 0.0
