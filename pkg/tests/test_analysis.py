import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from normscale.analysis import (DEFAULT_BAND, HEURISTIC_SLOPES, FitError, NormScanPoint, NormTrajectory, RunRecord,
                                composed_lr_exponent, empirical_optimum, first_entry, fit_loss_vs_norm,
                                fit_power_law, fit_variant_ensemble, norm_reach_set, regress_lr_bs_horizon,
                                smooth_losses, smoothing_gate)
from normscale.linalg import make_rng
from oracles import parabola_scan

A, B, C = 0.05, -0.7, math.log(11.765)
VERTEX_LOG2 = 7.0 / math.log(2)
GRID = [VERTEX_LOG2 + 0.5 * k for k in range(-6, 7)]


def add_smoothing(points, rng, sigma):
    """Attach a three-sample smoothed loss and its stderr to each point."""
    for p in points:
        draws = np.exp(np.log(p.loss) + np.concatenate([[0.0], rng.normal(0.0, sigma, 2)]))
        p.smoothed_loss = float(draws.mean())
        p.stderr = float(draws.std(ddof=1) / math.sqrt(3))
    return points


def test_run_record_validation():
    RunRecord("r", 0.1, 8, 1024, 0, 3.0, {"unembed": 2.0})
    with pytest.raises(ValueError):
        RunRecord("r", 0.1, 8, 1024, 0, math.nan)
    with pytest.raises(ValueError):
        RunRecord("r", 0.1, 8, 1024, 0, 3.0, {"unembed": 0.0})


def test_smoothing_gate_defaults():
    assert smoothing_gate(128, 2**33)
    assert not smoothing_gate(256, 2**34)
    assert not smoothing_gate(64, 2**32)
    assert smoothing_gate(16, 2**18, max_batch=128, min_tokens=2**18)


def test_smoothing_examples():
    mean, se = smooth_losses([4.0, 4.2, 4.1])
    assert mean[1] == pytest.approx(4.1, abs=1e-15)
    assert mean[0] == 4.0 and mean[2] == 4.1
    assert se[0] == se[1] == se[2]
    mean, se = smooth_losses([2.5] * 5)
    assert np.array_equal(mean, [2.5] * 5) and np.all(se == 0)
    with pytest.raises(FitError):
        smooth_losses([1.0, 2.0])


def test_smoothing_stderr_monte_carlo():
    rng = make_rng(3)
    sigma = 0.02
    x = np.arange(12)
    stderrs = []
    for _ in range(1000):
        y = 3.0 - 0.001 * x + rng.normal(0.0, sigma, x.size)
        stderrs.append(smooth_losses(y)[1][1:-1])
    assert np.mean(stderrs) == pytest.approx(sigma / math.sqrt(3), rel=0.3)


def test_noiseless_vertex_recovery():
    pts = parabola_scan(A, B, C, GRID)
    for constrain in (False, True):
        fit = fit_loss_vs_norm(pts, 11.765, constrain=constrain)
        assert fit.ok and fit.n_used == 7
        assert fit.log_norm == pytest.approx(7.0, abs=1e-9)
        assert fit.loss == pytest.approx(math.exp(C - B * B / (4 * A)), rel=1e-9)
        assert fit.eta == pts[6].eta
        np.testing.assert_allclose(fit.coeffs, (A, B, C), atol=1e-9)


def test_fit_errors_and_flags():
    pts = parabola_scan(A, B, C, GRID)
    with pytest.raises(FitError):
        fit_loss_vs_norm(pts[:2], 11.765)
    with pytest.raises(FitError):
        fit_loss_vs_norm(pts, None, constrain=True)
    with pytest.raises(FitError):
        fit_loss_vs_norm([NormScanPoint(0.1, 2.0, 3.0)] * 3, 11.765)
    concave = parabola_scan(-0.05, 0.0, C, [0.0, 1.0, 2.0, 3.0, 4.0])
    fit = fit_loss_vs_norm(concave, 11.765)
    assert not fit.ok and math.isnan(fit.log_norm)


def test_window_truncates_at_scan_edge():
    # minimum at index 0: the centred window keeps only its in-range half
    pts = parabola_scan(A, B, C, [VERTEX_LOG2 + 0.5 * k for k in range(0, 10)])
    fit = fit_loss_vs_norm(pts, 11.765)
    assert fit.n_used == 4 and fit.log_norm == pytest.approx(7.0, abs=1e-9)
    upper = parabola_scan(A, B, C, [VERTEX_LOG2 - 0.5 * k for k in range(0, 10)])
    assert fit_loss_vs_norm(upper, 11.765).n_used == 4


@pytest.mark.parametrize("constrain", [False, True])
def test_noisy_vertex_recovery(constrain):
    rng = make_rng(7)
    hits = 0
    for _ in range(100):
        fit = fit_loss_vs_norm(parabola_scan(A, B, C, GRID, noise=0.003, rng=rng), 11.765, constrain=constrain)
        hits += fit.ok and abs(fit.log2_norm - VERTEX_LOG2) <= 0.2
    assert hits >= 90


def test_ensemble_on_noiseless_grid():
    ens = fit_variant_ensemble(parabola_scan(A, B, C, GRID), 11.765)
    assert len(ens.variants) == 6
    assert [v.variant for v in ens.variants] == ["fit", "fit+constrained", "fit+smooth", "fit+smooth+constrained",
                                                 "argmin", "argmin+smooth"]
    assert ens.spread["log2_norm"] <= 1e-6
    assert ens.spread["log2_eta"] == 0.0
    assert ens.nominal.variant == "fit+smooth+constrained"


def test_ensemble_idempotent_without_smoothing():
    pts = parabola_scan(A, B, C, GRID, noise=0.003, rng=make_rng(1))
    a = fit_variant_ensemble(pts, 11.765)
    b = fit_variant_ensemble(pts, 11.765)
    assert [v.coeffs for v in a.variants] == [v.coeffs for v in b.variants]
    assert a.spread == b.spread


def test_ensemble_spread_covers_vertex():
    rng = make_rng(11)
    positive = covered = 0
    for _ in range(200):
        pts = add_smoothing(parabola_scan(A, B, C, GRID, noise=0.003, rng=rng), rng, 0.003)
        ens = fit_variant_ensemble(pts, 11.765)
        vals = [v.log2_norm for v in ens.variants if v.ok]
        positive += ens.spread["log2_norm"] > 0
        covered += min(vals) <= VERTEX_LOG2 <= max(vals)
    assert positive == 200
    assert covered >= 180


def test_empirical_optimum():
    pts = [NormScanPoint(0.1, 2.0, 3.0), NormScanPoint(0.2, 4.0, 2.0, smoothed_loss=2.5),
           NormScanPoint(0.4, 8.0, 2.2, smoothed_loss=2.1)]
    assert empirical_optimum(pts).norm == pytest.approx(4.0)
    assert empirical_optimum(pts, smoothed=True).eta == 0.4
    with pytest.raises(FitError):
        empirical_optimum([])


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-3.0, 3.0), seed=st.integers(0, 2**31))
def test_fit_is_affine_equivariant(shift, seed):
    pts = parabola_scan(A, B, C, GRID, noise=0.003, rng=make_rng(seed))
    moved = [NormScanPoint(p.eta, p.norm, p.loss * math.exp(shift)) for p in pts]
    f0 = fit_loss_vs_norm(pts, 11.765)
    f1 = fit_loss_vs_norm(moved, 11.765)
    assert f1.coeffs[0] == pytest.approx(f0.coeffs[0], abs=1e-10)
    assert f1.coeffs[1] == pytest.approx(f0.coeffs[1], abs=1e-10)
    assert f1.coeffs[2] == pytest.approx(f0.coeffs[2] + shift, abs=1e-10)
    assert f1.log_norm == pytest.approx(f0.log_norm, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(k=st.floats(1e-4, 1e-1), seed=st.integers(0, 2**31))
def test_equal_weights_reduce_to_ols(k, seed):
    pts = parabola_scan(A, B, C, GRID, noise=0.003, rng=make_rng(seed))
    # stderr proportional to loss means equal weight on every log-loss
    weighted = [NormScanPoint(p.eta, p.norm, p.loss, smoothed_loss=p.loss, stderr=k * p.loss) for p in pts]
    for constrain in (False, True):
        ols = fit_loss_vs_norm(pts, 11.765, constrain=constrain)
        wls = fit_loss_vs_norm(weighted, 11.765, constrain=constrain, smoothed=True)
        np.testing.assert_allclose(wls.coeffs, ols.coeffs, rtol=1e-10, atol=1e-12)


def planted_optima(alpha, beta, gamma, noise=0.0, rng=None):
    Bs, Ds, etas = [], [], []
    for b in (4, 8, 16, 32, 64):
        for d in (2**10, 2**11, 2**12, 2**13, 2**14):
            eta = 2.0 ** (alpha * math.log2(b) + beta * math.log2(d) + gamma)
            if noise:
                eta *= 1.0 + rng.normal(0.0, noise)
            Bs.append(b), Ds.append(d), etas.append(eta)
    return etas, Bs, Ds


def test_regression_noiseless_recovery():
    reg = regress_lr_bs_horizon(*planted_optima(0.62, -0.56, 1.3))
    np.testing.assert_allclose(reg.coeffs, (0.62, -0.56, 1.3), atol=1e-9)
    assert np.abs(reg.residuals).max() <= 1e-9


def test_regression_stderr_is_calibrated():
    rng = make_rng(5)
    within = np.zeros(2)
    trials = 400
    for _ in range(trials):
        reg = regress_lr_bs_horizon(*planted_optima(0.62, -0.56, 1.3, noise=0.05, rng=rng))
        within += np.abs(np.array(reg.coeffs[:2]) - (0.62, -0.56)) <= np.array(reg.stderr[:2])
    # one-sigma intervals should hold about 68% of the time
    assert np.all((within / trials > 0.6) & (within / trials < 0.76))


def test_regression_errors():
    with pytest.raises(FitError):
        regress_lr_bs_horizon([0.1, 0.2, 0.3, 0.4], [8] * 4, [1, 2, 4, 8])
    with pytest.raises(FitError):
        regress_lr_bs_horizon([0.1, 0.2, 0.3], [4, 8, 16], [1, 2, 4])


def test_heuristic_fit_matches_free_fit_on_heuristic_data():
    data = planted_optima(*HEURISTIC_SLOPES, -2.5)
    free = regress_lr_bs_horizon(*data)
    fixed = regress_lr_bs_horizon(*data, fixed_slopes=HEURISTIC_SLOPES)
    assert fixed.coeffs[2] == pytest.approx(free.coeffs[2], abs=1e-9)
    assert fixed.coeffs[2] == pytest.approx(-2.5, abs=1e-9)
    assert np.abs(fixed.residuals).max() <= 1e-9


def test_power_law_exact_and_noisy():
    D = 2.0 ** np.arange(10, 19)
    fit = fit_power_law(D, 2.0 * D**0.5)
    assert fit.coeffs[1] == pytest.approx(0.5, abs=1e-9)
    assert fit.coeffs[0] == pytest.approx(2.0, rel=1e-9)
    rng = make_rng(9)
    D = 2.0 ** np.arange(30, 39)
    hits = sum(abs(fit_power_law(D, 0.1 * D**0.45 * (1 + rng.normal(0, 0.1, D.size))).coeffs[1] - 0.45) <= 0.1
               for _ in range(200))
    assert hits == 200
    with pytest.raises(FitError):
        fit_power_law([1.0, 2.0, 4.0], [1.0, -1.0, 2.0])
    with pytest.raises(FitError):
        fit_power_law([1.0, 2.0], [1.0, 2.0])


def test_composed_exponent():
    assert composed_lr_exponent(0.62, -0.56, 0.45) == pytest.approx(-0.281, abs=1e-12)
    assert round(composed_lr_exponent(0.62, -0.56, 0.45), 2) == -0.28


def test_first_entry_cases():
    tokens = [1, 2, 4, 8]
    assert first_entry(tokens, 2.0 ** np.array([5.0, 6.0, 7.0, 7.5])) == (4, None)
    assert first_entry(tokens, 2.0 ** np.array([5.0, 5.5, 6.0, 6.5])) == (None, "never reached band")
    assert first_entry(tokens, 2.0 ** np.array([6.0, 6.5, 7.5, 8.0]))[1] == "jumped over band between evaluations"
    assert DEFAULT_BAND == (6.8, 7.2)


def test_reach_set_recovers_planted_first_horizon():
    # norms grow as log2 n = log2 eta - 1.5 log2 B + log2 D - 3, so the band
    # centre is hit at log2 D = 10 - log2 eta + 1.5 log2 B
    runs, expected = [], []
    for i, (log2_eta, B) in enumerate([(-3, 4), (-2, 4), (-3, 16), (-1, 16), (-2, 64), (-4, 8)]):
        d_first = 10 - log2_eta + 1.5 * math.log2(B)
        tokens = 2.0 ** np.arange(4, 40)
        norms = 2.0 ** (7.0 - d_first + np.log2(tokens))
        runs.append(NormTrajectory(f"r{i}", 2.0**log2_eta, B, tokens, norms))
        if d_first == int(d_first):
            expected.append((2.0**log2_eta, B, 2 ** int(d_first)))
    runs.append(NormTrajectory("flat", 0.01, 4, np.array([1, 2, 4]), np.array([2.0, 3.0, 4.0])))
    res = norm_reach_set(runs)
    assert res.points == expected
    # the last planted run crosses the band between two evaluations
    assert res.excluded == [("r5", "jumped over band between evaluations"), ("flat", "never reached band")]
    assert res.heuristic.coeffs[:2] == HEURISTIC_SLOPES
    assert res.free is not None
