import math

import numpy as np
import pytest

import oracles
from ionlattice.estimation import (
    EstimationError,
    SchemaError,
    TimeSeries,
    UndersampledError,
    _sine_jacobian,
    exchange_model,
    exchange_model_jacobian,
    fit_exchange,
    fit_multisine,
    read_series_csv,
    sine_model,
    spectral_peak,
    total_excitation_residuals,
    write_series_csv,
)
from ionlattice.optimize import numerical_jacobian
from support import khz, series

T = np.linspace(0.0, 1000e-6, 51)


def exchange_pair(rate, kappa, tau, n_tot, t=T, offset=0.0, phase=0.0, sem=None, seed=None):
    gamma = 0.0 if math.isinf(tau) else 1.0 / tau
    n1 = exchange_model(t, rate, kappa * n_tot, gamma, phase, offset)
    n0 = n_tot - n1
    if seed is not None:
        rng = np.random.default_rng(seed)
        n0 = n0 + rng.normal(0, sem, t.size)
        n1 = n1 + rng.normal(0, sem, t.size)
    s = None if sem is None else np.full(t.size, sem)
    return series(0, t, n0, s), series(1, t, n1, s)


def test_noiseless_recovery():
    rate = khz(oracles.FIG2["rate_khz"])
    fit = fit_exchange(exchange_pair(rate, 0.9, 800e-6, 2202.0), 2202.0)
    assert fit.rate == pytest.approx(rate, rel=1e-8)
    assert fit.efficiency == pytest.approx(0.9, rel=1e-8)
    assert fit.tau == pytest.approx(800e-6, rel=1e-8)
    assert fit.reduced_chi2 < 1e-12


def test_fixed_tau_and_no_decay():
    rate = khz(2.5)
    fit = fit_exchange(exchange_pair(rate, 0.7, math.inf, 1000.0), 1000.0, tau=math.inf)
    assert fit.tau == math.inf and fit.gamma == 0.0
    assert fit.rate == pytest.approx(rate, rel=1e-8)
    assert fit.uncertainties["tau"] == 0.0
    assert "gamma" not in fit.active_bounds


@pytest.mark.parametrize("name", ["FIG2", "FIG3"])
def test_recovery_under_quoted_noise(name):
    ref = getattr(oracles, name)
    rate, kappa, tau = khz(ref["rate_khz"]), ref["efficiency"], ref["tau_us"] * 1e-6
    n_tot = ref.get("n_tot", ref.get("stage1_nbar"))
    pulls = []
    for seed in range(8):
        pair = exchange_pair(rate, kappa, tau, n_tot, sem=0.026 * n_tot / 2, seed=seed)
        fit = fit_exchange(pair, n_tot)
        u = fit.uncertainties
        pulls += [(fit.rate - rate) / u["rate"], (fit.efficiency - kappa) / u["efficiency"],
                  (fit.tau - tau) / u["tau"]]
        assert abs(fit.rate - rate) < khz(oracles.RATE_TOL_KHZ)
        assert abs(fit.efficiency - kappa) < oracles.EFFICIENCY_TOL
        assert abs(fit.tau / tau - 1) < oracles.TAU_REL_TOL
    pulls = np.array(pulls)
    assert np.max(np.abs(pulls)) < 4.0
    assert 0.5 < np.std(pulls) < 1.6


def test_scaling_invariance():
    rate = khz(1.92)
    base = exchange_pair(rate, 0.8, 600e-6, 1000.0, sem=20.0, seed=2)
    scaled = tuple(TimeSeries(s.site, s.times, 10 * s.nbar, 10 * s.sem) for s in base)
    a = fit_exchange(base, 1000.0)
    b = fit_exchange(scaled, 10000.0)
    assert b.rate == pytest.approx(a.rate, rel=1e-7)
    assert b.efficiency == pytest.approx(a.efficiency, rel=1e-7)
    assert b.amplitude == pytest.approx(10 * a.amplitude, rel=1e-7)
    assert b.tau == pytest.approx(a.tau, rel=1e-6)


def test_offset_is_receiver_start_value():
    fit = fit_exchange(exchange_pair(khz(2.0), 0.8, 700e-6, 1000.0, offset=25.0), 1000.0)
    assert fit.offset == pytest.approx(25.0, abs=1e-6)
    n0, n1 = fit.curves(np.array([0.0]))
    assert n1[0] == pytest.approx(25.0, abs=1e-6)
    assert n0[0] + n1[0] == pytest.approx(1000.0)


def test_baseline_enters_efficiency_only():
    pair = exchange_pair(khz(2.0), 0.8, math.inf, 1000.0)
    fit = fit_exchange(pair, 1000.0, tau=math.inf, baseline=200.0)
    assert fit.amplitude == pytest.approx(800.0, rel=1e-8)
    assert fit.efficiency == pytest.approx(1.0, rel=1e-8)
    with pytest.raises(ValueError):
        fit_exchange(pair, 1000.0, baseline=1000.0)


def test_bootstrap_uncertainties_close_to_curvature():
    pair = exchange_pair(khz(1.92), 0.9, 800e-6, 2202.0, sem=29.0, seed=5)
    curv = fit_exchange(pair, 2202.0)
    boot = fit_exchange(pair, 2202.0, bootstrap=40, seed=1)
    assert boot.rate == curv.rate
    assert 0.3 < boot.uncertainties["rate"] / curv.uncertainties["rate"] < 3.0


def test_model_jacobians_match_finite_differences():
    t = np.linspace(0, 800e-6, 40)
    p = np.array([khz(1.7), 900.0, 1.3e3, 0.4, 12.0])
    for model, jac in ((exchange_model, exchange_model_jacobian), (sine_model, _sine_jacobian)):
        num = numerical_jacobian(lambda q: model(t, *q), p)
        ana = jac(t, *p)
        scale = np.maximum(np.abs(ana).max(axis=0), 1e-300)
        assert np.max(np.abs(num - ana) / scale) < 1e-6


def test_spectral_peak_finds_frequency():
    t = np.linspace(0, 2e-3, 200)
    w = khz(3.1)
    assert spectral_peak(t, np.cos(w * t)) == pytest.approx(w, rel=0.02)


def test_undersampled_inputs():
    rate = khz(2.0)
    short = exchange_pair(rate, 0.9, math.inf, 1000.0, t=np.linspace(0, 300e-6, 7))
    with pytest.raises(UndersampledError):
        fit_exchange(short, 1000.0)
    quarter = exchange_pair(rate, 0.9, math.inf, 1000.0, t=np.linspace(0, 100e-6, 12))
    with pytest.raises(UndersampledError):
        fit_exchange(quarter, 1000.0, tau=math.inf)


def test_pair_validation():
    a, b = exchange_pair(khz(2.0), 0.9, math.inf, 1000.0)
    with pytest.raises(ValueError):
        fit_exchange((a,), 1000.0)
    other = series(1, T[:-1], b.nbar[:-1])
    with pytest.raises(ValueError):
        fit_exchange((a, other), 1000.0)
    with pytest.raises(ValueError):
        TimeSeries(0, [0.0, 0.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        TimeSeries(0, [0.0, 1.0], [1.0, 2.0], [-1.0, 0.0])


def test_estimation_error_carries_diagnostics():
    err = EstimationError("x", {"a": 1})
    assert err.diagnostics == {"a": 1}
    assert issubclass(UndersampledError, EstimationError)


def test_multisine_single_component_agrees_with_exchange_fit():
    rate = khz(2.0)
    pair = exchange_pair(rate, 0.8, 700e-6, 1000.0)
    ex = fit_exchange(pair, 1000.0)
    ms = fit_multisine([pair[1]])
    c = ms.components[0]
    assert c.frequency == pytest.approx(ex.rate, rel=1e-7)
    assert c.amplitude == pytest.approx(ex.amplitude, rel=1e-7)
    assert ms.tau[0] == pytest.approx(ex.tau, rel=1e-6)
    assert abs(math.remainder(c.phase - ex.phase - math.pi, 2 * math.pi)) < 1e-6


def test_multisine_independent_frequencies():
    t = np.linspace(0, 1.5e-3, 61)
    truth = [(khz(2.09), 470.0, 0.3), (khz(1.80), 381.0, -1.0), (khz(2.02), 447.0, 2.0)]
    data = [series(k, t, sine_model(t, f, a, 1 / 900e-6, ph, 500.0)) for k, (f, a, ph) in enumerate(truth)]
    ms = fit_multisine(data)
    assert np.allclose(ms.frequencies, [f for f, _, _ in truth], rtol=1e-8)
    assert ms.tau[0] == pytest.approx(900e-6, rel=1e-7)
    ind = fit_multisine(data, shared_decay=False)
    assert np.allclose(ind.tau, 900e-6, rtol=1e-6)
    assert np.allclose(ms.curve(1, t), data[1].nbar, atol=1e-6)
    assert fit_multisine(data, n_components=2).components.__len__() == 2
    with pytest.raises(ValueError):
        fit_multisine(data, n_components=4)


def test_multisine_flags_flat_series():
    t = np.linspace(0, 1e-3, 30)
    flat = series(2, t, np.full(t.size, 4.0))
    live = series(0, t, sine_model(t, khz(2.0), 400.0, 1e3, 0.0, 500.0))
    ms = fit_multisine([live, flat])
    assert ms.components[1].identifiable is False
    assert ms.components[1].amplitude == 0.0
    assert np.all(ms.curve(1, t) == 4.0)
    assert ms.components[0].identifiable
    # scatter within its error bars is flat as well
    rng = np.random.default_rng(0)
    noisy = series(2, t, 4.0 + rng.normal(0, 1.0, t.size), np.ones(t.size))
    assert fit_multisine([noisy]).components[0].identifiable is False


def test_conserved_data_have_zero_residual():
    pair = exchange_pair(khz(2.0), 0.9, 500e-6, 1000.0)
    r = total_excitation_residuals(pair)
    assert r.site == -1
    assert np.max(np.abs(r.nbar)) < 1e-9


def test_linear_heating_gives_linear_residual():
    h = 2e4  # quanta per second
    pair = exchange_pair(khz(2.0), 0.9, 500e-6, 1000.0)
    heated = [TimeSeries(s.site, s.times, s.nbar + h * s.times, np.full(T.size, 3.0)) for s in pair]
    r = total_excitation_residuals(heated)
    assert np.allclose(r.nbar, 2 * h * (T - T.mean()), atol=1e-9)
    assert np.allclose(r.sem, 3.0 * math.sqrt(2))
    with pytest.raises(ValueError):
        total_excitation_residuals([heated[0], series(1, T + 1e-6, heated[1].nbar)])


def test_csv_round_trip_is_lossless(tmp_path):
    pair = exchange_pair(khz(1.92), 0.9, 800e-6, 2202.0, sem=29.0, seed=3)
    path = tmp_path / "series.csv"
    write_series_csv(path, pair)
    back = read_series_csv(path)
    for s in pair:
        b = back[s.site]
        assert np.allclose(b.times, s.times, rtol=1e-15, atol=0)
        assert np.array_equal(b.nbar, s.nbar)
        assert np.array_equal(b.sem, s.sem)
    assert path.read_text().splitlines()[0] == "time_us,site,nbar,sem"


@pytest.mark.parametrize("body, row", [
    ("time_us,site,nbar,sem\n0,0,1,0\n1,0,2\n", 3),
    ("time_us,site,nbar,sem\n0,0,1,0\n1,x,2,0\n", 3),
    ("time_us,site,nbar,sem\n0,0,1,0\n1,0,nan,0\n", 3),
    ("time_us,site,nbar,sem\n0,0,1,-1\n", 2),
    ("t,site,nbar,sem\n", 1),
])
def test_csv_schema_errors_name_the_row(tmp_path, body, row):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(SchemaError, match=f"row {row}"):
        read_series_csv(path)


def test_csv_duplicate_times_rejected(tmp_path):
    path = tmp_path / "dup.csv"
    path.write_text("time_us,site,nbar,sem\n0,0,1,0\n0,0,2,0\n")
    with pytest.raises(SchemaError, match="site 0"):
        read_series_csv(path)
