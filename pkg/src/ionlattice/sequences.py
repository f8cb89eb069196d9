"""Built-in experiment templates.

Each template turns a flat dict of parameters in lab units (us, kHz, MHz,
quanta) into a :class:`~ionlattice.protocol.Sequence`. The exchange
parameters are *effective* values, meaning what a fit to the simulated data
should return. The underlying site geometry, detuning and noise strength
are calibrated numerically so that this holds, and each calibration is
cached per parameter set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import brentq

from .dynamics import (
    LatticeState,
    NoiseModel,
    calibrate_dephasing,
    calibrate_effective_exchange,
    propagate_batch,
)
from .lattice import (
    TWO_PI,
    IonSpecies,
    LatticeConfig,
    TrapSite,
    build_coupling_matrix,
    centre_pointing_angles,
    distance_for_rate,
    triangle_positions,
)
from .protocol import Cool, Detect, Excite, Hold, RampAngle, RampFrequency, Sequence, run
from .protocol import compile as compile_sequence

CALIBRATION_SEED = 20250101


@dataclass(frozen=True)
class Template:
    """A parameterised protocol.

    ``sweep`` names the parameter scanned by default over ``sweep_range``
    (start, stop, step). Records of the Detect segment labelled
    ``final_label`` form the time series; ``fit_sites`` are the site ids fitted
    (source first for the exchange model). ``reference`` holds the values a
    fit is expected to reproduce, keyed like the fit report.
    """

    name: str
    summary: str
    defaults: Mapping[str, float]
    sweep: str
    sweep_range: tuple[float, float, float]
    fit: str
    fit_sites: tuple[int, ...]
    builder: Callable[[dict], Sequence] = field(repr=False)
    reference: Mapping[str, float] = field(default_factory=dict)
    final_label: str = "final"

    def params(self, **overrides) -> dict:
        unknown = set(overrides) - set(self.defaults)
        if unknown:
            raise KeyError(f"{self.name}: unknown parameter(s) {sorted(unknown)}; "
                           f"known: {sorted(self.defaults)}")
        p = dict(self.defaults)
        p.update({k: float(v) if not isinstance(v, bool) else v for k, v in overrides.items()})
        return p

    def build(self, **overrides) -> Sequence:
        return self.builder(self.params(**overrides))

    def sweep_values(self, start=None, stop=None, step=None) -> np.ndarray:
        a, b, s = self.sweep_range
        return sweep_grid(a if start is None else start, b if stop is None else stop,
                          s if step is None else step)


def sweep_grid(start: float, stop: float, step: float) -> np.ndarray:
    """Inclusive grid; ``start == stop`` gives a single point."""
    if stop < start:
        raise ValueError("sweep stop must not precede start")
    if start == stop:
        return np.array([float(start)])
    if not step > 0:
        raise ValueError("sweep step must be positive")
    n = int(math.floor((stop - start) / step + 1e-9))
    return start + step * np.arange(n + 1)


def _species():
    return IonSpecies.magnesium24()


def _khz(x):
    return TWO_PI * 1e3 * x


def _noise(p, sigma=0.0):
    return NoiseModel(dephasing_sigma=sigma, dephasing_corr_time=p["corr_time_us"] * 1e-6,
                      heating_rate=p["heating_per_ms"] * 1e3, detection_noise=p["detection_noise"])


def _pair_dressing(w1, park, t_tune):
    """Ramp unitaries of a pair whose source is tuned up from ``w1 - park`` to ``w1 - delta``."""

    def dressing(om, de):
        w0 = w1 - de
        d = distance_for_rate(_species(), om, math.sqrt(w0 * w1))
        lattice = LatticeConfig(_species(), (TrapSite(0, (0.0, 0.0), w1 - park), TrapSite(1, (d, 0.0), w1)))
        tl = compile_sequence(Sequence([Cool(), RampFrequency(0, w0, t_tune), Detect((0,)),
                                        RampFrequency(0, w1 - park, t_tune), Detect((0, 1))],
                                       lattice, reference_frequency=w1))
        eye, zero = np.eye(2, dtype=complex), np.zeros((2, 2))

        def ramp(ta, tb):
            beta, _ = propagate_batch(eye, zero, ta, tb, tl.matrix_at, static=False, dt_max=t_tune / 400)
            return beta.T

        # the hold has coupling g e^{i psi}; D maps it onto the real two_site form
        g = tl.matrix_at(t_tune)[0, 1]
        dmat = np.diag([1.0, abs(g) / g])
        return dmat.conj().T @ ramp(0.0, t_tune), ramp(t_tune, 2 * t_tune) @ dmat

    return dressing


@lru_cache(maxsize=32)
def _pair_calibration(rate_khz, efficiency, tau_us, corr_time_us, n_source, cool, detection,
                      t_stop_us, t_step_us, w1, park, t_tune):
    """(omega_res, delta_omega, sigma) reproducing the fitted effective exchange.

    The source is tuned from ``w1 - park`` to the coupling point in ``t_tune``
    and back; those ramps are part of the calibrated response.
    """
    rate = _khz(rate_khz)
    if math.isinf(tau_us):
        return math.sqrt(efficiency) * rate, math.sqrt(1.0 - efficiency) * rate, 0.0
    times = sweep_grid(0.0, t_stop_us, t_step_us) * 1e-6
    cal = calibrate_effective_exchange(
        rate, efficiency, tau_us * 1e-6, times,
        NoiseModel(dephasing_corr_time=corr_time_us * 1e-6, rng_seed=CALIBRATION_SEED),
        n_source=n_source, thermal=(cool, cool), detection_noise=detection,
        dressing=_pair_dressing(w1, park, t_tune))
    return cal.omega_res, cal.delta_omega, cal.noise.dephasing_sigma


# -- fig2: two-site exchange -------------------------------------------------

FIG2_DEFAULTS = {
    "n_initial": 2202.0, "omega_mhz": 4.0, "rate_khz": 1.92, "efficiency": 0.46, "tau_us": 800.0,
    "corr_time_us": 100.0, "t_tune_us": 10.0, "t_hold_us": 0.0, "park_khz": 100.0,
    "cool_nbar": 20.0, "detection_noise": 0.45, "heating_per_ms": 0.0,
}


def _fig2(p) -> Sequence:
    omega = TWO_PI * 1e6 * p["omega_mhz"]
    # park below the coupling point: a ramp that swept through the
    # resonance would mix the sites with a hold-dependent phase
    parked = omega - _khz(p["park_khz"])
    om, de, sigma = _pair_calibration(p["rate_khz"], p["efficiency"], p["tau_us"], p["corr_time_us"],
                                      p["n_initial"], p["cool_nbar"], p["detection_noise"], 1200.0, 20.0,
                                      omega, _khz(p["park_khz"]), p["t_tune_us"] * 1e-6)
    w0 = omega - de
    d = distance_for_rate(_species(), om, math.sqrt(omega * w0))
    lattice = LatticeConfig(_species(), (
        TrapSite(0, (0.0, 0.0), parked),
        TrapSite(1, (d, 0.0), omega),
    ))
    tt = p["t_tune_us"] * 1e-6
    segs = [
        Cool(p["cool_nbar"]),
        Excite(0, p["n_initial"]),
        RampFrequency(0, w0, tt),
        Hold(p["t_hold_us"] * 1e-6),
        RampFrequency(0, parked, tt),
        Detect((0, 1), "final"),
    ]
    return Sequence(segs, lattice, _noise(p, sigma), reference_frequency=omega)


# -- fig3: transfer, rotate, couple -------------------------------------------

FIG3_DEFAULTS = {
    "n_initial": 6880.0, "stage1_nbar": 1060.0, "t_stage1_us": 100.0, "t_rotate_us": 100.0,
    "omega_mhz": 4.0, "rate_khz": 3.09, "efficiency": 0.33, "tau_us": 380.0, "corr_time_us": 100.0,
    "t_tune_us": 10.0, "t_hold_us": 0.0, "park_khz": 100.0, "cool_nbar": 20.0,
    "detection_noise": 0.45, "heating_per_ms": 0.0,
}


def _fig3_lattice(omega, park, d01, d02):
    c, s = math.cos(math.pi / 3), math.sin(math.pi / 3)
    return LatticeConfig(_species(), (
        TrapSite(0, (0.0, 0.0), omega + park, mode_angle=math.pi / 3),
        TrapSite(1, (d01, 0.0), omega + 2 * park),
        TrapSite(2, (d02 * c, d02 * s), omega, mode_angle=math.pi / 3),
    ))


def _fig3_stage1(lattice, omega, park, p):
    tt = p["t_tune_us"] * 1e-6
    return [
        Cool(p["cool_nbar"]),
        Excite(2, p["n_initial"]),
        RampFrequency(0, omega, tt),
        Hold(p["t_stage1_us"] * 1e-6),
        RampFrequency(0, omega + park, tt),
        Detect((0, 2), "stage1"),
    ]


@lru_cache(maxsize=32)
def _fig3_geometry(omega, park, d01, n_initial, stage1_nbar, t_stage1_us, t_tune_us, cool,
                   sigma=0.0, corr_time_us=100.0, repetitions=1000):
    """Distance T0-T2 whose stage 1 leaves ``stage1_nbar`` detected at T0 on average.

    The dephasing noise of the run is included (common random numbers), since
    it lowers the mean transfer slightly.
    """
    p = {"n_initial": n_initial, "t_stage1_us": t_stage1_us, "t_tune_us": t_tune_us, "cool_nbar": cool}
    noise = NoiseModel(dephasing_sigma=sigma, dephasing_corr_time=corr_time_us * 1e-6,
                       rng_seed=CALIBRATION_SEED)
    reps = repetitions if sigma > 0 else 1

    def transferred(rate):
        d02 = distance_for_rate(_species(), rate, omega)
        lattice = _fig3_lattice(omega, park, d01, d02)
        recs = run(Sequence(_fig3_stage1(lattice, omega, park, p), lattice, noise, reference_frequency=omega),
                   repetitions=reps)
        return recs[0].nbar - stage1_nbar

    # first rise of the resonant transfer: n0 = N sin^2(Omega t / 2) up to Omega t = pi
    t_eff = (t_stage1_us + t_tune_us) * 1e-6
    hi = 0.999 * math.pi / t_eff
    lo = 1e-3 * hi
    if transferred(hi) < 0:
        raise ValueError("stage-1 target exceeds the first transfer maximum")
    rate = brentq(transferred, lo, hi, xtol=1e-12, rtol=1e-12)
    return distance_for_rate(_species(), rate, omega)


def _fig3(p) -> Sequence:
    omega = TWO_PI * 1e6 * p["omega_mhz"]
    park = _khz(p["park_khz"])
    w1 = omega + 2 * park
    om, de, sigma = _pair_calibration(p["rate_khz"], p["efficiency"], p["tau_us"], p["corr_time_us"],
                                      p["stage1_nbar"] - p["cool_nbar"], p["cool_nbar"],
                                      p["detection_noise"], 1000.0, 20.0,
                                      w1, park, p["t_tune_us"] * 1e-6)
    w0 = w1 - de
    d01 = distance_for_rate(_species(), om, math.sqrt(w0 * w1))
    d02 = _fig3_geometry(omega, park, d01, p["n_initial"], p["stage1_nbar"], p["t_stage1_us"],
                         p["t_tune_us"], p["cool_nbar"], sigma, p["corr_time_us"])
    lattice = _fig3_lattice(omega, park, d01, d02)
    tt = p["t_tune_us"] * 1e-6
    segs = _fig3_stage1(lattice, omega, park, p) + [
        RampAngle(0, 0.0, p["t_rotate_us"] * 1e-6),
        Detect((0,), "rotated"),
        RampFrequency(0, w0, tt),
        Hold(p["t_hold_us"] * 1e-6),
        RampFrequency(0, omega + park, tt),
        Detect((0, 1), "final"),
    ]
    return Sequence(segs, lattice, _noise(p, sigma), reference_frequency=omega)


# -- fig4: simultaneous coupling of three sites --------------------------------

FIG4_SINGLE_DEFAULTS = {
    "n_initial": 1500.0, "omega_mhz": 4.0, "frequency_khz": 2.0, "tau_us": 800.0,
    "corr_time_us": 100.0, "t_tune_us": 10.0, "t_rotate_us": 100.0, "t_hold_us": 0.0,
    "park_khz": 100.0, "cool_nbar": 20.0, "detection_noise": 0.45, "heating_per_ms": 0.0,
}

FIG4_DOUBLE_DEFAULTS = {
    "n_t2": 1000.0, "n_t0": 1000.0, "phase_offset": math.pi / 2, "delay_us": 20.0,
    "omega_mhz": 4.0, "frequency_khz": 2.0, "tau_us": math.inf, "corr_time_us": 100.0,
    "t_tune_us": 10.0, "t_rotate_us": 100.0, "t_hold_us": 0.0, "park_khz": 100.0,
    "cool_nbar": 20.0, "detection_noise": 0.45, "heating_per_ms": 0.0,
}


def _triangle(omega, park, frequency_khz):
    # centre-pointing modes give every pair 7/8 of the resonant rate; the
    # site populations then oscillate at 3|g| = (21/16) omega_res
    omega_res = _khz(frequency_khz) * 16.0 / 21.0
    side = distance_for_rate(_species(), omega_res, omega)
    pos = triangle_positions(side)
    freqs = (omega + park, omega + 2 * park, omega)
    lattice = LatticeConfig(_species(), tuple(TrapSite(k, pos[k], freqs[k]) for k in range(3)))
    return lattice, centre_pointing_angles(lattice)


@lru_cache(maxsize=32)
def _triangle_sigma(omega, frequency_khz, tau_us, corr_time_us):
    if math.isinf(tau_us):
        return 0.0
    lattice, angles = _triangle(omega, 0.0, frequency_khz)
    for k in range(3):
        lattice = lattice.replace_site(k, mode_angle=angles[k], mode_frequency=omega)
    matrix = build_coupling_matrix(lattice, omega)
    times = sweep_grid(0.0, 1000.0, 10.0) * 1e-6
    noise = NoiseModel(dephasing_corr_time=corr_time_us * 1e-6, rng_seed=CALIBRATION_SEED)
    cal = calibrate_dephasing(matrix, LatticeState.from_nbar([0.0, 0.0, 1.0]), tau_us * 1e-6, noise,
                              times, n_samples=1000, site=2)
    return cal.dephasing_sigma


def _fig4_common(p, excitations):
    omega = TWO_PI * 1e6 * p["omega_mhz"]
    park = _khz(p["park_khz"])
    lattice, angles = _triangle(omega, park, p["frequency_khz"])
    sigma = _triangle_sigma(omega, p["frequency_khz"], p["tau_us"], p["corr_time_us"])
    tt = p["t_tune_us"] * 1e-6
    tr = p["t_rotate_us"] * 1e-6
    segs = [
        Cool(p["cool_nbar"]),
        RampAngle(0, angles[0], tr),
        RampAngle(1, angles[1], tr, concurrent=True),
        RampAngle(2, angles[2], tr, concurrent=True),
        # T1 joins T0's parking frequency so both approach T2 identically
        RampFrequency(1, omega + park, tt),
        *excitations,
        RampFrequency(0, omega, tt),
        RampFrequency(1, omega, tt, concurrent=True),
        Hold(p["t_hold_us"] * 1e-6),
        RampFrequency(0, omega + park, tt),
        RampFrequency(1, omega + park, tt, concurrent=True),
        Detect((0, 1, 2), "final"),
    ]
    return Sequence(segs, lattice, _noise(p, sigma), reference_frequency=omega)


def _fig4_single(p) -> Sequence:
    return _fig4_common(p, [Excite(2, p["n_initial"])])


def _fig4_double(p) -> Sequence:
    return _fig4_common(p, [
        Excite(2, p["n_t2"]),
        Hold(p["delay_us"] * 1e-6),
        Excite(0, p["n_t0"], p["phase_offset"]),
    ])


def builtin_sequences() -> dict[str, Template]:
    """Named templates: ``fig2``, ``fig3``, ``fig4_single`` and ``fig4_double``."""
    return {
        "fig2": Template(
            "fig2", "two-site exchange T0 -> T1 for a variable coupling time",
            FIG2_DEFAULTS, "t_hold_us", (0.0, 1200.0, 20.0), "exchange", (0, 1), _fig2,
            {"rate_khz": 1.92, "efficiency": 0.46, "tau_us": 800.0}),
        "fig3": Template(
            "fig3", "transfer T2 -> T0, rotate the T0 mode, then exchange T0 -> T1",
            FIG3_DEFAULTS, "t_hold_us", (0.0, 1000.0, 20.0), "exchange", (0, 1), _fig3,
            {"rate_khz": 3.09, "efficiency": 0.33, "tau_us": 380.0, "stage1_nbar": 1060.0}),
        "fig4_single": Template(
            "fig4_single", "excite T2, couple all three sites simultaneously",
            FIG4_SINGLE_DEFAULTS, "t_hold_us", (0.0, 1000.0, 10.0), "multisine", (0, 1, 2),
            _fig4_single, {"frequency_khz": 2.0, "tau_us": 800.0, "transferred": 1330.0}),
        "fig4_double": Template(
            "fig4_double", "excite T2 and T0 with a phase offset, couple all three sites",
            FIG4_DOUBLE_DEFAULTS, "t_hold_us", (0.0, 1000.0, 10.0), "multisine", (0, 1, 2),
            _fig4_double, {"frequency_khz": 2.0}),
    }
