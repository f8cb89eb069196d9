"""Damped-sinusoid exchange fits, multi-site sine fits and conservation residuals.

Times are in seconds and excitations in quanta throughout; the CSV helpers
convert to and from the microsecond column used on disk.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optimize import ConvergenceError, minimize

N_STARTS = 16
START_SPAN = (0.2, 5.0)
CSV_HEADER = ("time_us", "site", "nbar", "sem")


class EstimationError(RuntimeError):
    """A fit could not be produced; ``diagnostics`` says why."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndersampledError(EstimationError):
    pass


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeries:
    site: int
    times: np.ndarray
    nbar: np.ndarray
    sem: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.times, float)
        y = np.asarray(self.nbar, float)
        s = np.zeros_like(y) if self.sem is None else np.asarray(self.sem, float)
        if not (t.shape == y.shape == s.shape) or t.ndim != 1:
            raise ValueError("times, nbar and sem must be 1-d arrays of equal length")
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"site {self.site}: times must be strictly increasing")
        if np.any(s < 0):
            raise ValueError(f"site {self.site}: sem must be non-negative")
        for name, arr in (("times", t), ("nbar", y), ("sem", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.times.size

    @property
    def span(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0


def _weights(sem: np.ndarray) -> np.ndarray:
    """Inverse standard errors; zero-sem samples get the median weight.

    An sem at round-off level relative to the largest one counts as zero.
    """
    sem = np.asarray(sem, float)
    pos = sem > 1e-9 * sem.max(initial=0.0)
    if not np.any(pos):
        return np.ones_like(sem)
    w = np.empty_like(sem)
    w[pos] = 1.0 / sem[pos]
    w[~pos] = np.median(w[pos])
    return w


def spectral_peak(times: np.ndarray, values: np.ndarray) -> float:
    """Angular frequency of the strongest component of ``values`` (direct DFT)."""
    t = np.asarray(times, float)
    y = np.asarray(values, float) - np.mean(values)
    span = t[-1] - t[0]
    dt = np.min(np.diff(t))
    grid = np.linspace(math.pi / (2 * span), math.pi / dt, 4 * t.size + 64)
    power = np.abs(np.exp(-1j * np.outer(grid, t)) @ y) ** 2
    return float(grid[np.argmax(power)])


def exchange_model(t, rate, amplitude, gamma, phase, offset):
    """Excitation at the receiving site: ``offset + A (1 - cos(rate t + phase) e^(-gamma t)) / 2``."""
    t = np.asarray(t, float)
    return offset + 0.5 * amplitude * (1.0 - np.cos(rate * t + phase) * np.exp(-gamma * t))


def exchange_model_jacobian(t, rate, amplitude, gamma, phase, offset):
    """Columns d/d(rate, amplitude, gamma, phase, offset) of :func:`exchange_model`."""
    t = np.asarray(t, float)
    e = np.exp(-gamma * t)
    c = np.cos(rate * t + phase)
    s = np.sin(rate * t + phase)
    return np.column_stack([
        0.5 * amplitude * t * s * e,
        0.5 * (1.0 - c * e),
        0.5 * amplitude * t * c * e,
        0.5 * amplitude * s * e,
        np.ones_like(t),
    ])


@dataclass
class FitResult:
    rate: float
    efficiency: float
    tau: float
    phase: float
    offset: float
    amplitude: float
    n_tot: float
    uncertainties: dict = field(default_factory=dict)
    reduced_chi2: float = float("nan")
    method: str = ""
    active_bounds: tuple = ()

    @property
    def gamma(self) -> float:
        return 0.0 if math.isinf(self.tau) else 1.0 / self.tau

    def curves(self, t):
        """Fitted ``(n0, n1)`` at times ``t``."""
        n1 = exchange_model(t, self.rate, self.amplitude, self.gamma, self.phase, self.offset)
        return self.n_tot - n1, n1

    def to_dict(self) -> dict:
        def clean(v):
            return None if not math.isfinite(v) else v

        return {
            "model": "exchange",
            "rate_khz": self.rate / (2e3 * math.pi),
            "rate_khz_err": clean(self.uncertainties.get("rate", math.nan) / (2e3 * math.pi)),
            "efficiency": self.efficiency,
            "efficiency_err": clean(self.uncertainties.get("efficiency", math.nan)),
            "tau_us": clean(self.tau * 1e6),
            "tau_us_err": clean(self.uncertainties.get("tau", math.nan) * 1e6),
            "phase": self.phase,
            "offset": self.offset,
            "amplitude": self.amplitude,
            "n_tot": self.n_tot,
            "reduced_chi2": clean(self.reduced_chi2),
            "method": self.method,
            "active_bounds": list(self.active_bounds),
        }


def _check_pair(series_pair):
    if len(series_pair) != 2:
        raise ValueError("fit_exchange needs exactly two series (source, receiver)")
    s0, s1 = series_pair
    if len(s1) < 8:
        raise UndersampledError(f"need at least 8 samples, got {len(s1)}")
    if s0.times.shape != s1.times.shape or not np.allclose(s0.times, s1.times, rtol=0, atol=1e-15):
        raise ValueError("the two series must share timestamps")
    return s0, s1


def _covariance(J, dof, chi2):
    try:
        cov = np.linalg.pinv(J.T @ J)
    except np.linalg.LinAlgError:
        return None
    return cov * (chi2 / dof if dof > 0 else 1.0)


def fit_exchange(series_pair, n_tot: float | None = None, *, tau: float | None = None,
                 baseline: float = 0.0, n_starts: int = N_STARTS, bootstrap: int = 0,
                 seed: int = 0) -> FitResult:
    """Joint damped-sinusoid fit of a two-site exchange.

    Parameters
    ----------
    series_pair : (TimeSeries, TimeSeries)
        Source site first, receiving site second, on shared timestamps.
    n_tot : float, optional
        Conserved total excitation; the mean of the summed series if omitted.
    tau : float, optional
        Fix the dephasing time (``np.inf`` disables decay). Free if None.
    baseline : float
        Summed thermal background of both sites. It counts towards ``n_tot``
        in the model but not in the efficiency, ``A / (n_tot - baseline)``.
    bootstrap : int
        If positive, replace curvature uncertainties by the spread of this
        many refits on resampled points.

    Raises
    ------
    UndersampledError
        Fewer than 8 samples, or the fitted oscillation covers less than half
        a period.
    EstimationError
        No start converged.
    """
    s0, s1 = _check_pair(series_pair)
    t = s1.times
    if n_tot is None:
        n_tot = float(np.mean(s0.nbar + s1.nbar))
    if not 0 <= baseline < n_tot:
        raise ValueError("baseline must be non-negative and below n_tot")
    coherent = n_tot - baseline
    w0, w1 = _weights(s0.sem), _weights(s1.sem)
    y0, y1 = s0.nbar, s1.nbar
    free_gamma = tau is None
    gamma_fixed = 0.0 if (tau is None or math.isinf(tau)) else 1.0 / tau

    def unpack(p):
        if free_gamma:
            return p
        return np.array([p[0], p[1], gamma_fixed, p[2], p[3]])

    def residuals(p):
        q = unpack(p)
        m1 = exchange_model(t, *q)
        return np.concatenate([(m1 - y1) * w1, ((n_tot - m1) - y0) * w0])

    def jacobian(p):
        q = unpack(p)
        J = exchange_model_jacobian(t, *q)
        if not free_gamma:
            J = J[:, [0, 1, 3, 4]]
        return np.vstack([J * w1[:, None], -J * w0[:, None]])

    span = s1.span
    amp_hi = coherent
    lo = [0.0, 0.0, 0.0, -np.inf, -np.inf] if free_gamma else [0.0, 0.0, -np.inf, -np.inf]
    hi = [np.inf, amp_hi, np.inf, np.inf, np.inf] if free_gamma else [np.inf, amp_hi, np.inf, np.inf]

    peak = spectral_peak(t, y1 - y0)
    starts = peak * np.geomspace(*START_SPAN, n_starts)
    gamma0 = 1.0 / span if free_gamma else gamma_fixed
    # Linear system in (offset + A/2, A/2 cos(phi), A/2 sin(phi)) at fixed rate and decay.
    ww = np.concatenate([w1, w0])
    target = np.concatenate([y1, n_tot - y0])
    candidates, stalled = [], []
    for rate0 in starts:
        e = np.exp(-gamma0 * t)
        basis = np.column_stack([np.ones_like(t), -e * np.cos(rate0 * t), e * np.sin(rate0 * t)])
        basis = np.vstack([basis, basis])
        coef, *_ = np.linalg.lstsq(basis * ww[:, None], target * ww, rcond=None)
        half = math.hypot(coef[1], coef[2])
        phase0 = math.atan2(coef[2], coef[1])
        amp0 = min(2 * half, amp_hi)
        offset0 = coef[0] - half
        p0 = [rate0, amp0, gamma0, phase0, offset0] if free_gamma else [rate0, amp0, phase0, offset0]
        try:
            res = minimize(residuals, p0, (lo, hi), jacobian, max_iter=300, fallback=False)
        except ConvergenceError as exc:
            stalled.append(exc.best)
            continue
        except ValueError:
            continue
        candidates.append(res)
    if not candidates and stalled:
        # last resort: let the simplex fallback polish the best stalled branch
        start = min(stalled, key=lambda r: r.cost)
        try:
            candidates.append(minimize(residuals, start.x, (lo, hi), jacobian, max_iter=300))
        except ConvergenceError:
            pass
    if not candidates:
        raise EstimationError("no multi-start branch converged",
                              {"spectral_peak_rad_s": peak, "starts": starts.tolist()})

    best_cost = min(c.cost for c in candidates)
    ties = [c for c in candidates if c.cost <= best_cost * (1 + 1e-9) + 1e-300]
    best = min(ties, key=lambda c: c.x[0])
    q = unpack(best.x)
    rate, amp, gamma, phase, offset = q
    if rate * span < math.pi:
        raise UndersampledError(
            f"series spans {span * 1e6:.1f} us, less than half a period at the fitted rate",
            {"rate_rad_s": rate},
        )

    dof = 2 * t.size - best.x.size
    chi2 = 2.0 * best.cost
    names = ["rate", "amplitude", "gamma", "phase", "offset"] if free_gamma else ["rate", "amplitude", "phase", "offset"]
    errs = {n: math.nan for n in names}
    cov = _covariance(jacobian(best.x), dof, chi2)
    if cov is not None:
        errs = dict(zip(names, np.sqrt(np.clip(np.diag(cov), 0, None))))
    if bootstrap > 0:
        errs = _bootstrap_exchange(s0, s1, n_tot, tau, baseline, bootstrap, seed, names)

    tau_fit = math.inf if gamma == 0 else 1.0 / gamma
    unc = {
        "rate": errs["rate"],
        "amplitude": errs["amplitude"],
        "efficiency": errs["amplitude"] / coherent,
        "phase": errs["phase"],
        "offset": errs["offset"],
        "tau": errs["gamma"] / gamma**2 if free_gamma and gamma > 0 else (math.inf if free_gamma else 0.0),
    }
    return FitResult(
        rate=float(rate), efficiency=min(float(amp / coherent), 1.0), tau=tau_fit,
        phase=math.remainder(float(phase), 2 * math.pi), offset=float(offset), amplitude=float(amp),
        n_tot=float(n_tot), uncertainties=unc, reduced_chi2=chi2 / dof if dof > 0 else math.nan,
        method=best.method, active_bounds=tuple(n for n, a in zip(names, best.active_bounds) if a),
    )


def _bootstrap_exchange(s0, s1, n_tot, tau, baseline, n_boot, seed, names):
    rng = np.random.default_rng(seed)
    draws = []
    n = len(s1)
    for _ in range(n_boot):
        idx = np.unique(rng.integers(0, n, n))
        if idx.size < 8:
            continue
        pair = (TimeSeries(s0.site, s0.times[idx], s0.nbar[idx], s0.sem[idx]),
                TimeSeries(s1.site, s1.times[idx], s1.nbar[idx], s1.sem[idx]))
        try:
            r = fit_exchange(pair, n_tot, tau=tau, baseline=baseline)
        except EstimationError:
            continue
        draws.append([r.rate, r.amplitude, r.gamma, r.phase, r.offset])
    draws = np.array(draws)
    if draws.shape[0] < 2:
        return {k: math.nan for k in names}
    sd = draws.std(axis=0, ddof=1)
    full = dict(zip(["rate", "amplitude", "gamma", "phase", "offset"], sd))
    return {k: full[k] for k in names}


@dataclass
class SineComponent:
    site: int
    frequency: float
    amplitude: float
    phase: float
    offset: float
    uncertainties: dict = field(default_factory=dict)
    identifiable: bool = True

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not math.isfinite(v) else v

        return {
            "site": self.site,
            "frequency_khz": clean(self.frequency / (2e3 * math.pi)),
            "frequency_khz_err": clean(self.uncertainties.get("frequency", math.nan) / (2e3 * math.pi)),
            "amplitude_pp": self.amplitude,
            "amplitude_pp_err": clean(self.uncertainties.get("amplitude", math.nan)),
            "phase": self.phase,
            "offset": self.offset,
            "identifiable": self.identifiable,
        }


@dataclass
class MultiSineResult:
    components: list
    decay_rates: np.ndarray
    shared_decay: bool
    reduced_chi2: float

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([c.frequency for c in self.components])

    @property
    def tau(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.decay_rates

    def curve(self, k: int, t):
        c = self.components[k]
        if not c.identifiable:
            return np.full_like(np.asarray(t, float), c.offset)
        g = self.decay_rates[0] if self.shared_decay else self.decay_rates[k]
        return sine_model(t, c.frequency, c.amplitude, g, c.phase, c.offset)

    def to_dict(self) -> dict:
        tau = [None if not math.isfinite(x) else x * 1e6 for x in np.atleast_1d(self.tau)]
        return {
            "model": "multisine",
            "shared_decay": self.shared_decay,
            "tau_us": tau,
            "components": [c.to_dict() for c in self.components],
            "reduced_chi2": None if not math.isfinite(self.reduced_chi2) else self.reduced_chi2,
        }


def sine_model(t, frequency, amplitude, gamma, phase, offset):
    """``offset + (amplitude / 2) cos(frequency t + phase) e^(-gamma t)``; amplitude is peak-to-peak."""
    t = np.asarray(t, float)
    return offset + 0.5 * amplitude * np.cos(frequency * t + phase) * np.exp(-gamma * t)


def _sine_jacobian(t, frequency, amplitude, gamma, phase, offset):
    e = np.exp(-gamma * t)
    c = np.cos(frequency * t + phase)
    s = np.sin(frequency * t + phase)
    return np.column_stack([
        -0.5 * amplitude * t * s * e,
        0.5 * c * e,
        -0.5 * amplitude * t * c * e,
        -0.5 * amplitude * s * e,
        np.ones_like(t),
    ])


def _is_flat(s: TimeSeries) -> bool:
    y = s.nbar
    dev = y - y.mean()
    scale = max(1.0, float(np.abs(y).max()))
    if np.max(np.abs(dev)) <= 1e-9 * scale:
        return True
    if np.all(s.sem > 0) and y.size > 2:
        chi2 = float(np.sum((dev / s.sem) ** 2)) / (y.size - 1)
        return chi2 < 1.0 + 3.0 * math.sqrt(2.0 / (y.size - 1))
    return False


def _fit_single_sine(s: TimeSeries, n_starts: int):
    t, y, w = s.times, s.nbar, _weights(s.sem)
    peak = spectral_peak(t, y)
    gamma0 = 1.0 / s.span

    def res(p):
        return (sine_model(t, *p) - y) * w

    def jac(p):
        return _sine_jacobian(t, *p) * w[:, None]

    best = None
    stalled = []
    bounds = ([0, 0, 0, -np.inf, -np.inf], [np.inf] * 5)
    for f0 in peak * np.geomspace(*START_SPAN, n_starts):
        e = np.exp(-gamma0 * t)
        basis = np.column_stack([np.ones_like(t), e * np.cos(f0 * t), -e * np.sin(f0 * t)])
        coef, *_ = np.linalg.lstsq(basis * w[:, None], y * w, rcond=None)
        p0 = [f0, 2 * math.hypot(coef[1], coef[2]), gamma0, math.atan2(coef[2], coef[1]), coef[0]]
        try:
            r = minimize(res, p0, bounds, jac, max_iter=300, fallback=False)
        except ConvergenceError as exc:
            stalled.append(exc.best)
            continue
        except ValueError:
            continue
        if best is None or r.cost < best.cost * (1 - 1e-9) or (
                r.cost <= best.cost * (1 + 1e-9) and r.x[0] < best.x[0]):
            best = r
    if best is None and stalled:
        try:
            best = minimize(res, min(stalled, key=lambda r: r.cost).x, bounds, jac, max_iter=300)
        except ConvergenceError:
            pass
    if best is None:
        raise EstimationError(f"site {s.site}: no sine fit converged", {"spectral_peak_rad_s": peak})
    return best.x


def fit_multisine(series, n_components: int | None = None, *, shared_decay: bool = True,
                  n_starts: int = N_STARTS) -> MultiSineResult:
    """Per-site damped sinusoids with independent frequency, amplitude and phase.

    Each site is first fitted alone (multi-start); with ``shared_decay`` the
    sites are then refined jointly under one decay constant. Flat series are
    reported with zero amplitude and ``identifiable=False`` instead of being
    fitted.
    """
    series = list(series)
    if n_components is not None:
        if n_components < 1 or n_components > len(series):
            raise ValueError(f"n_components must be in 1..{len(series)}")
        series = series[:n_components]

    comps, singles = [], []
    for s in series:
        if len(s) < 8:
            raise UndersampledError(f"site {s.site}: need at least 8 samples")
        if _is_flat(s):
            comps.append(SineComponent(s.site, math.nan, 0.0, 0.0, float(np.mean(s.nbar)),
                                       {"frequency": math.nan, "amplitude": 0.0}, identifiable=False))
            singles.append(None)
            continue
        singles.append(_fit_single_sine(s, n_starts))
        comps.append(None)

    live = [k for k, p in enumerate(singles) if p is not None]
    if not live:
        return MultiSineResult(comps, np.array([0.0]), shared_decay, math.nan)

    # parameter layout: per live site (frequency, amplitude, phase, offset[, gamma]) then shared gamma
    per = 4 if shared_decay else 5

    def split(p):
        out = []
        for j, _ in enumerate(live):
            f, a, ph, c = p[j * per:j * per + 4]
            g = p[-1] if shared_decay else p[j * per + 4]
            out.append((f, a, g, ph, c))
        return out

    def residuals(p):
        parts = []
        for (f, a, g, ph, c), k in zip(split(p), live):
            s = series[k]
            parts.append((sine_model(s.times, f, a, g, ph, c) - s.nbar) * _weights(s.sem))
        return np.concatenate(parts)

    def jacobian(p):
        rows = []
        for j, ((f, a, g, ph, c), k) in enumerate(zip(split(p), live)):
            s = series[k]
            Jk = _sine_jacobian(s.times, f, a, g, ph, c) * _weights(s.sem)[:, None]
            block = np.zeros((s.times.size, p.size))
            block[:, j * per:j * per + 2] = Jk[:, :2]
            block[:, j * per + 2:j * per + 4] = Jk[:, 3:5]
            if shared_decay:
                block[:, -1] = Jk[:, 2]
            else:
                block[:, j * per + 4] = Jk[:, 2]
            rows.append(block)
        return np.vstack(rows)

    p0, lo, hi = [], [], []
    for k in live:
        f, a, g, ph, c = singles[k]
        p0 += [f, a, ph, c] + ([] if shared_decay else [g])
        lo += [0, 0, -np.inf, -np.inf] + ([] if shared_decay else [0])
        hi += [np.inf] * per
    if shared_decay:
        p0.append(float(np.median([singles[k][2] for k in live])))
        lo.append(0.0)
        hi.append(np.inf)
    try:
        best = minimize(residuals, p0, (lo, hi), jacobian, max_iter=500)
    except ConvergenceError as exc:
        raise EstimationError("joint multisine refinement did not converge") from exc

    n_obs = sum(series[k].times.size for k in live)
    dof = n_obs - best.x.size
    chi2 = 2.0 * best.cost
    cov = _covariance(jacobian(best.x), dof, chi2)
    sd = np.sqrt(np.clip(np.diag(cov), 0, None)) if cov is not None else np.full(best.x.size, math.nan)
    params = split(best.x)
    gammas = []
    for j, k in enumerate(live):
        f, a, g, ph, c = params[j]
        s = series[k]
        if f * s.span < 2 * math.pi:
            raise UndersampledError(f"site {s.site}: series spans less than one period")
        unc = {"frequency": sd[j * per], "amplitude": sd[j * per + 1],
               "phase": sd[j * per + 2], "offset": sd[j * per + 3]}
        comps[k] = SineComponent(s.site, float(f), float(a), math.remainder(float(ph), 2 * math.pi),
                                 float(c), unc)
        gammas.append(g)
    if shared_decay:
        decay = np.array([gammas[0]])
    else:
        decay = np.full(len(series), math.nan)
        decay[live] = gammas
    return MultiSineResult(comps, decay, shared_decay, chi2 / dof if dof > 0 else math.nan)


def total_excitation_residuals(series) -> TimeSeries:
    """Deviation of the summed excitation from its time average, with propagated sem."""
    series = list(series)
    if not series:
        raise ValueError("need at least one series")
    t = series[0].times
    for s in series[1:]:
        if s.times.shape != t.shape or not np.array_equal(s.times, t):
            raise ValueError(f"site {s.site}: timestamps differ from site {series[0].site}")
    total = np.sum([s.nbar for s in series], axis=0)
    sem = np.sqrt(np.sum([s.sem**2 for s in series], axis=0))
    return TimeSeries(-1, t, total - total.mean(), sem)


def write_series_csv(path, series, times_us=None) -> None:
    """Write series in the ``time_us,site,nbar,sem`` schema, losslessly (repr floats)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in series:
            tus = s.times * 1e6 if times_us is None else times_us
            for tu, y, e in zip(tus, s.nbar, s.sem):
                w.writerow([repr(float(tu)), s.site, repr(float(y)), repr(float(e))])


def read_series_csv(path) -> dict[int, TimeSeries]:
    """Parse a ``time_us,site,nbar,sem`` file into series keyed by site."""
    path = Path(path)
    rows: dict[int, list] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise SchemaError(f"{path}: row 1: header must be {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise SchemaError(f"{path}: row {lineno}: expected 4 fields, got {len(row)}")
            try:
                tu, site, y, e = float(row[0]), int(row[1]), float(row[2]), float(row[3])
            except ValueError:
                raise SchemaError(f"{path}: row {lineno}: cannot parse {row!r}") from None
            if not all(math.isfinite(v) for v in (tu, y, e)) or e < 0:
                raise SchemaError(f"{path}: row {lineno}: non-finite value or negative sem")
            rows.setdefault(site, []).append((tu * 1e-6, y, e))
    out = {}
    for site, vals in sorted(rows.items()):
        arr = np.array(vals)
        try:
            out[site] = TimeSeries(site, arr[:, 0], arr[:, 1], arr[:, 2])
        except ValueError as exc:
            raise SchemaError(f"{path}: site {site}: {exc}") from None
    return out
