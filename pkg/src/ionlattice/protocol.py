"""Experiment sequences: segments, validation, compiled timelines and execution.

A :class:`Sequence` is an ordered list of segments acting on a lattice. It
is compiled into a :class:`CompiledTimeline` of piecewise smooth site
parameters (frequency and mode angle per site) plus instantaneous events
(cooling resets, coherent kicks, detections), which either engine in
:mod:`ionlattice.dynamics` can follow.

Segments refer to sites by ``TrapSite.id``. Instantaneous segments (Cool,
Excite, Detect) happen at the current time cursor. A ramp starts at the
cursor, or together with the previous ramp when ``concurrent`` is set, and
the cursor moves to the latest ramp end.
"""

from __future__ import annotations

import bisect
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence as _Seq, Union

import numpy as np

from .dynamics import (
    LatticeState,
    NoiseModel,
    NoiseProcess,
    PhaseSpaceState,
    default_step,
    evolve_full,
    propagate_batch,
    to_lattice_state,
    to_phase_space,
)
from .lattice import TWO_PI, LatticeConfig, coupling_values, pair_exchange_rate

DOPPLER_LIMIT = 20.0
CONTROL_GRID = TWO_PI * 200.0


# -- segments --------------------------------------------------------------

@dataclass(frozen=True)
class Cool:
    """Reset every site to a thermal state with ``target`` mean quanta.

    ``target`` is a scalar or one value per site (in lattice order).
    """

    target: float | tuple[float, ...] = DOPPLER_LIMIT

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.target, float))
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise ValueError("cooling target must be finite and non-negative")


@dataclass(frozen=True)
class Excite:
    """Add a coherent displacement of ``amplitude`` mean quanta at ``site``."""

    site: int
    amplitude: float
    phase: float = 0.0

    def __post_init__(self):
        if not self.amplitude >= 0:
            raise ValueError("excitation amplitude must be non-negative")


@dataclass(frozen=True)
class RampFrequency:
    site: int
    target: float
    duration: float
    concurrent: bool = False

    def __post_init__(self):
        if not self.target > 0:
            raise ValueError("target frequency must be positive")
        if not self.duration >= 0:
            raise ValueError("ramp duration must be non-negative")


@dataclass(frozen=True)
class RampAngle:
    site: int
    target: float
    duration: float
    concurrent: bool = False

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("ramp duration must be non-negative")


@dataclass(frozen=True)
class Hold:
    """Let the lattice evolve; sites exchange whenever their detunings allow."""

    duration: float

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("hold duration must be non-negative")


@dataclass(frozen=True)
class Detect:
    sites: tuple[int, ...]
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(s) for s in np.atleast_1d(self.sites)))


Segment = Union[Cool, Excite, RampFrequency, RampAngle, Hold, Detect]
_RAMPS = (RampFrequency, RampAngle)


@dataclass(frozen=True)
class Sequence:
    """Ordered segments acting on ``lattice``.

    ``reference_frequency`` sets the rotating frame of the amplitude engine
    and the phase reference of :class:`Excite`; it defaults to the lowest
    initial site frequency.
    """

    segments: tuple
    lattice: LatticeConfig
    noise: NoiseModel = field(default_factory=NoiseModel)
    reference_frequency: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.reference_frequency is None:
            object.__setattr__(self, "reference_frequency", float(self.lattice.frequencies.min()))

    def with_(self, **changes) -> Sequence:
        return replace(self, **changes)


# -- validation ------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    code: str
    severity: str  # "error" blocks compilation, "warning" does not
    segment: int | None
    message: str

    @property
    def blocking(self) -> bool:
        return self.severity == "error"

    def __str__(self):
        where = "" if self.segment is None else f"segment {self.segment}: "
        return f"[{self.severity}] {self.code}: {where}{self.message}"


def _max_coupled_rate(lattice, k, freqs, angles, threshold):
    """Largest exchange rate from site index ``k`` to any partner it is coupled to."""
    best = 0.0
    for j in range(len(lattice)):
        if j == k:
            continue
        omega = abs(pair_exchange_rate(lattice, k, j, angles, freqs))
        if omega == 0:
            continue
        delta = freqs[k] - freqs[j]
        if omega**2 / (omega**2 + delta**2) >= threshold:
            best = max(best, omega)
    return best


def validate(sequence: Sequence, *, c_slow: float = 10.0, c_fast: float = 0.5,
             enforce_grid: bool = False, grid: float = CONTROL_GRID,
             coupled_threshold: float = 1e-2) -> list[Violation]:
    """Check structure and ramp timing; an empty list means the sequence is valid.

    Every ramp must be slow compared to the local period,
    ``duration > c_slow / omega``. A ramp at a site that is coupled (pair
    efficiency at least ``coupled_threshold``) at its start or end must also
    be fast compared to the exchange, ``duration < c_fast / Omega_max``.
    With ``enforce_grid`` frequency targets off the ``grid`` spacing are
    reported as warnings.
    """
    out: list[Violation] = []
    lattice = sequence.lattice
    ids = {s.id for s in lattice.sites}
    segs = sequence.segments
    if not segs or not isinstance(segs[0], Cool):
        out.append(Violation("structure", "error", 0 if segs else None,
                             "a sequence must begin with Cool"))
    freqs = lattice.frequencies.copy()
    angles = lattice.angles.copy()
    for n, seg in enumerate(segs):
        if isinstance(seg, Cool):
            t = np.atleast_1d(np.asarray(seg.target, float))
            if t.size not in (1, len(lattice)):
                out.append(Violation("structure", "error", n,
                                     f"Cool needs 1 or {len(lattice)} targets, got {t.size}"))
            continue
        if isinstance(seg, Detect):
            bad = [s for s in seg.sites if s not in ids]
            if bad or not seg.sites:
                out.append(Violation("unknown-site", "error", n,
                                     f"Detect lists sites not in the lattice: {bad or '[]'}"))
            continue
        if isinstance(seg, Hold):
            continue
        if seg.site not in ids:
            out.append(Violation("unknown-site", "error", n, f"site {seg.site} is not in the lattice"))
            continue
        if isinstance(seg, Excite):
            continue
        k = lattice.index(seg.site)
        before_f, before_a = freqs.copy(), angles.copy()
        if isinstance(seg, RampFrequency):
            freqs[k] = seg.target
            if enforce_grid:
                steps = seg.target / grid
                if abs(steps - round(steps)) > 1e-6:
                    out.append(Violation(
                        "off-grid", "warning", n,
                        f"target {seg.target / TWO_PI / 1e3:.4f} kHz is off the "
                        f"{grid / TWO_PI / 1e3:g} kHz control grid"))
        else:
            angles[k] = seg.target
        if seg.duration == 0:
            continue
        omega = min(before_f[k], freqs[k])
        if seg.duration <= c_slow / omega:
            out.append(Violation(
                "non-adiabatic", "error", n,
                f"ramp of site {seg.site} takes {seg.duration * 1e6:.4g} us, not longer than "
                f"{c_slow:g}/omega = {c_slow / omega * 1e6:.4g} us"))
        rate = max(_max_coupled_rate(lattice, k, before_f, before_a, coupled_threshold),
                   _max_coupled_rate(lattice, k, freqs, angles, coupled_threshold))
        if rate > 0 and seg.duration >= c_fast / rate:
            out.append(Violation(
                "coupling-leak", "error", n,
                f"ramp of site {seg.site} takes {seg.duration * 1e6:.4g} us, not shorter than "
                f"{c_fast:g}/Omega = {c_fast / rate * 1e6:.4g} us while the site is coupled"))
    return out


# -- compilation -----------------------------------------------------------

class CompileError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("sequence is invalid:\n" + "\n".join(f"  {v}" for v in self.violations))


def smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


@dataclass(frozen=True)
class Ramp:
    start: float
    end: float
    v0: float
    v1: float


class _Track:
    """Piecewise-constant-or-smoothstep trajectory of one parameter of one site."""

    def __init__(self, initial: float):
        self.initial = initial
        self.ramps: list[Ramp] = []

    @property
    def final(self) -> float:
        return self.ramps[-1].v1 if self.ramps else self.initial

    def add(self, ramp: Ramp):
        if self.ramps and ramp.start < self.ramps[-1].end:
            raise ValueError("overlapping ramps on one site")
        self.ramps.append(ramp)

    def __call__(self, t: float) -> float:
        starts = [r.start for r in self.ramps]
        k = bisect.bisect_right(starts, t) - 1
        if k < 0:
            return self.initial
        r = self.ramps[k]
        if t >= r.end:
            return r.v1
        return r.v0 + (r.v1 - r.v0) * float(smoothstep((t - r.start) / (r.end - r.start)))


@dataclass(frozen=True)
class Event:
    time: float
    segment: int
    action: Segment


class CompiledTimeline:
    """Site-parameter trajectories and events over ``[0, duration]``.

    Ramps are smoothstep (C1) interpolations between their endpoints.
    """

    def __init__(self, lattice, reference_frequency, freq_tracks, angle_tracks, events, duration):
        self.lattice = lattice
        self.reference_frequency = float(reference_frequency)
        self._freq = freq_tracks
        self._angle = angle_tracks
        self.events: tuple[Event, ...] = tuple(events)
        self.duration = float(duration)
        cuts = {0.0, self.duration}
        for tr in list(freq_tracks) + list(angle_tracks):
            for r in tr.ramps:
                cuts.update((r.start, r.end))
        cuts.update(e.time for e in self.events)
        self.breakpoints = tuple(sorted(cuts))

    start = 0.0

    @property
    def end(self) -> float:
        return self.duration

    @property
    def ramps(self) -> list[Ramp]:
        return [r for tr in list(self._freq) + list(self._angle) for r in tr.ramps]

    @property
    def detection_times(self) -> tuple[float, ...]:
        return tuple(e.time for e in self.events if isinstance(e.action, Detect))

    @property
    def excitations(self) -> tuple[Event, ...]:
        return tuple(e for e in self.events if isinstance(e.action, Excite))

    def frequencies_at(self, t: float) -> np.ndarray:
        return np.array([tr(t) for tr in self._freq])

    def angles_at(self, t: float) -> np.ndarray:
        return np.array([tr(t) for tr in self._angle])

    def trajectories(self, times) -> tuple[np.ndarray, np.ndarray]:
        """Frequencies and angles sampled at ``times``, each of shape (len(times), n_sites)."""
        times = np.asarray(times, float)
        return (np.array([self.frequencies_at(t) for t in times]),
                np.array([self.angles_at(t) for t in times]))

    def is_static(self, ta: float, tb: float) -> bool:
        return not any(r.start < tb and r.end > ta for r in self.ramps)

    def step_limit(self, ta: float, tb: float) -> float:
        """A step that resolves every ramp overlapping ``(ta, tb)`` into 200 pieces."""
        durations = [r.end - r.start for r in self.ramps if r.start < tb and r.end > ta]
        return min(durations) / 200.0 if durations else math.inf

    def matrix_at(self, t: float) -> np.ndarray:
        return coupling_values(self.lattice, self.reference_frequency,
                               self.frequencies_at(t), self.angles_at(t))

    @classmethod
    def static(cls, lattice: LatticeConfig, duration: float,
               reference_frequency: float | None = None) -> CompiledTimeline:
        """A timeline holding the lattice's stored parameters for ``duration``."""
        ref = float(lattice.frequencies.min()) if reference_frequency is None else reference_frequency
        return cls(lattice, ref, [_Track(w) for w in lattice.frequencies],
                   [_Track(a) for a in lattice.angles], [], duration)


def compile(sequence: Sequence, **validate_options) -> CompiledTimeline:  # noqa: A001
    """Realise ``sequence`` as a timeline; raise :class:`CompileError` on blocking violations."""
    blocking = [v for v in validate(sequence, **validate_options) if v.blocking]
    if blocking:
        raise CompileError(blocking)
    lattice = sequence.lattice
    freq = [_Track(w) for w in lattice.frequencies]
    angle = [_Track(a) for a in lattice.angles]
    events = []
    cursor = 0.0
    ramp_start = 0.0
    for n, seg in enumerate(sequence.segments):
        if isinstance(seg, _RAMPS):
            k = lattice.index(seg.site)
            track = freq[k] if isinstance(seg, RampFrequency) else angle[k]
            start = ramp_start if seg.concurrent else cursor
            try:
                track.add(Ramp(start, start + seg.duration, track.final, float(seg.target)))
            except ValueError:
                raise CompileError([Violation("overlap", "error", n,
                                              f"ramp overlaps an earlier ramp of site {seg.site}")])
            ramp_start = start
            cursor = max(cursor, start + seg.duration)
        elif isinstance(seg, Hold):
            cursor += seg.duration
        else:
            events.append(Event(cursor, n, seg))
    return CompiledTimeline(lattice, sequence.reference_frequency, freq, angle, events, cursor)


# -- execution -------------------------------------------------------------

@dataclass(frozen=True)
class DetectionRecord:
    site: int
    time: float
    nbar: float
    sem: float
    repetitions: int
    label: str = ""

    def to_dict(self) -> dict:
        return {"site": self.site, "time_us": self.time * 1e6, "nbar": self.nbar,
                "sem": self.sem, "repetitions": self.repetitions, "label": self.label}


class EngineError(RuntimeError):
    """An engine failed; the message carries the timeline position."""


def _detect(seg, timeline, lattice, nbar, process, repetitions, time):
    rel = process.noise.detection_noise
    xi = np.array([g.standard_normal(len(seg.sites)) for g in process.detection])
    out = []
    for m, site in enumerate(seg.sites):
        k = lattice.index(site)
        obs = nbar[:, k] * (1.0 + rel * xi[:, m])
        mean = max(float(obs.mean()), 0.0)
        sem = float(obs.std(ddof=1) / math.sqrt(repetitions)) if repetitions > 1 else 0.0
        out.append(DetectionRecord(site, time, mean, sem, repetitions, seg.label))
    return out


def _kick(seg, lattice, reference_frequency, time):
    k = lattice.index(seg.site)
    phase = seg.phase + reference_frequency * time - lattice.sites[k].motional_phase
    return k, math.sqrt(seg.amplitude) * complex(math.cos(phase), math.sin(phase))


def _cool_targets(seg, n):
    return np.broadcast_to(np.asarray(seg.target, float), (n,)).astype(float)


def _run_rwa(timeline, noise, repetitions, dt_max):
    lattice = timeline.lattice
    n = len(lattice)
    chi = lattice.chi if np.any(lattice.chi != 0) else None
    process = NoiseProcess(noise, n, repetitions)
    if dt_max is None:
        dt_max = default_step(noise, chi is not None)
    beta = np.zeros((repetitions, n), complex)
    thermal = np.zeros((repetitions, n))
    records = []

    def advance(beta, thermal, ta, tb):
        cuts = [ta] + [b for b in timeline.breakpoints if ta < b < tb] + [tb]
        for a, b in zip(cuts[:-1], cuts[1:]):
            if b <= a:
                continue
            static = timeline.is_static(a, b)
            step = min(dt_max, timeline.step_limit(a, b))
            try:
                beta, thermal = propagate_batch(beta, thermal, a, b, timeline.matrix_at, chi,
                                                process, static=static, dt_max=step)
            except Exception as exc:  # pragma: no cover - propagated with position
                raise EngineError(f"rwa engine failed in [{a * 1e6:.3f}, {b * 1e6:.3f}] us: {exc}") from exc
        return beta, thermal

    t = 0.0
    for ev in timeline.events:
        beta, thermal = advance(beta, thermal, t, ev.time)
        t = ev.time
        seg = ev.action
        if isinstance(seg, Cool):
            beta = np.zeros_like(beta)
            thermal = np.tile(_cool_targets(seg, n), (repetitions, 1))
        elif isinstance(seg, Excite):
            k, kick = _kick(seg, lattice, timeline.reference_frequency, t)
            beta[:, k] += kick
        elif isinstance(seg, Detect):
            records += _detect(seg, timeline, lattice, np.abs(beta) ** 2 + thermal, process,
                               repetitions, t)
    return records


def _noise_traces(process, duration, repetitions):
    """Pre-sample the detuning noise of every repetition on a uniform grid."""
    if not process.active:
        return None, None
    dt = min(process.noise.dephasing_corr_time / 10.0, 1e-6)
    steps = max(1, math.ceil(duration / dt))
    grid = np.linspace(0.0, duration, steps + 1)
    values = np.empty((repetitions, steps + 1, process.n_sites))
    values[:, 0] = process.site_offsets()
    for s in range(steps):
        process.advance(grid[s + 1] - grid[s])
        values[:, s + 1] = process.site_offsets()
    return grid, values


def _run_full(timeline, noise, repetitions, rtol):
    lattice = timeline.lattice
    n = len(lattice)
    mass = lattice.species.mass
    w_ref = timeline.reference_frequency
    phases = np.array([s.motional_phase for s in lattice.sites])
    process = NoiseProcess(noise, n, repetitions)
    grid, traces = _noise_traces(process, timeline.duration, repetitions)
    states = [PhaseSpaceState(np.zeros(n), np.zeros(n), 0.0) for _ in range(repetitions)]
    thermal = np.zeros((repetitions, n))
    records = []
    t = 0.0
    for ev in timeline.events:
        if ev.time > t:
            for r in range(repetitions):
                fn = None
                if traces is not None:
                    tr = traces[r]
                    fn = lambda tt, tr=tr: np.array([np.interp(tt, grid, tr[:, i]) for i in range(n)])
                try:
                    states[r] = evolve_full(timeline, states[r], t, ev.time, rtol=rtol, frequency_noise=fn)
                except Exception as exc:
                    raise EngineError(
                        f"full engine failed in [{t * 1e6:.3f}, {ev.time * 1e6:.3f}] us: {exc}") from exc
            thermal = thermal + process.heating(ev.time - t)
            t = ev.time
        seg = ev.action
        w = timeline.frequencies_at(t)
        if isinstance(seg, Cool):
            states = [PhaseSpaceState(np.zeros(n), np.zeros(n), t) for _ in range(repetitions)]
            thermal = np.tile(_cool_targets(seg, n), (repetitions, 1))
        elif isinstance(seg, Excite):
            k, kick = _kick(seg, lattice, w_ref, t)
            for r in range(repetitions):
                ls = to_lattice_state(states[r], mass, w, w_ref, phases)
                amps = ls.amplitudes.copy()
                amps[k] += kick
                states[r] = to_phase_space(LatticeState(amps, None, t), mass, w, w_ref, phases)
        elif isinstance(seg, Detect):
            nbar = np.array([to_lattice_state(s, mass, w, w_ref, phases).nbar for s in states])
            records += _detect(seg, timeline, lattice, nbar + thermal, process, repetitions, t)
    return records


def run(sequence: Sequence, engine: str = "rwa", repetitions: int = 1, *,
        dt_max: float | None = None, rtol: float = 1e-10, **validate_options) -> list[DetectionRecord]:
    """Execute ``sequence`` and return one record per detected site and Detect segment.

    Each repetition draws its own noise from a child of
    ``sequence.noise.rng_seed``; detection records hold the mean over
    repetitions and its standard error. The ``full`` engine integrates the
    Newtonian equations one repetition at a time and is much slower.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    timeline = compile(sequence, **validate_options)
    if engine == "rwa":
        return _run_rwa(timeline, sequence.noise, repetitions, dt_max)
    if engine == "full":
        return _run_full(timeline, sequence.noise, repetitions, rtol)
    raise ValueError(f"unknown engine {engine!r}; expected 'rwa' or 'full'")


def sweep(build: Callable[[float], Sequence], values: _Seq[float], *, engine: str = "rwa",
          repetitions: int = 1, seed: int | tuple = 0, jobs: int = 1,
          **run_options) -> list[list[DetectionRecord]]:
    """Run ``build(v)`` for every value; results are ordered like ``values``.

    Point ``k`` draws its noise from seed ``(*seed, k)``, so points are
    statistically independent and the output does not depend on ``jobs``.
    """
    base = tuple(int(x) for x in np.atleast_1d(seed))

    def one(k):
        seq = build(values[k])
        seq = seq.with_(noise=seq.noise.with_(rng_seed=base + (k,)))
        return run(seq, engine, repetitions, **run_options)

    if jobs <= 1:
        return [one(k) for k in range(len(values))]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, range(len(values))))


def builtin_sequences():
    """Named templates ``fig2``, ``fig3``, ``fig4_single`` and ``fig4_double``.

    See :mod:`ionlattice.sequences`.
    """
    from .sequences import builtin_sequences as _builtin

    return _builtin()
