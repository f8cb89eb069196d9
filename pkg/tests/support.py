"""Shared builders for the test suite."""

import math

import numpy as np

from ionlattice.dynamics import LatticeState, evolve_full, occupation, to_phase_space
from ionlattice.estimation import TimeSeries, fit_exchange
from ionlattice.lattice import TWO_PI, IonSpecies, LatticeConfig, TrapSite, distance_for_rate
from ionlattice.protocol import CompiledTimeline

MG24 = IonSpecies.magnesium24()


def khz(x):
    return TWO_PI * 1e3 * x


def pair(rate, omega, delta=0.0, angles=(0.0, 0.0), chi=(0.0, 0.0)):
    """Two sites on the x axis whose aligned resonant rate is ``rate``."""
    d = distance_for_rate(MG24, rate, omega)
    return LatticeConfig(MG24, (
        TrapSite(0, (0.0, 0.0), omega, angles[0], chi[0]),
        TrapSite(1, (d, 0.0), omega + delta, angles[1], chi[1]),
    ))


def ode_occupations(lattice, n_source, duration, n_points=81, rtol=1e-10):
    """Newtonian evolution from ``n_source`` quanta at site 0, sampled on a uniform grid."""
    timeline = CompiledTimeline.static(lattice, duration)
    w = lattice.frequencies
    m = lattice.species.mass
    start = LatticeState.from_nbar([n_source] + [0.0] * (len(lattice) - 1))
    state = to_phase_space(start, m, w, timeline.reference_frequency)
    times, states = evolve_full(timeline, state, 0.0, duration, rtol=rtol,
                                t_eval=np.linspace(0.0, duration, n_points))
    return times, np.array([occupation(s.displacement, s.momentum, w, m) for s in states])


def fit_pair(times, n, n_tot, tau=math.inf):
    return fit_exchange((TimeSeries(0, times, n[:, 0]), TimeSeries(1, times, n[:, 1])), n_tot, tau=tau)


def series(site, times, values, sem=None):
    return TimeSeries(site, np.asarray(times, float), np.asarray(values, float),
                      None if sem is None else np.asarray(sem, float))


# Two Mg-24 sites about 2 kHz apart in rate, site 1 parked 100 kHz above the
# reference and brought onto resonance for the scanned hold.
PAIR_TOML = """
schema_version = 1
seed = 7
repetitions = 20

[lattice]
species = "Mg24"
reference_frequency_mhz = 4.0

[[lattice.sites]]
id = 0
position_um = [0.0, 0.0]
frequency_mhz = 4.0

[[lattice.sites]]
id = 1
position_um = [33.0, 0.0]
frequency_mhz = 4.1

[noise]
detection_noise = 0.3
dephasing_sigma_khz = 0.2
corr_time_us = 100.0

[[sequence]]
type = "cool"
target = 0.0

[[sequence]]
type = "excite"
site = 0
amplitude = 1000.0

[[sequence]]
type = "ramp_frequency"
name = "tune"
site = 1
target_offset_khz = 0.0
duration_us = 10.0

[[sequence]]
type = "hold"
name = "hold"
duration_us = 0.0

[[sequence]]
type = "ramp_frequency"
site = 1
target_offset_khz = 100.0
duration_us = 10.0

[[sequence]]
type = "detect"
sites = [0, 1]
label = "final"

[scan]
parameter = "hold.duration_us"
start = 0.0
stop = 600.0
step = 40.0
"""
