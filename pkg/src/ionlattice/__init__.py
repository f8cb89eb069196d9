"""Phonon exchange between individually trapped ions in a 2D array.

Modules: :mod:`~ionlattice.lattice` (geometry and coupling laws),
:mod:`~ionlattice.dynamics` (amplitude and Newtonian engines),
:mod:`~ionlattice.protocol` (sequences), :mod:`~ionlattice.estimation`
(fits) and :mod:`~ionlattice.cli`.
"""

__version__ = "0.1.0"

from .dynamics import LatticeState, NoiseModel, PhaseSpaceState, evolve_full, evolve_rwa
from .estimation import FitResult, TimeSeries, fit_exchange, fit_multisine
from .lattice import (
    CouplingMatrix,
    IonSpecies,
    LatticeConfig,
    TrapSite,
    build_coupling_matrix,
    detuned_rate_and_efficiency,
    resonant_coupling_rate,
    rotation_factor,
)
from .protocol import Sequence, builtin_sequences, compile, run, validate

__all__ = [
    "CouplingMatrix", "FitResult", "IonSpecies", "LatticeConfig", "LatticeState", "NoiseModel",
    "PhaseSpaceState", "Sequence", "TimeSeries", "TrapSite", "build_coupling_matrix",
    "builtin_sequences", "compile", "detuned_rate_and_efficiency", "evolve_full", "evolve_rwa",
    "fit_exchange", "fit_multisine", "resonant_coupling_rate", "rotation_factor", "run", "validate",
]
