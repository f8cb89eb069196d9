"""Site geometry, ion species and the analytic coupling laws.

All frequencies are angular (rad/s). Mode angles live in the common x-y
plane of the array and are measured from the global x axis; for each pair
they are re-expressed relative to that pair's inter-site axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

# CODATA 2022. Pinned here so results do not move with the scipy release.
ELEMENTARY_CHARGE = 1.602176634e-19
VACUUM_PERMITTIVITY = 8.8541878188e-12
ATOMIC_MASS_UNIT = 1.66053906892e-27
HBAR = 1.054571817e-34

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for coincident sites or otherwise unusable array geometry."""


def wrap_angle(angle: float) -> float:
    """Map ``angle`` onto (-pi, pi]."""
    wrapped = math.remainder(angle, TWO_PI)
    if wrapped == -math.pi:
        return math.pi
    return wrapped


@dataclass(frozen=True)
class IonSpecies:
    mass: float
    charge: float = ELEMENTARY_CHARGE
    name: str = ""

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError(f"ion mass must be positive, got {self.mass!r}")
        if self.charge == 0:
            raise ValueError("ion charge must be non-zero")

    @classmethod
    def magnesium24(cls) -> IonSpecies:
        return cls(mass=24 * ATOMIC_MASS_UNIT, charge=ELEMENTARY_CHARGE, name="Mg-24")


@dataclass(frozen=True)
class TrapSite:
    """One lattice site and the local parameters of its coupling mode.

    ``anharmonic_coefficient`` is the amplitude-dependent frequency shift
    (rad/s per quantum): the mode oscillates at ``omega + chi * nbar``.
    """

    id: int
    position: tuple[float, float, float]
    mode_frequency: float
    mode_angle: float = 0.0
    anharmonic_coefficient: float = 0.0
    motional_phase: float = 0.0

    def __post_init__(self):
        if not self.mode_frequency > 0:
            raise ValueError(f"site {self.id}: mode frequency must be positive")
        pos = tuple(float(x) for x in self.position)
        if len(pos) == 2:
            pos = pos + (0.0,)
        if len(pos) != 3 or not all(math.isfinite(x) for x in pos):
            raise ValueError(f"site {self.id}: position must be a finite 3-vector")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "mode_angle", wrap_angle(float(self.mode_angle)))
        object.__setattr__(self, "motional_phase", wrap_angle(float(self.motional_phase)))

    def with_(self, **changes) -> TrapSite:
        return replace(self, **changes)


@dataclass(frozen=True)
class LatticeConfig:
    species: IonSpecies
    sites: tuple[TrapSite, ...]
    vacuum_permittivity: float = field(default=VACUUM_PERMITTIVITY)

    def __post_init__(self):
        sites = tuple(self.sites)
        object.__setattr__(self, "sites", sites)
        if len(sites) < 2:
            raise GeometryError("a lattice needs at least two sites")
        ids = [s.id for s in sites]
        if len(set(ids)) != len(ids):
            raise GeometryError(f"duplicate site ids: {ids}")
        pos = self.positions
        for i in range(len(sites)):
            for j in range(i + 1, len(sites)):
                if np.linalg.norm(pos[j] - pos[i]) <= 0:
                    raise GeometryError(f"sites {ids[i]} and {ids[j]} coincide")

    def __len__(self):
        return len(self.sites)

    @property
    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.sites], dtype=float)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([s.mode_frequency for s in self.sites], dtype=float)

    @property
    def angles(self) -> np.ndarray:
        return np.array([s.mode_angle for s in self.sites], dtype=float)

    @property
    def chi(self) -> np.ndarray:
        return np.array([s.anharmonic_coefficient for s in self.sites], dtype=float)

    def index(self, site_id: int) -> int:
        for k, s in enumerate(self.sites):
            if s.id == site_id:
                return k
        raise KeyError(f"no site with id {site_id}")

    def distance(self, i: int, j: int) -> float:
        pos = self.positions
        return float(np.linalg.norm(pos[j] - pos[i]))

    def axis_angle(self, i: int, j: int) -> float:
        """In-plane angle of the axis from site index ``i`` to ``j``."""
        pos = self.positions
        dx, dy = pos[j, 0] - pos[i, 0], pos[j, 1] - pos[i, 1]
        return math.atan2(dy, dx)

    def replace_site(self, index: int, **changes) -> LatticeConfig:
        sites = list(self.sites)
        sites[index] = sites[index].with_(**changes)
        return replace(self, sites=tuple(sites))


@dataclass(frozen=True)
class CouplingMatrix:
    """Hermitian generator of the rotating-wave amplitude dynamics.

    ``values[i, i]`` is the detuning of site ``i`` from the reference
    frequency; ``values[i, j]`` is the exchange amplitude between sites.
    """

    values: np.ndarray
    reference_frequency: float = 0.0

    def __post_init__(self):
        m = np.array(self.values, dtype=complex)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"coupling matrix must be square, got shape {m.shape}")
        if not np.allclose(m, m.conj().T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
            raise ValueError("coupling matrix must be Hermitian")
        m = 0.5 * (m + m.conj().T)
        m.setflags(write=False)
        object.__setattr__(self, "values", m)

    @property
    def dimension(self) -> int:
        return self.values.shape[0]

    @property
    def detunings(self) -> np.ndarray:
        return self.values.diagonal().real.copy()

    @classmethod
    def two_site(cls, rate: float, delta_omega: float = 0.0) -> CouplingMatrix:
        """Two sites exchanging at ``rate`` with site 1 detuned by ``delta_omega``."""
        return cls(np.array([[0.0, rate / 2], [rate / 2, delta_omega]], dtype=complex))


def resonant_coupling_rate(species: IonSpecies, distance: float, omega: float,
                           vacuum_permittivity: float = VACUUM_PERMITTIVITY) -> float:
    """Exchange rate of two identical, aligned, resonant oscillators.

    ``(1 / 4 pi eps0) * 2 q^2 / (d^3 m omega)``, in rad/s.
    """
    if not distance > 0:
        raise ValueError(f"distance must be positive, got {distance!r}")
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega!r}")
    coulomb = species.charge**2 / (4.0 * math.pi * vacuum_permittivity)
    return 2.0 * coulomb / (distance**3 * species.mass * omega)


def distance_for_rate(species: IonSpecies, rate: float, omega: float,
                      vacuum_permittivity: float = VACUUM_PERMITTIVITY) -> float:
    """Inverse of :func:`resonant_coupling_rate` in the distance."""
    if not rate > 0 or not omega > 0:
        raise ValueError("rate and omega must be positive")
    coulomb = species.charge**2 / (4.0 * math.pi * vacuum_permittivity)
    return (2.0 * coulomb / (rate * species.mass * omega)) ** (1.0 / 3.0)


def detuned_rate_and_efficiency(omega_res: float, delta_omega: float) -> tuple[float, float]:
    """Return ``(rate, efficiency)`` of a pair detuned by ``delta_omega``."""
    if not omega_res > 0:
        raise ValueError(f"omega_res must be positive, got {omega_res!r}")
    rate = math.hypot(omega_res, delta_omega)
    return rate, (omega_res / rate) ** 2


def rotation_factor(alpha0: float, alpha1: float) -> float:
    """Scale of the exchange rate for in-plane modes at angles to the pair axis."""
    a0, a1 = wrap_angle(alpha0), wrap_angle(alpha1)
    return math.cos(a0) * math.cos(a1) - 0.5 * math.sin(a0) * math.sin(a1)


def pair_exchange_rate(config: LatticeConfig, i: int, j: int,
                       angles: np.ndarray | None = None,
                       frequencies: np.ndarray | None = None) -> float:
    """Signed exchange rate between site indices ``i`` and ``j``.

    The resonant rate is evaluated at the geometric-mean pair frequency and
    multiplied by the rotation factor of the two mode angles relative to the
    pair axis. ``angles``/``frequencies`` override the stored site values
    (used while ramps are in progress).
    """
    if angles is None:
        angles = config.angles
    if frequencies is None:
        frequencies = config.frequencies
    d = config.distance(i, j)
    if d <= 0:
        raise GeometryError(f"sites {i} and {j} coincide")
    omega_pair = math.sqrt(frequencies[i] * frequencies[j])
    axis = config.axis_angle(i, j)
    base = resonant_coupling_rate(config.species, d, omega_pair, config.vacuum_permittivity)
    return base * rotation_factor(angles[i] - axis, angles[j] - axis)


def coupling_values(config: LatticeConfig, reference_frequency: float,
                    frequencies: np.ndarray | None = None,
                    angles: np.ndarray | None = None) -> np.ndarray:
    """Raw complex matrix behind :func:`build_coupling_matrix`.

    The off-diagonal sign follows from the Coulomb interaction: aligned modes
    give ``-rate/2`` in the ``exp(-i omega t)`` rotating frame, which makes the
    in-phase normal mode the lower one, as in the Newtonian equations.
    """
    if frequencies is None:
        frequencies = config.frequencies
    if angles is None:
        angles = config.angles
    n = len(config.sites)
    phases = np.array([s.motional_phase for s in config.sites])
    m = np.zeros((n, n), dtype=complex)
    for i in range(n):
        m[i, i] = frequencies[i] - reference_frequency
        for j in range(i + 1, n):
            g = -0.5 * pair_exchange_rate(config, i, j, angles, frequencies)
            m[i, j] = g * np.exp(-1j * (phases[i] - phases[j]))
            m[j, i] = np.conj(m[i, j])
    return m


def build_coupling_matrix(config: LatticeConfig, reference_frequency: float) -> CouplingMatrix:
    return CouplingMatrix(coupling_values(config, reference_frequency), reference_frequency)


def dipole_spring_constants(config: LatticeConfig, angles: np.ndarray | None = None) -> np.ndarray:
    """Inter-site spring constants per unit mass (1/s^2) from the Coulomb Hessian.

    Computed directly from the tensor ``(3 r r - 1) / d^3`` contracted with the
    in-plane mode vectors. Self terms are omitted: ``mode_frequency`` is taken
    to be the dressed local frequency.
    """
    if angles is None:
        angles = config.angles
    pos = config.positions
    n = len(config.sites)
    coulomb = config.species.charge**2 / (4.0 * math.pi * config.vacuum_permittivity)
    modes = np.stack([np.cos(angles), np.sin(angles), np.zeros(n)], axis=1)
    k = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            r = pos[j] - pos[i]
            d = np.linalg.norm(r)
            rhat = r / d
            tensor = 3.0 * np.outer(rhat, rhat) - np.eye(3)
            # V_ij = -coulomb/d^3 e_i.T.e_j is the cross curvature; the force on i is -V_ij u_j
            k[i, j] = k[j, i] = -coulomb * (modes[i] @ tensor @ modes[j]) / (d**3 * config.species.mass)
    return k


def triangle_positions(side: float, rotation: float = 0.0) -> list[tuple[float, float, float]]:
    """Vertices of an equilateral triangle with site 0 at the origin and site 1 on +x."""
    pts = [(0.0, 0.0), (side, 0.0), (side / 2, side * math.sqrt(3) / 2)]
    c, s = math.cos(rotation), math.sin(rotation)
    return [(c * x - s * y, s * x + c * y, 0.0) for x, y in pts]


def centre_pointing_angles(config: LatticeConfig) -> np.ndarray:
    """Mode angles that point every site towards the array centroid."""
    pos = config.positions
    centre = pos.mean(axis=0)
    return np.array([math.atan2(centre[1] - p[1], centre[0] - p[0]) for p in pos])
