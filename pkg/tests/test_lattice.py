import math

import numpy as np
import pytest

import oracles
from ionlattice.lattice import (
    TWO_PI,
    CouplingMatrix,
    GeometryError,
    IonSpecies,
    LatticeConfig,
    TrapSite,
    build_coupling_matrix,
    centre_pointing_angles,
    detuned_rate_and_efficiency,
    dipole_spring_constants,
    distance_for_rate,
    pair_exchange_rate,
    resonant_coupling_rate,
    rotation_factor,
    triangle_positions,
    wrap_angle,
)
from support import MG24, khz, pair

OMEGA = TWO_PI * 4e6


def test_resonant_rate_matches_oracle():
    rate = resonant_coupling_rate(MG24, 40e-6, OMEGA) / TWO_PI
    assert rate == pytest.approx(oracles.RESONANT_RATE_MG24_40UM_4MHZ_HZ, rel=1e-12)


def test_resonant_rate_distance_and_frequency_scaling():
    base = resonant_coupling_rate(MG24, 40e-6, OMEGA)
    assert resonant_coupling_rate(MG24, 80e-6, OMEGA) * 8 == pytest.approx(base, rel=1e-12)
    assert resonant_coupling_rate(MG24, 40e-6, 2 * OMEGA) * 2 == pytest.approx(base, rel=1e-12)


def test_resonant_rate_same_order_as_measured_effective_rate():
    rate_khz = resonant_coupling_rate(MG24, 40e-6, OMEGA) / TWO_PI / 1e3
    assert 0.1 < rate_khz / 1.92 < 10


@pytest.mark.parametrize("d, w", [(0.0, OMEGA), (-1e-6, OMEGA), (40e-6, 0.0), (40e-6, -1.0)])
def test_resonant_rate_rejects_non_positive(d, w):
    with pytest.raises(ValueError):
        resonant_coupling_rate(MG24, d, w)


def test_distance_for_rate_inverts():
    rate = khz(1.92)
    d = distance_for_rate(MG24, rate, OMEGA)
    assert resonant_coupling_rate(MG24, d, OMEGA) == pytest.approx(rate, rel=1e-12)


@pytest.mark.parametrize("ratio, kappa", list(zip(oracles.DETUNING_RATIOS, oracles.DETUNED_EFFICIENCY)))
def test_detuned_efficiency_oracle(ratio, kappa):
    om = khz(1.0)
    rate, eff = detuned_rate_and_efficiency(om, ratio * om)
    assert eff == pytest.approx(kappa, rel=1e-12)
    assert rate == pytest.approx(om * math.sqrt(1 + ratio**2), rel=1e-12)


def test_detuned_examples():
    om = khz(1.5)
    assert detuned_rate_and_efficiency(om, 0.0) == (om, 1.0)
    _, eff = detuned_rate_and_efficiency(om, khz(100.0))
    assert eff == pytest.approx(oracles.SWITCH_OFF_EFFICIENCY, rel=1e-12)
    rate, eff = detuned_rate_and_efficiency(om, math.sqrt(3) * om)
    assert rate == pytest.approx(2 * om, rel=1e-14)
    assert eff == pytest.approx(0.25, rel=1e-14)


def test_detuned_rejects_non_positive_rate():
    with pytest.raises(ValueError):
        detuned_rate_and_efficiency(0.0, 1.0)


@pytest.mark.parametrize("angles, expected", oracles.ROTATION_CASES)
def test_rotation_factor_cases(angles, expected):
    assert rotation_factor(*angles) == pytest.approx(expected, abs=1e-15)


def test_wrap_angle_half_open_interval():
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


def test_species_and_site_validation():
    with pytest.raises(ValueError):
        IonSpecies(mass=0.0)
    with pytest.raises(ValueError):
        IonSpecies(mass=1.0, charge=0.0)
    with pytest.raises(ValueError):
        TrapSite(0, (0, 0), 0.0)
    site = TrapSite(0, (1e-6, 2e-6), OMEGA, mode_angle=3 * math.pi)
    assert site.position == (1e-6, 2e-6, 0.0)
    assert site.mode_angle == pytest.approx(math.pi)


def test_lattice_rejects_coincident_and_single_sites():
    s0 = TrapSite(0, (0, 0), OMEGA)
    with pytest.raises(GeometryError):
        LatticeConfig(MG24, (s0, TrapSite(1, (0, 0), OMEGA)))
    with pytest.raises(GeometryError):
        LatticeConfig(MG24, (s0,))
    with pytest.raises(GeometryError):
        LatticeConfig(MG24, (s0, TrapSite(0, (1e-5, 0), OMEGA)))


def test_two_identical_sites_matrix():
    rate = khz(2.0)
    m = build_coupling_matrix(pair(rate, OMEGA), OMEGA).values
    assert np.allclose(np.diag(m), 0.0)
    assert abs(m[0, 1]) == pytest.approx(rate / 2, rel=1e-12)


def test_detuned_site_shifts_only_its_diagonal():
    rate = khz(2.0)
    lat = pair(rate, OMEGA)
    delta = khz(5.0)
    base = build_coupling_matrix(lat, OMEGA).values
    shifted = build_coupling_matrix(lat.replace_site(1, mode_frequency=OMEGA + delta), OMEGA).values
    assert shifted[1, 1].real - base[1, 1].real == pytest.approx(delta, rel=1e-12)
    assert shifted[0, 0] == base[0, 0]
    # the pair rate uses the geometric-mean frequency, so the coupling moves by delta/2omega
    ratio = abs(shifted[0, 1]) / abs(base[0, 1])
    assert ratio == pytest.approx(math.sqrt(OMEGA / (OMEGA + delta)), rel=1e-12)


def equilateral(angles=None, freqs=(OMEGA,) * 3, side=40e-6):
    pos = triangle_positions(side)
    lat = LatticeConfig(MG24, tuple(TrapSite(k, pos[k], freqs[k]) for k in range(3)))
    if angles is None:
        angles = centre_pointing_angles(lat)
    for k in range(3):
        lat = lat.replace_site(k, mode_angle=angles[k])
    return lat


def test_equilateral_centre_pointing_matrix_is_symmetric():
    lat = equilateral()
    m = build_coupling_matrix(lat, OMEGA).values
    off = [m[0, 1], m[0, 2], m[1, 2]]
    assert np.allclose(off, off[0], rtol=1e-12, atol=0)
    base = resonant_coupling_rate(MG24, 40e-6, OMEGA)
    assert off[0].real == pytest.approx(-0.5 * base * oracles.TRIANGLE_FACTOR, rel=1e-12)


def test_matrix_hermitian_and_permutation_covariant():
    pos = [(0, 0), (37e-6, 4e-6), (15e-6, 33e-6)]
    freqs = [OMEGA, OMEGA + khz(3), OMEGA - khz(7)]
    angles = [0.3, -1.1, 2.0]
    phases = [0.0, 0.7, -0.4]
    sites = [TrapSite(k, pos[k], freqs[k], angles[k], 0.0, phases[k]) for k in range(3)]
    lat = LatticeConfig(MG24, tuple(sites))
    m = build_coupling_matrix(lat, OMEGA).values
    assert np.allclose(m, m.conj().T, atol=0)
    perm = [2, 0, 1]
    lat_p = LatticeConfig(MG24, tuple(sites[k] for k in perm))
    mp = build_coupling_matrix(lat_p, OMEGA).values
    assert np.allclose(mp, m[np.ix_(perm, perm)], rtol=1e-14, atol=0)


def test_coupling_matrix_validation():
    with pytest.raises(ValueError):
        CouplingMatrix(np.array([[0, 1], [2, 0]], complex))
    with pytest.raises(ValueError):
        CouplingMatrix(np.zeros((2, 3)))
    m = CouplingMatrix.two_site(2.0, 3.0)
    assert m.dimension == 2
    assert np.array_equal(m.detunings, [0.0, 3.0])


def test_spring_constants_equal_twice_rotation_factor():
    # the dipole tensor contraction e_i (3 r r - 1) e_j equals 2 f for in-plane modes
    rate = khz(2.0)
    for a0, a1 in [(0.0, 0.0), (0.4, -1.2), (math.pi / 2, math.pi / 2), (1.0, 2.5)]:
        lat = pair(rate, OMEGA, angles=(a0, a1))
        k01 = dipole_spring_constants(lat)[0, 1]
        # g = k / 2 omega and the exchange amplitude is -rate f / 2
        assert k01 / (2 * OMEGA) == pytest.approx(-0.5 * pair_exchange_rate(lat, 0, 1), rel=1e-12)


def test_pair_rate_uses_angles_relative_to_pair_axis():
    rate = khz(1.0)
    lat = pair(rate, OMEGA, angles=(0.5, 0.5))
    rotated = LatticeConfig(MG24, tuple(
        TrapSite(s.id, (s.position[1], s.position[0]), s.mode_frequency, s.mode_angle + math.pi / 2)
        for s in lat.sites))
    # the pair axis now points along +y and the modes turned with it
    assert pair_exchange_rate(rotated, 0, 1) == pytest.approx(pair_exchange_rate(lat, 0, 1), rel=1e-12)
