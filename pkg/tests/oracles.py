"""Frozen reference values, computed independently of the package.

Each constant records how it was obtained so it can be re-derived by hand
or with an arbitrary-precision calculator.
"""

import math

# (1/4 pi eps0) 2 e^2 / (d^3 m omega) / 2pi for m = 24 u, d = 40 um,
# omega = 2pi 4 MHz, CODATA 2022 constants, evaluated with 40-digit
# decimal arithmetic.
RESONANT_RATE_MG24_40UM_4MHZ_HZ = 1145.597737148152125612

# kappa = 1 / (1 + (delta/Omega)^2)
DETUNING_RATIOS = (0.0, 1.0, 2.0, 5.0, 10.0)
DETUNED_EFFICIENCY = (1.0, 0.5, 0.2, 1.0 / 26.0, 1.0 / 101.0)

# 1.5^2 / (1.5^2 + 100^2)
SWITCH_OFF_EFFICIENCY = 2.249493863880627e-4

# cos a cos b - sin a sin b / 2
ROTATION_CASES = (
    ((0.0, 0.0), 1.0),
    ((math.pi / 2, math.pi / 2), -0.5),
    ((math.atan(math.sqrt(2.0)), math.atan(math.sqrt(2.0))), 0.0),
    ((math.pi / 6, 5 * math.pi / 6), -7.0 / 8.0),
)
MAGIC_ANGLE = math.atan(math.sqrt(2.0))

# Equilateral triangle with centre-pointing modes: every pair sees the
# rotation factor -7/8. A single excited site keeps |1/3 + 2/3 e^{3igt}|^2 of
# its quanta, so at most 8/9 leave it; populations oscillate at 3|g|.
TRIANGLE_FACTOR = -7.0 / 8.0
TRIANGLE_TRANSFER = 8.0 / 9.0
TRIANGLE_FREQUENCY_OVER_RATE = 21.0 / 16.0

# Reference settings of the two-site and staged protocols.
FIG2 = {"rate_khz": 1.92, "efficiency": 0.46, "tau_us": 800.0, "n_tot": 2202.0}
FIG3 = {"rate_khz": 3.09, "efficiency": 0.33, "tau_us": 380.0, "n_initial": 6880.0,
        "stage1_nbar": 1060.0, "stage1_err": 25.0}
FIG4C = {"frequency_khz": (2.09, 1.80, 2.02), "frequency_err_khz": (0.08, 0.06, 0.07),
         "amplitude_pp": (470.0, 381.0, 447.0)}

# Recovery tolerances of the two-site round trip.
RATE_TOL_KHZ = 0.05
EFFICIENCY_TOL = 0.03
TAU_REL_TOL = 0.15
