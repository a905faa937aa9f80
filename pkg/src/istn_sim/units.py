"""Unit conversions and physical constants shared across the simulator."""

import numpy as np

SPEED_OF_LIGHT_M_S = 299_792_458.0
EARTH_RADIUS_M = 6_371_000.0                # spherical Earth model
MU_EARTH_M3_S2 = 3.986e14                   # gravitational parameter
GEO_ALTITUDE_M = 35_786_000.0
EARTH_ROTATION_RAD_S = 7.2921159e-5
SYSTEM_NOISE_TEMP_K = 290.0                 # used to derive peak gain from G/T


def dbm_to_w(dbm):
    """Convert dBm to Watts."""
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0) * 1e-3


def w_to_dbm(w):
    """Convert Watts to dBm."""
    return 10.0 * np.log10(np.asarray(w, dtype=float) / 1e-3)


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def linear_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def friis_gain(distance_m, frequency_hz):
    """Free-space path gain (linear power ratio) at the given range.

    Standard Friis factor (lambda / 4 pi d)^2 with no antenna terms.
    """
    wavelength = SPEED_OF_LIGHT_M_S / np.asarray(frequency_hz, dtype=float)
    return (wavelength / (4.0 * np.pi * np.asarray(distance_m, dtype=float))) ** 2


def circular_orbit_period_s(semi_major_axis_m):
    """Orbital period of a circular orbit from Kepler's third law."""
    a = float(semi_major_axis_m)
    return 2.0 * np.pi * np.sqrt(a**3 / MU_EARTH_M3_S2)
