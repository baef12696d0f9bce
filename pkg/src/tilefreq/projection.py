"""Ellipsoidal Lambert Azimuthal Equal-Area projection (ETRS89-LAEA, EPSG:3035).

Forward and inverse mappings on the GRS80 ellipsoid, following the standard
closed-form LAEA equations with the authalic-latitude series for the inverse.
"""

import numpy as np

GRS80_A = 6378137.0
GRS80_F = 1.0 / 298.257222101
LAT0 = 52.0
LON0 = 10.0
FALSE_EASTING = 4321000.0
FALSE_NORTHING = 3210000.0

_E2 = GRS80_F * (2.0 - GRS80_F)
_E = np.sqrt(_E2)


def _q(sin_phi):
    return (1.0 - _E2) * (
        sin_phi / (1.0 - _E2 * sin_phi**2)
        - (1.0 / (2.0 * _E)) * np.log((1.0 - _E * sin_phi) / (1.0 + _E * sin_phi))
    )


_QP = _q(1.0)
_RQ = GRS80_A * np.sqrt(_QP / 2.0)
_SIN_PHI0 = np.sin(np.radians(LAT0))
_BETA0 = np.arcsin(_q(_SIN_PHI0) / _QP)
_D = (
    GRS80_A
    * np.cos(np.radians(LAT0))
    / (np.sqrt(1.0 - _E2 * _SIN_PHI0**2) * _RQ * np.cos(_BETA0))
)


class ProjectionDomainError(ValueError):
    pass


def project_to_laea(lat, lon):
    """Project WGS84 degrees to EPSG:3035 ``(easting, northing)`` in meters.

    Accepts scalars or arrays. Raises ProjectionDomainError for out-of-range
    coordinates and for the antipode of the projection center, where the
    mapping is undefined.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise ProjectionDomainError("coordinates must be finite")
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
        raise ProjectionDomainError("lat must lie in [-90, 90] and lon in [-180, 180]")

    beta = np.arcsin(np.clip(_q(np.sin(np.radians(lat))) / _QP, -1.0, 1.0))
    dlon = np.radians(lon - LON0)
    denom = 1.0 + np.sin(_BETA0) * np.sin(beta) + np.cos(_BETA0) * np.cos(beta) * np.cos(dlon)
    if np.any(denom <= 1e-12):
        raise ProjectionDomainError("point is antipodal to the projection center")
    b = _RQ * np.sqrt(2.0 / denom)
    easting = FALSE_EASTING + b * _D * np.cos(beta) * np.sin(dlon)
    northing = FALSE_NORTHING + (b / _D) * (
        np.cos(_BETA0) * np.sin(beta) - np.sin(_BETA0) * np.cos(beta) * np.cos(dlon)
    )
    if easting.ndim == 0:
        return float(easting), float(northing)
    return easting, northing


def unproject_from_laea(easting, northing):
    """Inverse of :func:`project_to_laea`; returns ``(lat, lon)`` in degrees."""
    x = np.asarray(easting, dtype=float) - FALSE_EASTING
    y = np.asarray(northing, dtype=float) - FALSE_NORTHING
    rho = np.hypot(x / _D, _D * y)
    c = 2.0 * np.arcsin(np.clip(rho / (2.0 * _RQ), -1.0, 1.0))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(rho > 0, _D * y * np.sin(c) / np.where(rho > 0, rho, 1.0), 0.0)
    beta = np.arcsin(np.clip(np.cos(c) * np.sin(_BETA0) + ratio * np.cos(_BETA0), -1.0, 1.0))
    lon = LON0 + np.degrees(
        np.arctan2(
            x * np.sin(c),
            _D * rho * np.cos(_BETA0) * np.cos(c) - _D**2 * y * np.sin(_BETA0) * np.sin(c),
        )
    )
    e4, e6 = _E2**2, _E2**3
    lat = np.degrees(
        beta
        + (_E2 / 3.0 + 31.0 * e4 / 180.0 + 517.0 * e6 / 5040.0) * np.sin(2.0 * beta)
        + (23.0 * e4 / 360.0 + 251.0 * e6 / 3780.0) * np.sin(4.0 * beta)
        + (761.0 * e6 / 45360.0) * np.sin(6.0 * beta)
    )
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


def haversine_m(lat1, lon1, lat2, lon2, radius=6371008.8):
    """Great-circle distance in meters on a sphere of the given radius."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(h))
