"""Spherical geometry helpers shared by the tracker, density and metrics code."""

import numpy as np

from .errors import InvalidCoordinate

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = EARTH_RADIUS_KM * np.pi / 180.0


def wrap_lon(lon):
    """Normalize longitude(s) to [0, 360)."""
    out = np.mod(lon, 360.0)
    # np.mod(-1e-17, 360) rounds to 360.0
    out = np.where(out >= 360.0, 0.0, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def lon_diff(lon, ref):
    """Signed longitude difference ``lon - ref`` folded into [-180, 180)."""
    d = np.mod(np.asarray(lon, dtype=float) - ref + 180.0, 360.0) - 180.0
    if np.ndim(d) == 0:
        return float(d)
    return d


def central_angle(lat1, lon1, lat2, lon2):
    """Haversine central angle in radians; inputs in degrees, broadcastable."""
    phi1 = np.radians(lat1)
    phi2 = np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(np.asarray(lon2, dtype=float) - lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def great_circle_deg(lat1, lon1, lat2, lon2):
    """Great-circle separation expressed in degrees of arc."""
    return np.degrees(central_angle(lat1, lon1, lat2, lon2))


def haversine_km(p1, p2):
    """Great-circle distance in km between two ``(lat, lon)`` points in degrees.

    Uses the haversine form with a mean Earth radius of 6371 km.
    """
    lat1, lon1 = p1
    lat2, lon2 = p2
    for lat, lon in (p1, p2):
        if not (np.isfinite(lat) and np.isfinite(lon)) or abs(lat) > 90.0:
            raise InvalidCoordinate(f"invalid coordinate ({lat}, {lon})")
    return float(EARTH_RADIUS_KM * central_angle(lat1, lon1, lat2, lon2))


def haversine_km_array(lat1, lon1, lat2, lon2):
    """Vectorized :func:`haversine_km` without validation."""
    return EARTH_RADIUS_KM * central_angle(lat1, lon1, lat2, lon2)
