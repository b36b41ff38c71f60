"""Coordinate helpers shared by the kriging and dependence code.

Station coordinates are stored as lon/lat degrees.  All distance-based models
(exponential kriging covariance, power semivariograms) work on a local
equirectangular projection in kilometres so that power variograms with
exponent up to 2 stay conditionally negative definite.
"""
from __future__ import annotations

import numpy as np

EARTH_RADIUS_KM = 6371.0088


def project_km(lon, lat, lon0: float | None = None, lat0: float | None = None) -> np.ndarray:
    """Project lon/lat (degrees) to planar x/y kilometres about (lon0, lat0).

    The reference defaults to the mean of the inputs.  Returns an array of
    shape ``(n, 2)``.
    """
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    if lon0 is None:
        lon0 = float(np.mean(lon))
    if lat0 is None:
        lat0 = float(np.mean(lat))
    k = np.pi / 180.0 * EARTH_RADIUS_KM
    x = (lon - lon0) * k * np.cos(np.deg2rad(lat0))
    y = (lat - lat0) * k
    return np.column_stack([x, y])


def pairwise_distance(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Euclidean distance matrix between rows of ``a`` and ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in kilometres."""
    lon1, lat1, lon2, lat2 = map(np.deg2rad, (lon1, lat1, lon2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
