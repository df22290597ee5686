"""Geodesic and planar geometry shared by the trace-facing modules.

Everything here treats the Earth as a sphere of radius 6,371 km, which is
accurate to well under 0.5% at city scale. Planar work happens in a local
equirectangular chart anchored at a caller-chosen origin; the chart is only
valid within ~100 km of that origin and projection attempts beyond it are
rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import LineString
from shapely.ops import polygonize, unary_union

from .errors import (
    DegenerateTripError,
    InvalidCoordinateError,
    InvalidParameterError,
    OutOfChartError,
)

EARTH_RADIUS_M = 6_371_000.0

# Mitre joins on the contour band fall back to bevel once the join spike
# would exceed twice the band width (ratio is relative to the half-width).
_MITRE_LIMIT_RATIO = 4.0

_CHART_RADIUS_M = 100_000.0


@dataclass(frozen=True)
class GeoPoint:
    """One geographic coordinate, degrees, WGS-ish lat/lon on the sphere."""

    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise InvalidCoordinateError(f"non-finite coordinate ({self.lat}, {self.lon})")
        if not (-90.0 <= self.lat <= 90.0 and -180.0 <= self.lon <= 180.0):
            raise InvalidCoordinateError(f"coordinate out of range ({self.lat}, {self.lon})")


@dataclass(frozen=True)
class PlanarPoint:
    """Meters east (x) / north (y) of a projection origin."""

    x: float
    y: float


Polyline = Sequence[GeoPoint]


def geodesic_distance(p: GeoPoint, q: GeoPoint) -> float:
    """Great-circle distance in meters (haversine on the 6,371 km sphere)."""
    phi1 = math.radians(p.lat)
    phi2 = math.radians(q.lat)
    dphi = math.radians(q.lat - p.lat)
    dlam = math.radians(q.lon - p.lon)
    a = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def geodesic_distance_matrix(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Pairwise haversine distances (meters) for degree arrays, vectorized."""
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float))
    dphi = phi[:, None] - phi[None, :]
    dlam = lam[:, None] - lam[None, :]
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi)[:, None] * np.cos(phi)[None, :] * np.sin(dlam / 2.0) ** 2
    np.clip(a, 0.0, 1.0, out=a)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


def path_length(points: Polyline) -> float:
    """Sum of geodesic edge lengths along a polyline."""
    return sum(geodesic_distance(a, b) for a, b in zip(points, points[1:]))


def medoid_index(points: Polyline) -> int:
    """Index of the point minimizing summed geodesic distance to the rest.

    Ties go to the lowest index. Cost is O(n^2) but chunked so large dwell
    runs do not blow up memory.
    """
    n = len(points)
    if n == 0:
        raise InvalidParameterError("medoid of empty point set")
    if n == 1:
        return 0
    lat = np.array([p.lat for p in points])
    lon = np.array([p.lon for p in points])
    sums = np.zeros(n)
    chunk = max(1, int(4e6) // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        block = geodesic_distance_matrix_rect(lat[start:stop], lon[start:stop], lat, lon)
        sums[start:stop] = block.sum(axis=1)
    return int(np.argmin(sums))


def geodesic_distances_paired(
    lat_a: np.ndarray, lon_a: np.ndarray, lat_b: np.ndarray, lon_b: np.ndarray
) -> np.ndarray:
    """Element-wise haversine distances between two equal-length point arrays."""
    phi_a = np.radians(np.asarray(lat_a, dtype=float))
    phi_b = np.radians(np.asarray(lat_b, dtype=float))
    dphi = phi_b - phi_a
    dlam = np.radians(np.asarray(lon_b, dtype=float)) - np.radians(np.asarray(lon_a, dtype=float))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi_a) * np.cos(phi_b) * np.sin(dlam / 2.0) ** 2
    np.clip(a, 0.0, 1.0, out=a)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


def geodesic_distance_matrix_rect(
    lat_a: np.ndarray, lon_a: np.ndarray, lat_b: np.ndarray, lon_b: np.ndarray
) -> np.ndarray:
    """Distances between two point sets, shape (len(a), len(b))."""
    phi_a = np.radians(np.asarray(lat_a, dtype=float))[:, None]
    phi_b = np.radians(np.asarray(lat_b, dtype=float))[None, :]
    lam_a = np.radians(np.asarray(lon_a, dtype=float))[:, None]
    lam_b = np.radians(np.asarray(lon_b, dtype=float))[None, :]
    a = np.sin((phi_b - phi_a) / 2.0) ** 2 + np.cos(phi_a) * np.cos(phi_b) * np.sin((lam_b - lam_a) / 2.0) ** 2
    np.clip(a, 0.0, 1.0, out=a)
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(a))


def project_local(points: Polyline, origin: GeoPoint) -> list[PlanarPoint]:
    """Equirectangular projection of `points` onto a chart centered at `origin`.

    x = R * cos(lat0) * dlon, y = R * dlat (radians). The origin maps to
    (0, 0). Points further than 100 km from the origin raise OutOfChartError.
    """
    cos0 = math.cos(math.radians(origin.lat))
    out = []
    for p in points:
        if geodesic_distance(p, origin) > _CHART_RADIUS_M:
            raise OutOfChartError(f"point ({p.lat}, {p.lon}) beyond 100 km of chart origin")
        x = EARTH_RADIUS_M * cos0 * math.radians(p.lon - origin.lon)
        y = EARTH_RADIUS_M * math.radians(p.lat - origin.lat)
        out.append(PlanarPoint(x, y))
    return out


def unproject_local(points: Sequence[PlanarPoint], origin: GeoPoint) -> list[GeoPoint]:
    """Inverse of project_local for the same origin."""
    cos0 = math.cos(math.radians(origin.lat))
    out = []
    for p in points:
        lat = origin.lat + math.degrees(p.y / EARTH_RADIUS_M)
        lon = origin.lon + math.degrees(p.x / (EARTH_RADIUS_M * cos0))
        out.append(GeoPoint(lat, lon))
    return out


def _dedup(points: Iterable[tuple[float, float]]) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for p in points:
        if not out or p != out[-1]:
            out.append(p)
    return out


def polygon_area(points: Sequence[PlanarPoint]) -> float:
    """Area in m^2 of a closed (possibly self-intersecting) vertex sequence.

    The closed ring is noded at every self-intersection and decomposed into
    the simple loops of its arrangement; the sum of their absolute (shoelace)
    areas is returned, so crossing figures are never under-measured by
    signed-area cancellation. Fewer than 3 distinct vertices give 0.
    """
    coords = _dedup((p.x, p.y) for p in points)
    if len(coords) > 1 and coords[0] == coords[-1]:
        coords = coords[:-1]
    if len(coords) < 3:
        return 0.0
    ring = coords + [coords[0]]
    pieces = unary_union(LineString(ring))
    return float(sum(face.area for face in polygonize(pieces)))


def enclosed_area(a: Polyline, b: Polyline) -> float:
    """Area in m^2 enclosed between two routes sharing (roughly) endpoints.

    Projects both onto one local chart, concatenates `a` forward with `b`
    reversed into a closed ring, and measures it with polygon_area. The two
    arguments are put in a canonical order first, so the result is exactly
    symmetric in (a, b).
    """
    if len(a) < 2 or len(b) < 2:
        raise DegenerateTripError("enclosed_area needs two points per route")
    first, second = sorted((tuple((p.lat, p.lon) for p in a), tuple((p.lat, p.lon) for p in b)))
    origin = GeoPoint(
        (first[0][0] + first[-1][0]) / 2.0,
        (first[0][1] + first[-1][1]) / 2.0,
    )
    pts = [GeoPoint(lat, lon) for lat, lon in first + second[::-1]]
    return polygon_area(project_local(pts, origin))


def outer_contour_area(a: Polyline, w: float) -> float:
    """Area in m^2 of the width-`w` band around route `a`.

    Each edge is inflated into a w-wide rectangle; corners are joined with
    mitres (falling back to bevel past a 2w spike limit) and the ends are
    capped flat, so a straight route of length L yields exactly w * L.
    """
    if w <= 0 or not math.isfinite(w):
        raise InvalidParameterError(f"band width must be positive, got {w}")
    if len(a) < 2:
        raise DegenerateTripError("outer contour needs at least two points")
    origin = GeoPoint((a[0].lat + a[-1].lat) / 2.0, (a[0].lon + a[-1].lon) / 2.0)
    coords = _dedup((p.x, p.y) for p in project_local(a, origin))
    if len(coords) < 2:
        raise DegenerateTripError("outer contour of a zero-length route")
    band = LineString(coords).buffer(
        w / 2.0, cap_style="flat", join_style="mitre", mitre_limit=_MITRE_LIMIT_RATIO
    )
    return float(band.area)


def translate(points: Polyline, east_m: float, north_m: float) -> list[GeoPoint]:
    """Shift every point by a planar offset in meters (small-offset model)."""
    out = []
    for p in points:
        dlat = math.degrees(north_m / EARTH_RADIUS_M)
        dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(p.lat))))
        out.append(GeoPoint(p.lat + dlat, p.lon + dlon))
    return out


def resample(points: Polyline, max_spacing_m: float) -> list[GeoPoint]:
    """Densify a polyline so consecutive points are at most `max_spacing_m` apart.

    Interpolation is linear in lat/lon, which is indistinguishable from the
    great-circle chord at city scale. Original vertices are kept.
    """
    if max_spacing_m <= 0:
        raise InvalidParameterError("max_spacing_m must be positive")
    if len(points) < 2:
        return list(points)
    out = [points[0]]
    for p, q in zip(points, points[1:]):
        d = geodesic_distance(p, q)
        if d > max_spacing_m:
            n = int(math.ceil(d / max_spacing_m))
            for k in range(1, n):
                t = k / n
                out.append(GeoPoint(p.lat + t * (q.lat - p.lat), p.lon + t * (q.lon - p.lon)))
        out.append(q)
    return out
