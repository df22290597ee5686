"""Group comparable trips by the 4-variable index: spatial cluster of the
home location, 20-minute departure window on the local day, destination
school, and principal transport mode.

Two spatial methods are provided. The grid method tiles the smallest
bounding box of all home locations with square cells of edge r. The
distance-rule method runs agglomerative complete-linkage clustering on the
geodesic distance matrix and cuts the dendrogram so every cluster's
diameter stays at or below r.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geo, trace
from .errors import CapacityError, InvalidParameterError
from .geo import GeoPoint
from .trace import Trip, UserProfile

DEFAULT_CELL_SIZE_M = 400.0
DEFAULT_WINDOW_S = 1200
SCHOOL_MERGE_RADIUS_M = 100.0
DISTANCE_RULE_MAX_POINTS = 50_000


@dataclass(frozen=True)
class GridSpec:
    """South-west corner of the home bounding box plus the cell edge size."""

    origin: GeoPoint
    cell_size: float


@dataclass(frozen=True)
class ClusterKey:
    location_id: str
    day: int            # local days since epoch
    window_index: int   # departure window of the configured width
    school_id: str
    mode_class: str


@dataclass
class Cluster:
    key: ClusterKey
    trips: list[Trip]
    centroid: GeoPoint

    @property
    def cluster_id(self) -> str:
        k = self.key
        return f"{k.location_id}|d{k.day}|w{k.window_index}|{k.school_id}|{k.mode_class}"


def grid_spec(homes: Sequence[GeoPoint], r: float) -> GridSpec:
    if r <= 0:
        raise InvalidParameterError("cell size must be positive")
    if not homes:
        raise InvalidParameterError("no home locations")
    south = min(p.lat for p in homes)
    west = min(p.lon for p in homes)
    return GridSpec(GeoPoint(south, west), r)


def grid_assign(homes: Sequence[GeoPoint], r: float, spec: Optional[GridSpec] = None) -> list[str]:
    """Cell id per home; boundary points fall into the higher-index cell."""
    spec = spec or grid_spec(homes, r)
    planar = geo.project_local(homes, spec.origin)
    ids = []
    for p in planar:
        ix = math.floor(p.x / spec.cell_size)
        iy = math.floor(p.y / spec.cell_size)
        ids.append(f"g{ix}:{iy}")
    return ids


def complete_linkage_merges(dist: np.ndarray) -> list[tuple[float, int, int]]:
    """Agglomerative complete-linkage merge sequence for a distance matrix.

    Returns (height, i, j) triples in merge order, i < j, where i and j are
    cluster labels (the smallest original index of each cluster's members).
    Ties pick the lexicographically smallest (i, j) pair. Complete linkage
    has no inversions, so heights come out non-decreasing.
    """
    n = len(dist)
    if n <= 1:
        return []
    D = np.array(dist, dtype=float, copy=True)
    np.fill_diagonal(D, np.inf)
    dead = np.zeros(n, dtype=bool)
    merges = []
    for _ in range(n - 1):
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        h = float(D[i, j])
        merges.append((h, i, j))
        # cluster j folds into i; complete linkage keeps the max distance
        np.maximum(D[i, :], D[j, :], out=D[i, :])
        D[:, i] = D[i, :]
        D[i, i] = np.inf
        D[j, :] = np.inf
        D[:, j] = np.inf
        dead[j] = True
    return merges


def _labels_from_merges(n: int, merges: Iterable[tuple[float, int, int]], r: float) -> list[int]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for h, i, j in merges:
        if h > r:
            break
        a, b = find(i), find(j)
        if a != b:
            # keep the smaller index as the representative
            if a > b:
                a, b = b, a
            parent[b] = a
    reps = [find(i) for i in range(n)]
    order: dict[int, int] = {}
    labels = []
    for rep in reps:
        if rep not in order:
            order[rep] = len(order)
        labels.append(order[rep])
    return labels


def distance_rule_cluster(
    homes: Sequence[GeoPoint],
    r: float,
    max_points: int = DISTANCE_RULE_MAX_POINTS,
) -> list[str]:
    """Complete-linkage clustering cut so every cluster diameter is <= r."""
    if r <= 0:
        raise InvalidParameterError("r must be positive")
    if len(homes) > max_points:
        raise CapacityError(
            f"{len(homes)} points exceed the {max_points}-point distance-matrix guard"
        )
    if not homes:
        return []
    lat = np.array([p.lat for p in homes])
    lon = np.array([p.lon for p in homes])
    dist = geo.geodesic_distance_matrix(lat, lon)
    merges = complete_linkage_merges(dist)
    return [f"d{lbl}" for lbl in _labels_from_merges(len(homes), merges, r)]


def merge_co_located_schools(schools: dict[str, GeoPoint]) -> dict[str, str]:
    """Map each school id to a shared destination id.

    Schools whose catalog locations sit within 100 m of each other share one
    destination (the lexicographically smallest member id).
    """
    ids = sorted(schools)
    mapping = {s: s for s in ids}
    for i, a in enumerate(ids):
        for b in ids[i + 1 :]:
            if geo.geodesic_distance(schools[a], schools[b]) <= SCHOOL_MERGE_RADIUS_M:
                root = min(mapping[a], mapping[b])
                mapping[a] = mapping[b] = root
    # collapse chains
    for s in ids:
        while mapping[mapping[s]] != mapping[s]:
            mapping[s] = mapping[mapping[s]]
    return mapping


@dataclass
class ClusterResult:
    clusters: list[Cluster]
    skipped: int
    location_by_user: dict[str, str]
    grid: Optional[GridSpec] = None


def build_clusters(
    trips: Sequence[Trip],
    profiles: dict[str, UserProfile],
    method: str = "grid",
    r: float = DEFAULT_CELL_SIZE_M,
    window_s: int = DEFAULT_WINDOW_S,
    granularity: str = "binary",
    utc_offset_s: int = 8 * 3600,
    school_destinations: Optional[dict[str, str]] = None,
) -> ClusterResult:
    """Partition trips into clusters keyed by (location, window, school, mode).

    Trips whose user has no resolved profile, or which have no vehicle
    segment, are skipped and counted. The spatial location id is computed
    from each user's home via the chosen method; every trip lands in exactly
    one cluster.
    """
    if method not in ("grid", "distance-rule"):
        raise InvalidParameterError(f"unknown clustering method {method!r}")
    usable = []
    skipped = 0
    for trip in sorted(trips, key=lambda t: (t.user_id, t.departure_time)):
        if trip.user_id not in profiles:
            skipped += 1
            continue
        usable.append(trip)

    users = sorted({t.user_id for t in usable})
    homes = [profiles[u].home for u in users]
    grid: Optional[GridSpec] = None
    if not users:
        return ClusterResult([], skipped, {}, None)
    if method == "grid":
        grid = grid_spec(homes, r)
        ids = grid_assign(homes, r, grid)
    else:
        ids = distance_rule_cluster(homes, r)
    location_by_user = dict(zip(users, ids))

    buckets: dict[ClusterKey, list[Trip]] = {}
    for trip in usable:
        try:
            mode_class = trace.principal_mode(trip, granularity)
        except Exception:
            skipped += 1
            continue
        prof = profiles[trip.user_id]
        school = prof.school_id
        if school_destinations:
            school = school_destinations.get(school, school)
        sod = trace.local_seconds_of_day(trip.departure_time, utc_offset_s)
        key = ClusterKey(
            location_id=location_by_user[trip.user_id],
            day=trace.local_day(trip.departure_time, utc_offset_s),
            window_index=sod // window_s,
            school_id=school,
            mode_class=mode_class,
        )
        buckets.setdefault(key, []).append(trip)

    clusters = []
    for key in sorted(buckets, key=lambda k: (k.location_id, k.day, k.window_index, k.school_id, k.mode_class)):
        members = buckets[key]
        clusters.append(Cluster(key, members, cluster_centroid(members, profiles)))
    return ClusterResult(clusters, skipped, location_by_user, grid)


def cluster_centroid(trips: Sequence[Trip], profiles: dict[str, UserProfile]) -> GeoPoint:
    """Medoid of the member home locations; ties go to the lowest user id."""
    users = sorted({t.user_id for t in trips})
    homes = [profiles[u].home for u in users]
    return homes[geo.medoid_index(homes)]


def write_cluster_manifest(path, result: ClusterResult, method: str, r: float) -> None:
    """CSV manifest: one row per cluster, stable ordering and formatting."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "cluster_id",
                "method",
                "r",
                "day",
                "window_index",
                "school_id",
                "mode_class",
                "size",
                "centroid_lat",
                "centroid_lon",
            ]
        )
        for c in result.clusters:
            writer.writerow(
                [
                    c.cluster_id,
                    method,
                    f"{r:.6g}",
                    c.key.day,
                    c.key.window_index,
                    c.key.school_id,
                    c.key.mode_class,
                    len(c.trips),
                    f"{c.centroid.lat:.6f}",
                    f"{c.centroid.lon:.6f}",
                ]
            )


def write_assignments(path, result: ClusterResult) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trip_id", "cluster_id"])
        for c in result.clusters:
            for t in sorted(c.trips, key=lambda t: t.trip_id):
                writer.writerow([t.trip_id, c.cluster_id])
