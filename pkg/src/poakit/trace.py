"""From raw location streams to semantic objects: tracks, POIs, trips, profiles.

The segmentation is rule based: smooth the stream with a moving window,
derive per-gap velocities, and declare a dwell (POI) wherever the velocity
stays under a speed threshold for at least a dwell threshold. Trips are the
movements between consecutive POIs. Home and school anchors come from
medoids of night-time and school-hour samples.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geo
from .errors import (
    InvalidParameterError,
    MalformedTrackError,
    NoVehicleModeError,
    PoakitError,
    UnresolvableProfileError,
)
from .geo import GeoPoint

MODES = ("stationary", "walking", "metro", "bus", "car")
VEHICLE_MODES = ("metro", "bus", "car")

# Defaults for the segmentation thresholds; all are configuration keys.
DEFAULT_V_STOP = 1.0       # m/s
DEFAULT_T_STOP = 300.0     # s
DEFAULT_SMOOTH_WINDOW = 5  # samples, odd

# Local-clock windows used for anchor inference and morning-trip selection.
NIGHT_START_S = 22 * 3600
NIGHT_END_S = 5 * 3600
SCHOOL_START_S = 9 * 3600
SCHOOL_END_S = 12 * 3600
MORNING_START_S = 5 * 3600
MORNING_END_S = 10 * 3600
SCHOOL_MATCH_RADIUS_M = 500.0
MIN_WINDOW_SAMPLES = 10

# Stub classifier for unlabeled segments: car above this median speed.
SPEED_HEURISTIC_CAR_MS = 7.0


@dataclass(frozen=True)
class LocationSample:
    user_id: str
    timestamp: int
    point: GeoPoint
    mode_label: Optional[str] = None


@dataclass
class Track:
    """Per-user time-ordered samples as parallel arrays."""

    user_id: str
    ts: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    modes: list[Optional[str]]

    def __len__(self) -> int:
        return len(self.ts)

    def point(self, i: int) -> GeoPoint:
        return GeoPoint(float(self.lat[i]), float(self.lon[i]))

    def points(self, start: int, stop: int) -> list[GeoPoint]:
        return [GeoPoint(float(a), float(b)) for a, b in zip(self.lat[start:stop], self.lon[start:stop])]


@dataclass(frozen=True)
class PointOfInterest:
    location: GeoPoint
    arrival: int
    departure: int
    start_index: int
    end_index: int  # inclusive


@dataclass
class Trip:
    user_id: str
    origin: PointOfInterest
    destination: PointOfInterest
    departure_time: int
    arrival_time: int
    path: list[GeoPoint]
    duration: float
    distance: float
    segment_modes: list[tuple[str, float]]
    mode_source: str = "labels"

    @property
    def trip_id(self) -> str:
        return f"{self.user_id}:{self.departure_time}"


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    home: GeoPoint
    school_id: str
    school_location: GeoPoint


def local_seconds_of_day(ts: int, utc_offset_s: int) -> int:
    return (int(ts) + utc_offset_s) % 86400


def local_day(ts: int, utc_offset_s: int) -> int:
    """Days since the epoch in local time."""
    return (int(ts) + utc_offset_s) // 86400


def is_weekday(ts: int, utc_offset_s: int) -> bool:
    # 1970-01-01 was a Thursday.
    return (local_day(ts, utc_offset_s) + 3) % 7 < 5


def read_samples_jsonl(path) -> dict[str, Track]:
    """Load JSON Lines samples into per-user tracks.

    One object per line: {"user": str, "ts": int, "lat": num, "lon": num,
    "mode": optional str}. Per user, samples are sorted by timestamp and
    duplicate timestamps are dropped (first wins).
    """
    per_user: dict[str, list[tuple[int, float, float, Optional[str]]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                user = str(rec["user"])
                entry = (int(rec["ts"]), float(rec["lat"]), float(rec["lon"]), rec.get("mode"))
            except (KeyError, TypeError, ValueError) as exc:
                raise PoakitError(f"{path}:{line_no}: bad sample record: {exc}") from exc
            per_user.setdefault(user, []).append(entry)
    tracks = {}
    for user in sorted(per_user):
        rows = sorted(per_user[user], key=lambda r: r[0])
        deduped = []
        last_ts = None
        for row in rows:
            if row[0] != last_ts:
                deduped.append(row)
                last_ts = row[0]
        ts = np.array([r[0] for r in deduped], dtype=np.int64)
        lat = np.array([r[1] for r in deduped], dtype=float)
        lon = np.array([r[2] for r in deduped], dtype=float)
        modes = [r[3] for r in deduped]
        tracks[user] = Track(user, ts, lat, lon, modes)
    return tracks


def read_school_catalog(path) -> dict[str, GeoPoint]:
    """CSV with header school_id,lat,lon."""
    out: dict[str, GeoPoint] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            out[row["school_id"]] = GeoPoint(float(row["lat"]), float(row["lon"]))
    return out


def split_track_by_local_day(track: Track, utc_offset_s: int) -> list[Track]:
    """One sub-track per local calendar day, order preserved.

    Daily processing keeps an overnight gap from fusing the previous
    evening's dwell with the next morning's; trips never span local
    midnight in this pipeline.
    """
    if len(track) == 0:
        return []
    days = (track.ts.astype(np.int64) + utc_offset_s) // 86400
    out = []
    start = 0
    for i in range(1, len(track) + 1):
        if i == len(track) or days[i] != days[start]:
            out.append(
                Track(
                    track.user_id,
                    track.ts[start:i],
                    track.lat[start:i],
                    track.lon[start:i],
                    track.modes[start:i],
                )
            )
            start = i
    return out


def smooth(track: Track, window: int) -> Track:
    """Moving-window coordinate mean; timestamps and sample count unchanged.

    The window is truncated at the boundaries, so the first and last points
    average fewer samples. window must be odd.
    """
    if window < 1 or window % 2 == 0:
        raise InvalidParameterError(f"smoothing window must be odd and >= 1, got {window}")
    n = len(track)
    if n == 0 or window == 1:
        return Track(track.user_id, track.ts.copy(), track.lat.copy(), track.lon.copy(), list(track.modes))
    half = window // 2
    lat = np.empty(n)
    lon = np.empty(n)
    cum_lat = np.concatenate([[0.0], np.cumsum(track.lat)])
    cum_lon = np.concatenate([[0.0], np.cumsum(track.lon)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half + 1, n)
    cnt = hi - lo
    lat = (cum_lat[hi] - cum_lat[lo]) / cnt
    lon = (cum_lon[hi] - cum_lon[lo]) / cnt
    return Track(track.user_id, track.ts.copy(), lat, lon, list(track.modes))


def _gap_velocities(track: Track) -> np.ndarray:
    dt = np.diff(track.ts.astype(float))
    if len(dt) and dt.min() <= 0:
        raise MalformedTrackError(f"user {track.user_id}: timestamps not strictly increasing")
    if len(dt) == 0:
        return np.empty(0)
    d = geo.geodesic_distances_paired(track.lat[:-1], track.lon[:-1], track.lat[1:], track.lon[1:])
    return d / dt


def segment_trips(
    track: Track,
    v_stop: float = DEFAULT_V_STOP,
    t_stop: float = DEFAULT_T_STOP,
    geometry: Optional[Track] = None,
) -> tuple[list[PointOfInterest], list[Trip]]:
    """Split a time-ordered track into dwell POIs and the trips between them.

    Velocities come from `track` (pass the smoothed track here); emitted POI
    locations, trip paths and distances come from `geometry` when given
    (pass the raw track), else from `track` itself. A maximal run of gaps
    with velocity < v_stop lasting at least t_stop becomes a POI; each trip
    runs from one POI's departure sample to the next POI's arrival sample.
    Movement before the first or after the last POI is discarded.
    """
    if v_stop <= 0 or t_stop <= 0:
        raise InvalidParameterError("v_stop and t_stop must be positive")
    geom = geometry if geometry is not None else track
    if geometry is not None and len(geometry) != len(track):
        raise InvalidParameterError("geometry track must parallel the velocity track")
    n = len(track)
    if n == 0:
        return [], []
    if n == 1:
        poi = PointOfInterest(geom.point(0), int(track.ts[0]), int(track.ts[0]), 0, 0)
        return [poi], []

    slow = _gap_velocities(track) < v_stop

    pois: list[PointOfInterest] = []
    i = 0
    while i < len(slow):
        if not slow[i]:
            i += 1
            continue
        j = i
        while j + 1 < len(slow) and slow[j + 1]:
            j += 1
        first, last = i, j + 1  # sample indices covered by the slow run
        if track.ts[last] - track.ts[first] >= t_stop:
            run_pts = geom.points(first, last + 1)
            loc = run_pts[geo.medoid_index(run_pts)]
            pois.append(
                PointOfInterest(loc, int(track.ts[first]), int(track.ts[last]), first, last)
            )
        i = j + 1

    trips: list[Trip] = []
    for prev, nxt in zip(pois, pois[1:]):
        dep_idx, arr_idx = prev.end_index, nxt.start_index
        if arr_idx <= dep_idx:
            continue
        path = geom.points(dep_idx, arr_idx + 1)
        duration = float(track.ts[arr_idx] - track.ts[dep_idx])
        modes = _segment_mode_distances(geom, dep_idx, arr_idx)
        distance = float(sum(d for _, d in modes[0]))
        trips.append(
            Trip(
                user_id=track.user_id,
                origin=prev,
                destination=nxt,
                departure_time=int(track.ts[dep_idx]),
                arrival_time=int(track.ts[arr_idx]),
                path=path,
                duration=duration,
                distance=distance,
                segment_modes=modes[0],
                mode_source=modes[1],
            )
        )
    return pois, trips


def _segment_mode_distances(
    geom: Track, dep_idx: int, arr_idx: int
) -> tuple[list[tuple[str, float]], str]:
    """Distance covered per contiguous same-mode run inside a trip.

    Each gap (i, i+1) is attributed to the label of sample i. If any label in
    the trip is missing, the whole trip falls back to a speed heuristic
    (median gap speed > 7 m/s -> car, else walking) and is flagged.
    """
    labels = geom.modes[dep_idx:arr_idx]
    edge_len = geo.geodesic_distances_paired(
        geom.lat[dep_idx:arr_idx],
        geom.lon[dep_idx:arr_idx],
        geom.lat[dep_idx + 1 : arr_idx + 1],
        geom.lon[dep_idx + 1 : arr_idx + 1],
    ).tolist()
    if any(lbl is None for lbl in labels):
        dts = np.diff(geom.ts[dep_idx : arr_idx + 1].astype(float))
        speeds = np.array(edge_len) / dts
        label = "car" if float(np.median(speeds)) > SPEED_HEURISTIC_CAR_MS else "walking"
        return [(label, float(sum(edge_len)))], "speed_heuristic"
    segments: list[tuple[str, float]] = []
    for lbl, dist in zip(labels, edge_len):
        if segments and segments[-1][0] == lbl:
            segments[-1] = (lbl, segments[-1][1] + dist)
        else:
            segments.append((str(lbl), dist))
    return segments, "labels"


def infer_home_school(
    track: Track,
    schools: dict[str, GeoPoint],
    utc_offset_s: int,
) -> UserProfile:
    """Home = medoid of night samples; school = catalog entry nearest the
    school-hours medoid, required within 500 m.

    Night window is 22:00-05:00 local every day; school window is
    09:00-12:00 local on weekdays. Fewer than 10 samples in either window,
    or no school within 500 m, makes the profile unresolvable.
    """
    sod = (track.ts.astype(np.int64) + utc_offset_s) % 86400
    night_mask = (sod >= NIGHT_START_S) | (sod < NIGHT_END_S)
    weekday = (((track.ts.astype(np.int64) + utc_offset_s) // 86400) + 3) % 7 < 5
    school_mask = weekday & (sod >= SCHOOL_START_S) & (sod < SCHOOL_END_S)

    if night_mask.sum() < MIN_WINDOW_SAMPLES or school_mask.sum() < MIN_WINDOW_SAMPLES:
        raise UnresolvableProfileError(
            f"user {track.user_id}: {int(night_mask.sum())} night / "
            f"{int(school_mask.sum())} school-window samples (need {MIN_WINDOW_SAMPLES})"
        )
    night_pts = [track.point(i) for i in np.flatnonzero(night_mask)]
    school_pts = [track.point(i) for i in np.flatnonzero(school_mask)]
    home = night_pts[geo.medoid_index(night_pts)]
    anchor = school_pts[geo.medoid_index(school_pts)]

    best_id, best_d = None, math.inf
    for school_id in sorted(schools):
        d = geo.geodesic_distance(anchor, schools[school_id])
        if d < best_d:
            best_id, best_d = school_id, d
    if best_id is None or best_d > SCHOOL_MATCH_RADIUS_M:
        raise UnresolvableProfileError(
            f"user {track.user_id}: nearest school {best_d:.0f} m away (limit "
            f"{SCHOOL_MATCH_RADIUS_M:.0f} m)"
        )
    return UserProfile(track.user_id, home, best_id, schools[best_id])


def principal_mode(trip: Trip, granularity: str) -> str:
    """Mode class covering the most distance, excluding walking/stationary.

    granularity "three-way" picks among metro/bus/car (ties resolved in that
    order); "binary" groups metro+bus as public vs car as private (tie goes
    to public).
    """
    if granularity not in ("three-way", "binary"):
        raise InvalidParameterError(f"unknown granularity {granularity!r}")
    totals = {m: 0.0 for m in VEHICLE_MODES}
    for mode, dist in trip.segment_modes:
        if mode in totals:
            totals[mode] += dist
    if all(v == 0.0 for v in totals.values()):
        raise NoVehicleModeError(f"trip {trip.trip_id} has no vehicle segment")
    if granularity == "three-way":
        return max(VEHICLE_MODES, key=lambda m: (totals[m], -VEHICLE_MODES.index(m)))
    public = totals["metro"] + totals["bus"]
    private = totals["car"]
    return "public" if public >= private else "private"


def nearest_rank(sorted_values: Sequence[float], percent: float) -> float:
    """Nearest-rank percentile: smallest value with >= percent% at or below."""
    if not sorted_values:
        raise InvalidParameterError("percentile of empty sequence")
    n = len(sorted_values)
    rank = max(1, math.ceil(percent / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


@dataclass
class CleanResult:
    trips: list[Trip]
    warned: bool
    dropped: int


def clean_dataset(trips: Sequence[Trip], trim_percent: float = 5.0) -> CleanResult:
    """Drop duration/distance outliers outside the [p, 100-p] percentile band.

    A trip is removed when its duration or its distance is strictly below
    the lower or strictly above the upper nearest-rank percentile of the
    respective marginal. Input order is preserved. With fewer than 20 trips
    the input is returned unchanged and flagged.
    """
    trips = list(trips)
    if trim_percent <= 0:
        return CleanResult(trips, False, 0)
    if len(trips) < 20:
        return CleanResult(trips, True, 0)
    durations = sorted(t.duration for t in trips)
    distances = sorted(t.distance for t in trips)
    lo_d, hi_d = nearest_rank(durations, trim_percent), nearest_rank(durations, 100 - trim_percent)
    lo_x, hi_x = nearest_rank(distances, trim_percent), nearest_rank(distances, 100 - trim_percent)
    kept = [
        t
        for t in trips
        if lo_d <= t.duration <= hi_d and lo_x <= t.distance <= hi_x
    ]
    return CleanResult(kept, False, len(trips) - len(kept))


def select_morning_trips(
    trips: Iterable[Trip],
    profile: UserProfile,
    utc_offset_s: int,
) -> list[Trip]:
    """First trip per local day departing 05:00-10:00 that ends at school.

    "Ends at school" means the destination POI is within 500 m of the
    profile's school location.
    """
    by_day: dict[int, Trip] = {}
    for trip in sorted(trips, key=lambda t: t.departure_time):
        sod = local_seconds_of_day(trip.departure_time, utc_offset_s)
        if not (MORNING_START_S <= sod < MORNING_END_S):
            continue
        if geo.geodesic_distance(trip.destination.location, profile.school_location) > SCHOOL_MATCH_RADIUS_M:
            continue
        day = local_day(trip.departure_time, utc_offset_s)
        by_day.setdefault(day, trip)
    return [by_day[d] for d in sorted(by_day)]


def trip_to_record(trip: Trip) -> dict:
    """Stable JSON-ready representation of a trip (documented schema)."""
    return {
        "trip_id": trip.trip_id,
        "user": trip.user_id,
        "departure_ts": trip.departure_time,
        "arrival_ts": trip.arrival_time,
        "duration_s": round(trip.duration, 3),
        "distance_m": round(trip.distance, 3),
        "origin": {
            "lat": round(trip.origin.location.lat, 6),
            "lon": round(trip.origin.location.lon, 6),
            "arrival_ts": trip.origin.arrival,
            "departure_ts": trip.origin.departure,
        },
        "destination": {
            "lat": round(trip.destination.location.lat, 6),
            "lon": round(trip.destination.location.lon, 6),
            "arrival_ts": trip.destination.arrival,
            "departure_ts": trip.destination.departure,
        },
        "path": [[round(p.lat, 6), round(p.lon, 6)] for p in trip.path],
        "modes": [[m, round(d, 3)] for m, d in trip.segment_modes],
        "mode_source": trip.mode_source,
    }


def trip_from_record(rec: dict) -> Trip:
    origin = PointOfInterest(
        GeoPoint(rec["origin"]["lat"], rec["origin"]["lon"]),
        rec["origin"]["arrival_ts"],
        rec["origin"]["departure_ts"],
        -1,
        -1,
    )
    destination = PointOfInterest(
        GeoPoint(rec["destination"]["lat"], rec["destination"]["lon"]),
        rec["destination"]["arrival_ts"],
        rec["destination"]["departure_ts"],
        -1,
        -1,
    )
    return Trip(
        user_id=rec["user"],
        origin=origin,
        destination=destination,
        departure_time=rec["departure_ts"],
        arrival_time=rec["arrival_ts"],
        path=[GeoPoint(lat, lon) for lat, lon in rec["path"]],
        duration=float(rec["duration_s"]),
        distance=float(rec["distance_m"]),
        segment_modes=[(m, float(d)) for m, d in rec["modes"]],
        mode_source=rec.get("mode_source", "labels"),
    )


def write_trips_jsonl(path, trips: Iterable[Trip]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trip in trips:
            fh.write(json.dumps(trip_to_record(trip), sort_keys=True) + "\n")


def read_trips_jsonl(path) -> list[Trip]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trip_from_record(json.loads(line)))
    return out
