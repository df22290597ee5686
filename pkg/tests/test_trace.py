import json
import math

import numpy as np
import pytest

from poakit import geo, trace
from poakit.errors import (
    InvalidParameterError,
    MalformedTrackError,
    NoVehicleModeError,
    UnresolvableProfileError,
)
from poakit.geo import GeoPoint
from poakit.trace import Track, Trip, PointOfInterest

SGT = 8 * 3600
ORIGIN = GeoPoint(1.35, 103.80)


def make_track(user, rows):
    """rows: (ts, x_m, y_m) or (ts, x_m, y_m, mode) in a local planar frame."""
    ts = np.array([r[0] for r in rows], dtype=np.int64)
    pts = geo.unproject_local([geo.PlanarPoint(r[1], r[2]) for r in rows], ORIGIN)
    lat = np.array([p.lat for p in pts])
    lon = np.array([p.lon for p in pts])
    modes = [r[3] if len(r) > 3 else None for r in rows]
    return Track(user, ts, lat, lon, modes)


def walk_rows(t0, duration, speed, x0=0.0, period=13, mode=None, y=0.0):
    rows = []
    t = t0
    while t <= t0 + duration:
        rows.append((t, x0 + speed * (t - t0), y) + ((mode,) if mode else ()))
        t += period
    return rows


def stay_rows(t0, duration, x, period=13, mode=None, y=0.0):
    rows = []
    t = t0
    while t <= t0 + duration:
        rows.append((t, x, y) + ((mode,) if mode else ()))
        t += period
    return rows


class TestSmooth:
    def test_window_one_is_identity(self):
        tr = make_track("u", [(0, 0, 0), (13, 10, 0), (26, 30, 5)])
        out = trace.smooth(tr, 1)
        assert np.array_equal(out.lat, tr.lat)
        assert np.array_equal(out.lon, tr.lon)
        assert np.array_equal(out.ts, tr.ts)

    def test_constant_stream_unchanged(self):
        tr = make_track("u", [(i * 13, 100.0, 50.0) for i in range(20)])
        out = trace.smooth(tr, 5)
        assert np.allclose(out.lat, tr.lat)
        assert np.allclose(out.lon, tr.lon)

    def test_outlier_attenuated(self):
        rows = [(i * 13, i * 10.0, 0.0) for i in range(21)]
        rows[10] = (130, 100.0, 50.0)  # 50 m lateral spike
        tr = make_track("u", rows)
        out = trace.smooth(tr, 5)
        spike = geo.geodesic_distance(out.point(10), make_track("u", [(130, 100.0, 0.0)]).point(0))
        assert spike <= 10.0 + 1e-6

    def test_preserves_count_and_timestamps(self):
        tr = make_track("u", [(i * 13 + 7, i * 5.0, 0.0) for i in range(9)])
        out = trace.smooth(tr, 7)
        assert len(out) == len(tr)
        assert np.array_equal(out.ts, tr.ts)

    def test_even_window_rejected(self):
        tr = make_track("u", [(0, 0, 0)])
        with pytest.raises(InvalidParameterError):
            trace.smooth(tr, 4)


class TestSegmentTrips:
    def test_all_stationary_single_poi(self):
        tr = make_track("u", stay_rows(0, 1800, 0.0))
        pois, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(pois) == 1
        assert trips == []

    def test_stay_move_stay(self):
        rows = stay_rows(0, 1800, 0.0)
        move_start = rows[-1][0] + 13
        rows += walk_rows(move_start, 600, 8.0, x0=8.0 * 13)
        stay2_start = rows[-1][0] + 13
        x_end = rows[-1][1]
        rows += stay_rows(stay2_start, 1800, x_end)
        tr = make_track("u", rows)
        pois, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(pois) == 2
        assert len(trips) == 1
        assert trips[0].duration == pytest.approx(600, abs=2 * 13)
        # endpoints tie to the bounding POIs
        assert trips[0].departure_time == pois[0].departure
        assert trips[0].arrival_time == pois[1].arrival

    def test_short_stop_does_not_split(self):
        rows = stay_rows(0, 1800, 0.0)
        t = rows[-1][0] + 13
        rows += walk_rows(t, 300, 8.0, x0=8.0 * 13)
        # 60 s traffic light: below t_stop, must not split the trip
        t = rows[-1][0] + 13
        x = rows[-1][1]
        rows += stay_rows(t, 60, x)
        t = rows[-1][0] + 13
        rows += walk_rows(t, 300, 8.0, x0=x + 8.0 * 13)
        t = rows[-1][0] + 13
        rows += stay_rows(t, 1800, rows[-1][1])
        tr = make_track("u", rows)
        pois, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(pois) == 2
        assert len(trips) == 1

    def test_leading_and_trailing_movement_discarded(self):
        rows = walk_rows(0, 300, 8.0)
        t = rows[-1][0] + 13
        rows += stay_rows(t, 900, rows[-1][1])
        t = rows[-1][0] + 13
        rows += walk_rows(t, 300, 8.0, x0=rows[-1][1] + 8 * 13)
        tr = make_track("u", rows)
        pois, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(pois) == 1
        assert trips == []

    def test_non_monotonic_rejected(self):
        tr = make_track("u", [(0, 0, 0), (13, 5, 0), (13, 10, 0)])
        with pytest.raises(MalformedTrackError):
            trace.segment_trips(tr, 1.0, 300.0)

    def test_deterministic(self):
        rows = stay_rows(0, 600, 0.0) + walk_rows(613, 400, 9.0, x0=9 * 13) + stay_rows(
            1026, 600, 9.0 * 413
        )
        tr = make_track("u", rows)
        a = trace.segment_trips(tr, 1.0, 300.0)
        b = trace.segment_trips(tr, 1.0, 300.0)
        assert [(p.arrival, p.departure) for p in a[0]] == [(p.arrival, p.departure) for p in b[0]]
        assert [t.duration for t in a[1]] == [t.duration for t in b[1]]

    def test_trips_non_overlapping(self):
        rows = stay_rows(0, 900, 0.0)
        for leg in range(2):
            t = rows[-1][0] + 13
            rows += walk_rows(t, 400, 8.0, x0=rows[-1][1] + 8 * 13)
            t = rows[-1][0] + 13
            rows += stay_rows(t, 900, rows[-1][1])
        tr = make_track("u", rows)
        _, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(trips) == 2
        assert trips[0].arrival_time <= trips[1].departure_time

    def test_distance_matches_path(self):
        rows = stay_rows(0, 600, 0.0) + walk_rows(613, 400, 9.0, x0=9 * 13) + stay_rows(
            1026, 600, 9.0 * 413
        )
        tr = make_track("u", rows)
        _, trips = trace.segment_trips(tr, 1.0, 300.0)
        (trip,) = trips
        assert trip.distance == pytest.approx(geo.path_length(trip.path), rel=1e-9)
        assert sum(d for _, d in trip.segment_modes) == pytest.approx(trip.distance, rel=0.01)


class TestModeSegments:
    def trip_with_modes(self, mode_spans):
        rows = stay_rows(0, 600, 0.0, mode="stationary")
        x = 0.0
        for mode, dist in mode_spans:
            t = rows[-1][0] + 13
            speed = 10.0
            rows += [
                (tt, xx, 0.0, mode)
                for tt, xx, _unused in walk_rows(t, dist / speed, speed, x0=x + speed * 13)
            ]
            x = rows[-1][1]
        t = rows[-1][0] + 13
        rows += stay_rows(t, 600, x, mode="stationary")
        tr = make_track("u", rows)
        _, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert len(trips) == 1
        return trips[0]

    def test_single_mode(self):
        trip = self.trip_with_modes([("car", 5000)])
        assert trace.principal_mode(trip, "three-way") == "car"
        assert trace.principal_mode(trip, "binary") == "private"

    def test_distance_argmax(self):
        trip = self.trip_with_modes([("bus", 6000), ("metro", 2000), ("walking", 500)])
        assert trace.principal_mode(trip, "three-way") == "bus"
        assert trace.principal_mode(trip, "binary") == "public"

    def test_tie_prefers_metro(self):
        trip = Trip(
            user_id="u",
            origin=None,
            destination=None,
            departure_time=0,
            arrival_time=100,
            path=[],
            duration=100,
            distance=8000,
            segment_modes=[("metro", 4000.0), ("bus", 4000.0)],
        )
        assert trace.principal_mode(trip, "three-way") == "metro"

    def test_walking_only_raises(self):
        trip = Trip(
            user_id="u",
            origin=None,
            destination=None,
            departure_time=0,
            arrival_time=100,
            path=[],
            duration=100,
            distance=500,
            segment_modes=[("walking", 500.0)],
        )
        with pytest.raises(NoVehicleModeError):
            trace.principal_mode(trip, "three-way")

    def test_unlabeled_fast_trip_flagged_car(self):
        rows = stay_rows(0, 600, 0.0) + walk_rows(613, 400, 9.0, x0=9 * 13) + stay_rows(
            1026, 600, 9.0 * 413
        )
        tr = make_track("u", rows)
        _, trips = trace.segment_trips(tr, 1.0, 300.0)
        assert trips[0].mode_source == "speed_heuristic"
        assert trips[0].segment_modes[0][0] == "car"


class TestInferHomeSchool:
    def day_ts(self, day, hh, mm=0):
        # build a UTC timestamp whose local (UTC+8) time is day/hh:mm
        # day 0 = 1970-01-05, a Monday
        base = 4 * 86400
        return base + day * 86400 + hh * 3600 + mm * 60 - SGT

    def build_track(self, home_xy, school_xy, extra_night=None):
        rows = []
        for day in range(2):
            t0 = self.day_ts(day, 23)
            rows += [(t0 + i * 13, home_xy[0], home_xy[1]) for i in range(15)]
            t1 = self.day_ts(day, 9, 30)
            rows += [(t1 + i * 13, school_xy[0], school_xy[1]) for i in range(15)]
        if extra_night:
            rows += extra_night
        rows.sort(key=lambda r: r[0])
        return make_track("u", rows)

    def test_home_at_single_point(self):
        tr = self.build_track((0, 0), (5000, 0))
        schools = {"S1": geo.unproject_local([geo.PlanarPoint(5000, 0)], ORIGIN)[0]}
        prof = trace.infer_home_school(tr, schools, SGT)
        assert geo.geodesic_distance(prof.home, ORIGIN) < 1.0
        assert prof.school_id == "S1"

    def test_medoid_robust_to_scatter(self):
        rng = np.random.default_rng(4)
        extra = []
        # one noisy night sample per day, a few km out: medoid should ignore them
        for day in range(2):
            t = self.day_ts(day, 22, 30)
            extra.append((t, float(rng.uniform(2000, 5000)), float(rng.uniform(2000, 5000))))
        tr = self.build_track((0, 0), (5000, 0), extra_night=extra)
        schools = {"S1": geo.unproject_local([geo.PlanarPoint(5000, 0)], ORIGIN)[0]}
        prof = trace.infer_home_school(tr, schools, SGT)
        assert geo.geodesic_distance(prof.home, ORIGIN) < 100.0

    def test_nearest_school_within_500m(self):
        tr = self.build_track((0, 0), (5000, 0))
        schools = {
            "NEAR": geo.unproject_local([geo.PlanarPoint(5200, 0)], ORIGIN)[0],
            "FAR": geo.unproject_local([geo.PlanarPoint(8000, 0)], ORIGIN)[0],
        }
        prof = trace.infer_home_school(tr, schools, SGT)
        assert prof.school_id == "NEAR"

    def test_school_too_far_unresolvable(self):
        tr = self.build_track((0, 0), (5000, 0))
        schools = {"S1": geo.unproject_local([geo.PlanarPoint(8000, 0)], ORIGIN)[0]}
        with pytest.raises(UnresolvableProfileError):
            trace.infer_home_school(tr, schools, SGT)

    def test_too_few_samples_unresolvable(self):
        rows = [(self.day_ts(0, 23) + i * 13, 0.0, 0.0) for i in range(15)]
        tr = make_track("u", sorted(rows))
        with pytest.raises(UnresolvableProfileError):
            trace.infer_home_school(tr, {"S1": ORIGIN}, SGT)


def synthetic_trip(duration, distance, user="u", departure=0):
    return Trip(
        user_id=user,
        origin=None,
        destination=None,
        departure_time=departure,
        arrival_time=departure + int(duration),
        path=[],
        duration=float(duration),
        distance=float(distance),
        segment_modes=[("car", float(distance))],
    )


class TestCleanDataset:
    def test_distinct_durations_identical_distances(self):
        trips = [synthetic_trip(600 + i, 5000) for i in range(100)]
        res = trace.clean_dataset(trips)
        # strict trimming outside [p5, p95]: 4 below, 5 above
        assert len(res.trips) == 91
        assert not res.warned
        kept = [t.duration for t in res.trips]
        assert min(kept) == 604 and max(kept) == 694

    def test_identical_trips_all_survive(self):
        trips = [synthetic_trip(600, 5000) for _ in range(50)]
        res = trace.clean_dataset(trips)
        assert len(res.trips) == 50

    def test_single_outlier_removed(self):
        trips = [synthetic_trip(600, 5000) for _ in range(99)] + [synthetic_trip(9000, 5000)]
        res = trace.clean_dataset(trips)
        assert all(t.duration == 600 for t in res.trips)

    def test_small_dataset_returned_with_warning(self):
        trips = [synthetic_trip(600 + i, 5000) for i in range(10)]
        res = trace.clean_dataset(trips)
        assert res.warned and len(res.trips) == 10

    def test_output_is_subsequence(self):
        rng = np.random.default_rng(8)
        trips = [synthetic_trip(rng.uniform(300, 3000), rng.uniform(1000, 9000)) for _ in range(60)]
        res = trace.clean_dataset(trips)
        it = iter(trips)
        assert all(t in it for t in res.trips)  # order-preserving subsequence

    def test_zero_percent_disables(self):
        trips = [synthetic_trip(600 + i, 5000) for i in range(100)]
        res = trace.clean_dataset(trips, trim_percent=0)
        assert len(res.trips) == 100


class TestMorningSelection:
    def test_first_school_trip_of_day(self):
        school = geo.unproject_local([geo.PlanarPoint(5000, 0)], ORIGIN)[0]
        prof = trace.UserProfile("u", ORIGIN, "S1", school)
        day0 = 4 * 86400  # Monday local midnight
        poi_school = PointOfInterest(school, 0, 0, -1, -1)
        poi_elsewhere = PointOfInterest(
            geo.unproject_local([geo.PlanarPoint(2000, 2000)], ORIGIN)[0], 0, 0, -1, -1
        )

        def t(hh, mm=0):
            return day0 + hh * 3600 + mm * 60 - SGT

        def mk(dep, dest):
            tr = synthetic_trip(900, 5000, departure=dep)
            tr.destination = dest
            return tr

        trips = [
            mk(t(6, 0), poi_elsewhere),   # wrong destination
            mk(t(7, 0), poi_school),      # the morning trip
            mk(t(8, 0), poi_school),      # later duplicate
            mk(t(12, 0), poi_school),     # outside the window
        ]
        picked = trace.select_morning_trips(trips, prof, SGT)
        assert len(picked) == 1
        assert picked[0].departure_time == t(7, 0)


class TestRoundTrip:
    def test_jsonl_round_trip(self, tmp_path):
        rows = stay_rows(0, 600, 0.0, mode="stationary") + [
            (613 + i * 13, 104 + i * 104, 0.0, "car") for i in range(31)
        ]
        rows += stay_rows(rows[-1][0] + 13, 600, rows[-1][1], mode="stationary")
        tr = make_track("u", rows)
        _, trips = trace.segment_trips(tr, 1.0, 300.0)
        path = tmp_path / "trips.jsonl"
        trace.write_trips_jsonl(path, trips)
        back = trace.read_trips_jsonl(path)
        assert len(back) == len(trips)
        assert back[0].trip_id == trips[0].trip_id
        assert back[0].duration == pytest.approx(trips[0].duration)
        assert len(back[0].path) == len(trips[0].path)

    def test_sample_ingestion_sorts_and_dedups(self, tmp_path):
        path = tmp_path / "samples.jsonl"
        recs = [
            {"user": "u", "ts": 26, "lat": 1.35, "lon": 103.8},
            {"user": "u", "ts": 0, "lat": 1.35, "lon": 103.8, "mode": "car"},
            {"user": "u", "ts": 13, "lat": 1.35, "lon": 103.8},
            {"user": "u", "ts": 13, "lat": 9.99, "lon": 9.99},
        ]
        path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        tracks = trace.read_samples_jsonl(path)
        tr = tracks["u"]
        assert list(tr.ts) == [0, 13, 26]
        assert tr.modes[0] == "car"
        assert tr.lat[1] == pytest.approx(1.35)
