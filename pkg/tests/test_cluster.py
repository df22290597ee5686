import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poakit import cluster, geo
from poakit.cluster import build_clusters, distance_rule_cluster, grid_assign
from poakit.errors import CapacityError
from poakit.geo import GeoPoint, PlanarPoint
from poakit.trace import Trip, UserProfile

SGT = 8 * 3600
ORIGIN = GeoPoint(1.35, 103.80)


def pts(*xy):
    return geo.unproject_local([PlanarPoint(x, y) for x, y in xy], ORIGIN)


class TestGridAssign:
    def test_singleton(self):
        (home,) = pts((10, 10))
        assert len(set(grid_assign([home], 400))) == 1

    def test_points_in_same_cell(self):
        homes = pts((50, 50), (150, 50))
        a, b = grid_assign(homes, 400)
        assert a == b

    def test_points_across_boundary(self):
        # bounding box corner is the first point; 401 m along x crosses r=400
        homes = pts((0, 0), (401, 0))
        a, b = grid_assign(homes, 400)
        assert a != b

    def test_boundary_point_takes_higher_cell(self):
        homes = pts((0, 0), (400.0, 0))
        ids = grid_assign(homes, 400.0)
        assert ids[0] != ids[1]

    def test_same_cell_index_same_id(self):
        rng = np.random.default_rng(6)
        homes = pts(*[(rng.uniform(0, 2000), rng.uniform(0, 2000)) for _ in range(60)])
        ids = grid_assign(homes, 400)
        spec = cluster.grid_spec(homes, 400)
        planar = geo.project_local(homes, spec.origin)
        import math

        for p, lbl in zip(planar, ids):
            assert lbl == f"g{math.floor(p.x / 400)}:{math.floor(p.y / 400)}"


class TestDistanceRule:
    def test_identical_points_one_cluster(self):
        homes = pts((5, 5), (5, 5), (5, 5))
        assert len(set(distance_rule_cluster(homes, 400))) == 1

    def test_collinear_tie_break(self):
        # 0-300-600: the (0,300) pair merges first by the smallest-index rule,
        # then {0,1} vs {2} has complete-linkage distance 600 > 400.
        homes = pts((0, 0), (300, 0), (600, 0))
        labels = distance_rule_cluster(homes, 400)
        assert labels[0] == labels[1]
        assert labels[2] != labels[0]

    def test_two_blobs(self):
        rng = np.random.default_rng(12)
        blob_a = [(rng.uniform(0, 100), rng.uniform(0, 100)) for _ in range(20)]
        blob_b = [(5000 + rng.uniform(0, 100), rng.uniform(0, 100)) for _ in range(20)]
        homes = pts(*(blob_a + blob_b))
        labels = distance_rule_cluster(homes, 400)
        assert len(set(labels)) == 2
        assert len(set(labels[:20])) == 1
        assert len(set(labels[20:])) == 1

    def test_diameter_bound_holds(self):
        rng = np.random.default_rng(3)
        homes = pts(*[(rng.uniform(0, 3000), rng.uniform(0, 3000)) for _ in range(120)])
        for r in (200.0, 500.0, 900.0):
            labels = distance_rule_cluster(homes, r)
            lat = np.array([p.lat for p in homes])
            lon = np.array([p.lon for p in homes])
            dist = geo.geodesic_distance_matrix(lat, lon)
            for lbl in set(labels):
                idx = [i for i, l in enumerate(labels) if l == lbl]
                assert dist[np.ix_(idx, idx)].max() <= r + 1e-9

    def test_cluster_count_monotone_in_r(self):
        rng = np.random.default_rng(14)
        homes = pts(*[(rng.uniform(0, 4000), rng.uniform(0, 4000)) for _ in range(100)])
        counts = [
            len(set(distance_rule_cluster(homes, r)))
            for r in (100.0, 300.0, 500.0, 800.0, 1500.0)
        ]
        assert counts == sorted(counts, reverse=True)

    def test_capacity_guard(self):
        homes = pts((0, 0), (10, 10), (20, 20))
        with pytest.raises(CapacityError):
            distance_rule_cluster(homes, 400, max_points=2)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        homes = pts(*[(rng.uniform(0, 2000), rng.uniform(0, 2000)) for _ in range(50)])
        assert distance_rule_cluster(homes, 400) == distance_rule_cluster(homes, 400)


def mk_trip(user, departure, mode="car", duration=900.0):
    return Trip(
        user_id=user,
        origin=None,
        destination=None,
        departure_time=departure,
        arrival_time=departure + int(duration),
        path=[],
        duration=duration,
        distance=5000.0,
        segment_modes=[(mode, 5000.0)],
    )


def mk_profiles(user_xy, school_xy=(8000, 0)):
    school = pts(school_xy)[0]
    profs = {}
    for user, xy in user_xy.items():
        profs[user] = UserProfile(user, pts(xy)[0], "S1", school)
    return profs


def local_ts(hh, mm, day=0):
    base = 4 * 86400  # Monday
    return base + day * 86400 + hh * 3600 + mm * 60 - SGT


class TestBuildClusters:
    def test_one_trip_singleton(self):
        profs = mk_profiles({"u1": (0, 0)})
        res = build_clusters([mk_trip("u1", local_ts(7, 5))], profs, utc_offset_s=SGT)
        assert len(res.clusters) == 1
        assert len(res.clusters[0].trips) == 1

    def test_same_window_same_cluster(self):
        profs = mk_profiles({"u1": (0, 0), "u2": (50, 0)})
        trips = [mk_trip("u1", local_ts(7, 5)), mk_trip("u2", local_ts(7, 15))]
        res = build_clusters(trips, profs, utc_offset_s=SGT)
        assert len(res.clusters) == 1

    def test_window_boundary_splits(self):
        profs = mk_profiles({"u1": (0, 0), "u2": (50, 0)})
        trips = [mk_trip("u1", local_ts(7, 15)), mk_trip("u2", local_ts(7, 25))]
        res = build_clusters(trips, profs, utc_offset_s=SGT)
        assert len(res.clusters) == 2

    def test_partition_property(self):
        rng = np.random.default_rng(10)
        profs = mk_profiles({f"u{i}": (rng.uniform(0, 3000), rng.uniform(0, 3000)) for i in range(30)})
        trips = [
            mk_trip(f"u{i}", local_ts(7, int(rng.integers(0, 60))), mode=rng.choice(["car", "bus"]))
            for i in range(30)
        ]
        res = build_clusters(trips, profs, method="distance-rule", utc_offset_s=SGT)
        sizes = sum(len(c.trips) for c in res.clusters)
        assert sizes == 30 and res.skipped == 0
        seen = set()
        for c in res.clusters:
            for t in c.trips:
                assert t.trip_id not in seen
                seen.add(t.trip_id)

    def test_unresolved_profile_skipped(self):
        profs = mk_profiles({"u1": (0, 0)})
        trips = [mk_trip("u1", local_ts(7, 5)), mk_trip("ghost", local_ts(7, 5))]
        res = build_clusters(trips, profs, utc_offset_s=SGT)
        assert res.skipped == 1
        assert sum(len(c.trips) for c in res.clusters) == 1

    def test_granularity_changes_key(self):
        profs = mk_profiles({"u1": (0, 0), "u2": (20, 0)})
        trips = [mk_trip("u1", local_ts(7, 5), "bus"), mk_trip("u2", local_ts(7, 6), "car")]
        binary = build_clusters(trips, profs, granularity="binary", utc_offset_s=SGT)
        assert {c.key.mode_class for c in binary.clusters} == {"public", "private"}
        three = build_clusters(trips, profs, granularity="three-way", utc_offset_s=SGT)
        assert {c.key.mode_class for c in three.clusters} == {"bus", "car"}

    def test_school_destination_merge(self):
        schools = {
            "S_A": pts((8000, 0))[0],
            "S_B": pts((8050, 0))[0],
            "S_C": pts((12000, 0))[0],
        }
        mapping = cluster.merge_co_located_schools(schools)
        assert mapping["S_A"] == mapping["S_B"] == "S_A"
        assert mapping["S_C"] == "S_C"


class TestCentroid:
    def test_singleton(self):
        profs = mk_profiles({"u1": (30, 40)})
        c = cluster.cluster_centroid([mk_trip("u1", 0)], profs)
        assert geo.geodesic_distance(c, profs["u1"].home) < 1e-6

    def test_two_points_lower_user_id(self):
        profs = mk_profiles({"u1": (0, 0), "u2": (100, 0)})
        c = cluster.cluster_centroid([mk_trip("u2", 0), mk_trip("u1", 0)], profs)
        assert geo.geodesic_distance(c, profs["u1"].home) < 1e-6

    def test_center_of_triangle_wins(self):
        # center point of an equilateral 300 m triangle minimizes summed distance
        import math

        s = 300.0
        tri = [(0, 0), (s, 0), (s / 2, s * math.sqrt(3) / 2)]
        center = (s / 2, s * math.sqrt(3) / 6)
        profs = mk_profiles(
            {"a": tri[0], "b": tri[1], "c": tri[2], "d": center}
        )
        c = cluster.cluster_centroid([mk_trip(u, 0) for u in "abcd"], profs)
        assert geo.geodesic_distance(c, profs["d"].home) < 1e-6


class TestManifest:
    def test_manifest_written(self, tmp_path):
        profs = mk_profiles({"u1": (0, 0), "u2": (2000, 0)})
        trips = [mk_trip("u1", local_ts(7, 5)), mk_trip("u2", local_ts(7, 6))]
        res = build_clusters(trips, profs, utc_offset_s=SGT)
        path = tmp_path / "clusters.csv"
        cluster.write_cluster_manifest(path, res, "grid", 400.0)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("cluster_id,method,r,")
        assert len(lines) == 1 + len(res.clusters)


@settings(max_examples=20, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0, 3000), st.floats(0, 3000)),
        min_size=2,
        max_size=25,
    ),
    st.sampled_from([150.0, 400.0, 900.0]),
)
def test_distance_rule_diameter_property(xy, r):
    homes = pts(*xy)
    labels = distance_rule_cluster(homes, r)
    lat = np.array([p.lat for p in homes])
    lon = np.array([p.lon for p in homes])
    dist = geo.geodesic_distance_matrix(lat, lon)
    for lbl in set(labels):
        idx = [i for i, l in enumerate(labels) if l == lbl]
        assert dist[np.ix_(idx, idx)].max() <= r + 1e-9
