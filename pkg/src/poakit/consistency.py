"""Cross-day behavioral consistency: does a student keep the same transport
mode, and the same route, across morning trips?

Route similarity is geometric: the area enclosed between two routes is
compared against the average area of width-w bands around each route. Two
routes are consistent when the enclosed area is strictly below that
averaged threshold. The band width is calibrated on synthetic negatives
(translated copies of real trips) and jittered positives.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from . import geo, trace
from .errors import CalibrationFailureError, DegenerateTripError, InvalidParameterError
from .geo import GeoPoint
from .trace import Trip

DEFAULT_BAND_WIDTH_M = 50.0
RESAMPLE_SPACING_M = 20.0
DEFAULT_NEGATIVE_OFFSETS_M = (100.0, 200.0, 400.0)
DEFAULT_CANDIDATE_WIDTHS_M = tuple(float(w) for w in range(10, 101, 10))
POSITIVE_JITTER_SIGMA_M = 5.0


@dataclass(frozen=True)
class ConsistencyVerdict:
    user_id: str
    trip_a: str
    trip_b: str
    enclosed_m2: float
    contour_a_m2: float
    contour_b_m2: float
    consistent: bool


def route_consistent(a: Sequence[GeoPoint], b: Sequence[GeoPoint], w: float,
                     user_id: str = "", trip_a: str = "", trip_b: str = "") -> ConsistencyVerdict:
    """Enclosed-area criterion with the averaged band threshold.

    Both paths are resampled to <= 20 m spacing first so sparse traces do
    not under-measure the enclosed area. The verdict is strict: a tie with
    the threshold counts as inconsistent.
    """
    if len(a) < 2 or len(b) < 2:
        raise DegenerateTripError("route consistency needs >= 2 points per path")
    a_dense = geo.resample(a, RESAMPLE_SPACING_M)
    b_dense = geo.resample(b, RESAMPLE_SPACING_M)
    enclosed = geo.enclosed_area(a_dense, b_dense)
    contour_a = geo.outer_contour_area(a_dense, w)
    contour_b = geo.outer_contour_area(b_dense, w)
    return ConsistencyVerdict(
        user_id=user_id,
        trip_a=trip_a,
        trip_b=trip_b,
        enclosed_m2=enclosed,
        contour_a_m2=contour_a,
        contour_b_m2=contour_b,
        consistent=enclosed < (contour_a + contour_b) / 2.0,
    )


@dataclass
class ModeConsistencyReport:
    granularity: str
    eligible_users: int
    ineligible_users: int
    consistent_by_class: dict[str, int]
    inconsistent_users: int

    @property
    def consistent_users(self) -> int:
        return sum(self.consistent_by_class.values())

    @property
    def consistent_fraction(self) -> float:
        if self.eligible_users == 0:
            return 0.0
        return self.consistent_users / self.eligible_users


def mode_consistency_report(
    trips_by_user: dict[str, Sequence[Trip]], granularity: str
) -> ModeConsistencyReport:
    """Count users whose morning trips all share one principal mode class.

    Users with fewer than two trips are ineligible and only counted.
    """
    eligible = ineligible = inconsistent = 0
    by_class: dict[str, int] = {}
    for user in sorted(trips_by_user):
        trips = trips_by_user[user]
        if len(trips) < 2:
            ineligible += 1
            continue
        eligible += 1
        try:
            modes = {trace.principal_mode(t, granularity) for t in trips}
        except Exception:
            inconsistent += 1
            continue
        if len(modes) == 1:
            cls = next(iter(modes))
            by_class[cls] = by_class.get(cls, 0) + 1
        else:
            inconsistent += 1
    return ModeConsistencyReport(
        granularity=granularity,
        eligible_users=eligible,
        ineligible_users=ineligible,
        consistent_by_class=by_class,
        inconsistent_users=inconsistent,
    )


@dataclass
class RouteConsistencyReport:
    band_width_m: float
    rule: str  # "all-pairs" | "majority"
    eligible_users: int
    consistent_users: int
    verdicts: list[ConsistencyVerdict]
    per_user: dict[str, bool]

    @property
    def consistent_fraction(self) -> float:
        if self.eligible_users == 0:
            return 0.0
        return self.consistent_users / self.eligible_users


def route_consistency_report(
    trips_by_user: dict[str, Sequence[Trip]],
    w: float = DEFAULT_BAND_WIDTH_M,
    rule: str = "all-pairs",
) -> RouteConsistencyReport:
    """Pairwise route consistency for users with a fixed mode.

    A user is route-consistent when all pairs of their morning trips are
    pairwise consistent ("all-pairs"), or when a majority of pairs are
    ("majority", kept behind this flag for sensitivity checks).
    """
    if rule not in ("all-pairs", "majority"):
        raise InvalidParameterError(f"unknown aggregation rule {rule!r}")
    verdicts: list[ConsistencyVerdict] = []
    per_user: dict[str, bool] = {}
    for user in sorted(trips_by_user):
        trips = list(trips_by_user[user])
        if len(trips) < 2:
            continue
        pair_flags = []
        for i in range(len(trips)):
            for j in range(i + 1, len(trips)):
                v = route_consistent(
                    trips[i].path,
                    trips[j].path,
                    w,
                    user_id=user,
                    trip_a=trips[i].trip_id,
                    trip_b=trips[j].trip_id,
                )
                verdicts.append(v)
                pair_flags.append(v.consistent)
        if rule == "all-pairs":
            per_user[user] = all(pair_flags)
        else:
            per_user[user] = sum(pair_flags) > len(pair_flags) / 2.0
    return RouteConsistencyReport(
        band_width_m=w,
        rule=rule,
        eligible_users=len(per_user),
        consistent_users=sum(per_user.values()),
        verdicts=verdicts,
        per_user=per_user,
    )


def _lateral_unit(path: Sequence[GeoPoint]) -> tuple[float, float]:
    """Unit vector perpendicular to the path's endpoint-to-endpoint bearing."""
    origin = path[0]
    planar = geo.project_local([path[0], path[-1]], origin)
    dx = planar[1].x - planar[0].x
    dy = planar[1].y - planar[0].y
    norm = math.hypot(dx, dy)
    if norm == 0:
        return 0.0, 1.0
    return -dy / norm, dx / norm


def translated_negative(path: Sequence[GeoPoint], offset_m: float) -> list[GeoPoint]:
    """The same route shifted laterally; a synthetic 'different route'."""
    ex, ey = _lateral_unit(path)
    return geo.translate(path, offset_m * ex, offset_m * ey)


def jittered_positive(path: Sequence[GeoPoint], sigma_m: float, rng) -> list[GeoPoint]:
    """The same route with isotropic per-point noise; a synthetic re-run."""
    out = []
    for p in path:
        dx, dy = rng.normal(0.0, sigma_m, 2)
        out.append(geo.translate([p], float(dx), float(dy))[0])
    return out


@dataclass
class BandWidthCalibration:
    band_width_m: float
    candidates: list[float]
    negatives_rejected: dict[float, bool]
    positive_pass_rate: dict[float, float]


def calibrate_band_width(
    sample_paths: Sequence[Sequence[GeoPoint]],
    offsets_m: Sequence[float] = DEFAULT_NEGATIVE_OFFSETS_M,
    candidates_m: Sequence[float] = DEFAULT_CANDIDATE_WIDTHS_M,
    jitter_sigma_m: float = POSITIVE_JITTER_SIGMA_M,
    seed: int = 0,
) -> BandWidthCalibration:
    """Pick the largest band width that rejects every translated negative.

    Negative pairs are (path, laterally translated path) for each offset;
    positive pairs are (path, jittered path). The returned width is the
    largest candidate classifying all negatives inconsistent; per-candidate
    positive pass rates are reported alongside for inspection.
    """
    if len(sample_paths) < 10:
        raise InvalidParameterError("calibration needs at least 10 sample paths")
    if not offsets_m or not candidates_m:
        raise InvalidParameterError("offsets and candidate widths must be non-empty")
    rng = np.random.default_rng([seed, 104729])
    negatives = [
        (path, translated_negative(path, off)) for path in sample_paths for off in offsets_m
    ]
    positives = [(path, jittered_positive(path, jitter_sigma_m, rng)) for path in sample_paths]

    rejected: dict[float, bool] = {}
    pass_rate: dict[float, float] = {}
    for w in sorted(candidates_m):
        rejected[w] = all(
            not route_consistent(a, b, w).consistent for a, b in negatives
        )
        ok = sum(route_consistent(a, b, w).consistent for a, b in positives)
        pass_rate[w] = ok / len(positives)

    passing = [w for w, ok in rejected.items() if ok]
    if not passing:
        raise CalibrationFailureError(
            "no candidate width rejects all negatives; "
            f"offsets={list(offsets_m)}, candidates={sorted(candidates_m)}"
        )
    return BandWidthCalibration(
        band_width_m=max(passing),
        candidates=sorted(candidates_m),
        negatives_rejected=rejected,
        positive_pass_rate=pass_rate,
    )


def write_verdicts_csv(path, mode_report: ModeConsistencyReport,
                       route_report: RouteConsistencyReport,
                       trips_by_user: dict[str, Sequence[Trip]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "n_trips", "mode_consistent", "route_consistent"])
        mode_ok_users = set()
        for user in sorted(trips_by_user):
            trips = trips_by_user[user]
            if len(trips) < 2:
                continue
            try:
                modes = {trace.principal_mode(t, mode_report.granularity) for t in trips}
                mode_ok = len(modes) == 1
            except Exception:
                mode_ok = False
            if mode_ok:
                mode_ok_users.add(user)
            writer.writerow(
                [
                    user,
                    len(trips),
                    int(mode_ok),
                    int(route_report.per_user.get(user, False)),
                ]
            )


def summary_json_dict(mode_report: ModeConsistencyReport,
                      route_report: RouteConsistencyReport) -> dict:
    return {
        "mode": {
            "granularity": mode_report.granularity,
            "eligible_users": mode_report.eligible_users,
            "ineligible_users": mode_report.ineligible_users,
            "consistent_by_class": dict(sorted(mode_report.consistent_by_class.items())),
            "consistent_users": mode_report.consistent_users,
            "consistent_fraction": round(mode_report.consistent_fraction, 6),
        },
        "route": {
            "band_width_m": route_report.band_width_m,
            "rule": route_report.rule,
            "eligible_users": route_report.eligible_users,
            "consistent_users": route_report.consistent_users,
            "consistent_fraction": round(route_report.consistent_fraction, 6),
        },
    }
