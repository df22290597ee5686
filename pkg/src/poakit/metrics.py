"""Empirical regret, its distribution, and price-of-anarchy bounds.

Regret compares each trip against the fastest trip of its cluster (the
baseline). The aggregate distribution drops baselines/zero values and the
top tail, then supports an inverse CDF and an (epsilon, delta) read-out.
The EPoA is a ratio of cost sums: recorded durations over optimal durations
from a directions oracle, bracketed by heavy- and light-traffic optima.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .cluster import Cluster
from .errors import InvalidParameterError
from .trace import Trip, nearest_rank

TRIM_PERCENT = 95.0


@dataclass
class RegretRecord:
    trip: Trip
    cluster_id: str
    regret: float
    is_baseline: bool


def compute_regret(cluster: Cluster) -> list[RegretRecord]:
    """Regret per member trip against the cluster's minimum duration.

    The baseline is the minimum-duration trip; ties go to the earliest
    departure, then the lowest user id. Exactly one record is flagged as the
    baseline even when other trips match its duration.
    """
    if not cluster.trips:
        raise InvalidParameterError("empty cluster")
    baseline = min(cluster.trips, key=lambda t: (t.duration, t.departure_time, t.user_id))
    records = []
    for trip in sorted(cluster.trips, key=lambda t: (t.departure_time, t.user_id)):
        records.append(
            RegretRecord(
                trip=trip,
                cluster_id=cluster.cluster_id,
                regret=trip.duration - baseline.duration,
                is_baseline=trip is baseline,
            )
        )
    return records


@dataclass
class RegretDistribution:
    """Sorted retained regrets with the usual summary statistics.

    Retention drops every zero-regret record (baselines included) and every
    value strictly above the nearest-rank 95th percentile of the remaining
    positive regrets.
    """

    values: list[float]
    dropped_zero: int = 0
    dropped_tail: int = 0

    @classmethod
    def from_records(cls, records: Iterable[RegretRecord]) -> "RegretDistribution":
        all_values = [r.regret for r in records]
        positive = sorted(v for v in all_values if v > 0)
        zeros = len(all_values) - len(positive)
        if not positive:
            return cls([], dropped_zero=zeros, dropped_tail=0)
        cutoff = nearest_rank(positive, TRIM_PERCENT)
        retained = [v for v in positive if v <= cutoff]
        return cls(retained, dropped_zero=zeros, dropped_tail=len(positive) - len(retained))

    @property
    def empty(self) -> bool:
        return not self.values

    @property
    def mean(self) -> float:
        return sum(self.values) / len(self.values) if self.values else 0.0

    @property
    def median(self) -> float:
        # lower-middle median for even counts
        if not self.values:
            return 0.0
        return self.values[(len(self.values) - 1) // 2]

    def fraction_geq(self, x: float) -> float:
        """Inverse CDF: fraction of retained regrets >= x."""
        if not self.values:
            return 0.0
        return (len(self.values) - bisect.bisect_left(self.values, x)) / len(self.values)

    def steps(self) -> list[tuple[float, float]]:
        """(value, fraction_geq(value)) at each distinct retained value."""
        out = []
        for v in sorted(set(self.values)):
            out.append((v, self.fraction_geq(v)))
        return out


def regret_distribution(records: Iterable[RegretRecord]) -> RegretDistribution:
    return RegretDistribution.from_records(records)


def epsilon_delta(dist: RegretDistribution, delta: float) -> float:
    """Smallest retained regret epsilon with at most a delta fraction above it.

    This is the nearest-rank (1 - delta) quantile of the retained values; an
    empty distribution (perfect equilibrium) yields 0.
    """
    if not (0.0 < delta < 1.0):
        raise InvalidParameterError("delta must be in (0, 1)")
    if dist.empty:
        return 0.0
    return nearest_rank(dist.values, 100.0 * (1.0 - delta))


STATUS_OK = "ok"
STATUS_NOT_FOUND = "not_found"
STATUS_REPOSITIONED = "repositioned_too_far"
STATUS_TRANSIENT = "transient_failure"

REGIMES = ("heavy", "light", "transit")


@dataclass
class OptimalDuration:
    """Optimal trip durations for one (origin cluster, school, mode) triple."""

    location_id: str
    school_id: str
    mode_class: str
    heavy: Optional[float] = None
    light: Optional[float] = None
    transit: Optional[float] = None
    status: str = STATUS_OK

    def get(self, regime: str) -> Optional[float]:
        if regime not in REGIMES:
            raise InvalidParameterError(f"unknown regime {regime!r}")
        return getattr(self, regime)


class OptimalDurationTable:
    """Optimal-duration lookups, one cell per (cluster, school, mode, regime).

    Mirrors the CSV interchange format row for row; `lookup` aggregates the
    regimes of one (cluster, school, mode) triple into an OptimalDuration,
    whose status reflects any failed regime.
    """

    def __init__(self):
        self._cells: dict[tuple[str, str, str, str], tuple[Optional[float], str]] = {}

    def add(self, location_id, school_id, mode_class, regime, seconds, status=STATUS_OK):
        if regime not in REGIMES:
            raise InvalidParameterError(f"unknown regime {regime!r}")
        value = float(seconds) if status == STATUS_OK and seconds is not None else None
        self._cells[(location_id, school_id, mode_class, regime)] = (value, status)

    def lookup(self, location_id, school_id, mode_class) -> Optional[OptimalDuration]:
        values: dict[str, float] = {}
        status = STATUS_OK
        found = False
        for regime in REGIMES:
            cell = self._cells.get((location_id, school_id, mode_class, regime))
            if cell is None:
                continue
            found = True
            value, cell_status = cell
            if cell_status == STATUS_OK and value is not None:
                values[regime] = value
            else:
                status = cell_status
        if not found:
            return None
        return OptimalDuration(
            location_id,
            school_id,
            mode_class,
            heavy=values.get("heavy"),
            light=values.get("light"),
            transit=values.get("transit"),
            status=status,
        )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cluster_id", "school_id", "mode_class", "regime", "seconds", "status"])
            for key in sorted(self._cells):
                value, status = self._cells[key]
                writer.writerow(list(key) + ["" if value is None else f"{value:.6g}", status])

    @classmethod
    def read_csv(cls, path) -> "OptimalDurationTable":
        table = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            for rec in csv.DictReader(fh):
                seconds = rec["seconds"]
                table.add(
                    rec["cluster_id"],
                    rec["school_id"],
                    rec["mode_class"],
                    rec["regime"],
                    float(seconds) if seconds else None,
                    rec.get("status", STATUS_OK),
                )
        return table


@dataclass
class EPoAReport:
    lower: Optional[float]
    upper: Optional[float]
    car_heavy_ratio: Optional[float]
    car_light_ratio: Optional[float]
    transit_ratio: Optional[float]
    included_car: int
    included_transit: int
    dropped: int

    def to_json_dict(self) -> dict:
        def num(x):
            if x is None or not math.isfinite(x):
                return None
            return round(x, 6)

        return {
            "lower_bound": num(self.lower),
            "upper_bound": num(self.upper),
            "car_heavy_ratio": num(self.car_heavy_ratio),
            "car_light_ratio": num(self.car_light_ratio),
            "transit_ratio": num(self.transit_ratio),
            "included_car": self.included_car,
            "included_transit": self.included_transit,
            "dropped": self.dropped,
        }


# mode classes that query the car-style (traffic-dependent) optima
CAR_CLASSES = ("car", "private")
TRANSIT_CLASSES = ("metro", "bus", "public", "transit")


def epoa_bounds(
    trips_with_optima: Sequence[tuple[Trip, str, Optional[OptimalDuration]]],
) -> EPoAReport:
    """Bracket the empirical price of anarchy from recorded vs optimal sums.

    Input triples are (trip, mode_class, optimal entry). Car-class trips need
    both heavy and light optima with ok status; transit-class trips need a
    transit optimum. Anything else is dropped and counted. The lower bound
    divides recorded time by heavy-traffic optima, the upper bound by
    light-traffic optima; per-class ratios use the class subsets.
    """
    rec_car = rec_transit = 0.0
    opt_heavy = opt_light = opt_transit = 0.0
    n_car = n_transit = dropped = 0

    for trip, mode_class, opt in trips_with_optima:
        if opt is None or opt.status != STATUS_OK:
            dropped += 1
            continue
        if mode_class in CAR_CLASSES:
            if opt.heavy is None or opt.light is None:
                dropped += 1
                continue
            rec_car += trip.duration
            opt_heavy += opt.heavy
            opt_light += opt.light
            n_car += 1
        elif mode_class in TRANSIT_CLASSES:
            if opt.transit is None:
                dropped += 1
                continue
            rec_transit += trip.duration
            opt_transit += opt.transit
            n_transit += 1
        else:
            dropped += 1

    def ratio(num, den):
        if den > 0:
            return num / den
        return math.inf if num > 0 else None

    recorded = rec_car + rec_transit
    lower = ratio(recorded, opt_heavy + opt_transit) if (n_car + n_transit) else None
    upper = ratio(recorded, opt_light + opt_transit) if (n_car + n_transit) else None
    return EPoAReport(
        lower=lower,
        upper=upper,
        car_heavy_ratio=ratio(rec_car, opt_heavy) if n_car else None,
        car_light_ratio=ratio(rec_car, opt_light) if n_car else None,
        transit_ratio=ratio(rec_transit, opt_transit) if n_transit else None,
        included_car=n_car,
        included_transit=n_transit,
        dropped=dropped,
    )


def write_regret_csv(path, records: Sequence[RegretRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trip_id", "cluster_id", "regret_s", "is_baseline"])
        for r in sorted(records, key=lambda r: (r.cluster_id, r.trip.trip_id)):
            writer.writerow([r.trip.trip_id, r.cluster_id, f"{r.regret:.6g}", int(r.is_baseline)])


def write_inverse_cdf_csv(path, dist: RegretDistribution) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["regret_seconds", "fraction_geq"])
        for value, frac in dist.steps():
            writer.writerow([f"{value:.6g}", f"{frac:.6g}"])


def distribution_summary(dist: RegretDistribution, delta: float) -> dict:
    return {
        "count": len(dist.values),
        "dropped_zero": dist.dropped_zero,
        "dropped_tail": dist.dropped_tail,
        "mean_s": round(dist.mean, 6),
        "median_s": round(dist.median, 6),
        "delta": delta,
        "epsilon_s": round(epsilon_delta(dist, delta), 6) if not dist.empty else 0.0,
        "perfect_equilibrium": dist.empty,
    }
