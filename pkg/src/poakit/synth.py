"""Synthesize labeled location traces from a solved congestion game.

Users are assigned to paths proportionally to the path flows (largest
remainder rounding), walk their path at the per-edge speeds implied by the
solved flow, and dwell at home before departure and at school afterwards
long enough for segmentation and profile inference to recover everything.
Samples are emitted on a fixed period with isotropic Gaussian position
noise. The whole construction is deterministic given the seed; each user
draws from an rng derived from (seed, user index, day).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from typing import Optional, Sequence

import numpy as np

from . import geo
from .errors import InvalidParameterError, MissingDecompositionError
from .geo import GeoPoint
from .simgame import FlowAssignment, RoadNetwork

# First simulated day: a Monday, so school-hour windows land on weekdays.
BASE_LOCAL_DAY = (date(2016, 1, 4) - date(1970, 1, 1)).days


@dataclass
class SynthesisSpec:
    n_users: int
    noise_sigma_m: float = 15.0
    period_s: int = 13
    days: int = 2
    seed: int = 0
    utc_offset_s: int = 8 * 3600
    home_dwell_start_s: int = 4 * 3600 + 56 * 60   # 04:56 local
    school_dwell_end_s: int = 9 * 3600 + 30 * 60   # 09:30 local
    departure_earliest_s: int = 7 * 3600
    departure_latest_s: int = 8 * 3600
    home_jitter_m: float = 25.0
    mode_label: Optional[str] = "car"
    detour_fraction: float = 0.0
    detour_extra_s: float = 0.0

    def validate(self):
        if self.n_users < 1:
            raise InvalidParameterError("n_users must be >= 1")
        if self.days < 1:
            raise InvalidParameterError("days must be >= 1")
        if self.period_s <= 0:
            raise InvalidParameterError("period_s must be positive")
        if not (0.0 <= self.detour_fraction <= 1.0):
            raise InvalidParameterError("detour_fraction must be in [0, 1]")
        if not (self.departure_earliest_s < self.departure_latest_s):
            raise InvalidParameterError("empty departure window")


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer allocation proportional to non-negative weights."""
    s = float(sum(weights))
    if s <= 0:
        raise InvalidParameterError("weights must sum to a positive value")
    quotas = [w / s * total for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


@dataclass
class SynthUser:
    user_id: str
    commodity: int
    path_id: str
    edge_path: tuple[int, ...]
    home: GeoPoint
    school_node: int
    departure_sod: float     # local seconds of day
    phase_s: float
    detour_s: float
    approach_s: float        # home to first network node, at the first edge's speed
    base_duration_s: float

    @property
    def true_duration_s(self) -> float:
        return self.base_duration_s + self.detour_s


@dataclass
class SynthesisResult:
    users: list[SynthUser]
    path_user_counts: dict[tuple[int, str], int]
    schools: dict[str, GeoPoint]
    spec: SynthesisSpec

    def school_id_of(self, node: int) -> str:
        return f"SCH{node:03d}"


def _plan_users(net: RoadNetwork, flows: FlowAssignment, spec: SynthesisSpec) -> SynthesisResult:
    if not any(flows.path_flows):
        raise MissingDecompositionError("flow assignment carries no path decomposition")
    if net.embeddings is None:
        raise InvalidParameterError("network has no node embeddings")

    demands = [sum(pf.values()) for pf in flows.path_flows]
    per_commodity = largest_remainder(demands, spec.n_users)

    # assign users to paths inside each commodity
    plans: list[tuple[int, str, tuple[int, ...]]] = []
    path_counts: dict[tuple[int, str], int] = {}
    for ci, seats in enumerate(per_commodity):
        if seats == 0:
            continue
        paths = flows.commodity_paths(ci)
        counts = largest_remainder([f for _, f in paths], seats)
        for k, ((edge_path, _), cnt) in enumerate(zip(paths, counts)):
            path_id = f"c{ci}p{k}"
            if cnt:
                path_counts[(ci, path_id)] = cnt
            plans.extend([(ci, path_id, edge_path)] * cnt)

    edge_times = _edge_times(net, flows)
    rng_detour = np.random.default_rng([spec.seed, 7777])
    n_detoured = int(round(spec.detour_fraction * len(plans)))
    detoured = set(rng_detour.permutation(len(plans))[:n_detoured]) if n_detoured else set()

    users = []
    schools: dict[str, GeoPoint] = {}
    for uidx, (ci, path_id, edge_path) in enumerate(plans):
        rng = np.random.default_rng([spec.seed, uidx])
        origin = net.edges[edge_path[0]].tail
        dest = net.edges[edge_path[-1]].head
        school_id = f"SCH{dest:03d}"
        schools.setdefault(school_id, net.embeddings[dest])
        jitter = rng.normal(0.0, spec.home_jitter_m, 2)
        home = geo.translate([net.embeddings[origin]], float(jitter[0]), float(jitter[1]))[0]
        departure = float(rng.uniform(spec.departure_earliest_s, spec.departure_latest_s))
        phase = float(rng.uniform(0.0, spec.period_s))
        detour = spec.detour_extra_s if uidx in detoured else 0.0
        approach = _approach_seconds(net, edge_times, edge_path, home, origin)
        users.append(
            SynthUser(
                user_id=f"u{uidx:04d}",
                commodity=ci,
                path_id=path_id,
                edge_path=edge_path,
                home=home,
                school_node=dest,
                departure_sod=departure,
                phase_s=phase,
                detour_s=detour,
                approach_s=approach,
                base_duration_s=approach + float(sum(edge_times[e] for e in edge_path)),
            )
        )
    return SynthesisResult(users, path_counts, schools, spec)


_FALLBACK_SPEED_MS = 8.0


def _approach_seconds(net, edge_times, edge_path, home: GeoPoint, origin: int) -> float:
    """Walk-on time from the jittered home to the first network node.

    Paced like the first edge so the departure looks like ordinary driving
    rather than a position jump.
    """
    dist = geo.geodesic_distance(home, net.embeddings[origin])
    first = edge_path[0]
    t_first = float(edge_times[first])
    speed = net.edges[first].length_m / t_first if t_first > 0 else _FALLBACK_SPEED_MS
    return dist / speed


def _edge_times(net: RoadNetwork, flows: FlowAssignment) -> np.ndarray:
    return np.array([e.latency(flows.edge_flows[i]) for i, e in enumerate(net.edges)])


def _user_day_samples(net, user: SynthUser, day: int, spec: SynthesisSpec,
                      edge_times: np.ndarray) -> list[tuple[int, float, float]]:
    """(ts, lat, lon) samples for one user-day, noise included."""
    local_day = BASE_LOCAL_DAY + day
    day_start_utc = local_day * 86400 - spec.utc_offset_s

    dep_ts = day_start_utc + user.departure_sod
    start_ts = day_start_utc + spec.home_dwell_start_s + user.phase_s
    end_ts = day_start_utc + spec.school_dwell_end_s

    anchor = user.home
    nodes = [net.edges[user.edge_path[0]].tail] + [net.edges[e].head for e in user.edge_path]
    node_xy = geo.project_local([net.embeddings[n] for n in nodes], anchor)
    home_xy = geo.project_local([user.home], anchor)[0]

    # a detour stretches the interior 70% of the slowest edge, keeping the
    # departure and arrival approach speeds identical for every user
    detour_edge = -1
    if user.detour_s > 0:
        base = [float(edge_times[e]) for e in user.edge_path]
        detour_edge = max(range(len(base)), key=lambda i: (base[i], -i))

    xy_breaks = [home_xy, node_xy[0]]
    seg_times = [user.approach_s]
    for k, e in enumerate(user.edge_path):
        t_e = float(edge_times[e])
        tail, head = node_xy[k], node_xy[k + 1]
        if k == detour_edge and t_e > 0:
            p15 = geo.PlanarPoint(tail.x + 0.15 * (head.x - tail.x), tail.y + 0.15 * (head.y - tail.y))
            p85 = geo.PlanarPoint(tail.x + 0.85 * (head.x - tail.x), tail.y + 0.85 * (head.y - tail.y))
            xy_breaks += [p15, p85, head]
            seg_times += [0.15 * t_e, 0.70 * t_e + user.detour_s, 0.15 * t_e]
        elif k == detour_edge:
            xy_breaks.append(head)
            seg_times.append(t_e + user.detour_s)
        else:
            xy_breaks.append(head)
            seg_times.append(t_e)

    t_breaks = [float(dep_ts)]
    for dt in seg_times:
        t_breaks.append(t_breaks[-1] + float(dt))
    arrival_ts = t_breaks[-1]

    ts = np.arange(start_ts, end_ts + 1e-9, spec.period_s)
    xs = np.interp(ts, t_breaks, [p.x for p in xy_breaks])
    ys = np.interp(ts, t_breaks, [p.y for p in xy_breaks])
    before = ts <= dep_ts
    xs[before], ys[before] = home_xy.x, home_xy.y
    after = ts >= arrival_ts
    xs[after], ys[after] = xy_breaks[-1].x, xy_breaks[-1].y

    rng = np.random.default_rng([spec.seed, int(user.user_id[1:]), day])
    if spec.noise_sigma_m > 0:
        xs = xs + rng.normal(0.0, spec.noise_sigma_m, len(ts))
        ys = ys + rng.normal(0.0, spec.noise_sigma_m, len(ts))

    pts = geo.unproject_local([geo.PlanarPoint(float(x), float(y)) for x, y in zip(xs, ys)], anchor)
    return [(int(t), p.lat, p.lon) for t, p in zip(ts, pts)]


def synthesize_traces(
    net: RoadNetwork,
    flows: FlowAssignment,
    spec: SynthesisSpec,
    traces_path,
    truth_path,
    schools_path=None,
) -> SynthesisResult:
    """Write samples (JSON Lines), ground truth (CSV), and the school catalog.

    The samples file follows the ingestion schema exactly; the ground truth
    CSV carries user_id,day,path_id,true_duration_s,detour_s.
    """
    spec.validate()
    result = _plan_users(net, flows, spec)
    edge_times = _edge_times(net, flows)

    with open(traces_path, "w", encoding="utf-8") as fh:
        for user in result.users:
            for day in range(spec.days):
                lines = []
                for ts, lat, lon in _user_day_samples(net, user, day, spec, edge_times):
                    rec = f'{{"user":"{user.user_id}","ts":{ts},"lat":{lat:.7f},"lon":{lon:.7f}'
                    if spec.mode_label:
                        rec += f',"mode":"{spec.mode_label}"'
                    rec += "}"
                    lines.append(rec)
                fh.write("\n".join(lines) + "\n")

    with open(truth_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "day", "path_id", "true_duration_s", "detour_s"])
        for user in result.users:
            for day in range(spec.days):
                writer.writerow(
                    [
                        user.user_id,
                        BASE_LOCAL_DAY + day,
                        user.path_id,
                        f"{user.true_duration_s:.6g}",
                        f"{user.detour_s:.6g}",
                    ]
                )

    if schools_path is not None:
        with open(schools_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["school_id", "lat", "lon"])
            for school_id in sorted(result.schools):
                p = result.schools[school_id]
                writer.writerow([school_id, f"{p.lat:.6f}", f"{p.lon:.6f}"])

    return result


def read_ground_truth(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [
            {
                "user_id": rec["user_id"],
                "day": int(rec["day"]),
                "path_id": rec["path_id"],
                "true_duration_s": float(rec["true_duration_s"]),
                "detour_s": float(rec["detour_s"]),
            }
            for rec in csv.DictReader(fh)
        ]
