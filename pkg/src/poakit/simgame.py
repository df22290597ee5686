"""Nonatomic congestion games with polynomial edge latencies.

Solves Wardrop equilibria (minimizing the Beckmann potential) and social
optima (minimizing total travel time) with Frank-Wolfe: all-or-nothing
shortest-path directions, exact bisection line search, and pairwise swap
steps between the best and worst active paths. The swap steps remove the
classic tail-end stalling of plain Frank-Wolfe, so small instances reach
tight duality gaps in a handful of iterations. A path decomposition is
maintained incrementally from the all-or-nothing directions.

Node embeddings are geographic so synthesized traces exercise the geometry
code at realistic magnitudes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import geo
from .errors import (
    InfeasibleInstanceError,
    InvalidParameterError,
    PoakitError,
)
from .geo import GeoPoint

MAX_POLY_DEGREE = 4
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITERATIONS = 10_000
LINE_SEARCH_BISECTIONS = 50

# Synthetic embeddings live in a ~20 km box near this anchor.
EMBED_ANCHOR = GeoPoint(1.35, 103.8)


@dataclass(frozen=True)
class Edge:
    tail: int
    head: int
    length_m: float
    coeffs: tuple[float, ...]  # latency c(x) = sum_k coeffs[k] * x^k, seconds

    def latency(self, x: float) -> float:
        acc = 0.0
        for k in reversed(range(len(self.coeffs))):
            acc = acc * x + self.coeffs[k]
        return acc

    def latency_derivative(self, x: float) -> float:
        acc = 0.0
        for k in reversed(range(1, len(self.coeffs))):
            acc = acc * x + k * self.coeffs[k]
        return acc

    def latency_integral(self, x: float) -> float:
        acc = 0.0
        for k in reversed(range(len(self.coeffs))):
            acc = acc * x + self.coeffs[k] / (k + 1)
        return acc * x


@dataclass(frozen=True)
class Commodity:
    origin: int
    destination: int
    demand: float

    def __post_init__(self):
        if self.origin == self.destination:
            raise InvalidParameterError("commodity origin equals destination")
        if not (self.demand > 0 and math.isfinite(self.demand)):
            raise InvalidParameterError(f"demand must be positive, got {self.demand}")


@dataclass
class RoadNetwork:
    n_nodes: int
    edges: list[Edge]
    embeddings: Optional[list[GeoPoint]] = None
    name: str = "network"

    def __post_init__(self):
        for e in self.edges:
            if not (0 <= e.tail < self.n_nodes and 0 <= e.head < self.n_nodes):
                raise InvalidParameterError(f"edge {e} references an unknown node")
            if len(e.coeffs) > MAX_POLY_DEGREE + 1:
                raise InvalidParameterError("latency polynomial degree exceeds 4")
            if any((c < 0 or not math.isfinite(c)) for c in e.coeffs):
                raise InvalidParameterError("latency coefficients must be finite and >= 0")
            if e.length_m <= 0:
                raise InvalidParameterError("edge length must be positive")
        self._out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for idx, e in enumerate(self.edges):
            self._out[e.tail].append(idx)

    def out_edges(self, node: int) -> list[int]:
        return self._out[node]


def shortest_path(net: RoadNetwork, weights: np.ndarray, origin: int, destination: int) -> tuple[float, tuple[int, ...]]:
    """Min-cost path under non-negative edge weights, as an edge-index tuple.

    Label-correcting relaxation with deterministic tie-breaking: on equal
    labels the predecessor with the lexicographically smaller (node, edge)
    wins. Edge tuples (not node tuples) keep parallel edges distinct.
    """
    n = net.n_nodes
    dist = np.full(n, np.inf)
    pred_edge = [-1] * n
    dist[origin] = 0.0
    changed = True
    while changed:
        changed = False
        for node in range(n):
            if not np.isfinite(dist[node]):
                continue
            base = dist[node]
            for eidx in net.out_edges(node):
                e = net.edges[eidx]
                cand = base + weights[eidx]
                cur = dist[e.head]
                if cand < cur - 1e-15 or (
                    abs(cand - cur) <= 1e-15
                    and pred_edge[e.head] >= 0
                    and (node, eidx) < (net.edges[pred_edge[e.head]].tail, pred_edge[e.head])
                ):
                    dist[e.head] = cand
                    pred_edge[e.head] = eidx
                    changed = True
    if not np.isfinite(dist[destination]):
        raise InfeasibleInstanceError(f"node {destination} unreachable from {origin}")
    edges = []
    node = destination
    while node != origin:
        eidx = pred_edge[node]
        edges.append(eidx)
        node = net.edges[eidx].tail
    return float(dist[destination]), tuple(reversed(edges))


def path_nodes(net: RoadNetwork, edge_path: Sequence[int]) -> tuple[int, ...]:
    """Node sequence visited by an edge-index path."""
    if not edge_path:
        return ()
    nodes = [net.edges[edge_path[0]].tail]
    for eidx in edge_path:
        e = net.edges[eidx]
        if e.tail != nodes[-1]:
            raise PoakitError("edge path is not connected")
        nodes.append(e.head)
    return tuple(nodes)


@dataclass
class FlowAssignment:
    net: RoadNetwork
    edge_flows: np.ndarray
    path_flows: list[dict[tuple[int, ...], float]]  # per commodity, keyed by edge tuples
    total_cost: float
    relative_gap: float
    iterations: int
    converged: bool
    objective: str  # "equilibrium" | "social_optimum"

    def commodity_paths(self, idx: int) -> list[tuple[tuple[int, ...], float]]:
        """(edge path, flow) pairs, largest flow first."""
        flows = self.path_flows[idx]
        return sorted(flows.items(), key=lambda kv: (-kv[1], kv[0]))


def _edge_flows_from_paths(path_flows, n_edges: int) -> np.ndarray:
    x = np.zeros(n_edges)
    for flows in path_flows:
        for edge_path, f in flows.items():
            for eidx in edge_path:
                x[eidx] += f
    return x


class _Objective:
    """Edge-weight and value callbacks for the two Frank-Wolfe objectives."""

    def __init__(self, net: RoadNetwork, kind: str):
        self.net = net
        self.kind = kind

    def weights(self, x: np.ndarray) -> np.ndarray:
        w = np.empty(len(self.net.edges))
        for i, e in enumerate(self.net.edges):
            if self.kind == "equilibrium":
                w[i] = e.latency(x[i])
            else:
                w[i] = e.latency(x[i]) + x[i] * e.latency_derivative(x[i])
        return w

    def value(self, x: np.ndarray) -> float:
        total = 0.0
        for i, e in enumerate(self.net.edges):
            if self.kind == "equilibrium":
                total += e.latency_integral(x[i])
            else:
                total += x[i] * e.latency(x[i])
        return total


def _exact_line_search(obj: _Objective, x: np.ndarray, d: np.ndarray, hi: float) -> float:
    """Bisection on the directional derivative of the objective along d."""

    def slope(gamma: float) -> float:
        return float(np.dot(obj.weights(x + gamma * d), d))

    if slope(0.0) >= 0.0:
        return 0.0
    if slope(hi) <= 0.0:
        return hi
    lo, up = 0.0, hi
    for _ in range(LINE_SEARCH_BISECTIONS):
        mid = 0.5 * (lo + up)
        if slope(mid) > 0.0:
            up = mid
        else:
            lo = mid
    return 0.5 * (lo + up)


def _solve(
    net: RoadNetwork,
    demands: Sequence[Commodity],
    tol: float,
    kind: str,
    max_iterations: int,
    use_swap_steps: bool,
) -> FlowAssignment:
    if tol <= 0:
        raise InvalidParameterError("tol must be positive")
    if not demands:
        raise InvalidParameterError("at least one commodity required")
    n_edges = len(net.edges)
    obj = _Objective(net, kind)

    # start from all-or-nothing at free flow
    free = obj.weights(np.zeros(n_edges))
    path_flows: list[dict[tuple[int, ...], float]] = []
    for c in demands:
        _, edge_path = shortest_path(net, free, c.origin, c.destination)
        path_flows.append({edge_path: c.demand})
    x = _edge_flows_from_paths(path_flows, n_edges)

    gap_rel = math.inf
    iterations = 0
    converged = False
    for iterations in range(1, max_iterations + 1):
        w = obj.weights(x)
        f_val = obj.value(x)

        # all-or-nothing direction under current weights
        aon_paths = []
        s = np.zeros(n_edges)
        for c in demands:
            _, edge_path = shortest_path(net, w, c.origin, c.destination)
            aon_paths.append(edge_path)
            for eidx in edge_path:
                s[eidx] += c.demand

        gap_abs = float(np.dot(w, x - s))
        gap_rel = gap_abs / max(abs(f_val), 1e-30)
        if gap_rel <= tol:
            converged = True
            break

        step_taken = False
        if use_swap_steps:
            # pairwise step: move mass from the costliest active path to the
            # best path of the same commodity when that promises more descent
            best_swap = None
            for ci, c in enumerate(demands):
                best_path = aon_paths[ci]
                best_cost = sum(w[e] for e in best_path)
                for edge_path, flow in path_flows[ci].items():
                    if flow <= 1e-15 or edge_path == best_path:
                        continue
                    cost = sum(w[e] for e in edge_path)
                    swap_gap = (cost - best_cost) * flow
                    if swap_gap > 1e-15 and (best_swap is None or swap_gap > best_swap[0]):
                        best_swap = (swap_gap, ci, edge_path, best_path, flow)
            if best_swap is not None and best_swap[0] >= gap_abs * 0.5:
                _, ci, worst_path, best_path, flow = best_swap
                d = np.zeros(n_edges)
                for eidx in worst_path:
                    d[eidx] -= 1.0
                for eidx in best_path:
                    d[eidx] += 1.0
                gamma = _exact_line_search(obj, x, d, flow)
                if gamma > 0:
                    x = x + gamma * d
                    pf = path_flows[ci]
                    pf[worst_path] = pf.get(worst_path, 0.0) - gamma
                    if pf[worst_path] <= 1e-15:
                        pf.pop(worst_path)
                    pf[best_path] = pf.get(best_path, 0.0) + gamma
                    step_taken = True

        if not step_taken:
            d = s - x
            gamma = _exact_line_search(obj, x, d, 1.0)
            if gamma <= 0.0:
                converged = gap_rel <= tol
                break
            x = np.maximum(x + gamma * d, 0.0)
            for ci, c in enumerate(demands):
                pf = path_flows[ci]
                for edge_path in list(pf):
                    pf[edge_path] *= 1.0 - gamma
                    if pf[edge_path] <= 1e-15:
                        pf.pop(edge_path)
                edge_path = aon_paths[ci]
                pf[edge_path] = pf.get(edge_path, 0.0) + gamma * c.demand

    total_cost = float(sum(x[i] * e.latency(x[i]) for i, e in enumerate(net.edges)))
    return FlowAssignment(
        net=net,
        edge_flows=x,
        path_flows=path_flows,
        total_cost=total_cost,
        relative_gap=gap_rel,
        iterations=iterations,
        converged=converged,
        objective=kind,
    )


def wardrop_equilibrium(
    net: RoadNetwork,
    demands: Sequence[Commodity],
    tol: float = DEFAULT_TOL,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    use_swap_steps: bool = True,
) -> FlowAssignment:
    """Flow where every used path of a commodity has minimal latency.

    Minimizes the Beckmann potential; terminates at relative duality gap
    <= tol or after max_iterations (flagged not converged).
    """
    return _solve(net, demands, tol, "equilibrium", max_iterations, use_swap_steps)


def social_optimum(
    net: RoadNetwork,
    demands: Sequence[Commodity],
    tol: float = DEFAULT_TOL,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    use_swap_steps: bool = True,
) -> FlowAssignment:
    """Flow minimizing total travel time (marginal-cost weights)."""
    return _solve(net, demands, tol, "social_optimum", max_iterations, use_swap_steps)


def price_of_anarchy(
    net: RoadNetwork,
    demands: Sequence[Commodity],
    tol: float = DEFAULT_TOL,
) -> float:
    """Equilibrium total cost over optimal total cost."""
    eq = wardrop_equilibrium(net, demands, tol)
    so = social_optimum(net, demands, tol)
    if so.total_cost <= 0:
        return 1.0 if eq.total_cost <= 0 else math.inf
    return eq.total_cost / so.total_cost


def used_path_latency_spread(net: RoadNetwork, flow: FlowAssignment, commodity_idx: int,
                             min_flow: float = 1e-9) -> float:
    """Max minus min latency over a commodity's used paths at the flow."""
    w = np.array([e.latency(flow.edge_flows[i]) for i, e in enumerate(net.edges)])
    costs = [
        sum(w[e] for e in edge_path)
        for edge_path, f in flow.path_flows[commodity_idx].items()
        if f > min_flow
    ]
    if not costs:
        return 0.0
    return max(costs) - min(costs)


def _embed(points_km: Sequence[tuple[float, float]]) -> list[GeoPoint]:
    planar = [geo.PlanarPoint(x * 1000.0, y * 1000.0) for x, y in points_km]
    return geo.unproject_local(planar, EMBED_ANCHOR)


def pigou_network(time_scale: float = 1.0) -> tuple[RoadNetwork, list[Commodity]]:
    """Two parallel routes: latency x vs constant 1, unit demand.

    Equilibrium sends everything onto the variable edge (cost 1 per unit);
    the optimum splits half and half (cost 3/4). time_scale multiplies all
    latencies, turning abstract units into seconds for trace synthesis; edge
    lengths are chosen so a 1-hour scale gives realistic driving speeds.
    """
    emb = _embed([(1.0, 2.0), (31.0, 2.0)])
    length = geo.geodesic_distance(emb[0], emb[1])
    edges = [
        Edge(0, 1, length, (0.0, time_scale)),  # c(x) = x
        Edge(0, 1, length, (time_scale,)),      # c(x) = 1
    ]
    net = RoadNetwork(2, edges, embeddings=emb, name="pigou")
    return net, [Commodity(0, 1, 1.0)]


def braess_network(time_scale: float = 1.0) -> tuple[RoadNetwork, list[Commodity]]:
    """The classic 4-node Braess instance with a zero-cost shortcut.

    Nodes: 0=origin, 1=upper, 2=lower, 3=destination. Equilibrium routes all
    flow along 0-1-2-3 (cost 2); the optimum ignores the shortcut and splits
    over the two 2-edge paths (cost 3/2). Leg embeddings are 15 km chords so
    the traversal speeds match the nominal lengths.
    """
    dx = math.sqrt(15.0**2 - 3.0**2)
    emb = _embed([(1.0, 10.0), (1.0 + dx, 13.0), (1.0 + dx, 7.0), (1.0 + 2 * dx, 10.0)])
    leg = geo.geodesic_distance(emb[0], emb[1])
    shortcut = geo.geodesic_distance(emb[1], emb[2])
    edges = [
        Edge(0, 1, leg, (0.0, time_scale)),   # x
        Edge(1, 3, leg, (time_scale,)),       # 1
        Edge(0, 2, leg, (time_scale,)),       # 1
        Edge(2, 3, leg, (0.0, time_scale)),   # x
        Edge(1, 2, shortcut, (0.0,)),         # shortcut, free
    ]
    net = RoadNetwork(4, edges, embeddings=emb, name="braess")
    return net, [Commodity(0, 3, 1.0)]


def load_edge_list(path) -> tuple[RoadNetwork, list[Commodity]]:
    """Plain-text network format.

    Lines: `nodes N`, `edge FROM TO LENGTH A0 [A1 A2 A3 A4]`,
    `demand ORIGIN DEST AMOUNT`, optional `node INDEX LAT LON` embeddings,
    `#` comments.
    """
    n_nodes = None
    edges: list[Edge] = []
    demands: list[Commodity] = []
    embeddings: dict[int, GeoPoint] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "nodes":
                    n_nodes = int(parts[1])
                elif parts[0] == "edge":
                    tail, head = int(parts[1]), int(parts[2])
                    length = float(parts[3])
                    coeffs = tuple(float(v) for v in parts[4:])
                    if not coeffs:
                        raise ValueError("edge needs at least a0")
                    edges.append(Edge(tail, head, length, coeffs))
                elif parts[0] == "demand":
                    demands.append(Commodity(int(parts[1]), int(parts[2]), float(parts[3])))
                elif parts[0] == "node":
                    embeddings[int(parts[1])] = GeoPoint(float(parts[2]), float(parts[3]))
                else:
                    raise ValueError(f"unknown directive {parts[0]!r}")
            except (IndexError, ValueError) as exc:
                raise PoakitError(f"{path}:{line_no}: {exc}") from exc
    if n_nodes is None:
        raise PoakitError(f"{path}: missing `nodes N` header")
    emb = None
    if embeddings:
        if set(embeddings) != set(range(n_nodes)):
            raise PoakitError(f"{path}: embeddings must cover all {n_nodes} nodes or none")
        emb = [embeddings[i] for i in range(n_nodes)]
    return RoadNetwork(n_nodes, edges, embeddings=emb), demands


def load_tntp(net_path, trips_path=None, time_scale: float = 60.0) -> tuple[RoadNetwork, list[Commodity]]:
    """Loader for the common traffic-assignment benchmark text format.

    Reads the link table (init/term node, capacity, length, free-flow time,
    BPR b and power) and converts each BPR function
    t0 * (1 + b * (x/c)^p) into polynomial coefficients a0 = t0 and
    a_p = t0 * b / c^p (p must be an integer <= 4). Node ids are rebased to
    zero. free-flow times are multiplied by time_scale (defaults to minutes
    -> seconds). Demands come from the matching trips file when given.
    """
    meta = {}
    rows = []
    with open(net_path, "r", encoding="utf-8") as fh:
        header_cols: Optional[list[str]] = None
        in_meta = True
        for raw in fh:
            line = raw.strip()
            if in_meta:
                if line.startswith("<END OF METADATA>"):
                    in_meta = False
                elif line.startswith("<"):
                    key, _, value = line.partition(">")
                    meta[key.strip("<> ")] = value.strip()
                continue
            if not line or line.startswith("~"):
                if line.startswith("~") and "init" in line.lower():
                    header_cols = line.lstrip("~").split()
                continue
            parts = line.rstrip(";").split()
            rows.append(parts)
    n_nodes = int(meta.get("NUMBER OF NODES", 0))
    if n_nodes <= 0:
        raise PoakitError(f"{net_path}: missing NUMBER OF NODES metadata")
    edges = []
    for parts in rows:
        init, term = int(parts[0]), int(parts[1])
        capacity = float(parts[2])
        free_flow = float(parts[4]) * time_scale
        b = float(parts[5])
        power = float(parts[6])
        length = max(float(parts[3]), 1e-3) * 1000.0  # km -> m
        p = int(round(power))
        if abs(power - p) > 1e-9 or p > MAX_POLY_DEGREE or p < 0:
            raise PoakitError(f"{net_path}: BPR power {power} not an integer <= {MAX_POLY_DEGREE}")
        coeffs = [0.0] * (p + 1)
        coeffs[0] = free_flow
        if p > 0 and b > 0:
            if capacity <= 0:
                raise PoakitError(f"{net_path}: non-positive capacity on edge {init}->{term}")
            coeffs[p] = free_flow * b / (capacity ** p)
        edges.append(Edge(init - 1, term - 1, length, tuple(coeffs)))
    demands: list[Commodity] = []
    if trips_path is not None:
        origin = None
        with open(trips_path, "r", encoding="utf-8") as fh:
            in_meta = True
            for raw in fh:
                line = raw.strip()
                if in_meta:
                    if line.startswith("<END OF METADATA>"):
                        in_meta = False
                    continue
                if not line:
                    continue
                if line.lower().startswith("origin"):
                    origin = int(line.split()[1])
                    continue
                for chunk in line.split(";"):
                    chunk = chunk.strip()
                    if not chunk or origin is None:
                        continue
                    dest_s, _, amount_s = chunk.partition(":")
                    dest = int(dest_s)
                    amount = float(amount_s)
                    if amount > 0 and dest != origin:
                        demands.append(Commodity(origin - 1, dest - 1, amount))
    return RoadNetwork(n_nodes, edges, name="tntp"), demands
