"""Synthetic lattice city with a closed-form travel-time law.

Edge time = length / (base_speed(road type) * multiplier(hour of edge entry)),
plus a fixed delay whenever the route enters a node carrying a signal, stop
sign or crossing.  Anchors are emitted at every node crossing, so the anchor
polyline reproduces the law exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geo import (Edge, Node, NodeType, PathGeometry, PathRecord, RoadNetwork, RoadType,
                  ValidationError, make_edge, metres_to_degrees, path_length)
from .traffic import TrafficTable, local_hour

DEFAULT_MULTIPLIERS = (
    1.0, 1.0, 1.0, 1.0, 1.0, 0.95, 0.8, 0.6, 0.5, 0.65, 0.8, 0.85,
    0.8, 0.85, 0.85, 0.8, 0.7, 0.55, 0.5, 0.65, 0.8, 0.9, 0.95, 1.0,
)

SIGNAL_TYPES = (NodeType.TRAFFIC_LIGHT, NodeType.STOP_SIGN, NodeType.CROSSING)


@dataclass(frozen=True)
class SynthConfig:
    grid_size: int = 20
    spacing_m: float = 100.0
    highway_rows: tuple[int, ...] = (5, 14)
    highway_cols: tuple[int, ...] = (5, 14)
    speed_highway: float = 16.0
    speed_other: float = 8.0
    hourly_multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    signal_fraction: float = 0.3
    signal_delay_s: float = 5.0
    seed: int = 0
    n_paths: int = 1000
    min_edges: int = 8
    max_edges: int = 24
    partial_ends: bool = False
    raw_length_noise: float = 0.0
    origin_lng: float = -8.62
    origin_lat: float = 41.14
    start_epoch: float = 1372636800.0  # 2013-07-01 00:00 UTC
    span_days: int = 28

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValidationError("grid_size must be >= 2")
        if self.speed_highway <= 0 or self.speed_other <= 0:
            raise ValidationError("base speeds must be positive")
        if len(self.hourly_multipliers) != 24 or min(self.hourly_multipliers) <= 0:
            raise ValidationError("need 24 positive hourly multipliers")
        if not 1 <= self.min_edges <= self.max_edges:
            raise ValidationError("need 1 <= min_edges <= max_edges")

    def base_speed(self, road_type: RoadType) -> float:
        return self.speed_highway if road_type is RoadType.HIGHWAY else self.speed_other


def generate_network(cfg: SynthConfig) -> RoadNetwork:
    """``g x g`` lattice with bidirectional edges; node ids are ``row * g + col``."""
    g = cfg.grid_size
    rng = np.random.default_rng([cfg.seed, 1])
    dlng, dlat = metres_to_degrees(cfg.spacing_m, cfg.spacing_m, cfg.origin_lat)
    n_nodes = g * g
    n_signal = int(round(cfg.signal_fraction * n_nodes))
    signal_ids = set(rng.choice(n_nodes, size=n_signal, replace=False).tolist()) if n_signal else set()
    kinds = rng.integers(0, len(SIGNAL_TYPES), size=n_nodes)
    nodes: dict[int, Node] = {}
    for r in range(g):
        for c in range(g):
            nid = r * g + c
            kind = SIGNAL_TYPES[kinds[nid]] if nid in signal_ids else NodeType.PLAIN
            nodes[nid] = Node(nid, round(cfg.origin_lng + c * dlng, 9), round(cfg.origin_lat + r * dlat, 9), kind)
    edges: dict[int, Edge] = {}

    def link(a, b, highway):
        rt = RoadType.HIGHWAY if highway else RoadType.OTHER
        for s, e in ((a, b), (b, a)):
            eid = len(edges)
            edges[eid] = make_edge(nodes, eid, s, e, rt)

    for r in range(g):
        for c in range(g):
            nid = r * g + c
            if c + 1 < g:
                link(nid, nid + 1, r in cfg.highway_rows)
            if r + 1 < g:
                link(nid, nid + g, c in cfg.highway_cols)
    return RoadNetwork(nodes, edges)


def edge_time_s(network: RoadNetwork, cfg: SynthConfig, edge_id: int, entry_time: float,
                fraction: float = 1.0) -> float:
    e = network.edges[edge_id]
    mult = cfg.hourly_multipliers[local_hour(entry_time)]
    return fraction * e.length_m / (cfg.base_speed(e.road_type) * mult)


def _random_route(network: RoadNetwork, cfg: SynthConfig, rng: np.random.Generator) -> list[int]:
    n_nodes = len(network.nodes)
    while True:
        length = int(rng.integers(cfg.min_edges, cfg.max_edges + 1))
        node = int(rng.integers(n_nodes))
        visited = {node}
        route: list[int] = []
        while len(route) < length:
            options = [eid for eid in network.out_edges(node) if network.edges[eid].end_node not in visited]
            if not options:
                break
            eid = options[int(rng.integers(len(options)))]
            route.append(eid)
            node = network.edges[eid].end_node
            visited.add(node)
        if len(route) == length:
            return route


def simulate(network: RoadNetwork, cfg: SynthConfig, pieces: list[tuple[int, float, float]],
             departure: float, record_id: str = "") -> PathRecord:
    """Apply the travel-time law to a route, anchoring every node crossing."""
    t = departure
    dist = 0.0
    anchors = [(0.0, t)]
    for eid, f0, f1 in pieces:
        t += edge_time_s(network, cfg, eid, t, f1 - f0)
        dist += network.edges[eid].length_m * (f1 - f0)
        if f1 == 1.0 and network.nodes[network.edges[eid].end_node].node_type is not NodeType.PLAIN:
            t += cfg.signal_delay_s
        anchors.append((dist, t))
    return PathRecord(record_id, pieces, departure, anchors)


def generate_paths(network: RoadNetwork, cfg: SynthConfig, n_paths: int | None = None) -> list[PathRecord]:
    n = cfg.n_paths if n_paths is None else n_paths
    seeds = np.random.SeedSequence([cfg.seed, 2]).spawn(n)
    records = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        route = _random_route(network, cfg, rng)
        pieces = [(eid, 0.0, 1.0) for eid in route]
        if cfg.partial_ends and len(pieces) > 1:
            pieces[0] = (route[0], round(float(rng.uniform(0.0, 0.6)), 6), 1.0)
            pieces[-1] = (route[-1], 0.0, round(float(rng.uniform(0.4, 1.0)), 6))
        departure = round(cfg.start_epoch + float(rng.uniform(0, cfg.span_days * 86400)), 3)
        rec = simulate(network, cfg, pieces, departure, f"p{i:06d}")
        matched = path_length(rec, network)
        noise = rng.uniform(-cfg.raw_length_noise, cfg.raw_length_noise) if cfg.raw_length_noise else 0.0
        rec.raw_length_m = matched * (1.0 + noise)
        records.append(rec)
    return records


def free_flow_table(network: RoadNetwork, cfg: SynthConfig) -> TrafficTable:
    """The converged hourly table of the law's moving speeds (signal delays excluded)."""
    speeds = {}
    for eid, e in network.edges.items():
        for h in range(24):
            speeds[(eid, h)] = cfg.base_speed(e.road_type) * cfg.hourly_multipliers[h]
    road_types = {eid: e.road_type for eid, e in network.edges.items()}
    return TrafficTable(speeds, max(speeds.values()), road_types)


def segment_sum_baseline(traffic: TrafficTable, record: PathRecord, network: RoadNetwork) -> float:
    """Sum of covered length / table speed, each edge looked up at its predicted entry hour.

    The clock starts at departure and advances by the baseline's own edge
    times, so paths within one hour use the departure hour throughout.
    """
    if not record.path:
        raise ValidationError(f"record {record.id}: empty edge sequence")
    geom = PathGeometry(record, network)
    t = record.departure_time
    parts = []
    for eid, length in zip(geom.edge_ids, geom.piece_length):
        dt = length / traffic.speed(eid, local_hour(t, traffic.timezone))
        parts.append(dt)
        t += dt
    return float(math.fsum(parts))
