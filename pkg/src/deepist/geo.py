"""Road networks, matched paths and the arithmetic on top of them.

Distances use the equirectangular approximation::

    x = (lng2 - lng1) * cos((lat1 + lat2) / 2)
    y = lat2 - lat1
    d = R * sqrt(x^2 + y^2)          (angles in radians, R = 6371008.8 m)

which is accurate to well under 0.1% over the few kilometres a city path spans.
Edges are straight lines between their two nodes.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6371008.8


class ValidationError(ValueError):
    """Input that violates a structural invariant of networks or paths."""


class NodeType(str, Enum):
    PLAIN = "plain"
    TRAFFIC_LIGHT = "traffic_light"
    STOP_SIGN = "stop_sign"
    CROSSING = "crossing"

    @classmethod
    def parse(cls, value: str) -> "NodeType":
        # unknown source tags collapse to plain
        try:
            return cls(value.strip().lower())
        except ValueError:
            return cls.PLAIN


class RoadType(str, Enum):
    HIGHWAY = "highway"
    OTHER = "other"

    @classmethod
    def parse(cls, value: str) -> "RoadType":
        return cls.HIGHWAY if value.strip().lower() == "highway" else cls.OTHER


@dataclass(frozen=True)
class Node:
    id: int
    lng: float
    lat: float
    node_type: NodeType = NodeType.PLAIN

    def __post_init__(self):
        if not -180.0 <= self.lng <= 180.0 or not -90.0 <= self.lat <= 90.0:
            raise ValidationError(f"node {self.id}: coordinate out of range ({self.lng}, {self.lat})")


@dataclass(frozen=True)
class Edge:
    id: int
    start_node: int
    end_node: int
    road_type: RoadType
    length_m: float

    def __post_init__(self):
        if self.start_node == self.end_node:
            raise ValidationError(f"edge {self.id}: self loop on node {self.start_node}")
        if not self.length_m > 0:
            raise ValidationError(f"edge {self.id}: non-positive length {self.length_m}")


def distance_m(lng1: float, lat1: float, lng2: float, lat2: float) -> float:
    """Equirectangular ground distance in metres between two lng/lat points."""
    phi = math.radians(0.5 * (lat1 + lat2))
    x = math.radians(lng2 - lng1) * math.cos(phi)
    y = math.radians(lat2 - lat1)
    return EARTH_RADIUS_M * math.hypot(x, y)


def metres_to_degrees(dx_m: float, dy_m: float, lat: float) -> tuple[float, float]:
    """Inverse of the equirectangular mapping around latitude ``lat``."""
    dlat = math.degrees(dy_m / EARTH_RADIUS_M)
    dlng = math.degrees(dx_m / (EARTH_RADIUS_M * math.cos(math.radians(lat))))
    return dlng, dlat


@dataclass
class RoadNetwork:
    nodes: dict[int, Node]
    edges: dict[int, Edge]
    _out: dict[int, list[int]] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        for e in self.edges.values():
            if e.start_node not in self.nodes or e.end_node not in self.nodes:
                raise ValidationError(f"edge {e.id}: endpoint not in node set")
        self._out = {}
        for eid in sorted(self.edges):
            self._out.setdefault(self.edges[eid].start_node, []).append(eid)

    @classmethod
    def from_lists(cls, nodes: Iterable[Node], edges: Iterable[Edge]) -> "RoadNetwork":
        return cls({n.id: n for n in nodes}, {e.id: e for e in edges})

    def edge(self, edge_id: int) -> Edge:
        try:
            return self.edges[edge_id]
        except KeyError:
            raise ValidationError(f"unknown edge id {edge_id}") from None

    def out_edges(self, node_id: int) -> list[int]:
        return self._out.get(node_id, [])

    def edge_coords(self, edge_id: int) -> tuple[float, float, float, float]:
        e = self.edge(edge_id)
        a, b = self.nodes[e.start_node], self.nodes[e.end_node]
        return a.lng, a.lat, b.lng, b.lat

    def find_edge(self, start_node: int, end_node: int) -> int | None:
        for eid in self.out_edges(start_node):
            if self.edges[eid].end_node == end_node:
                return eid
        return None


def make_edge(network_nodes: dict[int, Node], edge_id: int, start: int, end: int, road_type: RoadType) -> Edge:
    a, b = network_nodes[start], network_nodes[end]
    return Edge(edge_id, start, end, road_type, distance_m(a.lng, a.lat, b.lng, b.lat))


@dataclass
class PathRecord:
    """A map-matched path with the timing anchors of its source trajectory.

    ``path`` holds ``(edge_id, start_fraction, end_fraction)`` triples and
    ``sample_anchors`` holds ``(distance_along_path_m, timestamp)`` pairs.
    """

    id: str
    path: list[tuple[int, float, float]]
    departure_time: float
    sample_anchors: list[tuple[float, float]]
    raw_length_m: float | None = None

    @property
    def total_time_s(self) -> float:
        return self.sample_anchors[-1][1] - self.sample_anchors[0][1]

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "path": [[int(e), float(a), float(b)] for e, a, b in self.path],
            "departure_time": self.departure_time,
            "anchors": [[float(d), float(t)] for d, t in self.sample_anchors],
        }
        if self.raw_length_m is not None:
            obj["raw_length_m"] = self.raw_length_m
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str, default_id: str = "") -> "PathRecord":
        try:
            obj = json.loads(line)
            return cls(
                id=str(obj.get("id", default_id)),
                path=[(int(e), float(a), float(b)) for e, a, b in obj["path"]],
                departure_time=float(obj["departure_time"]),
                sample_anchors=[(float(d), float(t)) for d, t in obj["anchors"]],
                raw_length_m=None if obj.get("raw_length_m") is None else float(obj["raw_length_m"]),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"malformed path record {default_id!r}: {exc}") from exc


def validate_path(record: PathRecord, network: RoadNetwork) -> None:
    pieces = record.path
    if not pieces:
        raise ValidationError(f"record {record.id}: empty edge sequence")
    last = len(pieces) - 1
    for i, (eid, f0, f1) in enumerate(pieces):
        edge = network.edge(eid)
        if not (0.0 <= f0 < f1 <= 1.0):
            raise ValidationError(f"record {record.id}: bad fractions ({f0}, {f1}) on edge {eid}")
        if (i > 0 and f0 != 0.0) or (i < last and f1 != 1.0):
            raise ValidationError(f"record {record.id}: interior edge {eid} partially covered")
        if i > 0 and network.edges[pieces[i - 1][0]].end_node != edge.start_node:
            raise ValidationError(f"record {record.id}: edges {pieces[i - 1][0]} -> {eid} not connected")
    anchors = record.sample_anchors
    if len(anchors) < 2:
        raise ValidationError(f"record {record.id}: fewer than two anchors")
    for (d0, t0), (d1, t1) in zip(anchors, anchors[1:]):
        if not (d1 > d0 and t1 > t0):
            raise ValidationError(f"record {record.id}: anchors not strictly increasing")


class PathGeometry:
    """Arc-length parametrisation of a path: one straight piece per covered edge."""

    def __init__(self, record: PathRecord, network: RoadNetwork):
        if not record.path:
            raise ValidationError(f"record {record.id}: empty edge sequence")
        n = len(record.path)
        self.edge_ids = [eid for eid, _, _ in record.path]
        self.f0 = np.array([a for _, a, _ in record.path], dtype=float)
        self.f1 = np.array([b for _, _, b in record.path], dtype=float)
        coords = np.array([network.edge_coords(eid) for eid in self.edge_ids], dtype=float).reshape(n, 4)
        self.edge_start = coords[:, 0:2]
        self.edge_end = coords[:, 2:4]
        self.edge_length = np.array([network.edges[eid].length_m for eid in self.edge_ids])
        self.piece_length = self.edge_length * (self.f1 - self.f0)
        self.cum = np.concatenate([[0.0], np.cumsum(self.piece_length)])
        self.length = float(self.cum[-1])

    def point_on_edge(self, i: int, frac: float) -> tuple[float, float]:
        p = self.edge_start[i] + frac * (self.edge_end[i] - self.edge_start[i])
        return float(p[0]), float(p[1])

    def fraction_at(self, i: int, distance: float) -> float:
        """Edge fraction on piece ``i`` at path arc-length ``distance``."""
        if self.piece_length[i] == 0:
            return float(self.f0[i])
        local = (distance - self.cum[i]) / self.piece_length[i]
        local = min(max(local, 0.0), 1.0)
        return float(self.f0[i] + local * (self.f1[i] - self.f0[i]))

    def piece_index(self, distance: float) -> int:
        i = int(np.searchsorted(self.cum, distance, side="right")) - 1
        return min(max(i, 0), len(self.edge_ids) - 1)

    def locate(self, distance: float) -> tuple[float, float]:
        if not -1e-9 <= distance <= self.length + 1e-9:
            raise ValidationError(f"distance {distance} outside [0, {self.length}]")
        i = self.piece_index(distance)
        return self.point_on_edge(i, self.fraction_at(i, distance))

    def pieces_in_span(self, start_m: float, end_m: float) -> list[tuple[int, float, float]]:
        """Pieces overlapping ``[start_m, end_m]`` as ``(piece_index, frac_from, frac_to)``."""
        out = []
        for i in range(len(self.edge_ids)):
            lo, hi = self.cum[i], self.cum[i + 1]
            a, b = max(lo, start_m), min(hi, end_m)
            degenerate = end_m == start_m and lo <= start_m <= hi and not out
            if b > a or degenerate:
                out.append((i, self.fraction_at(i, a), self.fraction_at(i, b)))
        return out

    def breakpoints(self, start_m: float, end_m: float) -> list[tuple[float, float]]:
        """Window entry point, the node coordinates strictly inside the span, exit point."""
        pts = [self.locate(start_m)]
        for i in range(1, len(self.edge_ids)):
            if start_m < self.cum[i] < end_m:
                pts.append((float(self.edge_start[i][0]), float(self.edge_start[i][1])))
        if end_m > start_m:
            pts.append(self.locate(end_m))
        return pts


def path_length(record: PathRecord, network: RoadNetwork) -> float:
    """Covered length of the path in metres."""
    if not record.path:
        raise ValidationError(f"record {record.id}: empty edge sequence")
    return float(sum(network.edge(eid).length_m * (f1 - f0) for eid, f0, f1 in record.path))


def locate(record: PathRecord, network: RoadNetwork, distance: float) -> tuple[float, float]:
    return PathGeometry(record, network).locate(distance)


def reverse_path(record: PathRecord, network: RoadNetwork) -> PathRecord:
    """The same geometry travelled backwards; needs the opposite edge for every piece."""
    pieces = []
    for eid, f0, f1 in reversed(record.path):
        e = network.edge(eid)
        rev = network.find_edge(e.end_node, e.start_node)
        if rev is None:
            raise ValidationError(f"edge {eid} has no reverse edge")
        pieces.append((rev, 1.0 - f1, 1.0 - f0))
    total = path_length(record, network)
    t0, t1 = record.sample_anchors[0][1], record.sample_anchors[-1][1]
    return PathRecord(record.id + "-rev", pieces, record.departure_time, [(0.0, t0), (total, t1)], record.raw_length_m)


def filter_dataset(records: Sequence[PathRecord], network: RoadNetwork,
                   min_time_s: float = 60.0, max_time_s: float = 3600.0,
                   max_length_deviation: float = 0.10) -> list[PathRecord]:
    """Keep trips of 1 to 60 minutes whose matched length is within 10% of the raw one.

    Records without a ``raw_length_m`` skip the length check.  Both bounds are
    inclusive.
    """
    kept = []
    for rec in records:
        if not min_time_s <= rec.total_time_s <= max_time_s:
            continue
        if rec.raw_length_m is not None:
            if rec.raw_length_m <= 0:
                continue
            matched = path_length(rec, network)
            # tiny slack so that an exact +-10% on decimal inputs stays inside
            if abs(matched - rec.raw_length_m) / rec.raw_length_m > max_length_deviation + 1e-12:
                continue
        kept.append(rec)
    return kept


def time_at(record: PathRecord, distance: float | np.ndarray) -> float | np.ndarray:
    """Timestamp at a path distance by linear interpolation of the anchors (clamped)."""
    anchors = np.asarray(record.sample_anchors, dtype=float)
    return np.interp(distance, anchors[:, 0], anchors[:, 1])


def subpath_ground_truth(record: PathRecord, span: tuple[float, float]) -> float:
    """Travel time over ``span`` assuming constant speed between consecutive anchors."""
    start_m, end_m = span
    if len(record.sample_anchors) < 2:
        raise ValidationError(f"record {record.id}: fewer than two anchors")
    if end_m < start_m:
        raise ValidationError(f"inverted span {span}")
    t = time_at(record, np.array([start_m, end_m]))
    return float(t[1] - t[0])


# --- file formats ----------------------------------------------------------

def load_network(directory: str | Path) -> RoadNetwork:
    directory = Path(directory)
    nodes: dict[int, Node] = {}
    with open(directory / "nodes.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                n = Node(int(row["id"]), float(row["lng"]), float(row["lat"]), NodeType.parse(row.get("node_type", "plain")))
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"nodes.csv: bad row {row}: {exc}") from exc
            nodes[n.id] = n
    edges: dict[int, Edge] = {}
    with open(directory / "edges.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                eid, s, e = int(row["id"]), int(row["start_node"]), int(row["end_node"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"edges.csv: bad row {row}: {exc}") from exc
            if s not in nodes or e not in nodes:
                raise ValidationError(f"edges.csv: edge {eid} references unknown node")
            edges[eid] = make_edge(nodes, eid, s, e, RoadType.parse(row.get("road_type", "other")))
    return RoadNetwork(nodes, edges)


def save_network(network: RoadNetwork, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lng", "lat", "node_type"])
        for nid in sorted(network.nodes):
            n = network.nodes[nid]
            w.writerow([n.id, f"{n.lng:.9f}", f"{n.lat:.9f}", n.node_type.value])
    with open(directory / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "start_node", "end_node", "road_type"])
        for eid in sorted(network.edges):
            e = network.edges[eid]
            w.writerow([e.id, e.start_node, e.end_node, e.road_type.value])


def load_paths(path: str | Path) -> list[PathRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if line.strip():
                records.append(PathRecord.from_json(line, default_id=str(lineno)))
    return records


def save_paths(records: Iterable[PathRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
