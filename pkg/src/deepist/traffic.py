"""Hourly per-edge speed table built from historical paths.

Stands in for a learned speed forecaster: every (edge, hour-of-day) cell holds
the mean traversal speed observed in the training records.  Lookups fall back
edge -> road type -> whole dataset when a cell was never observed.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from pathlib import Path
from typing import Sequence
from zoneinfo import ZoneInfo

from .geo import PathGeometry, PathRecord, RoadNetwork, RoadType, ValidationError, time_at


@lru_cache(maxsize=None)
def _zone(name: str):
    return timezone.utc if name.upper() == "UTC" else ZoneInfo(name)


def local_hour(epoch_s: float, tz: str = "UTC") -> int:
    if tz.upper() == "UTC":
        return int(math.floor(epoch_s / 3600.0)) % 24
    return datetime.fromtimestamp(epoch_s, _zone(tz)).hour


@dataclass
class TrafficTable:
    speeds: dict[tuple[int, int], float]
    global_max_speed: float
    road_types: dict[int, RoadType]
    edge_means: dict[int, float] = field(default_factory=dict)
    type_means: dict[RoadType, float] = field(default_factory=dict)
    dataset_mean: float = 0.0
    timezone: str = "UTC"

    def __post_init__(self):
        if not self.speeds:
            raise ValidationError("traffic table needs at least one observed speed")
        if any(v <= 0 for v in self.speeds.values()):
            raise ValidationError("traffic speeds must be positive")
        if not self.edge_means:
            self._derive_fallbacks()
        top = max(self.speeds.values())
        if self.global_max_speed < top:
            raise ValidationError(f"global_max_speed {self.global_max_speed} below stored speed {top}")

    def _derive_fallbacks(self) -> None:
        by_edge: dict[int, list[float]] = defaultdict(list)
        for (eid, _), v in self.speeds.items():
            by_edge[eid].append(v)
        self.edge_means = {eid: math.fsum(v) / len(v) for eid, v in by_edge.items()}
        by_type: dict[RoadType, list[float]] = defaultdict(list)
        for eid, v in self.edge_means.items():
            by_type[self.road_types.get(eid, RoadType.OTHER)].append(v)
        self.type_means = {t: math.fsum(v) / len(v) for t, v in by_type.items()}
        self.dataset_mean = math.fsum(self.edge_means.values()) / len(self.edge_means)

    def speed(self, edge_id: int, hour: int) -> float:
        v = self.speeds.get((edge_id, hour))
        if v is not None:
            return v
        v = self.edge_means.get(edge_id)
        if v is not None:
            return v
        return self.type_means.get(self.road_types.get(edge_id, RoadType.OTHER), self.dataset_mean)

    def normalized_speed(self, edge_id: int, hour: int) -> float:
        return self.speed(edge_id, hour) / self.global_max_speed


def normalized_speed(table: TrafficTable, edge_id: int, hour: int) -> float:
    """Speed scaled into (0, 1] by the dataset maximum."""
    return table.normalized_speed(edge_id, hour)


def edge_traversals(record: PathRecord, network: RoadNetwork, tz: str = "UTC"):
    """Yield ``(edge_id, entry_hour, speed_mps)`` for every piece with a timed traversal."""
    geom = PathGeometry(record, network)
    times = time_at(record, geom.cum)
    for i, eid in enumerate(geom.edge_ids):
        dt = times[i + 1] - times[i]
        if dt <= 0 or geom.piece_length[i] <= 0:
            continue  # outside the anchored span
        yield eid, local_hour(float(times[i]), tz), float(geom.piece_length[i] / dt)


def build_traffic_table(records: Sequence[PathRecord], network: RoadNetwork, tz: str = "UTC") -> TrafficTable:
    """Per (edge, entry hour) mean traversal speed.

    Sums are exactly rounded (``math.fsum``) so the table does not depend on
    record order.
    """
    samples: dict[tuple[int, int], list[float]] = defaultdict(list)
    top = 0.0
    for rec in records:
        for eid, hour, v in edge_traversals(rec, network, tz):
            samples[(eid, hour)].append(v)
            top = max(top, v)
    if not samples:
        raise ValidationError("cannot build a traffic table from no traversals")
    speeds = {key: math.fsum(vs) / len(vs) for key, vs in sorted(samples.items())}
    road_types = {eid: e.road_type for eid, e in network.edges.items()}
    return TrafficTable(speeds, top, road_types, timezone=tz)


def save_traffic_table(table: TrafficTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# global_max_speed={table.global_max_speed!r} timezone={table.timezone}\n")
        fh.write("edge_id,hour,mean_speed_mps\n")
        for (eid, hour) in sorted(table.speeds):
            fh.write(f"{eid},{hour},{table.speeds[(eid, hour)]!r}\n")


def load_traffic_table(path: str | Path, network: RoadNetwork) -> TrafficTable:
    meta: dict[str, str] = {}
    speeds: dict[tuple[int, int], float] = {}
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValidationError(f"{path}: missing metadata header")
        for item in first[1:].split():
            key, _, value = item.partition("=")
            meta[key] = value
        header = fh.readline().strip()
        if header != "edge_id,hour,mean_speed_mps":
            raise ValidationError(f"{path}: unexpected column header {header!r}")
        for line in fh:
            if line.strip():
                eid, hour, v = line.strip().split(",")
                speeds[(int(eid), int(hour))] = float(v)
    if "global_max_speed" not in meta:
        raise ValidationError(f"{path}: metadata lacks global_max_speed")
    road_types = {eid: e.road_type for eid, e in network.edges.items()}
    return TrafficTable(speeds, float(meta["global_max_speed"]), road_types,
                        timezone=meta.get("timezone", "UTC"))

