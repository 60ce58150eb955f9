"""Sliding windows over a path and their rendering as multi-channel images.

Channel layout of a rendered window (``k x k x 4``, row 0 is north):

0. the sub-path, value 1
1. the sub-path again, valued with the normalised speed of each covered edge
2. every road of the network crossing the window area (highways drawn wider)
3. intersections carrying a signal, stop sign or crossing, one pixel each
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .geo import NodeType, PathGeometry, PathRecord, RoadNetwork, RoadType, ValidationError
from .traffic import TrafficTable, local_hour

CH_PATH, CH_TRAFFIC, CH_NETWORK, CH_SIGNALS = 0, 1, 2, 3


@dataclass(frozen=True)
class WindowingConfig:
    window_km: float = 0.5
    step_km: float = 0.4

    def __post_init__(self):
        if not self.window_km >= self.step_km > 0:
            raise ValidationError(f"need window >= step > 0, got w={self.window_km}, s={self.step_km}")


@dataclass(frozen=True)
class RasterConfig:
    k: int = 100
    d: int = 4
    r_lng: float = 0.0058699
    r_lat: float = 0.0044966
    highway_width_px: int = 2
    other_width_px: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("k must be at least 2")
        if self.d != 4:
            raise ValidationError("only the four-channel layout is rendered")
        if self.r_lng <= 0 or self.r_lat <= 0:
            raise ValidationError("geographic ranges must be positive")
        if self.highway_width_px < 1 or self.other_width_px < 1:
            raise ValidationError("stroke widths must be >= 1")


@dataclass(frozen=True)
class GeoProjection:
    """Linear map of a ``r_lng x r_lat`` box centred on ``origin`` onto ``k x k`` pixels."""

    origin_lng: float
    origin_lat: float
    r_lng: float
    r_lat: float
    k: int

    def to_pixel(self, lng, lat):
        """Continuous (x, y); pixel ``(floor(x), floor(y))`` contains the point, north up."""
        x = self.k / 2 + (np.asarray(lng) - self.origin_lng) / self.r_lng * self.k
        y = self.k / 2 - (np.asarray(lat) - self.origin_lat) / self.r_lat * self.k
        return x, y

    def to_index(self, lng, lat):
        x, y = self.to_pixel(lng, lat)
        return np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)


@dataclass(frozen=True)
class SubPathWindow:
    index: int
    span: tuple[float, float]
    center: tuple[float, float]


# --- windowing ---------------------------------------------------------------

_EPS = 1e-9


def window_count(length_m: float, cfg: WindowingConfig) -> int:
    w, s = cfg.window_km * 1000.0, cfg.step_km * 1000.0
    if length_m <= w:
        return 1
    return 1 + math.ceil((length_m - w) / s - _EPS)


def window_spans(length_m: float, cfg: WindowingConfig) -> list[tuple[float, float]]:
    w, s = cfg.window_km * 1000.0, cfg.step_km * 1000.0
    return [(i * s, min(i * s + w, length_m)) for i in range(window_count(length_m, cfg))]


def window_partition(spans: Sequence[tuple[float, float]]) -> list[tuple[float, float]]:
    """Disjoint cover built from overlapping windows: each window up to the next start."""
    out = []
    for i, (a, b) in enumerate(spans):
        end = spans[i + 1][0] if i + 1 < len(spans) else b
        out.append((a, end))
    return out


def window_center(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mean of the sub-path breakpoints (entry, interior nodes, exit)."""
    if not points:
        raise ValidationError("window has no points")
    arr = np.asarray(points, dtype=float)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def slide_windows(record: PathRecord, cfg: WindowingConfig, network: RoadNetwork,
                  geometry: PathGeometry | None = None) -> list[SubPathWindow]:
    geom = geometry or PathGeometry(record, network)
    if geom.length <= 0:
        raise ValidationError(f"record {record.id}: zero-length path")
    return [SubPathWindow(i, span, window_center(geom.breakpoints(*span)))
            for i, span in enumerate(window_spans(geom.length, cfg))]


# --- line drawing ------------------------------------------------------------

def line_pixels(x0: int, y0: int, x1: int, y1: int, lo: int = 0, hi: int | None = None):
    """Integer grid line from (x0, y0) to (x1, y1), midpoint rule, endpoints included.

    Returns ``(xs, ys, x_major)`` restricted to steps ``lo..hi``; step ``i``
    sits at parameter ``i / n`` with ``n = max(|dx|, |dy|)``.
    """
    dx, dy = x1 - x0, y1 - y0
    adx, ady = abs(dx), abs(dy)
    n = max(adx, ady)
    hi = n if hi is None else min(hi, n)
    lo = max(lo, 0)
    i = np.arange(lo, hi + 1, dtype=np.int64)
    sx = 1 if dx >= 0 else -1
    sy = 1 if dy >= 0 else -1
    if n == 0:
        return np.full(len(i), x0, np.int64), np.full(len(i), y0, np.int64), True
    if adx >= ady:
        xs = x0 + sx * i
        ys = y0 + sy * ((2 * i * ady + adx) // (2 * adx))
        return xs, ys, True
    ys = y0 + sy * i
    xs = x0 + sx * ((2 * i * adx + ady) // (2 * ady))
    return xs, ys, False


def _major_range(x0: int, y0: int, x1: int, y1: int, k: int, margin: int = 2) -> tuple[int, int]:
    """Step range whose major coordinate lies within the image (plus margin)."""
    dx, dy = x1 - x0, y1 - y0
    n = max(abs(dx), abs(dy))
    if n == 0:
        return 0, 0
    start, d = (x0, dx) if abs(dx) >= abs(dy) else (y0, dy)
    step = 1 if d >= 0 else -1
    # start + step*i in [-margin, k - 1 + margin]
    a = (-margin - start) * step
    b = (k - 1 + margin - start) * step
    lo, hi = min(a, b), max(a, b)
    return max(lo, 0), min(hi, n)


def _stamp(channel: np.ndarray, xs, ys, x_major: bool, width: int, value: float, keep_existing=False):
    k = channel.shape[0]
    for offset in range(width):
        px = xs if x_major else xs + offset
        py = ys + offset if x_major else ys
        ok = (px >= 0) & (px < k) & (py >= 0) & (py < k)
        px, py = px[ok], py[ok]
        if keep_existing:
            fresh = channel[py, px] == 0
            px, py = px[fresh], py[fresh]
        channel[py, px] = value


class NetworkRasterIndex:
    """Undirected line list and signal nodes of a network, as flat arrays."""

    def __init__(self, network: RoadNetwork):
        lines: dict[tuple[int, int], RoadType] = {}
        for eid in sorted(network.edges):
            e = network.edges[eid]
            key = (min(e.start_node, e.end_node), max(e.start_node, e.end_node))
            if key not in lines or e.road_type is RoadType.HIGHWAY:
                lines[key] = e.road_type
        self.keys = list(lines)
        nodes = network.nodes
        self.a = np.array([[nodes[a].lng, nodes[a].lat] for a, _ in self.keys]).reshape(-1, 2)
        self.b = np.array([[nodes[b].lng, nodes[b].lat] for _, b in self.keys]).reshape(-1, 2)
        self.highway = np.array([lines[key] is RoadType.HIGHWAY for key in self.keys], dtype=bool)
        sig = [n for nid, n in sorted(nodes.items()) if n.node_type is not NodeType.PLAIN]
        self.signals = np.array([[n.lng, n.lat] for n in sig]).reshape(-1, 2)


def network_index(network: RoadNetwork) -> NetworkRasterIndex:
    idx = getattr(network, "_raster_index", None)
    if idx is None:
        idx = NetworkRasterIndex(network)
        network._raster_index = idx
    return idx


def _canonical(network: RoadNetwork, edge_id: int) -> tuple[int, int, bool]:
    e = network.edges[edge_id]
    if e.start_node < e.end_node:
        return e.start_node, e.end_node, False
    return e.end_node, e.start_node, True


def rasterize(window: SubPathWindow, record: PathRecord, network: RoadNetwork, traffic: TrafficTable,
              cfg: RasterConfig, hour: int | None = None, geometry: PathGeometry | None = None,
              dtype=np.float32) -> np.ndarray:
    """Render one window as a ``k x k x 4`` generalized image."""
    geom = geometry or PathGeometry(record, network)
    if hour is None:
        hour = local_hour(record.departure_time, traffic.timezone)
    k = cfg.k
    proj = GeoProjection(window.center[0], window.center[1], cfg.r_lng, cfg.r_lat, k)
    img = np.zeros((k, k, cfg.d), dtype=dtype)
    nodes = network.nodes

    def node_px(nid):
        x, y = proj.to_index(nodes[nid].lng, nodes[nid].lat)
        return int(x), int(y)

    # road network: every undirected line whose pixel bbox touches the image
    idx = network_index(network)
    if len(idx.keys):
        ax, ay = proj.to_index(idx.a[:, 0], idx.a[:, 1])
        bx, by = proj.to_index(idx.b[:, 0], idx.b[:, 1])
        reach = max(cfg.highway_width_px, cfg.other_width_px)
        hit = ((np.minimum(ax, bx) < k) & (np.maximum(ax, bx) >= -reach)
               & (np.minimum(ay, by) < k) & (np.maximum(ay, by) >= -reach))
        for j in np.flatnonzero(hit):
            x0, y0, x1, y1 = int(ax[j]), int(ay[j]), int(bx[j]), int(by[j])
            lo, hi = _major_range(x0, y0, x1, y1, k)
            if lo > hi:
                continue
            xs, ys, major = line_pixels(x0, y0, x1, y1, lo, hi)
            width = cfg.highway_width_px if idx.highway[j] else cfg.other_width_px
            _stamp(img[:, :, CH_NETWORK], xs, ys, major, width, 1.0)

    if len(idx.signals):
        sx, sy = proj.to_index(idx.signals[:, 0], idx.signals[:, 1])
        ok = (sx >= 0) & (sx < k) & (sy >= 0) & (sy < k)
        img[sy[ok], sx[ok], CH_SIGNALS] = 1.0

    # sub-path: the covered stretch of each edge's own line, so it always
    # lands on the pixels the network channel drew for that edge
    for piece, g0, g1 in geom.pieces_in_span(*window.span):
        eid = geom.edge_ids[piece]
        u, v, flipped = _canonical(network, eid)
        x0, y0 = node_px(u)
        x1, y1 = node_px(v)
        n = max(abs(x1 - x0), abs(y1 - y0))
        c0, c1 = (1.0 - g1, 1.0 - g0) if flipped else (g0, g1)
        lo, hi = int(round(c0 * n)), int(round(c1 * n))
        mlo, mhi = _major_range(x0, y0, x1, y1, k)
        lo, hi = max(lo, mlo), min(hi, mhi)
        if lo > hi:
            continue
        xs, ys, major = line_pixels(x0, y0, x1, y1, lo, hi)
        _stamp(img[:, :, CH_PATH], xs, ys, major, 1, 1.0)
        _stamp(img[:, :, CH_TRAFFIC], xs, ys, major, 1, traffic.normalized_speed(eid, hour), keep_existing=True)
    return img


def render_path(record: PathRecord, network: RoadNetwork, traffic: TrafficTable,
                wcfg: WindowingConfig, rcfg: RasterConfig, limit: int | None = None,
                dtype=np.float32) -> tuple[list[SubPathWindow], np.ndarray]:
    """All windows of a record and their images stacked as ``(n, k, k, d)``."""
    geom = PathGeometry(record, network)
    windows = slide_windows(record, wcfg, network, geom)
    if limit is not None:
        windows = windows[:limit]
    hour = local_hour(record.departure_time, traffic.timezone)
    images = np.stack([rasterize(w, record, network, traffic, rcfg, hour, geom, dtype) for w in windows])
    return windows, images


# --- dumps -------------------------------------------------------------------

def write_ppm(path: str | Path, grid: np.ndarray, normalize: bool = False) -> None:
    """Grey-level grid as a binary P6 pixmap; values in [0, 1] unless ``normalize``."""
    g = np.asarray(grid, dtype=float)
    if normalize:
        span = g.max() - g.min()
        g = (g - g.min()) / span if span > 0 else np.zeros_like(g)
    pix = np.clip(np.rint(g * 255.0), 0, 255).astype(np.uint8)
    rgb = np.repeat(pix[:, :, None], 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValidationError(f"{path}: not a P6 pixmap")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def dump_window_channels(directory: str | Path, record_id: str, window_index: int, image: np.ndarray) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for c in range(image.shape[2]):
        p = directory / f"{record_id}_{window_index}_{c}.ppm"
        write_ppm(p, image[:, :, c])
        out.append(p)
    return out


def write_tensor_batch(path: str | Path, images: np.ndarray) -> None:
    """Header of three little-endian int32 (k, d, n), then float32 windows row-major."""
    n, k, k2, d = images.shape
    if k != k2:
        raise ValidationError("images must be square")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<3i", k, d, n))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_tensor_batch(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        k, d, n = struct.unpack("<3i", fh.read(12))
        body = np.frombuffer(fh.read(), dtype="<f4")
    if body.size != n * k * k * d:
        raise ValidationError(f"{path}: expected {n * k * k * d} values, found {body.size}")
    return body.reshape(n, k, k, d).astype(np.float32)
