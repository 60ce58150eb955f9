"""PathCNN spatial layer, 1D-CNN temporal layer, sub-path heads and the losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .geo import PathGeometry, PathRecord, RoadNetwork, subpath_ground_truth
from .raster import RasterConfig, WindowingConfig, rasterize, slide_windows
from .traffic import TrafficTable, local_hour


@dataclass(frozen=True)
class PathCNNConfig:
    c_2d: tuple[int, ...] = (16, 32, 64, 128)
    f_2d: int = 3
    lambda_dim: int = 1024
    dropout_rate: float = 0.5

    def __post_init__(self):
        if len(self.c_2d) < 1:
            raise ValueError("PathCNN needs at least one max+avg layer")
        if self.f_2d % 2 == 0:
            raise ValueError("f_2d must be odd")

    @property
    def layers(self) -> int:
        return len(self.c_2d)


@dataclass(frozen=True)
class TemporalConfig:
    c_1d: tuple[int, ...] = (1024, 1024)
    f_1d: int = 3
    s_max: int = 50
    head_dims: tuple[int, ...] = (1024, 1024, 1)

    def __post_init__(self):
        if not self.head_dims or self.head_dims[-1] != 1:
            raise ValueError("head_dims must end with 1")
        if self.f_1d % 2 == 0:
            raise ValueError("f_1d must be odd")
        if self.s_max >> len(self.c_1d) < 1:
            raise ValueError("s_max too short for the number of pooled conv layers")


@dataclass(frozen=True)
class LossConfig:
    beta: float = 0.6
    gamma1: float = 0.1
    gamma2: float = 0.1
    gamma3: float = 0.01

    def __post_init__(self):
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if min(self.gamma1, self.gamma2, self.gamma3) < 0:
            raise ValueError("penalty weights must be non-negative")


# --- losses -----------------------------------------------------------------------

def mape_loss(estimates, truths) -> float:
    """Mean of |est - truth| / truth."""
    est, tru = np.asarray(estimates, dtype=float), np.asarray(truths, dtype=float)
    if np.any(tru <= 0):
        raise ValueError("MAPE needs positive ground truths")
    if est.size == 0:
        return 0.0
    return float(np.mean(np.abs(est - tru) / tru))


def mape_grad(estimates, truths) -> np.ndarray:
    est, tru = np.asarray(estimates), np.asarray(truths)
    return np.sign(est - tru) / tru / max(est.size, 1)


def total_loss(l_path: float, l_sub: float, penalties: Sequence[float], cfg: LossConfig) -> float:
    l_center, l_div, l_2 = penalties
    return (cfg.beta * l_path + (1.0 - cfg.beta) * l_sub
            + cfg.gamma1 * l_center + cfg.gamma2 * l_div + cfg.gamma3 * l_2)


def line_penalties(kernels: Sequence[np.ndarray], with_grad: bool = False):
    """Center, diversity and L2 penalties over every f x f channel of 2D kernels.

    Returns ``(l_center, l_div, l_2)``, plus a list of kernel gradients per
    penalty when ``with_grad``.
    """
    l_center = l_div = l_2 = 0.0
    grads = []
    for w in kernels:
        f = w.shape[0]
        chans = np.moveaxis(w.reshape(f * f, -1), 0, -1)  # (channels, f*f)
        mid = (f // 2) * f + f // 2
        others = np.delete(chans, mid, axis=1)
        h, dh = nn.softmax_entropy(others, axis=1)
        l_center -= float(chans[:, mid].sum())
        l_div -= float(h.sum())
        l_2 += float((w * w).sum())
        if with_grad:
            g_center = np.zeros_like(chans)
            g_center[:, mid] = -1.0
            g_div = np.insert(-dh, mid, 0.0, axis=1)
            back = lambda g: np.moveaxis(g, -1, 0).reshape(w.shape)
            grads.append((back(g_center), back(g_div), 2.0 * w))
    if with_grad:
        return (l_center, l_div, l_2), grads
    return l_center, l_div, l_2


# --- samples ------------------------------------------------------------------------

@dataclass
class PathSample:
    """A record turned into model input: window images and timing targets."""

    record_id: str
    images: np.ndarray          # (n, k, k, d), n <= s_max
    sub_truths: np.ndarray      # (n,)
    total_time_s: float
    n_windows: int              # before truncation


def prepare_sample(record: PathRecord, network: RoadNetwork, traffic: TrafficTable,
                   wcfg: WindowingConfig, rcfg: RasterConfig, s_max: int,
                   dtype=np.float32) -> PathSample:
    geom = PathGeometry(record, network)
    windows = slide_windows(record, wcfg, network, geom)
    kept = windows[:s_max]
    hour = local_hour(record.departure_time, traffic.timezone)
    images = np.stack([rasterize(w, record, network, traffic, rcfg, hour, geom, dtype) for w in kept])
    truths = np.array([subpath_ground_truth(record, w.span) for w in kept])
    return PathSample(record.id, images, truths, record.total_time_s, len(windows))


# --- the network --------------------------------------------------------------------

@dataclass
class ForwardResult:
    path_estimates: np.ndarray
    sub_estimates: np.ndarray
    owner: np.ndarray
    position: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


class DeepIST:
    """All learnable parameters plus forward/backward passes over batches of paths."""

    def __init__(self, rcfg: RasterConfig, pcfg: PathCNNConfig, tcfg: TemporalConfig,
                 seed: int = 0, dtype=np.float64):
        self.rcfg, self.pcfg, self.tcfg = rcfg, pcfg, tcfg
        self.dtype = np.dtype(dtype)
        self.path_scale = 1.0
        self.sub_scale = 1.0
        rng = np.random.default_rng(seed)
        self.params: dict[str, nn.Parameter] = {}

        def add(name, shape, fan_in):
            self.params[name + ".w"] = nn.Parameter(nn.kaiming_uniform(shape, fan_in, rng, self.dtype))
            self.params[name + ".b"] = nn.Parameter(np.zeros(shape[-1] if len(shape) > 2 else shape[0], self.dtype))

        cin, f = rcfg.d, pcfg.f_2d
        for m, c in enumerate(pcfg.c_2d):
            for branch in ("max", "avg"):
                add(f"spatial.{m}.{branch}", (f, f, cin, c), f * f * cin)
            cin = 2 * c
        side = rcfg.k >> pcfg.layers
        if side < 1:
            raise ValueError(f"k={rcfg.k} too small for {pcfg.layers} pooled layers")
        self.flatten_dim = 2 * pcfg.c_2d[-1] * side * side
        add("spatial.fc", (pcfg.lambda_dim, self.flatten_dim), self.flatten_dim)

        cin = pcfg.lambda_dim
        for n, c in enumerate(tcfg.c_1d):
            add(f"temporal.conv{n}", (tcfg.f_1d, cin, c), tcfg.f_1d * cin)
            cin = c
        self.temporal_flatten_dim = tcfg.c_1d[-1] * (tcfg.s_max >> len(tcfg.c_1d))
        fan = self.temporal_flatten_dim
        for i, width in enumerate(tcfg.head_dims):
            add(f"temporal.fc{i}", (width, fan), fan)
            fan = width
        lam = pcfg.lambda_dim
        add("subpath.fc0", (lam, lam), lam)
        add("subpath.fc1", (1, lam), lam)

    # -- bookkeeping --

    def p(self, name: str) -> np.ndarray:
        return self.params[name].value

    def conv2d_kernel_names(self) -> list[str]:
        return [f"spatial.{m}.{br}.w" for m in range(self.pcfg.layers) for br in ("max", "avg")]

    def zero_grad(self) -> None:
        for prm in self.params.values():
            prm.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, prm in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            if state[k].shape != prm.value.shape:
                raise nn.ShapeError(f"{k}: shape {state[k].shape} != {prm.value.shape}")
            prm.value[...] = state[k]

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.params.values())

    # -- spatial layer --

    def maxavg_forward(self, x, m: int):
        wmax, wavg = self.p(f"spatial.{m}.max.w"), self.p(f"spatial.{m}.avg.w")
        c = wmax.shape[-1]
        w = np.concatenate([wmax, wavg], axis=-1)
        b = np.concatenate([self.p(f"spatial.{m}.max.b"), self.p(f"spatial.{m}.avg.b")])
        z, conv_cache = nn.conv2d_forward(x, w, b)
        a, relu_mask = nn.relu_forward(z)
        ymax, pmax = nn.pool2d_forward(a[..., :c], "max")
        yavg, pavg = nn.pool2d_forward(a[..., c:], "avg")
        return np.concatenate([ymax, yavg], axis=-1), (conv_cache, relu_mask, pmax, pavg, c, a)

    def maxavg_backward(self, dy, m: int, cache):
        conv_cache, relu_mask, pmax, pavg, c, _ = cache
        da = np.concatenate([nn.pool2d_backward(dy[..., :c], pmax),
                             nn.pool2d_backward(dy[..., c:], pavg)], axis=-1)
        dx, dw, db = nn.conv2d_backward(nn.relu_backward(da, relu_mask), conv_cache)
        self.params[f"spatial.{m}.max.w"].grad += dw[..., :c]
        self.params[f"spatial.{m}.avg.w"].grad += dw[..., c:]
        self.params[f"spatial.{m}.max.b"].grad += db[:c]
        self.params[f"spatial.{m}.avg.b"].grad += db[c:]
        return dx

    def pathcnn_forward(self, images, training: bool = False, rng=None):
        """``(n, k, k, d)`` window images to ``(n, lambda)`` spatial pattern vectors."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (self.rcfg.k, self.rcfg.k, self.rcfg.d):
            raise nn.ShapeError(f"expected images of shape (k, k, d)={(self.rcfg.k, self.rcfg.k, self.rcfg.d)}, got {x.shape[1:]}")
        caches = []
        for m in range(self.pcfg.layers):
            x, cache = self.maxavg_forward(x, m)
            caches.append(cache)
        pooled_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.flatten_dim:
            raise nn.ShapeError(f"flatten size {flat.shape[1]} != {self.flatten_dim}")
        s, fc_cache = nn.dense_forward(flat, self.p("spatial.fc.w"), self.p("spatial.fc.b"), "relu")
        s, drop_mask = nn.dropout_forward(s, self.pcfg.dropout_rate, training, rng)
        return s, (caches, pooled_shape, fc_cache, drop_mask)

    def pathcnn_backward(self, ds, cache):
        caches, pooled_shape, fc_cache, drop_mask = cache
        ds = nn.dropout_backward(ds, drop_mask)
        dflat, dw, db = nn.dense_backward(ds, fc_cache)
        self.params["spatial.fc.w"].grad += dw
        self.params["spatial.fc.b"].grad += db
        dx = dflat.reshape(pooled_shape)
        for m in reversed(range(self.pcfg.layers)):
            dx = self.maxavg_backward(dx, m, caches[m])
        return dx

    # -- temporal layer --

    def temporal_forward(self, seq, training: bool = False, rng=None):
        """``(B, s_max, lambda)`` pattern sequences to raw ``(B,)`` path outputs."""
        y = np.asarray(seq, dtype=self.dtype)
        if y.ndim == 2:
            y = y[None]
        if y.shape[1:] != (self.tcfg.s_max, self.pcfg.lambda_dim):
            raise nn.ShapeError(f"expected sequence shape {(self.tcfg.s_max, self.pcfg.lambda_dim)}, got {y.shape[1:]}")
        conv_caches = []
        for n in range(len(self.tcfg.c_1d)):
            z, cc = nn.conv1d_forward(y, self.p(f"temporal.conv{n}.w"), self.p(f"temporal.conv{n}.b"))
            a, mask = nn.relu_forward(z)
            y, pc = nn.pool1d_max_forward(a)
            conv_caches.append((cc, mask, pc))
        pooled_shape = y.shape
        t = y.reshape(y.shape[0], -1)
        fc_caches = []
        last = len(self.tcfg.head_dims) - 1
        for i in range(len(self.tcfg.head_dims)):
            act = "linear" if i == last else "relu"
            t, fc = nn.dense_forward(t, self.p(f"temporal.fc{i}.w"), self.p(f"temporal.fc{i}.b"), act)
            drop = None
            if i != last:
                t, drop = nn.dropout_forward(t, self.pcfg.dropout_rate, training, rng)
            fc_caches.append((fc, drop))
        return t[:, 0], (conv_caches, pooled_shape, fc_caches)

    def temporal_backward(self, dout, cache):
        conv_caches, pooled_shape, fc_caches = cache
        dt = np.asarray(dout, dtype=self.dtype)[:, None]
        for i in reversed(range(len(fc_caches))):
            fc, drop = fc_caches[i]
            dt = nn.dropout_backward(dt, drop)
            dt, dw, db = nn.dense_backward(dt, fc)
            self.params[f"temporal.fc{i}.w"].grad += dw
            self.params[f"temporal.fc{i}.b"].grad += db
        dy = dt.reshape(pooled_shape)
        for n in reversed(range(len(conv_caches))):
            cc, mask, pc = conv_caches[n]
            da = nn.pool1d_max_backward(dy, pc)
            dy, dw, db = nn.conv1d_backward(nn.relu_backward(da, mask), cc)
            self.params[f"temporal.conv{n}.w"].grad += dw
            self.params[f"temporal.conv{n}.b"].grad += db
        return dy

    # -- multi-task heads --

    def subpath_forward(self, rows):
        """Shared two-layer head mapping each ``lambda`` row to a raw scalar."""
        rows = np.asarray(rows, dtype=self.dtype)
        h, c0 = nn.dense_forward(rows, self.p("subpath.fc0.w"), self.p("subpath.fc0.b"), "relu")
        out, c1 = nn.dense_forward(h, self.p("subpath.fc1.w"), self.p("subpath.fc1.b"), "linear")
        return out[:, 0], (c0, c1)

    def subpath_backward(self, dout, cache):
        c0, c1 = cache
        dh, dw, db = nn.dense_backward(np.asarray(dout, dtype=self.dtype)[:, None], c1)
        self.params["subpath.fc1.w"].grad += dw
        self.params["subpath.fc1.b"].grad += db
        drows, dw, db = nn.dense_backward(dh, c0)
        self.params["subpath.fc0.w"].grad += dw
        self.params["subpath.fc0.b"].grad += db
        return drows

    # -- whole model --

    def assemble(self, patterns, counts: Sequence[int]):
        """Stack per-window rows into zero-padded ``(B, s_max, lambda)`` sequences."""
        owner = np.repeat(np.arange(len(counts)), counts)
        position = np.concatenate([np.arange(c) for c in counts]) if len(counts) else np.zeros(0, int)
        if np.any(position >= self.tcfg.s_max):
            raise ValueError("more windows than s_max; truncate before assembling")
        seq = np.zeros((len(counts), self.tcfg.s_max, patterns.shape[1]), dtype=self.dtype)
        seq[owner, position] = patterns
        return seq, owner, position

    def forward(self, samples: Sequence[PathSample], training: bool = False, rng=None) -> ForwardResult:
        counts = [min(len(s.images), self.tcfg.s_max) for s in samples]
        images = np.concatenate([s.images[:c] for s, c in zip(samples, counts)])
        patterns, pcache = self.pathcnn_forward(images, training, rng)
        seq, owner, position = self.assemble(patterns, counts)
        raw_path, tcache = self.temporal_forward(seq, training, rng)
        raw_sub, scache = self.subpath_forward(patterns)
        return ForwardResult(self.path_scale * raw_path, self.sub_scale * raw_sub, owner, position,
                             {"pathcnn": pcache, "temporal": tcache, "subpath": scache})

    def backward(self, result: ForwardResult, d_path, d_sub) -> None:
        """Accumulate parameter gradients given d(loss)/d(estimates)."""
        c = result.cache
        dseq = self.temporal_backward(np.asarray(d_path) * self.path_scale, c["temporal"])
        drows = self.subpath_backward(np.asarray(d_sub) * self.sub_scale, c["subpath"])
        drows = drows + dseq[result.owner, result.position]
        self.pathcnn_backward(drows, c["pathcnn"])

    def penalties(self, with_grad: bool = False):
        kernels = [self.p(n) for n in self.conv2d_kernel_names()]
        return line_penalties(kernels, with_grad)

    def loss_and_backward(self, samples: Sequence[PathSample], cfg: LossConfig, rng=None,
                          training: bool = True) -> dict[str, float]:
        """Multi-task MAPE plus line penalties; gradients land in ``params[*].grad``."""
        self.zero_grad()
        res = self.forward(samples, training, rng)
        path_truth = np.array([s.total_time_s for s in samples])
        sub_truth = np.concatenate([s.sub_truths[:c] for s, c in
                                    zip(samples, np.bincount(res.owner, minlength=len(samples)))])
        # sub-path targets under one second are too noisy to divide by
        valid = sub_truth >= 1.0
        l_path = mape_loss(res.path_estimates, path_truth)
        l_sub = mape_loss(res.sub_estimates[valid], sub_truth[valid])
        d_path = cfg.beta * mape_grad(res.path_estimates, path_truth)
        d_sub = np.zeros_like(res.sub_estimates)
        if valid.any():
            d_sub[valid] = (1.0 - cfg.beta) * mape_grad(res.sub_estimates[valid], sub_truth[valid])
        self.backward(res, d_path, d_sub)
        (lc, ld, l2), grads = self.penalties(with_grad=True)
        for name, (gc, gd, g2) in zip(self.conv2d_kernel_names(), grads):
            self.params[name].grad += cfg.gamma1 * gc + cfg.gamma2 * gd + cfg.gamma3 * g2
        loss = total_loss(l_path, l_sub, (lc, ld, l2), cfg)
        return {"loss": loss, "path_mape": l_path, "sub_mape": l_sub,
                "l_center": lc, "l_div": ld, "l_2": l2}

    def predict(self, samples: Sequence[PathSample], batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(samples), batch_size):
            out.append(self.forward(samples[i:i + batch_size], training=False).path_estimates)
        return np.concatenate(out) if out else np.zeros(0)

    def feature_maps(self, image, layer: int) -> dict[str, np.ndarray]:
        """Post-ReLU, pre-pool activation grids of both branches of max+avg layer ``layer`` (1-based)."""
        if not 1 <= layer <= self.pcfg.layers:
            raise ValueError(f"layer must be in 1..{self.pcfg.layers}")
        x = np.asarray(image, dtype=self.dtype)[None]
        for m in range(layer):
            y, cache = self.maxavg_forward(x, m)
            if m == layer - 1:
                a, c = cache[5][0], cache[4]
                maps = {f"max{j:03d}": a[..., j] for j in range(c)}
                maps.update({f"avg{j:03d}": a[..., c + j] for j in range(c)})
                return maps
            x = y
        raise AssertionError("unreachable")


def full_forward(record: PathRecord, network: RoadNetwork, traffic: TrafficTable,
                 wcfg: WindowingConfig, model: DeepIST, training: bool = False, rng=None):
    """Estimate one path: ``(path_estimate, per-window estimates)``."""
    sample = prepare_sample(record, network, traffic, wcfg, model.rcfg, model.tcfg.s_max)
    res = model.forward([sample], training, rng)
    return float(res.path_estimates[0]), res.sub_estimates
