"""Dense and convolutional building blocks with hand-written gradients.

Every layer is a ``*_forward`` / ``*_backward`` pair.  Forward returns the
output and an opaque cache; backward takes the upstream gradient and that
cache.  Layouts are channels-last: images ``(B, H, W, C)``, sequences
``(B, L, C)``, 2D kernels ``(f, f, C_in, C_out)``, 1D kernels
``(f, C_in, C_out)`` and dense weights ``(out, in)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros_like(self.value))

    def zero_grad(self) -> None:
        self.grad[...] = 0


def kaiming_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# --- activations ---------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def dropout_forward(x, rate: float, training: bool, rng: np.random.Generator | int | None = None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    if not training or rate == 0:
        return x, None
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def dropout(x, rate: float, training: bool, rng_seed=None):
    return dropout_forward(x, rate, training, rng_seed)[0]


def softmax(z, axis: int = -1):
    z = np.asarray(z)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def shannon_index(p, axis: int = -1):
    """H(p) = -sum p ln p with 0 ln 0 = 0."""
    p = np.asarray(p)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=axis)


def softmax_entropy(z, axis: int = -1):
    """Entropy of softmax(z) along ``axis`` and its gradient with respect to ``z``."""
    z = np.asarray(z)
    shifted = z - z.max(axis=axis, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(logp)
    h = -(p * logp).sum(axis=axis)
    grad = -p * (logp + np.expand_dims(h, axis))
    return h, grad


# --- dense ----------------------------------------------------------------------

def dense_forward(x, w, b, activation: str = "linear"):
    if x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape}, weights {w.shape}, bias {b.shape}")
    z = x @ w.T + b
    if activation == "relu":
        y, mask = relu_forward(z)
    elif activation == "linear":
        y, mask = z, None
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return y, (x, w, mask)


def dense_backward(dy, cache):
    x, w, mask = cache
    if mask is not None:
        dy = dy * mask
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w, dy2.T @ x2, dy2.sum(axis=0)


def dense(x, w, b, activation: str = "linear"):
    return dense_forward(np.asarray(x), np.asarray(w), np.asarray(b), activation)[0]


# --- convolution ----------------------------------------------------------------

def _batched(x, ndim):
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1} or {ndim} dims, got shape {x.shape}")
    return x, False


def conv2d_forward(x, w, b):
    """Zero-padded 'same' cross-correlation, stride 1."""
    x, squeeze = _batched(x, 4)
    f, f2, cin, cout = w.shape
    if f != f2 or f % 2 == 0:
        raise ShapeError(f"conv2d kernel must be square with odd size, got {w.shape}")
    if x.shape[-1] != cin or b.shape != (cout,):
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    bsz, h, wd, _ = x.shape
    p = f // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (f, f), axis=(1, 2))  # (B, H, W, C, f, f)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * h * wd, f * f * cin)
    y = (cols @ w.reshape(-1, cout) + b).reshape(bsz, h, wd, cout)
    return (y[0] if squeeze else y), (cols, x.shape, w, squeeze)


def conv2d_backward(dy, cache):
    cols, xshape, w, squeeze = cache
    if squeeze:
        dy = dy[None]
    bsz, h, wd, cin = xshape
    f, _, _, cout = w.shape
    p = f // 2
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(-1, cout).T).reshape(bsz, h, wd, f, f, cin)
    dxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, cin), dtype=dy.dtype)
    for i in range(f):
        for j in range(f):
            dxp[:, i:i + h, j:j + wd, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, p:p + h, p:p + wd, :]
    return (dx[0] if squeeze else dx), dw, db


def conv2d_same(x, w, b):
    return conv2d_forward(np.asarray(x), np.asarray(w), np.asarray(b))[0]


def conv1d_forward(x, w, b):
    x, squeeze = _batched(x, 3)
    f, cin, cout = w.shape
    if f % 2 == 0:
        raise ShapeError(f"conv1d kernel size must be odd, got {f}")
    if x.shape[-1] != cin or b.shape != (cout,):
        raise ShapeError(f"conv1d: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    bsz, length, _ = x.shape
    p = f // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    win = sliding_window_view(xp, f, axis=1)  # (B, L, C, f)
    cols = win.transpose(0, 1, 3, 2).reshape(bsz * length, f * cin)
    y = (cols @ w.reshape(-1, cout) + b).reshape(bsz, length, cout)
    return (y[0] if squeeze else y), (cols, x.shape, w, squeeze)


def conv1d_backward(dy, cache):
    cols, xshape, w, squeeze = cache
    if squeeze:
        dy = dy[None]
    bsz, length, cin = xshape
    f, _, cout = w.shape
    p = f // 2
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(-1, cout).T).reshape(bsz, length, f, cin)
    dxp = np.zeros((bsz, length + 2 * p, cin), dtype=dy.dtype)
    for i in range(f):
        dxp[:, i:i + length, :] += dcols[:, :, i, :]
    dx = dxp[:, p:p + length, :]
    return (dx[0] if squeeze else dx), dw, db


def conv1d_same(x, w, b):
    return conv1d_forward(np.asarray(x), np.asarray(w), np.asarray(b))[0]


# --- pooling ----------------------------------------------------------------------
# size 2, stride 2, trailing odd row/column dropped

def pool2d_forward(x, mode: str = "max"):
    x, squeeze = _batched(x, 4)
    bsz, h, wd, c = x.shape
    if h < 2 or wd < 2:
        raise ShapeError(f"pool2d needs spatial extents >= 2, got {x.shape}")
    ho, wo = h // 2, wd // 2
    blocks = (x[:, :2 * ho, :2 * wo, :].reshape(bsz, ho, 2, wo, 2, c)
              .transpose(0, 1, 3, 5, 2, 4).reshape(bsz, ho, wo, c, 4))
    if mode == "max":
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    elif mode == "avg":
        arg = None
        y = blocks.mean(axis=-1)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return (y[0] if squeeze else y), (x.shape, arg, mode, squeeze)


def pool2d_backward(dy, cache):
    xshape, arg, mode, squeeze = cache
    if squeeze:
        dy = dy[None]
    bsz, h, wd, c = xshape
    ho, wo = h // 2, wd // 2
    if mode == "max":
        dblocks = np.zeros((bsz, ho, wo, c, 4), dtype=dy.dtype)
        np.put_along_axis(dblocks, arg[..., None], dy[..., None], axis=-1)
    else:
        dblocks = np.broadcast_to((dy / 4)[..., None], (bsz, ho, wo, c, 4))
    core = dblocks.reshape(bsz, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(bsz, 2 * ho, 2 * wo, c)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :2 * ho, :2 * wo, :] = core
    return dx[0] if squeeze else dx


def pool2d(x, mode: str = "max"):
    return pool2d_forward(np.asarray(x), mode)[0]


def pool1d_max_forward(x):
    x, squeeze = _batched(x, 3)
    bsz, length, c = x.shape
    if length < 2:
        raise ShapeError(f"pool1d needs length >= 2, got {x.shape}")
    lo = length // 2
    pairs = x[:, :2 * lo, :].reshape(bsz, lo, 2, c)
    arg = pairs.argmax(axis=2)
    y = np.take_along_axis(pairs, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return (y[0] if squeeze else y), (x.shape, arg, squeeze)


def pool1d_max_backward(dy, cache):
    xshape, arg, squeeze = cache
    if squeeze:
        dy = dy[None]
    bsz, length, c = xshape
    lo = length // 2
    dpairs = np.zeros((bsz, lo, 2, c), dtype=dy.dtype)
    np.put_along_axis(dpairs, arg[:, :, None, :], dy[:, :, None, :], axis=2)
    dx = np.zeros(xshape, dtype=dy.dtype)
    dx[:, :2 * lo, :] = dpairs.reshape(bsz, 2 * lo, c)
    return dx[0] if squeeze else dx


def pool1d_max(x):
    return pool1d_max_forward(np.asarray(x))[0]


# --- optimisation -------------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float, t: int, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; ``t`` counts steps from 1."""
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * p.grad
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * p.grad * p.grad
        p.value -= lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)


def grad_check(loss_fn: Callable[[], float], x: np.ndarray, analytic: np.ndarray, probes: int = 100,
               h: float = 1e-5, rng: np.random.Generator | int | None = 0, kink_tol: float | None = 1e-3,
               info: dict | None = None) -> float:
    """Max relative error between ``analytic`` and central differences of ``loss_fn``.

    ``loss_fn`` must read ``x`` (which is perturbed in place and restored).
    A probe whose forward and backward one-sided differences disagree by more
    than ``kink_tol`` (relative) straddles a ReLU, pooling or absolute-value
    kink; it is skipped and another coordinate drawn, so ``probes`` smooth
    points are compared.  Coordinates repeat when ``x`` is small.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    flat = x.reshape(-1)
    gflat = analytic.reshape(-1)

    def order():
        yield from rng.permutation(flat.size)
        while True:
            yield int(rng.integers(flat.size))

    base = loss_fn()
    worst, checked, skipped = 0.0, 0, 0
    for i in order():
        if checked >= probes or skipped > 10 * probes:
            break
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        fwd, bwd = (up - base) / h, (base - down) / h
        if kink_tol is not None and abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), 1e-8):
            skipped += 1
            continue
        checked += 1
        num = (up - down) / (2 * h)
        a = gflat[i]
        scale = max(abs(a), abs(num))
        if scale < 1e-8:
            continue
        worst = max(worst, abs(a - num) / scale)
    if info is not None:
        info.update(checked=checked, skipped=skipped)
    return worst


# --- checkpoints ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DISTCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    """Versioned header, JSON metadata, then name/shape/float64-LE values per parameter."""
    blob = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name])
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, nmeta = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(nmeta).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            size = int(np.prod(shape, dtype=np.int64))
            params[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return params, meta
