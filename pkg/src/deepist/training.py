"""Dataset splits, the training loop, metrics and feature-map export."""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nn
from .config import Settings, TrainConfig
from .geo import PathGeometry, PathRecord, RoadNetwork, subpath_ground_truth
from .model import DeepIST, LossConfig, PathSample
from .raster import RasterConfig, WindowingConfig, rasterize, slide_windows, write_ppm
from .traffic import TrafficTable, local_hour

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    rmse_s: float
    mae_s: float
    mape_pct: float
    n_examples: int

    def line(self) -> str:
        return f"n={self.n_examples} RMSE={self.rmse_s:.2f} s MAE={self.mae_s:.2f} s MAPE={self.mape_pct:.2f} %"


def metrics(predictions, truths) -> MetricsReport:
    pred = np.asarray(predictions, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if pred.shape != tru.shape:
        raise ValueError("predictions and truths differ in length")
    if tru.size == 0:
        return MetricsReport(0.0, 0.0, 0.0, 0)
    err = pred - tru
    # fsum keeps the result independent of example order
    mse = math.fsum((err * err).tolist()) / tru.size
    mae = math.fsum(np.abs(err).tolist()) / tru.size
    mape = 100.0 * math.fsum((np.abs(err) / tru).tolist()) / tru.size
    return MetricsReport(math.sqrt(mse), mae, mape, int(tru.size))


def split_dataset(records: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffle into disjoint train/val/test lists."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    pick = lambda idx: [records[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


class Featurizer:
    """Turns records into model samples, rasterising lazily through an LRU window cache."""

    def __init__(self, network: RoadNetwork, traffic: TrafficTable, wcfg: WindowingConfig,
                 rcfg: RasterConfig, s_max: int, cache_size: int = 100000, dtype=np.float32):
        self.network, self.traffic = network, traffic
        self.wcfg, self.rcfg, self.s_max = wcfg, rcfg, s_max
        self.cache_size = cache_size
        self.dtype = dtype
        self._cache: OrderedDict[tuple[str, int], np.ndarray] = OrderedDict()
        self._meta: dict[str, tuple] = {}

    def _layout(self, record: PathRecord):
        meta = self._meta.get(record.id)
        if meta is None:
            geom = PathGeometry(record, self.network)
            windows = slide_windows(record, self.wcfg, self.network, geom)
            truths = np.array([subpath_ground_truth(record, w.span) for w in windows[:self.s_max]])
            meta = (geom, windows, truths)
            self._meta[record.id] = meta
        return meta

    def window_image(self, record: PathRecord, index: int) -> np.ndarray:
        key = (record.id, index)
        img = self._cache.get(key)
        if img is not None:
            self._cache.move_to_end(key)
            return img
        geom, windows, _ = self._layout(record)
        hour = local_hour(record.departure_time, self.traffic.timezone)
        img = rasterize(windows[index], record, self.network, self.traffic, self.rcfg, hour, geom, self.dtype)
        if self.cache_size > 0:
            self._cache[key] = img
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return img

    def sample(self, record: PathRecord) -> PathSample:
        _, windows, truths = self._layout(record)
        n = min(len(windows), self.s_max)
        images = np.stack([self.window_image(record, i) for i in range(n)])
        return PathSample(record.id, images, truths, record.total_time_s, len(windows))

    def samples(self, records: Sequence[PathRecord]) -> list[PathSample]:
        return [self.sample(r) for r in records]


def predict(model: DeepIST, records: Sequence[PathRecord], featurizer: Featurizer,
            batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(records), batch_size):
        chunk = featurizer.samples(records[i:i + batch_size])
        out.append(model.forward(chunk, training=False).path_estimates)
    return np.concatenate(out).astype(np.float64) if out else np.zeros(0)


def evaluate(model: DeepIST, records: Sequence[PathRecord], featurizer: Featurizer) -> MetricsReport:
    return metrics(predict(model, records, featurizer), [r.total_time_s for r in records])


def calibrate_output_scale(model: DeepIST, records: Sequence[PathRecord], featurizer: Featurizer) -> None:
    """Express outputs in units of the mean target and start the final biases at 1.

    Keeps the raw regression targets near unit scale so a fresh model starts
    close to the mean travel time.
    """
    model.path_scale = float(np.mean([r.total_time_s for r in records]))
    subs = np.concatenate([featurizer.sample(r).sub_truths for r in records])
    model.sub_scale = float(np.mean(subs)) if subs.size else 1.0
    last = len(model.tcfg.head_dims) - 1
    model.params[f"temporal.fc{last}.b"].value[...] = 1.0
    model.params["subpath.fc1.b"].value[...] = 1.0


@dataclass
class TrainResult:
    model: DeepIST
    history: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_val_mae: float = math.inf


def train(model: DeepIST, train_records: Sequence[PathRecord], val_records: Sequence[PathRecord],
          featurizer: Featurizer, loss_cfg: LossConfig, cfg: TrainConfig,
          calibrate: bool = True, callback: Callable[[dict], bool | None] | None = None) -> TrainResult:
    """Minibatch Adam on the multi-task loss, keeping the best-validation-MAE parameters.

    ``callback`` sees every evaluation row; returning True stops training early.
    """
    if not train_records or not val_records:
        raise ValueError("training and validation sets must be non-empty")
    if calibrate:
        calibrate_output_scale(model, train_records, featurizer)
    rng = np.random.default_rng(cfg.seed)
    params = list(model.params.values())
    result = TrainResult(model)
    best_state = model.state()
    losses: list[float] = []

    def checkpoint(iteration: int):
        report = evaluate(model, val_records, featurizer)
        row = {"iteration": iteration,
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_mae": report.mae_s, "val_mape": report.mape_pct, "val_rmse": report.rmse_s}
        result.history.append(row)
        losses.clear()
        if report.mae_s < result.best_val_mae:
            result.best_val_mae = report.mae_s
            result.best_iteration = iteration
            best_state.update(model.state())
        log.info("iter %d loss %.4f val MAE %.2f MAPE %.2f", iteration, row["train_loss"], report.mae_s, report.mape_pct)
        return bool(callback and callback(row))

    if cfg.max_iterations == 0:
        return result
    stop = checkpoint(0)
    n = len(train_records)
    it = 0
    while not stop and it < cfg.max_iterations:
        it += 1
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = featurizer.samples([train_records[i] for i in idx])
        stats = model.loss_and_backward(batch, loss_cfg, rng)
        if not math.isfinite(stats["loss"]):
            raise TrainingDiverged(f"loss became {stats['loss']} at iteration {it} "
                                   f"(path MAPE {stats['path_mape']}, sub MAPE {stats['sub_mape']})")
        nn.adam_step(params, cfg.learning_rate, it)
        losses.append(stats["loss"])
        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            stop = checkpoint(it)
    model.load_state(best_state)
    return result


def write_history(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "train_loss", "val_mae", "val_mape", "val_rmse"])
        for row in history:
            w.writerow([row["iteration"], repr(row["train_loss"]), repr(row["val_mae"]),
                        repr(row["val_mape"]), repr(row["val_rmse"])])


# --- model persistence ---------------------------------------------------------------

def save_model(path: str | Path, model: DeepIST, settings: Settings) -> None:
    meta = {"settings": settings.to_pairs(), "path_scale": model.path_scale, "sub_scale": model.sub_scale}
    nn.save_checkpoint(path, {k: p.value for k, p in model.params.items()}, meta)


def build_model(settings: Settings) -> DeepIST:
    return DeepIST(settings.raster, settings.pathcnn, settings.temporal, seed=settings.train.seed,
                   dtype=np.dtype(settings.train.dtype))


def load_model(path: str | Path) -> tuple[DeepIST, Settings]:
    from .config import settings_from_pairs

    params, meta = nn.load_checkpoint(path)
    settings = settings_from_pairs(meta["settings"])
    model = build_model(settings)
    model.load_state(params)
    model.path_scale = float(meta["path_scale"])
    model.sub_scale = float(meta["sub_scale"])
    return model, settings


def export_feature_maps(model: DeepIST, image: np.ndarray, layer: int = 1,
                        out_dir: str | Path | None = None, prefix: str = "layer") -> dict[str, np.ndarray]:
    """Activation grids of one max+avg layer; optionally written as per-map normalised pixmaps."""
    maps = model.feature_maps(image, layer)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, grid in maps.items():
            write_ppm(out_dir / f"{prefix}{layer}_{name}.ppm", grid, normalize=True)
    return maps
