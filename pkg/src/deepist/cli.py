"""``deepist`` command line: synth, prepare, traffic, train, eval, predict, inspect.

Exit codes: 0 success, 1 bad arguments or settings, 2 file I/O, 3 invalid
data, 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4

log = logging.getLogger("deepist")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ARGS, f"{self.prog}: error: {message}\n")


def _pairs(items):
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _settings(args):
    from .config import load_settings

    return load_settings(args.config, _pairs(args.set), args.preset)


def _set_threads(n: int | None) -> None:
    """Cap BLAS/OpenMP threads; only effective before numpy is first imported."""
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _featurizer(settings, network, traffic):
    import numpy as np

    from .training import Featurizer

    return Featurizer(network, traffic, settings.window, settings.raster, settings.temporal.s_max,
                      settings.train.cache_size, np.dtype(settings.train.dtype))


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    finally:
        if path:
            fh.close()


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .geo import save_network, save_paths
    from .synth import generate_network, generate_paths

    settings = _settings(args)
    net = generate_network(settings.synth)
    recs = generate_paths(net, settings.synth)
    out = Path(args.out)
    save_network(net, out)
    save_paths(recs, out / "paths.jsonl")
    print(f"wrote {len(net.nodes)} nodes, {len(net.edges)} edges, {len(recs)} paths to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    from .geo import filter_dataset, load_network, load_paths, path_length, save_paths, validate_path

    net = load_network(args.network)
    recs = load_paths(args.paths)
    for r in recs:
        validate_path(r, net)
    kept = filter_dataset(recs, net)
    save_paths(kept, args.out)
    if not kept:
        print(f"warning: no records survived filtering ({len(recs)} read)", file=sys.stderr)
        print("count=0")
        return EXIT_OK
    dist = math.fsum(path_length(r, net) for r in kept) / len(kept) / 1000.0
    secs = math.fsum(r.total_time_s for r in kept) / len(kept)
    print(f"count={len(kept)} rejected={len(recs) - len(kept)} "
          f"mean_distance_km={dist:.3f} mean_time_sec={secs:.3f}")
    return EXIT_OK


def cmd_traffic(args) -> int:
    from .geo import load_network, load_paths
    from .traffic import build_traffic_table, save_traffic_table

    settings = _settings(args)
    net = load_network(args.network)
    table = build_traffic_table(load_paths(args.paths), net, settings.train.timezone)
    save_traffic_table(table, args.out)
    print(f"wrote {len(table.speeds)} (edge, hour) speeds, max {table.global_max_speed:.3f} m/s, to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .geo import load_network, load_paths, save_paths
    from .traffic import load_traffic_table
    from .training import build_model, evaluate, save_model, split_dataset, train, write_history

    settings = _settings(args)
    net = load_network(args.network)
    traffic = load_traffic_table(args.traffic, net)
    recs = load_paths(args.paths)
    tr, va, te = split_dataset(recs, settings.train.split, settings.train.seed)
    if not tr or not va:
        raise UsageError(f"need non-empty train and validation splits, got {len(tr)}/{len(va)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in (("train", tr), ("val", va), ("test", te)):
        save_paths(part, out / f"{name}.jsonl")
    (out / "settings.cfg").write_text(settings.to_text(), encoding="utf-8")
    feat = _featurizer(settings, net, traffic)
    model = build_model(settings)
    log.info("model with %d parameters; %d/%d/%d paths", model.n_parameters(), len(tr), len(va), len(te))
    result = train(model, tr, va, feat, settings.loss, settings.train)
    save_model(out / "model.ckpt", model, settings)
    write_history(out / "history.csv", result.history)
    print(f"best iteration {result.best_iteration}: validation {evaluate(model, va, feat).line()}")
    return EXIT_OK


def _load_for_inference(args):
    from .geo import load_network
    from .traffic import load_traffic_table
    from .training import load_model

    model, settings = load_model(args.model)
    if args.set:
        settings = settings.with_overrides(_pairs(args.set))
    net = load_network(args.network)
    traffic = load_traffic_table(args.traffic, net)
    return model, settings, net, traffic


def _read_predictions(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"record_id", "estimate_s"} <= set(reader.fieldnames):
            raise UsageError(f"{path}: expected columns record_id,estimate_s")
        return {row["record_id"]: float(row["estimate_s"]) for row in reader}


def cmd_eval(args) -> int:
    from .geo import ValidationError, load_network, load_paths
    from .training import metrics

    recs = load_paths(args.paths)
    truths = [r.total_time_s for r in recs]
    if args.predictions:
        table = _read_predictions(args.predictions)
        missing = [r.id for r in recs if r.id not in table]
        if missing:
            raise ValidationError(f"no prediction for {len(missing)} records, e.g. {missing[0]!r}")
        preds = [table[r.id] for r in recs]
    elif args.baseline:
        from .synth import segment_sum_baseline
        from .traffic import load_traffic_table

        if not (args.network and args.traffic):
            raise UsageError("--baseline needs --network and --traffic")
        net = load_network(args.network)
        traffic = load_traffic_table(args.traffic, net)
        preds = [segment_sum_baseline(traffic, r, net) for r in recs]
    else:
        if not (args.model and args.network and args.traffic):
            raise UsageError("eval needs --predictions, --baseline, or --model with --network and --traffic")
        from .training import predict

        model, settings, net, traffic = _load_for_inference(args)
        preds = predict(model, recs, _featurizer(settings, net, traffic)).tolist()
    report = metrics(preds, truths)
    print(report.line())
    if args.out:
        _write_rows(args.out, ["rmse_s", "mae_s", "mape_pct", "n_examples"],
                    [[repr(report.rmse_s), repr(report.mae_s), repr(report.mape_pct), report.n_examples]])
    return EXIT_OK


def cmd_predict(args) -> int:
    from .geo import load_paths
    from .training import predict

    model, settings, net, traffic = _load_for_inference(args)
    recs = load_paths(args.paths)
    preds = predict(model, recs, _featurizer(settings, net, traffic))
    _write_rows(args.out, ["record_id", "estimate_s"], [[r.id, repr(float(p))] for r, p in zip(recs, preds)])
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .geo import ValidationError, load_paths
    from .raster import dump_window_channels
    from .training import export_feature_maps

    model, settings, net, traffic = _load_for_inference(args)
    recs = load_paths(args.paths)
    if args.record is None:
        rec = recs[0] if recs else None
    else:
        rec = next((r for r in recs if r.id == args.record), None)
    if rec is None:
        raise ValidationError(f"record {args.record!r} not found in {args.paths}")
    feat = _featurizer(settings, net, traffic)
    sample = feat.sample(rec)
    if not 0 <= args.window < len(sample.images):
        raise UsageError(f"window {args.window} out of range 0..{len(sample.images) - 1}")
    image = sample.images[args.window]
    out = Path(args.out)
    dump_window_channels(out, rec.id, args.window, image)
    maps = export_feature_maps(model, image, args.layer, out, prefix=f"{rec.id}_{args.window}_layer")
    print(f"wrote 4 channel images and {len(maps)} feature maps of layer {args.layer} to {out}")
    return EXIT_OK


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="settings file with 'section.key = value' lines")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    common.add_argument("--preset", default="full", choices=["full", "desk"],
                        help="base hyperparameters: full-size model or reduced CPU scale")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="deepist", description="Path travel time estimation from rasterised sliding windows.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic city and trips")
    p.add_argument("--out", required=True, help="output directory (nodes.csv, edges.csv, paths.jsonl)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", parents=[common], help="validate and filter trips, print dataset stats")
    p.add_argument("--network", required=True, help="directory with nodes.csv and edges.csv")
    p.add_argument("--paths", required=True, help="input JSONL trips")
    p.add_argument("--out", required=True, help="filtered JSONL trips")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("traffic", parents=[common], help="build the hourly edge speed table")
    p.add_argument("--network", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--out", required=True, help="traffic table CSV")
    p.set_defaults(func=cmd_traffic)

    p = sub.add_parser("train", parents=[common], help="split, train and checkpoint a model")
    p.add_argument("--network", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--out", required=True, help="run directory (model.ckpt, history.csv, splits)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="RMSE/MAE/MAPE against recorded travel times")
    p.add_argument("--paths", required=True)
    p.add_argument("--predictions", help="CSV with record_id,estimate_s")
    p.add_argument("--baseline", action="store_true", help="score the segment-sum baseline instead")
    p.add_argument("--model")
    p.add_argument("--network")
    p.add_argument("--traffic")
    p.add_argument("--out", help="metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="per-trip travel time estimates as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("inspect", parents=[common], help="dump one window's channels and feature maps")
    p.add_argument("--model", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--traffic", required=True)
    p.add_argument("--paths", required=True)
    p.add_argument("--record", help="record id (default: first record)")
    p.add_argument("--window", type=int, default=0)
    p.add_argument("--layer", type=int, default=1, help="max+avg layer, 1-based")
    p.add_argument("--out", required=True, help="directory for .ppm files")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    from .config import ConfigError
    from .geo import ValidationError
    from .training import TrainingDiverged

    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"deepist {args.command}: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingDiverged as exc:
        print(f"deepist {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"deepist {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError, KeyError) as exc:
        print(f"deepist {args.command}: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
