import json

import pytest

from deepist.cli import main

SMALL = ["--set", "synth.n_paths=30", "--set", "synth.grid_size=8", "--set", "synth.min_edges=5"]
TINY = ["--preset", "desk", "--set", "raster.k=16", "--set", "pathcnn.c_2d=2,2", "--set", "pathcnn.lambda_dim=8",
        "--set", "temporal.c_1d=4", "--set", "temporal.s_max=4", "--set", "temporal.head_dims=8,1",
        "--set", "train.max_iterations=4", "--set", "train.eval_every=2", "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(d / "city"), *SMALL]) == 0
    assert main(["prepare", "--network", str(d / "city"), "--paths", str(d / "city/paths.jsonl"),
                 "--out", str(d / "clean.jsonl")]) == 0
    assert main(["traffic", "--network", str(d / "city"), "--paths", str(d / "clean.jsonl"),
                 "--out", str(d / "traffic.csv")]) == 0
    assert main(["train", "--network", str(d / "city"), "--paths", str(d / "clean.jsonl"),
                 "--traffic", str(d / "traffic.csv"), "--out", str(d / "run"), *TINY]) == 0
    return d


def _model_args(d):
    return ["--model", str(d / "run/model.ckpt"), "--network", str(d / "city"), "--traffic", str(d / "traffic.csv")]


@pytest.mark.parametrize("cmd", ["synth", "prepare", "traffic", "train", "eval", "predict", "inspect"])
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main([cmd, "--help"])
    assert exc.value.code == 0


def test_train_outputs(run):
    for name in ("model.ckpt", "history.csv", "train.jsonl", "val.jsonl", "test.jsonl", "settings.cfg"):
        assert (run / "run" / name).exists()
    assert len((run / "run/history.csv").read_text().splitlines()) == 4


def test_prepare_stats_line(run, tmp_path, capsys):
    main(["prepare", "--network", str(run / "city"), "--paths", str(run / "city/paths.jsonl"),
          "--out", str(tmp_path / "o.jsonl")])
    out = capsys.readouterr().out
    assert out.startswith("count=30 rejected=0 mean_distance_km=") and "mean_time_sec=" in out


def test_prepare_all_short_trips_warns(run, tmp_path, capsys):
    rec = json.loads((run / "city/paths.jsonl").read_text().splitlines()[0])
    rec["anchors"] = [[0.0, 0.0], [rec["anchors"][-1][0], 30.0]]
    (tmp_path / "short.jsonl").write_text(json.dumps(rec) + "\n")
    code = main(["prepare", "--network", str(run / "city"), "--paths", str(tmp_path / "short.jsonl"),
                 "--out", str(tmp_path / "o.jsonl")])
    captured = capsys.readouterr()
    assert code == 0 and "warning" in captured.err
    assert (tmp_path / "o.jsonl").read_text() == ""


def test_eval_oracle_predictions(run, tmp_path, capsys):
    lines = ["record_id,estimate_s"]
    for line in (run / "clean.jsonl").read_text().splitlines():
        rec = json.loads(line)
        lines.append(f"{rec['id']},{rec['anchors'][-1][1] - rec['anchors'][0][1]!r}")
    (tmp_path / "oracle.csv").write_text("\n".join(lines) + "\n")
    code = main(["eval", "--paths", str(run / "clean.jsonl"), "--predictions", str(tmp_path / "oracle.csv"),
                 "--out", str(tmp_path / "m.csv")])
    assert code == 0 and "MAE=0.00 s" in capsys.readouterr().out
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "rmse_s,mae_s,mape_pct,n_examples"


def test_predict_then_eval_matches_model_eval(run, tmp_path, capsys):
    test = str(run / "run/test.jsonl")
    assert main(["predict", *_model_args(run), "--paths", test, "--out", str(tmp_path / "p.csv")]) == 0
    main(["eval", "--paths", test, "--predictions", str(tmp_path / "p.csv")])
    via_file = capsys.readouterr().out
    main(["eval", *_model_args(run), "--paths", test])
    assert capsys.readouterr().out == via_file


def test_predict_is_deterministic(run, tmp_path):
    args = ["predict", *_model_args(run), "--paths", str(run / "run/test.jsonl")]
    main([*args, "--out", str(tmp_path / "a.csv")])
    main([*args, "--out", str(tmp_path / "b.csv")])
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()


def test_synth_deterministic(tmp_path):
    main(["synth", "--out", str(tmp_path / "a"), *SMALL])
    main(["synth", "--out", str(tmp_path / "b"), *SMALL])
    for name in ("nodes.csv", "edges.csv", "paths.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_inspect_writes_pixmaps(run, tmp_path):
    code = main(["inspect", *_model_args(run), "--paths", str(run / "run/test.jsonl"), "--out", str(tmp_path)])
    assert code == 0
    names = sorted(p.name for p in tmp_path.glob("*.ppm"))
    assert len(names) == 4 + 2 * 2


def test_exit_codes(run, tmp_path, capsys):
    assert main(["eval", "--paths", str(tmp_path / "missing.jsonl"), "--predictions", "x.csv"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train"])
    assert exc.value.code == 1
    assert main(["synth", "--out", str(tmp_path / "s"), "--set", "raster.nope=1"]) == 1
    assert main(["synth", "--out", str(tmp_path / "s"), "--set", "oops"]) == 1
    (tmp_path / "bad.jsonl").write_text('{"path": 5}\n')
    assert main(["prepare", "--network", str(run / "city"), "--paths", str(tmp_path / "bad.jsonl"),
                 "--out", str(tmp_path / "o.jsonl")]) == 3


def test_divergence_exit_code(run, tmp_path, monkeypatch):
    import deepist.training as training

    def boom(*a, **k):
        raise training.TrainingDiverged("loss became nan")

    monkeypatch.setattr(training, "train", boom)
    code = main(["train", "--network", str(run / "city"), "--paths", str(run / "clean.jsonl"),
                 "--traffic", str(run / "traffic.csv"), "--out", str(tmp_path / "r"), *TINY])
    assert code == 4
