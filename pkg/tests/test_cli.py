import numpy as np
import pytest

from mlmspt import cli
from mlmspt.data_io import load_checkpoint, read_manifest, save_checkpoint
from mlmspt.model import ModelConfig, init_params, parameter_shapes
from mlmspt.tensor import MatMul
from mlmspt.training import DivergenceError

TOY = ["--embed-dim", "8", "--proj-dim", "4", "--heads", "2", "--head-dim", "16"]


def _synth(tmp_path, name="data", *extra):
    out = tmp_path / name
    rc = cli.main(["synth", "--classes", "sphere,cube", "--per-class", "2", "--points", "32", "--seed", "3",
                   "--out", str(out), *extra])
    assert rc == 0
    return out / "manifest.txt"


def _train(tmp_path, manifest, name="run", *extra):
    out = tmp_path / name
    rc = cli.main(["train", "--manifest", str(manifest), "--out", str(out), "--epochs", "1", "--seed", "5",
                   *TOY, *extra])
    assert rc == 0
    return out


def test_synth_counts_and_repeatability(tmp_path, capsys):
    args = ["synth", "--classes", "sphere,cube", "--per-class", "16", "--points", "256", "--seed", "7"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert capsys.readouterr().out.strip() == str(tmp_path / "a" / "manifest.txt")
    files = sorted((tmp_path / "a").rglob("*.pcf"))
    assert len(files) == 32 and (tmp_path / "a" / "manifest.txt").exists()
    assert len(read_manifest(tmp_path / "a" / "manifest.txt").samples) == 32
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for f in files:
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_synth_rejects_bad_point_count(tmp_path, capsys):
    assert cli.main(["synth", "--points", "255", "--out", str(tmp_path)]) == 1
    assert "multiple of 4" in capsys.readouterr().err


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--bogus"])
    assert exc.value.code == 1
    assert cli.main(["train", "--out", str(tmp_path)]) == 1  # no manifest


def test_missing_manifest_is_io_error(tmp_path):
    assert cli.main(["train", "--manifest", str(tmp_path / "nope.txt"), "--out", str(tmp_path)]) == 3


def test_config_file_and_overrides(tmp_path, capsys):
    manifest = _synth(tmp_path)
    conf = tmp_path / "run.conf"
    conf.write_text("# toy\nepochs=2\nembed_dim=8\nheads=2\nhead_dim=16\npsa_proj_dim=4\nseed=9\n")
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(conf), "--manifest", str(manifest), "--out", str(out),
                     "--epochs", "1"]) == 0
    echo = dict(line.split("=", 1) for line in (out / "config.echo").read_text().splitlines())
    assert echo["epochs"] == "1" and echo["seed"] == "9" and echo["embed_dim"] == "8"
    kv = (out / "metrics.kv").read_text()
    assert "overall_accuracy=" in kv and "loss.epoch0=" in kv and "loss.epoch1" not in kv
    assert "overall accuracy" in (out / "metrics.txt").read_text()
    conf.write_text("epochz=2\n")
    assert cli.main(["train", "--config", str(conf), "--manifest", str(manifest), "--out", str(out)]) == 1
    assert "epochz" in capsys.readouterr().err


def test_train_smoke(tmp_path):
    out = tmp_path / "data"
    assert cli.main(["synth", "--per-class", "8", "--points", "256", "--seed", "1", "--out", str(out)]) == 0
    run = tmp_path / "run"
    assert cli.main(["train", "--manifest", str(out / "manifest.txt"), "--out", str(run), "--epochs", "50",
                     "--embed-dim", "4", "--proj-dim", "2", "--heads", "2", "--head-dim", "8",
                     "--ablation", "baseline", "--lr", "3e-3"]) == 0
    for name in ("config.echo", "checkpoint.bin", "metrics.txt", "metrics.kv"):
        assert (run / name).stat().st_size > 0
    params, cfg = load_checkpoint(run / "checkpoint.bin")
    assert cfg.n_points == 256 and cfg.num_classes == 4


def test_lr_zero_keeps_initial_params(tmp_path):
    manifest = _synth(tmp_path)
    run = _train(tmp_path, manifest, "run", "--lr", "0", "--epochs", "2")
    params, cfg = load_checkpoint(run / "checkpoint.bin")
    save_checkpoint(init_params(cfg, 5), cfg, tmp_path / "init.bin")
    assert (tmp_path / "init.bin").read_bytes() == (run / "checkpoint.bin").read_bytes()


@pytest.mark.parametrize("flag,expected", [("baseline", "baseline"), ("baseline+ppt", "ppt"),
                                           ("baseline+ppt+mlt", "ppt+mlt"), ("ppt+mst", "ppt+mst"),
                                           ("full", "full")])
def test_ablation_parameter_census(tmp_path, flag, expected):
    manifest = _synth(tmp_path)
    run = _train(tmp_path, manifest, "run", "--ablation", flag)
    params, cfg = load_checkpoint(run / "checkpoint.bin")
    assert cfg.ablation == expected
    want = ModelConfig(n_points=32, embed_dim=8, psa_proj_dim=4, heads=2, head_dim=16,
                       num_classes=2).with_ablation(expected)
    assert set(params.names()) == set(parameter_shapes(want))
    has = lambda frag: any(frag in n for n in params.names())
    assert has("scale2/") == (expected != "baseline")
    assert has("/mlt/") == (expected in ("ppt+mlt", "full"))
    assert has("mst/") == (expected in ("ppt+mst", "full"))


def test_deterministic_runs_identical(tmp_path):
    manifest = _synth(tmp_path)
    a = _train(tmp_path, manifest, "a", "--deterministic", "--epochs", "2")
    b = _train(tmp_path, manifest, "b", "--deterministic", "--epochs", "2")
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()


def test_gradcheck_passes_and_is_reproducible(tmp_path, capsys):
    assert cli.main(["gradcheck", "--seed", "4"]) == 0
    first = capsys.readouterr().out
    assert "FAIL" not in first and first.count("PASS") >= 17
    assert cli.main(["gradcheck", "--seed", "4", "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out == first == (tmp_path / "gradcheck.txt").read_text()


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    good = MatMul.backward

    def bad(ctx, grad):
        ga, gb = good(ctx, grad)
        return (None if ga is None else 1.01 * ga), gb

    monkeypatch.setattr(MatMul, "backward", staticmethod(bad))
    assert cli.main(["gradcheck"]) == 2
    failed = [line.split()[0] for line in capsys.readouterr().out.splitlines() if line.endswith("FAIL")]
    assert "matmul" in failed


def test_eval_reports_accuracy(tmp_path, capsys):
    manifest = _synth(tmp_path)
    run = _train(tmp_path, manifest)
    capsys.readouterr()
    assert cli.main(["eval", "--manifest", str(manifest), "--checkpoint", str(run / "checkpoint.bin")]) == 0
    acc = float(capsys.readouterr().out.strip().split("=")[1])
    assert acc in (0.0, 0.25, 0.5, 0.75, 1.0)


def test_eval_rejects_mismatched_embed_dim(tmp_path, capsys):
    manifest = _synth(tmp_path)
    run = _train(tmp_path, manifest)
    rc = cli.main(["eval", "--manifest", str(manifest), "--checkpoint", str(run / "checkpoint.bin"),
                   "--embed-dim", "16"])
    assert rc == 1 and "embed_dim" in capsys.readouterr().err


def test_eval_rejects_wrong_point_count(tmp_path, capsys):
    run = _train(tmp_path, _synth(tmp_path))
    other = _synth(tmp_path, "other", "--points", "64")
    assert cli.main(["eval", "--manifest", str(other), "--checkpoint", str(run / "checkpoint.bin")]) == 1
    assert "n_points" in capsys.readouterr().err


def test_predict_then_eval_is_self_consistent(tmp_path, capsys):
    manifest = _synth(tmp_path, "seg", "--task", "seg")
    run = tmp_path / "run"
    assert cli.main(["train", "--task", "seg", "--manifest", str(manifest), "--out", str(run), "--epochs", "1",
                     *TOY]) == 0
    pred = tmp_path / "pred"
    ckpt = str(run / "checkpoint.bin")
    assert cli.main(["predict", "--task", "seg", "--manifest", str(manifest), "--checkpoint", ckpt,
                     "--out", str(pred)]) == 0
    assert len(list(pred.rglob("*.pred.plb"))) == 4
    capsys.readouterr()
    assert cli.main(["eval", "--task", "seg", "--manifest", str(pred / "predictions.txt"),
                     "--checkpoint", ckpt]) == 0
    assert capsys.readouterr().out.strip() == "instance_miou=1.0"


def test_predict_classification_csv(tmp_path):
    manifest = _synth(tmp_path)
    run = _train(tmp_path, manifest)
    assert cli.main(["predict", "--manifest", str(manifest), "--checkpoint", str(run / "checkpoint.bin"),
                     "--out", str(tmp_path / "p")]) == 0
    rows = (tmp_path / "p" / "predictions.csv").read_text().splitlines()
    assert len(rows) == 4 and all(r.split(",")[1] in ("0", "1") for r in rows)


def test_divergence_exit_code(tmp_path, monkeypatch):
    manifest = _synth(tmp_path)

    def boom(*a, **k):
        raise DivergenceError(3, 1, float("nan"))

    monkeypatch.setattr(cli, "train", boom)
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "r"), *TOY]) == 2


def test_task_mismatch(tmp_path, capsys):
    manifest = _synth(tmp_path)
    assert cli.main(["train", "--task", "seg", "--manifest", str(manifest), "--out", str(tmp_path / "r")]) == 1
    assert "task" in capsys.readouterr().err


def test_threads_env_is_respected(tmp_path, monkeypatch):
    monkeypatch.setenv("MLMSPT_THREADS", "1")
    manifest = _synth(tmp_path)
    a = _train(tmp_path, manifest, "a")
    assert np.isfinite(load_checkpoint(a / "checkpoint.bin")[0]["head/W2"].data).all()
