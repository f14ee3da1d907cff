import csv

import numpy as np
import pytest

from pisr_lab import train as tr
from pisr_lab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main, write_pgm

SMALL = """\
scene.height=16
scene.width=16
scene.size_range=2,4
scene.instances_per_scene=1,3
channels=8
k=4
fusion_k=4
epochs=1
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.cfg").write_text(SMALL)
    assert main(["gen-data", "--out", str(root / "data"), "--n", "4", "--n-val", "2",
                 "--config", str(root / "small.cfg")]) == EXIT_OK
    assert main(["train", "--out", str(root / "run"), "--data", str(root / "data"),
                 "--config", str(root / "small.cfg"), "--variant", "pisr"]) == EXIT_OK
    return root


def _common(root, *extra):
    return ["--data", str(root / "data"), "--config", str(root / "small.cfg"), *extra]


def test_unknown_command_is_usage_error(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert "invalid choice" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error():
    assert main(["train", "--out", "x", "--k", "many"]) == EXIT_USAGE
    assert main(["train", "--out", "x", "--variant", "ocr"]) == EXIT_USAGE


def test_unknown_config_key(tmp_path):
    (tmp_path / "c").write_text("learning_rate=3\n")
    assert main(["grad-check", "--config", str(tmp_path / "c")]) == EXIT_USAGE


def test_help_exits_cleanly():
    assert main(["--help"]) == EXIT_OK


def test_runtime_error_names_location(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path / "o"), "--ckpt", str(tmp_path / "missing")]) == EXIT_RUNTIME
    err = capsys.readouterr().err
    assert err.startswith("error: ") and ":" in err.split()[1]


def test_config_echo_and_precedence(tmp_path, capsys, monkeypatch):
    (tmp_path / "c").write_text("lr=0.01\nepochs=3\nscene.height=20\n")
    monkeypatch.setenv("PISR_LAB_SEED", "7")
    main(["gen-data", "--out", str(tmp_path / "d"), "--n", "0", "--n-val", "0", "--config", str(tmp_path / "c")])
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "# pisr-lab gen-data"
    assert "lr=0.01" in out and "epochs=3" in out and "scene.height=20" in out
    assert "seed=7" in out and "scene.seed=7" in out
    main(["gen-data", "--out", str(tmp_path / "d"), "--n", "0", "--n-val", "0", "--seed", "2"])
    out = capsys.readouterr().out.splitlines()
    assert "seed=2" in out and "scene.seed=2" in out


def test_gen_data_env_and_flag_agree(tmp_path, monkeypatch):
    main(["gen-data", "--out", str(tmp_path / "a"), "--n", "3", "--n-val", "1", "--seed", "5"])
    monkeypatch.setenv("PISR_LAB_SEED", "5")
    main(["gen-data", "--out", str(tmp_path / "b"), "--n", "3", "--n-val", "1"])
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "checkpoint").is_dir()
    rows = list(csv.DictReader((run / "history.csv").open()))
    assert len(rows) == 1 and rows[0]["variant"] == "pisr"
    steps = list(csv.DictReader((run / "steps.csv").open()))
    assert len(steps) == 4
    for s in steps:
        g = float(s["gamma"])
        parts = [float(s[c]) for c in ("l_sem", "l_ins", "l_sem_prime", "l_ins_prime")]
        assert abs(float(s["total"]) - (g * (parts[2] + parts[3]) + parts[0] + parts[1])) <= 1e-12


def test_train_is_reproducible(workdir, tmp_path):
    assert main(["train", "--out", str(tmp_path / "again"), *_common(workdir, "--variant", "pisr")]) == EXIT_OK
    for f in ("history.csv", "steps.csv"):
        assert (tmp_path / "again" / f).read_bytes() == (workdir / "run" / f).read_bytes()


def test_eval_writes_metrics_and_maps(workdir, tmp_path, capsys):
    code = main(["eval", "--out", str(tmp_path / "ev"), "--ckpt", str(workdir / "run" / "checkpoint"),
                 "--save-maps", *_common(workdir)])
    assert code == EXIT_OK
    assert "pq=" in capsys.readouterr().out
    assert (tmp_path / "ev" / "metrics.csv").read_text().startswith("class,tp,fp,fn")
    assert len(list((tmp_path / "ev" / "maps").glob("*.ppm"))) == 2


def test_export_heatmaps(workdir, tmp_path):
    out = tmp_path / "hm"
    assert main(["export-heatmaps", "--out", str(out), "--ckpt", str(workdir / "run" / "checkpoint"),
                 *_common(workdir)]) == EXIT_OK
    assert len(list(out.glob("class_*.pgm"))) == 4
    assert len(list(out.glob("instance_*.pgm"))) == 4
    head = (out / "class_0.pgm").read_bytes()[:11]
    assert head == b"P5\n16 16\n25"
    assert main(["export-heatmaps", "--out", str(out), "--ckpt", str(workdir / "run" / "checkpoint"),
                 "--index", "9", *_common(workdir)]) == EXIT_USAGE


def test_ablate_and_sweep_with_cache(workdir, tmp_path, capsys):
    cache = str(tmp_path / "cache")
    args = ["ablate", "--out", str(tmp_path / "ab"), "--variants", "baseline,pisr", "--cache", cache, *_common(workdir)]
    assert main(args) == EXIT_OK
    first = (tmp_path / "ab" / "ablation.csv").read_text()
    assert [r["variant"] for r in csv.DictReader(first.splitlines())] == ["baseline", "pisr"]
    assert len(list((tmp_path / "cache").glob("*.json"))) == 2
    assert main(args) == EXIT_OK
    assert (tmp_path / "ab" / "ablation.csv").read_text() == first
    # the cached pisr run is reused by the sweep at K=4
    assert main(["sweep-k", "--out", str(tmp_path / "sw"), "--k-list", "1,4", "--variants", "pisr",
                 "--cache", cache, *_common(workdir)]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "sw" / "sweep_k.csv").open()))
    assert [(r["k"], r["variant"]) for r in rows] == [("1", "pisr"), ("4", "pisr")]
    assert len(list((tmp_path / "cache").glob("*.json"))) == 3


def test_sweep_rejects_bad_variant(workdir, tmp_path):
    assert main(["sweep-k", "--out", str(tmp_path / "sw"), "--variants", "pisr,nope", *_common(workdir)]) == EXIT_USAGE


def test_grad_check_command(capsys):
    assert main(["grad-check", "--seed", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count(" ok") >= 20


def test_write_pgm_scaling(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
    assert (tmp_path / "x.pgm").read_bytes() == b"P5\n4 1\n255\n" + bytes([0, 128, 255, 255])


def test_checkpoint_config_roundtrip(workdir):
    _, cfg = tr.load_checkpoint(workdir / "run" / "checkpoint")
    assert (cfg.channels, cfg.k, cfg.epochs, cfg.variant) == (8, 4, 1, "pisr")
