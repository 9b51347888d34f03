import re

import pytest

from sketchseg.cli import main
from sketchseg.formats import load_checkpoint

ERROR_LINE = re.compile(r"^error E_[A-Z]+: \S.*$")


def run(argv, capsys):
    rc = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return rc, out, err


def assert_error(rc, err, code):
    assert rc != 0
    lines = err.strip().splitlines()
    assert len(lines) == 1 and ERROR_LINE.match(lines[0]), err
    assert lines[0].startswith(f"error {code}:")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--kind", "lollipop", "--count", "5", "--seed", "3",
                 "--out", str(root / "data")]) == 0
    cfg = root / "train.cfg"
    cfg.write_text("# tiny run\nepochs = 2\nbatch_size = 2\nn_keypoints = 16\nprobe_size = 2\n")
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"),
                 "--config", str(cfg), "--out", str(root / "run")]) == 0
    return root


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("model.ckpt", "train_log.tsv", "training.png"):
        assert (run_dir / name).is_file()
    state, meta = load_checkpoint(run_dir / "model.ckpt")
    assert meta["config"]["epochs"] == 2 and meta["n_labels"] == 2
    log = (run_dir / "train_log.tsv").read_text().splitlines()
    assert log[0].startswith("# sketchseg-report v1")
    assert len(log) == 2 + 3  # header, columns, epochs 0..2


def test_eval_and_segment(workspace, capsys):
    m = workspace / "data" / "manifest.json"
    ck = workspace / "run" / "model.ckpt"
    rc, out, _ = run(["eval", "--manifest", m, "--checkpoint", ck, "--out", workspace / "ev"],
                     capsys)
    assert rc == 0 and "P=" in out
    summary = (workspace / "ev" / "summary.tsv").read_text()
    assert "p_metric" in summary and "# C-metric" in summary
    assert (workspace / "ev" / "segmentations.png").stat().st_size > 0
    rc, _, _ = run(["segment", "--manifest", m, "--checkpoint", ck, "--out", workspace / "seg",
                    "--refine"], capsys)
    assert rc == 0
    assert len(list((workspace / "seg" / "svg").glob("*.svg"))) == 4
    assert (workspace / "seg" / "predictions.labels").read_text().startswith("# sketchseg-labels v1")


def test_train_is_reproducible(workspace, capsys):
    cfg = workspace / "train.cfg"
    rc, _, _ = run(["train", "--manifest", workspace / "data" / "manifest.json",
                    "--config", cfg, "--out", workspace / "run2"], capsys)
    assert rc == 0
    for name in ("model.ckpt", "train_log.tsv", "training.png"):
        assert (workspace / "run" / name).read_bytes() == (workspace / "run2" / name).read_bytes()


def test_set_overrides_config(workspace, capsys):
    rc, _, _ = run(["train", "--manifest", workspace / "data" / "manifest.json",
                    "--config", workspace / "train.cfg", "--set", "epochs=0",
                    "--out", workspace / "run0"], capsys)
    assert rc == 0
    assert load_checkpoint(workspace / "run0" / "model.ckpt")[1]["config"]["epochs"] == 0


@pytest.mark.parametrize("argv,code", [
    (["frobnicate"], "E_USAGE"),
    (["synth", "--kind", "lollipop"], "E_USAGE"),
    (["synth", "--kind", "teapot", "--out", "x"], "E_CONFIG"),
    (["synth", "--kind", "arrow", "--count", "1", "--out", "x"], "E_PRECONDITION"),
    (["train", "--manifest", "/nonexistent/manifest.json", "--out", "x"], "E_PATH"),
    (["train", "--set", "learning_rate=-1", "--out", "x"], "E_USAGE"),
    (["gradcheck", "--set", "bogus=1"], "E_CONFIG"),
    (["segment", "--checkpoint", "/nonexistent.ckpt", "--manifest", "m", "--out", "x"],
     "E_PATH"),
])
def test_error_codes(argv, code, capsys, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    rc, _, err = run(argv, capsys)
    assert_error(rc, err, code)


def test_bad_config_value(workspace, capsys, tmp_path):
    rc, _, err = run(["train", "--manifest", workspace / "data" / "manifest.json",
                      "--set", "learning_rate=-1", "--out", tmp_path], capsys)
    assert_error(rc, err, "E_CONFIG")


def test_malformed_sketch_file(workspace, capsys, tmp_path):
    import shutil
    data = tmp_path / "data"
    shutil.copytree(workspace / "data", data)
    with open(data / "sketches.ndjson", "a") as fh:
        fh.write("{not json\n")
    rc, _, err = run(["train", "--manifest", data / "manifest.json", "--out", tmp_path / "r"],
                     capsys)
    assert_error(rc, err, "E_INPUT")
    assert "line" in err


def test_eval_without_truth(workspace, capsys, tmp_path):
    import json
    import shutil
    data = tmp_path / "data"
    shutil.copytree(workspace / "data", data)
    m = json.loads((data / "manifest.json").read_text())
    m["truth_labels"] = None
    (data / "manifest.json").write_text(json.dumps(m))
    rc, _, err = run(["eval", "--manifest", data / "manifest.json",
                      "--checkpoint", workspace / "run" / "model.ckpt", "--out", tmp_path / "e"],
                     capsys)
    assert_error(rc, err, "E_PRECONDITION")


def test_per_exemplar_models_and_selection(tmp_path, capsys):
    data = tmp_path / "data"
    rc, _, _ = run(["synth", "--kind", "arrow", "--count", "6", "--n-exemplars", "2",
                    "--out", data], capsys)
    assert rc == 0
    m = data / "manifest.json"
    common = ["--set", "epochs=1", "--set", "n_keypoints=16", "--set", "probe_size=0"]
    for k in (0, 1):
        rc, _, _ = run(["train", "--manifest", m, "--exemplar", k, *common,
                        "--out", tmp_path / f"m{k}"], capsys)
        assert rc == 0
        assert load_checkpoint(tmp_path / f"m{k}" / "model.ckpt")[1]["exemplar_index"] == k
    rc, out, _ = run(["eval", "--manifest", m, "--checkpoint", tmp_path / "m0" / "model.ckpt",
                      "--checkpoint", tmp_path / "m1" / "model.ckpt", "--out", tmp_path / "ev"],
                     capsys)
    assert rc == 0 and "selected" in out
    rc, _, err = run(["train", "--manifest", m, "--exemplar", 2, "--out", tmp_path / "bad"],
                     capsys)
    assert_error(rc, err, "E_PRECONDITION")
