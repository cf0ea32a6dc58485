import json

import pytest

from latentview.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("prior_train_steps = 20\nepochs = 1\nbatch_size = 4\npairs_per_scene = 2\n"
                   "split_fractions = [0.6, 0.2, 0.2]\n")
    common = ["--config", str(cfg), "--cache-dir", str(root / "cache")]
    assert main([*common, "make-synthetic", "--out", str(root / "data"), "--scenes", "8", "--frames", "26",
                 "--image-size", "32"]) == 0
    assert main([*common, "invert", "--data", str(root / "data"), "--steps", "5"]) == 0
    assert main([*common, "train", "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    return root, common


def test_end_to_end_evaluate(workspace, capsys):
    root, common = workspace
    run = json.loads((root / "cache" / "run.json").read_text())
    assert run["t_star"] == 600 and run["steps"] == 5 and (root / "cache" / "prior.pt").exists()
    assert (root / "ckpt" / "epoch0001.pt").exists()
    capsys.readouterr()
    assert main([*common, "evaluate", "--checkpoint", str(root / "ckpt" / "epoch0001.pt"),
                 "--data", str(root / "data"), "--split", "all", "--out", str(root / "eval")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["count"] == 16 and summary["skipped"] == 0
    assert (root / "eval" / "report.json").exists() and (root / "eval" / "report.csv").exists()


def test_synthesize_and_env_cache(workspace, monkeypatch, capsys):
    root, common = workspace
    monkeypatch.setenv("LATENTVIEW_CACHE", str(root / "cache"))
    scene = sorted(p.parent for p in (root / "data").glob("*/*/cameras.json"))[0]
    ref = sorted((scene / "images").iterdir())[0]
    out = root / "novel.png"
    capsys.readouterr()
    assert main(["synthesize", "--checkpoint", str(root / "ckpt" / "epoch0001.pt"), "--ref-image", str(ref),
                 "--ref-cam", f"{scene / 'cameras.json'}#1", "--tar-cam", f"{scene / 'cameras.json'}#20",
                 "--strategy", "b", "--out", str(out)]) == 0
    assert out.exists() and json.loads(capsys.readouterr().out)["strategy"] == "B"


def test_exit_codes(workspace, tmp_path, monkeypatch):
    root, common = workspace
    monkeypatch.delenv("LATENTVIEW_CACHE", raising=False)
    # missing cache dir is a configuration problem
    assert main(["train", "--data", str(root / "data"), "--out", str(tmp_path)]) == 2
    # run.json absent
    assert main(["--cache-dir", str(tmp_path), "train", "--data", str(root / "data"), "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("no equals here\n")
    assert main(["--config", str(bad), "make-synthetic", "--out", str(tmp_path / "d")]) == 2
    # empty data directory
    (tmp_path / "empty").mkdir()
    assert main(["--cache-dir", str(tmp_path / "c"), "invert", "--data", str(tmp_path / "empty")]) == 3
    # unreadable camera spec
    assert main([*common, "synthesize", "--checkpoint", str(root / "ckpt" / "epoch0001.pt"),
                 "--ref-image", str(tmp_path / "missing.png"), "--ref-cam", "x.json", "--tar-cam", "y.json",
                 "--out", str(tmp_path / "o.png")]) == 3
    with pytest.raises(SystemExit):
        main(["--help"])
