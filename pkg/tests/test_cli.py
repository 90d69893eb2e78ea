import json

import numpy as np
import pytest
from PIL import Image

from iadccn import cli
from iadccn import data as D
from iadccn import model as M

TINY_CFG = "epochs = 2\npatch_size = 32\npatches_per_image = 2\nlr = 1e-3\nblock_channels = 2,2,4,4,4\nblock_depths = 1,1,1,1,1\ndru_channels = 4\niab_hidden = 3\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "ds"), "--n", "5", "--hw", "32", "48", "--seed", "2"]) == 0
    (root / "cfg.txt").write_text(TINY_CFG)
    rc = cli.main(["--threads", "1", "train", "--data", str(root / "ds"), "--config", str(root / "cfg.txt"),
                   "--out", str(root / "run"), "--seed", "1"])
    assert rc == 0
    return root


def manifest(path):
    return json.loads((path / "run_manifest.json").read_text())


class TestSynth:
    def test_layout(self, workspace):
        ds = workspace / "ds"
        images = D.load_annotations(ds / "annotations.json")
        assert len(images) == 5 and images[0].pixels.shape == (32, 48, 3)
        listed = {a["path"] for a in manifest(ds)["artifacts"]}
        assert str(ds / "annotations.json") in listed and len(listed) == 6

    def test_empty(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path), "--n", "0"]) == 0
        assert D.load_annotations(tmp_path / "annotations.json") == []

    def test_same_seed_same_bytes(self, tmp_path):
        for name in ("a", "b"):
            cli.main(["synth", "--out", str(tmp_path / name), "--n", "2", "--seed", "9"])
        for f in ("annotations.json", "images/img_0000.ppm", "images/img_0001.ppm"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_fixed_count(self, tmp_path):
        cli.main(["synth", "--out", str(tmp_path), "--n", "3", "--count-range", "5", "5"])
        assert all(im.count == 5 for im in D.load_annotations(tmp_path / "annotations.json"))

    def test_grayscale(self, tmp_path):
        cli.main(["synth", "--out", str(tmp_path), "--n", "1", "--channels", "1"])
        assert (tmp_path / "images" / "img_0000.pgm").exists()


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        lines = (run / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        m = manifest(run)
        assert m["seed"] == 1 and m["config"]["train"]["epochs"] == 2
        entry = next(a for a in m["artifacts"] if a["path"].endswith("weights.iawt"))
        assert entry["sha1"] == cli.git_blob_hash(run / "weights.iawt")

    def test_deterministic(self, workspace, tmp_path):
        rc = cli.main(["--threads", "1", "train", "--data", str(workspace / "ds"), "--config",
                       str(workspace / "cfg.txt"), "--out", str(tmp_path), "--seed", "1"])
        assert rc == 0
        assert (tmp_path / "weights.iawt").read_bytes() == (workspace / "run" / "weights.iawt").read_bytes()
        assert (tmp_path / "metrics.csv").read_bytes() == (workspace / "run" / "metrics.csv").read_bytes()

    def test_ablation_base(self, workspace, tmp_path):
        rc = cli.main(["train", "--data", str(workspace / "ds"), "--config", str(workspace / "cfg.txt"),
                       "--out", str(tmp_path), "--ablation", "base"])
        assert rc == 0
        params = M.load_params(tmp_path / "weights.iawt")
        assert not any(n.startswith(("iab.", "seg_head.")) for n in params)
        assert manifest(tmp_path)["config"]["train"]["hsm_enabled"] is False

    def test_resume_checks_inventory(self, workspace, tmp_path, capsys):
        rc = cli.main(["train", "--data", str(workspace / "ds"), "--config", str(workspace / "cfg.txt"),
                       "--out", str(tmp_path), "--ablation", "s", "--resume", str(workspace / "run" / "weights.iawt")])
        assert rc == 3
        assert "missing tensors: seg_head" in capsys.readouterr().err

    def test_resume_same_config(self, workspace, tmp_path):
        rc = cli.main(["train", "--data", str(workspace / "ds"), "--config", str(workspace / "cfg.txt"),
                       "--out", str(tmp_path), "--resume", str(workspace / "run" / "weights.iawt"), "--epochs", "1"])
        assert rc == 0

    def test_unknown_key_is_usage_error(self, workspace, tmp_path):
        rc = cli.main(["train", "--data", str(workspace / "ds"), "--out", str(tmp_path), "--set", "nope=1"])
        assert rc == 2

    def test_missing_data(self, tmp_path):
        assert cli.main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3

    def test_corrupt_annotations(self, tmp_path):
        (tmp_path / "annotations.json").write_text("[{")
        assert cli.main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 3


class TestEvalInferRender:
    def test_eval(self, workspace, tmp_path):
        rc = cli.main(["eval", "--data", str(workspace / "ds"), "--weights", str(workspace / "run" / "weights.iawt"),
                       "--out", str(tmp_path)])
        assert rc == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["n"] == 5 and summary["mae"] <= summary["mse"] + 1e-12
        assert len((tmp_path / "per_image.csv").read_text().splitlines()) == 6

    def test_infer_dims(self, workspace, tmp_path):
        img = np.random.default_rng(0).uniform(size=(30, 45, 3))
        D.save_image(img, tmp_path / "x.ppm")
        rc = cli.main(["infer", "--image", str(tmp_path / "x.ppm"), "--weights",
                       str(workspace / "run" / "weights.iawt"), "--out", str(tmp_path / "o")])
        assert rc == 0
        dens = D.load_density(tmp_path / "o" / "x.iadm")
        assert dens.values.shape == (8, 12) and dens.scale == 4
        with Image.open(tmp_path / "o" / "x_density.pgm") as im:
            assert im.size == (12, 8)
        count = json.loads((tmp_path / "o" / "x_count.json").read_text())["count"]
        assert count == pytest.approx(float(np.clip(dens.values, 0, None).sum()), rel=1e-6)

    def test_render_zero_black(self, tmp_path):
        D.save_density(D.DensityMap(np.zeros((4, 5), np.float32)), tmp_path / "z.iadm")
        assert cli.main(["render", "--density", str(tmp_path / "z.iadm"), "--out", str(tmp_path / "z.pgm")]) == 0
        with Image.open(tmp_path / "z.pgm") as im:
            assert not np.asarray(im).any()

    def test_render_bad_file(self, tmp_path):
        (tmp_path / "bad.iadm").write_bytes(b"junk")
        assert cli.main(["render", "--density", str(tmp_path / "bad.iadm"), "--out", str(tmp_path / "z.pgm")]) == 3

    def test_config_from_params(self, workspace):
        params = M.load_params(workspace / "run" / "weights.iawt")
        cfg = cli.config_from_params(params)
        assert cfg.block_channels == [2, 2, 4, 4, 4] and cfg.iab_enabled and cfg.iab_hidden == 3


class TestMisc:
    def test_version_lists_formats(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "IADM v1" in out and "IAWT v1" in out

    def test_gradcheck_ops(self, capsys):
        assert cli.main(["gradcheck", "--level", "ops"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "conv2d" in out

    def test_gradcheck_failure_exit(self, monkeypatch):
        from iadccn import gradcheck as G

        monkeypatch.setattr(G, "run_op_checks", lambda seed=0: [G.CheckResult("broken", 1.0, 1e-4, 0.0)])
        assert cli.main(["gradcheck"]) == 4

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train"])
        assert exc.value.code == 2

    def test_bad_threads(self, tmp_path):
        assert cli.main(["--threads", "0", "synth", "--out", str(tmp_path), "--n", "0"]) == 2

    def test_ablate_command(self, tmp_path):
        cli.main(["synth", "--out", str(tmp_path / "ds"), "--n", "6", "--hw", "32", "32", "--count-range", "1", "3"])
        (tmp_path / "cfg.txt").write_text(TINY_CFG.replace("epochs = 2", "epochs = 1"))
        rc = cli.main(["ablate", "--data", str(tmp_path / "ds"), "--config", str(tmp_path / "cfg.txt"),
                       "--out", str(tmp_path / "abl")])
        assert rc == 0
        rows = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
        assert len(rows) == 5
