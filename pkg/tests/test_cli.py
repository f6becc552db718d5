import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from ihcbridge.cli import RUN_MANIFEST, main
from ihcbridge.trainer import read_log

CONFIG = {
    "phantom": {"patch_size": 32, "nuclei_range": [1, 3], "decoy_range": [0, 1], "rbc_range": [0, 1],
                "sb_rbc_range": [0, 2], "n_labeled": 4},
    "counts": {"A": 10, "B": 8, "C": 8, "eval": 3, "sb": 6},
    "stage1": {"steps": 2, "batch_size": 2, "gen_width": 8, "gen_res_blocks": 1, "disc_width": 8, "disc_blocks": 2},
    "stage2": {"steps": 2, "batch_size": 2, "gen_width": 8, "gen_res_blocks": 1, "disc_width": 8, "disc_blocks": 2},
    "surrogate": {"steps": 10},
}


def tree_hash(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.yaml"
    cfg.write_text(yaml.safe_dump(CONFIG))
    assert main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["train", "--stage", "1", "--config", str(cfg), "--data", str(root / "data"),
                 "--out", str(root / "s1"), "--single-thread"]) == 0
    s1 = root / "s1" / "stage1" / "step_000002"
    assert main(["train", "--stage", "2", "--config", str(cfg), "--data", str(root / "data"),
                 "--stage1-ckpt", str(s1), "--out", str(root / "s2")]) == 0
    assert main(["train-sb", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "sb")]) == 0
    return root, cfg


def manifests(directory):
    return list(directory.glob(RUN_MANIFEST))


class TestGenData:
    def test_manifest_written(self, workspace):
        root, _ = workspace
        assert (root / "data" / "manifest.csv").exists()
        run = json.loads((root / "data" / RUN_MANIFEST).read_text())
        assert run["command"] == "gen-data" and "manifest.csv" in run["artifacts"]
        assert run["config"]["counts"]["A"] == 10

    def test_empty_corpus(self, workspace, tmp_path, capsys):
        _, cfg = workspace
        code = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d"), "--n-a", "0", "--n-b", "0",
                     "--n-c", "0", "--n-eval", "0", "--n-sb", "0"])
        assert code != 0
        assert "empty corpus" in capsys.readouterr().err

    def test_reproducible(self, workspace, tmp_path):
        _, cfg = workspace
        for name in ("a", "b"):
            assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "5"]) == 0
        assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
        a = json.loads((tmp_path / "a" / RUN_MANIFEST).read_text())["artifacts"]
        b = json.loads((tmp_path / "b" / RUN_MANIFEST).read_text())["artifacts"]
        assert a == b

    def test_invalid_config(self, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text("phantom: {patch_size: 8}\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
        bad.write_text("unknown_section: 1\n")
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1


class TestTrain:
    def test_stage2_needs_checkpoint(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["train", "--stage", "2", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(tmp_path)]) == 1

    def test_one_step(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["train", "--stage", "1", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(tmp_path), "--steps", "1"]) == 0
        assert len(read_log(tmp_path / "stage1")) == 1
        assert len(list((tmp_path / "stage1").glob("step_*/checkpoint.pt"))) == 1
        assert len(manifests(tmp_path)) == 1

    def test_resume_matches_continuous(self, workspace, tmp_path):
        root, cfg = workspace
        base = ["train", "--stage", "1", "--config", str(cfg), "--data", str(root / "data"), "--single-thread"]
        assert main(base + ["--out", str(tmp_path / "full"), "--steps", "4"]) == 0
        assert main(base + ["--out", str(tmp_path / "part"), "--steps", "2"]) == 0
        assert main(base + ["--out", str(tmp_path / "part"), "--steps", "4",
                            "--resume", str(tmp_path / "part" / "stage1" / "step_000002")]) == 0
        assert read_log(tmp_path / "full" / "stage1")[-1] == read_log(tmp_path / "part" / "stage1")[-1]

    def test_missing_data_is_usage_error(self, workspace, tmp_path):
        _, cfg = workspace
        assert main(["train", "--stage", "1", "--config", str(cfg), "--data", str(tmp_path / "none"),
                     "--out", str(tmp_path / "o")]) == 1

    def test_divergence_is_runtime_error(self, workspace, tmp_path):
        root, cfg = workspace
        bad = tmp_path / "nan.yaml"
        c = json.loads(json.dumps(CONFIG))
        c["stage1"]["lr_g"] = 1e30
        c["stage1"]["optimizer"] = "sgd"
        c["stage1"]["steps"] = 5
        bad.write_text(yaml.safe_dump(c))
        assert main(["train", "--stage", "1", "--config", str(bad), "--data", str(root / "data"),
                     "--out", str(tmp_path / "o")]) == 2


class TestTranslate:
    def ckpt(self, root):
        return str(root / "s2" / "stage2" / "step_000002")

    def test_empty_input(self, workspace, tmp_path, caplog):
        root, _ = workspace
        (tmp_path / "in").mkdir()
        assert main(["translate", "--ckpt", self.ckpt(root), "--in", str(tmp_path / "in"),
                     "--out", str(tmp_path / "out")]) == 0
        assert list((tmp_path / "out").glob("*.png")) == []
        assert "nothing to translate" in caplog.text

    def test_one_output_per_input(self, workspace, tmp_path):
        root, _ = workspace
        src = root / "data" / "C" / "train"
        before = tree_hash(src)
        assert main(["translate", "--ckpt", self.ckpt(root), "--in", str(src), "--out", str(tmp_path)]) == 0
        inputs = sorted(p.name for p in src.glob("*.png"))
        assert sorted(p.name for p in tmp_path.glob("*.png")) == inputs
        assert tree_hash(src) == before

    def test_duplicates_translate_identically(self, workspace, tmp_path):
        root, _ = workspace
        (tmp_path / "in").mkdir()
        patch = next((root / "data" / "A" / "train").glob("a_*[0-9].png")).read_bytes()
        (tmp_path / "in" / "one.png").write_bytes(patch)
        (tmp_path / "in" / "two.png").write_bytes(patch)
        assert main(["translate", "--ckpt", self.ckpt(root), "--in", str(tmp_path / "in"),
                     "--out", str(tmp_path / "out")]) == 0
        assert (tmp_path / "out" / "one.png").read_bytes() == (tmp_path / "out" / "two.png").read_bytes()

    def test_indivisible_size(self, workspace, tmp_path):
        root, _ = workspace
        (tmp_path / "in").mkdir()
        Image.fromarray(np.full((30, 30, 3), 200, np.uint8)).save(tmp_path / "in" / "odd.png")
        assert main(["translate", "--ckpt", self.ckpt(root), "--in", str(tmp_path / "in"),
                     "--out", str(tmp_path / "out")]) == 2


class TestEvaluate:
    def run(self, workspace, out, methods):
        root, cfg = workspace
        return main(["evaluate", "--config", str(cfg), "--data", str(root / "data"), "--sb", str(root / "sb"),
                     "--ckpt", str(root / "s2" / "stage2" / "step_000002"), "--methods", methods, "--out", str(out)])

    def test_identity_only(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, "identity") == 0
        report = json.loads((tmp_path / "metrics.json").read_text())
        assert list(report["methods"]) == ["identity"]
        assert (tmp_path / "metrics.png").exists()

    def test_oracle_flagged(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, "identity,proposed,analytic,oracle") == 0
        methods = json.loads((tmp_path / "metrics.json").read_text())["methods"]
        assert methods["oracle"]["oracle"] is True
        assert not any(m["oracle"] for k, m in methods.items() if k != "oracle")

    def test_rerun_identical(self, workspace, tmp_path):
        root, _ = workspace
        before = tree_hash(root / "data")
        assert self.run(workspace, tmp_path / "a", "identity,proposed,oracle") == 0
        assert self.run(workspace, tmp_path / "b", "identity,proposed,oracle") == 0
        a = json.loads((tmp_path / "a" / "metrics.json").read_text())["methods"]
        b = json.loads((tmp_path / "b" / "metrics.json").read_text())["methods"]
        for name in a:
            for key in ("nucleus_inv_auc", "background_inv_auc", "harmonic_mean"):
                assert abs(a[name][key] - b[name][key]) <= 1e-6
        assert tree_hash(root / "data") == before

    def test_unknown_method(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path, "identity,cyclegan_only") == 1

    def test_missing_masks(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["evaluate", "--config", str(cfg), "--data", str(root / "sb"), "--sb", str(root / "sb"),
                     "--methods", "identity", "--out", str(tmp_path)]) == 2

    def test_plot(self, workspace, tmp_path):
        assert self.run(workspace, tmp_path / "ev", "identity,oracle") == 0
        assert main(["plot", "--report", str(tmp_path / "ev"), "--out", str(tmp_path / "fig")]) == 0
        assert (tmp_path / "fig" / "metrics.png").stat().st_size > 0
        assert len(manifests(tmp_path / "fig")) == 1


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["train", "--stage", "3", "--data", "x", "--out", "y"])
    assert exc.value.code == 1


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ihcbridge.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("gen-data", "train", "translate", "evaluate", "plot"):
        assert cmd in proc.stdout
