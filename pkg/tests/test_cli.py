"""Tests for the pseudobox-lab command line."""

import json

import pytest

from pseudobox_lab.cli import _parse_grid, main
from pseudobox_lab.io import load_manifest, load_scenes


@pytest.fixture
def generated(tmp_path):
    data = tmp_path / "data"
    assert main(["gen", "--out", str(data), "--n-train", "3", "--n-test", "2", "--scene-seed", "5"]) == 0
    return data


TINY = ["--trunk_widths=[8,12]", "--head_width=12", "--epochs=1", "--points_per_scene=64", "--rounds=0"]


class TestGen:
    def test_writes_split(self, generated):
        manifest = load_manifest(generated)
        assert manifest["n_train"] == 3
        assert manifest["spec"]["seed"] == 5
        assert len(load_scenes(generated / "train.jsonl")) == 3

    def test_corrupted_split(self, tmp_path):
        data = tmp_path / "noisy"
        code = main(
            ["gen", "--out", str(data), "--n-train", "2", "--n-test", "1", "--corrupt-fraction", "0.5"]
        )
        assert code == 0
        assert load_manifest(data)["corruption"]["fraction"] == 0.5
        assert all(s.injected_errors is not None for s in load_scenes(data / "train.jsonl"))


class TestSeed:
    def test_seeds_training_scenes(self, generated):
        assert main(["seed", "--data", str(generated)]) == 0
        manifest = load_manifest(generated)
        assert manifest["cluster_params"]["eps"] == pytest.approx(0.8)
        assert sum(len(s.pseudo_boxes) for s in load_scenes(generated / "train.jsonl")) > 0


class TestSelfTrainAndEval:
    def test_selftrain_eval_viz(self, generated, tmp_path, capsys):
        run = tmp_path / "run"
        assert main(["selftrain", "--data", str(generated), "--out", str(run), *TINY]) == 0
        assert "T=0" in capsys.readouterr().out

        metrics = tmp_path / "metrics.json"
        code = main(
            [
                "eval",
                "--checkpoint",
                str(run / "round_0" / "checkpoint.hdf5"),
                "--data",
                str(generated),
                "--out",
                str(metrics),
                *TINY,
            ]
        )
        assert code == 0
        assert "0-80m" in json.loads(metrics.read_text())["rounds"]["0"]["cells"]

        assert main(["viz", "--run", str(run), "--scene", "3"]) == 0
        svg = run / "round_0" / "scene_3.svg"
        assert 'id="gt-0"' in svg.read_text(encoding="utf-8")

    def test_shape_mismatch_is_reported(self, generated, tmp_path):
        run = tmp_path / "run"
        assert main(["selftrain", "--data", str(generated), "--out", str(run), *TINY]) == 0
        checkpoint = str(run / "round_0" / "checkpoint.hdf5")
        assert main(["eval", "--checkpoint", checkpoint, "--data", str(generated), *TINY, "--head_width=16"]) == 2


class TestErrors:
    def test_unknown_override(self, generated):
        assert main(["seed", "--data", str(generated), "--lamda=0.1"]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["seed", "--data", str(tmp_path / "nothing")]) == 2

    def test_gen_rejects_unknown_flag(self, tmp_path):
        code = main(["gen", "--out", str(tmp_path / "d"), "--n-train", "1", "--n-test", "1", "--bogus=1"])
        assert code == 2
        assert not (tmp_path / "d" / "manifest.yaml").exists()

    def test_check_grad_rejects_unknown_flag(self):
        assert main(["check-grad", "--configs", "1", "--bogus=1"]) == 2

    def test_missing_scene(self, generated, tmp_path):
        run = tmp_path / "run"
        main(["selftrain", "--data", str(generated), "--out", str(run), *TINY])
        assert main(["viz", "--run", str(run), "--scene", "99"]) == 2


class TestGrid:
    def test_values_are_typed(self):
        grid = _parse_grid(["lambda=1e-5,1e-4", "granularity=coordinate,box"])
        assert grid == {"lam": [1e-5, 1e-4], "granularity": ["coordinate", "box"]}


class TestCheckGrad:
    def test_exit_code(self, capsys):
        assert main(["check-grad", "--configs", "2"]) == 0
        assert "max relative error" in capsys.readouterr().out
