"""Tests for training rounds, detection, self-training runs and ablations."""

import json

import numpy as np
import pytest

from pseudobox_lab.config import TrainConfig
from pseudobox_lab.data_format import CorruptionSpec, SceneSpec
from pseudobox_lab.exceptions import CheckpointError
from pseudobox_lab.io import TrainingLog, load_reports
from pseudobox_lab.pipeline import (
    check_gradients,
    detect,
    detection_uncertainties,
    init_model,
    load_model,
    nms_indices,
    run_ablation,
    self_train,
    train_round,
)
from pseudobox_lab.scenegen import make_split
from pseudobox_lab.uncertainty import UNCERTAINTY_MODES

from conftest import SMALL_SPEC, tiny_config


def _box(x, y, theta=0.0):
    return [x, y, 1.0, 4.0, 2.0, 1.6, theta]


class TestTrainRound:
    def test_zero_epochs_returns_init(self, labeled_scenes):
        cfg = tiny_config(epochs=0)
        params, report = train_round(cfg, labeled_scenes)
        init = init_model(cfg, 0)
        assert all(np.array_equal(params.arrays[k], init.arrays[k]) for k in init.arrays)
        assert report.final_loss == 0.0
        assert report.round_index == 0

    def test_deterministic(self, labeled_scenes):
        cfg = tiny_config(augment=True)
        a, report_a = train_round(cfg, labeled_scenes)
        b, report_b = train_round(cfg, labeled_scenes)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.arrays)
        assert report_a.to_dict() == report_b.to_dict()

    def test_seed_changes_result(self, labeled_scenes):
        a, _ = train_round(tiny_config(seed=0), labeled_scenes)
        b, _ = train_round(tiny_config(seed=1), labeled_scenes)
        assert not np.array_equal(a.arrays["trunk.0.weight"], b.arrays["trunk.0.weight"])

    def test_log_has_one_record_per_step(self, labeled_scenes):
        log = TrainingLog()
        train_round(tiny_config(epochs=3, batch_size=3), labeled_scenes, log=log)
        # Four scenes in batches of three: two steps per epoch
        assert [r["step"] for r in log.records] == list(range(6))
        record = log.records[0]
        for key in ("lr", "grad_norm", "L_p_x", "L_a_theta", "U_h", "L_p_u", "L_total", "n_foreground"):
            assert key in record
        assert all(np.isfinite(r["L_total"]) for r in log.records)

    def test_report_contents(self, labeled_scenes):
        _, report = train_round(tiny_config(), labeled_scenes, eval_scenes=labeled_scenes[:1])
        assert set(report.metrics) == {"0-30m", "30-50m", "50-80m", "0-80m"}
        np.testing.assert_allclose(report.pseudo_label_error, 0.0, atol=1e-12)
        assert report.pseudo_label_stats["recall"] == 1.0
        assert len(report.mean_uncertainty) == 7
        assert report.uncertainty_error_rho is None
        assert "wall_time" not in report.to_dict()

    def test_rule_mode_trains(self, labeled_scenes):
        _, report = train_round(tiny_config(uncertainty_mode="distance"), labeled_scenes)
        assert np.isfinite(report.final_loss)


class TestDetection:
    def test_nms_keeps_best_of_overlapping(self):
        boxes = [_box(0, 0), _box(0.3, 0), _box(20, 0)]
        np.testing.assert_array_equal(nms_indices(boxes, [0.6, 0.9, 0.5], 0.1), [1, 2])

    def test_nms_ties_prefer_lower_index(self):
        boxes = [_box(0, 0), _box(0.1, 0)]
        np.testing.assert_array_equal(nms_indices(boxes, [0.7, 0.7], 0.1), [0])

    def test_nms_empty(self):
        assert len(nms_indices(np.zeros((0, 7)), [], 0.1)) == 0

    def test_threshold_above_one_is_empty(self, small_scene):
        cfg = tiny_config()
        boxes, scores = detect(init_model(cfg), small_scene, cfg, 1.01)
        assert boxes.shape == (0, 7)
        assert len(scores) == 0

    def test_zero_threshold_detects(self, small_scene):
        cfg = tiny_config()
        boxes, scores = detect(init_model(cfg), small_scene, cfg, 0.0)
        assert len(boxes) >= 1
        assert np.all(np.diff(scores) <= 0)

    def test_primary_inference_ignores_auxiliary_branch(self, small_scene):
        cfg = tiny_config(split_depth=1)
        params = init_model(cfg)
        full = detect(params, small_scene, cfg, 0.0)
        primary_only = detect(params.without_branch("auxiliary"), small_scene, cfg, 0.0)
        np.testing.assert_array_equal(full[0], primary_only[0])
        np.testing.assert_array_equal(full[1], primary_only[1])

    def test_detections_do_not_depend_on_density(self, small_scene):
        cfg = tiny_config()
        params = init_model(cfg)
        doubled = small_scene.replace(
            points=np.vstack([small_scene.points, small_scene.points]),
            prov=np.concatenate([small_scene.prov, small_scene.prov]),
        )
        boxes, scores = detect(params, small_scene, cfg, 0.0)
        dense_boxes, dense_scores = detect(params, doubled, cfg, 0.0)
        assert dense_boxes.shape == boxes.shape
        np.testing.assert_allclose(dense_boxes, boxes, atol=1e-9)
        np.testing.assert_allclose(dense_scores, scores, atol=1e-9)

    def test_detection_uncertainties(self, small_scene):
        cfg = tiny_config()
        boxes = np.vstack([small_scene.gt_boxes, _box(75, 75)])
        values = detection_uncertainties(init_model(cfg), small_scene, boxes, cfg)
        assert values.shape == (len(boxes), 7)
        assert np.all(values[:-1] >= 0)
        assert np.all(np.isnan(values[-1]))


class TestSelfTrain:
    def test_seed_training_only(self, small_dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        reports = self_train(cfg)
        assert len(reports) == 1
        out = tmp_path / "run"
        for name in ("config.yaml", "run.yaml", "labels_round_0.jsonl", "reports.json", "metrics.json", "timings.json"):
            assert (out / name).exists()
        assert (out / "round_0" / "checkpoint.hdf5").exists()
        assert (out / "round_0" / "train_log.jsonl").exists()
        assert not (out / "labels_round_1.jsonl").exists()

    def test_rounds_and_relabeling(self, small_dataset, tmp_path):
        cfg = tiny_config(tmp_path, rounds=2, relabel_threshold=0.0)
        reports = self_train(cfg)
        assert [r.round_index for r in reports] == [0, 1, 2]
        out = tmp_path / "run"
        assert (out / "labels_round_2.jsonl").exists()
        assert [r.to_dict() for r in load_reports(out / "reports.json")] == [r.to_dict() for r in reports]
        metrics = json.loads((out / "metrics.json").read_text())
        assert list(metrics["rounds"]) == ["0", "1", "2"]

    def test_identical_configs_give_identical_reports(self, small_dataset, tmp_path):
        cfg = tiny_config(tmp_path, rounds=1, relabel_threshold=0.0)
        self_train(cfg, output_dir=tmp_path / "a")
        self_train(cfg, output_dir=tmp_path / "b")
        assert (tmp_path / "a" / "reports.json").read_bytes() == (tmp_path / "b" / "reports.json").read_bytes()

    def test_resume_matches_uninterrupted_run(self, small_dataset, tmp_path):
        cfg = tiny_config(tmp_path, rounds=2, relabel_threshold=0.0)
        self_train(cfg, output_dir=tmp_path / "full")
        self_train(cfg.replace(rounds=0), output_dir=tmp_path / "resumed")
        self_train(cfg, output_dir=tmp_path / "resumed")
        full = (tmp_path / "full" / "reports.json").read_bytes()
        assert (tmp_path / "resumed" / "reports.json").read_bytes() == full

    def test_file_seeds_report_correlation(self, tmp_path):
        make_split(SMALL_SPEC, 4, 2, tmp_path / "data", CorruptionSpec(fraction=1.0, seed=3))
        cfg = tiny_config(tmp_path, seed_source="file")
        report = self_train(cfg)[0]
        assert report.uncertainty_error_rho is not None
        assert set(report.uncertainty_error_rho) == {"x", "y", "z", "l", "w", "h", "theta"}

    def test_load_model_checks_shape(self, small_dataset, tmp_path):
        cfg = tiny_config(tmp_path)
        self_train(cfg)
        checkpoint = tmp_path / "run" / "round_0" / "checkpoint.hdf5"
        params = load_model(checkpoint, cfg)
        assert params.shape.trunk_widths == (8, 12)
        with pytest.raises(CheckpointError):
            load_model(checkpoint, cfg.replace(head_width=16))


class TestAblation:
    def test_one_row_per_arm(self, small_dataset, tmp_path):
        rows = run_ablation(tiny_config(tmp_path), {"lam": [0.0, 1e-5], "gamma": [0.5]})
        assert [row["arm"] for row in rows] == ["gamma=0.5,lam=0.0", "gamma=0.5,lam=1e-05"]
        for row in rows:
            assert set(row) == {"arm", "overrides", "AP_BEV", "AP_3D", "mean_uncertainty", "uncertainty_error_rho"}
        summary = json.loads((tmp_path / "run" / "ablation.json").read_text())
        assert len(summary["arms"]) == 2


class TestGradientCheck:
    def test_few_configs(self):
        results = check_gradients(n_configs=3, seed=1)
        assert len(results) == 3
        assert max(r["max_relative_error"] for r in results) <= 1e-4
        assert [r["config"]["uncertainty_mode"] for r in results] == ["learned", "none", "distance"]
        assert all(r["skipped"] < r["sampled"] for r in results)

    def test_rule_modes_pass(self):
        results = check_gradients(n_configs=5, seed=2)
        by_mode = {r["config"]["uncertainty_mode"]: r["max_relative_error"] for r in results}
        assert set(by_mode) == set(UNCERTAINTY_MODES)
        assert max(by_mode.values()) <= 1e-4

    @pytest.mark.slow
    def test_full_sweep(self):
        results = check_gradients(n_configs=32)
        gammas = {r["config"]["gamma"] for r in results}
        assert gammas == {0.25, 0.5, 1.0, 2.0}
        assert {r["config"]["uncertainty_mode"] for r in results} == set(UNCERTAINTY_MODES)
        assert max(r["max_relative_error"] for r in results) <= 1e-4


COORDINATES = ("x", "y", "z", "l", "w", "h", "theta")


@pytest.fixture(scope="module")
def corrupted_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corrupted")
    make_split(SceneSpec(seed=0), 64, 32, root / "data", CorruptionSpec(fraction=0.3, seed=0), workers=4)
    return root


def _corpus_config(root, **changes):
    values = dict(
        dataset=str(root / "data"),
        output_dir=str(root / "runs"),
        seed_source="file",
        rounds=0,
        lam=1e-5,
        gamma=0.5,
        mu=1.0,
    )
    values.update(changes)
    return TrainConfig(**values)


def _median_by(rows, key, field):
    groups = {}
    for row in rows:
        groups.setdefault(row["overrides"][key], []).append(field(row))
    return {value: float(np.median(scores)) for value, scores in groups.items()}


@pytest.mark.slow
class TestCorruptedCorpusBehaviour:
    def test_uncertainty_ranks_label_errors(self, corrupted_corpus):
        rows = run_ablation(
            _corpus_config(corrupted_corpus),
            {"seed": [0, 1, 2]},
            output_dir=corrupted_corpus / "rho",
            workers=3,
        )
        passing = 0
        for name in COORDINATES:
            rhos = [row["uncertainty_error_rho"][name]["rho"] for row in rows if row["uncertainty_error_rho"][name]]
            assert len(rhos) == 3
            passing += float(np.median(rhos)) >= 0.3
        assert passing >= 5

    def test_learned_uncertainty_beats_plain_loss(self, corrupted_corpus):
        rows = run_ablation(
            _corpus_config(corrupted_corpus),
            {"seed": [0, 1, 2, 3, 4], "uncertainty_mode": ["learned", "none"]},
            output_dir=corrupted_corpus / "benefit",
            workers=4,
        )
        ap = _median_by(rows, "uncertainty_mode", lambda row: row["AP_BEV"])
        assert ap["learned"] > ap["none"]
        assert ap["learned"] - ap["none"] >= 0.02

    def test_granularity_ordering(self, corrupted_corpus):
        rows = run_ablation(
            _corpus_config(corrupted_corpus),
            {"seed": [0, 1, 2, 3, 4], "granularity": ["coordinate", "box", "cloud"]},
            output_dir=corrupted_corpus / "granularity",
            workers=4,
        )
        ap = _median_by(rows, "granularity", lambda row: row["AP_BEV"])
        assert ap["coordinate"] >= ap["box"] >= ap["cloud"]
        assert ap["coordinate"] > ap["box"] or ap["box"] > ap["cloud"]

    def test_penalty_strength_orders_uncertainty(self, corrupted_corpus):
        rows = run_ablation(
            _corpus_config(corrupted_corpus),
            {"seed": [0, 1, 2], "lam": [1e-6, 1e-5, 1e-4]},
            output_dir=corrupted_corpus / "lambda",
            workers=4,
        )
        mean_u = _median_by(rows, "lam", lambda row: float(np.mean(row["mean_uncertainty"])))
        assert mean_u[1e-6] > mean_u[1e-5] > mean_u[1e-4]
