"""Metric oracle tests plus integration checks of the round loop."""

import json
import shutil

import numpy as np
import pytest

from ctxseg.errors import ConfigError, ValidationError
from ctxseg.models import TrainConfig
from ctxseg.pipeline import (
    MiouResult,
    RunConfig,
    miou,
    miou_dataset,
    rescore_round,
    run_pipeline,
)
from ctxseg.rasters import IGNORE
from ctxseg.scenegen import SceneConfig, prepare_dataset

SMOKE_TRAIN = TrainConfig(epochs=6, batch_size=8, learning_rate=2e-3, seed=0)


def smoke_run_config(**overrides) -> RunConfig:
    base = dict(
        rounds=1,
        walk_iters=8,
        classifier=SMOKE_TRAIN,
        segmenter=SMOKE_TRAIN,
        seed=13,
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def smoke_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    config = SceneConfig(n_images=24, seed=5)
    prepare_dataset(config, root, fractions=(0.8, 0.2))
    return root


def brute_force_miou(pred, gt, n_classes):
    """Pixel loops, dict counting; independent of the module internals."""
    inter = {k: 0 for k in range(n_classes + 1)}
    union = {k: 0 for k in range(n_classes + 1)}
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            if gt[i, j] == IGNORE:
                continue
            for k in range(n_classes + 1):
                p = pred[i, j] == k
                g = gt[i, j] == k
                if p and g:
                    inter[k] += 1
                if p or g:
                    union[k] += 1
    ious = {k: inter[k] / union[k] for k in range(n_classes + 1) if union[k] > 0}
    return ious, sum(ious.values()) / len(ious)


class TestMiou:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(3)
        gt = rng.integers(0, 3, size=(8, 8))
        assert miou(gt, gt, 2).mean == 1.0

    def test_total_miss_is_zero(self):
        gt = np.ones((4, 4), dtype=np.int64)
        pred = np.zeros((4, 4), dtype=np.int64)
        result = miou(pred, gt, 1)
        assert result.per_class == {0: 0.0, 1: 0.0}
        assert result.mean == 0.0

    def test_hand_case_two_sixths(self):
        gt = np.zeros((4, 4), dtype=np.int64)
        gt[0, 0:4] = 1  # four class-1 pixels
        pred = np.zeros((4, 4), dtype=np.int64)
        pred[0, 0:2] = 1  # two hits
        pred[1, 0:2] = 1  # two spurious
        result = miou(pred, gt, 1)
        assert result.per_class[1] == pytest.approx(2 / 6)

    def test_matches_brute_force_on_seeded_pairs(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = int(rng.integers(1, 4))
            gt = rng.integers(0, n + 1, size=(8, 8))
            pred = rng.integers(0, n + 1, size=(8, 8))
            gt[rng.random((8, 8)) < 0.1] = IGNORE
            expected_per_class, expected_mean = brute_force_miou(pred, gt, n)
            result = miou(pred, gt, n)
            assert result.per_class == expected_per_class
            assert result.mean == expected_mean

    def test_ignore_pixels_fully_excluded(self):
        gt = np.full((4, 4), IGNORE, dtype=np.int64)
        gt[0, 0] = 1
        pred = np.ones((4, 4), dtype=np.int64)
        result = miou(pred, gt, 1)
        assert result.per_class == {1: 1.0}
        assert result.mean == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            miou(np.zeros((2, 2)), np.zeros((3, 3)), 1)

    def test_dataset_aggregation_pools_counts(self):
        gt_a = np.zeros((2, 2), dtype=np.int64)
        gt_b = np.ones((2, 2), dtype=np.int64)
        pred_a = np.zeros((2, 2), dtype=np.int64)
        pred_b = np.zeros((2, 2), dtype=np.int64)
        pooled = miou_dataset([pred_a, pred_b], [gt_a, gt_b], 1)
        assert pooled.per_class[0] == pytest.approx(0.5)
        assert pooled.per_class[1] == 0.0


class TestRunPipeline:
    def test_single_round_structure(self, smoke_dataset, tmp_path):
        run_dir = tmp_path / "run"
        report = run_pipeline(smoke_dataset, run_dir, smoke_run_config(),
                              n_classes=4)
        assert [entry["round"] for entry in report["history"]] == [0, 1]
        for key in ("cam_miou", "pseudo_miou", "seg_miou"):
            for entry in report["history"]:
                assert 0.0 <= entry[key] <= 1.0
        for round_index in (0, 1):
            round_dir = run_dir / "state" / f"round_{round_index}"
            for sub in ("seeds", "pseudo", "segpred", "context"):
                assert (round_dir / sub).exists()
            for name in ("classifier.bin", "segmenter.bin", "confounders.npz"):
                assert (round_dir / name).exists()
        assert (run_dir / "report.json").exists()

    def test_bitwise_deterministic_reports(self, smoke_dataset, tmp_path):
        first = tmp_path / "a"
        second = tmp_path / "b"
        run_pipeline(smoke_dataset, first, smoke_run_config(), n_classes=4)
        run_pipeline(smoke_dataset, second, smoke_run_config(), n_classes=4)
        assert (first / "report.json").read_bytes() == (
            second / "report.json"
        ).read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, smoke_dataset, tmp_path):
        full_dir = tmp_path / "full"
        config2 = smoke_run_config(rounds=2)
        reference = run_pipeline(smoke_dataset, full_dir, config2, n_classes=4)

        resumed_dir = tmp_path / "resumed"
        run_pipeline(smoke_dataset, resumed_dir, smoke_run_config(rounds=1),
                     n_classes=4)
        resumed = run_pipeline(smoke_dataset, resumed_dir, config2, n_classes=4,
                               resume=True)
        assert resumed["history"] == reference["history"]
        assert (resumed_dir / "report.json").read_bytes() == (
            full_dir / "report.json"
        ).read_bytes()

    def test_q1_control_arm_runs(self, smoke_dataset, tmp_path):
        report = run_pipeline(smoke_dataset, tmp_path / "q1",
                              smoke_run_config(q1_control=True), n_classes=4)
        assert len(report["history"]) == 2

    def test_training_never_reads_ground_truth(self, smoke_dataset, tmp_path):
        blinded = tmp_path / "blinded"
        shutil.copytree(smoke_dataset, blinded)
        shutil.rmtree(blinded / "masks")
        config = smoke_run_config(evaluate=False)
        report = run_pipeline(blinded, tmp_path / "run", config, n_classes=4)
        assert all(entry["cam_miou"] is None for entry in report["history"])
        with pytest.raises(FileNotFoundError):
            run_pipeline(blinded, tmp_path / "run2", smoke_run_config(),
                         n_classes=4)

    def test_offline_rescoring_matches_history(self, smoke_dataset, tmp_path):
        run_dir = tmp_path / "run"
        report = run_pipeline(smoke_dataset, run_dir, smoke_run_config(),
                              n_classes=4)
        for entry in report["history"]:
            rescored = rescore_round(smoke_dataset, run_dir, entry["round"], 4)
            assert rescored["cam_miou"] == entry["cam_miou"]
            assert rescored["pseudo_miou"] == entry["pseudo_miou"]
            assert rescored["seg_miou"] == entry["seg_miou"]

    def test_zero_rounds_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(rounds=0)

    def test_round_zero_shared_across_context_arms(self, smoke_dataset, tmp_path):
        """Concat site, context mode, and confounder source only act from
        round 1 on, so every arm shares the round-0 baseline metrics."""
        baselines = []
        for name, overrides in (
            ("block5", {}),
            ("none", {"concat_block": "none"}),
            ("q1", {"q1_control": True}),
            ("joint", {"joint_projections": True}),
            ("pseudo_src", {"confounder_source": "pseudo_mask"}),
            ("cold", {"warm_start": False}),
        ):
            report = run_pipeline(smoke_dataset, tmp_path / name,
                                  smoke_run_config(**overrides), n_classes=4)
            baselines.append(report["history"][0])
        assert all(b == baselines[0] for b in baselines)

    def test_warm_start_continues_from_previous_round(self, smoke_dataset, tmp_path):
        from ctxseg.models import ClassifierParams

        run_pipeline(smoke_dataset, tmp_path / "warm", smoke_run_config(rounds=1),
                     n_classes=4)
        r0 = ClassifierParams.load(
            tmp_path / "warm" / "state" / "round_0" / "classifier.bin")
        r1 = ClassifierParams.load(
            tmp_path / "warm" / "state" / "round_1" / "classifier.bin")
        # untouched by gradients under fixed-map context, so carried over
        import torch
        assert torch.equal(r0.tensors["proj.w1"], r1.tensors["proj.w1"])
        assert torch.equal(r0.tensors["proj.w2"], r1.tensors["proj.w2"])
        # the conv stack, however, kept training
        assert not torch.equal(r0.tensors["block5.weight"],
                               r1.tensors["block5.weight"])
        # and the context slice woke up once real maps arrived
        assert not torch.equal(r1.tensors["block5.ctx_weight"],
                               torch.zeros_like(r1.tensors["block5.ctx_weight"]))
