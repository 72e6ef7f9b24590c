"""Distributional and determinism checks for the scene generator.

Co-occurrence statistics are validated by frequency counting over rendered
scenes, against either analytic targets (independence at rho=0, hard
implication at rho=1) or a large direct sample of the label sampler.
"""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from ctxseg.errors import ConfigError, PlacementError
from ctxseg.scenegen import (
    DatasetManifest,
    SceneConfig,
    ShapeSpec,
    default_cooccurrence,
    generate_dataset,
    render_scene,
    sample_labels,
    split_manifest,
)


def pair_rate(label_sets, i, j):
    with_i = [s for s in label_sets if i in s]
    if not with_i:
        return 0.0
    return sum(1 for s in with_i if j in s) / len(with_i)


def render_label_sets(config, n):
    return [render_scene(config, idx).labels for idx in range(n)]


class TestCooccurrence:
    def test_rho_zero_gives_independence(self):
        config = SceneConfig(confound_strength=0.0, base_rate=0.6, n_images=500, seed=11)
        label_sets = render_label_sets(config, 500)
        n_total = len(label_sets)
        for j in range(1, 5):
            base = sum(1 for s in label_sets if j in s) / n_total
            for i in range(1, 5):
                if i == j:
                    continue
                assert abs(pair_rate(label_sets, i, j) - base) <= 0.05, (i, j)

    def test_rho_one_unit_entry_is_hard_implication(self):
        cooc = default_cooccurrence(4)
        cooc[0, 1] = 1.0  # class 1 present => class 2 present
        config = SceneConfig(
            cooccurrence=cooc, confound_strength=1.0, n_images=300, seed=5
        )
        for labels in render_label_sets(config, 300):
            if 1 in labels:
                assert 2 in labels

    def test_matches_large_sample_of_label_sampler(self):
        config = SceneConfig(n_images=500, seed=19)
        rendered = render_label_sets(config, 500)
        rng = np.random.default_rng(987)
        drawn = []
        for _ in range(100_000):
            _, presence = sample_labels(rng, config)
            drawn.append({i + 1 for i in range(4) if presence[i]})
        for i in range(1, 5):
            for j in range(1, 5):
                if i != j:
                    assert abs(
                        pair_rate(rendered, i, j) - pair_rate(drawn, i, j)
                    ) <= 0.05, (i, j)

    def test_confounded_pair_rate_monotone_in_rho(self):
        rates = []
        for rho in (0.0, 0.5, 1.0):
            config = SceneConfig(confound_strength=rho, n_images=500, seed=23)
            rates.append(pair_rate(render_label_sets(config, 500), 1, 2))
        assert rates[0] <= rates[1] <= rates[2]
        assert rates[2] > rates[0] + 0.2  # the knob actually does something


class TestSceneInvariants:
    def test_labels_match_mask_content(self):
        config = SceneConfig(n_images=50, seed=3)
        for idx in range(50):
            scene = render_scene(config, idx)
            in_mask = {int(v) for v in np.unique(scene.gt_mask) if v != 0}
            assert scene.labels == in_mask
            assert len(scene.labels) >= 1

    def test_mask_values_in_range_and_pixels_unit_interval(self):
        config = SceneConfig(n_images=20, seed=29)
        for idx in range(20):
            scene = render_scene(config, idx)
            assert set(np.unique(scene.gt_mask)) <= set(range(5))
            assert scene.pixels.min() >= 0.0 and scene.pixels.max() <= 1.0

    def test_placement_error_when_canvas_too_small(self):
        # radius > the canvas diagonal: any disc covers every pixel, so a
        # second class can never stay visible
        shapes = tuple(
            ShapeSpec(kind="disc", size_range=(23.0, 24.0), color=(0.5, 0.5, 0.5))
            for _ in range(4)
        )
        config = SceneConfig(
            canvas=(16, 16),
            shape_library=shapes,
            cooccurrence=np.ones((4, 4)),
            confound_strength=1.0,
            n_images=1,
            seed=0,
        )
        with pytest.raises(PlacementError):
            render_scene(config, 0)


class TestDeterminism:
    def test_same_seed_same_bytes(self, tmp_path):
        config = SceneConfig(n_images=12, seed=77)
        digests = []
        for run in ("a", "b"):
            out = tmp_path / run
            manifest = generate_dataset(config, out)
            hasher = hashlib.sha256()
            hasher.update((out / "manifest.jsonl").read_bytes())
            for record in manifest.records:
                hasher.update((out / record.image).read_bytes())
                hasher.update((out / record.gt_mask).read_bytes())
            digests.append(hasher.hexdigest())
        assert digests[0] == digests[1]


class TestSplit:
    def make_manifest(self, n=100):
        from ctxseg.rasters import Record

        records = tuple(
            Record(id=f"img_{i:05d}", image=f"images/{i}.png",
                   gt_mask=f"masks/{i}.png", labels=(1,))
            for i in range(n)
        )
        return DatasetManifest(root=Path("unused"), records=records)

    def test_80_20_disjoint(self):
        manifest = self.make_manifest(100)
        train, evaluation = split_manifest(manifest, (0.8, 0.2), seed=1)
        assert len(train) == 80 and len(evaluation) == 20
        assert not {r.id for r in train} & {r.id for r in evaluation}

    def test_empty_side_rejected(self):
        manifest = self.make_manifest(100)
        with pytest.raises(ConfigError):
            split_manifest(manifest, (1.0, 0.0), seed=1)

    def test_same_seed_same_membership(self):
        manifest = self.make_manifest(60)
        first = split_manifest(manifest, (0.7, 0.3), seed=9)
        second = split_manifest(manifest, (0.7, 0.3), seed=9)
        assert [r.id for r in first[0]] == [r.id for r in second[0]]
        assert [r.id for r in first[1]] == [r.id for r in second[1]]

    def test_fractions_past_one_rejected(self):
        with pytest.raises(ConfigError):
            split_manifest(self.make_manifest(10), (0.9, 0.3), seed=0)
