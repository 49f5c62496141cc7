import json
import logging

import numpy as np
import pytest
from PIL import Image

from conftest import seed_all
from scdkit.data import (
    BiTemporalSample,
    DatasetSpec,
    apply_geometric,
    augment,
    load_dataset,
    write_dataset,
)
from scdkit.errors import DataError, ShapeError
from scdkit.metrics import TransitionMatrix, transition_matrix
from scdkit.synth import SynthConfig, class_spec, default_transition_table, generate


def make_sample(rng, h=16, w=16, n=4, name="s.png"):
    sem_t1 = rng.integers(0, n, (h, w))
    sem_t2 = rng.integers(0, n, (h, w))
    change = ((sem_t1 != 0) | (sem_t2 != 0)).astype(np.int64)
    return BiTemporalSample(
        image_t1=rng.random((h, w, 3)).astype(np.float32),
        image_t2=rng.random((h, w, 3)).astype(np.float32),
        sem_t1=sem_t1,
        sem_t2=sem_t2,
        change=change,
        void=np.zeros((h, w), dtype=bool),
        name=name,
    )


class TestSampleValidation:
    def test_valid_sample_passes(self):
        rng = seed_all(400)
        make_sample(rng).validate(4)

    def test_convention_violation(self):
        rng = seed_all(401)
        s = make_sample(rng)
        s.change = 1 - s.change
        with pytest.raises(DataError, match="convention"):
            s.validate(4)

    def test_shape_mismatch(self):
        rng = seed_all(402)
        s = make_sample(rng)
        s.sem_t2 = s.sem_t2[:-1]
        with pytest.raises(ShapeError):
            s.validate(4)

    def test_image_range(self):
        rng = seed_all(403)
        s = make_sample(rng)
        s.image_t1 = s.image_t1 + 2.0
        with pytest.raises(DataError, match="\\[0, 1\\]"):
            s.validate(4)

    def test_one_sided_count(self):
        z = np.zeros((2, 2), dtype=np.int64)
        s1 = z.copy()
        s1[0, 0] = 1
        s = BiTemporalSample(
            image_t1=np.zeros((2, 2, 3), dtype=np.float32),
            image_t2=np.zeros((2, 2, 3), dtype=np.float32),
            sem_t1=s1,
            sem_t2=z.copy(),
            change=((s1 != 0)).astype(np.int64),
            void=np.zeros((2, 2), dtype=bool),
        )
        s.validate(2)
        assert s.one_sided_pixels() == 1


class TestDatasetSpec:
    def test_json_round_trip(self, tmp_path):
        spec = DatasetSpec(
            root=tmp_path,
            class_names=["nochange", "water", "building"],
            palette=[(255, 255, 255), (0, 0, 255), (128, 0, 0)],
            name="demo",
        )
        spec.to_file()
        loaded = DatasetSpec.from_file(tmp_path)
        assert loaded.class_names == spec.class_names
        assert loaded.palette == spec.palette
        assert loaded.name == "demo"
        assert loaded.num_classes == 3

    def test_duplicate_colors_rejected(self, tmp_path):
        with pytest.raises(DataError, match="distinct"):
            DatasetSpec(tmp_path, ["a", "b"], [(0, 0, 0), (0, 0, 0)])

    def test_bad_ids_rejected(self, tmp_path):
        (tmp_path / "dataset.json").write_text(
            json.dumps({"classes": [{"id": 0, "name": "a", "color": [0, 0, 0]}, {"id": 2, "name": "b", "color": [1, 1, 1]}]})
        )
        with pytest.raises(DataError, match="0..N-1"):
            DatasetSpec.from_file(tmp_path)

    def test_missing_spec(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            DatasetSpec.from_file(tmp_path / "nope")


class TestWriteLoadRoundTrip:
    def _write(self, tmp_path, n_samples=3):
        rng = seed_all(410)
        cfg = SynthConfig(n_samples=n_samples, height=32, width=32, num_classes=4, seed=7)
        samples, _ = generate(cfg)
        spec = class_spec(cfg, tmp_path)
        write_dataset(samples, spec)
        return samples, DatasetSpec.from_file(tmp_path)

    def test_counts_and_order(self, tmp_path):
        samples, spec = self._write(tmp_path)
        ds = load_dataset(spec)
        assert len(ds) == len(samples)
        assert ds.names == sorted(s.name for s in samples)

    def test_labels_survive_exactly(self, tmp_path):
        samples, spec = self._write(tmp_path)
        ds = load_dataset(spec)
        by_name = {s.name: s for s in samples}
        for i in range(len(ds)):
            got = ds[i]
            want = by_name[got.name]
            assert np.array_equal(got.sem_t1, want.sem_t1)
            assert np.array_equal(got.sem_t2, want.sem_t2)
            assert np.array_equal(got.change, want.change)

    def test_images_survive_within_quantization(self, tmp_path):
        samples, spec = self._write(tmp_path)
        ds = load_dataset(spec)
        by_name = {s.name: s for s in samples}
        got = ds[0]
        want = by_name[got.name]
        assert np.abs(got.image_t1 - want.image_t1).max() <= 0.5 / 255 + 1e-6

    def test_missing_pair_member(self, tmp_path):
        _, spec = self._write(tmp_path)
        victim = sorted((tmp_path / "label2").iterdir())[0]
        victim.unlink()
        with pytest.raises(DataError, match=victim.name):
            load_dataset(spec)

    def test_unknown_color_names_file(self, tmp_path):
        _, spec = self._write(tmp_path)
        name = sorted((tmp_path / "label1").iterdir())[0].name
        bad = np.zeros((32, 32, 3), dtype=np.uint8)
        bad[0, 0] = (1, 2, 3)
        bad[1:] = spec.palette[0]
        bad[0, 1:] = spec.palette[0]
        Image.fromarray(bad, mode="RGB").save(tmp_path / "label1" / name)
        ds = load_dataset(spec)
        idx = ds.names.index(name)
        with pytest.raises(DataError, match="(1, 2, 3)"):
            ds[idx]

    def test_rgb_labels_map_through_palette(self, tmp_path):
        samples, spec = self._write(tmp_path, n_samples=1)
        name = samples[0].name
        rgb = np.array([spec.palette[i] for i in samples[0].sem_t1.ravel()], dtype=np.uint8)
        rgb = rgb.reshape(*samples[0].sem_t1.shape, 3)
        Image.fromarray(rgb, mode="RGB").save(tmp_path / "label1" / name)
        ds = load_dataset(spec)
        got = ds[ds.names.index(name)]
        assert np.array_equal(got.sem_t1, samples[0].sem_t1)

    def test_empty_dataset_warns(self, tmp_path, caplog):
        spec = DatasetSpec(tmp_path, ["nc", "a"], [(0, 0, 0), (255, 0, 0)])
        for sub in ("im1", "im2", "label1", "label2"):
            (tmp_path / sub).mkdir()
        with caplog.at_level(logging.WARNING):
            ds = load_dataset(spec)
        assert len(ds) == 0
        assert any("no samples" in r.message for r in caplog.records)

    def test_missing_directory(self, tmp_path):
        spec = DatasetSpec(tmp_path / "absent", ["nc", "a"], [(0, 0, 0), (255, 0, 0)])
        with pytest.raises(DataError, match="not found"):
            load_dataset(spec)

    def test_void_directory_loads(self, tmp_path):
        samples, spec = self._write(tmp_path, n_samples=1)
        (tmp_path / "void").mkdir()
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[:4] = 255
        Image.fromarray(mask, mode="L").save(tmp_path / "void" / samples[0].name)
        ds = load_dataset(spec)
        got = ds[0]
        assert got.void[:4].all()
        assert not got.void[4:].any()

    def test_qa_scan_flags_one_sided(self, tmp_path):
        samples, spec = self._write(tmp_path, n_samples=1)
        name = samples[0].name
        ids = samples[0].sem_t1.copy()
        ids[samples[0].change == 0] = 0
        ids[0, 0] = 1  # changed in t1 only unless t2 also nonzero there
        flat = [v for c in spec.palette for v in c]
        pimg = Image.fromarray(ids.astype(np.uint8), mode="P")
        pimg.putpalette(flat)
        pimg.save(tmp_path / "label1" / name)
        ds = load_dataset(spec)
        report = ds.qa_scan()
        assert report["samples"] == 1
        assert report["one_sided_pixels"] >= 1
        assert name in report["samples_with_one_sided"]


class TestAugment:
    def test_deterministic_per_seed(self):
        rng = seed_all(420)
        s = make_sample(rng)
        a = augment(s, seed=123)
        b = augment(s, seed=123)
        assert np.array_equal(a.image_t1, b.image_t1)
        assert np.array_equal(a.sem_t2, b.sem_t2)
        c = augment(s, seed=124)
        assert not np.array_equal(a.image_t1, c.image_t1)

    def test_labels_follow_geometry_and_convention_holds(self):
        rng = seed_all(421)
        s = make_sample(rng)
        for seed in range(8):
            out = augment(s, seed)
            out.validate(4)
            assert sorted(out.sem_t1.ravel()) == sorted(s.sem_t1.ravel())

    def test_images_stay_in_range(self):
        rng = seed_all(422)
        s = make_sample(rng)
        for seed in range(8):
            out = augment(s, seed)
            assert out.image_t1.min() >= 0.0 and out.image_t1.max() <= 1.0

    def test_photometry_is_per_timestamp(self):
        rng = seed_all(423)
        s = make_sample(rng)
        s.image_t2 = s.image_t1.copy()
        out = augment(s, seed=5)
        assert not np.array_equal(out.image_t1, out.image_t2)

    def test_geometric_helpers_invert(self):
        rng = seed_all(424)
        s = make_sample(rng, h=12, w=8)
        four = apply_geometric(s, 4, False, False)
        assert np.array_equal(four.image_t1, s.image_t1)
        flipped = apply_geometric(apply_geometric(s, 0, True, False), 0, True, False)
        assert np.array_equal(flipped.sem_t1, s.sem_t1)
        once = apply_geometric(s, 1, False, False)
        assert once.image_t1.shape == (8, 12, 3)


class TestSynth:
    def test_deterministic(self):
        cfg = SynthConfig(n_samples=2, height=32, width=32, seed=9)
        s1, t1 = generate(cfg)
        s2, t2 = generate(cfg)
        assert np.array_equal(t1.counts, t2.counts)
        for a, b in zip(s1, s2):
            assert np.array_equal(a.image_t1, b.image_t1)
            assert np.array_equal(a.sem_t2, b.sem_t2)

    def test_identity_table_means_no_change(self):
        k = 3
        cfg = SynthConfig(n_samples=3, height=32, width=32, num_classes=k + 1, transition_table=np.eye(k), seed=3)
        samples, tm = generate(cfg)
        assert tm.empty
        for s in samples:
            assert s.change.sum() == 0
            assert s.sem_t1.sum() == 0 and s.sem_t2.sum() == 0

    def test_forced_transition_lands_in_one_cell(self):
        table = np.array([[0.0, 1.0], [0.0, 1.0]])  # everything becomes class 2
        cfg = SynthConfig(n_samples=4, height=32, width=32, num_classes=3, transition_table=table, seed=4)
        _, tm = generate(cfg)
        assert tm.counts[0, 1] > 0
        assert tm.counts[0, 0] == 0 and tm.counts[1, 0] == 0 and tm.counts[1, 1] == 0

    @pytest.mark.parametrize("seed", range(12))
    def test_realized_counts_match_metric_side(self, seed):
        cfg = SynthConfig(n_samples=3, height=24, width=24, num_classes=5, seed=seed)
        samples, tm = generate(cfg)
        acc = None
        for s in samples:
            got = transition_matrix(
                np.where(s.change > 0, s.sem_t1, 0),
                np.where(s.change > 0, s.sem_t2, 0),
                s.change,
                cfg.num_classes,
            )
            acc = got.counts if acc is None else acc + got.counts
        assert np.array_equal(acc, tm.counts)

    def test_samples_validate_and_have_both_states(self):
        cfg = SynthConfig(n_samples=4, height=32, width=32, num_classes=4, seed=11)
        samples, _ = generate(cfg)
        total_change = 0
        for s in samples:
            s.validate(4)
            total_change += int(s.change.sum())
            assert (s.change == 0).any()
        assert total_change > 0

    def test_color_spread_zero_collapses_colors(self):
        quiet = dict(n_samples=2, height=32, width=32, num_classes=4, noise_sigma=0.0,
                     illumination_range=0.0, texture_amplitude=0.0, seed=5)
        flat, _ = generate(SynthConfig(color_spread=0.0, **quiet))
        for s in flat:
            for img in (s.image_t1, s.image_t2):
                assert np.ptp(img.reshape(-1, 3), axis=0).max() == 0.0
        vivid, _ = generate(SynthConfig(**quiet))
        assert any(np.ptp(s.image_t1) > 0.1 for s in vivid)

    def test_texture_varies_inside_otherwise_flat_classes(self):
        quiet = dict(n_samples=2, height=32, width=32, num_classes=4, noise_sigma=0.0,
                     illumination_range=0.0, color_spread=0.0, seed=5)
        textured, _ = generate(SynthConfig(texture_amplitude=0.2, **quiet))
        assert all(np.ptp(s.image_t1) > 0.05 for s in textured)

    def test_unchanged_ground_renders_identically_in_both_timestamps(self):
        cfg = SynthConfig(n_samples=3, height=32, width=32, num_classes=4, noise_sigma=0.0,
                          illumination_range=0.0, texture_amplitude=0.3, seed=9)
        samples, _ = generate(cfg)
        for s in samples:
            same = s.change == 0
            assert same.any()
            assert np.array_equal(s.image_t1[same], s.image_t2[same])

    def test_config_validation(self):
        from scdkit.errors import ConfigError

        with pytest.raises(ConfigError):
            SynthConfig(n_samples=0).validate()
        with pytest.raises(ConfigError):
            SynthConfig(num_classes=1).validate()
        with pytest.raises(ConfigError):
            SynthConfig(transition_table=np.array([[0.5, 0.4], [0.5, 0.5]])).validate()
        with pytest.raises(ConfigError):
            SynthConfig(color_spread=-0.1).validate()

    def test_default_table_rows_normalized(self):
        t = default_transition_table(5)
        assert np.allclose(t.sum(axis=1), 1.0)
        assert t.shape == (4, 4)
