"""Synthetic domain generator and dataset file format."""

import numpy as np
import pytest

from amel.data import (
    DomainRelevanceKnob,
    DomainSpec,
    Dataset,
    build_dataset,
    default_source_specs,
    generate_domain,
    make_benchmark,
    perturb_spec,
    read_dataset,
    write_dataset,
)
from amel.errors import ConfigError, DataFormatError


def spec(seed=7, **kw):
    base = dict(
        domain_id=0,
        color_gain=(1.1, 0.9, 1.0),
        color_bias=(0.05, 0.0, 0.0),
        blur_radius=0.5,
        texture_freq=4.0,
        grid_period=5.0,
        grid_amplitude=0.25,
        rng_seed=seed,
    )
    base.update(kw)
    return DomainSpec(**base)


class TestGenerateDomain:
    def test_label_counts(self):
        samples = generate_domain(spec(), n_live=3, n_spoof=5, image_hw=16, depth_hw=8)
        labels = [s.label for s in samples]
        assert labels.count(1) == 3 and labels.count(0) == 5

    def test_no_live_all_spoof_labels(self):
        samples = generate_domain(spec(), n_live=0, n_spoof=4, image_hw=16, depth_hw=8)
        assert all(s.label == 0 for s in samples)

    def test_deterministic_bit_identical(self):
        a = generate_domain(spec(), 4, 4, image_hw=16, depth_hw=8)
        b = generate_domain(spec(), 4, 4, image_hw=16, depth_hw=8)
        for s, t in zip(a, b):
            np.testing.assert_array_equal(s.image, t.image)
            np.testing.assert_array_equal(s.depth, t.depth)
            assert s.label == t.label

    def test_image_range_and_dtype(self):
        for s in generate_domain(spec(), 5, 5, image_hw=16, depth_hw=8):
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.shape == (3, 16, 16)

    def test_depth_invariants(self):
        for s in generate_domain(spec(), 6, 6, image_hw=16, depth_hw=8):
            if s.label == 1:
                assert s.depth.max() == 1.0
                assert (s.depth >= 0).all()
            else:
                assert (s.depth == 0).all()

    def test_mean_intensity_monotone_in_gain(self):
        means = []
        for gain in (0.5, 1.0, 1.5):
            s = spec(color_gain=(gain, gain, gain))
            samples = generate_domain(s, 50, 50, image_hw=16, depth_hw=8)
            means.append(np.mean([x.image.mean() for x in samples]))
        assert means[0] < means[1] < means[2]

    def test_negative_counts_rejected(self):
        with pytest.raises(ConfigError):
            generate_domain(spec(), -1, 0)

    def test_invalid_gain_rejected(self):
        with pytest.raises(ConfigError, match="color_gain"):
            generate_domain(spec(color_gain=(0.0, 1.0, 1.0)), 1, 1)


class TestBenchmark:
    def test_sizes_respected(self):
        ds = make_benchmark(2, DomainRelevanceKnob(), n_live=7, n_spoof=5, image_hw=16, depth_hw=8)
        assert ds.num_domains == 3  # 2 sources + target
        for d in ds.domains:
            assert d.size == 12
            assert (d.labels == 1).sum() == 7

    def test_delta_zero_clones_distribution(self):
        ds = make_benchmark(
            3, DomainRelevanceKnob(source_index=1, delta=0.0),
            n_live=500, n_spoof=500, image_hw=16, depth_hw=8, seed=3,
        )
        src = ds.domains[1].images.mean(axis=0)
        tgt = ds.domains[3].images.mean(axis=0)
        assert np.abs(src - tgt).mean() < 1e-2
        s, t = ds.domains[1].spec, ds.domains[3].spec
        assert s.color_gain == t.color_gain
        assert s.grid_period == t.grid_period
        assert s.rng_seed != t.rng_seed

    def test_delta_moves_target_away(self):
        knob0 = DomainRelevanceKnob(source_index=0, delta=0.0)
        knob1 = DomainRelevanceKnob(source_index=0, delta=1.0)
        near = make_benchmark(2, knob0, 50, 50, image_hw=16, depth_hw=8).domains[-1]
        far = make_benchmark(2, knob1, 50, 50, image_hw=16, depth_hw=8).domains[-1]
        src = make_benchmark(2, knob0, 50, 50, image_hw=16, depth_hw=8).domains[0]
        d_near = abs(near.images.mean() - src.images.mean())
        d_far = abs(far.images.mean() - src.images.mean())
        assert d_far > d_near

    def test_styles_well_separated(self):
        # pairwise mean-style distance exceeds 3x the within-domain spread,
        # measured on per-channel mean-intensity style vectors
        ds = build_dataset(default_source_specs(3), 100, 100, image_hw=16, depth_hw=8)
        styles = [d.images.mean(axis=(2, 3)) for d in ds.domains]
        means = [s.mean(axis=0) for s in styles]
        spreads = [np.linalg.norm(s.std(axis=0)) for s in styles]
        for i in range(3):
            for j in range(i + 1, 3):
                dist = np.linalg.norm(means[i] - means[j])
                assert dist > 3.0 * max(spreads[i], spreads[j])

    def test_linear_probe_separates_domains(self):
        from sklearn.linear_model import LogisticRegression

        ds = build_dataset(default_source_specs(3), 100, 100, image_hw=16, depth_hw=8)
        X = np.concatenate([d.images.reshape(d.size, -1) for d in ds.domains])
        y = np.concatenate([np.full(d.size, i) for i, d in enumerate(ds.domains)])
        rng = np.random.default_rng(0)
        idx = rng.permutation(len(y))
        X, y = X[idx], y[idx]
        n = len(y) // 2
        clf = LogisticRegression(max_iter=200).fit(X[:n], y[:n])
        assert clf.score(X[n:], y[n:]) > 0.9

    def test_source_index_validated(self):
        with pytest.raises(ConfigError, match="relevance_source"):
            make_benchmark(2, DomainRelevanceKnob(source_index=5), 4, 4, image_hw=16, depth_hw=8)

    def test_perturb_delta_zero_identity_fields(self):
        s = spec()
        p = perturb_spec(s, 0.0, new_id=9, new_seed=123)
        assert p.color_gain == s.color_gain
        assert p.grid_period == s.grid_period
        assert p.domain_id == 9 and p.rng_seed == 123


class TestDatasetSampling:
    def test_sample_batch_shapes(self):
        ds = build_dataset(default_source_specs(2), 10, 10, image_hw=16, depth_hw=8)
        images, labels, depths = ds.sample_batch(0, 6, np.random.default_rng(0))
        assert images.shape == (6, 3, 16, 16)
        assert labels.shape == (6,)
        assert depths.shape == (6, 1, 8, 8)

    def test_subset_reindexes(self):
        ds = build_dataset(default_source_specs(3), 4, 4, image_hw=16, depth_hw=8)
        sub = ds.subset([2, 0])
        assert sub.num_domains == 2
        np.testing.assert_array_equal(sub.domains[0].images, ds.domains[2].images)


class TestFileFormat:
    def test_roundtrip_bit_identical(self, tmp_path):
        ds = build_dataset(default_source_specs(2), 5, 3, image_hw=16, depth_hw=8)
        path = tmp_path / "data.amel"
        write_dataset(ds, path)
        back = read_dataset(path)
        assert back.num_domains == ds.num_domains
        assert back.image_hw == 16 and back.depth_hw == 8
        for a, b in zip(ds.domains, back.domains):
            np.testing.assert_array_equal(a.images, b.images)
            np.testing.assert_array_equal(a.labels, b.labels)
            np.testing.assert_array_equal(a.depths, b.depths)
            assert a.spec == b.spec

    def test_write_is_deterministic(self, tmp_path):
        ds = build_dataset(default_source_specs(2), 3, 3, image_hw=16, depth_hw=8)
        p1, p2 = tmp_path / "a.amel", tmp_path / "b.amel"
        write_dataset(ds, p1)
        write_dataset(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.amel"
        path.write_bytes(b"NOTDATA" + b"\x00" * 30)
        with pytest.raises(DataFormatError, match="bad magic"):
            read_dataset(path)

    def test_truncated_file_names_section(self, tmp_path):
        ds = build_dataset(default_source_specs(2), 3, 3, image_hw=16, depth_hw=8)
        path = tmp_path / "data.amel"
        write_dataset(ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 100])
        with pytest.raises(DataFormatError, match="unexpected end.*sample"):
            read_dataset(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "data.amel"
        path.write_bytes(b"AMELDS1" + b"\x01\x00")
        with pytest.raises(DataFormatError, match="unexpected end.*header"):
            read_dataset(path)
