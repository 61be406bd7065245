"""BEV histograms, MMD, JSD, Fréchet distances and the evaluation driver."""

import json
import math

import numpy as np
import pytest

from seqlidar.codec import EquirectImage, PointCloud, SensorConfig
from seqlidar.errors import EstimatorError, IngestionError
from seqlidar.metrics import (
    FEATURE_DIM,
    REPORT_HEADER,
    EvalConfig,
    FeatureExtractor,
    bev_histogram,
    compute_metrics,
    evaluate_run,
    feature_moments,
    frechet,
    frechet_from_moments,
    jsd,
    median_bandwidth,
    mmd,
    mmd_squared,
    read_metrics,
    read_pgm,
    write_pgm,
)
from seqlidar.scene import SequenceSample, simulate_sequence, synth_world, write_manifest, write_sample

CFG = SensorConfig()


@pytest.fixture(scope="module")
def reference():
    return [simulate_sequence(synth_world(seed), 4, CFG) for seed in range(6)]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, reference):
    root = tmp_path_factory.mktemp("ref")
    for s in reference:
        write_sample(root, s, CFG)
    write_manifest(root, [s.seed for s in reference])
    return root


def with_frames(sample, x):
    images = [EquirectImage.from_channels(f.astype(np.float32)) for f in x]
    return SequenceSample(sample.seed, images, sample.sketches, sample.priors, sample.caption, sample.boxes)


def corrupt(samples, amplitude, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        x = s.x().astype(np.float64)
        x = np.clip(x + amplitude * rng.standard_normal(x.shape), -1.0, 1.0)
        x[:, 1] = np.clip(x[:, 1], 0.0, 1.0)
        out.append(with_frames(s, x))
    return out


class TestHistogram:
    def test_origin_in_centre_cell(self):
        hist = bev_histogram(PointCloud([[0.0, 0.0, 0.0, 0.5]]))
        assert hist[32, 32] == 1.0 and hist.sum() == 1.0

    def test_boundary_is_excluded(self):
        assert not bev_histogram(PointCloud([[40.0, 0.0, 0.0, 0.1], [0.0, -40.0, 0.0, 0.1]])).any()
        hist = bev_histogram(PointCloud([[-40.0 + 1e-9, 39.999, 0.0, 0.1]]))
        assert hist[0, 63] == 1.0

    def test_indexing_is_x_then_y(self):
        hist = bev_histogram(PointCloud([[10.0, -10.0, 0.0, 0.0]]))
        assert hist[40, 24] == 1.0

    def test_empty(self):
        assert not bev_histogram(PointCloud()).any()

    def test_uniform_cloud_multinomial(self, rng):
        n, G = 100_000, 64
        xy = rng.uniform(-40, 40, (n, 2))
        hist = bev_histogram(np.column_stack([xy, np.zeros((n, 2))]))
        p = 1.0 / G**2
        se = math.sqrt(p * (1 - p) / n)
        assert np.max(np.abs(hist - p)) < 5 * se
        assert abs(hist.sum() - 1.0) < 1e-9


class TestMMD:
    def test_identical_sets(self, rng):
        a = [rng.uniform(size=16) for _ in range(5)]
        # the unbiased estimate of identical sets is 2 S / (m^2 (m-1)) - 2 / m <= 0,
        # S being the off-diagonal kernel sum; the reported value clamps it to zero
        gamma = 0.7
        k = np.exp(-np.sum((np.array(a)[:, None] - np.array(a)[None]) ** 2, -1) / (2 * gamma**2))
        off = k.sum() - 5
        assert abs(mmd_squared(a, list(a), gamma) - (2 * off / (25 * 4) - 2 / 5)) < 1e-12
        assert mmd_squared(a, list(a)) <= 0.0
        assert mmd(a, list(a)) == 0.0
        assert abs(mmd_squared([a[0], a[0]], [a[0], a[0]])) < 1e-9

    def test_closed_form_pair(self):
        a, b = np.array([0.0, 1.0]), np.array([1.0, 0.0])
        gamma = 0.8
        k = math.exp(-2.0 / (2 * gamma**2))
        assert abs(mmd_squared([a, a], [b, b], gamma) - 2 * (1 - k)) < 1e-12
        assert abs(mmd([a, a], [b, b], gamma) - 1e4 * 2 * (1 - k)) < 1e-6

    def test_unbiased_estimator_formula(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
        gamma = 1.3

        def k(u, v):
            return math.exp(-np.sum((u - v) ** 2) / (2 * gamma**2))

        aa = sum(k(a[i], a[j]) for i in range(4) for j in range(4) if i != j) / 12
        bb = sum(k(b[i], b[j]) for i in range(5) for j in range(5) if i != j) / 20
        ab = sum(k(u, v) for u in a for v in b) / 20
        assert abs(mmd_squared(a, b, gamma) - (aa + bb - 2 * ab)) < 1e-12

    def test_median_heuristic(self):
        pts = np.array([[0.0], [1.0], [3.0]])
        assert median_bandwidth(pts) == 2.0
        assert median_bandwidth(np.zeros((3, 2))) == 1.0

    def test_drift_sweep_is_monotone(self, rng):
        base = rng.standard_normal((20, 4))
        ref = rng.standard_normal((20, 4))
        values = [mmd_squared(ref, base + shift, gamma=2.0) for shift in (0.0, 0.5, 1.0, 2.0)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(4, 8)), rng.uniform(size=(6, 8))
        assert abs(mmd_squared(a, b) - mmd_squared(b, a)) < 1e-12

    def test_needs_two_items(self):
        with pytest.raises(EstimatorError):
            mmd([np.zeros(3)], [np.zeros(3), np.ones(3)])


class TestJSD:
    def test_identical(self, rng):
        h = [rng.uniform(size=10) for _ in range(3)]
        assert jsd(h, h) == 0.0

    def test_disjoint_is_one(self):
        assert jsd([np.array([1.0, 0.0])], [np.array([0.0, 1.0])]) == 1.0

    def test_formula_oracle(self):
        p = np.array([0.5, 0.5, 0.0, 0.0])
        q = np.array([0.25, 0.75, 0.0, 0.0])
        m = (p + q) / 2
        expect = 0.5 * sum(pi * math.log2(pi / mi) for pi, mi in zip(p, m) if pi > 0)
        expect += 0.5 * sum(qi * math.log2(qi / mi) for qi, mi in zip(q, m) if qi > 0)
        assert abs(jsd([p], [q]) - expect) < 1e-12

    def test_uses_mean_histograms(self):
        a = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        assert jsd(a, [np.array([0.5, 0.5])]) < 1e-15

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(3, 6)), rng.uniform(size=(2, 6))
        assert abs(jsd(a, b) - jsd(b, a)) < 1e-15

    def test_all_zero_is_an_error(self):
        with pytest.raises(EstimatorError):
            jsd([np.zeros(4)], [np.ones(4)])


class TestFrechet:
    def test_identical_sets(self, rng):
        feats = rng.standard_normal((50, 8))
        assert frechet(feats, feats.copy()) < 1e-6

    def test_scalar_oracle(self):
        assert abs(frechet_from_moments(0.0, 1.0, 1.0, 1.0) - 1.0) < 1e-12

    def test_diagonal_oracle(self):
        got = frechet_from_moments(np.zeros(2), np.diag([1.0, 4.0]), np.zeros(2), np.diag([4.0, 1.0]))
        assert abs(got - 2.0) < 1e-12

    def test_general_matches_scipy_style_formula(self, rng):
        a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
        ca, cb = a @ a.T + 0.1 * np.eye(4), b @ b.T + 0.1 * np.eye(4)
        mu_a, mu_b = rng.standard_normal(4), rng.standard_normal(4)
        # trace of sqrt(ca cb) from the eigenvalues of the (similar) product matrix
        cross = np.sum(np.sqrt(np.linalg.eigvals(ca @ cb).real))
        expect = np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2 * cross
        assert abs(frechet_from_moments(mu_a, ca, mu_b, cb) - expect) < 1e-9

    def test_regularized_covariance(self):
        mu, cov = feature_moments(np.array([[1.0, 2.0], [1.0, 2.0]]))
        np.testing.assert_array_equal(mu, [1.0, 2.0])
        np.testing.assert_allclose(cov, 1e-6 * np.eye(2))

    def test_symmetric(self, rng):
        a, b = rng.standard_normal((30, 5)), rng.standard_normal((40, 5)) + 0.5
        assert abs(frechet(a, b) - frechet(b, a)) < 1e-9

    def test_needs_two_samples(self):
        with pytest.raises(EstimatorError):
            frechet(np.zeros((1, 3)), np.zeros((4, 3)))


class TestFeatureExtractor:
    def test_shapes_and_determinism(self, reference):
        x = reference[0].x()
        a, b = FeatureExtractor(0).frames(x), FeatureExtractor(0).frames(x)
        assert a.shape == (4, FEATURE_DIM) and np.array_equal(a, b)
        assert not np.array_equal(a, FeatureExtractor(1).frames(x))

    def test_frame_features_ignore_order(self, reference):
        x = reference[0].x()
        ext = FeatureExtractor(0)
        np.testing.assert_array_equal(ext.frames(x[::-1]), ext.frames(x)[::-1])

    def test_clip_features_depend_on_order(self, reference):
        ext = FeatureExtractor(0)
        clip = np.stack([reference[1].x()])
        feats = ext.clips(clip)
        assert feats.shape == (1, FEATURE_DIM)
        assert not np.allclose(feats, ext.clips(clip[:, ::-1]))


class TestEvaluation:
    def test_identical_sets_give_zero(self, reference):
        m = compute_metrics(reference, reference)
        assert m["mmd_e4"] == 0.0 and m["jsd"] == 0.0
        assert m["frd"] < 1e-6 and m["fvd"] < 1e-6
        assert m["clip_len"] == 4

    def test_monotone_corruption_sweep(self, reference):
        levels = [compute_metrics(corrupt(reference, a), reference) for a in (0.02, 0.1, 0.3, 0.8)]
        for key in ("mmd_e4", "jsd", "frd", "fvd"):
            values = [m[key] for m in levels]
            assert all(b >= a for a, b in zip(values, values[1:])), (key, values)
            assert values[-1] > values[0]

    def test_noise_separates_from_held_out_baseline(self, reference):
        held_in, held_out = reference[:3], reference[3:]
        rng = np.random.default_rng(0)
        noise = [with_frames(s, np.column_stack([rng.uniform(-1, 1, (4, 1, 32, 128)),
                                                 rng.uniform(0, 1, (4, 1, 32, 128))])) for s in held_out]
        base = compute_metrics(held_out, held_in)
        noisy = compute_metrics(noise, held_in)
        for key in ("mmd_e4", "jsd", "frd", "fvd"):
            assert noisy[key] > base[key], key

    def test_evaluate_run_files(self, dataset, tmp_path):
        out = tmp_path / "eval" / "metrics.txt"
        m = evaluate_run(dataset, dataset, EvalConfig(), out)
        assert m["frd"] < 1e-6 and m["mmd_e4"] == 0.0
        keys = [line.split("=")[0] for line in out.read_text().splitlines()]
        assert keys == ["mmd_e4", "jsd", "frd", "fvd", "n_gen", "n_ref", "extractor_seed"]
        back = read_metrics(out)
        assert back["n_gen"] == 6 and back["frd"] == m["frd"]
        report = (tmp_path / "eval" / "report.txt").read_text()
        assert report.startswith(REPORT_HEADER) and "MMD (x1e4)" in report
        structured = json.loads((tmp_path / "eval" / "metrics.json").read_text())
        assert structured["config"]["clip_len"] == 5

    def test_missing_files_are_listed(self, dataset, tmp_path):
        write_manifest(tmp_path, [0, 1])
        with pytest.raises(IngestionError, match="0/frame_0.l4dt"):
            evaluate_run(tmp_path, dataset)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(0, 3, (5, 7))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (5, 7) and back.max() == 255
    np.testing.assert_array_equal(back, np.round(255 * img / img.max()).astype(np.uint8))
