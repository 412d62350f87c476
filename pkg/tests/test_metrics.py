import numpy as np
import pytest

from spikegan import tensor as T
from spikegan.data import ImageDataset, normalize
from spikegan.errors import MetricError
from spikegan.metrics import (ExtractorGateError, FeatureStats, ReportError, SqrtConvergenceError,
                              extractor_fingerprint, feature_stats, frechet_distance, gradnorm_report,
                              jacobi_eigh, load_extractor, load_stats, matrix_sqrt_psd, quarter_means,
                              save_extractor, save_stats, train_proxy_extractor)
from spikegan.training import RunTelemetry, TelemetryRow


def rel_frobenius(R, M):
    return np.linalg.norm(R @ R - M) / np.linalg.norm(M)


# ---------------------------------------------------------------- matrix square root

def test_sqrt_identity():
    np.testing.assert_allclose(matrix_sqrt_psd(np.eye(5)), np.eye(5), atol=1e-15)


def test_sqrt_diagonal():
    np.testing.assert_allclose(matrix_sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)


def test_sqrt_random_psd_d8():
    A = np.random.default_rng(0).standard_normal((8, 8))
    M = A.T @ A
    R = matrix_sqrt_psd(M)
    assert rel_frobenius(R, M) < 1e-6
    np.testing.assert_allclose(R, R.T, atol=0)
    assert np.all(np.linalg.eigvalsh(R) > -1e-9)


def test_sqrt_rank_deficient():
    A = np.random.default_rng(1).standard_normal((3, 10))
    M = A.T @ A  # rank 3
    assert rel_frobenius(matrix_sqrt_psd(M), M) < 1e-6


def test_sqrt_errors():
    with pytest.raises(ValueError, match="square"):
        matrix_sqrt_psd(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="symmetric"):
        matrix_sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(MetricError, match="positive semi-definite"):
        matrix_sqrt_psd(np.diag([1.0, -1.0]))


def test_jacobi_non_convergence_reports_diagnostics():
    A = np.random.default_rng(2).standard_normal((6, 6))
    with pytest.raises(SqrtConvergenceError, match="sweeps") as err:
        jacobi_eigh(A + A.T, max_sweeps=1)
    assert "off-diagonal" in str(err.value)


def test_jacobi_matches_reference_eigenvalues():
    A = np.random.default_rng(3).standard_normal((12, 12))
    M = A + A.T
    w, Q = jacobi_eigh(M)
    np.testing.assert_allclose(np.sort(w), np.linalg.eigvalsh(M), atol=1e-10)
    np.testing.assert_allclose(Q @ np.diag(w) @ Q.T, M, atol=1e-10)


# ---------------------------------------------------------------- Frechet distance

def stats(mu, sigma, n=100):
    return FeatureStats(np.asarray(mu, float), np.asarray(sigma, float), n)


def test_fid_identical_is_zero():
    A = np.random.default_rng(4).standard_normal((6, 6))
    s = stats(np.arange(6.0), A @ A.T)
    assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-6)


def test_fid_shifted_unit_gaussians():
    m = np.random.default_rng(5).standard_normal(16)
    d = frechet_distance(stats(np.zeros(16), np.eye(16)), stats(m, np.eye(16)))
    assert d == pytest.approx(float(m @ m), abs=1e-6)


def test_fid_scalar_closed_form():
    assert frechet_distance(stats([0.0], [[4.0]]), stats([0.0], [[1.0]])) == pytest.approx(1.0, abs=1e-6)


def test_fid_is_symmetric():
    rng = np.random.default_rng(6)
    A, B = rng.standard_normal((2, 10, 10))
    a, b = stats(rng.standard_normal(10), A @ A.T), stats(rng.standard_normal(10), B @ B.T)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-6)
    assert frechet_distance(a, b) > 0


def test_fid_dimension_mismatch():
    with pytest.raises(ValueError, match="dimensions"):
        frechet_distance(stats([0.0], [[1.0]]), stats([0.0, 0.0], np.eye(2)))


def test_feature_stats_validation():
    with pytest.raises(ValueError):
        FeatureStats(np.zeros(2), np.zeros((3, 3)), 5)
    with pytest.raises(ValueError):
        FeatureStats(np.zeros(2), np.array([[1.0, 1.0], [0.0, 1.0]]), 5)


# ---------------------------------------------------------------- feature_stats

class Passthrough:
    """Stand-in extractor whose features are the flattened pixels."""

    def features(self, x):
        return T.flatten(x)


def test_feature_stats_hand_variance():
    s = feature_stats(np.array([[[[0.0]]], [[[2.0]]]], np.float32), Passthrough())
    assert s.mu.shape == (1,) and s.sigma.shape == (1, 1) and s.n == 2
    assert s.mu[0] == 1.0 and s.sigma[0, 0] == 2.0


def test_feature_stats_identical_images():
    img = np.random.default_rng(7).uniform(-1, 1, (1, 1, 2, 3)).astype(np.float32)
    with pytest.warns(UserWarning, match="rank deficient"):
        s = feature_stats(np.concatenate([img, img]), Passthrough())
    assert s.mu.shape == (6,) and s.sigma.shape == (6, 6)
    np.testing.assert_array_equal(s.sigma, 0)


def test_feature_stats_needs_two_images():
    with pytest.raises(ValueError, match="at least 2"):
        feature_stats(np.zeros((1, 1, 2, 2), np.float32), Passthrough())


def test_feature_stats_warns_when_rank_deficient():
    with pytest.warns(UserWarning, match="rank deficient"):
        feature_stats(np.zeros((3, 1, 2, 2), np.float32), Passthrough())


def test_stats_cache_round_trip(tmp_path):
    x = np.random.default_rng(8).uniform(-1, 1, (20, 1, 2, 2)).astype(np.float32)
    s = feature_stats(x, Passthrough())
    save_stats(tmp_path / "s.ckpt", s, {"dataset": "toy"})
    back, meta = load_stats(tmp_path / "s.ckpt")
    assert meta == {"dataset": "toy"} and back.n == 20
    np.testing.assert_array_equal(back.mu, s.mu)
    np.testing.assert_array_equal(back.sigma, s.sigma)


# ---------------------------------------------------------------- extractor

def test_extractor_passes_gate(extractor_path):
    model = load_extractor(extractor_path)
    assert model.feature_dim == 64 and not any(p.requires_grad for p in model.parameters())


def test_extractor_is_deterministic(mnist, extractor):
    small = mnist.subset(300)
    a, _ = train_proxy_extractor(small, seed=3, epochs=1, gate=0.0)
    b, _ = train_proxy_extractor(small, seed=3, epochs=1, gate=0.0)
    assert extractor_fingerprint(a) == extractor_fingerprint(b)
    x, y = normalize(mnist.images[:100]), normalize(mnist.images[100:200])
    first = frechet_distance(feature_stats(x, extractor), feature_stats(y, extractor))
    assert first == frechet_distance(feature_stats(x, extractor), feature_stats(y, extractor))


def test_real_splits_are_closer_than_noise(mnist, extractor):
    a = feature_stats(normalize(mnist.images[:1000]), extractor)
    b = feature_stats(normalize(mnist.images[1000:2000]), extractor)
    noise = np.random.default_rng(9).uniform(-1, 1, (1000, 1, 28, 28)).astype(np.float32)
    real_vs_real = frechet_distance(a, b)
    real_vs_noise = frechet_distance(a, feature_stats(noise, extractor))
    assert real_vs_noise >= 5 * real_vs_real, (real_vs_real, real_vs_noise)


def test_fid_decreases_along_a_pixel_mix(mnist, extractor):
    real = normalize(mnist.images[:1000]).data
    target = feature_stats(real, extractor)
    fake = np.random.default_rng(10).uniform(-1, 1, real.shape).astype(np.float32)
    scores = [frechet_distance(target, feature_stats((1 - w) * fake + w * real, extractor))
              for w in (0.0, 0.5, 1.0)]
    assert scores[0] >= scores[1] >= scores[2], scores


def test_extractor_gate_failures(tmp_path, mnist):
    with pytest.raises(ExtractorGateError, match="no extractor"):
        load_extractor(tmp_path / "absent.ckpt")
    small = mnist.subset(100)
    with pytest.raises(ExtractorGateError, match="gate"):
        train_proxy_extractor(small, epochs=1, gate=1.01)
    model, acc = train_proxy_extractor(small, epochs=1, gate=0.0)
    save_extractor(model, tmp_path / "weak.ckpt", 0.5)
    with pytest.raises(ExtractorGateError, match="accuracy"):
        load_extractor(tmp_path / "weak.ckpt")
    with pytest.raises(ExtractorGateError, match="labelled"):
        train_proxy_extractor(ImageDataset(small.images, None, "unlabelled"))
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    with pytest.raises(ExtractorGateError, match="unreadable"):
        load_extractor(tmp_path / "junk.ckpt")


# ---------------------------------------------------------------- gradient report

def telemetry(norms):
    return RunTelemetry([TelemetryRow(i + 1, 0.0, 0.0, float(g), 1.0, 1e-4) for i, g in enumerate(norms)])


def test_gradreport_single_file_passthrough(tmp_path):
    path = tmp_path / "a.csv"
    telemetry([1.0, 2.0, 3.0]).write_csv(path)
    report = gradnorm_report([path])
    np.testing.assert_array_equal(report.norms[:, 0], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(report.epochs, [1, 2, 3])
    assert report.labels == [str(path)]


def test_gradreport_ratio_column():
    report = gradnorm_report([telemetry([1.0] * 8), telemetry([2.0] * 8)], ["a", "b"])
    np.testing.assert_array_equal(report.ratios[:, 1], 2.0)
    assert "ratio_b" in report.format().splitlines()[0]
    assert report.verdicts() == ["final quarter: b (2) > a (1)"]


def test_gradreport_mean_example():
    assert gradnorm_report([telemetry([1.0, 2.0, 3.0])]).means[0] == 2.0


def test_quarter_means():
    np.testing.assert_array_equal(quarter_means(np.arange(1.0, 9.0)), [1.5, 3.5, 5.5, 7.5])
    q = quarter_means([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(q[:3], [1.0, 2.0, 3.0])
    assert np.isnan(q[3])
    # short runs fall back to whole-run means
    assert gradnorm_report([telemetry([1.0, 2.0, 3.0])]).final[0] == 2.0
    with pytest.raises(ReportError):
        quarter_means([])


def test_gradreport_rejects_misaligned_epochs(tmp_path):
    with pytest.raises(ReportError, match="align"):
        gradnorm_report([telemetry([1.0] * 4), telemetry([1.0] * 5)], ["a", "b"])
    with pytest.raises(ReportError, match="cannot read"):
        gradnorm_report([tmp_path / "absent.csv"])
    with pytest.raises(ReportError):
        gradnorm_report([])
