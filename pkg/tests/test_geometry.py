import numpy as np
import pytest
from scipy.integrate import quad

from palm.errors import DegenerateVector, SpecInfeasible
from palm.geometry import (EmbeddingBatch, SyntheticSpec, VmfParams,
                           gen_synthetic, normalize, normalize_jacobian,
                           sample_vmf)


def test_normalize_analytic():
    np.testing.assert_allclose(normalize(np.array([3.0, 4.0])), [0.6, 0.8])


def test_normalize_unit_identity():
    e1 = np.array([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(normalize(e1), e1)


def test_normalize_degenerate():
    with pytest.raises(DegenerateVector):
        normalize(np.array([1e-15, 0.0]))


def test_normalize_idempotent():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.standard_normal(8) * rng.uniform(0.1, 100)
        once = normalize(x)
        np.testing.assert_allclose(normalize(once), once, rtol=0, atol=5e-16)


def test_jacobian_unit_input():
    x = normalize(np.array([1.0, 2.0, -1.0]))
    np.testing.assert_allclose(normalize_jacobian(x),
                               np.eye(3) - np.outer(x, x), atol=1e-15)


def test_jacobian_scaled_basis():
    j = normalize_jacobian(np.array([2.0, 0.0]))
    np.testing.assert_allclose(j, [[0.0, 0.0], [0.0, 0.5]], atol=1e-15)


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(1)
    step = 1e-6
    for _ in range(20):
        x = rng.standard_normal(6) * rng.uniform(0.5, 3.0)
        j = normalize_jacobian(x)
        v = rng.standard_normal(6)
        fd = (normalize(x + step * v) - normalize(x - step * v)) / (2 * step)
        np.testing.assert_allclose(j @ v, fd, rtol=1e-6, atol=1e-9)


def test_jacobian_tangency():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x = rng.standard_normal(5)
        assert np.abs(normalize_jacobian(x) @ x).max() < 1e-12


def test_vmf_uniform_mean_is_small():
    rng = np.random.default_rng(3)
    params = VmfParams(np.eye(8)[0], 0.0)
    s = sample_vmf(params, 10_000, rng)
    assert np.linalg.norm(s.mean(axis=0)) < 0.05


def test_vmf_concentration_limit():
    rng = np.random.default_rng(4)
    mu = normalize(np.arange(1.0, 7.0))
    s = sample_vmf(VmfParams(mu, 1e4), 500, rng)
    assert (s @ mu).min() > 0.99


def test_vmf_unit_norm():
    rng = np.random.default_rng(5)
    mu = normalize(np.ones(12))
    s = sample_vmf(VmfParams(mu, 7.0), 2000, rng)
    np.testing.assert_allclose(np.linalg.norm(s, axis=1), 1.0, atol=1e-9)


def test_vmf_mean_resultant_length_matches_quadrature():
    # The cosine t = mu.z has density prop. to (1-t^2)^((D-3)/2) exp(kappa t);
    # its quadrature mean is an implementation-independent oracle for the
    # empirical mean resultant length (tolerance: 3 standard errors).
    dim, kappa, n = 16, 50.0, 100_000
    power = (dim - 3) / 2.0

    def density(t):
        return (1.0 - t * t) ** power * np.exp(kappa * (t - 1.0))

    z_norm, _ = quad(density, -1.0, 1.0)
    mean_t, _ = quad(lambda t: t * density(t), -1.0, 1.0)
    expected = mean_t / z_norm

    rng = np.random.default_rng(6)
    mu = np.eye(dim)[0]
    s = sample_vmf(VmfParams(mu, kappa), n, rng)
    cos = s @ mu
    se = cos.std(ddof=1) / np.sqrt(n)
    assert abs(cos.mean() - expected) < 3 * se


def test_vmf_deterministic_given_seed():
    mu = np.eye(4)[1]
    a = sample_vmf(VmfParams(mu, 3.0), 100, np.random.default_rng(7))
    b = sample_vmf(VmfParams(mu, 3.0), 100, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)


def _small_spec(**kw):
    base = dict(dim=16, classes=4, modes_per_class=2, kappa_id=50.0,
                ood_directions=4, min_angular_sep=1.0, train_per_class=50,
                test_per_class=25, ood_samples=60, seed=11)
    base.update(kw)
    return SyntheticSpec(**base)


def test_gen_synthetic_single_mode_collapse():
    spec = _small_spec(modes_per_class=1, kappa_id=1e8, train_per_class=20,
                       test_per_class=10, ood_samples=10)
    data = gen_synthetic(spec)
    train = data["id_train"]
    for c in range(spec.classes):
        pts = train.x[train.labels == c]
        # at huge concentration all samples share one direction
        assert (pts @ pts[0]).min() > 0.9999


def test_gen_synthetic_deterministic():
    a = gen_synthetic(_small_spec())
    b = gen_synthetic(_small_spec())
    for key in ("id_train", "id_test", "ood_test"):
        assert a[key].x.tobytes() == b[key].x.tobytes()
        if a[key].labels is not None:
            assert a[key].labels.tobytes() == b[key].labels.tobytes()


def test_gen_synthetic_label_histogram():
    spec = _small_spec()
    data = gen_synthetic(spec)
    counts = np.bincount(data["id_train"].labels, minlength=spec.classes)
    np.testing.assert_array_equal(counts, [spec.train_per_class] * spec.classes)
    counts = np.bincount(data["id_test"].labels, minlength=spec.classes)
    np.testing.assert_array_equal(counts, [spec.test_per_class] * spec.classes)
    assert data["ood_test"].labels is None
    assert len(data["ood_test"]) == spec.ood_samples


def _two_means(pts, rng, iters=30):
    centers = pts[rng.choice(len(pts), 2, replace=False)]
    for _ in range(iters):
        d = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
        assign = d.argmin(axis=1)
        for j in range(2):
            if np.any(assign == j):
                centers[j] = pts[assign == j].mean(axis=0)
    d = ((pts[:, None, :] - centers[None]) ** 2).sum(axis=2)
    assign = d.argmin(axis=1)
    grand = pts.mean(axis=0)
    within = sum(((pts[assign == j] - centers[j]) ** 2).sum() for j in range(2))
    between = sum((assign == j).sum() * ((centers[j] - grand) ** 2).sum()
                  for j in range(2))
    return between / within


def test_gen_synthetic_bimodal_classes():
    data = gen_synthetic(_small_spec(train_per_class=100))
    train = data["id_train"]
    rng = np.random.default_rng(12)
    for c in range(4):
        ratio = _two_means(train.x[train.labels == c], rng)
        assert ratio > 1.0, f"class {c} not bimodal (ratio {ratio:.3f})"


def test_gen_synthetic_all_unit_norm():
    data = gen_synthetic(_small_spec())
    for split in data.values():
        np.testing.assert_allclose(np.linalg.norm(split.x, axis=1), 1.0,
                                   atol=1e-9)


def test_gen_synthetic_infeasible_separation():
    with pytest.raises(SpecInfeasible):
        gen_synthetic(_small_spec(dim=2, classes=8, modes_per_class=4,
                                  min_angular_sep=1.5))


def test_embedding_batch_len():
    b = EmbeddingBatch(x=np.zeros((5, 3)))
    assert len(b) == 5
