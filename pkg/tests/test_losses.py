import math

import numpy as np
import pytest

from palm.assignment import WeightTable
from palm.errors import InvalidConfiguration, InvalidInput, NumericalError
from palm.geometry import EmbeddingBatch, normalize, normalize_rows
from palm.losses import (class_posterior, mle_loss, palm_loss,
                         proto_contrast_loss, unsup_swapped_loss)
from palm.prototypes import EmaPathway, PrototypeBank, detach, ema_update, init_uniform

from pipeline import TinyInstance, numeric_gradient, relative_error


def _attached(bank, batch_size):
    # open an empty gradient pathway: attached, but no routes
    return PrototypeBank(bank.prototypes, bank.alpha,
                         EmaPathway(batch_size=batch_size, alpha=bank.alpha))


def _batch(z, labels):
    return EmbeddingBatch(x=z, labels=np.asarray(labels), z=np.asarray(z, dtype=float))


def _naive_mle(z, labels, protos, w, tau):
    # direct transcription of the mixture-posterior loss, no shift trick
    total = 0.0
    for i in range(len(z)):
        num = sum(w[i, labels[i], k] * math.exp(protos[labels[i], k] @ z[i] / tau)
                  for k in range(protos.shape[1]))
        den = sum(w[i, c, k] * math.exp(protos[c, k] @ z[i] / tau)
                  for c in range(protos.shape[0]) for k in range(protos.shape[1]))
        total += -math.log(num / den)
    return total / len(z)


def test_mle_single_class_single_prototype_is_zero():
    rng = np.random.default_rng(0)
    bank = _attached(init_uniform(1, 1, 4, rng), 3)
    z = normalize_rows(rng.standard_normal((3, 4)))
    table = WeightTable(weights=np.ones((3, 1, 1)))
    out = mle_loss(_batch(z, [0, 0, 0]), bank, table, tau=0.1)
    assert abs(out.value) < 1e-15


def test_mle_equidistant_two_classes_is_ln2():
    p0 = np.array([1.0, 0.0, 0.0])
    p1 = np.array([0.0, 1.0, 0.0])
    bank = _attached(PrototypeBank(np.stack([[p0], [p1]]), alpha=0.999), 1)
    z = normalize(np.array([1.0, 1.0, 0.0]))[None, :]
    table = WeightTable(weights=np.ones((1, 2, 1)))
    out = mle_loss(_batch(z, [0]), bank, table, tau=0.1)
    assert abs(out.value - math.log(2.0)) < 1e-12


def test_mle_matches_direct_formula():
    rng = np.random.default_rng(1)
    protos = normalize_rows(rng.standard_normal((6, 8))).reshape(3, 2, 8)
    bank = _attached(PrototypeBank(protos, alpha=0.999), 4)
    z = normalize_rows(rng.standard_normal((4, 8)))
    labels = np.array([0, 1, 2, 1])
    w = rng.uniform(0.05, 1.0, size=(4, 3, 2))
    out = mle_loss(_batch(z, labels), bank, WeightTable(weights=w), tau=0.1)
    assert abs(out.value - _naive_mle(z, labels, protos, w, 0.1)) < 1e-10


def test_mle_zero_numerator_raises():
    rng = np.random.default_rng(2)
    bank = _attached(init_uniform(2, 2, 4, rng), 1)
    z = normalize_rows(rng.standard_normal((1, 4)))
    w = np.ones((1, 2, 2))
    w[0, 0, :] = 0.0  # own-class mass pruned away entirely
    with pytest.raises(NumericalError):
        mle_loss(_batch(z, [0]), bank, WeightTable(weights=w), tau=0.1)


def test_mle_rotation_invariance():
    rng = np.random.default_rng(3)
    protos = normalize_rows(rng.standard_normal((4, 6))).reshape(2, 2, 6)
    z = normalize_rows(rng.standard_normal((5, 6)))
    labels = rng.integers(0, 2, size=5)
    w = rng.uniform(0.1, 1.0, size=(5, 2, 2))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    a = mle_loss(_batch(z, labels), _attached(PrototypeBank(protos, 0.9), 5),
                 WeightTable(weights=w), tau=0.2)
    b = mle_loss(_batch(z @ q.T, labels),
                 _attached(PrototypeBank(protos @ q.T, 0.9), 5),
                 WeightTable(weights=w), tau=0.2)
    assert abs(a.value - b.value) < 1e-10


def _naive_contrast(protos, tau_p):
    c_num, k_num, _ = protos.shape
    total = 0.0
    for c in range(c_num):
        for k in range(k_num):
            num = sum(math.exp(protos[c, k] @ protos[c, kk] / tau_p)
                      for kk in range(k_num) if kk != k)
            den = sum(math.exp(protos[c, k] @ protos[cc, kk] / tau_p)
                      for cc in range(c_num) if cc != c for kk in range(k_num))
            total += -math.log(num / den)
    return total / (c_num * k_num)


def test_contrast_orthogonal_prototypes_is_ln2():
    protos = np.eye(4).reshape(2, 2, 4)
    out = proto_contrast_loss(_attached(PrototypeBank(protos, 0.999), 1), 0.5)
    assert abs(out.value - math.log(2.0)) < 1e-12


def test_contrast_identical_prototypes_closed_form():
    c_num, k_num = 3, 4
    p = normalize(np.arange(1.0, 6.0))
    protos = np.tile(p, (c_num, k_num, 1))
    out = proto_contrast_loss(_attached(PrototypeBank(protos, 0.999), 1), 0.5)
    expected = -math.log((k_num - 1) / ((c_num - 1) * k_num))
    assert abs(out.value - expected) < 1e-12


def test_contrast_matches_direct_formula():
    rng = np.random.default_rng(4)
    protos = normalize_rows(rng.standard_normal((12, 7))).reshape(3, 4, 7)
    out = proto_contrast_loss(_attached(PrototypeBank(protos, 0.999), 1), 0.5)
    assert abs(out.value - _naive_contrast(protos, 0.5)) < 1e-10


def test_contrast_requires_two_classes_and_prototypes():
    rng = np.random.default_rng(5)
    with pytest.raises(InvalidConfiguration):
        proto_contrast_loss(init_uniform(1, 3, 4, rng), 0.5)
    with pytest.raises(InvalidConfiguration):
        proto_contrast_loss(init_uniform(3, 1, 4, rng), 0.5)


def test_contrast_detached_bank_has_no_embedding_gradient():
    rng = np.random.default_rng(6)
    bank = init_uniform(2, 2, 5, rng)
    out = proto_contrast_loss(bank, 0.5)
    assert out.grad_z is None


def test_contrast_gradient_matches_fd_through_prototypes():
    rng = np.random.default_rng(7)
    protos = normalize_rows(rng.standard_normal((6, 4))).reshape(3, 2, 4)
    out = proto_contrast_loss(_attached(PrototypeBank(protos, 0.9), 1), 0.5)
    grad = out.diagnostics["grad_prototypes"]
    step = 1e-6
    for c in range(3):
        for k in range(2):
            for d in range(4):
                pp = protos.copy()
                pp[c, k, d] += step
                pm = protos.copy()
                pm[c, k, d] -= step
                fd = (_naive_contrast(pp, 0.5) - _naive_contrast(pm, 0.5)) / (2 * step)
                assert abs(grad[c, k, d] - fd) < 1e-7


def test_palm_lambda_zero_equals_mle():
    rng = np.random.default_rng(8)
    inst_bank = init_uniform(2, 2, 4, rng)
    z = normalize_rows(rng.standard_normal((4, 4)))
    labels = np.array([0, 1, 0, 1])
    table = WeightTable(weights=rng.uniform(0.1, 1.0, size=(4, 2, 2)))
    bank, _ = ema_update(inst_bank, z, labels, table)
    batch = _batch(z, labels)
    a = palm_loss(batch, bank, table, 0.1, 0.5, 0.0)
    b = mle_loss(batch, bank, table, 0.1)
    assert a.value == b.value
    np.testing.assert_array_equal(a.grad_z, b.grad_z)


def test_palm_combines_values_and_gradients():
    rng = np.random.default_rng(9)
    inst_bank = init_uniform(2, 2, 4, rng)
    z = normalize_rows(rng.standard_normal((4, 4)))
    labels = np.array([0, 1, 0, 1])
    table = WeightTable(weights=rng.uniform(0.1, 1.0, size=(4, 2, 2)))
    bank, _ = ema_update(inst_bank, z, labels, table)
    batch = _batch(z, labels)
    combined = palm_loss(batch, bank, table, 0.1, 0.5, 1.0)
    m = mle_loss(batch, bank, table, 0.1)
    c = proto_contrast_loss(bank, 0.5)
    assert abs(combined.value - (m.value + c.value)) < 1e-12
    np.testing.assert_allclose(combined.grad_z, m.grad_z + c.grad_z, atol=1e-12)


def test_palm_single_prototype_skips_contrast():
    rng = np.random.default_rng(10)
    inst_bank = init_uniform(2, 1, 4, rng)
    z = normalize_rows(rng.standard_normal((4, 4)))
    labels = np.array([0, 1, 0, 1])
    table = WeightTable(weights=np.full((4, 2, 1), 1.0))
    bank, _ = ema_update(inst_bank, z, labels, table)
    out = palm_loss(_batch(z, labels), bank, table, 0.1, 0.5, 1.0)
    assert out.diagnostics["proto_contra"] == 0.0
    assert np.isfinite(out.value)


def test_posterior_single_class():
    rng = np.random.default_rng(11)
    bank = init_uniform(1, 3, 4, rng)
    z = normalize_rows(rng.standard_normal((1, 4)))[0]
    p = class_posterior(z, bank, np.full((1, 3), 1 / 3), 0.1)
    np.testing.assert_array_equal(p, [1.0])


def test_posterior_symmetric_classes():
    protos = np.stack([[np.array([1.0, 0.0, 0.0])],
                       [np.array([0.0, 1.0, 0.0])]])
    bank = PrototypeBank(protos, 0.999)
    z = normalize(np.array([1.0, 1.0, 0.0]))
    p = class_posterior(z, bank, np.full((2, 1), 1.0), 0.1)
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-12)


def test_posterior_matches_direct_formula_and_sums_to_one():
    rng = np.random.default_rng(12)
    protos = normalize_rows(rng.standard_normal((6, 5))).reshape(3, 2, 5)
    bank = PrototypeBank(protos, 0.999)
    z = normalize_rows(rng.standard_normal((1, 5)))[0]
    w = rng.uniform(0.05, 1.0, size=(3, 2))
    p = class_posterior(z, bank, w, 0.1)
    direct = np.array([
        sum(w[c, k] * math.exp(protos[c, k] @ z / 0.1) for k in range(2))
        for c in range(3)])
    direct /= direct.sum()
    np.testing.assert_allclose(p, direct, atol=1e-12)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0)


def test_posterior_rejects_zero_weights():
    rng = np.random.default_rng(13)
    bank = init_uniform(2, 2, 4, rng)
    z = normalize_rows(rng.standard_normal((1, 4)))[0]
    with pytest.raises(NumericalError):
        class_posterior(z, bank, np.zeros((2, 2)), 0.1)


def _naive_swapped(z, z_aug, w_for_z, w_for_aug, protos, tau):
    n, k_num = w_for_z.shape

    def ell(v, w):
        num = sum(w[k] * math.exp(protos[k] @ v / tau) for k in range(k_num))
        den = sum(math.exp(protos[k] @ v / tau) for k in range(k_num))
        return -math.log(num / den)

    return sum(0.5 * (ell(z[i], w_for_z[i]) + ell(z_aug[i], w_for_aug[i]))
               for i in range(n)) / n


def test_swapped_single_prototype_is_zero():
    rng = np.random.default_rng(14)
    bank = init_uniform(1, 1, 4, rng)
    z = normalize_rows(rng.standard_normal((3, 4)))
    w = np.ones((3, 1))
    out = unsup_swapped_loss(z, z, w, w, bank, 0.1)
    assert abs(out.value) < 1e-15


def test_swapped_identical_views_reduce_to_plain_loss():
    rng = np.random.default_rng(15)
    bank = init_uniform(1, 3, 5, rng)
    z = normalize_rows(rng.standard_normal((4, 5)))
    w = rng.uniform(0.1, 1.0, size=(4, 3))
    w /= w.sum(axis=1, keepdims=True)
    out = unsup_swapped_loss(z, z, w, w, bank, 0.1)
    expected = _naive_swapped(z, z, w, w, bank.prototypes[0], 0.1)
    assert abs(out.value - expected) < 1e-10


def test_swapped_matches_direct_formula():
    rng = np.random.default_rng(16)
    bank = init_uniform(1, 4, 6, rng)
    z = normalize_rows(rng.standard_normal((5, 6)))
    z_aug = normalize_rows(z + 0.05 * rng.standard_normal((5, 6)))
    w1 = rng.uniform(0.1, 1.0, size=(5, 4))
    w2 = rng.uniform(0.1, 1.0, size=(5, 4))
    out = unsup_swapped_loss(z, z_aug, w1, w2, bank, 0.1)
    expected = _naive_swapped(z, z_aug, w1, w2, bank.prototypes[0], 0.1)
    assert abs(out.value - expected) < 1e-10


def test_swapped_misaligned_views_rejected():
    rng = np.random.default_rng(17)
    bank = init_uniform(1, 2, 4, rng)
    z = normalize_rows(rng.standard_normal((3, 4)))
    with pytest.raises(InvalidInput):
        unsup_swapped_loss(z, z[:2], np.ones((3, 2)), np.ones((3, 2)), bank, 0.1)


def test_swapped_gradients_match_fd():
    rng = np.random.default_rng(18)
    bank = init_uniform(1, 3, 4, rng)
    z = normalize_rows(rng.standard_normal((3, 4)))
    z_aug = normalize_rows(rng.standard_normal((3, 4)))
    w1 = rng.uniform(0.1, 1.0, size=(3, 3))
    w2 = rng.uniform(0.1, 1.0, size=(3, 3))
    out = unsup_swapped_loss(z, z_aug, w1, w2, bank, 0.3)
    protos = bank.prototypes[0]
    step = 1e-6
    for i in range(3):
        for d in range(4):
            zp = z.copy(); zp[i, d] += step
            zm = z.copy(); zm[i, d] -= step
            fd = (_naive_swapped(zp, z_aug, w1, w2, protos, 0.3)
                  - _naive_swapped(zm, z_aug, w1, w2, protos, 0.3)) / (2 * step)
            assert abs(out.grad_z[i, d] - fd) < 1e-8
            ap = z_aug.copy(); ap[i, d] += step
            am = z_aug.copy(); am[i, d] -= step
            fd = (_naive_swapped(z, ap, w1, w2, protos, 0.3)
                  - _naive_swapped(z, am, w1, w2, protos, 0.3)) / (2 * step)
            assert abs(out.diagnostics["grad_z_aug"][i, d] - fd) < 1e-8


def test_full_pipeline_gradient_smoke():
    rng = np.random.default_rng(19)
    inst = TinyInstance(rng)
    from pipeline import flatten_params
    analytic = inst.analytic_gradient()
    numeric = numeric_gradient(inst.loss_value, flatten_params(inst.model))
    assert relative_error(analytic, numeric).max() < 1e-4
