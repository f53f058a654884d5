import math

import numpy as np
import pytest
import torch

from gradtools import check_grad
from segadapt.edik import EPS
from segadapt.errors import ParameterError
from segadapt.ldsk import (
    PrototypeMode,
    PrototypeSet,
    PrototypeStore,
    estimate_prototypes,
    loss_pe,
    loss_ps,
    reference_distribution,
    reference_labels,
)


def _protos(vectors, present=None):
    v = torch.tensor(vectors, dtype=torch.float64)
    if present is None:
        present = (v != 0).any(dim=1)
    return PrototypeSet(vectors=v, present=torch.as_tensor(present))


def test_prototype_is_class_mean():
    # two pixels of class 0 with features (1,0) and (3,0) -> prototype (2,0)
    f = torch.tensor([[[1.0, 3.0]], [[0.0, 0.0]]])   # (D=2, h=1, w=2)
    p = torch.tensor([[[0.9, 0.8]], [[0.1, 0.2]]])   # both pixels argmax class 0
    protos = estimate_prototypes(f, p)
    assert torch.allclose(protos.vectors[0], torch.tensor([2.0, 0.0]))
    assert protos.present.tolist() == [True, False]
    assert torch.equal(protos.vectors[1], torch.zeros(2))


def test_prototypes_match_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        d, c, h, w = 4, 3, 8, 8
        f = rng.normal(size=(d, h, w))
        p = rng.dirichlet(np.ones(c), size=(h, w)).transpose(2, 0, 1)
        protos = estimate_prototypes(torch.from_numpy(f), torch.from_numpy(p))
        lab = np.argmax(p, axis=0)
        for cls in range(c):
            mask = lab == cls
            if mask.sum() == 0:
                assert not protos.present[cls]
                continue
            mean = f[:, mask].mean(axis=1)
            assert np.allclose(protos.vectors[cls].numpy(), mean, atol=1e-10)


def test_prototype_inside_feature_hull():
    rng = np.random.default_rng(1)
    f = torch.from_numpy(rng.random((4, 6, 6)))
    p = torch.from_numpy(rng.dirichlet(np.ones(3), size=(6, 6)).transpose(2, 0, 1))
    protos = estimate_prototypes(f, p)
    for cls in range(3):
        if protos.present[cls]:
            v = protos.vectors[cls]
            assert (v >= f.amin(dim=(1, 2)) - 1e-12).all()
            assert (v <= f.amax(dim=(1, 2)) + 1e-12).all()


def test_prototype_shape_validation():
    with pytest.raises(ParameterError):
        estimate_prototypes(torch.zeros(4, 8, 8), torch.zeros(3, 4, 4))


def test_reference_distribution_hand_cases():
    protos = _protos([[1.0, 0.0], [0.0, 1.0]])
    # aligned with prototype 0
    p = reference_distribution(torch.tensor([[[1.0]], [[0.0]]], dtype=torch.float64), protos)
    assert torch.allclose(p[:, 0, 0], torch.tensor([1.0, 0.0], dtype=torch.float64))
    # equidistant
    p = reference_distribution(torch.tensor([[[1.0]], [[1.0]]], dtype=torch.float64), protos)
    assert torch.allclose(p[:, 0, 0], torch.tensor([0.5, 0.5], dtype=torch.float64))
    # zero feature: uniform fallback over present classes
    p = reference_distribution(torch.zeros(2, 1, 1, dtype=torch.float64), protos)
    assert torch.allclose(p[:, 0, 0], torch.tensor([0.5, 0.5], dtype=torch.float64))


def test_reference_distribution_absent_class_gets_zero():
    protos = _protos([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]],
                     present=[True, False, True])
    f = torch.tensor([[[2.0]], [[1.0]]], dtype=torch.float64)
    p = reference_distribution(f, protos)
    assert p[1, 0, 0].item() == 0.0
    assert p[:, 0, 0].sum().item() == pytest.approx(1.0, abs=1e-12)
    assert p[0, 0, 0].item() == pytest.approx(2.0 / 3.0, abs=1e-12)


def test_reference_distribution_single_present_class():
    protos = _protos([[1.0, 1.0], [0.0, 0.0]], present=[True, False])
    f = torch.rand(2, 3, 3, dtype=torch.float64) + 0.1
    p = reference_distribution(f, protos)
    assert torch.allclose(p[0], torch.ones(3, 3, dtype=torch.float64))
    assert torch.equal(p[1], torch.zeros(3, 3, dtype=torch.float64))


def test_reference_distribution_is_simplex_and_scale_free():
    rng = np.random.default_rng(3)
    f = torch.from_numpy(rng.random((4, 5, 5)) + 0.05)
    protos = _protos(rng.random((3, 4)) + 0.05)
    p = reference_distribution(f, protos)
    assert (p >= 0).all()
    assert torch.allclose(p.sum(dim=0), torch.ones(5, 5, dtype=torch.float64), atol=1e-12)
    p_scaled = reference_distribution(3.7 * f, protos)
    assert torch.allclose(p, p_scaled, atol=1e-12)


def test_reference_distribution_negative_similarity_clamped():
    protos = _protos([[1.0, 0.0], [-1.0, 0.0]], present=[True, True])
    f = torch.tensor([[[1.0]], [[0.0]]], dtype=torch.float64)
    p = reference_distribution(f, protos)
    # class 1 similarity is -1 -> clamped to 0
    assert torch.allclose(p[:, 0, 0], torch.tensor([1.0, 0.0], dtype=torch.float64))


def test_reference_distribution_no_present_classes_rejected():
    protos = _protos([[0.0, 0.0]], present=[False])
    with pytest.raises(ParameterError):
        reference_distribution(torch.rand(2, 2, 2), protos)


def test_reference_labels_shared_tie_rule():
    p = torch.tensor([[[0.5]], [[0.5]]], dtype=torch.float64)
    y = reference_labels(p)
    assert y[0, 0, 0].item() == 1.0 and y[1, 0, 0].item() == 0.0


def test_loss_ps_hand_value():
    # one pixel: p_t=(0.5,0.5) with y_ref=class0; p_ref=(0.8,0.2) with y_t=class0
    p_t = torch.tensor([[[0.5]], [[0.5]]], dtype=torch.float64)
    p_ref = torch.tensor([[[0.8]], [[0.2]]], dtype=torch.float64)
    y0 = torch.tensor([[[1.0]], [[0.0]]], dtype=torch.float64)
    loss = loss_ps(p_t, y0, p_ref, y0)
    expect = -(math.log(0.5 + EPS) + math.log(0.8 + EPS))
    assert loss.item() == pytest.approx(expect, abs=1e-12)
    assert loss.item() == pytest.approx(0.91629, abs=1e-4)


def test_loss_ps_symmetry():
    rng = np.random.default_rng(5)
    p_a = torch.from_numpy(rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1))
    p_b = torch.from_numpy(rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1))
    y_a = reference_labels(p_a)
    y_b = reference_labels(p_b)
    assert loss_ps(p_a, y_a, p_b, y_b).item() == pytest.approx(
        loss_ps(p_b, y_b, p_a, y_a).item(), abs=1e-12)


def test_loss_ps_perfect_agreement_is_near_zero():
    y = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=torch.float64)
    loss = loss_ps(y, y, y, y)
    assert abs(loss.item()) <= 1e-7


def test_loss_pe_hand_value_and_gating():
    p_t = torch.tensor([[[0.5]], [[0.5]]], dtype=torch.float64)
    y0 = torch.tensor([[[1.0]], [[0.0]]], dtype=torch.float64)
    y1 = torch.tensor([[[0.0]], [[1.0]]], dtype=torch.float64)
    # agreement: plain CE
    assert loss_pe(p_t, y0, y0).item() == pytest.approx(-math.log(0.5 + EPS), abs=1e-12)
    assert loss_pe(p_t, y0, y0).item() == pytest.approx(0.69315, abs=1e-4)
    # disagreement: contributes zero
    assert loss_pe(p_t, y0, y1).item() == 0.0


def test_loss_pe_mixed_pixels_keep_denominator():
    # two pixels, one agreeing: loss = CE(agreeing)/2
    p_t = torch.tensor([[[0.5, 0.9]], [[0.5, 0.1]]], dtype=torch.float64)
    y_t = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=torch.float64)
    y_ref = torch.tensor([[[1.0, 1.0]], [[0.0, 0.0]]], dtype=torch.float64)
    expect = -math.log(0.5 + EPS) / 2.0
    assert loss_pe(p_t, y_t, y_ref).item() == pytest.approx(expect, abs=1e-12)


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    rng = np.random.default_rng(11)
    protos = _protos(rng.random((3, 4)) + 0.2)
    y_t = reference_labels(torch.from_numpy(
        rng.dirichlet(np.ones(3), size=(3, 3)).transpose(2, 0, 1)))
    y_ref = reference_labels(torch.from_numpy(
        rng.dirichlet(np.ones(3), size=(3, 3)).transpose(2, 0, 1)))
    f0 = torch.from_numpy(rng.random((4, 3, 3)) + 0.2)
    z0 = torch.from_numpy(rng.normal(size=(3, 3, 3)))

    # through the reference distribution into target features
    def ps_from_features(f):
        p_ref = reference_distribution(f, protos)
        p_t = torch.softmax(z0, dim=0)
        return loss_ps(p_t, y_t, p_ref, y_ref)

    # through the model distribution into target logits
    def ps_from_logits(z):
        p_ref = reference_distribution(f0, protos)
        return loss_ps(torch.softmax(z, dim=0), y_t, p_ref, y_ref)

    def pe_from_logits(z):
        return loss_pe(torch.softmax(z, dim=0), y_t, y_ref)

    check_grad(ps_from_features, f0, tol=1e-4)
    check_grad(ps_from_logits, z0, tol=1e-4)
    check_grad(pe_from_logits, z0, tol=1e-4)


def test_prototypes_carry_no_gradient():
    f = torch.rand(2, 3, 3, dtype=torch.float64, requires_grad=True)
    protos = PrototypeSet(vectors=torch.rand(2, 2, dtype=torch.float64, requires_grad=True),
                          present=torch.ones(2, dtype=torch.bool))
    p_ref = reference_distribution(f, protos)
    loss = p_ref.sum()
    loss.backward()
    assert f.grad is not None
    assert protos.vectors.grad is None


def test_store_dynamic_recomputes():
    store = PrototypeStore(PrototypeMode.DYNAMIC, num_classes=2, feature_dim=2)
    f1 = torch.tensor([[[1.0]], [[0.0]]])
    f2 = torch.tensor([[[5.0]], [[0.0]]])
    p = torch.tensor([[[0.9]], [[0.1]]])
    a = store.get("img", f1, p)
    b = store.get("img", f2, p)
    assert a.vectors[0, 0].item() == 1.0
    assert b.vectors[0, 0].item() == 5.0


def test_store_static_freezes_first_visit():
    store = PrototypeStore(PrototypeMode.STATIC, num_classes=2, feature_dim=2)
    f1 = torch.tensor([[[1.0]], [[0.0]]])
    f2 = torch.tensor([[[5.0]], [[0.0]]])
    p = torch.tensor([[[0.9]], [[0.1]]])
    a = store.get("img", f1, p)
    b = store.get("img", f2, p)
    assert b.vectors[0, 0].item() == a.vectors[0, 0].item() == 1.0
    # a different image still gets its own prototypes
    c = store.get("other", f2, p)
    assert c.vectors[0, 0].item() == 5.0


def test_store_momentum_blends_from_zero():
    store = PrototypeStore(PrototypeMode.MOMENTUM, num_classes=2, feature_dim=1)
    f = torch.tensor([[[1.0]]])           # D=1
    p = torch.tensor([[[0.9]], [[0.1]]])  # class 0 everywhere
    out = store.get("a", f, p)
    # store starts at zero: 0.99 * 0 + 0.01 * 1
    assert out.vectors[0, 0].item() == pytest.approx(0.01, abs=1e-9)
    assert out.present.tolist() == [True, False]
    out = store.get("b", f, p)
    assert out.vectors[0, 0].item() == pytest.approx(0.99 * 0.01 + 0.01, abs=1e-9)
    # class 1 never seen: untouched and absent
    assert out.vectors[1, 0].item() == 0.0


def test_store_momentum_tracks_union_of_seen_classes():
    store = PrototypeStore(PrototypeMode.MOMENTUM, num_classes=2, feature_dim=1)
    p0 = torch.tensor([[[0.9]], [[0.1]]])
    p1 = torch.tensor([[[0.1]], [[0.9]]])
    f = torch.tensor([[[1.0]]])
    store.get("a", f, p0)
    out = store.get("b", f, p1)
    assert out.present.tolist() == [True, True]
