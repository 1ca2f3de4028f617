from dataclasses import replace

import numpy as np
import pytest

from conftest import make_model
from errors import ConfigurationError, ContractError
from losses import (GRADCHECK_TERMS, Batch, LossBreakdown, LossWeights, attr_corr_triplet, axiom_losses,
                    check_loss_gradients, classification_losses, compute_loss_terms, cross_entropy,
                    multi_sym_triplet, rmd_triplet_single, symmetry_loss, toy_problem, total_loss)
from models import RMDScores
from numgrad import Tensor


def test_cross_entropy_values():
    logits = Tensor(np.log([[0.75, 0.25]]))
    assert cross_entropy(logits, [0]).item() == pytest.approx(-np.log(0.75))
    uniform = Tensor(np.zeros((3, 4)))
    assert cross_entropy(uniform, [0, 1, 3]).item() == pytest.approx(np.log(4))


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ContractError):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_rmd_triplet_present_attribute():
    scores = RMDScores(Tensor(np.array([0.9])), Tensor(np.array([0.7])))
    assert rmd_triplet_single(scores, {0}, alpha=0.5).item() == pytest.approx(0.7)


def test_rmd_triplet_satisfied_margins():
    # attribute 0 present with d- far above d+, attribute 1 absent with d+ far above d-
    scores = RMDScores(Tensor(np.array([[0.0, 2.0]])), Tensor(np.array([[2.0, 0.0]])))
    assert rmd_triplet_single(scores, [{0}], alpha=0.5).item() == 0.0


def test_rmd_triplet_averages_over_instances():
    d_plus = Tensor(np.array([[0.9], [0.0]]))
    d_minus = Tensor(np.array([[0.7], [0.0]]))
    mask = np.array([[True], [False]])
    # 0.7 for the first row, 0.5 for the second
    assert rmd_triplet_single(RMDScores(d_plus, d_minus), mask, 0.5).item() == pytest.approx(0.6)


def test_rmd_triplet_needs_positive_margin():
    scores = RMDScores(Tensor(np.array([0.9])), Tensor(np.array([0.7])))
    with pytest.raises(ConfigurationError):
        rmd_triplet_single(scores, {0}, alpha=0.0)


def test_multi_sym_triplet():
    ordered = multi_sym_triplet([0.8], [0.2], Tensor(np.array([1.0])), Tensor(np.array([0.0])), 0.5)
    assert ordered.item() == pytest.approx(0.0)
    reversed_ = multi_sym_triplet([0.8], [0.2], Tensor(np.array([0.0])), Tensor(np.array([1.0])), 0.5)
    assert reversed_.item() == pytest.approx(1.1)
    assert multi_sym_triplet([], [], Tensor(np.zeros(0)), Tensor(np.zeros(0))).item() == 0.0


def test_attr_corr_triplet():
    dists = {'plus_ij': Tensor(1.0), 'plus_ik': Tensor(0.0), 'minus_ij': Tensor(1.0), 'minus_ik': Tensor(0.0)}
    assert attr_corr_triplet(0.8, 0.2, dists, 0.5, triple=(0, 1, 2)).item() == pytest.approx(2.2)
    with pytest.raises(ContractError):
        attr_corr_triplet(0.8, 0.2, dists, 0.5, triple=(0, 1, 1))


def test_identity_transforms_zero_symmetry_and_axioms(tiny_dataset):
    model = make_model(tiny_dataset).pin_identity()
    f = np.random.default_rng(0).normal(size=(4, 8))
    a_has, a_not = np.array([0, 1, 2, 0]), np.array([1, 2, 0, 2])
    assert symmetry_loss(model, f, a_has, a_not).item() == 0.0
    assert [t.item() for t in axiom_losses(model, f, a_has, a_not)] == [0.0, 0.0, 0.0]


def test_present_and_absent_attribute_must_differ(tiny_dataset):
    model = make_model(tiny_dataset)
    f = np.zeros((2, 8))
    with pytest.raises(ContractError):
        symmetry_loss(model, f, [0, 1], [0, 2])


def test_classification_losses_are_positive(tiny_dataset):
    model = make_model(tiny_dataset, seed=1)
    f = np.random.default_rng(1).normal(size=(4, 8))
    cls_a, cls_o = classification_losses(model, f, [0, 1, 0, 1], [0, 1, 2, 0], [1, 2, 0, 2])
    assert cls_a.item() > 0 and cls_o.item() > 0


def test_loss_weights_validation():
    with pytest.raises(ConfigurationError):
        LossWeights(lambda1=-1.0)
    with pytest.raises(ConfigurationError):
        LossWeights(mode='multi')
    warm = LossWeights(lambda1=0.5, lambda2=0.5).without_transform_terms()
    assert (warm.lambda1, warm.lambda2, warm.lambda3) == (0.0, 0.0, 1.0)


def test_total_loss_single_mode():
    parts = LossBreakdown(sym=1.0, clo=2.0, inv=3.0, com=4.0, cls_a=5.0, cls_o=6.0, tri=7.0)
    weights = LossWeights(0.1, 0.2, 0.3, 0.4, 0.5)
    expected = 0.1 * 1 + 0.2 * (2 + 3 + 4) + 0.3 * 5 + 0.4 * 6 + 0.5 * 7
    assert total_loss(parts, weights) == pytest.approx(expected)


def test_total_loss_multi_mode_nests_triplets():
    parts = LossBreakdown(sym=0.0, clo=0.0, inv=0.0, com=0.0, cls_a=0.0, cls_o=0.0, tri=1.0,
                          tri_sym=2.0, tri_corr=3.0)
    weights = LossWeights(1.0, 1.0, 1.0, 1.0, 0.5, 0.1, 0.2, mode='multi')
    assert total_loss(parts, weights) == pytest.approx(0.5 * (1.0 + 0.1 * 2.0 + 0.2 * 3.0))


def test_total_loss_missing_component():
    parts = LossBreakdown(sym=0.0, clo=0.0, inv=0.0, com=0.0, cls_a=0.0, cls_o=0.0, tri=1.0)
    with pytest.raises(ContractError):
        total_loss(parts, LossWeights(lambda6=0.1, lambda7=0.1, mode='multi'))


def test_compute_loss_terms_single_mode(tiny_dataset):
    model = make_model(tiny_dataset)
    rng = np.random.default_rng(2)
    batch = Batch(features=rng.normal(size=(4, 8)), objects=np.array([0, 1, 0, 1]),
                  attr_mask=np.eye(3, dtype=bool)[[0, 1, 2, 0]],
                  a_has=np.array([0, 1, 2, 0]), a_not=np.array([1, -1, 0, 2]))
    terms = compute_loss_terms(model, batch, LossWeights())
    values = terms.as_floats()
    assert values['tri_sym'] is None and values['tri_corr'] is None
    assert all(np.isfinite(values[k]) for k in ('sym', 'clo', 'inv', 'com', 'cls_a', 'cls_o', 'tri', 'total'))


def test_compute_loss_terms_without_negatives(tiny_dataset):
    model = make_model(tiny_dataset)
    batch = Batch(features=np.ones((2, 8)), objects=np.array([0, 1]), attr_mask=np.eye(3, dtype=bool)[[0, 1]],
                  a_has=np.array([0, 1]), a_not=np.array([-1, -1]))
    values = compute_loss_terms(model, batch, LossWeights()).as_floats()
    assert values['sym'] == 0.0 and values['cls_a'] == 0.0
    assert values['cls_o'] > 0


def test_toy_problem_covers_every_term():
    model, batch, weights, corr = toy_problem(0)
    values = compute_loss_terms(model, batch, weights, corr).as_floats()
    assert all(values[t] is not None and np.isfinite(values[t]) for t in GRADCHECK_TERMS)
    assert len(batch.sym_rows) > 0


@pytest.mark.parametrize('seed', range(5))
def test_every_loss_gradient_matches_finite_differences(seed):
    reports = check_loss_gradients(seed)
    assert set(reports) == set(GRADCHECK_TERMS)
    for term, report in reports.items():
        assert report.passed, f"{term}: {report.summary()}"
        assert report.checked > 0


@pytest.mark.parametrize('seed', range(5))
def test_float32_gradients_match_float64_differences(seed):
    reports = check_loss_gradients(seed, tol=1e-3, dtype='float32')
    for term, report in reports.items():
        assert report.passed, f"{term}: {report.summary()}"
        assert report.checked > 0


def test_total_loss_slope_in_each_weight_is_its_component():
    parts = LossBreakdown(sym=1.5, clo=0.2, inv=0.3, com=0.4, cls_a=2.5, cls_o=1.1, tri=0.7,
                          tri_sym=0.9, tri_corr=0.35)
    weights = LossWeights(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, mode='multi')
    expected = {
        'lambda1': parts.sym,
        'lambda2': parts.clo + parts.inv + parts.com,
        'lambda3': parts.cls_a,
        'lambda4': parts.cls_o,
        'lambda5': parts.tri + 0.6 * parts.tri_sym + 0.7 * parts.tri_corr,
        'lambda6': 0.5 * parts.tri_sym,
        'lambda7': 0.5 * parts.tri_corr,
    }
    h = 1e-3
    for name, component in expected.items():
        value = getattr(weights, name)
        upper = total_loss(parts, replace(weights, **{name: value + h}))
        lower = total_loss(parts, replace(weights, **{name: value - h}))
        assert (upper - lower) / (2 * h) == pytest.approx(component, rel=1e-8), name
