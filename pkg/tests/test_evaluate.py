import logging

import numpy as np
import pytest

from conftest import make_model
from data import PairSpace, compute_correlation, corr_to_set
from errors import ConfigurationError, ContractError
from evaluate import (EvalReport, correlation_distance_scatter, czsl_topk, evaluate_model, generalized_from_scores,
                      harmonic_mean, mauc, render_table, topk_accuracy, write_bias_sweep)
from numgrad import Tensor


def two_pair_space():
    """One object, pair 0 seen and pair 1 unseen"""
    return PairSpace(2, 1, np.array([True, True]), np.array([True, False]), np.array([False, True]))


def test_topk_accuracy_breaks_ties_by_index():
    scores = np.array([[0.1, 0.9, 0.5], [0.3, 0.3, 0.3]])
    assert topk_accuracy(scores, [2, 1], 1) == 0.0
    assert topk_accuracy(scores, [2, 1], 2) == 1.0
    with pytest.raises(ConfigurationError):
        topk_accuracy(scores, [2, 1], 4)


def brute_force_auc(scores, labels):
    pos, neg = scores[labels], scores[~labels]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_mauc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rows, cols = int(rng.integers(4, 25)), int(rng.integers(1, 6))
        scores = rng.integers(0, 4, size=(rows, cols)).astype(float)
        labels = rng.random((rows, cols)) < 0.5
        labels[0], labels[1] = True, False
        mean, per_attr = mauc(scores, labels)
        expected = [brute_force_auc(scores[:, a], labels[:, a]) for a in range(cols)]
        assert np.allclose(per_attr, expected, atol=1e-12)
        assert mean == pytest.approx(np.mean(expected))


def test_mauc_all_tied_is_one_half():
    labels = np.array([[True], [False], [True], [False]])
    assert mauc(np.zeros((4, 1)), labels)[0] == 0.5


def test_mauc_skips_attribute_without_negatives(caplog):
    labels = np.array([[True, True], [False, True], [True, True]])
    with caplog.at_level(logging.WARNING):
        mean, per_attr = mauc(np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]), labels)
    assert mean == 1.0 and np.isnan(per_attr[1])
    assert 'excluded' in caplog.text


def test_generalized_hand_example():
    # the unseen instance flips to correct once the bias passes its gap of 0.125,
    # the seen one stays correct until the bias passes 0.5
    scores = np.array([[0.75, 0.25], [0.5, 0.375]])
    result = generalized_from_scores(scores, np.array([0, 1]), two_pair_space())
    assert result.biases.tolist() == [-np.inf, 0.125, 0.5, np.inf]
    assert result.seen.tolist() == [1.0, 1.0, 1.0, 0.0]
    assert result.unseen.tolist() == [0.0, 0.0, 1.0, 1.0]
    assert (result.hm, result.best_seen, result.best_unseen) == (1.0, 1.0, 1.0)
    assert result.auc == pytest.approx(1.0)
    assert result.closed == 1.0


def random_space(rng, n_pairs=6):
    unseen = np.zeros(n_pairs, bool)
    unseen[rng.choice(n_pairs, 2, replace=False)] = True
    return PairSpace(n_pairs, 1, np.ones(n_pairs, bool), ~unseen, unseen)


def test_generalized_curve_is_monotone_and_shift_invariant():
    rng = np.random.default_rng(3)
    for _ in range(20):
        space = random_space(rng)
        scores = rng.integers(0, 64, size=(30, 6)) / 64.0
        truth = np.concatenate([np.flatnonzero(space.seen_mask)[:1], np.flatnonzero(space.unseen_mask)[:1],
                                rng.integers(0, 6, size=28)])
        result = generalized_from_scores(scores, truth, space)
        assert np.all(np.diff(result.seen) <= 0) and np.all(np.diff(result.unseen) >= 0)
        assert result.hm <= max(result.best_seen, result.best_unseen)
        shifted = generalized_from_scores(scores + 2.0, truth, space)
        assert shifted.auc == result.auc and shifted.hm == result.hm


def test_generalized_needs_both_kinds_of_instances():
    with pytest.raises(ContractError):
        generalized_from_scores(np.array([[0.6, 0.4]]), np.array([0]), two_pair_space())


def test_generalized_rejects_descending_grid():
    scores = np.array([[0.75, 0.25], [0.5, 0.375]])
    with pytest.raises(ConfigurationError):
        generalized_from_scores(scores, np.array([0, 1]), two_pair_space(), bias_grid=[1.0, 0.0])


def test_harmonic_mean():
    assert harmonic_mean(0.5, 0.25) == pytest.approx(1 / 3)
    assert harmonic_mean(0.0, 0.0) == 0.0


def test_czsl_topk_oracle_and_monotone(unseen_dataset):
    space = unseen_dataset.pair_space()
    records = [r for r in unseen_dataset.split('test') if space.unseen_mask[space.index(r.attr, r.object_id)]]
    oracle = np.full((len(records), space.n_attrs * space.n_objects), 0.0)
    for row, record in enumerate(records):
        oracle[row, space.index(record.attr, record.object_id)] = 1.0
    assert czsl_topk(None, records, space, scores=oracle) == 1.0

    model = make_model(unseen_dataset, seed=1)
    accuracies = [czsl_topk(model, records, space, k=k) for k in (1, 2, 3)]
    assert accuracies == sorted(accuracies)


def test_evaluate_model_reports_every_metric(unseen_dataset):
    report = evaluate_model(make_model(unseen_dataset), unseen_dataset, 'test')
    for key in ('obj_top1', 'attr_top1', 'attr_top3', 'czsl_top1', 'hm', 'auc', 'closed'):
        assert 0.0 <= report.metrics[key] <= 1.0
    assert report.bias_curve[0][0] == -np.inf and report.bias_curve[-1][0] == np.inf
    encoded = report.to_json()
    assert encoded['bias_curve'][0][0] == '-inf'


def test_evaluate_model_multi_attribute(multi_dataset):
    report = evaluate_model(make_model(multi_dataset), multi_dataset, 'test')
    assert 'mauc' in report.metrics and 'attr_top1' not in report.metrics
    assert len(report.per_attr_auc) == 5


def test_report_validation():
    with pytest.raises(ContractError):
        EvalReport(metrics={'obj_top1': 1.5}).validate()


def test_render_table():
    table = render_table(EvalReport(metrics={'attr_top1': 0.5, 'obj_top1': 1.0}, n_instances=4))
    assert 'Attr Top-1' in table and '50.0' in table and '100.0' in table
    assert '[closed]' not in table


def test_write_bias_sweep(tmp_path, unseen_dataset):
    report = evaluate_model(make_model(unseen_dataset), unseen_dataset, 'test')
    path = write_bias_sweep(report, str(tmp_path / 'sweep.tsv'))
    with open(path) as f:
        lines = f.read().strip().splitlines()
    assert lines[0].split('\t') == ['bias', 'seen', 'unseen', 'hm']
    assert len(lines) == len(report.bias_curve) + 1
    assert lines[1].startswith('-inf')


def test_scatter_with_identity_transforms_is_degenerate(multi_dataset, caplog):
    model = make_model(multi_dataset).pin_identity()
    records = multi_dataset.split('train')
    with caplog.at_level(logging.WARNING):
        points, rho = correlation_distance_scatter(model, records, compute_correlation(records, 5))
    assert rho == 0.0 and 'degenerate' in caplog.text
    assert np.all(points[:, 1] == 0.0)


def test_scatter_ranks_distances_within_each_record(multi_dataset, monkeypatch):
    records = multi_dataset.split('train')
    C = compute_correlation(records, 5)
    # distances follow correlation inside a record but jump by a large offset between records
    d_minus = np.array([[corr_to_set(C, a, r.attrs) - 10.0 * row for a in range(5)]
                        for row, r in enumerate(records)]) + 10.0 * len(records)
    model = make_model(multi_dataset)
    monkeypatch.setattr(model, 'moving_distances',
                        lambda f, bn_mode='eval': (Tensor(np.zeros_like(d_minus)), Tensor(d_minus)))
    points, rho = correlation_distance_scatter(model, records, C)
    assert rho == pytest.approx(1.0)
    assert len(points) == sum(5 - len(r.attrs) for r in records)


def test_czsl_topk_rejects_k_beyond_feasible_pairs():
    with pytest.raises(ConfigurationError):
        czsl_topk(None, [], two_pair_space(), k=3)
