import json
import logging

import numpy as np
import pytest

from data import (InstanceRecord, SynthConfig, build_pair_space, compute_correlation, corr_to_set,
                  load_attr_embeddings, load_dataset, save_dataset, synth_generate)
from errors import ConfigurationError, ContractError, DataLoadError


def records_from_labels(Y):
    return [InstanceRecord(i, np.zeros(2), 0, frozenset(int(a) for a in np.flatnonzero(row)))
            for i, row in enumerate(Y)]


def write_fixture(tmp_path, labels, features, splits=None, vocab=('red', 'old'), objects=('car', 'hat')):
    (tmp_path / 'labels.tsv').write_text(labels)
    (tmp_path / 'features.tsv').write_text(features)
    manifest = {
        'feature_file': 'features.tsv', 'feature_format': 'tsv', 'dtype': 'float64', 'feature_dim': 2,
        'n_records': len([line for line in labels.splitlines() if line.strip()]),
        'attr_vocab': list(vocab), 'object_vocab': list(objects), 'labels_file': 'labels.tsv',
        'splits': splits or {'train': [0, 1], 'test': [2]},
    }
    path = tmp_path / 'manifest.json'
    path.write_text(json.dumps(manifest))
    return str(path)


def test_load_hand_written_dataset(tmp_path):
    path = write_fixture(tmp_path, '0\t0\t0\n1\t1\t1\n2\t0\t1\n', '1 2\n3 4\n5 6\n')
    dataset = load_dataset(path)
    assert dataset.n_attrs == 2 and dataset.n_objects == 2
    assert dataset.record(2).attrs == frozenset({1})
    assert np.array_equal(dataset.record(1).feature, [3.0, 4.0])
    assert [r.record_id for r in dataset.split('train')] == [0, 1]


def test_attribute_out_of_range_names_line(tmp_path):
    path = write_fixture(tmp_path, '0\t0\t0\n1\t1\t7\n2\t0\t1\n', '1 2\n3 4\n5 6\n')
    with pytest.raises(DataLoadError) as err:
        load_dataset(path)
    assert 'labels.tsv:2' in str(err.value)
    assert 'attribute index out of range' in str(err.value)


def test_feature_row_width_checked(tmp_path):
    path = write_fixture(tmp_path, '0\t0\t0\n1\t1\t1\n2\t0\t1\n', '1 2\n3 4 9\n5 6\n')
    with pytest.raises(DataLoadError) as err:
        load_dataset(path)
    assert 'features.tsv:2' in str(err.value)


def test_split_with_unknown_record(tmp_path):
    path = write_fixture(tmp_path, '0\t0\t0\n1\t1\t1\n2\t0\t1\n', '1 2\n3 4\n5 6\n',
                         splits={'train': [0, 9], 'test': [2]})
    with pytest.raises(DataLoadError):
        load_dataset(path)


def test_missing_manifest_file(tmp_path):
    with pytest.raises(DataLoadError):
        load_dataset(str(tmp_path / 'absent.json'))


def test_raw_feature_size_mismatch(tmp_path, tiny_dataset):
    manifest = save_dataset(tiny_dataset, str(tmp_path / 'ds'))
    with open(tmp_path / 'ds' / 'features.bin', 'ab') as f:
        f.write(b'\x00' * 8)
    with pytest.raises(DataLoadError) as err:
        load_dataset(manifest)
    assert 'byte offset' in str(err.value)


def test_save_and_load_dataset(tmp_path, unseen_dataset):
    loaded = load_dataset(save_dataset(unseen_dataset, str(tmp_path / 'ds')))
    assert loaded.splits == unseen_dataset.splits
    assert loaded.pairs == unseen_dataset.pairs
    for original, copy in zip(unseen_dataset.records, loaded.records):
        assert original.attrs == copy.attrs and original.object_id == copy.object_id
        assert original.feature.tobytes() == copy.feature.tobytes()
    assert np.array_equal(loaded.truth.directions, unseen_dataset.truth.directions)


def test_synthetic_generation_is_seeded():
    cfg = SynthConfig(n_attrs=3, n_objects=2, feature_dim=6, per_pair_count=4, seed=11)
    first, second = synth_generate(cfg), synth_generate(cfg)
    assert np.array_equal(np.stack([r.feature for r in first.records]),
                          np.stack([r.feature for r in second.records]))
    assert first.splits == second.splits


def test_unseen_pairs_never_in_training(unseen_dataset):
    unseen = set(unseen_dataset.pairs['unseen'])
    assert len(unseen) == 2
    train = unseen_dataset.split('train')
    assert not unseen & {p for r in train for p in r.pairs()}
    assert {r.attr for r in train} == {0, 1, 2}
    assert {r.object_id for r in train} == {0, 1, 2}


def test_noiseless_feature_is_prototype_plus_direction():
    dataset = synth_generate(SynthConfig(n_attrs=2, n_objects=2, feature_dim=4, per_pair_count=2,
                                         noise_sigma=0.0, seed=1))
    truth = dataset.truth
    for record in dataset.records:
        expected = truth.prototypes[record.object_id] + truth.directions[record.attr]
        assert np.allclose(record.feature, expected)


def test_multi_attribute_groups_co_occur(multi_dataset):
    assert multi_dataset.multi_attr
    with_zero = [r for r in multi_dataset.records if 0 in r.attrs]
    assert sum(1 in r.attrs for r in with_zero) > len(with_zero) / 2


@pytest.mark.parametrize('overrides', [
    {'per_pair_count': 0},
    {'noise_sigma': -1.0},
    {'corr_structure': [(0, 9)]},
    {'n_unseen_pairs': 5, 'n_attrs': 2, 'n_objects': 2},
])
def test_synth_config_validation(overrides):
    with pytest.raises(ConfigurationError):
        synth_generate(SynthConfig(**overrides))


def test_correlation_matches_brute_force_pearson():
    rng = np.random.default_rng(0)
    for _ in range(50):
        Y = (rng.random((int(rng.integers(5, 30)), int(rng.integers(2, 7)))) < 0.5).astype(float)
        Y[0], Y[1] = 1.0, 0.0
        C = compute_correlation(records_from_labels(Y), Y.shape[1]).values
        n = Y.shape[1]
        for i in range(n):
            for j in range(n):
                yi, yj = Y[:, i] - Y[:, i].mean(), Y[:, j] - Y[:, j].mean()
                expected = (yi @ yj) / np.sqrt((yi @ yi) * (yj @ yj))
                assert abs(C[i, j] - expected) < 1e-10
        assert np.array_equal(C, C.T)


def test_zero_variance_attribute(caplog):
    Y = np.array([[1, 0, 1], [0, 0, 1], [1, 0, 0]], dtype=float)
    with caplog.at_level(logging.WARNING):
        C = compute_correlation(records_from_labels(Y), 3).values
    assert 'zero label variance' in caplog.text
    assert C[1, 1] == 1.0
    assert C[1, 0] == 0.0 and C[2, 1] == 0.0


def test_correlation_needs_two_records():
    with pytest.raises(ContractError):
        compute_correlation(records_from_labels(np.ones((1, 2))), 2)


def test_corr_to_set_is_additive():
    rng = np.random.default_rng(1)
    Y = (rng.random((40, 6)) < 0.5).astype(float)
    Y[0], Y[1] = 1.0, 0.0
    C = compute_correlation(records_from_labels(Y), 6)
    assert corr_to_set(C, 0, []) == 0.0
    assert corr_to_set(C, 0, {1, 2, 5}) == pytest.approx(
        corr_to_set(C, 0, {1}) + corr_to_set(C, 0, {2, 5}), abs=1e-15)


def test_one_hot_embeddings():
    embedding = load_attr_embeddings(None, ['a', 'b', 'c'], 'one_hot')
    assert np.array_equal(embedding.vectors, np.eye(3))
    assert embedding.dim == 3


def test_word_vectors_average_multiword_tokens(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text('sliced 1 0\napple 0 1\nred 2 2\n')
    embedding = load_attr_embeddings(str(path), ['red', 'sliced_apple', 'sliced apple'], 'word_vector')
    assert np.allclose(embedding.vectors, [[2, 2], [0.5, 0.5], [0.5, 0.5]])


def test_word_vectors_list_every_missing_token(tmp_path):
    path = tmp_path / 'vectors.txt'
    path.write_text('red 1 0\n')
    with pytest.raises(DataLoadError) as err:
        load_attr_embeddings(str(path), ['red', 'blue', 'green'], 'word_vector')
    assert 'blue' in str(err.value) and 'green' in str(err.value)


def test_pair_space_masks():
    train = [InstanceRecord(0, np.zeros(1), 0, frozenset({0})), InstanceRecord(1, np.zeros(1), 1, frozenset({1}))]
    test = [InstanceRecord(2, np.zeros(1), 1, frozenset({0}))]
    space = build_pair_space(train, test, 2, 2, unseen=[(0, 1)])
    assert space.index(1, 1) == 3
    assert space.feasible_mask.tolist() == [True, True, False, True]
    assert space.seen_mask.tolist() == [True, False, False, True]
    assert space.unseen_mask.tolist() == [False, True, False, False]
    assert space.feasible_pairs() == [(0, 0), (0, 1), (1, 1)]


def test_pair_space_rejects_unseen_training_pair():
    train = [InstanceRecord(0, np.zeros(1), 0, frozenset({0}))]
    with pytest.raises(DataLoadError):
        build_pair_space(train, [], 1, 1, unseen=[(0, 0)])


def test_pair_space_rejects_uncovered_test_pair():
    train = [InstanceRecord(0, np.zeros(1), 0, frozenset({0}))]
    test = [InstanceRecord(1, np.zeros(1), 0, frozenset({1}))]
    with pytest.raises(DataLoadError):
        build_pair_space(train, test, 2, 1, declared_pairs=[(0, 0)])
