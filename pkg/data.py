"""
Dataset ingestion, synthetic generation and attribute statistics.

On disk a dataset is a JSON manifest next to a raw little-endian feature
matrix (one row per record), a labels TSV and an optional pairs file:

    labels.tsv   record_id <TAB> object_id <TAB> attr_id[,attr_id...]
    pairs.json   {"seen": [[attr, obj], ...], "unseen": [...], "feasible": [...]}

Hand-written fixtures may use ``"feature_format": "tsv"``, in which case the
feature file holds one whitespace separated row per record instead.
"""

import os
import re
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigurationError, ContractError, DataLoadError
from numgrad import resolve_dtype
from utils import ensure_directory, load_json, open_input, save_json

logger = logging.getLogger(__name__)

REQUIRED_MANIFEST_KEYS = ('feature_file', 'dtype', 'feature_dim', 'n_records',
                          'attr_vocab', 'object_vocab', 'labels_file', 'splits')


@dataclass(frozen=True)
class InstanceRecord:
    record_id: int
    feature: np.ndarray
    object_id: int
    attrs: FrozenSet[int]

    @property
    def attr(self) -> int:
        """The attribute of a single-attribute record"""
        return min(self.attrs)

    def pairs(self) -> List[Tuple[int, int]]:
        return [(a, self.object_id) for a in sorted(self.attrs)]


@dataclass(frozen=True)
class AttributeEmbedding:
    vectors: np.ndarray
    source: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray

    def __getitem__(self, key):
        return self.values[key]

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class SynthTruth:
    """Ground-truth generators of a synthetic dataset"""
    prototypes: np.ndarray
    directions: np.ndarray
    shared: np.ndarray
    groups: List[Tuple[int, ...]]


@dataclass
class Dataset:
    records: List[InstanceRecord]
    attr_vocab: List[str]
    object_vocab: List[str]
    feature_dim: int
    splits: Dict[str, List[int]]
    pairs: Optional[Dict[str, List[Tuple[int, int]]]] = None
    truth: Optional[SynthTruth] = None
    dtype: str = 'float64'
    _by_id: Dict[int, InstanceRecord] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._by_id = {r.record_id: r for r in self.records}

    @property
    def n_attrs(self) -> int:
        return len(self.attr_vocab)

    @property
    def n_objects(self) -> int:
        return len(self.object_vocab)

    @property
    def multi_attr(self) -> bool:
        return any(len(r.attrs) > 1 for r in self.records)

    def record(self, record_id: int) -> InstanceRecord:
        return self._by_id[record_id]

    def split(self, name: str) -> List[InstanceRecord]:
        if name not in self.splits:
            raise DataLoadError(f"dataset has no '{name}' split (have {', '.join(sorted(self.splits))})")
        return [self._by_id[i] for i in self.splits[name]]

    def has_split(self, name: str) -> bool:
        return bool(self.splits.get(name))

    def pair_space(self) -> 'PairSpace':
        pairs = self.pairs or {}
        test = self.split('test') + (self.split('val') if self.has_split('val') else [])
        return build_pair_space(self.split('train'), test, self.n_attrs, self.n_objects,
                                declared_pairs=pairs.get('feasible'), unseen=pairs.get('unseen'))


def stack_features(records: Sequence[InstanceRecord], dtype=np.float64) -> np.ndarray:
    return np.stack([r.feature for r in records]).astype(dtype, copy=False)


def label_matrix(records: Sequence[InstanceRecord], n: int) -> np.ndarray:
    """Binary attribute indicators, one row per record"""
    Y = np.zeros((len(records), n))
    for row, record in enumerate(records):
        Y[row, sorted(record.attrs)] = 1.0
    return Y


# ---------------------------------------------------------------------------
# loading

def _parse_labels(path: str, n_attrs: int, n_objects: int) -> List[Tuple[int, int, FrozenSet[int]]]:
    rows = []
    seen_ids = set()
    with open_input(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            parts = line.split('\t')
            if len(parts) != 3:
                raise DataLoadError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            try:
                record_id, object_id = int(parts[0]), int(parts[1])
                attrs = frozenset(int(a) for a in parts[2].split(',') if a.strip())
            except ValueError:
                raise DataLoadError(f"{path}:{lineno}: non-integer label field") from None
            if record_id in seen_ids:
                raise DataLoadError(f"{path}:{lineno}: duplicate record id {record_id}")
            if not 0 <= object_id < n_objects:
                raise DataLoadError(f"{path}:{lineno}: object index out of range ({object_id} not in [0,{n_objects}))")
            bad = [a for a in attrs if not 0 <= a < n_attrs]
            if bad:
                raise DataLoadError(f"{path}:{lineno}: attribute index out of range ({bad[0]} not in [0,{n_attrs}))")
            seen_ids.add(record_id)
            rows.append((record_id, object_id, attrs))
    return rows


def _read_features(path: str, fmt: str, dtype: np.dtype, n_records: int, feature_dim: int) -> np.ndarray:
    if fmt == 'raw':
        with open_input(path, 'rb') as f:
            blob = f.read()
        little = dtype.newbyteorder('<')
        expected = n_records * feature_dim * little.itemsize
        if len(blob) != expected:
            raise DataLoadError(
                f"{path}: expected {expected} bytes ({n_records} records x {feature_dim} dims), "
                f"found {len(blob)} (mismatch at byte offset {min(len(blob), expected)})")
        return np.frombuffer(blob, dtype=little).reshape(n_records, feature_dim).astype(dtype)
    if fmt == 'tsv':
        rows = []
        with open_input(path) as f:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    values = [float(v) for v in line.split()]
                except ValueError:
                    raise DataLoadError(f"{path}:{lineno}: non-numeric feature value") from None
                if len(values) != feature_dim:
                    raise DataLoadError(f"{path}:{lineno}: expected {feature_dim} values, found {len(values)}")
                rows.append(values)
        if len(rows) != n_records:
            raise DataLoadError(f"{path}: expected {n_records} feature rows, found {len(rows)}")
        return np.asarray(rows, dtype=dtype).reshape(n_records, feature_dim)
    raise DataLoadError(f"unknown feature_format '{fmt}' (use raw or tsv)")


def load_dataset(manifest_path: str) -> Dataset:
    """Read and validate a dataset manifest together with the files it names"""
    manifest = load_json(manifest_path)
    missing = [k for k in REQUIRED_MANIFEST_KEYS if k not in manifest]
    if missing:
        raise DataLoadError(f"{manifest_path}: missing manifest key(s): {', '.join(missing)}")
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(name):
        return name if os.path.isabs(name) else os.path.join(base, name)

    try:
        dtype = resolve_dtype(manifest['dtype'])
    except ConfigurationError as e:
        raise DataLoadError(f"{manifest_path}: {e}") from None
    feature_dim, n_records = int(manifest['feature_dim']), int(manifest['n_records'])
    attr_vocab, object_vocab = list(manifest['attr_vocab']), list(manifest['object_vocab'])

    labels_path = resolve(manifest['labels_file'])
    labels = _parse_labels(labels_path, len(attr_vocab), len(object_vocab))
    if len(labels) != n_records:
        raise DataLoadError(f"{labels_path}: manifest declares {n_records} records, labels file has {len(labels)}")

    feature_path = resolve(manifest['feature_file'])
    features = _read_features(feature_path, manifest.get('feature_format', 'raw'), dtype, n_records, feature_dim)
    if not np.all(np.isfinite(features)):
        row = int(np.argwhere(~np.isfinite(features))[0][0])
        raise DataLoadError(f"{feature_path}: non-finite feature value in row {row}")

    records = [InstanceRecord(record_id, features[row], object_id, attrs)
               for row, (record_id, object_id, attrs) in enumerate(labels)]
    known = {r.record_id for r in records}

    splits = {name: [int(i) for i in ids] for name, ids in manifest['splits'].items()}
    for name in ('train', 'test'):
        if name not in splits:
            raise DataLoadError(f"{manifest_path}: split '{name}' is required")
    for name, ids in splits.items():
        unknown = [i for i in ids if i not in known]
        if unknown:
            raise DataLoadError(f"{manifest_path}: split '{name}' references unknown record id {unknown[0]}")
    by_id = {r.record_id: r for r in records}
    empty = [i for i in splits['train'] if not by_id[i].attrs]
    if empty:
        raise DataLoadError(f"{labels_path}: training record {empty[0]} has no attributes")

    pairs = None
    if manifest.get('pairs_file'):
        raw_pairs = load_json(resolve(manifest['pairs_file']))
        pairs = {key: [tuple(int(v) for v in p) for p in value] for key, value in raw_pairs.items()}

    dataset = Dataset(records, attr_vocab, object_vocab, feature_dim, splits, pairs=pairs, dtype=dtype.name)
    truth_file = manifest.get('truth_file')
    if truth_file:
        dataset.truth = _load_truth(resolve(truth_file))
    logger.info(f"Loaded {len(records)} records ({len(attr_vocab)} attrs, {len(object_vocab)} objects) "
                f"from {manifest_path}")
    return dataset


def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write a dataset in the manifest layout read by load_dataset"""
    ensure_directory(out_dir)
    dtype = resolve_dtype(dataset.dtype)
    features = stack_features(dataset.records, dtype)
    with open(os.path.join(out_dir, 'features.bin'), 'wb') as f:
        f.write(np.ascontiguousarray(features, dtype=dtype.newbyteorder('<')).tobytes())
    with open(os.path.join(out_dir, 'labels.tsv'), 'w', encoding='utf-8') as f:
        for r in dataset.records:
            f.write(f"{r.record_id}\t{r.object_id}\t{','.join(str(a) for a in sorted(r.attrs))}\n")

    manifest = {
        'feature_file': 'features.bin',
        'feature_format': 'raw',
        'dtype': dtype.name,
        'feature_dim': dataset.feature_dim,
        'n_records': len(dataset.records),
        'attr_vocab': dataset.attr_vocab,
        'object_vocab': dataset.object_vocab,
        'labels_file': 'labels.tsv',
        'splits': dataset.splits,
    }
    if dataset.pairs is not None:
        save_json({k: [list(p) for p in v] for k, v in dataset.pairs.items()}, os.path.join(out_dir, 'pairs.json'))
        manifest['pairs_file'] = 'pairs.json'
    if dataset.truth is not None:
        manifest['truth_file'] = _save_truth(dataset.truth, out_dir)
    manifest_path = os.path.join(out_dir, 'manifest.json')
    save_json(manifest, manifest_path)
    return manifest_path


def _save_truth(truth: SynthTruth, out_dir: str) -> str:
    for name in ('prototypes', 'directions', 'shared'):
        np.save(os.path.join(out_dir, f'truth_{name}.npy'), getattr(truth, name))
    save_json({'groups': [list(g) for g in truth.groups],
               'arrays': {name: f'truth_{name}.npy' for name in ('prototypes', 'directions', 'shared')}},
              os.path.join(out_dir, 'truth.json'))
    return 'truth.json'


def _load_truth(path: str) -> SynthTruth:
    index = load_json(path)
    base = os.path.dirname(path)
    arrays = {}
    for name, file_name in index['arrays'].items():
        try:
            arrays[name] = np.load(os.path.join(base, file_name))
        except OSError as e:
            raise DataLoadError(f"cannot read ground-truth array {file_name}: {e}") from e
    return SynthTruth(groups=[tuple(g) for g in index['groups']], **arrays)


def load_attr_embeddings(path: Optional[str], vocab: Sequence[str], mode: str = 'one_hot',
                         dtype='float64') -> AttributeEmbedding:
    """Build the attribute embedding matrix in vocabulary order.

    Multiword tokens ("sliced apple", "sliced_apple") without a vector of their
    own are averaged over their words.
    """
    dtype = resolve_dtype(dtype)
    if mode == 'one_hot':
        return AttributeEmbedding(np.eye(len(vocab), dtype=dtype), 'one_hot')
    if mode != 'word_vector':
        raise ConfigurationError(f"unknown embedding mode '{mode}' (use word_vector or one_hot)")
    if not path:
        raise ConfigurationError("word_vector mode needs an embeddings file")

    table: Dict[str, np.ndarray] = {}
    dim = None
    with open_input(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vector = np.array([float(v) for v in parts[1:]], dtype=dtype)
            except ValueError:
                raise DataLoadError(f"{path}:{lineno}: non-numeric vector component") from None
            if dim is None:
                dim = len(vector)
            elif len(vector) != dim:
                raise DataLoadError(f"{path}:{lineno}: expected {dim} components, found {len(vector)}")
            table.setdefault(parts[0], vector)

    rows, missing = [], []
    for token in vocab:
        if token in table:
            rows.append(table[token])
            continue
        words = [w for w in re.split(r'[\s_]+', token) if w]
        if len(words) > 1 and all(w in table for w in words):
            rows.append(np.mean([table[w] for w in words], axis=0))
        else:
            missing.append(token)
    if missing:
        raise DataLoadError(f"{path}: no vector for token(s): {', '.join(missing)}")
    return AttributeEmbedding(np.stack(rows).astype(dtype), 'word_vector')


# ---------------------------------------------------------------------------
# attribute statistics

def compute_correlation(records: Sequence[InstanceRecord], n: int) -> CorrelationMatrix:
    """Pearson correlation between the binary label columns of every attribute pair"""
    if len(records) < 2:
        raise ContractError(f"correlation needs at least 2 records, got {len(records)}")
    Y = label_matrix(records, n)
    centered = Y - Y.mean(axis=0)
    cov = centered.T @ centered / len(records)
    var = np.diag(cov).copy()
    constant = var <= 0
    if constant.any():
        names = ', '.join(str(i) for i in np.flatnonzero(constant))
        logger.warning(f"Attribute(s) {names} have zero label variance; correlation set to 0")
    std = np.sqrt(np.where(constant, 1.0, var))
    corr = cov / np.outer(std, std)
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return CorrelationMatrix(corr)


def corr_to_set(C: CorrelationMatrix, a: int, X: Iterable[int]) -> float:
    """Summed correlation of attribute a with every member of X (0 for empty X)"""
    total = 0.0
    for j in sorted(X):
        total += float(C.values[a, j])
    return total


# ---------------------------------------------------------------------------
# pair space

@dataclass
class PairSpace:
    """Every (attribute, object) combination, indexed a * n_objects + o"""
    n_attrs: int
    n_objects: int
    feasible_mask: np.ndarray
    seen_mask: np.ndarray
    unseen_mask: np.ndarray

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return [(a, o) for a in range(self.n_attrs) for o in range(self.n_objects)]

    def index(self, attr: int, obj: int) -> int:
        return attr * self.n_objects + obj

    def feasible_pairs(self) -> List[Tuple[int, int]]:
        return [p for p, ok in zip(self.pairs, self.feasible_mask) if ok]


def build_pair_space(train_records: Sequence[InstanceRecord], test_records: Sequence[InstanceRecord],
                     n_attrs: int, n_objects: int, declared_pairs: Optional[Iterable] = None,
                     unseen: Optional[Iterable] = None) -> PairSpace:
    train_pairs = {p for r in train_records for p in r.pairs()}
    test_pairs = {p for r in test_records for p in r.pairs()}
    unseen_set = {tuple(int(v) for v in p) for p in (unseen or [])}

    overlap = sorted(unseen_set & train_pairs)
    if overlap:
        raise DataLoadError(f"unseen pair(s) also occur in training: {overlap}")
    if declared_pairs is not None:
        feasible = {tuple(int(v) for v in p) for p in declared_pairs}
    else:
        feasible = train_pairs | test_pairs | unseen_set
    uncovered = sorted(test_pairs - feasible)
    if uncovered:
        raise DataLoadError(f"test pair(s) outside the feasible set: {uncovered}")
    for a, o in feasible | unseen_set:
        if not (0 <= a < n_attrs and 0 <= o < n_objects):
            raise DataLoadError(f"pair ({a}, {o}) outside the {n_attrs}x{n_objects} vocabulary")

    shape = (n_attrs * n_objects,)
    feasible_mask, seen_mask, unseen_mask = np.zeros(shape, bool), np.zeros(shape, bool), np.zeros(shape, bool)
    for a, o in feasible:
        idx = a * n_objects + o
        feasible_mask[idx] = True
        if (a, o) in train_pairs:
            seen_mask[idx] = True
        elif not unseen_set or (a, o) in unseen_set:
            unseen_mask[idx] = True
    return PairSpace(n_attrs, n_objects, feasible_mask, seen_mask, unseen_mask)


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthConfig:
    n_attrs: int = 6
    n_objects: int = 5
    feature_dim: int = 32
    per_pair_count: int = 40
    noise_sigma: float = 0.05
    corr_structure: List[Tuple[int, ...]] = field(default_factory=list)
    seed: int = 7
    multi_attr: bool = False
    max_attrs_per_record: int = 3
    cooccur_prob: float = 0.9
    n_unseen_pairs: int = 0
    test_fraction: float = 0.2
    val_fraction: float = 0.0
    dtype: str = 'float64'

    def validate(self):
        if self.per_pair_count < 1:
            raise ConfigurationError(f"per_pair_count must be at least 1, got {self.per_pair_count}")
        if self.n_attrs < 1 or self.n_objects < 1 or self.feature_dim < 1:
            raise ConfigurationError("n_attrs, n_objects and feature_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be non-negative, got {self.noise_sigma}")
        if not 0 <= self.test_fraction + self.val_fraction < 1:
            raise ConfigurationError("test_fraction + val_fraction must lie in [0, 1)")
        for group in self.corr_structure:
            if any(not 0 <= a < self.n_attrs for a in group):
                raise ConfigurationError(f"corr_structure group {tuple(group)} names an unknown attribute")
        if self.n_unseen_pairs and self.multi_attr:
            raise ConfigurationError("unseen pairs are only defined for single-attribute data")
        if self.n_unseen_pairs > self.n_attrs * self.n_objects - max(self.n_attrs, self.n_objects):
            raise ConfigurationError(f"cannot hold out {self.n_unseen_pairs} pairs and keep every "
                                     f"attribute and object seen")
        if self.feature_dim < self.n_attrs + self.n_objects:
            logger.warning(f"feature_dim {self.feature_dim} is below n_attrs + n_objects "
                           f"({self.n_attrs + self.n_objects}); planted directions will overlap")


def _choose_unseen(rng, n_attrs: int, n_objects: int, count: int) -> List[Tuple[int, int]]:
    """Hold out pairs while every attribute and object keeps a seen pair"""
    order = rng.permutation(n_attrs * n_objects)
    attr_left = np.full(n_attrs, n_objects)
    obj_left = np.full(n_objects, n_attrs)
    chosen = []
    for idx in order:
        if len(chosen) == count:
            break
        a, o = divmod(int(idx), n_objects)
        if attr_left[a] > 1 and obj_left[o] > 1:
            chosen.append((a, o))
            attr_left[a] -= 1
            obj_left[o] -= 1
    if len(chosen) < count:
        raise ConfigurationError(f"could only hold out {len(chosen)} of {count} pairs")
    return sorted(chosen)


def _sample_attr_set(rng, base: int, cfg: SynthConfig, group_of: Dict[int, Tuple[int, ...]]) -> FrozenSet[int]:
    attrs = {base}
    for mate in group_of.get(base, ()):
        if mate != base and rng.random() < cfg.cooccur_prob:
            attrs.add(mate)
    if len(attrs) < cfg.max_attrs_per_record and rng.random() < 0.3:
        attrs.add(int(rng.integers(cfg.n_attrs)))
    while len(attrs) > cfg.max_attrs_per_record:
        attrs.discard(max(attrs - {base}))
    return frozenset(attrs)


def synth_generate(cfg: SynthConfig) -> Dataset:
    """Generate features = object prototype + sum of attribute directions + noise"""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n, m, D = cfg.n_attrs, cfg.n_objects, cfg.feature_dim
    scale = 1.0 / np.sqrt(D)
    prototypes = rng.normal(0.0, scale, size=(m, D))
    own = rng.normal(0.0, scale, size=(n, D))
    groups = [tuple(int(a) for a in g) for g in cfg.corr_structure]
    shared = rng.normal(0.0, scale, size=(len(groups), D))
    directions = own.copy()
    group_of: Dict[int, Tuple[int, ...]] = {}
    for g, members in enumerate(groups):
        for a in members:
            directions[a] += shared[g]
            group_of[a] = members

    unseen = _choose_unseen(rng, n, m, cfg.n_unseen_pairs) if cfg.n_unseen_pairs else []
    unseen_set = set(unseen)

    records: List[InstanceRecord] = []
    splits: Dict[str, List[int]] = {'train': [], 'test': []}
    if cfg.val_fraction > 0:
        splits['val'] = []
    for o in range(m):
        for base in range(n):
            ids = []
            for _ in range(cfg.per_pair_count):
                attrs = _sample_attr_set(rng, base, cfg, group_of) if cfg.multi_attr else frozenset([base])
                noise = rng.normal(0.0, cfg.noise_sigma, size=D) if cfg.noise_sigma > 0 else np.zeros(D)
                feature = prototypes[o] + directions[sorted(attrs)].sum(axis=0) + noise
                record = InstanceRecord(len(records), feature.astype(resolve_dtype(cfg.dtype)), o, attrs)
                records.append(record)
                ids.append(record.record_id)
            if (base, o) in unseen_set:
                splits['test'].extend(ids)
                continue
            ids = [ids[i] for i in rng.permutation(len(ids))]
            n_test = int(round(len(ids) * cfg.test_fraction))
            n_val = int(round(len(ids) * cfg.val_fraction))
            n_test = min(n_test, len(ids) - 1)
            n_val = min(n_val, len(ids) - 1 - n_test)
            splits['test'].extend(ids[:n_test])
            if n_val:
                splits['val'].extend(ids[n_test:n_test + n_val])
            splits['train'].extend(ids[n_test + n_val:])
    splits = {name: sorted(ids) for name, ids in splits.items()}

    pairs = None
    if not cfg.multi_attr:
        seen = sorted({(b, o) for o in range(m) for b in range(n)} - unseen_set)
        pairs = {'seen': seen, 'unseen': unseen}

    dataset = Dataset(
        records=records,
        attr_vocab=[f'attr{i}' for i in range(n)],
        object_vocab=[f'obj{j}' for j in range(m)],
        feature_dim=D,
        splits=splits,
        pairs=pairs,
        truth=SynthTruth(prototypes, directions, shared, groups),
        dtype=resolve_dtype(cfg.dtype).name,
    )
    logger.info(f"Generated {len(records)} synthetic records (seed {cfg.seed}, {len(unseen)} unseen pairs)")
    return dataset
