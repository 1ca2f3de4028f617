"""
Sampling, the epoch loop and full training runs.

A run writes into its output directory:

    checkpoint.ckpt   model parameters, buffers and run metadata
    report.jsonl      one JSON object per logged step, per epoch, and a final summary
    loss_curve.tsv    epoch means of every loss component
"""

import os
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from data import (CorrelationMatrix, Dataset, InstanceRecord, compute_correlation, corr_to_set,
                  label_matrix, load_attr_embeddings, load_dataset, stack_features)
from errors import ConfigurationError, NumericError
from evaluate import EvalReport, evaluate_model
from losses import Batch, LossBreakdown, LossWeights, compute_loss_terms
from models import ModelConfig, SymNet
from numgrad import Tape, no_grad, sgd_step
from utils import append_jsonl, ensure_directory, vocab_hash, write_tsv

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'checkpoint.ckpt'
REPORT_NAME = 'report.jsonl'
CURVE_NAME = 'loss_curve.tsv'

# settings that describe where a run lives rather than what it computes
LOCATION_FIELDS = ('dataset', 'embeddings', 'output_dir', 'resume')

LR_SCHEDULES = ('constant', 'cosine')


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 200
    momentum: float = 0.0
    lr_schedule: str = 'constant'
    warmup_epochs: int = 0
    lambda1: float = 5e-2
    lambda2: float = 1e-2
    lambda3: float = 1.0
    lambda4: float = 1e-2
    lambda5: float = 3e-2
    lambda6: float = 0.0
    lambda7: float = 0.0
    margin: float = 0.5
    gamma: float = 1.0
    seed: int = 7
    mode: str = 'single'
    dataset: str = ''
    embeddings: str = ''
    embedding_mode: str = 'one_hot'
    attn_hidden: int = 0
    trunk_hidden: int = 0
    cls_hidden: int = 0
    bn_momentum: float = 0.9
    bn_single_sample: str = 'error'
    distance: str = 'l2'
    attr_cls_input: str = 'transformed'
    dtype: str = 'float64'
    log_interval: int = 10
    checkpoint_policy: str = 'best'
    output_dir: str = 'runs'
    resume: str = ''

    @classmethod
    def from_object(cls, preset) -> 'TrainConfig':
        """Build from a Config preset class (upper-case attributes)"""
        values = {}
        for f in fields(cls):
            if hasattr(preset, f.name.upper()):
                values[f.name] = getattr(preset, f.name.upper())
        return cls().with_overrides(values)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> 'TrainConfig':
        return cls().with_overrides(values)

    def with_overrides(self, values: Mapping[str, Any]) -> 'TrainConfig':
        """Return a copy with the given settings applied; strings are coerced to the field type"""
        types = {f.name: f.type for f in fields(self)}
        updates = {}
        for raw_key, value in values.items():
            if value is None:
                continue
            key = raw_key.strip().lower().replace('-', '_')
            if key not in types:
                raise ConfigurationError(f"unknown setting '{raw_key}'")
            updates[key] = _coerce(key, value, types[key])
        return replace(self, **updates)

    def validate(self) -> 'TrainConfig':
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be at least 1, got {self.epochs}")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")
        if self.momentum < 0:
            raise ConfigurationError(f"momentum must be non-negative, got {self.momentum}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}, "
                                     f"got '{self.lr_schedule}'")
        if self.log_interval < 1:
            raise ConfigurationError(f"log_interval must be at least 1, got {self.log_interval}")
        if self.checkpoint_policy not in ('best', 'last'):
            raise ConfigurationError(f"checkpoint_policy must be 'best' or 'last', got '{self.checkpoint_policy}'")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        self.weights.validate()
        return self

    @property
    def weights(self) -> LossWeights:
        multi = self.mode == 'multi'
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5,
                           self.lambda6 if multi else None, self.lambda7 if multi else None,
                           alpha=self.margin, mode=self.mode)

    def model_config(self, dataset: Dataset, attr_dim: int) -> ModelConfig:
        return ModelConfig(
            feature_dim=dataset.feature_dim, attr_dim=attr_dim,
            n_attrs=dataset.n_attrs, n_objects=dataset.n_objects,
            attn_hidden=self.attn_hidden, trunk_hidden=self.trunk_hidden, cls_hidden=self.cls_hidden,
            bn_momentum=self.bn_momentum, bn_single_sample=self.bn_single_sample,
            distance=self.distance, attr_cls_input=self.attr_cls_input, dtype=self.dtype,
            attr_vocab_hash=vocab_hash(dataset.attr_vocab),
            object_vocab_hash=vocab_hash(dataset.object_vocab),
        )

    def describe(self) -> Dict[str, Any]:
        """Settings that determine the computation, for checkpoint metadata"""
        return {k: v for k, v in asdict(self).items() if k not in LOCATION_FIELDS}


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate of one epoch; 'cosine' anneals from lr towards 0 over cfg.epochs"""
    if cfg.lr_schedule == 'cosine':
        return float(0.5 * cfg.lr * (1.0 + np.cos(np.pi * epoch / cfg.epochs)))
    return cfg.lr


def _coerce(key: str, value, target):
    if isinstance(value, target) and not (target is int and isinstance(value, bool)):
        return value
    try:
        if target is int:
            number = float(value)
            if not number.is_integer():
                raise ValueError(value)
            return int(number)
        if target is float:
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise ConfigurationError(f"setting '{key}': cannot read '{value}' as {target.__name__}") from None


# ---------------------------------------------------------------------------
# sampling

class NegativeSampler:
    """Draws, for a record, another record with the same object and no shared attribute"""

    def __init__(self, records: Sequence[InstanceRecord]):
        self.by_object: Dict[int, List[InstanceRecord]] = defaultdict(list)
        for record in records:
            self.by_object[record.object_id].append(record)
        self._eligible: Dict[Tuple[int, frozenset], List[InstanceRecord]] = {}
        self.skipped = 0
        self.used = 0

    def eligible(self, record: InstanceRecord) -> List[InstanceRecord]:
        key = (record.object_id, record.attrs)
        if key not in self._eligible:
            self._eligible[key] = [r for r in self.by_object[record.object_id] if r.attrs.isdisjoint(record.attrs)]
        return self._eligible[key]

    def sample(self, record: InstanceRecord, rng: np.random.Generator) -> Optional[InstanceRecord]:
        candidates = self.eligible(record)
        if not candidates:
            self.skipped += 1
            return None
        self.used += 1
        return candidates[int(rng.integers(len(candidates)))]

    @property
    def visited(self) -> int:
        return self.skipped + self.used


def sample_negative(record: InstanceRecord, dataset: Dataset, rng: np.random.Generator,
                    split: str = 'train') -> Optional[InstanceRecord]:
    """Uniform draw over same-object records with disjoint attributes; None when there is none"""
    return NegativeSampler(dataset.split(split)).sample(record, rng)


@dataclass
class MultiSample:
    sym_pairs: List[Tuple[int, int]]
    corr_triple: Tuple[int, int, int]
    ranking: List[int] = field(default_factory=list)


def bucket_size(n: int) -> int:
    return max(1, int(np.floor(n * 0.1)))


def sample_multi(record: InstanceRecord, C: CorrelationMatrix, n: int,
                 rng: np.random.Generator) -> MultiSample:
    """(strong, neutral) attribute pairs from the correlation ranking, plus one random distinct triple.

    Attributes the record lacks are ranked by their summed correlation with
    the ones it has, descending, ties by index. The top and bottom buckets are
    strongly related, the middle bucket is neutral.
    """
    if n < 3:
        raise ConfigurationError(f"multi-attribute sampling needs at least 3 attributes, got {n}")
    absent = [a for a in range(n) if a not in record.attrs]
    ranking = sorted(absent, key=lambda a: (-corr_to_set(C, a, record.attrs), a))
    s = bucket_size(n)
    r = len(ranking)
    strong = list(dict.fromkeys(ranking[:s] + ranking[max(r - s, 0):]))
    start = max((r - s) // 2, 0)
    neutral = ranking[start:start + s]
    pairs = [(i, j) for i in strong for j in neutral if i != j]
    triple = tuple(int(a) for a in rng.choice(n, size=3, replace=False))
    return MultiSample(pairs, triple, ranking)


def build_batch(records: Sequence[InstanceRecord], sampler: NegativeSampler, rng: np.random.Generator,
                n_attrs: int, mode: str = 'single', corr: Optional[CorrelationMatrix] = None,
                dtype=np.float64) -> Batch:
    a_has, a_not = [], []
    for record in records:
        negative = sampler.sample(record, rng)
        a_has.append(_pick(record.attrs, rng))
        a_not.append(-1 if negative is None else _pick(negative.attrs, rng))
    batch = Batch(features=stack_features(records, dtype), objects=np.array([r.object_id for r in records]),
                  attr_mask=label_matrix(records, n_attrs).astype(bool),
                  a_has=np.array(a_has), a_not=np.array(a_not))
    if mode == 'multi':
        rows, sym_i, sym_j, corr_i, corr_j, triples = [], [], [], [], [], []
        for row, record in enumerate(records):
            drawn = sample_multi(record, corr, n_attrs, rng)
            for i, j in drawn.sym_pairs:
                rows.append(row)
                sym_i.append(i)
                sym_j.append(j)
                corr_i.append(corr_to_set(corr, i, record.attrs))
                corr_j.append(corr_to_set(corr, j, record.attrs))
            triples.append(drawn.corr_triple)
        batch.sym_rows, batch.sym_i, batch.sym_j = np.array(rows, int), np.array(sym_i, int), np.array(sym_j, int)
        batch.sym_corr_i, batch.sym_corr_j = np.array(corr_i), np.array(corr_j)
        batch.corr_triples = np.array(triples, int).reshape(-1, 3)
    return batch


def _pick(attrs, rng) -> int:
    if len(attrs) == 1:
        return next(iter(attrs))
    ordered = sorted(attrs)
    return ordered[int(rng.integers(len(ordered)))]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """The generator for one epoch depends only on (seed, epoch), so resumed runs replay it"""
    return np.random.default_rng([int(seed), int(epoch)])


# ---------------------------------------------------------------------------
# epoch loop

def _mean_breakdown(rows: List[Dict[str, Optional[float]]]) -> LossBreakdown:
    means = {}
    for name in LossBreakdown.COMPONENTS:
        values = [row[name] for row in rows if row[name] is not None]
        means[name] = float(np.mean(values)) if values else None
    return LossBreakdown(**means)


def train_epoch(model: SymNet, records: Sequence[InstanceRecord], cfg: TrainConfig, epoch: int = 0,
                sampler: Optional[NegativeSampler] = None, corr: Optional[CorrelationMatrix] = None,
                report_path: Optional[str] = None, last_good: Optional[str] = None) -> LossBreakdown:
    """One seeded pass over the training records; returns the mean of every component.

    Batches are visited in a permutation drawn from (seed, epoch). A trailing
    batch with fewer than two records is dropped. With lr == 0 the parameters
    are left untouched.
    """
    sampler = sampler or NegativeSampler(records)
    rng = epoch_rng(cfg.seed, epoch)
    lr = epoch_lr(cfg, epoch)
    weights = cfg.weights
    if epoch < cfg.warmup_epochs:
        weights = weights.without_transform_terms()
    if cfg.mode == 'multi' and corr is None:
        corr = compute_correlation(records, model.cfg.n_attrs)

    order = rng.permutation(len(records))
    rows = []
    for step, start in enumerate(range(0, len(order), cfg.batch_size)):
        chosen = [records[i] for i in order[start:start + cfg.batch_size]]
        if len(chosen) < 2:
            logger.debug(f"epoch {epoch}: dropping a final batch of {len(chosen)} record(s)")
            break
        batch = build_batch(chosen, sampler, rng, model.cfg.n_attrs, cfg.mode, corr, model.store.dtype)
        model.store.zero_grad()
        try:
            with Tape() as tape:
                terms = compute_loss_terms(model, batch, weights, corr, bn_mode='train')
                total = float(terms.total.data)
                if not np.isfinite(total):
                    raise NumericError(f"total loss is {total}")
                tape.backward(terms.total)
        except NumericError as e:
            message = f"epoch {epoch} step {step}: {e}; last good checkpoint: {last_good or 'none'}"
            logger.error(message)
            raise NumericError(message) from e

        if lr > 0:
            sgd_step(model.store, lr, cfg.momentum)
        else:
            model.store.zero_grad()

        row = terms.as_floats()
        rows.append(row)
        if step % cfg.log_interval == 0:
            record = {'epoch': epoch, 'step': step, **row}
            logger.info(f"epoch {epoch} step {step} total {row['total']:.6f}")
            if report_path:
                append_jsonl(record, report_path)
    if not rows:
        raise ConfigurationError(f"no batch of at least 2 records in {len(records)} training record(s)")
    return _mean_breakdown(rows)


def measure_losses(model: SymNet, records: Sequence[InstanceRecord], cfg: TrainConfig,
                   corr: Optional[CorrelationMatrix] = None, seed: Optional[int] = None) -> LossBreakdown:
    """Every component over all records at once, in inference mode, without touching the model"""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    if cfg.mode == 'multi' and corr is None:
        corr = compute_correlation(records, model.cfg.n_attrs)
    batch = build_batch(records, NegativeSampler(records), rng, model.cfg.n_attrs, cfg.mode, corr,
                        model.store.dtype)
    with no_grad():
        terms = compute_loss_terms(model, batch, cfg.weights, corr, bn_mode='eval')
    return LossBreakdown(**terms.as_floats())


# ---------------------------------------------------------------------------
# full runs

@dataclass
class FitResult:
    """initial and final are measure_losses over the training split before and after training"""
    checkpoint: str
    report_path: str
    curve_path: str
    curve: List[float]
    final: LossBreakdown
    initial: LossBreakdown
    evaluation: EvalReport
    epochs_run: int
    skipped: int
    used: int


def selection_score(report: EvalReport) -> float:
    """Validation score used by the best-checkpoint policy"""
    metrics = report.metrics
    attr = metrics['mauc'] if 'mauc' in metrics else metrics['attr_top1']
    return 0.5 * (attr + metrics['obj_top1'])


def build_model(cfg: TrainConfig, dataset: Dataset) -> SymNet:
    embedding = load_attr_embeddings(cfg.embeddings, dataset.attr_vocab, cfg.embedding_mode, cfg.dtype)
    return SymNet(cfg.model_config(dataset, embedding.dim), embedding.vectors, seed=cfg.seed)


def fit(cfg: TrainConfig, dataset: Optional[Dataset] = None, out_dir: Optional[str] = None) -> FitResult:
    """Train for cfg.epochs epochs, checkpoint per policy and write the run report"""
    cfg.validate()
    if dataset is None:
        if not cfg.dataset:
            raise ConfigurationError("no dataset given (set dataset or pass --dataset)")
        dataset = load_dataset(cfg.dataset)
    if cfg.mode == 'single' and dataset.multi_attr:
        raise ConfigurationError("dataset has records with several attributes; use mode=multi")

    out_dir = ensure_directory(out_dir or cfg.output_dir)
    checkpoint = os.path.join(out_dir, CHECKPOINT_NAME)
    report_path = os.path.join(out_dir, REPORT_NAME)
    curve_path = os.path.join(out_dir, CURVE_NAME)

    records = dataset.split('train')
    corr = compute_correlation(records, dataset.n_attrs) if cfg.mode == 'multi' else None
    policy = cfg.checkpoint_policy if dataset.has_split('val') else 'last'

    start_epoch, curve, rows, best = 0, [], [], None
    if cfg.resume:
        model, meta = SymNet.load(cfg.resume, vocab_hash(dataset.attr_vocab), vocab_hash(dataset.object_vocab))
        start_epoch = int(meta.get('epoch', 0))
        rows = list(meta.get('curve', []))
        curve = [row['total'] for row in rows]
        best = meta.get('best_score')
        if start_epoch > cfg.epochs:
            raise ConfigurationError(f"checkpoint {cfg.resume} is at epoch {start_epoch}, beyond epochs={cfg.epochs}")
        logger.info(f"Resuming from {cfg.resume} at epoch {start_epoch}")
    else:
        model = build_model(cfg, dataset)
        if os.path.exists(report_path):
            os.remove(report_path)
    initial = measure_losses(model, records, cfg, corr)

    sampler = NegativeSampler(records)
    last_good = cfg.resume or None
    for epoch in range(start_epoch, cfg.epochs):
        epoch_mean = train_epoch(model, records, cfg, epoch, sampler, corr, report_path, last_good)
        values = epoch_mean.as_floats()
        rows.append(values)
        curve.append(values['total'])
        summary = {'epoch': epoch, 'epoch_mean': values,
                   'negatives': {'skipped': sampler.skipped, 'used': sampler.used}}

        save = policy == 'last'
        if policy == 'best':
            score = selection_score(evaluate_model(model, dataset, 'val', cfg.gamma))
            summary['val_score'] = score
            if best is None or score > best:
                best, save = score, True
        if save:
            model.save(checkpoint, {'epoch': epoch + 1, 'curve': rows, 'best_score': best,
                                    'train': cfg.describe()})
            last_good = checkpoint
        append_jsonl(summary, report_path)

    if not os.path.exists(checkpoint):
        model.save(checkpoint, {'epoch': start_epoch, 'curve': rows, 'best_score': best,
                                'train': cfg.describe()})
    if policy == 'best':
        model, _ = SymNet.load(checkpoint)
    final = measure_losses(model, records, cfg, corr)

    write_tsv([[i] + [row[name] if row[name] is not None else '' for name in LossBreakdown.COMPONENTS]
               for i, row in enumerate(rows)], ['epoch'] + list(LossBreakdown.COMPONENTS), curve_path)
    evaluation = evaluate_model(model, dataset, 'test', cfg.gamma)
    append_jsonl({'summary': {'epochs': len(curve), 'final': final.as_floats(), 'initial': initial.as_floats(),
                              'evaluation': evaluation.to_json(), 'checkpoint': checkpoint,
                              'negatives': {'skipped': sampler.skipped, 'used': sampler.used}}},
                 report_path)
    logger.info(f"Finished {len(curve)} epoch(s); checkpoint {checkpoint}")
    return FitResult(checkpoint, report_path, curve_path, curve, final, initial, evaluation,
                     len(curve), sampler.skipped, sampler.used)
