"""
Evaluation metrics.

Rankings break ties by ascending label index (stable sort), so every metric
is deterministic for a given score matrix.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import rankdata

from data import (CorrelationMatrix, Dataset, InstanceRecord, PairSpace, corr_to_set, label_matrix,
                  stack_features)
from errors import ConfigurationError, ContractError
from models import SymNet, attr_prob, pair_probs
from numgrad import no_grad
from utils import write_tsv

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    metrics: Dict[str, float] = field(default_factory=dict)
    per_attr_auc: Optional[List[float]] = None
    bias_curve: Optional[List[Tuple[float, float, float]]] = None
    split: str = 'test'
    n_instances: int = 0

    def validate(self) -> 'EvalReport':
        for name, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"metric {name} = {value} outside [0, 1]")
        if 'hm' in self.metrics and 'best_seen' in self.metrics:
            if self.metrics['hm'] > max(self.metrics['best_seen'], self.metrics['best_unseen']) + 1e-12:
                raise ContractError("harmonic mean exceeds both of its accuracies")
        return self

    def to_json(self) -> Dict:
        out = {'split': self.split, 'n_instances': self.n_instances, 'metrics': dict(self.metrics)}
        if self.per_attr_auc is not None:
            out['per_attr_auc'] = [None if np.isnan(v) else v for v in self.per_attr_auc]
        if self.bias_curve is not None:
            out['bias_curve'] = [[_json_float(b), s, u] for b, s, u in self.bias_curve]
        return out


def _json_float(value: float):
    if np.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return float(value)


def _rank(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-scores, axis=-1, kind='stable')


def topk_accuracy(scores, truth, k: int = 1) -> float:
    """Fraction of rows whose true label is among the k highest scores"""
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    truth = np.asarray(truth, dtype=int).reshape(-1)
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}")
    if k > scores.shape[1]:
        raise ConfigurationError(f"k={k} exceeds the {scores.shape[1]} available labels")
    if len(truth) != scores.shape[0]:
        raise ContractError(f"{scores.shape[0]} score rows but {len(truth)} labels")
    if not len(truth):
        raise ContractError("no instances to score")
    top = _rank(scores)[:, :k]
    return float(np.mean((top == truth[:, None]).any(axis=1)))


def mauc(scores, labels) -> Tuple[float, np.ndarray]:
    """Mean per-attribute ROC-AUC; ties count one half.

    Attributes without both a positive and a negative instance are left out
    (NaN in the returned vector).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ContractError(f"scores {list(scores.shape)} and labels {list(labels.shape)} differ in shape")
    per_attr = np.full(scores.shape[1], np.nan)
    excluded = []
    for a in range(scores.shape[1]):
        pos = labels[:, a]
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            excluded.append(a)
            continue
        ranks = rankdata(scores[:, a])
        per_attr[a] = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    if excluded:
        logger.warning(f"AUC undefined for attribute(s) {', '.join(map(str, excluded))}; excluded from mAUC")
    if np.all(np.isnan(per_attr)):
        raise ContractError("no attribute has both positive and negative instances")
    return float(np.nanmean(per_attr)), per_attr


def pair_scores(model: SymNet, features, space: PairSpace, gamma: float = 1.0) -> np.ndarray:
    """p(a, o) = p(a) * p(o) over the pair grid, -inf for infeasible pairs"""
    with no_grad():
        p_a = attr_prob(model.rmd(np.atleast_2d(features), gamma))
        p_o = model.object_probs(np.atleast_2d(features))
    return pair_probs(p_a, p_o, space)


def _truth_pairs(records: Sequence[InstanceRecord], space: PairSpace) -> np.ndarray:
    truth = np.array([space.index(r.attr, r.object_id) for r in records], dtype=int)
    infeasible = [records[i].record_id for i in np.flatnonzero(~space.feasible_mask[truth])]
    if infeasible:
        raise ContractError(f"record(s) {infeasible[:5]} carry a pair outside the feasible set")
    return truth


def czsl_topk(model: SymNet, records: Sequence[InstanceRecord], space: PairSpace, gamma: float = 1.0,
              k: int = 1, scores: Optional[np.ndarray] = None) -> float:
    """Top-k accuracy of the true pair among feasible pairs"""
    n_feasible = int(space.feasible_mask.sum())
    if k > n_feasible:
        raise ConfigurationError(f"k={k} exceeds the {n_feasible} feasible pairs")
    truth = _truth_pairs(records, space)
    if scores is None:
        scores = pair_scores(model, stack_features(records, model.store.dtype), space, gamma)
    return topk_accuracy(scores, truth, k)


@dataclass
class GeneralizedResult:
    seen: np.ndarray
    unseen: np.ndarray
    biases: np.ndarray
    hm: float
    auc: float
    closed: float
    best_seen: float
    best_unseen: float

    @property
    def curve(self) -> List[Tuple[float, float, float]]:
        return [(float(b), float(s), float(u)) for b, s, u in zip(self.biases, self.seen, self.unseen)]


def harmonic_mean(seen: float, unseen: float) -> float:
    return 0.0 if seen + unseen == 0 else 2.0 * seen * unseen / (seen + unseen)


def default_bias_grid(scores: np.ndarray, space: PairSpace) -> np.ndarray:
    """Per-instance gaps between the best seen and best unseen score, plus both infinities"""
    seen_best = np.where(space.seen_mask, scores, -np.inf).max(axis=1)
    unseen_best = np.where(space.unseen_mask, scores, -np.inf).max(axis=1)
    gaps = seen_best - unseen_best
    gaps = np.unique(gaps[np.isfinite(gaps)])
    return np.concatenate([[-np.inf], gaps, [np.inf]])


def _biased_predictions(scores: np.ndarray, space: PairSpace, bias: float) -> np.ndarray:
    if bias == np.inf:
        shifted = np.where(space.seen_mask, -np.inf, scores)
    elif bias == -np.inf:
        shifted = np.where(space.unseen_mask, -np.inf, scores)
    else:
        shifted = scores + bias * space.unseen_mask
    return np.argmax(shifted, axis=1)


def generalized_from_scores(scores: np.ndarray, truth: np.ndarray, space: PairSpace,
                            bias_grid: Optional[Sequence[float]] = None) -> GeneralizedResult:
    """Seen/unseen accuracy as a calibration bias is added to unseen-pair scores"""
    scores = np.where(space.feasible_mask, np.asarray(scores, dtype=float), -np.inf)
    truth = np.asarray(truth, dtype=int)
    on_seen, on_unseen = space.seen_mask[truth], space.unseen_mask[truth]
    if not on_seen.any() or not on_unseen.any():
        raise ContractError(f"generalized evaluation needs seen and unseen instances "
                            f"(have {int(on_seen.sum())} seen, {int(on_unseen.sum())} unseen)")
    if bias_grid is None:
        grid = default_bias_grid(scores, space)
    else:
        grid = np.asarray(bias_grid, dtype=float)
        if grid.size == 0 or np.any(np.diff(grid) < 0):
            raise ConfigurationError("bias grid must be non-empty and ascending")

    seen, unseen = np.zeros(len(grid)), np.zeros(len(grid))
    for i, bias in enumerate(grid):
        correct = _biased_predictions(scores, space, bias) == truth
        seen[i], unseen[i] = correct[on_seen].mean(), correct[on_unseen].mean()

    hms = np.array([harmonic_mean(s, u) for s, u in zip(seen, unseen)])
    best = int(np.argmax(hms))
    # the grid ascends, so seen accuracy falls and unseen accuracy rises along it
    auc = float(abs(trapezoid(unseen[::-1], seen[::-1])))
    closed_correct = _biased_predictions(scores, space, np.inf) == truth
    return GeneralizedResult(seen, unseen, grid, float(hms[best]), auc, float(closed_correct[on_unseen].mean()),
                             float(seen[best]), float(unseen[best]))


def generalized_czsl(model: SymNet, records: Sequence[InstanceRecord], space: PairSpace, gamma: float = 1.0,
                     bias_grid: Optional[Sequence[float]] = None) -> GeneralizedResult:
    truth = _truth_pairs(records, space)
    scores = pair_scores(model, stack_features(records, model.store.dtype), space, gamma)
    return generalized_from_scores(scores, truth, space, bias_grid)


def evaluate_model(model: SymNet, dataset: Dataset, split: str = 'test', gamma: float = 1.0) -> EvalReport:
    """Attribute, object and (when the dataset has a pair space) CZSL metrics on one split"""
    records = dataset.split(split)
    features = stack_features(records, model.store.dtype)
    report = EvalReport(split=split, n_instances=len(records))
    with no_grad():
        rmd = model.rmd(features, gamma)
        p_o = model.object_probs(features)
    d = rmd.d.data
    objects = np.array([r.object_id for r in records])
    report.metrics['obj_top1'] = topk_accuracy(p_o, objects, 1)

    if dataset.multi_attr:
        report.metrics['mauc'], per_attr = mauc(d, label_matrix(records, dataset.n_attrs))
        report.per_attr_auc = [float(v) for v in per_attr]
        return report.validate()

    attrs = np.array([r.attr for r in records])
    for k in range(1, min(3, dataset.n_attrs) + 1):
        report.metrics[f'attr_top{k}'] = topk_accuracy(d, attrs, k)

    if dataset.pairs is None:
        return report.validate()
    space = dataset.pair_space()
    truth = _truth_pairs(records, space)
    scores = pair_probs(attr_prob(rmd), p_o, space)
    on_unseen = space.unseen_mask[truth]
    if on_unseen.any():
        n_feasible = int(space.feasible_mask.sum())
        for k in range(1, min(3, n_feasible) + 1):
            report.metrics[f'czsl_top{k}'] = topk_accuracy(scores[on_unseen], truth[on_unseen], k)
        if space.seen_mask[truth].any():
            result = generalized_from_scores(scores, truth, space)
            report.metrics.update(hm=result.hm, auc=result.auc, closed=result.closed,
                                  best_seen=result.best_seen, best_unseen=result.best_unseen)
            report.bias_curve = result.curve
    return report.validate()


def correlation_distance_scatter(model: SymNet, records: Sequence[InstanceRecord],
                                 C: CorrelationMatrix) -> Tuple[np.ndarray, float]:
    """(corr(a, X), removal distance) for every attribute a a record lacks, and their rank correlation.

    Both quantities are ranked within each record and the centred ranks are
    pooled, so the statistic compares attributes of the same instance only.
    Distances grow with the feature norm and corr(a, X) with the size of X;
    a plain pooled Spearman coefficient mixes those two effects in.
    """
    with no_grad():
        _, d_minus = model.moving_distances(stack_features(records, model.store.dtype), 'eval')
    points, corr_ranks, dist_ranks = [], [], []
    for row, record in enumerate(records):
        absent = [a for a in range(model.cfg.n_attrs) if a not in record.attrs]
        pairs = [(corr_to_set(C, a, record.attrs), float(d_minus.data[row, a])) for a in absent]
        points.extend(pairs)
        if len(pairs) < 2:
            continue
        values = np.array(pairs, dtype=float)
        corr_ranks.append(rankdata(values[:, 0]) - (len(values) + 1) / 2.0)
        dist_ranks.append(rankdata(values[:, 1]) - (len(values) + 1) / 2.0)
    points = np.array(points, dtype=float).reshape(-1, 2)
    x = np.concatenate(corr_ranks) if corr_ranks else np.zeros(0)
    y = np.concatenate(dist_ranks) if dist_ranks else np.zeros(0)
    scale = np.sqrt(np.dot(x, x) * np.dot(y, y))
    if not scale > 0:
        logger.warning("correlation-distance scatter is degenerate; rank correlation set to 0")
        return points, 0.0
    return points, float(np.dot(x, y) / scale)


def write_bias_sweep(report: EvalReport, path: str) -> str:
    if not report.bias_curve:
        raise ContractError("report has no bias sweep")
    rows = [[_json_float(b), s, u, harmonic_mean(s, u)] for b, s, u in report.bias_curve]
    return write_tsv(rows, ['bias', 'seen', 'unseen', 'hm'], path)


TABLE_LAYOUTS = {
    'attribute': [('attr_top1', 'Attr Top-1'), ('attr_top2', 'Top-2'), ('attr_top3', 'Top-3'),
                  ('mauc', 'mAUC'), ('obj_top1', 'Obj Top-1')],
    'closed': [('czsl_top1', 'Top-1'), ('czsl_top2', 'Top-2'), ('czsl_top3', 'Top-3')],
    'generalized': [('best_seen', 'Seen'), ('best_unseen', 'Unseen'), ('hm', 'HM'), ('auc', 'AUC'),
                    ('closed', 'Closed')],
}


def render_table(report: EvalReport) -> str:
    """Plain-text tables in percent, one block per layout that has any value"""
    blocks = []
    for title, columns in TABLE_LAYOUTS.items():
        present = [(key, label) for key, label in columns if key in report.metrics]
        if not present:
            continue
        width = max(10, *(len(label) + 2 for _, label in present))
        header = ''.join(label.rjust(width) for _, label in present)
        values = ''.join(f"{100.0 * report.metrics[key]:.1f}".rjust(width) for key, _ in present)
        blocks.append(f"[{title}] {report.split} ({report.n_instances} instances)\n{header}\n{values}")
    return '\n\n'.join(blocks)
