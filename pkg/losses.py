"""
Training objectives.

Every function returns a scalar Tensor averaged over the batch, so gradients
can be taken with a Tape. Hinges use [x]_+ = max(x, 0) with subgradient 0 at
the kink.
"""

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigurationError, ContractError
from models import RMDScores, SymNet
from numgrad import Tensor, distance, hinge, log_softmax

logger = logging.getLogger(__name__)

Scalar = Union[float, Tensor]


@dataclass
class LossWeights:
    lambda1: float = 5e-2
    lambda2: float = 1e-2
    lambda3: float = 1.0
    lambda4: float = 1e-2
    lambda5: float = 3e-2
    lambda6: Optional[float] = None
    lambda7: Optional[float] = None
    alpha: float = 0.5
    mode: str = 'single'

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ('single', 'multi'):
            raise ConfigurationError(f"loss mode must be 'single' or 'multi', got '{self.mode}'")
        if not self.alpha > 0:
            raise ConfigurationError(f"triplet margin must be positive, got {self.alpha}")
        if self.mode == 'multi' and (self.lambda6 is None or self.lambda7 is None):
            raise ConfigurationError("multi mode needs lambda6 and lambda7")
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name.startswith('lambda') and value is not None and value < 0:
                raise ConfigurationError(f"{f.name} must be non-negative, got {value}")

    def without_transform_terms(self) -> 'LossWeights':
        """Only the classification and triplet terms (first phase of a two-phase schedule)"""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(lambda1=0.0, lambda2=0.0)
        return LossWeights(**values)


@dataclass
class LossBreakdown:
    sym: Optional[Scalar] = None
    clo: Optional[Scalar] = None
    inv: Optional[Scalar] = None
    com: Optional[Scalar] = None
    cls_a: Optional[Scalar] = None
    cls_o: Optional[Scalar] = None
    tri: Optional[Scalar] = None
    tri_sym: Optional[Scalar] = None
    tri_corr: Optional[Scalar] = None
    total: Optional[Scalar] = None

    COMPONENTS = ('sym', 'clo', 'inv', 'com', 'cls_a', 'cls_o', 'tri', 'tri_sym', 'tri_corr', 'total')

    def as_floats(self) -> Dict[str, Optional[float]]:
        out = {}
        for name in self.COMPONENTS:
            value = getattr(self, name)
            out[name] = None if value is None else float(value.data if isinstance(value, Tensor) else value)
        return out

    @property
    def axiom(self) -> Optional[float]:
        values = self.as_floats()
        if any(values[k] is None for k in ('clo', 'inv', 'com')):
            return None
        return values['clo'] + values['inv'] + values['com']


@dataclass
class Batch:
    """One training batch; a_not is -1 where no negative could be sampled"""
    features: np.ndarray
    objects: np.ndarray
    attr_mask: np.ndarray
    a_has: np.ndarray
    a_not: np.ndarray
    sym_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    sym_i: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    sym_j: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    sym_corr_i: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sym_corr_j: np.ndarray = field(default_factory=lambda: np.zeros(0))
    corr_triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), int))

    def __len__(self):
        return len(self.objects)


class TransformCache:
    """Memoised CoN/DecoN outputs shared by the symmetry, axiom and classification terms"""

    def __init__(self, model: SymNet, f, a_has, a_not, bn_mode: str = 'train'):
        a_has, a_not = np.asarray(a_has), np.asarray(a_not)
        if np.any(a_has == a_not):
            row = int(np.flatnonzero(a_has == a_not)[0])
            raise ContractError(f"row {row}: the present and absent attribute must differ (both {a_has[row]})")
        self.model, self.bn_mode = model, bn_mode
        self.f = model._tensor(f)
        self.a_has, self.a_not = a_has, a_not
        self._memo: Dict[Tuple, Tensor] = {}

    def get(self, *steps: Tuple[str, str]) -> Tensor:
        """Apply (mode, 'has'|'not') steps to f in order"""
        key = tuple(steps)
        if key not in self._memo:
            x = self.get(*steps[:-1]) if len(steps) > 1 else self.f
            mode, which = steps[-1]
            attrs = self.a_has if which == 'has' else self.a_not
            self._memo[key] = self.model.transform(x, self.model.embeddings[attrs], mode, self.bn_mode)
        return self._memo[key]


def _dist(model: SymNet, a: Tensor, b: Tensor) -> Tensor:
    return distance(a, b, model.cfg.distance)


def symmetry_loss(model: SymNet, f, a_has, a_not, bn_mode: str = 'train',
                  cache: Optional[TransformCache] = None) -> Tensor:
    """||f - f·T+(a_has)|| + ||f - f·T-(a_not)||"""
    c = cache or TransformCache(model, f, a_has, a_not, bn_mode)
    return (_dist(model, c.f, c.get(('couple', 'has'))) + _dist(model, c.f, c.get(('decouple', 'not')))).mean()


def axiom_losses(model: SymNet, f, a_has, a_not, bn_mode: str = 'train',
                 cache: Optional[TransformCache] = None) -> Tuple[Tensor, Tensor, Tensor]:
    """Closure, invertibility and commutativity terms"""
    c = cache or TransformCache(model, f, a_has, a_not, bn_mode)
    plus_has, minus_has = ('couple', 'has'), ('decouple', 'has')
    plus_not, minus_not = ('couple', 'not'), ('decouple', 'not')
    clo = (_dist(model, c.get(plus_has, minus_has), c.get(minus_has))
           + _dist(model, c.get(minus_not, plus_not), c.get(plus_not))).mean()
    inv = (_dist(model, c.get(plus_not, minus_not), c.f)
           + _dist(model, c.get(minus_has, plus_has), c.f)).mean()
    com = _dist(model, c.get(plus_has, minus_not), c.get(minus_not, plus_has)).mean()
    return clo, inv, com


def cross_entropy(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=int).reshape(-1)
    classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        bad = int(targets[(targets < 0) | (targets >= classes)][0])
        raise ContractError(f"invalid target index {bad} for {classes} classes")
    log_probs = log_softmax(logits.reshape(-1, classes))
    return -(log_probs[np.arange(len(targets)), targets].mean())


def classification_losses(model: SymNet, f, targets, a_has, a_not, bn_mode: str = 'train',
                          cache: Optional[TransformCache] = None) -> Tuple[Tensor, Tensor]:
    """Attribute cross-entropy on transformed embeddings, object cross-entropy on inputs and outputs"""
    c = cache or TransformCache(model, f, a_has, a_not, bn_mode)
    coupled_not, coupled_has = c.get(('couple', 'not')), c.get(('couple', 'has'))
    decoupled_not, decoupled_has = c.get(('decouple', 'not')), c.get(('decouple', 'has'))
    cls_a = (cross_entropy(model.attr_logits(coupled_not, c.f), c.a_not)
             + cross_entropy(model.attr_logits(coupled_has, c.f), c.a_has)
             + cross_entropy(model.attr_logits(decoupled_not, c.f), c.a_has)) * (1.0 / 3.0)
    cls_o = (cross_entropy(model.obj_logits(c.f), targets)
             + cross_entropy(model.obj_logits(coupled_not), targets)
             + cross_entropy(model.obj_logits(decoupled_has), targets)) * (1.0 / 3.0)
    return cls_a, cls_o


def _as_mask(X, n: int, rows: int) -> np.ndarray:
    if isinstance(X, np.ndarray) and X.dtype == bool:
        return X.reshape(rows, n)
    sets = [X] if rows == 1 and not (len(X) and isinstance(next(iter(X)), (set, frozenset, list, tuple))) else X
    mask = np.zeros((rows, n), bool)
    for row, members in enumerate(sets):
        mask[row, sorted(members)] = True
    return mask


def rmd_triplet_single(scores: RMDScores, X, alpha: float = 0.5) -> Tensor:
    """sum_{i in X} [d+ - d- + alpha]_+ + sum_{j not in X} [d- - d+ + alpha]_+, averaged over instances"""
    if not alpha > 0:
        raise ConfigurationError(f"triplet margin must be positive, got {alpha}")
    d_plus, d_minus = scores.d_plus, scores.d_minus
    n = d_plus.shape[-1]
    rows = 1 if d_plus.ndim == 1 else d_plus.shape[0]
    mask = _as_mask(X, n, rows).astype(d_plus.dtype)
    if d_plus.ndim == 1:
        mask = mask[0]
    present = hinge(d_plus - d_minus + alpha) * mask
    absent = hinge(d_minus - d_plus + alpha) * (1.0 - mask)
    per_instance = (present + absent).sum(axis=-1)
    return per_instance.mean()


def multi_sym_triplet(corr_i, corr_j, d_minus_i, d_minus_j, alpha: float = 0.5) -> Tensor:
    """[(corr_i - corr_j)(d-_j - d-_i) + alpha]_+ averaged over the sampled pairs"""
    weight = np.asarray(corr_i, dtype=float) - np.asarray(corr_j, dtype=float)
    if weight.size == 0:
        return Tensor(0.0)
    return hinge((d_minus_j - d_minus_i) * weight + alpha).mean()


def attr_corr_triplet(corr_ij, corr_ik, att_dists: Mapping[str, Scalar], alpha: float = 0.5,
                      triple: Optional[Sequence] = None) -> Tensor:
    """Attention distances should follow attribute correlation, for CoN (plus) and DecoN (minus)"""
    if triple is not None:
        triples = np.atleast_2d(np.asarray(triple))
        for i, j, k in triples:
            if len({int(i), int(j), int(k)}) != 3:
                raise ContractError(f"attribute triple ({i}, {j}, {k}) is not distinct")
    weight = np.asarray(corr_ij, dtype=float) - np.asarray(corr_ik, dtype=float)
    if weight.size == 0:
        return Tensor(0.0)
    plus = hinge((att_dists['plus_ij'] - att_dists['plus_ik']) * weight + alpha)
    minus = hinge((att_dists['minus_ij'] - att_dists['minus_ik']) * weight + alpha)
    return (plus + minus).mean()


def total_loss(breakdown: LossBreakdown, weights: LossWeights) -> Scalar:
    """Weighted sum of the components; in multi mode the triplet slot carries lambda6/lambda7 inside lambda5"""
    needed = ['sym', 'clo', 'inv', 'com', 'cls_a', 'cls_o', 'tri']
    if weights.mode == 'multi':
        needed += ['tri_sym', 'tri_corr']
    missing = [name for name in needed if getattr(breakdown, name) is None]
    if missing:
        raise ContractError(f"{weights.mode} mode total needs component(s): {', '.join(missing)}")
    b = breakdown
    triplet = b.tri
    if weights.mode == 'multi':
        triplet = b.tri + weights.lambda6 * b.tri_sym + weights.lambda7 * b.tri_corr
    return (weights.lambda1 * b.sym
            + weights.lambda2 * (b.clo + b.inv + b.com)
            + weights.lambda3 * b.cls_a
            + weights.lambda4 * b.cls_o
            + weights.lambda5 * triplet)


def compute_loss_terms(model: SymNet, batch: Batch, weights: LossWeights, corr=None,
                       bn_mode: str = 'train') -> LossBreakdown:
    """Every component for one batch plus the weighted total, as Tensors"""
    f = Tensor(batch.features, dtype=model.store.dtype)
    zero = Tensor(0.0, dtype=model.store.dtype)
    terms = LossBreakdown()

    usable = np.flatnonzero(batch.a_not >= 0)
    if len(usable) >= 2 or (len(usable) == 1 and bn_mode == 'eval'):
        cache = TransformCache(model, f[usable], batch.a_has[usable], batch.a_not[usable], bn_mode)
        terms.sym = symmetry_loss(model, None, None, None, cache=cache)
        terms.clo, terms.inv, terms.com = axiom_losses(model, None, None, None, cache=cache)
        terms.cls_a, terms.cls_o = classification_losses(model, None, batch.objects[usable], None, None,
                                                         cache=cache)
    else:
        terms.sym = terms.clo = terms.inv = terms.com = terms.cls_a = zero
        terms.cls_o = cross_entropy(model.obj_logits(f), batch.objects)

    d_plus, d_minus = model.moving_distances(f, bn_mode)
    terms.tri = rmd_triplet_single(RMDScores(d_plus, d_minus), batch.attr_mask, weights.alpha)

    if weights.mode == 'multi':
        if len(batch.sym_rows):
            terms.tri_sym = multi_sym_triplet(batch.sym_corr_i, batch.sym_corr_j,
                                              d_minus[batch.sym_rows, batch.sym_i],
                                              d_minus[batch.sym_rows, batch.sym_j], weights.alpha)
        else:
            terms.tri_sym = zero
        if len(batch.corr_triples):
            if corr is None:
                raise ContractError("multi mode needs the attribute correlation matrix")
            i, j, k = batch.corr_triples.T
            plus, minus = model.attention_distances(bn_mode)
            terms.tri_corr = attr_corr_triplet(
                corr[i, j], corr[i, k],
                {'plus_ij': plus[i, j], 'plus_ik': plus[i, k], 'minus_ij': minus[i, j], 'minus_ik': minus[i, k]},
                weights.alpha, triple=batch.corr_triples)
        else:
            terms.tri_corr = zero

    terms.total = total_loss(terms, weights)
    return terms


# ---------------------------------------------------------------------------
# gradient checking on a toy problem

GRADCHECK_TERMS = ('sym', 'clo', 'inv', 'com', 'cls_a', 'cls_o', 'tri', 'tri_sym', 'tri_corr', 'total')


def toy_problem(seed: int, feature_dim: int = 8, n_attrs: int = 4, n_objects: int = 3,
                batch_size: int = 4,
                dtype: str = 'float64') -> Tuple[SymNet, Batch, LossWeights, np.ndarray]:
    """A small model with one multi-attribute batch touching every loss term"""
    from models import ModelConfig

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_dim=feature_dim, attr_dim=n_attrs, n_attrs=n_attrs, n_objects=n_objects,
                      attn_hidden=6, trunk_hidden=8, cls_hidden=6, dtype=dtype)
    model = SymNet(cfg, np.eye(n_attrs), seed=seed)
    # move the bias and scale terms off their initial values so their gradients are generic
    for name, param in model.store.params.items():
        if not name.endswith('.weight'):
            param.data += rng.normal(0.0, 0.1, size=param.shape)

    # the last attribute is never present, so every row has an absent one
    mask = rng.random((batch_size, n_attrs)) < 0.4
    mask[:, -1] = False
    mask[np.arange(batch_size), rng.integers(n_attrs - 1, size=batch_size)] = True
    a_has = np.array([rng.choice(np.flatnonzero(row)) for row in mask])
    a_not = np.array([rng.choice(np.flatnonzero(~row)) for row in mask])

    labels = rng.random((20, n_attrs)) < 0.5
    labels[0], labels[1] = True, False
    centered = labels - labels.mean(axis=0)
    corr = np.corrcoef(centered.T)
    rows, sym_i, sym_j = [], [], []
    for row in range(batch_size):
        absent = np.flatnonzero(~mask[row])
        if len(absent) >= 2:
            i, j = rng.choice(absent, size=2, replace=False)
            rows.append(row)
            sym_i.append(i)
            sym_j.append(j)
    rows, sym_i, sym_j = np.array(rows, int), np.array(sym_i, int), np.array(sym_j, int)
    corr_i = np.array([corr[i, np.flatnonzero(mask[r])].sum() for r, i in zip(rows, sym_i)])
    corr_j = np.array([corr[j, np.flatnonzero(mask[r])].sum() for r, j in zip(rows, sym_j)])
    triples = np.array([rng.choice(n_attrs, size=3, replace=False) for _ in range(batch_size)])

    batch = Batch(features=rng.normal(size=(batch_size, feature_dim)).astype(model.store.dtype),
                  objects=rng.integers(n_objects, size=batch_size), attr_mask=mask,
                  a_has=a_has, a_not=a_not, sym_rows=rows, sym_i=sym_i, sym_j=sym_j,
                  sym_corr_i=corr_i, sym_corr_j=corr_j, corr_triples=triples)
    weights = LossWeights(0.5, 0.3, 1.0, 0.7, 0.9, 0.4, 0.6, alpha=0.5, mode='multi')
    return model, batch, weights, corr


def check_loss_gradients(seed: int, terms: Sequence[str] = GRADCHECK_TERMS, tol: float = 1e-5,
                         dtype: str = 'float64'):
    """finite_diff_check of every requested loss component on the toy problem of one seed.

    For float32 the tape gradients of the float32 model are compared with
    central differences taken on a float64 copy of the same parameters.
    """
    from numgrad import finite_diff_check, resolve_dtype, tape_gradients

    unknown = [t for t in terms if t not in GRADCHECK_TERMS]
    if unknown:
        raise ConfigurationError(f"unknown loss term(s) {', '.join(unknown)} "
                                 f"(choose from {', '.join(GRADCHECK_TERMS)})")
    model, batch, weights, corr = toy_problem(seed, dtype=dtype)

    def loss_fn_for(net: SymNet):
        def loss_fn():
            breakdown = compute_loss_terms(net, batch, weights, corr, bn_mode='train')
            return {term: getattr(breakdown, term) for term in terms}
        return loss_fn

    if resolve_dtype(dtype) == np.float64:
        return finite_diff_check(loss_fn_for(model), model.store, tol=tol)
    _, gradients = tape_gradients(loss_fn_for(model), model.store)
    reference = toy_problem(seed)[0]
    reference.store.load_state(model.store)
    return finite_diff_check(loss_fn_for(reference), reference.store, tol=tol, gradients=gradients)
