import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from errors import CheckpointError, ConfigurationError, DimensionError
from numgrad import (Affine, BatchNorm, ParamStore, Tensor, activation, affine, batchnorm, broadcast_to,
                     concat, distance, load_checkpoint, no_grad, norm, reshape, save_checkpoint)

logger = logging.getLogger(__name__)

TRANSFORM_MODES = ('couple', 'decouple')


@dataclass
class ModelConfig:
    feature_dim: int
    attr_dim: int
    n_attrs: int
    n_objects: int
    attn_hidden: int = 0
    trunk_hidden: int = 0
    cls_hidden: int = 0
    bn_momentum: float = 0.9
    bn_single_sample: str = 'error'
    distance: str = 'l2'
    attr_cls_input: str = 'transformed'
    dtype: str = 'float64'
    attr_vocab_hash: str = ''
    object_vocab_hash: str = ''

    def __post_init__(self):
        # 0 means "derive from the feature dimension"
        self.attn_hidden = self.attn_hidden or self.feature_dim
        self.trunk_hidden = self.trunk_hidden or 2 * self.feature_dim
        self.cls_hidden = self.cls_hidden or self.feature_dim
        if self.distance not in ('l2', 'l1', 'cosine'):
            raise ConfigurationError(f"unknown distance '{self.distance}'")
        if self.attr_cls_input not in ('transformed', 'difference'):
            raise ConfigurationError(f"attr_cls_input must be 'transformed' or 'difference', "
                                     f"got '{self.attr_cls_input}'")

    @classmethod
    def from_dict(cls, values: Dict) -> 'ModelConfig':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class RMDScores:
    """Moving distances under coupling (d_plus) and decoupling (d_minus) for every attribute"""
    d_plus: Tensor
    d_minus: Tensor
    gamma: float = 1.0

    @property
    def d(self) -> Tensor:
        return self.d_minus - self.d_plus


class TransformNet:
    """Attribute-as-attention gate followed by a two-layer trunk back into feature space"""

    def __init__(self, store: ParamStore, name: str, cfg: ModelConfig):
        self.name = name
        bn = dict(momentum=cfg.bn_momentum, single_sample=cfg.bn_single_sample)
        self.attn_in = Affine(store, f'{name}.attn.fc1', cfg.attr_dim, cfg.attn_hidden)
        self.attn_bn = BatchNorm(store, f'{name}.attn.bn1', cfg.attn_hidden, **bn)
        self.attn_out = Affine(store, f'{name}.attn.fc2', cfg.attn_hidden, cfg.feature_dim)
        self.trunk_in = Affine(store, f'{name}.trunk.fc1', cfg.feature_dim + cfg.attr_dim, cfg.trunk_hidden)
        self.trunk_bn = BatchNorm(store, f'{name}.trunk.bn1', cfg.trunk_hidden, **bn)
        self.trunk_out = Affine(store, f'{name}.trunk.fc2', cfg.trunk_hidden, cfg.feature_dim)

    def attention(self, a: Tensor, bn_mode: str) -> Tensor:
        hidden = activation('relu', batchnorm(self.attn_bn, affine(self.attn_in, a), bn_mode))
        return activation('sigmoid', affine(self.attn_out, hidden))

    def __call__(self, f: Tensor, a: Tensor, bn_mode: str) -> Tensor:
        att = self.attention(a, bn_mode)
        gated = f * att + f
        hidden = activation('relu', batchnorm(self.trunk_bn, affine(self.trunk_in, concat([gated, a])), bn_mode))
        return affine(self.trunk_out, hidden)


class Classifier:
    """Two affine layers with a ReLU in between"""

    def __init__(self, store: ParamStore, name: str, in_dim: int, hidden: int, out_dim: int):
        self.fc1 = Affine(store, f'{name}.fc1', in_dim, hidden)
        self.fc2 = Affine(store, f'{name}.fc2', hidden, out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        return affine(self.fc2, activation('relu', affine(self.fc1, x)))


class SymNet:
    """Coupling and decoupling networks plus the attribute and object heads"""

    def __init__(self, cfg: ModelConfig, attr_embeddings: np.ndarray, seed: int = 0):
        attr_embeddings = np.asarray(attr_embeddings)
        if attr_embeddings.shape != (cfg.n_attrs, cfg.attr_dim):
            raise DimensionError(f"attribute embeddings have shape {list(attr_embeddings.shape)}, "
                                 f"expected [{cfg.n_attrs}, {cfg.attr_dim}]")
        self.cfg = cfg
        self.store = ParamStore(seed=seed, dtype=cfg.dtype)
        self.con = TransformNet(self.store, 'con', cfg)
        self.decon = TransformNet(self.store, 'decon', cfg)
        self.attr_classifier = Classifier(self.store, 'attr_cls', cfg.feature_dim, cfg.cls_hidden, cfg.n_attrs)
        self.obj_classifier = Classifier(self.store, 'obj_cls', cfg.feature_dim, cfg.cls_hidden, cfg.n_objects)
        self.store.add_buffer('embeddings.attr', attr_embeddings)
        self.pinned = False

    @property
    def embeddings(self) -> np.ndarray:
        return self.store.buffers['embeddings.attr']

    def pin_identity(self, pinned: bool = True) -> 'SymNet':
        """Make both transformations the identity map"""
        self.pinned = pinned
        return self

    def _net(self, mode: str) -> TransformNet:
        if mode == 'couple':
            return self.con
        if mode == 'decouple':
            return self.decon
        raise ConfigurationError(f"transform mode must be 'couple' or 'decouple', got '{mode}'")

    def _tensor(self, x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(x, dtype=self.store.dtype)

    def attention(self, a, mode: str = 'couple', bn_mode: str = 'eval') -> Tensor:
        a = self._tensor(a)
        if a.shape[-1] != self.cfg.attr_dim:
            raise DimensionError(f"attribute embedding has {a.shape[-1]} dims, expected {self.cfg.attr_dim}")
        return self._net(mode).attention(a, bn_mode)

    def transform(self, f, a, mode: str = 'couple', bn_mode: str = 'eval') -> Tensor:
        """f·T+(a) for mode='couple', f·T-(a) for mode='decouple'"""
        net = self._net(mode)
        f = self._tensor(f)
        if self.pinned:
            return self.identity_transform(f)
        a = self._tensor(a)
        if f.shape[-1] != self.cfg.feature_dim:
            raise DimensionError(f"feature has {f.shape[-1]} dims, expected {self.cfg.feature_dim}")
        if a.shape[-1] != self.cfg.attr_dim:
            raise DimensionError(f"attribute embedding has {a.shape[-1]} dims, expected {self.cfg.attr_dim}")
        if f.shape[:-1] != a.shape[:-1]:
            raise DimensionError(f"feature batch {list(f.shape[:-1])} and attribute batch "
                                 f"{list(a.shape[:-1])} differ")
        return net(f, a, bn_mode)

    @staticmethod
    def identity_transform(f: Tensor) -> Tensor:
        return f

    def couple(self, f, attrs, bn_mode: str = 'eval') -> Tensor:
        return self.transform(f, self.embeddings[np.asarray(attrs)], 'couple', bn_mode)

    def decouple(self, f, attrs, bn_mode: str = 'eval') -> Tensor:
        return self.transform(f, self.embeddings[np.asarray(attrs)], 'decouple', bn_mode)

    def moving_distances(self, f, bn_mode: str = 'eval') -> Tuple[Tensor, Tensor]:
        """Distances to every coupled and decoupled version of f, shape [B, n]"""
        f = self._tensor(f)
        batch, n, dim = f.shape[0], self.cfg.n_attrs, self.cfg.feature_dim
        tiled = broadcast_to(reshape(f, (batch, 1, dim)), (batch, n, dim))
        A = np.broadcast_to(self.embeddings, (batch, n, self.cfg.attr_dim))
        d_plus = distance(tiled, self.transform(tiled, A, 'couple', bn_mode), self.cfg.distance)
        d_minus = distance(tiled, self.transform(tiled, A, 'decouple', bn_mode), self.cfg.distance)
        return d_plus, d_minus

    def rmd(self, f, gamma: float = 1.0, bn_mode: str = 'eval') -> RMDScores:
        if not gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {gamma}")
        single = np.ndim(f.data if isinstance(f, Tensor) else f) == 1
        f = self._tensor(f)
        if single:
            f = reshape(f, (1, -1))
        d_plus, d_minus = self.moving_distances(f, bn_mode)
        if single:
            d_plus, d_minus = d_plus[0], d_minus[0]
        return RMDScores(d_plus, d_minus, gamma)

    def attr_logits(self, x: Tensor, reference: Optional[Tensor] = None) -> Tensor:
        if self.cfg.attr_cls_input == 'difference' and reference is not None:
            x = x - reference
        return self.attr_classifier(x)

    def obj_logits(self, x) -> Tensor:
        return self.obj_classifier(self._tensor(x))

    def object_probs(self, f) -> np.ndarray:
        with no_grad():
            return activation('softmax', self.obj_logits(f)).data

    def attention_distances(self, bn_mode: str = 'eval') -> Tuple[Tensor, Tensor]:
        """Pairwise [n, n] distances between attention vectors of CoN and of DecoN"""
        A = self._tensor(self.embeddings)
        n, dim = self.cfg.n_attrs, self.cfg.feature_dim
        result = []
        for net in (self.con, self.decon):
            att = net.attention(A, bn_mode)
            result.append(norm(reshape(att, (n, 1, dim)) - reshape(att, (1, n, dim))))
        return result[0], result[1]

    def transformed_features(self, f) -> Tuple[np.ndarray, np.ndarray]:
        """Mean CoN and DecoN outputs over all attributes, one row per input"""
        with no_grad():
            f = self._tensor(np.atleast_2d(f.data if isinstance(f, Tensor) else f))
            batch, n, dim = f.shape[0], self.cfg.n_attrs, self.cfg.feature_dim
            tiled = np.broadcast_to(f.data[:, None, :], (batch, n, dim))
            A = np.broadcast_to(self.embeddings, (batch, n, self.cfg.attr_dim))
            plus = self.transform(tiled, A, 'couple').data.mean(axis=1)
            minus = self.transform(tiled, A, 'decouple').data.mean(axis=1)
        return plus, minus

    def twin_shapes(self) -> Tuple[Dict[str, tuple], Dict[str, tuple]]:
        """Parameter shapes of CoN and DecoN keyed by their shared suffix"""
        shapes = ({}, {})
        for name, param in self.store.params.items():
            prefix, _, rest = name.partition('.')
            if prefix in ('con', 'decon'):
                shapes[prefix == 'decon'][rest] = param.shape
        return shapes

    def save(self, path: str, extra: Optional[Dict] = None) -> str:
        meta = {'model': asdict(self.cfg)}
        meta.update(extra or {})
        return save_checkpoint(path, self.store, meta)

    @classmethod
    def load(cls, path: str, attr_vocab_hash: Optional[str] = None,
             object_vocab_hash: Optional[str] = None) -> Tuple['SymNet', Dict]:
        store, meta = load_checkpoint(path)
        if 'model' not in meta:
            raise CheckpointError(f"{path}: no model header")
        cfg = ModelConfig.from_dict(meta['model'])
        for label, expected, found in (('attribute', attr_vocab_hash, cfg.attr_vocab_hash),
                                       ('object', object_vocab_hash, cfg.object_vocab_hash)):
            if expected is not None and expected != found:
                raise CheckpointError(f"{path}: {label} vocabulary hash {found} does not match dataset ({expected})")
        model = cls(cfg, np.zeros((cfg.n_attrs, cfg.attr_dim)), seed=store.seed)
        model.store.load_state(store)
        logger.info(f"Loaded checkpoint {path}")
        return model, meta


def attr_prob(scores: RMDScores) -> np.ndarray:
    """sigmoid(gamma * d) per attribute"""
    return expit(scores.gamma * scores.d.data)


def attr_decisions(scores: RMDScores) -> np.ndarray:
    """An attribute is present iff d >= 0"""
    return scores.d.data >= 0


def pair_probs(p_a: np.ndarray, p_o: np.ndarray, space) -> np.ndarray:
    """p_a[i] * p_o[j] for every feasible pair, -inf elsewhere; last axis indexes pairs"""
    if not space.feasible_mask.any():
        raise ConfigurationError("pair space has no feasible pairs")
    p_a, p_o = np.asarray(p_a), np.asarray(p_o)
    if p_a.shape[-1] != space.n_attrs or p_o.shape[-1] != space.n_objects:
        raise DimensionError(f"probabilities of shape {list(p_a.shape)} / {list(p_o.shape)} do not match "
                             f"a {space.n_attrs}x{space.n_objects} pair space")
    outer = p_a[..., :, None] * p_o[..., None, :]
    scores = outer.reshape(outer.shape[:-2] + (-1,))
    return np.where(space.feasible_mask, scores, -np.inf)
