"""Comparison methods: pooled ERM (optionally with domain-index features or a
recent-domains-only window) and the vanilla single-encoder prototypical net.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import nn
from .data import DomainData
from .dpnet import DPNetModel, TrainConfig, init_dpnet, train
from .nn import MlpParams

Array = np.ndarray


class IndexMode(str, Enum):
    NONE = "none"
    SCALAR_CONCAT = "scalar"
    ONE_HOT_CONCAT = "onehot"
    OUTER_PRODUCT = "outer"


def _positions(mode: IndexMode, num_sources: int) -> int:
    """Width of the index encoding. One-hot and outer-product span the whole
    environment (sources plus the known target position), so the target's own
    index exists as a basis direction that training never activates."""
    if mode in (IndexMode.ONE_HOT_CONCAT, IndexMode.OUTER_PRODUCT):
        return num_sources + 1
    return num_sources


def augmented_dim(feature_dim: int, mode: IndexMode, num_positions: int) -> int:
    if mode is IndexMode.NONE:
        return feature_dim
    if mode is IndexMode.SCALAR_CONCAT:
        return feature_dim + 1
    if mode is IndexMode.ONE_HOT_CONCAT:
        return feature_dim + num_positions
    return feature_dim * num_positions


def augment_with_index(x: Array, i: int, mode: IndexMode, num_positions: int) -> Array:
    """Attach domain-index information to a batch (or single vector) of features.

    scalar: append i/(P-1) for P index positions; onehot: append e_i; outer:
    flatten e_i ⊗ x, i.e. the features land in block i of a P-block vector.
    """
    single = np.asarray(x).ndim == 1
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if mode is IndexMode.NONE:
        return xb[0] if single else xb
    if not 0 <= i < num_positions:
        raise ValueError(f"domain index {i} out of range [0, {num_positions})")
    out = _augment(xb, float(i) / (num_positions - 1), i, mode, num_positions)
    return out[0] if single else out


def augment_target(x: Array, mode: IndexMode, num_sources: int) -> Array:
    """Index policy for the unseen target: scalar extrapolates one step past
    the sources to m/(m-1); one-hot and outer-product use the target's true
    position m, whose weights no training batch ever touched."""
    single = np.asarray(x).ndim == 1
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    scalar = num_sources / (num_sources - 1)
    out = _augment(xb, scalar, num_sources, mode, _positions(mode, num_sources))
    return out[0] if single else out


def _augment(xb: Array, scalar_value: float, hot_index: int, mode: IndexMode, positions: int) -> Array:
    n, d = xb.shape
    if mode is IndexMode.NONE:
        return xb
    if mode is IndexMode.SCALAR_CONCAT:
        return np.hstack([xb, np.full((n, 1), scalar_value)])
    if mode is IndexMode.ONE_HOT_CONCAT:
        hot = np.zeros((n, positions))
        hot[:, hot_index] = 1.0
        return np.hstack([xb, hot])
    out = np.zeros((n, d * positions))
    out[:, hot_index * d : (hot_index + 1) * d] = xb
    return out


@dataclass
class ErmModel:
    """Plain classifier over pooled (optionally index-augmented) source data."""

    net: MlpParams
    index_mode: IndexMode
    num_domains_seen: int  # number of source domains m
    feature_dim: int

    def __post_init__(self):
        want = augmented_dim(self.feature_dim, self.index_mode, _positions(self.index_mode, self.num_domains_seen))
        if self.net.in_dim != want:
            raise ValueError(f"net in-dim {self.net.in_dim} != augmented dim {want}")


@dataclass(frozen=True)
class ErmConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    hidden: tuple[int, ...] = ()  # empty = single linear layer


def train_erm(
    domains: list[DomainData],
    config: ErmConfig,
    index_mode: IndexMode = IndexMode.NONE,
    last_k: int | None = None,
) -> ErmModel:
    """Mini-batch cross-entropy over pooled source samples.

    ``last_k`` restricts training to the final k source domains. The one-hot /
    outer-product width always spans all ``len(domains)`` indices so the model
    stays aware of the full environment length.
    """
    if not domains:
        raise ValueError("need at least one source domain")
    m = len(domains)
    positions = _positions(index_mode, m)
    used = domains[-last_k:] if last_k else domains
    k_classes = used[0].num_classes
    feature_dim = used[0].dim
    xs = np.vstack([augment_with_index(d.x, d.index, index_mode, positions) for d in used])
    ys = np.concatenate([d.y for d in used])
    rng = np.random.default_rng(config.seed)
    dims = (xs.shape[1],) + tuple(config.hidden) + (k_classes,)
    net = nn.init_mlp(dims, rng)
    # Zero-start the classifier head: harmless for the convex last layer, and
    # it keeps never-activated index blocks exactly inert at prediction time.
    head_w, head_b = net.layers[-1]
    net = nn.MlpParams(net.layers[:-1] + ((np.zeros_like(head_w), np.zeros_like(head_b)),))
    state = nn.make_optimizer(config.optimizer, config.lr)
    n = xs.shape[0]
    batch = min(config.batch_size, n)
    for _ in range(config.steps):
        pick = rng.choice(n, size=batch, replace=False)
        logits, cache = nn.mlp_forward(net, xs[pick])
        _, dlogits = nn.softmax_cross_entropy(logits, ys[pick])
        grads, _ = nn.mlp_backward(net, cache, dlogits)
        [net], state = nn.step_mlps(state, [net], [grads])
    return ErmModel(net=net, index_mode=index_mode, num_domains_seen=m, feature_dim=feature_dim)


def predict_erm(model: ErmModel, x: Array, domain_index: int | None = None) -> Array:
    """Argmax of the logits (ties go to the lowest class index).

    ``domain_index=None`` means "the unseen target": the index feature follows
    the target policy. Pass a concrete index to score held-out source data.
    """
    if domain_index is None:
        aug = augment_target(x, model.index_mode, model.num_domains_seen)
    else:
        aug = augment_with_index(
            x, domain_index, model.index_mode, _positions(model.index_mode, model.num_domains_seen)
        )
    logits, _ = nn.mlp_forward(model.net, np.atleast_2d(aug))
    return np.argmax(logits, axis=1)


def train_proto_vanilla(
    domains: list[DomainData],
    config: TrainConfig,
    dims: tuple[int, ...] | None = None,
) -> tuple[DPNetModel, list]:
    """Vanilla prototypical network: one shared encoder, support and query
    drawn from the same domain each episode. Returns the model and its trace."""
    if dims is None:
        dims = (domains[0].dim, domains[0].dim)
    model = init_dpnet(dims, domains[0].num_classes, config.seed, shared=True)
    return train(model, domains, config, same_domain_episodes=True)
