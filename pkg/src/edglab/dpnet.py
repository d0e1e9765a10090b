"""Directional prototypical network.

Training samples episodes from pairs of consecutive domains: class prototypes
are built from domain i through the forward encoder, queries come from domain
i+1 through the base encoder, and the episodic loss is the mean negative
log-probability of the query labels under a softmax over negative squared
embedding distances. At test time the final source domain provides the
prototypes for the unseen target.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import DomainData
from .nn import Grads, MlpParams

Array = np.ndarray


@dataclass
class DPNetModel:
    """Two encoders into a shared embedding space.

    ``f_phi`` embeds support instances (it carries the one-step-ahead drift),
    ``f_psi`` embeds queries. Both must share architecture and output dim.
    """

    f_phi: MlpParams
    f_psi: MlpParams
    embed_dim: int
    num_classes: int

    def __post_init__(self):
        if self.f_phi.dims != self.f_psi.dims:
            raise ValueError(f"encoder architectures differ: {self.f_phi.dims} vs {self.f_psi.dims}")
        if self.f_phi.out_dim != self.embed_dim:
            raise ValueError(f"encoder out-dim {self.f_phi.out_dim} != embed_dim {self.embed_dim}")

    @property
    def shared_encoder(self) -> bool:
        return self.f_phi is self.f_psi


def init_dpnet(dims: tuple[int, ...], num_classes: int, seed: int, shared: bool = False) -> DPNetModel:
    rng = np.random.default_rng(seed)
    f_phi = nn.init_mlp(dims, rng)
    f_psi = f_phi if shared else nn.init_mlp(dims, rng)
    return DPNetModel(f_phi=f_phi, f_psi=f_psi, embed_dim=dims[-1], num_classes=num_classes)


@dataclass(frozen=True)
class EpisodeBatch:
    """Per-class support (domain i) and query (domain i+1) feature blocks."""

    support: tuple[Array, ...]  # K blocks, each n_per_class × d
    query: tuple[Array, ...]
    source_index: int

    def __post_init__(self):
        if len(self.support) != len(self.query) or not self.support:
            raise ValueError("support and query must hold one block per class")
        n = self.support[0].shape[0]
        for block in self.support + self.query:
            if block.ndim != 2 or block.shape[0] != n:
                raise ValueError("all class blocks must hold the same number of samples")

    @property
    def num_classes(self) -> int:
        return len(self.support)

    @property
    def n_per_class(self) -> int:
        return self.support[0].shape[0]


def compute_prototypes(model: DPNetModel, support: tuple[Array, ...] | list[Array]) -> Array:
    """Per-class mean of support embeddings under the forward encoder (K × Z)."""
    protos = []
    for k, block in enumerate(support):
        if block.shape[0] == 0:
            raise ValueError(f"class {k}: empty support set")
        z, _ = nn.mlp_forward(model.f_phi, block)
        protos.append(z.mean(axis=0))
    return np.vstack(protos)


def predictive_distribution(model: DPNetModel, prototypes: Array, x: Array) -> Array:
    """Probability over classes: softmax of negative squared distances."""
    z, _ = nn.mlp_forward(model.f_psi, np.atleast_2d(x))
    d2 = nn.pairwise_sq_dists(z, prototypes)
    probs = np.exp(nn.log_softmax_rows(-d2))
    return probs[0] if np.asarray(x).ndim == 1 else probs


def episode_loss(model: DPNetModel, batch: EpisodeBatch) -> tuple[float, Grads, Grads]:
    """Episodic loss and exact gradients for both encoders.

    Loss = mean over queries of d(z_q, c_y) + log sum_k exp(-d(z_q, c_k)),
    i.e. the mean negative log-probability of the true class. Gradients flow
    into the query encoder directly and into the support encoder through the
    prototype means.
    """
    k_classes = batch.num_classes
    n_b = batch.n_per_class
    support_stack = np.vstack(batch.support)  # class-major: k*n_b rows
    query_stack = np.vstack(batch.query)
    zs, cache_s = nn.mlp_forward(model.f_phi, support_stack)
    zq, cache_q = nn.mlp_forward(model.f_psi, query_stack)
    protos = zs.reshape(k_classes, n_b, -1).mean(axis=1)

    d2 = nn.pairwise_sq_dists(zq, protos)  # (K*n_b) × K
    labels = np.repeat(np.arange(k_classes), n_b)
    n_q = k_classes * n_b
    rows = np.arange(n_q)
    # log sum_k exp(-d2) with max-subtraction, per query row.
    neg = -d2
    m = neg.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(neg - m).sum(axis=1, keepdims=True))).ravel()
    loss = float(np.mean(d2[rows, labels] + lse))

    p = np.exp(neg - m)
    p /= p.sum(axis=1, keepdims=True)
    # dJ/d d2[q,k] = (1[k=y_q] - p[q,k]) / n_q
    gd2 = -p
    gd2[rows, labels] += 1.0
    gd2 /= n_q
    # Chain through d2 = |zq - c_k|^2 exactly (no zero-row-sum shortcut).
    gzq = 2.0 * (zq * gd2.sum(axis=1, keepdims=True) - gd2 @ protos)
    gproto = -2.0 * (gd2.T @ zq - gd2.sum(axis=0)[:, None] * protos)
    gzs = np.repeat(gproto / n_b, n_b, axis=0)

    grads_psi, _ = nn.mlp_backward(model.f_psi, cache_q, gzq)
    grads_phi, _ = nn.mlp_backward(model.f_phi, cache_s, gzs)
    return loss, grads_phi, grads_psi


def sample_episode(
    domains: list[DomainData],
    n_per_class: int,
    rng: np.random.Generator,
    same_domain: bool = False,
) -> EpisodeBatch:
    """Draw one episode. Default: support from domain i, query from domain i+1.

    ``same_domain=True`` (vanilla prototypical behaviour) draws disjoint
    support and query sets from one uniformly chosen domain.
    """
    if same_domain:
        if len(domains) < 1:
            raise ValueError("need at least one source domain")
        i = int(rng.integers(0, len(domains)))
        sup_dom = qry_dom = domains[i]
    else:
        if len(domains) < 2:
            raise ValueError("need at least two source domains for consecutive episodes")
        i = int(rng.integers(0, len(domains) - 1))
        sup_dom, qry_dom = domains[i], domains[i + 1]
    support, query = [], []
    for k in range(sup_dom.num_classes):
        if same_domain:
            idx = sup_dom.class_indices(k)
            if len(idx) < 2 * n_per_class:
                raise ValueError(f"domain {i} class {k}: need {2 * n_per_class} samples, have {len(idx)}")
            pick = rng.choice(idx, size=2 * n_per_class, replace=False)
            support.append(sup_dom.x[pick[:n_per_class]])
            query.append(qry_dom.x[pick[n_per_class:]])
        else:
            s_idx = sup_dom.class_indices(k)
            q_idx = qry_dom.class_indices(k)
            if len(s_idx) < n_per_class or len(q_idx) < n_per_class:
                raise ValueError(f"episode ({i},{i + 1}) class {k}: insufficient per-class samples")
            support.append(sup_dom.x[rng.choice(s_idx, size=n_per_class, replace=False)])
            query.append(qry_dom.x[rng.choice(q_idx, size=n_per_class, replace=False)])
    return EpisodeBatch(support=tuple(support), query=tuple(query), source_index=i)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    n_per_class: int = 16
    lr: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0


@dataclass
class TraceEntry:
    step: int
    loss: float
    query_accuracy: float


def train(
    model: DPNetModel,
    source_domains: list[DomainData],
    config: TrainConfig,
    same_domain_episodes: bool = False,
    progress=None,
) -> tuple[DPNetModel, list[TraceEntry]]:
    """Episodic training loop; deterministic given the config seed.

    Returns the trained model and a per-step trace (loss, query accuracy).
    ``progress(step, loss)`` is called after each step when provided.
    """
    rng = np.random.default_rng(config.seed)
    state = nn.make_optimizer(config.optimizer, config.lr)
    trace: list[TraceEntry] = []
    f_phi, f_psi = model.f_phi, model.f_psi
    shared = model.shared_encoder
    for step in range(config.steps):
        cur = DPNetModel(f_phi, f_psi, model.embed_dim, model.num_classes)
        batch = sample_episode(source_domains, config.n_per_class, rng, same_domain=same_domain_episodes)
        loss, g_phi, g_psi = episode_loss(cur, batch)
        if shared:
            [f_phi], state = nn.step_mlps(state, [f_phi], [nn.add_grads(g_phi, g_psi)])
            f_psi = f_phi
        else:
            [f_phi, f_psi], state = nn.step_mlps(state, [f_phi, f_psi], [g_phi, g_psi])
        acc = _episode_query_accuracy(cur, batch)
        trace.append(TraceEntry(step=step, loss=loss, query_accuracy=acc))
        if progress is not None:
            progress(step, loss)
    return DPNetModel(f_phi, f_psi, model.embed_dim, model.num_classes), trace


def _episode_query_accuracy(model: DPNetModel, batch: EpisodeBatch) -> float:
    protos = compute_prototypes(model, batch.support)
    labels = np.repeat(np.arange(batch.num_classes), batch.n_per_class)
    preds = predict_with_prototypes(model, protos, np.vstack(batch.query))
    return float(np.mean(preds == labels))


def predict_with_prototypes(model: DPNetModel, prototypes: Array, queries: Array) -> Array:
    z, _ = nn.mlp_forward(model.f_psi, queries)
    d2 = nn.pairwise_sq_dists(z, prototypes)
    return np.argmin(d2, axis=1)  # ties resolve to the lowest class index


def predict_target(model: DPNetModel, last_source: DomainData, queries: Array) -> Array:
    """Labels for target queries, using the final source domain as support."""
    support = tuple(last_source.x[last_source.class_indices(k)] for k in range(last_source.num_classes))
    protos = compute_prototypes(model, support)
    return predict_with_prototypes(model, protos, queries)
