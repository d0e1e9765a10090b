"""Dense float64 network kernel: MLPs, losses, distances, optimizers.

Matrices are plain row-major ``numpy.ndarray`` of float64. Networks are
stacks of dense layers with ReLU on hidden layers and an identity output.
Everything is functional: forward/backward never mutate their inputs,
optimizers return fresh arrays, and all randomness comes from an explicit
``numpy.random.Generator``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

CHECKPOINT_MAGIC = b"EDGCKPT1"
CHECKPOINT_VERSION = 1


class OptimizerError(RuntimeError):
    """Non-finite gradients; the surrounding trial must abort."""


@dataclass
class MlpParams:
    """Dense layer stack: ``layers[i] = (weight out×in, bias out)``."""

    layers: tuple[tuple[Array, Array], ...]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MlpParams needs at least one layer")
        prev_out = None
        for li, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {li}: weight {w.shape} / bias {b.shape} mismatch")
            if prev_out is not None and w.shape[1] != prev_out:
                raise ValueError(f"layer {li}: in-dim {w.shape[1]} != previous out-dim {prev_out}")
            prev_out = w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.in_dim,) + tuple(w.shape[0] for w, _ in self.layers)

    def arrays(self) -> list[Array]:
        """Flat parameter list [W0, b0, W1, b1, ...] (references, not copies)."""
        out: list[Array] = []
        for w, b in self.layers:
            out.extend((w, b))
        return out

    @staticmethod
    def from_arrays(arrays: list[Array]) -> "MlpParams":
        if len(arrays) % 2 != 0:
            raise ValueError("expected (weight, bias) pairs")
        return MlpParams(tuple((arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)))


# Grads mirror the parameter structure exactly.
Grads = MlpParams


def init_mlp(dims: tuple[int, ...] | list[int], rng: np.random.Generator) -> MlpParams:
    """Kaiming-uniform weights (suited to ReLU hidden layers), zero biases."""
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    layers = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / d_in)
        w = rng.uniform(-bound, bound, size=(d_out, d_in))
        layers.append((w, np.zeros(d_out)))
    return MlpParams(tuple(layers))


@dataclass
class ForwardCache:
    """Per-layer inputs and pre-activations saved by ``mlp_forward``."""

    inputs: list[Array]
    pre_acts: list[Array]


def mlp_forward(params: MlpParams, batch: Array) -> tuple[Array, ForwardCache]:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2:
        raise ValueError(f"batch must be 2-D, got shape {batch.shape}")
    if batch.shape[1] != params.in_dim:
        raise ValueError(f"batch dim {batch.shape[1]} != network in-dim {params.in_dim}")
    n_layers = len(params.layers)
    h = batch
    inputs, pre_acts = [], []
    for li, (w, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ w.T + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if li < n_layers - 1 else z
    return h, ForwardCache(inputs=inputs, pre_acts=pre_acts)


def mlp_backward(params: MlpParams, cache: ForwardCache, out_grad: Array) -> tuple[Grads, Array]:
    """Exact reverse-mode gradients of ``mlp_forward``.

    Returns (parameter grads, gradient w.r.t. the input batch).
    """
    n_layers = len(params.layers)
    if len(cache.inputs) != n_layers:
        raise ValueError("cache does not match network depth")
    g = np.asarray(out_grad, dtype=np.float64)
    if g.shape != cache.pre_acts[-1].shape:
        raise ValueError(f"out_grad shape {g.shape} != output shape {cache.pre_acts[-1].shape}")
    grad_layers: list[tuple[Array, Array]] = [None] * n_layers  # type: ignore[list-item]
    for li in reversed(range(n_layers)):
        w, _ = params.layers[li]
        a = cache.inputs[li]
        grad_layers[li] = (g.T @ a, g.sum(axis=0))
        g = g @ w
        if li > 0:
            g = g * (cache.pre_acts[li - 1] > 0.0)
    return MlpParams(tuple(grad_layers)), g


def zeros_like_grads(params: MlpParams) -> Grads:
    return MlpParams(tuple((np.zeros_like(w), np.zeros_like(b)) for w, b in params.layers))


def add_grads(a: Grads, b: Grads) -> Grads:
    return MlpParams(tuple((aw + bw, ab + bb) for (aw, ab), (bw, bb) in zip(a.layers, b.layers)))


def sq_euclidean(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return float(d @ d)


def pairwise_sq_dists(a: Array, b: Array) -> Array:
    """Exact squared Euclidean distances between rows of a (n×d) and b (k×d)."""
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dim mismatch: {a.shape} vs {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def log_softmax(v: Array) -> Array:
    """Numerically stable log-softmax of a vector (max-subtraction)."""
    v = np.asarray(v, dtype=np.float64)
    shifted = v - np.max(v)
    return shifted - np.log(np.sum(np.exp(shifted)))


def log_softmax_rows(m: Array) -> Array:
    m = np.asarray(m, dtype=np.float64)
    shifted = m - np.max(m, axis=1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))


def softmax_cross_entropy(logits: Array, labels: Array) -> tuple[float, Array]:
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n = logits.shape[0]
    logp = log_softmax_rows(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


@dataclass(frozen=True)
class SgdState:
    lr: float

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass(frozen=True)
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: tuple[Array, ...] = ()
    v: tuple[Array, ...] = ()
    t: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


OptimState = SgdState | AdamState


def make_optimizer(kind: str, lr: float) -> OptimState:
    if kind == "sgd":
        return SgdState(lr=lr)
    if kind == "adam":
        return AdamState(lr=lr)
    raise ValueError(f"unknown optimizer kind {kind!r}")


def optim_step(state: OptimState, arrays: list[Array], grads: list[Array]) -> tuple[list[Array], OptimState]:
    """One update over a flat list of parameter arrays. Functional: returns new arrays."""
    if len(arrays) != len(grads):
        raise ValueError("parameter/gradient count mismatch")
    for p, g in zip(arrays, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError("non-finite gradient")
    if isinstance(state, SgdState):
        return [p - state.lr * g for p, g in zip(arrays, grads)], state
    m = state.m if state.m else tuple(np.zeros_like(p) for p in arrays)
    v = state.v if state.v else tuple(np.zeros_like(p) for p in arrays)
    t = state.t + 1
    new_m = tuple(state.beta1 * mi + (1 - state.beta1) * g for mi, g in zip(m, grads))
    new_v = tuple(state.beta2 * vi + (1 - state.beta2) * g * g for vi, g in zip(v, grads))
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    new_arrays = [
        p - state.lr * (mi / bc1) / (np.sqrt(vi / bc2) + state.eps)
        for p, mi, vi in zip(arrays, new_m, new_v)
    ]
    return new_arrays, AdamState(state.lr, state.beta1, state.beta2, state.eps, new_m, new_v, t)


def step_mlps(state: OptimState, nets: list[MlpParams], grads: list[Grads]) -> tuple[list[MlpParams], OptimState]:
    """Joint update of several networks under one optimizer state."""
    flat_p: list[Array] = []
    flat_g: list[Array] = []
    for net, gr in zip(nets, grads):
        flat_p.extend(net.arrays())
        flat_g.extend(gr.arrays())
    new_flat, new_state = optim_step(state, flat_p, flat_g)
    out: list[MlpParams] = []
    pos = 0
    for net in nets:
        n = len(net.arrays())
        out.append(MlpParams.from_arrays(new_flat[pos : pos + n]))
        pos += n
    return out, new_state


def save_checkpoint(path, nets: list[MlpParams]) -> None:
    """Portable binary: magic, version, net count, per-net layer dims, raw LE f64."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(nets))]
    for net in nets:
        chunks.append(struct.pack("<I", len(net.layers)))
        for w, b in net.layers:
            chunks.append(struct.pack("<II", w.shape[0], w.shape[1]))
        for w, b in net.layers:
            chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> list[MlpParams]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, n_nets = struct.unpack_from("<II", data, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    nets = []
    for _ in range(n_nets):
        (n_layers,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shapes = []
        for _ in range(n_layers):
            out_d, in_d = struct.unpack_from("<II", data, pos)
            pos += 8
            shapes.append((out_d, in_d))
        layers = []
        for out_d, in_d in shapes:
            w = np.frombuffer(data, dtype="<f8", count=out_d * in_d, offset=pos).reshape(out_d, in_d)
            pos += 8 * out_d * in_d
            b = np.frombuffer(data, dtype="<f8", count=out_d, offset=pos)
            pos += 8 * out_d
            layers.append((w.copy(), b.copy()))
        nets.append(MlpParams(tuple(layers)))
    if pos != len(data):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return nets
