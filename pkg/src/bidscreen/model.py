"""Fixed-attention graph classifier over tender graphs.

Architecture, per propagation layer k on node features s_i:

    h_i = W^(k) . x_i                  (linear projection)
    h+_i = relu( sum_j a_ij . h_j )    (attention-weighted aggregation)
    ...
    o_i  = W_o . h+_i                  (2 output channels)

The attention weights a_ij depend only on bidder overlap, time gaps and
the temporal length-scale lam = softplus(rho); they are identical at every
layer and are recomputed from the current rho each forward pass. Inverted
dropout is applied to the inputs and to every post-relu activation in
train mode.

Gradients are reverse-mode, derived by hand, covering every weight matrix
and rho. The rho path runs through the attention softmax:

    d delta_ij / d lam = delta_ij * dt2_ij / lam^2
    d e_ij / d lam     = J_ij * d delta_ij / d lam
    d a / d e          = softmax Jacobian per node row

with contributions accumulated over all K uses of the shared attention
matrix. `gradient_check` verifies the whole thing against central finite
differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .graph import Edge, TenderGraph, TenderNode, attention_block_matrices
from .data_model import Label
from .screens import SCREEN_NAMES, ScreenVector

N_FEATURES = len(SCREEN_NAMES)
N_CLASSES = 2
CHECKPOINT_FORMAT = "bidscreen-checkpoint"
CHECKPOINT_VERSION = 1
# rho such that softplus(rho) == 1: the temporal kernel starts at a
# one-squared-year scale.
RHO_FOR_UNIT_LAMBDA = math.log(math.e - 1.0)


def softplus(x: float) -> float:
    return float(np.logaddexp(0.0, x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


class CheckpointError(Exception):
    """Checkpoint file is unreadable or incompatible with this build."""


@dataclass
class Hyperparams:
    """Training configuration; the defaults are the best-performing
    cross-market setup (64 hidden channels, 2 layers, dropout 0.3,
    learning rate 0.075, momentum 0.9)."""

    hidden_channels: int = 64
    layers: int = 2
    dropout: float = 0.3
    learning_rate: float = 0.075
    momentum: float = 0.9
    max_epochs: int = 150
    patience: int = 5
    start_delay: int = 5
    val_fraction: float = 0.15
    seed: int = 0
    use_bias: bool = False

    def __post_init__(self):
        if self.hidden_channels < 1:
            raise ValueError("hidden_channels must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1 or self.start_delay < 0:
            raise ValueError("need max_epochs >= 1, patience >= 1, start_delay >= 0")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


@dataclass
class GatParams:
    """Learnable state: per-layer projection matrices, the output matrix,
    and the unconstrained temporal parameter rho (lam = softplus(rho) > 0)."""

    weights: list[np.ndarray]          # weights[0]: (hidden, 9); rest (hidden, hidden)
    w_out: np.ndarray                  # (2, hidden)
    rho: float
    biases: list[np.ndarray] | None = None
    b_out: np.ndarray | None = None

    @property
    def lam(self) -> float:
        return softplus(self.rho)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "GatParams":
        return GatParams(
            weights=[w.copy() for w in self.weights],
            w_out=self.w_out.copy(),
            rho=self.rho,
            biases=None if self.biases is None else [b.copy() for b in self.biases],
            b_out=None if self.b_out is None else self.b_out.copy(),
        )


@dataclass
class Gradients:
    """Gradient (or velocity) container mirroring GatParams shapes."""

    d_weights: list[np.ndarray]
    d_w_out: np.ndarray
    d_rho: float
    d_biases: list[np.ndarray] | None = None
    d_b_out: np.ndarray | None = None


@dataclass
class ForwardTrace:
    """Everything cached during a forward pass that exact backprop needs."""

    graph: TenderGraph
    params: GatParams
    lam: float
    a_blocks: list[np.ndarray]
    delta_blocks: list[np.ndarray]
    inputs: list[np.ndarray]      # inputs[k]: input to layer k's projection
    zs: list[np.ndarray]          # projected features per layer
    ps: list[np.ndarray]          # pre-activation aggregates per layer
    final: np.ndarray             # post-dropout activation fed to the output map
    masks: list[np.ndarray]       # dropout masks: masks[0] on inputs, masks[k] after relu k
    keep: float
    mode: str
    activation: str
    logits: np.ndarray


def init_params(h: Hyperparams) -> GatParams:
    """Seeded Glorot-uniform weights (drawn layer 1..K then output) and
    rho chosen so the initial temporal scale is exactly one squared year."""
    rng = np.random.default_rng(h.seed)
    dims = [N_FEATURES] + [h.hidden_channels] * h.layers
    weights = []
    for k in range(h.layers):
        fan_in, fan_out = dims[k], dims[k + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
    limit = math.sqrt(6.0 / (h.hidden_channels + N_CLASSES))
    w_out = rng.uniform(-limit, limit, size=(N_CLASSES, h.hidden_channels))
    biases = [np.zeros(h.hidden_channels) for _ in range(h.layers)] if h.use_bias else None
    b_out = np.zeros(N_CLASSES) if h.use_bias else None
    return GatParams(weights=weights, w_out=w_out, rho=RHO_FOR_UNIT_LAMBDA,
                     biases=biases, b_out=b_out)


def _block_apply(a_blocks, blocks, x: np.ndarray, transpose: bool = False) -> np.ndarray:
    out = np.empty_like(x)
    for blk, a in zip(blocks, a_blocks):
        seg = x[blk.start:blk.stop]
        out[blk.start:blk.stop] = (a.T @ seg) if transpose else (a @ seg)
    return out


def forward(
    g: TenderGraph,
    params: GatParams,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    activation: str = "relu",
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the classifier over a graph; returns (logits, trace).

    mode="train" applies inverted dropout (requires rng when dropout > 0);
    mode="eval" is deterministic with all-ones masks. ``activation`` admits
    "identity" for linear-probe diagnostics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation {activation!r}")
    x = np.asarray(g.features, dtype=np.float64)
    if x.shape[1] != params.weights[0].shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} != W1 input dim {params.weights[0].shape[1]}")

    lam = params.lam
    a_blocks, delta_blocks = attention_block_matrices(g, lam)
    blocks = g.blocks()

    train = mode == "train" and dropout > 0.0
    keep = 1.0 - dropout if train else 1.0
    if train and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    def draw_mask(shape):
        if train:
            return (rng.random(shape) < keep).astype(np.float64)
        return np.ones(shape)

    masks = [draw_mask(x.shape)]
    cur = x * masks[0] / keep

    inputs, zs, ps = [], [], []
    for k, w in enumerate(params.weights):
        inputs.append(cur)
        z = cur @ w.T
        if params.biases is not None:
            z = z + params.biases[k]
        p = _block_apply(a_blocks, blocks, z)
        h = np.maximum(p, 0.0) if activation == "relu" else p
        m = draw_mask(h.shape)
        masks.append(m)
        cur = h * m / keep
        zs.append(z)
        ps.append(p)

    logits = cur @ params.w_out.T
    if params.b_out is not None:
        logits = logits + params.b_out

    trace = ForwardTrace(
        graph=g, params=params, lam=lam,
        a_blocks=a_blocks, delta_blocks=delta_blocks,
        inputs=inputs, zs=zs, ps=ps, final=cur,
        masks=masks, keep=keep, mode=mode, activation=activation,
        logits=logits,
    )
    return logits, trace


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def loss_ce(logits: np.ndarray, labels: np.ndarray, node_mask: np.ndarray) -> float:
    """Mean softmax cross-entropy over the masked nodes.

    labels are class codes (0 competitive, 1 collusive); only masked
    entries are read, so unknown labels elsewhere are harmless.
    """
    idx = np.flatnonzero(node_mask)
    if idx.size == 0:
        raise ValueError("loss over an empty node mask")
    ls = _log_softmax(logits[idx])
    return float(-ls[np.arange(idx.size), labels[idx]].mean())


def backward(trace: ForwardTrace, labels: np.ndarray, node_mask: np.ndarray) -> Gradients:
    """Exact gradients of loss_ce(forward(...)) w.r.t. all parameters.

    The attention matrix is shared across layers, so its gradient
    accumulates over every aggregation before being pushed through the
    softmax Jacobian and the temporal kernel into rho.
    """
    params = trace.params
    blocks = trace.graph.blocks()
    n = trace.logits.shape[0]
    if labels.shape[0] != n or node_mask.shape[0] != n:
        raise ValueError(f"labels/mask of length {labels.shape[0]}/{node_mask.shape[0]} "
                         f"do not match the traced graph ({n} nodes)")
    idx = np.flatnonzero(node_mask)
    if idx.size == 0:
        raise ValueError("backward over an empty node mask")
    g_logits = np.zeros((n, N_CLASSES))
    probs = softmax(trace.logits[idx])
    probs[np.arange(idx.size), labels[idx]] -= 1.0
    g_logits[idx] = probs / idx.size

    d_w_out = g_logits.T @ trace.final
    d_b_out = g_logits.sum(axis=0) if params.b_out is not None else None
    d_cur = g_logits @ params.w_out

    k_layers = params.n_layers
    d_weights: list[np.ndarray] = [np.empty(0)] * k_layers
    d_biases = [np.empty(0)] * k_layers if params.biases is not None else None
    d_a_blocks = [np.zeros_like(a) for a in trace.a_blocks]

    for k in range(k_layers - 1, -1, -1):
        d_h = d_cur * trace.masks[k + 1] / trace.keep
        if trace.activation == "relu":
            d_p = d_h * (trace.ps[k] > 0.0)
        else:
            d_p = d_h
        for b, blk in enumerate(blocks):
            seg_p = d_p[blk.start:blk.stop]
            seg_z = trace.zs[k][blk.start:blk.stop]
            d_a_blocks[b] += seg_p @ seg_z.T
        d_z = _block_apply(trace.a_blocks, blocks, d_p, transpose=True)
        d_weights[k] = d_z.T @ trace.inputs[k]
        if d_biases is not None:
            d_biases[k] = d_z.sum(axis=0)
        d_cur = d_z @ params.weights[k]
    # gradient w.r.t. the (dropped-out) input features lands in d_cur; the
    # features are data, not parameters, so it is discarded.

    lam = trace.lam
    d_lam = 0.0
    for blk, a, delta, d_a in zip(blocks, trace.a_blocks, trace.delta_blocks, d_a_blocks):
        row_dot = (a * d_a).sum(axis=1, keepdims=True)
        d_scores = a * (d_a - row_dot)
        d_lam += float((d_scores * blk.jac * delta * blk.dt2).sum()) / (lam * lam)
    d_rho = d_lam * sigmoid(params.rho)

    return Gradients(d_weights=d_weights, d_w_out=d_w_out, d_rho=d_rho,
                     d_biases=d_biases, d_b_out=d_b_out)


def zero_velocity(params: GatParams) -> Gradients:
    return Gradients(
        d_weights=[np.zeros_like(w) for w in params.weights],
        d_w_out=np.zeros_like(params.w_out),
        d_rho=0.0,
        d_biases=None if params.biases is None else [np.zeros_like(b) for b in params.biases],
        d_b_out=None if params.b_out is None else np.zeros_like(params.b_out),
    )


def sgd_momentum_step(
    params: GatParams,
    grads: Gradients,
    velocity: Gradients,
    lr: float,
    momentum: float = 0.9,
) -> tuple[GatParams, Gradients]:
    """One heavy-ball update: v' = momentum*v + g; p' = p - lr*v'. Pure."""
    new_v = Gradients(
        d_weights=[momentum * v + g for v, g in zip(velocity.d_weights, grads.d_weights)],
        d_w_out=momentum * velocity.d_w_out + grads.d_w_out,
        d_rho=momentum * velocity.d_rho + grads.d_rho,
        d_biases=None if grads.d_biases is None else
            [momentum * v + g for v, g in zip(velocity.d_biases, grads.d_biases)],
        d_b_out=None if grads.d_b_out is None else
            momentum * velocity.d_b_out + grads.d_b_out,
    )
    new_p = GatParams(
        weights=[w - lr * v for w, v in zip(params.weights, new_v.d_weights)],
        w_out=params.w_out - lr * new_v.d_w_out,
        rho=params.rho - lr * new_v.d_rho,
        biases=None if params.biases is None else
            [b - lr * v for b, v in zip(params.biases, new_v.d_biases)],
        b_out=None if params.b_out is None else params.b_out - lr * new_v.d_b_out,
    )
    return new_p, new_v


def predict_proba(g: TenderGraph, params: GatParams) -> np.ndarray:
    """Eval-mode class probabilities, rows [P(competitive), P(collusive)]."""
    logits, _ = forward(g, params, mode="eval")
    return softmax(logits)


# -- checkpointing ----------------------------------------------------------

def save_checkpoint(path: str | Path, params: GatParams, hyper: Hyperparams,
                    norm_mean: np.ndarray, norm_sd: np.ndarray) -> None:
    """Write a self-describing JSON checkpoint (weights as 64-bit floats,
    exact via repr round-trip)."""
    blob = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "screens": SCREEN_NAMES,
        "hyperparams": asdict(hyper),
        "weights": [w.tolist() for w in params.weights],
        "w_out": params.w_out.tolist(),
        "rho": params.rho,
        "biases": None if params.biases is None else [b.tolist() for b in params.biases],
        "b_out": None if params.b_out is None else params.b_out.tolist(),
        "normalizer_mean": np.asarray(norm_mean, dtype=np.float64).tolist(),
        "normalizer_sd": np.asarray(norm_sd, dtype=np.float64).tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(blob, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | Path) -> tuple[GatParams, Hyperparams, np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        blob = json.load(fh)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {blob.get('version')} "
                              f"unsupported (expected {CHECKPOINT_VERSION})")
    if blob.get("screens") != SCREEN_NAMES:
        raise CheckpointError(f"{path}: checkpoint trained on a different screen set "
                              f"{blob.get('screens')}")
    hyper = Hyperparams(**blob["hyperparams"])
    params = GatParams(
        weights=[np.array(w, dtype=np.float64) for w in blob["weights"]],
        w_out=np.array(blob["w_out"], dtype=np.float64),
        rho=float(blob["rho"]),
        biases=None if blob["biases"] is None else
            [np.array(b, dtype=np.float64) for b in blob["biases"]],
        b_out=None if blob["b_out"] is None else np.array(blob["b_out"], dtype=np.float64),
    )
    mean = np.array(blob["normalizer_mean"], dtype=np.float64)
    sd = np.array(blob["normalizer_sd"], dtype=np.float64)
    return params, hyper, mean, sd


# -- gradient verification ---------------------------------------------------

def random_graph(rng: np.random.Generator, n_nodes: int, market_id: str = "R",
                 pool: int = 8, set_size: int = 3) -> TenderGraph:
    """Random single-market graph with genuine bidder-set edges and gaussian
    node features; used by the gradient checker and the test suite."""
    tokens = [f"{market_id}_f{i}" for i in range(pool)]
    nodes = []
    for i in range(n_nodes):
        size = int(rng.integers(2, set_size + 2))
        members = rng.choice(pool, size=min(size, pool), replace=False)
        feats = rng.normal(size=N_FEATURES)
        nodes.append(TenderNode(
            node_index=i,
            tender_id=f"t{i}",
            market_id=market_id,
            bidder_set=frozenset(tokens[j] for j in members),
            time=float(rng.uniform(0.0, 3.0)),
            features=ScreenVector(*feats.tolist()),
            label=Label.COLLUSIVE if rng.random() < 0.5 else Label.COMPETITIVE,
        ))
    edges = []
    for i in range(n_nodes):
        for j in range(i + 1, n_nodes):
            inter = len(nodes[i].bidder_set & nodes[j].bidder_set)
            if inter:
                jac = inter / len(nodes[i].bidder_set | nodes[j].bidder_set)
                dt = nodes[i].time - nodes[j].time
                edges.append(Edge(i, j, jac, dt * dt))
    return TenderGraph(
        market_id=market_id,
        nodes=nodes,
        edges=edges,
        market_slices=[(market_id, 0, n_nodes)],
        features=np.stack([nd.features.as_array() for nd in nodes]),
    )


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: float
    block_errors: dict[str, float] = field(default_factory=dict)
    cases: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-6)


def gradient_check(
    seed: int = 0,
    sizes: tuple[int, ...] = (1, 2, 8, 32),
    n_seeds: int = 1,
    hidden: int = 6,
    layers: int = 2,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    use_bias: bool = False,
    perturb: float = 0.0,
) -> GradCheckReport:
    """Central finite differences vs analytic gradients, dropout off.

    ``perturb`` corrupts the analytic gradients by a constant offset; a
    non-zero value is the negative control that must fail.
    """
    report = GradCheckReport(tolerance=tolerance, max_rel_error=0.0)

    for s in range(n_seeds):
        rng = np.random.default_rng(seed + s)
        for size in sizes:
            g = random_graph(rng, size)
            h = Hyperparams(hidden_channels=hidden, layers=layers, dropout=0.0,
                            seed=int(rng.integers(1 << 30)), use_bias=use_bias)
            params = init_params(h)
            params.rho = float(rng.uniform(-0.5, 1.5))
            labels = g.labels01()
            mask = labels >= 0

            logits, trace = forward(g, params, mode="eval")
            grads = backward(trace, labels, mask)
            if perturb:
                grads = Gradients(
                    d_weights=[w + perturb for w in grads.d_weights],
                    d_w_out=grads.d_w_out + perturb,
                    d_rho=grads.d_rho + perturb,
                    d_biases=None if grads.d_biases is None else
                        [b + perturb for b in grads.d_biases],
                    d_b_out=None if grads.d_b_out is None else grads.d_b_out + perturb,
                )

            def loss_at(p: GatParams) -> float:
                lg, _ = forward(g, p, mode="eval")
                return loss_ce(lg, labels, mask)

            case_errors: dict[str, float] = {}

            def fd_block(name: str, arr: np.ndarray, analytic: np.ndarray):
                worst = 0.0
                for index in np.ndindex(arr.shape):
                    orig = arr[index]
                    arr[index] = orig + step
                    up = loss_at(params)
                    arr[index] = orig - step
                    down = loss_at(params)
                    arr[index] = orig
                    numeric = (up - down) / (2 * step)
                    worst = max(worst, _rel_err(float(analytic[index]), numeric))
                case_errors[name] = max(case_errors.get(name, 0.0), worst)

            for k, w in enumerate(params.weights):
                fd_block(f"W{k + 1}", w, grads.d_weights[k])
            fd_block("W_o", params.w_out, grads.d_w_out)
            if params.biases is not None:
                for k, b in enumerate(params.biases):
                    fd_block(f"b{k + 1}", b, grads.d_biases[k])
                fd_block("b_o", params.b_out, grads.d_b_out)

            orig_rho = params.rho
            params.rho = orig_rho + step
            up = loss_at(params)
            params.rho = orig_rho - step
            down = loss_at(params)
            params.rho = orig_rho
            case_errors["rho"] = _rel_err(grads.d_rho, (up - down) / (2 * step))

            report.cases.append({"seed": seed + s, "size": size, "errors": case_errors})
            for name, err in case_errors.items():
                report.block_errors[name] = max(report.block_errors.get(name, 0.0), err)
                report.max_rel_error = max(report.max_rel_error, err)

    return report
