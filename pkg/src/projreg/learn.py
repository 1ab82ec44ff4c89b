"""Desk-scale training stack with manual backpropagation.

Dense models (optionally with ReLU hidden layers), MSE and
cross-entropy losses, a projected cross-entropy that restricts the
softmax to a sampled subset of output classes, SGD and adaptive-moment
optimizers, and the evaluation metrics emitted per epoch.

Regularization is applied per parameter tensor: each layer's flattened
weight matrix gets its own masks, selection counter, and momentum state;
biases are exempt. Masks are redrawn every optimizer step and the
retained sampling distribution is committed once per step, after the
penalty for that step has been computed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from projreg.data import Dataset
from projreg.numerics import Rng, as_matrix, as_vector, require_finite
from projreg.penalty import (
    PenaltyFamily,
    PenaltySpec,
    penalty_l1,
    penalty_l2,
    penalty_proposed,
)
from projreg.sampler import (
    SamplerConfig,
    SamplerState,
    SelectionMode,
    apply_momentum,
    commit_state,
    draw_masks,
    score_distribution,
)

__all__ = [
    "Activation",
    "LossKind",
    "RegKind",
    "OptimizerKind",
    "Layer",
    "Model",
    "TrainConfig",
    "MetricsRow",
    "TrainingDivergedError",
    "init_dense_model",
    "forward",
    "backward",
    "loss_mse",
    "loss_ce",
    "loss_projected_ce",
    "projected_ce_on_selection",
    "ProjectedCEResult",
    "train",
    "evaluate",
    "metric_sparsity",
    "weight_vector",
]


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    SOFTMAX_OUTPUT = "softmax-output"  # tags a logits layer; applied inside losses


class LossKind(str, enum.Enum):
    MSE = "mse"
    CE = "ce"
    PROJECTED_CE = "projected-ce"


class RegKind(str, enum.Enum):
    NONE = "none"
    L1 = "l1"
    L2 = "l2"
    PROPOSED = "proposed"


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    ADAPTIVE_MOMENT = "adam"


@dataclass
class Layer:
    weights: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: Activation

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("layer shapes inconsistent")
        self.activation = Activation(self.activation)


@dataclass
class Model:
    layers: list[Layer]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weights.shape[1] != nxt.weights.shape[0]:
                raise ValueError("consecutive layer dimensions incompatible")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weights, layer.bias])
        return out


def init_dense_model(
    dims: list[int],
    rng: Rng,
    output_activation: Activation = Activation.SOFTMAX_OUTPUT,
    hidden_activation: Activation = Activation.RELU,
    scale: float | None = None,
) -> Model:
    """Dense model over dims = [in, hidden..., out]; N(0, scale^2) weights.

    scale defaults to 1/sqrt(fan_in) per layer. Biases start at zero.
    """
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        s = scale if scale is not None else 1.0 / np.sqrt(fan_in)
        act = output_activation if i == len(dims) - 2 else hidden_activation
        layers.append(
            Layer(
                weights=rng.substream(i).normal(size=(fan_in, fan_out), scale=s),
                bias=np.zeros(fan_out),
                activation=act,
            )
        )
    return Model(layers)


def forward(model: Model, x: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All layer pre-activations and activations for a (batch, d) input.

    The last entry's activation holds the raw logits; any softmax is
    applied inside the loss functions.
    """
    x = as_matrix(x, cols=model.input_dim)
    acts = []
    a = x
    for layer in model.layers:
        z = a @ layer.weights + layer.bias
        a = np.maximum(z, 0.0) if layer.activation is Activation.RELU else z
        acts.append((z, a))
    return acts


def backward(
    model: Model, x: np.ndarray, acts: list[tuple[np.ndarray, np.ndarray]], dout: np.ndarray
) -> list[np.ndarray]:
    """Parameter gradients given dLoss/d(output pre-activation).

    Returns [dW0, db0, dW1, db1, ...] matching model.parameters().
    """
    grads: list[np.ndarray] = []
    delta = dout
    for li in range(len(model.layers) - 1, -1, -1):
        a_prev = x if li == 0 else acts[li - 1][1]
        grads.insert(0, delta.sum(axis=0))
        grads.insert(0, a_prev.T @ delta)
        if li > 0:
            delta = delta @ model.layers[li].weights.T
            if model.layers[li - 1].activation is Activation.RELU:
                delta = delta * (acts[li - 1][0] > 0.0)
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_mse(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over one vector; gradient wrt pred."""
    pred, target = as_vector(pred), as_vector(target)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {target.size}")
    diff = pred - target
    n = pred.size
    return float(np.dot(diff, diff) / n), 2.0 * diff / n


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def loss_ce(logits, true_class: int) -> tuple[float, np.ndarray]:
    """Cross entropy of a single logit vector; gradient wrt logits."""
    logits = require_finite(as_vector(logits), "logits")
    if not (0 <= true_class < logits.size):
        raise IndexError(f"class {true_class} out of range for {logits.size} logits")
    log_p = _log_softmax(logits)
    grad = np.exp(log_p)
    grad[true_class] -= 1.0
    return float(-log_p[true_class]), grad


def projected_ce_on_selection(logits, true_class: int, selection: np.ndarray):
    """Cross entropy renormalized over a fixed selection of classes.

    The selection must include the true class. The gradient is the
    renormalized softmax minus the one-hot target on the selection and
    exactly zero elsewhere.
    """
    logits = as_vector(logits)
    selection = np.asarray(selection, dtype=bool)
    if not selection[true_class]:
        raise ValueError("selection must include the true class")
    sel_idx = np.flatnonzero(selection)
    sel_logits = logits[sel_idx]
    log_p = _log_softmax(sel_logits)
    grad = np.zeros_like(logits)
    grad[sel_idx] = np.exp(log_p)
    grad[true_class] -= 1.0
    value = float(-log_p[np.searchsorted(sel_idx, true_class)])
    return value, grad


@dataclass
class ProjectedCEResult:
    value: float
    gradient: np.ndarray
    selection: np.ndarray  # bool, length = n classes
    blended_distribution: np.ndarray | None


def loss_projected_ce(
    logits, true_class: int, cfg: SamplerConfig, state: SamplerState, rng: Rng
) -> ProjectedCEResult:
    """Cross entropy over a sampled subset of classes plus the true class.

    The subset comes from the same machinery that picks weight
    coordinates, with the logits standing in for the weights: score,
    blend with the retained distribution, select. The true class is
    always added to the selection so the loss stays finite.
    """
    logits = require_finite(as_vector(logits), "logits")
    k = logits.size
    if not (0 <= true_class < k):
        raise IndexError(f"class {true_class} out of range for {k} logits")

    blended = None
    if cfg.selection_mode is SelectionMode.UNIFORM_THRESHOLD:
        selection = rng.uniform(k) > cfg.T
    elif cfg.selection_mode is SelectionMode.UNIFORM_SUBSET:
        selection = np.zeros(k, dtype=bool)
        selection[rng.subset(k, cfg.mask_size(k))] = True
    else:
        p_s = rng.uniform()
        blended = apply_momentum(score_distribution(logits, p_s, cfg.score_mode), state, cfg.alpha)
        if cfg.selection_mode is SelectionMode.TOP_K:
            order = np.argsort(-blended, kind="stable")
            selection = np.zeros(k, dtype=bool)
            selection[order[: cfg.mask_size(k)]] = True
        else:
            selection = blended > cfg.T / k
    selection = selection.copy()
    selection[true_class] = True

    value, grad = projected_ce_on_selection(logits, true_class, selection)
    return ProjectedCEResult(value, grad, selection, blended)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class _SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads):
        if self.lr == 0.0:
            return
        for p, g in zip(params, grads):
            p -= self.lr * g


class _Adam:
    """Adaptive moment estimation, decay 0.9/0.999, epsilon 1e-8."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    loss: LossKind = LossKind.CE
    reg: RegKind = RegKind.NONE
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    penalty: PenaltySpec = field(default_factory=PenaltySpec)
    learning_rate: float = 0.001
    batch_size: int = 32
    epochs: int = 10
    optimizer: OptimizerKind = OptimizerKind.ADAPTIVE_MOMENT
    seed: int = 0
    metric_threshold: float = 1e-3

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        self.loss = LossKind(self.loss)
        self.reg = RegKind(self.reg)
        self.optimizer = OptimizerKind(self.optimizer)


@dataclass
class MetricsRow:
    iteration: int
    split: str
    loss: float
    accuracy: float
    weight_magnitude: float
    weight_density: float


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step}: loss {loss}")
        self.step = step


def metric_sparsity(w, threshold: float) -> float:
    """1 - fraction of entries with |w_j| above the threshold."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    w = as_vector(w)
    return 1.0 - float(np.count_nonzero(np.abs(w) > threshold)) / w.size


def weight_vector(model: Model) -> np.ndarray:
    """All regularized parameters (weights, not biases) as one flat vector."""
    return np.concatenate([layer.weights.ravel() for layer in model.layers])


def _batch_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    log_p = _log_softmax(logits)
    value = float(-log_p[np.arange(b), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(b), labels] -= 1.0
    return value, grad / b


def _batch_mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    value = float((diff**2).mean())
    return value, 2.0 * diff / diff.size


def _check_task_compat(loss: LossKind, data: Dataset) -> None:
    if loss is LossKind.MSE and data.n_classes is not None:
        raise ValueError("mse loss requires regression targets")
    if loss in (LossKind.CE, LossKind.PROJECTED_CE) and data.n_classes is None:
        raise ValueError(f"{loss.value} loss requires class targets")


def evaluate(model: Model, data: Dataset, loss: LossKind) -> tuple[float, float]:
    """(mean data loss, accuracy) on a split.

    Classification reports plain cross entropy and argmax accuracy even
    under projected-CE training (the projection is a training-time
    criterion). Regression reports MSE and R^2 clipped to [0, 1] in the
    accuracy column.
    """
    logits = forward(model, data.features)[-1][1]
    if data.n_classes is not None:
        value, _ = _batch_ce(logits, data.targets)
        acc = float((logits.argmax(axis=1) == data.targets).mean())
        return value, acc
    pred = logits[:, 0]
    value = float(((pred - data.targets) ** 2).mean())
    ss_res = float(((data.targets - pred) ** 2).sum())
    ss_tot = float(((data.targets - data.targets.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    return value, float(np.clip(r2, 0.0, 1.0))


def _epoch_rows(model, train_data, test_data, cfg, epoch) -> list[MetricsRow]:
    w = weight_vector(model)
    magnitude = float(np.abs(w).sum())
    density = 1.0 - metric_sparsity(w, cfg.metric_threshold)
    rows = []
    for split, data in (("train", train_data), ("test", test_data)):
        loss, acc = evaluate(model, data, cfg.loss)
        rows.append(MetricsRow(epoch, split, loss, acc, magnitude, density))
    return rows


def train(model: Model, train_data: Dataset, test_data: Dataset, cfg: TrainConfig) -> list[MetricsRow]:
    """Mini-batch training; one train and one test metrics row per epoch.

    Deterministic given (model init, data, cfg.seed): shuffling, mask
    draws, and projected-CE selections each consume their own seeded
    sub-stream, so switching the regularizer on or off never desynchronizes
    the data order.
    """
    _check_task_compat(cfg.loss, train_data)
    rng = Rng(cfg.seed)
    shuffle_rng = rng.substream(0)
    mask_rng = rng.substream(1)
    loss_rng = rng.substream(2)

    params = model.parameters()
    opt_cls = _Adam if cfg.optimizer is OptimizerKind.ADAPTIVE_MOMENT else _SGD
    opt = opt_cls(params, cfg.learning_rate)

    layer_states = [SamplerState() for _ in model.layers]
    ce_state = SamplerState()
    regression = train_data.n_classes is None
    targets = train_data.targets if not regression else train_data.targets.astype(np.float64)

    rows: list[MetricsRow] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(train_data.n)
        for start in range(0, train_data.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = train_data.features[idx], targets[idx]

            acts = forward(model, xb)
            logits = acts[-1][1]
            ce_blend = None
            if cfg.loss is LossKind.MSE:
                data_loss, dout = _batch_mse(logits[:, 0], yb)
                dout = dout[:, None]
            elif cfg.loss is LossKind.CE:
                data_loss, dout = _batch_ce(logits, yb.astype(np.int64))
            else:
                data_loss, dout, ce_blend = _batch_projected_ce(
                    logits, yb.astype(np.int64), cfg.sampler, ce_state, loss_rng.substream(step)
                )
            grads = backward(model, xb, acts, dout)

            penalty_total = 0.0
            commits = []
            if cfg.reg is not RegKind.NONE:
                for li, layer in enumerate(model.layers):
                    wflat = layer.weights.ravel()
                    if cfg.reg is RegKind.L1:
                        res = penalty_l1(wflat, cfg.penalty.lambda_base)
                    elif cfg.reg is RegKind.L2:
                        res = penalty_l2(wflat, cfg.penalty.lambda_base)
                    else:
                        draw = draw_masks(
                            wflat, cfg.sampler, layer_states[li],
                            mask_rng.substream(step).substream(li),
                        )
                        res = penalty_proposed(wflat, draw.masks, draw.counter, cfg.penalty)
                        if draw.step_distribution is not None:
                            commits.append((li, draw.step_distribution))
                    grads[2 * li] = grads[2 * li] + res.gradient.reshape(layer.weights.shape)
                    penalty_total += res.value

            total = data_loss + penalty_total
            if not np.isfinite(total):
                raise TrainingDivergedError(step, total)

            opt.step(params, grads)
            for li, dist in commits:
                commit_state(layer_states[li], dist)
            if ce_blend is not None:
                commit_state(ce_state, ce_blend)
            step += 1

        rows.extend(_epoch_rows(model, train_data, test_data, cfg, epoch))
    return rows


def _batch_projected_ce(
    logits: np.ndarray,
    labels: np.ndarray,
    cfg: SamplerConfig,
    state: SamplerState,
    rng: Rng,
) -> tuple[float, np.ndarray, np.ndarray | None]:
    """Mean projected CE over a batch; per-sample selections, one shared state.

    Returns the mean of the per-sample blended distributions for the
    caller to commit after its optimizer step (None when the selection
    mode never builds a distribution).
    """
    b = logits.shape[0]
    value = 0.0
    grad = np.zeros_like(logits)
    blend_sum = None
    for i in range(b):
        res = loss_projected_ce(logits[i], int(labels[i]), cfg, state, rng.substream(i))
        value += res.value
        grad[i] = res.gradient
        if res.blended_distribution is not None:
            blend_sum = (
                res.blended_distribution if blend_sum is None
                else blend_sum + res.blended_distribution
            )
    return value / b, grad / b, (blend_sum / b if blend_sum is not None else None)
