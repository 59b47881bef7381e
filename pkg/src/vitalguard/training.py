"""Supervised training: class-weighted cross-entropy from logits, orthogonal
initialization, Adam, early stopping on validation F1.

Everything is seeded through one SeedSequence, so a fixed (data, config,
seed) triple reproduces the final parameters bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor2
from .errors import ConfigError
from .metrics import classification_metrics
from .model import (
    AblationMask,
    FULL_MASK,
    ModelConfig,
    forward_many,
    parameter_shapes,
    predict_scores,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "orthogonal_init",
    "init_parameters",
    "pos_weight",
    "weighted_bce",
    "weighted_bce_loss",
    "AdamState",
    "adam_step",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1/beta2 must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")


ADAM_EPS = 1e-8
TOKEN_INIT_SD = 0.02


def orthogonal_init(
    shape: tuple[int, int], rng: np.random.Generator | int
) -> np.ndarray:
    """Random matrix whose smaller-dimension Gram matrix is the identity.

    QR of a Gaussian draw, with the sign of R's diagonal folded into Q so the
    distribution is uniform over orthogonal matrices rather than biased by
    the factorization convention.
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ConfigError(f"orthogonal_init: bad shape {shape}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q)


def init_parameters(
    config: ModelConfig, seed: int | np.random.Generator
) -> dict[str, Tensor2]:
    """Fresh trainable parameters for every path of the architecture.

    Weight matrices (attention projections, linear projections, flattened
    conv banks, the head) are orthogonal; biases and norm shifts start at
    zero, norm gains at one, and the class token as a small Gaussian row.
    Draws happen in fixed path order from one seeded generator.
    """
    if isinstance(seed, np.random.Generator):
        rng = seed
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
    params: dict[str, Tensor2] = {}
    for path, shape in parameter_shapes(config).items():
        leaf = path.rsplit(".", 1)[-1]
        if path == "class_token":
            data = rng.normal(0.0, TOKEN_INIT_SD, size=shape)
        elif leaf in ("wq", "wk", "wv", "weight"):
            data = orthogonal_init(shape, rng)
        elif leaf == "bias" or leaf == "shift":
            data = np.zeros(shape)
        elif leaf == "gain":
            data = np.ones(shape)
        else:
            raise ConfigError(f"no initializer for parameter path {path!r}")
        params[path] = Tensor2(data, requires_grad=True)
    return params


def pos_weight(labels) -> float:
    """Class weight for positives: negative count over positive count."""
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigError(
            f"cannot weight classes: {n_pos} positive / {n_neg} negative samples"
        )
    return n_neg / n_pos


def _softplus(z: np.ndarray) -> np.ndarray:
    # log(1 + e^z) without overflow for large |z|
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def weighted_bce(logits, labels, w_plus: float) -> float:
    """Mean class-weighted cross-entropy, computed from logits.

    Positives weigh w_plus; equals -(1/n) sum[w+ y log p + (1-y) log(1-p)]
    with p = sigmoid(logit), in a form stable for extreme logits.
    """
    if w_plus <= 0:
        raise ConfigError("w_plus must be positive")
    z = np.asarray(logits, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if z.shape != y.shape:
        raise ConfigError("logits and labels differ in length")
    if z.size == 0:
        raise ConfigError("weighted_bce: empty input")
    per_sample = w_plus * y * _softplus(-z) + (1.0 - y) * _softplus(z)
    return float(per_sample.mean())


def weighted_bce_loss(
    logits: Tensor2, labels, w_plus: float, tape: Tape | None = None
) -> Tensor2:
    """Tape-recorded version over a (B, 1) logit stack; returns a 1x1 loss."""
    if logits.cols != 1:
        raise ConfigError(f"weighted_bce_loss expects (B, 1) logits, got {logits.shape}")
    y = np.asarray(labels, dtype=float).reshape(-1, 1)
    if y.shape != logits.shape:
        raise ConfigError("logits and labels differ in length")
    z = logits.data
    value = weighted_bce(z, y, w_plus)
    out = Tensor2._result(np.array([[value]]), tape is not None and logits._track)
    if out._track:
        n = z.shape[0]
        sig = ad.sigmoid_array(z)

        def backward(g: np.ndarray) -> None:
            dz = (w_plus * y * (sig - 1.0) + (1.0 - y) * sig) / n
            logits._accum(dz * g[0, 0])

        tape._record(out, backward)
    return out


@dataclass
class AdamState:
    """First/second moment accumulators per parameter path."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor2]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            step=0,
        )


def adam_step(
    params: dict[str, Tensor2], state: AdamState, config: TrainConfig
) -> None:
    """One bias-corrected moment update in place. Parameters whose gradient
    buffer is untouched (masked-off pathways) keep their exact values."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for key, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        tensor.data -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


@dataclass(eq=False)
class TrainResult:
    params: dict[str, Tensor2]
    best_epoch: int
    best_val_f1: float
    history: list[dict]
    pos_weight: float


def _epoch_val_f1(val_windows, params, model_config, mask) -> float:
    scores = predict_scores(val_windows, params, model_config, mask)
    labels = np.array([w.label for w in val_windows])
    return classification_metrics(scores, labels).f1


def train(
    train_windows: list,
    val_windows: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    mask: AblationMask = FULL_MASK,
) -> TrainResult:
    """Minibatch training with early stopping on validation F1.

    Model selection uses raw thresholded scores (threshold 0.5) without the
    plausibility filter, which is an inference-stage component. The best-F1
    parameter snapshot is returned, not the last one.
    """
    if not train_windows or not val_windows:
        raise ConfigError("train: empty split")
    val_labels = {w.label for w in val_windows}
    if val_labels != {0, 1}:
        raise ConfigError("train: validation split must contain both classes")
    w_plus = pos_weight([w.label for w in train_windows])

    root = np.random.SeedSequence([train_config.seed])
    init_seq, shuffle_seq, dropout_seq = root.spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    params = init_parameters(model_config, np.random.default_rng(init_seq))
    state = AdamState.for_params(params)
    n = len(train_windows)
    batch = train_config.batch_size
    labels_all = np.array([w.label for w in train_windows])
    values_all = [w.values for w in train_windows]

    best_f1 = -1.0
    best_epoch = -1
    best_params: dict[str, Tensor2] | None = None
    epochs_since_improve = 0
    history: list[dict] = []

    for epoch in range(train_config.max_epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            tape = Tape()
            logits = forward_many(
                [values_all[i] for i in idx],
                params,
                model_config,
                mask,
                training=True,
                rng=dropout_rng,
                tape=tape,
            )
            loss = weighted_bce_loss(logits, labels_all[idx], w_plus, tape)
            tape.backward(loss)
            adam_step(params, state, train_config)
            for t in params.values():
                t.zero_grad()
            losses.append(loss.item())
        val_f1 = _epoch_val_f1(val_windows, params, model_config, mask)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_f1": val_f1,
            }
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_params = {
                k: Tensor2(t.data.copy(), requires_grad=True)
                for k, t in params.items()
            }
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
            if epochs_since_improve >= train_config.patience:
                break

    assert best_params is not None
    return TrainResult(
        params=best_params,
        best_epoch=best_epoch,
        best_val_f1=best_f1,
        history=history,
        pos_weight=w_plus,
    )
