"""The probability-fusion network and its training loop.

One network per CNN model: the model's 63 class probabilities concatenated
with the 27 normalized metadata features feed a single 1024-unit rectified
hidden layer with inverted dropout (rate 0.60), then a 63-way softmax.  The
net is small enough that plain numpy with hand-derived gradients is both the
fastest and the most auditable implementation; a finite-difference check is
part of the public surface.

Input layout everywhere: column 0..62 = CNN probabilities, column 63..89 =
metadata features.

Reproducibility: given identical data, config, and seed, training produces
bit-identical weight trajectories.  Dropout masks are drawn from a stream
keyed by (seed, step) and epoch shuffles from (seed, epoch), so neither
depends on execution history.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from ._validation import check_feature_matrix, check_labels, check_probability_matrix
from .errors import (
    DataError,
    DimensionMismatchError,
    NumericalError,
    ParseError,
    TruncatedFileError,
    ValidationError,
    VersionMismatchError,
)
from .features import N_FEATURES
from .metadata import N_CLASSES

N_INPUTS = N_CLASSES + N_FEATURES  # 90
DEFAULT_HIDDEN = 1024
DEFAULT_DROPOUT = 0.6
PROB_FLOOR = 1e-12
WEIGHTS_FORMAT_VERSION = 1

# sub-stream tags so shuffle/dropout/split draws never collide
_STREAM_SHUFFLE = 1
_STREAM_DROPOUT = 2
_STREAM_VALSPLIT = 3


@dataclass(frozen=True)
class FusionNet:
    """Weights of one fusion network; arrays are float64 and never mutated."""

    W1: np.ndarray  # (hidden, n_inputs)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (n_outputs, hidden)
    b2: np.ndarray  # (n_outputs,)
    dropout_rate: float = DEFAULT_DROPOUT
    activation: str = "relu"
    seed: int | None = None

    def __post_init__(self):
        if self.activation != "relu":
            raise ValidationError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        h, n_in = self.W1.shape
        n_out, h2 = self.W2.shape
        if h2 != h or self.b1.shape != (h,) or self.b2.shape != (n_out,):
            raise ValidationError(
                f"inconsistent weight shapes: W1 {self.W1.shape}, b1 {self.b1.shape}, "
                f"W2 {self.W2.shape}, b2 {self.b2.shape}"
            )
        for name in ("W1", "b1", "W2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError(f"{name} contains non-finite values")

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.W2.shape[0]

    def copy(self) -> "FusionNet":
        return replace(self, W1=self.W1.copy(), b1=self.b1.copy(),
                       W2=self.W2.copy(), b2=self.b2.copy())


def init_network(seed: int = 0, *, n_inputs: int = N_INPUTS, hidden_units: int = DEFAULT_HIDDEN,
                 n_outputs: int = N_CLASSES, dropout_rate: float = DEFAULT_DROPOUT) -> FusionNet:
    """Fresh network: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    lim1 = math.sqrt(6.0 / (n_inputs + hidden_units))
    lim2 = math.sqrt(6.0 / (hidden_units + n_outputs))
    return FusionNet(
        W1=rng.uniform(-lim1, lim1, size=(hidden_units, n_inputs)),
        b1=np.zeros(hidden_units),
        W2=rng.uniform(-lim2, lim2, size=(n_outputs, hidden_units)),
        b2=np.zeros(n_outputs),
        dropout_rate=dropout_rate,
        seed=seed,
    )


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; invariant under adding a constant to all logits."""
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def apply_dropout(h: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: kept units scaled by 1/(1-rate) so E[output] = input.

    Returns (dropped activations, multiplier mask); the mask already carries
    the 1/(1-rate) scale for reuse in the backward pass.
    """
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return h, np.ones_like(h)
    keep = rng.random(h.shape) >= rate
    mult = keep / (1.0 - rate)
    return h * mult, mult


def _forward_cached(net: FusionNet, X: np.ndarray, mult: np.ndarray | None):
    Z1 = X @ net.W1.T + net.b1
    H = np.maximum(Z1, 0.0)
    Hd = H if mult is None else H * mult
    P = softmax(Hd @ net.W2.T + net.b2)
    return P, (Z1, Hd)


def forward(net: FusionNet, x, mode: str = "infer", rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Class probabilities for one input vector or a batch.

    ``mode="infer"`` is deterministic and applies no dropout.  ``mode="train"``
    draws an inverted-dropout mask from ``rng`` (a Generator or a seed).
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    X = arr[None, :] if single else arr
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValidationError(f"input must have {net.n_inputs} columns, got shape {arr.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericalError("forward input contains non-finite values")
    if mode == "infer":
        mult = None
    elif mode == "train":
        if rng is None:
            raise ValidationError("train mode requires an rng or seed")
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        Z1 = X @ net.W1.T + net.b1
        H = np.maximum(Z1, 0.0)
        Hd, _ = apply_dropout(H, net.dropout_rate, gen)
        P = softmax(Hd @ net.W2.T + net.b2)
        return P[0] if single else P
    else:
        raise ValidationError(f"mode must be 'infer' or 'train', got {mode!r}")
    P, _ = _forward_cached(net, X, mult)
    return P[0] if single else P


def loss(probs, label: int) -> float:
    """Cross-entropy of one prediction: -log(p[label]), probability floored at 1e-12."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValidationError(f"label {label} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(float(p[label]), PROB_FLOOR)))


def cross_entropy(P: np.ndarray, y: np.ndarray) -> float:
    picked = np.clip(P[np.arange(len(y)), y], PROB_FLOOR, None)
    return float(-np.log(picked).mean())


def _gradients(net: FusionNet, X: np.ndarray, y: np.ndarray,
               mult: np.ndarray | None) -> tuple[dict[str, np.ndarray], float]:
    """Analytic gradients of mean cross-entropy over the batch.

    The 1e-12 probability floor is a safety net for reporting; the gradient
    uses the exact softmax cross-entropy derivative, which matches the floored
    loss everywhere the floor is inactive.
    """
    n = X.shape[0]
    P, (Z1, Hd) = _forward_cached(net, X, mult)
    batch_loss = cross_entropy(P, y)
    dZ2 = P.copy()
    dZ2[np.arange(n), y] -= 1.0
    dZ2 /= n
    dW2 = dZ2.T @ Hd
    db2 = dZ2.sum(axis=0)
    dHd = dZ2 @ net.W2
    dH = dHd if mult is None else dHd * mult
    dZ1 = dH * (Z1 > 0)
    dW1 = dZ1.T @ X
    db1 = dZ1.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}, batch_loss


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; epochs cap at 20 with early stopping by default.

    ``min_delta`` is the absolute improvement the validation loss must make
    over the best value seen; `patience` epochs without one stop training.
    """

    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 20
    patience: int = 3
    min_delta: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        # zero is allowed so a no-op step stays expressible
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ValidationError("moment decays must lie in (0, 1)")


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, net: FusionNet) -> "AdamState":
        blocks = {"W1": net.W1, "b1": net.b1, "W2": net.W2, "b2": net.b2}
        return cls(
            m={k: np.zeros_like(a) for k, a in blocks.items()},
            v={k: np.zeros_like(a) for k, a in blocks.items()},
        )


def train_step(net: FusionNet, X, y, config: TrainConfig,
               opt_state: AdamState | None = None,
               rng: np.random.Generator | None = None) -> tuple[FusionNet, AdamState, float]:
    """One adaptive-moment update from a batch; returns (net', state', batch loss).

    With ``rng=None`` the dropout mask comes from the (seed, step) stream, so
    the update is a pure function of (net, batch, config, step counter).
    """
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, net.n_outputs)
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValidationError(f"batch must be (n, {net.n_inputs}), got {X.shape}")
    if X.shape[0] == 0:
        raise DataError("batch must be nonempty")
    if X.shape[0] != y.shape[0]:
        raise DataError(f"batch has {X.shape[0]} rows but {y.shape[0]} labels")
    state = opt_state if opt_state is not None else AdamState.zeros(net)

    if net.dropout_rate > 0.0:
        gen = rng if rng is not None else np.random.default_rng((config.seed, _STREAM_DROPOUT, state.t))
        _, mult = apply_dropout(np.ones((X.shape[0], net.n_hidden)), net.dropout_rate, gen)
    else:
        mult = None
    grads, batch_loss = _gradients(net, X, y, mult)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient for {name} is not finite")

    t = state.t + 1
    new_params = {}
    new_m, new_v = {}, {}
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for name, g in grads.items():
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * (g * g)
        update = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        new_params[name] = getattr(net, name) - update
        new_m[name], new_v[name] = m, v
    net2 = replace(net, **new_params)
    return net2, AdamState(m=new_m, v=new_v, t=t), batch_loss


def evaluate(net: FusionNet, X, y) -> tuple[float, float]:
    """(mean cross-entropy, accuracy) in inference mode."""
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, net.n_outputs)
    if X.shape[0] == 0:
        raise DataError("evaluation set must be nonempty")
    P = forward(net, X, mode="infer")
    return cross_entropy(P, y), float((P.argmax(axis=1) == y).mean())


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float


def train(net: FusionNet, X_train, y_train, X_val, y_val,
          config: TrainConfig | None = None) -> tuple[FusionNet, list[EpochStats]]:
    """Train with early stopping; returns the best-validation-epoch weights.

    ``train_loss`` in the history is the mean over the epoch's optimization
    batches (dropout active); accuracies and ``val_loss`` are inference-mode
    evaluations of the epoch-end weights.
    """
    config = config or TrainConfig()
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    y_train = check_labels(y_train, net.n_outputs)
    y_val = check_labels(y_val, net.n_outputs)
    if X_train.shape[0] == 0 or X_val.shape[0] == 0:
        raise DataError("training and validation sets must be nonempty")

    state = AdamState.zeros(net)
    best_net = net.copy()
    best_loss = math.inf  # best seen, snapshot on any strict improvement
    stop_ref = math.inf  # patience resets only on improvement >= min_delta
    bad_epochs = 0
    history: list[EpochStats] = []
    step = 0
    n = X_train.shape[0]

    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng((config.seed, _STREAM_SHUFFLE, epoch)).permutation(n)
        loss_sum = 0.0
        seen = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            mask_rng = np.random.default_rng((config.seed, _STREAM_DROPOUT, step))
            net, state, batch_loss = train_step(
                net, X_train[idx], y_train[idx], config, state, rng=mask_rng
            )
            loss_sum += batch_loss * len(idx)
            seen += len(idx)
            step += 1
        _, train_acc = evaluate(net, X_train, y_train)
        val_loss, val_acc = evaluate(net, X_val, y_val)
        history.append(EpochStats(epoch, loss_sum / seen, val_loss, train_acc, val_acc))

        if val_loss < best_loss:
            best_loss = val_loss
            best_net = net.copy()
        if val_loss < stop_ref - config.min_delta:
            stop_ref = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break
    return best_net, history


def write_history_csv(path: str | Path, history: Sequence[EpochStats]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "train_acc", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_loss),
                             repr(row.train_acc), repr(row.val_acc)])


def gradient_check(net: FusionNet, x, label: int, *, eps: float = 1e-5,
                   samples_per_block: int = 200, seed: int = 0,
                   resolve_floor: float = 1e-3) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    Dropout is disabled.  Two parameter populations are excluded because
    central differences cannot measure them at the given eps: entries whose
    gradient magnitude sits below ``resolve_floor`` (float64 roundoff of the
    two loss evaluations dominates there) and rows of the first layer whose
    pre-activation lies within 10*eps*max(1,|x|) of the rectifier kink.  The
    relative error |a - b| / max(|a|, |b|) is symmetric in its arguments.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    X = x[None, :]
    y = np.array([label])
    analytic, _ = _gradients(net, X, y, None)

    z1 = net.W1 @ x + net.b1
    kink_guard = 10.0 * eps * max(1.0, float(np.abs(x).max()))
    safe_rows = np.abs(z1) > kink_guard

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in ("W1", "b1", "W2", "b2"):
        a = analytic[name]
        eligible = np.abs(a) >= resolve_floor
        if name == "W1":
            eligible &= safe_rows[:, None]
        elif name == "b1":
            eligible &= safe_rows
        flat = np.flatnonzero(eligible)
        if flat.size == 0:
            continue
        take = min(samples_per_block, flat.size)
        chosen = rng.choice(flat, size=take, replace=False)
        base = getattr(net, name)
        for idx in chosen:
            pos = np.unravel_index(idx, base.shape)
            perturbed = base.copy()
            perturbed[pos] = base[pos] + eps
            p_plus = forward(replace(net, **{name: perturbed}), x)
            perturbed[pos] = base[pos] - eps
            p_minus = forward(replace(net, **{name: perturbed}), x)
            numeric = (loss(p_plus, label) - loss(p_minus, label)) / (2.0 * eps)
            a_val = float(a[pos])
            denom = max(abs(a_val), abs(numeric))
            if denom > 0:
                worst = max(worst, abs(a_val - numeric) / denom)
    return worst


def save_weights(net: FusionNet, path: str | Path) -> None:
    """One-line JSON manifest followed by raw little-endian float64 blocks."""
    manifest = {
        "version": WEIGHTS_FORMAT_VERSION,
        "dims": [net.n_inputs, net.n_hidden, net.n_outputs],
        "dropout_rate": net.dropout_rate,
        "seed": net.seed,
        "activation": net.activation,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for block in (net.W1, net.b1, net.W2, net.b2):
            fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_weights(path: str | Path) -> FusionNet:
    """Inverse of :func:`save_weights`; bit-exact round trip.

    Raises :class:`VersionMismatchError`, :class:`DimensionMismatchError`, or
    :class:`TruncatedFileError` for the respective defects.
    """
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            manifest = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise ParseError(f"{path}: malformed weights manifest") from None
        if not isinstance(manifest, dict) or "version" not in manifest:
            raise ParseError(f"{path}: weights manifest missing version")
        if manifest["version"] != WEIGHTS_FORMAT_VERSION:
            raise VersionMismatchError(
                f"{path}: weights format version {manifest['version']} unsupported "
                f"(expected {WEIGHTS_FORMAT_VERSION})"
            )
        dims = manifest.get("dims")
        if (not isinstance(dims, list)) or len(dims) != 3:
            raise ParseError(f"{path}: weights manifest dims malformed")
        n_in, hidden, n_out = (int(d) for d in dims)
        if n_in != N_INPUTS or n_out != N_CLASSES or hidden < 1:
            raise DimensionMismatchError(
                f"{path}: dims {dims} incompatible with {N_INPUTS}->hidden->{N_CLASSES}"
            )
        shapes = [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)]
        blocks = []
        for shape in shapes:
            count = int(np.prod(shape))
            payload = fh.read(count * 8)
            if len(payload) < count * 8:
                raise TruncatedFileError(
                    f"{path}: expected {count * 8} bytes for shape {shape}, found {len(payload)}"
                )
            blocks.append(np.frombuffer(payload, dtype="<f8").reshape(shape).copy())
        if fh.read(1):
            raise ParseError(f"{path}: trailing bytes after weight blocks")
    W1, b1, W2, b2 = blocks
    return FusionNet(
        W1=W1, b1=b1, W2=W2, b2=b2,
        dropout_rate=float(manifest.get("dropout_rate", DEFAULT_DROPOUT)),
        activation=manifest.get("activation", "relu"),
        seed=manifest.get("seed"),
    )


def check_fusion_matrix(X) -> np.ndarray:
    """Validate the 90-column fusion input: probs block then feature block."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != N_INPUTS:
        raise ValidationError(f"fusion input must have {N_INPUTS} columns, got shape {arr.shape}")
    check_probability_matrix(arr[:, :N_CLASSES], N_CLASSES, name="cnn probabilities")
    check_feature_matrix(arr[:, N_CLASSES:], N_FEATURES, name="metadata features")
    return arr


class FusionNetClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around the fusion network.

    ``fit`` expects the 90-column layout (63 CNN probabilities then 27
    metadata features).  Pass ``X_val``/``y_val`` for an explicit holdout;
    otherwise ``validation_fraction`` of the rows is carved out with a
    deterministic shuffle keyed by ``seed``.
    """

    def __init__(self, hidden_units: int = DEFAULT_HIDDEN, dropout_rate: float = DEFAULT_DROPOUT,
                 learning_rate: float = 1e-3, batch_size: int = 256, max_epochs: int = 20,
                 patience: int = 3, min_delta: float = 1e-5,
                 validation_fraction: float = 0.1, seed: int = 0):
        self.hidden_units = hidden_units
        self.dropout_rate = dropout_rate
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_delta = min_delta
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            min_delta=self.min_delta,
            seed=self.seed,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_fusion_matrix(X)
        y = check_labels(y)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
        if (X_val is None) != (y_val is None):
            raise DataError("pass both X_val and y_val or neither")
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValidationError(
                    f"validation_fraction must be in (0, 1), got {self.validation_fraction}"
                )
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            if n_val >= X.shape[0]:
                raise DataError("not enough rows to carve out a validation split")
            order = np.random.default_rng((self.seed, _STREAM_VALSPLIT)).permutation(X.shape[0])
            val_idx, train_idx = order[:n_val], order[n_val:]
            X, X_val, y, y_val = X[train_idx], X[val_idx], y[train_idx], y[val_idx]
        else:
            X_val = check_fusion_matrix(X_val)
            y_val = check_labels(y_val)

        net = init_network(self.seed, hidden_units=self.hidden_units,
                           dropout_rate=self.dropout_rate)
        self.net_, self.history_ = train(net, X, y, X_val, y_val, self._config())
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = N_INPUTS
        return self

    def _ensure_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("this FusionNetClassifier instance is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._ensure_fitted()
        return forward(self.net_, check_fusion_matrix(X), mode="infer")

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)
