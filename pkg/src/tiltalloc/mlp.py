"""Plain-numpy MLP regressor: forward pass, reverse-mode gradients, Adam.

Maps [theta, mu_des] (4) to the optimal input vector (5). Everything runs in
float64; inputs and outputs are z-scored with statistics carried inside the
model, so a saved model is self-contained. The serialized form is JSON with
shortest-roundtrip float literals, which makes save/load bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MlpModel",
    "NormStats",
    "TrainConfig",
    "TrainingDiverged",
    "SchemaMismatch",
    "CorruptFile",
    "init_model",
    "loss_and_gradient",
    "train",
    "save_model",
    "load_model",
]

SCHEMA_TAG = "tiltalloc-mlp/v1"


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


class SchemaMismatch(ValueError):
    """Model file has the wrong schema tag or inconsistent shapes."""


class CorruptFile(ValueError):
    """Model file is not parseable."""


@dataclass
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    def __post_init__(self) -> None:
        for name in ("x_mean", "x_std", "y_mean", "y_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.x_std <= 0.0) or np.any(self.y_std <= 0.0):
            raise ValueError("normalization stds must be positive")

    @classmethod
    def identity(cls, n_in: int, n_out: int) -> "NormStats":
        return cls(np.zeros(n_in), np.ones(n_in), np.zeros(n_out), np.ones(n_out))

    @classmethod
    def from_data(cls, X: np.ndarray, Y: np.ndarray) -> "NormStats":
        def stats(M):
            mean = M.mean(axis=0)
            std = M.std(axis=0)
            std[std < 1e-12] = 1.0  # constant columns pass through unscaled
            return mean, std

        xm, xs = stats(np.asarray(X, dtype=float))
        ym, ys = stats(np.asarray(Y, dtype=float))
        return cls(xm, xs, ym, ys)


_ACT = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),  # derivative from the activation value
    "identity": (lambda x: x, lambda a: np.ones_like(a)),
}


@dataclass
class MlpModel:
    layer_sizes: list[int]
    weights: list[np.ndarray]  # each (n_in, n_out)
    biases: list[np.ndarray]
    norm_stats: NormStats
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        sizes = self.layer_sizes
        if len(self.weights) != len(sizes) - 1 or len(self.biases) != len(sizes) - 1:
            raise ValueError("parameter count does not match layer_sizes")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k} shape mismatch")
        if self.hidden_activation not in _ACT or self.output_activation not in _ACT:
            raise ValueError("unknown activation")

    def forward_normalized(self, xn: np.ndarray) -> np.ndarray:
        """Network only, normalized in/out; this is the timed inference kernel."""
        act, _ = _ACT[self.hidden_activation]
        out_act, _ = _ACT[self.output_activation]
        a = xn
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W + b
            a = out_act(z) if k == last else act(z)
        return a

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Full inference: z-score input, run the network, de-normalize output."""
        ns = self.norm_stats
        xn = (np.asarray(x, dtype=float) - ns.x_mean) / ns.x_std
        yn = self.forward_normalized(xn)
        return ns.y_mean + ns.y_std * yn


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 200
    validation_fraction: float = 0.1
    early_stop_patience: int = 20
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


def init_model(
    layer_sizes: list[int],
    norm_stats: NormStats,
    rng: np.random.Generator,
    hidden_activation: str = "tanh",
) -> MlpModel:
    """Scaled-uniform fan-in initialization, suited to tanh stacks."""
    weights, biases = [], []
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(3.0 / n_in)
        weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpModel(list(layer_sizes), weights, biases, norm_stats, hidden_activation)


def loss_and_gradient(model: MlpModel, Xn: np.ndarray, Yn: np.ndarray):
    """MSE in normalized coordinates plus gradients for every parameter.

    Xn/Yn are already normalized, shape (B, n_in) / (B, n_out). The loss is
    averaged over batch entries and output components, so duplicating rows
    changes nothing.
    """
    B = Xn.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    act, dact = _ACT[model.hidden_activation]
    out_act, dout = _ACT[model.output_activation]
    last = len(model.weights) - 1

    activations = [Xn]
    a = Xn
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W + b
        a = out_act(z) if k == last else act(z)
        activations.append(a)

    diff = activations[-1] - Yn
    denom = diff.size
    loss = float(np.sum(diff * diff) / denom)

    grad_W = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    delta = (2.0 / denom) * diff * dout(activations[-1])
    for k in range(last, -1, -1):
        grad_W[k] = activations[k].T @ delta
        grad_b[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * dact(activations[k])
    return loss, grad_W, grad_b


def _dataset_loss(model, Xn, Yn, chunk=65536):
    total = 0.0
    n = 0
    for i in range(0, len(Xn), chunk):
        diff = model.forward_normalized(Xn[i : i + chunk]) - Yn[i : i + chunk]
        total += float(np.sum(diff * diff))
        n += diff.size
    return total / n


def train(
    X: np.ndarray,
    Y: np.ndarray,
    cfg: TrainConfig,
    layer_sizes: list[int] | None = None,
    norm_stats: NormStats | None = None,
) -> MlpModel:
    """Mini-batch Adam with early stopping on a held-out split.

    Returns the parameters from the best validation epoch. Fully
    deterministic for a fixed config seed.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if len(X) != len(Y):
        raise ValueError("X and Y row counts differ")
    if len(X) < 100:
        raise ValueError(f"need at least 100 samples to train, got {len(X)}")
    if layer_sizes is None:
        layer_sizes = [X.shape[1], 128, 128, 128, Y.shape[1]]
    if norm_stats is None:
        norm_stats = NormStats.from_data(X, Y)

    rng = np.random.default_rng(cfg.rng_seed)
    model = init_model(layer_sizes, norm_stats, rng)

    Xn = (X - norm_stats.x_mean) / norm_stats.x_std
    Yn = (Y - norm_stats.y_mean) / norm_stats.y_std
    perm = rng.permutation(len(Xn))
    n_val = max(1, int(round(cfg.validation_fraction * len(Xn))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    Xt, Yt = Xn[train_idx], Yn[train_idx]
    Xv, Yv = Xn[val_idx], Yn[val_idx]

    b1, b2 = cfg.adam_betas
    m_W = [np.zeros_like(W) for W in model.weights]
    v_W = [np.zeros_like(W) for W in model.weights]
    m_b = [np.zeros_like(b) for b in model.biases]
    v_b = [np.zeros_like(b) for b in model.biases]
    t = 0

    best_val = np.inf
    best_params = None
    best_epoch = -1
    train_curve, val_curve = [], []
    since_best = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Xt))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, gW, gb = loss_and_gradient(model, Xt[idx], Yt[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            epoch_loss += loss
            n_batches += 1
            t += 1
            corr1 = 1.0 - b1**t
            corr2 = 1.0 - b2**t
            for k in range(len(model.weights)):
                m_W[k] = b1 * m_W[k] + (1 - b1) * gW[k]
                v_W[k] = b2 * v_W[k] + (1 - b2) * gW[k] ** 2
                model.weights[k] -= cfg.learning_rate * (m_W[k] / corr1) / (np.sqrt(v_W[k] / corr2) + cfg.adam_eps)
                m_b[k] = b1 * m_b[k] + (1 - b1) * gb[k]
                v_b[k] = b2 * v_b[k] + (1 - b2) * gb[k] ** 2
                model.biases[k] -= cfg.learning_rate * (m_b[k] / corr1) / (np.sqrt(v_b[k] / corr2) + cfg.adam_eps)
        val_loss = _dataset_loss(model, Xv, Yv)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        train_curve.append(epoch_loss / max(n_batches, 1))
        val_curve.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = ([W.copy() for W in model.weights], [b.copy() for b in model.biases])
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.early_stop_patience:
                break

    if best_params is not None:
        model.weights, model.biases = best_params
    model.training_meta = {
        "seed": cfg.rng_seed,
        "epochs_run": len(train_curve),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "final_train_loss": train_curve[-1] if train_curve else None,
        "train_curve": train_curve,
        "val_curve": val_curve,
        "n_train": int(len(Xt)),
        "n_val": int(len(Xv)),
        "layer_sizes": list(layer_sizes),
    }
    return model


def save_model(model: MlpModel, path: str) -> None:
    doc = {
        "schema": SCHEMA_TAG,
        "layer_sizes": [int(s) for s in model.layer_sizes],
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
        "norm_stats": {
            "x_mean": model.norm_stats.x_mean.tolist(),
            "x_std": model.norm_stats.x_std.tolist(),
            "y_mean": model.norm_stats.y_mean.tolist(),
            "y_std": model.norm_stats.y_std.tolist(),
        },
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "training_meta": model.training_meta,
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_model(path: str) -> MlpModel:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFile(f"cannot parse model file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA_TAG:
        raise SchemaMismatch(f"expected schema {SCHEMA_TAG!r}, got {doc.get('schema')!r}")
    try:
        ns = NormStats(**doc["norm_stats"])
        model = MlpModel(
            layer_sizes=list(doc["layer_sizes"]),
            weights=[np.asarray(W, dtype=float) for W in doc["weights"]],
            biases=[np.asarray(b, dtype=float) for b in doc["biases"]],
            norm_stats=ns,
            hidden_activation=doc["hidden_activation"],
            output_activation=doc["output_activation"],
            training_meta=doc.get("training_meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaMismatch(f"model file {path} is inconsistent: {exc}") from exc
    return model
