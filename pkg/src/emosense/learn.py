"""Per-participant emotion classifier: dataset assembly from stored
batches, SMOTE class balancing, softmax regression trained with
mini-batch SGD, and a named endpoint registry for serving predictions.
"""

from __future__ import annotations

import json
import math
import threading
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .etl import ObjectStore, decode_batch, stream_batch_keys
from .metrics import EvalReport, evaluate_predictions

LABEL_MAP = {0: "Angry", 1: "Happy", 2: "Sad"}
LABEL_INDEX = {v: k for k, v in LABEL_MAP.items()}
N_CLASSES = 3
N_FEATURES = 2  # (gsr reading, bpm)
MODEL_SCHEMA_VERSION = 1


class EmptyDatasetError(ValueError):
    """No labeled data found for the participant."""


class MissingClassError(ValueError):
    """A class required for training is absent from the split."""


class CannotSynthesizeError(ValueError):
    """A minority class is too small to interpolate new points from."""


class DivergenceError(ArithmeticError):
    """Training loss became non-finite."""


class EndpointNotFoundError(KeyError):
    """No model registered under the requested endpoint name."""


class ModelFormatError(ValueError):
    """Model file is corrupt or has an unknown schema version."""


@dataclass
class Hyperparams:
    learning_rate: float = 0.05
    epochs: int = 50
    l2_lambda: float = 1e-4
    loss: str = "softmax_cross_entropy"
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be non-negative")
        if self.loss != "softmax_cross_entropy":
            raise ValueError(f"unsupported loss {self.loss!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass(eq=False)
class Dataset:
    participant_id: str
    features: np.ndarray  # (N, 2) float64
    labels: np.ndarray  # (N,) int in {0, 1, 2}
    train_idx: np.ndarray
    test_idx: np.ndarray
    unlabeled_skipped: int = 0

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.train_idx = np.asarray(self.train_idx, dtype=int)
        self.test_idx = np.asarray(self.test_idx, dtype=int)
        if self.features.ndim != 2 or self.features.shape[1] != N_FEATURES:
            raise ValueError(f"features must be (N, {N_FEATURES})")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if ((self.labels < 0) | (self.labels >= N_CLASSES)).any():
            raise ValueError("labels must be in {0, 1, 2}")
        if set(self.train_idx.tolist()) & set(self.test_idx.tolist()):
            raise ValueError("train and test splits overlap")


@dataclass(eq=False)
class ModelParams:
    """Trained softmax model with standardization baked in."""

    weights: np.ndarray  # (3, 2)
    bias: np.ndarray  # (3,)
    feature_means: np.ndarray  # (2,)
    feature_stds: np.ndarray  # (2,)
    label_map: dict[int, str] = field(default_factory=lambda: dict(LABEL_MAP))
    participant_id: str = ""
    trained_at: int = 0  # epoch ms
    hyperparams: Optional[Hyperparams] = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        self.feature_means = np.asarray(self.feature_means, dtype=float)
        self.feature_stds = np.asarray(self.feature_stds, dtype=float)
        if self.weights.shape != (N_CLASSES, N_FEATURES):
            raise ValueError(f"weights must be {N_CLASSES}x{N_FEATURES}")
        if (self.feature_stds <= 0).any():
            raise ValueError("feature_stds must be positive")
        if self.label_map != LABEL_MAP:
            raise ValueError(f"label_map must be {LABEL_MAP}")


# -- dataset assembly ----------------------------------------------------------


def stream_name(participant_id: str) -> str:
    if not participant_id or not all(c.isalnum() or c in "_-" for c in participant_id):
        raise ValueError(
            f"participant_id {participant_id!r} must be alphanumeric/_/- for storage keys"
        )
    return f"train-{participant_id}"


def assemble_dataset(
    store: ObjectStore,
    bucket: str,
    participant_id: str,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> Dataset:
    """Decode every stored batch for the participant and produce a
    stratified train/test split. Unlabeled rows are skipped and counted."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    batches = stream_batch_keys(store, bucket, stream_name(participant_id))
    if not batches:
        raise EmptyDatasetError(f"no stored batches for participant {participant_id!r}")

    features: list[tuple[float, float]] = []
    labels: list[int] = []
    skipped = 0
    for _, key in batches:
        _, records = decode_batch(store.get(bucket, key))
        for rec in records:
            mood = rec.get("Mood")
            if mood is None or mood not in LABEL_INDEX:
                skipped += 1
                continue
            features.append((float(rec["GSR"]), float(rec["BPM"])))
            labels.append(LABEL_INDEX[mood])
    if not features:
        raise EmptyDatasetError(
            f"no labeled rows for participant {participant_id!r} ({skipped} unlabeled)"
        )

    X = np.array(features, dtype=float)
    y = np.array(labels, dtype=int)
    rng = np.random.default_rng(seed)
    train_parts: list[np.ndarray] = []
    test_parts: list[np.ndarray] = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        n_test = int(round(test_fraction * len(idx)))
        test_parts.append(idx[:n_test])
        train_parts.append(idx[n_test:])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=int)
    if test_fraction == 0:
        warnings.warn("test_fraction=0: evaluation split is empty", stacklevel=2)
    return Dataset(
        participant_id=participant_id,
        features=X,
        labels=y,
        train_idx=train_idx,
        test_idx=test_idx,
        unlabeled_skipped=skipped,
    )


# -- SMOTE ---------------------------------------------------------------------


def smote_balance(
    features: np.ndarray,
    labels: np.ndarray,
    k: int = 5,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Oversample minority classes up to the majority count.

    Each synthetic point is x_i + d * (x_nn - x_i) with d uniform in
    [0, 1] and x_nn one of the k nearest same-class neighbours of x_i, so
    it lies on the segment between two existing class members. Already
    balanced input comes back unchanged.
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if k < 1:
        raise ValueError("k must be >= 1")
    classes, counts = np.unique(labels, return_counts=True)
    majority = int(counts.max())
    if (counts == majority).all():
        return features, labels

    rng = np.random.default_rng(seed)
    new_feats = [features]
    new_labels = [labels]
    for c, count in zip(classes, counts):
        deficit = majority - int(count)
        if deficit == 0:
            continue
        if count < 2:
            raise CannotSynthesizeError(
                f"class {int(c)} has {int(count)} member(s); need at least 2"
            )
        k_eff = min(k, int(count) - 1)
        if k_eff < k:
            warnings.warn(
                f"class {int(c)}: reducing k from {k} to {k_eff} (only {int(count)} members)",
                stacklevel=2,
            )
        points = features[labels == c]
        # pairwise distances within the class; self excluded via inf
        d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        np.fill_diagonal(d2, np.inf)
        neighbours = np.argsort(d2, axis=1)[:, :k_eff]

        synthetic = np.empty((deficit, features.shape[1]))
        base_choices = rng.integers(0, len(points), size=deficit)
        for j, i in enumerate(base_choices):
            nn = points[neighbours[i][rng.integers(0, k_eff)]]
            delta = rng.uniform(0.0, 1.0)
            synthetic[j] = points[i] + delta * (nn - points[i])
        new_feats.append(synthetic)
        new_labels.append(np.full(deficit, c, dtype=int))
    return np.vstack(new_feats), np.concatenate(new_labels)


# -- softmax regression ---------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    # floor keeps every component strictly positive in float64 even for
    # wildly out-of-distribution inputs; distortion only below ~1e-304
    exp = np.exp(np.clip(shifted, -700.0, None))
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_gradient(
    weights: np.ndarray,
    bias: np.ndarray,
    X: np.ndarray,
    y: np.ndarray,
    l2_lambda: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of softmax(X W^T + b) plus (l2/2)||W||^2, with
    its analytic gradient in (W, b)."""
    n = len(X)
    probs = softmax(X @ weights.T + bias)
    log_likelihood = -np.log(np.clip(probs[np.arange(n), y], 1e-300, None))
    with np.errstate(over="ignore"):  # inf loss is reported as divergence
        loss = float(log_likelihood.mean() + 0.5 * l2_lambda * (weights**2).sum())
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    grad_w = delta.T @ X / n + l2_lambda * weights
    grad_b = delta.sum(axis=0) / n
    return loss, grad_w, grad_b


def train(dataset: Dataset, hp: Hyperparams | None = None) -> ModelParams:
    """Standardize the train split, minimize regularized softmax
    cross-entropy by mini-batch SGD, and return the fitted model."""
    model, _ = train_with_history(dataset, hp)
    return model


def train_with_history(
    dataset: Dataset, hp: Hyperparams | None = None
) -> tuple[ModelParams, list[float]]:
    """Like train(), additionally returning the per-epoch training loss."""
    hp = hp or Hyperparams()
    X = dataset.features[dataset.train_idx]
    y = dataset.labels[dataset.train_idx]
    if len(X) == 0:
        raise EmptyDatasetError("train split is empty")
    present = set(np.unique(y).tolist())
    missing = sorted(set(range(N_CLASSES)) - present)
    if missing:
        raise MissingClassError(
            f"classes {[LABEL_MAP[c] for c in missing]} absent from train split"
        )

    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds == 0] = 1.0  # constant feature: leave it centered only
    Z = (X - means) / stds

    rng = np.random.default_rng(hp.seed)
    W = np.zeros((N_CLASSES, N_FEATURES))
    b = np.zeros(N_CLASSES)
    epoch_losses: list[float] = []
    for _ in range(hp.epochs):
        order = rng.permutation(len(Z))
        for start in range(0, len(Z), hp.batch_size):
            batch = order[start : start + hp.batch_size]
            _, grad_w, grad_b = loss_and_gradient(W, b, Z[batch], y[batch], hp.l2_lambda)
            W -= hp.learning_rate * grad_w
            b -= hp.learning_rate * grad_b
        loss, _, _ = loss_and_gradient(W, b, Z, y, hp.l2_lambda)
        if not math.isfinite(loss):
            raise DivergenceError(
                f"training loss became {loss}; try a smaller learning_rate"
            )
        epoch_losses.append(loss)

    model = ModelParams(
        weights=W,
        bias=b,
        feature_means=means,
        feature_stds=stds,
        participant_id=dataset.participant_id,
        trained_at=int(time.time() * 1000),
        hyperparams=hp,
    )
    return model, epoch_losses


def predict_proba(model: ModelParams, gsr: float, bpm: float) -> np.ndarray:
    """Class probabilities for one observation; sums to 1."""
    if not (math.isfinite(gsr) and math.isfinite(bpm)):
        raise ValueError(f"inputs must be finite, got gsr={gsr}, bpm={bpm}")
    z = (np.array([gsr, bpm], dtype=float) - model.feature_means) / model.feature_stds
    return softmax(model.weights @ z + model.bias)


def predict_label(model: ModelParams, gsr: float, bpm: float) -> str:
    """Most probable label; ties resolve to the lowest class index."""
    probs = predict_proba(model, gsr, bpm)
    return model.label_map[int(np.argmax(probs))]


def evaluate(model: ModelParams, features: np.ndarray, labels: np.ndarray) -> EvalReport:
    """Score the model on a held-out set."""
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(features) == 0:
        raise EmptyDatasetError("evaluation split is empty")
    Z = (features - model.feature_means) / model.feature_stds
    probs = softmax(Z @ model.weights.T + model.bias)
    predicted = probs.argmax(axis=1)
    return evaluate_predictions(labels, predicted, probs, [LABEL_MAP[c] for c in range(N_CLASSES)])


# -- model persistence -----------------------------------------------------------


def model_to_json(model: ModelParams) -> str:
    doc = {
        "schema_version": MODEL_SCHEMA_VERSION,
        "participant_id": model.participant_id,
        "trained_at": model.trained_at,
        "weights": model.weights.tolist(),
        "bias": model.bias.tolist(),
        "feature_means": model.feature_means.tolist(),
        "feature_stds": model.feature_stds.tolist(),
        "label_map": {str(k): v for k, v in model.label_map.items()},
        "hyperparams": vars(model.hyperparams) if model.hyperparams else None,
    }
    return json.dumps(doc, indent=2)


def model_from_json(text: str) -> ModelParams:
    try:
        doc = json.loads(text)
        if doc.get("schema_version") != MODEL_SCHEMA_VERSION:
            raise ModelFormatError(
                f"unsupported model schema_version {doc.get('schema_version')!r}"
            )
        hp = Hyperparams(**doc["hyperparams"]) if doc.get("hyperparams") else None
        return ModelParams(
            weights=np.array(doc["weights"]),
            bias=np.array(doc["bias"]),
            feature_means=np.array(doc["feature_means"]),
            feature_stds=np.array(doc["feature_stds"]),
            label_map={int(k): v for k, v in doc["label_map"].items()},
            participant_id=doc["participant_id"],
            trained_at=doc["trained_at"],
            hyperparams=hp,
        )
    except ModelFormatError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc


def save_model(model: ModelParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(model_to_json(model))


def load_model(path: str) -> ModelParams:
    with open(path, encoding="utf-8") as f:
        return model_from_json(f.read())


# -- endpoint registry ------------------------------------------------------------


class EndpointRegistry:
    """Named, atomically replaceable model handles."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._models: dict[str, ModelParams] = {}

    def register(self, name: str, model: ModelParams) -> None:
        with self._lock:
            self._models[name] = model

    def get(self, name: str) -> ModelParams:
        with self._lock:
            model = self._models.get(name)
        if model is None:
            raise EndpointNotFoundError(name)
        return model

    def exists(self, name: str) -> bool:
        with self._lock:
            return name in self._models

    def names(self) -> list[str]:
        with self._lock:
            return sorted(self._models)

    def invoke(self, name: str, gsr: float, bpm: float) -> tuple[str, np.ndarray]:
        model = self.get(name)
        probs = predict_proba(model, gsr, bpm)
        return model.label_map[int(np.argmax(probs))], probs
