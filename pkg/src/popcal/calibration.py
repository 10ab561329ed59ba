"""Answer-correctness prediction: popularity feature construction, the
single-feature threshold classifier, a small from-scratch MLP trained with
Adam, and the multi-seed evaluation protocol that compares them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_PC = "PC"
POPULARITY_FEATURES = ("Pop_Q", "Pop_GT", "Pop_Ge", "RPop_GT", "RPop_Ge")

HIDDEN_SIZES = (64, 32)
N_CLASSES = 2

CHECKPOINT_MAGIC = b"POPCALML"
CHECKPOINT_VERSION = 1


class FeatureError(ValueError):
    """A requested signal is missing from a record."""


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"non-finite loss at epoch {epoch}")


@dataclass(frozen=True)
class CalibrationSample:
    features: tuple[float, ...]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


@dataclass(frozen=True)
class FeatureStats:
    """Training-set mean/std of the log1p-transformed popularity features.

    PC dimensions pass through untouched, so their slots stay at (0, 1).
    """

    names: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]


def _transform_one(name: str, value: float) -> float:
    if value is None:
        raise FeatureError(f"signal {name!r} is missing")
    if name == FEATURE_PC:
        return float(value)
    return math.log1p(float(value))


def fit_feature_stats(
    rows: Sequence[Mapping[str, float]], feature_set: Sequence[str]
) -> FeatureStats:
    """Compute normalization statistics on the TRAINING rows only."""
    if not rows:
        raise ValueError("rows must be non-empty")
    means = []
    stds = []
    for name in feature_set:
        if name == FEATURE_PC:
            means.append(0.0)
            stds.append(1.0)
            continue
        column = np.array([_transform_one(name, row.get(name)) for row in rows])
        std = float(column.std())
        means.append(float(column.mean()))
        stds.append(std if std > 0 else 1.0)
    return FeatureStats(tuple(feature_set), tuple(means), tuple(stds))


def build_features(
    values: Mapping[str, float],
    feature_set: Sequence[str],
    stats: FeatureStats | None = None,
) -> np.ndarray:
    """Assemble one feature vector in the declared dimension order.

    Popularity counts go through log1p and are standardized with the
    training-set statistics; PC is passed through as-is. A missing signal
    raises FeatureError naming it.
    """
    if stats is not None and tuple(stats.names) != tuple(feature_set):
        raise ValueError("stats were fit for a different feature set")
    out = np.empty(len(feature_set))
    for i, name in enumerate(feature_set):
        if name not in values or values[name] is None:
            raise FeatureError(f"signal {name!r} is missing")
        x = _transform_one(name, values[name])
        if stats is not None and name != FEATURE_PC:
            x = (x - stats.mean[i]) / stats.std[i]
        out[i] = x
    return out


def build_feature_matrix(
    rows: Sequence[Mapping[str, float]],
    feature_set: Sequence[str],
    stats: FeatureStats | None = None,
) -> np.ndarray:
    return np.stack([build_features(row, feature_set, stats) for row in rows])


def split_train_test(records: Sequence, seed: int) -> tuple[list, list]:
    """Seeded uniform shuffle, first half train (odd counts favor train)."""
    n = len(records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = (n + 1) // 2
    train = [records[i] for i in perm[:n_train]]
    test = [records[i] for i in perm[n_train:]]
    return train, test


def balance_classes(
    records: Sequence,
    seed: int,
    label_of: Callable[[object], int] = lambda r: r["label"],
) -> list:
    """Keep every positive and sample an equal number of negatives.

    Both classes must be present and negatives must be at least as numerous
    as positives; the sampled set is shuffled under the same seed.
    """
    positives = [r for r in records if label_of(r) == 1]
    negatives = [r for r in records if label_of(r) == 0]
    if not positives or not negatives:
        raise ValueError("both classes must be present to balance")
    if len(negatives) < len(positives):
        raise ValueError(
            f"cannot draw {len(positives)} negatives from {len(negatives)} without replacement"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(negatives), size=len(positives), replace=False)
    sampled = positives + [negatives[i] for i in sorted(chosen)]
    order = rng.permutation(len(sampled))
    return [sampled[i] for i in order]


# -- single-feature threshold classifier ---------------------------------


def fit_threshold(xs: Sequence[float], ys: Sequence[int]) -> tuple[float, float]:
    """Pick the decision threshold maximizing training accuracy.

    Candidates are midpoints between consecutive distinct sorted values plus
    the two infinite sentinels; prediction is 1 iff x > threshold. Ties go to
    the smallest threshold.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=int)
    if xs.shape != ys.shape or xs.size == 0:
        raise ValueError("xs and ys must be aligned and non-empty")
    order = np.argsort(xs, kind="stable")
    sx = xs[order]
    sy = ys[order]
    n = xs.size
    total_pos = int(sy.sum())
    ones_prefix = np.concatenate(([0], np.cumsum(sy)))  # ones among first k

    def accuracy_at(k: int) -> int:
        # k points fall at or below the threshold (predicted 0)
        zeros_below = k - int(ones_prefix[k])
        ones_above = total_pos - int(ones_prefix[k])
        return zeros_below + ones_above

    best_lam = -math.inf
    best_correct = accuracy_at(0)
    for i in range(n - 1):
        if sx[i + 1] > sx[i]:
            correct = accuracy_at(i + 1)
            if correct > best_correct:
                best_correct = correct
                best_lam = (sx[i] + sx[i + 1]) / 2.0
    if accuracy_at(n) > best_correct:
        best_correct = accuracy_at(n)
        best_lam = math.inf
    return best_lam, best_correct / n


def predict_threshold(x: float, lam: float) -> int:
    return int(x > lam)


# -- small MLP ------------------------------------------------------------


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.4

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.dropout,
        )


def init_mlp(d_in: int, rng: np.random.Generator, dropout: float = 0.4) -> MlpModel:
    sizes = (d_in, *HIDDEN_SIZES, N_CLASSES)
    weights = []
    biases = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases, dropout)


def _forward_pass(
    model: MlpModel,
    X: np.ndarray,
    training: bool,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, dict]:
    """Log-softmax forward pass, keeping the per-layer cache for backprop.

    Inverted dropout multiplies the intermediate (last hidden) activation by
    mask/(1-rate) during training only; inference applies no mask.
    """
    if X.ndim != 2 or X.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"input of shape {X.shape} does not match d_in={model.weights[0].shape[0]}"
        )
    if training and model.dropout > 0 and rng is None:
        raise ValueError("training-mode forward needs a seeded generator for dropout")
    cache: dict = {"X": X, "z": [], "kept": []}
    act = X
    n_hidden = len(model.weights) - 1
    for layer in range(n_hidden):
        z = act @ model.weights[layer] + model.biases[layer]
        cache["z"].append(z)
        act = np.maximum(z, 0.0)
        if training and model.dropout > 0 and layer == n_hidden - 1:
            keep = (rng.random(act.shape) >= model.dropout) / (1.0 - model.dropout)
            act = act * keep
        else:
            keep = None
        cache["kept"].append(keep)
        cache[f"a{layer}"] = act
    logits = act @ model.weights[-1] + model.biases[-1]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    cache["top_in"] = act
    return log_probs, cache


def mlp_forward(
    model: MlpModel,
    X: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Class probabilities, shape (n, 2); rows sum to one."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    log_probs, _ = _forward_pass(model, X, training, rng)
    return np.exp(log_probs)


def mlp_loss_and_grads(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Summed cross-entropy over the batch and gradients for every parameter.

    Gradient order matches [W0, b0, W1, b1, W2, b2].
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    n = X.shape[0]
    log_probs, cache = _forward_pass(model, X, training, rng)
    loss = -float(log_probs[np.arange(n), y].sum())

    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    grads: list[np.ndarray] = []
    g_w_top = cache["top_in"].T @ delta
    g_b_top = delta.sum(axis=0)
    upstream = delta @ model.weights[-1].T
    layer_grads = [(g_w_top, g_b_top)]
    for layer in range(len(model.weights) - 2, -1, -1):
        kept = cache["kept"][layer]
        if kept is not None:
            upstream = upstream * kept
        dz = upstream * (cache["z"][layer] > 0)
        inputs = cache["X"] if layer == 0 else cache[f"a{layer - 1}"]
        layer_grads.append((inputs.T @ dz, dz.sum(axis=0)))
        if layer > 0:
            upstream = dz @ model.weights[layer].T
    for g_w, g_b in reversed(layer_grads):
        grads.extend([g_w, g_b])
    return loss, grads


def gradient_check(
    model: MlpModel,
    X: np.ndarray,
    y: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients,
    with dropout off; relative error uses a unit floor so zero gradients do
    not blow up the ratio."""
    _, grads = mlp_loss_and_grads(model, X, y, training=False)
    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    worst = 0.0
    for param, grad in zip(params, grads):
        flat = param.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + step
            up, _ = mlp_loss_and_grads(model, X, y, training=False)
            flat[idx] = keep - step
            down, _ = mlp_loss_and_grads(model, X, y, training=False)
            flat[idx] = keep
            numeric = (up - down) / (2.0 * step)
            analytic = grad.reshape(-1)[idx]
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 8
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs) <= 0:
            raise ValueError("learning_rate, batch_size, epochs must be positive")


@dataclass
class TrainedMlp:
    model: MlpModel  # checkpoint with the highest train accuracy
    train_accuracy: float
    best_epoch: int
    config: TrainConfig
    final_model: MlpModel | None = None  # weights after the last epoch


def _accuracy(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    probs = mlp_forward(model, X, training=False)
    return float((probs.argmax(axis=1) == y).mean())


def train_mlp(X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> TrainedMlp:
    """Adam-train the classifier and keep the epoch checkpoint with the
    highest training accuracy (earliest epoch on ties).

    Everything random (init, shuffling, dropout masks) flows from cfg.seed,
    so identical configs produce bit-identical weights.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=int)
    if X.shape[0] == 0:
        raise ValueError("training set is empty")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    rng = np.random.default_rng(cfg.seed)
    model = init_mlp(X.shape[1], rng, dropout=cfg.dropout)
    params = [p for pair in zip(model.weights, model.biases) for p in pair]
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    step = 0
    best: TrainedMlp | None = None
    n = X.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, grads = mlp_loss_and_grads(model, X[batch], y[batch], training=True, rng=rng)
            if not math.isfinite(loss):
                raise DivergenceError(epoch)
            step += 1
            bc1 = 1.0 - cfg.beta1**step
            bc2 = 1.0 - cfg.beta2**step
            for param, grad, m, v in zip(params, grads, m_state, v_state):
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * grad
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * (grad * grad)
                param -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        # checkpoint selection considers post-epoch states only, earliest on ties
        acc = _accuracy(model, X, y)
        if best is None or acc > best.train_accuracy:
            best = TrainedMlp(model.copy(), acc, epoch, cfg)
    assert best is not None
    best.final_model = model
    return best


class ThresholdPredictor:
    def __init__(self, lam: float):
        self.lam = lam

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        values = X[:, 0] if X.ndim == 2 else X
        return (values > self.lam).astype(int)


class MlpPredictor:
    def __init__(self, model: MlpModel):
        self.model = model

    def predict(self, X: np.ndarray) -> np.ndarray:
        return mlp_forward(self.model, X, training=False).argmax(axis=1)


class ConstantPredictor:
    """Passes the recorded per-sample judgment straight through (Verb row)."""

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X)
        values = X[:, 0] if X.ndim == 2 else X
        return (values > 0.5).astype(int)


def evaluate_predictor(predictor, X: np.ndarray, y: Sequence[int]) -> float:
    """Prediction accuracy on the test half, in percent."""
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise ValueError("test set is empty")
    predictions = predictor.predict(np.asarray(X, dtype=float))
    return float((predictions == y).mean()) * 100.0


# -- checkpoint persistence ----------------------------------------------


def save_checkpoint(
    trained: TrainedMlp,
    path: str | Path,
    feature_names: Sequence[str],
    stats: FeatureStats | None = None,
) -> None:
    """Deterministic binary checkpoint plus a JSON manifest sidecar."""
    path = Path(path)
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(trained.model.weights))]
    for w, b in zip(trained.model.weights, trained.model.biases):
        chunks.append(struct.pack("<II", *w.shape))
        chunks.append(w.astype("<f8").tobytes())
        chunks.append(b.astype("<f8").tobytes())
    blob = b"".join(chunks)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    manifest = {
        "format": "popcal-mlp-checkpoint",
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(trained.model.layer_sizes),
        "dropout": trained.model.dropout,
        "seed": trained.config.seed,
        "train_accuracy": trained.train_accuracy,
        "best_epoch": trained.best_epoch,
        "feature_names": list(feature_names),
        "normalization": None
        if stats is None
        else {"names": list(stats.names), "mean": list(stats.mean), "std": list(stats.std)},
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    side = path.with_name(path.name + ".manifest.json")
    tmp = side.with_name(side.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, side)


def load_checkpoint(path: str | Path) -> tuple[MlpModel, dict]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not an MLP checkpoint")
    off = len(CHECKPOINT_MAGIC)
    version, n_layers = struct.unpack_from("<II", blob, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off += 8
    weights = []
    biases = []
    for _ in range(n_layers):
        fan_in, fan_out = struct.unpack_from("<II", blob, off)
        off += 8
        w = np.frombuffer(blob, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(
            fan_in, fan_out
        ).copy()
        off += 8 * fan_in * fan_out
        b = np.frombuffer(blob, dtype="<f8", count=fan_out, offset=off).copy()
        off += 8 * fan_out
        weights.append(w)
        biases.append(b)
    manifest = {}
    side = path.with_name(path.name + ".manifest.json")
    if side.exists():
        manifest = json.loads(side.read_text(encoding="utf-8"))
        if manifest.get("sha256") != hashlib.sha256(blob).hexdigest():
            raise ValueError(f"checksum mismatch for {path}")
    model = MlpModel(weights, biases, dropout=manifest.get("dropout", 0.4))
    return model, manifest


# -- the multi-seed evaluation protocol -----------------------------------


@dataclass(frozen=True)
class RowSpec:
    name: str
    kind: str  # direct | threshold | mlp
    features: tuple[str, ...]


TABLE_ROWS: tuple[RowSpec, ...] = (
    RowSpec("Verb", "direct", ("Verb",)),
    RowSpec("Consis", "threshold", ("Consis",)),
    RowSpec("PC", "threshold", ("PC",)),
    RowSpec("Pop_Q", "threshold", ("Pop_Q",)),
    RowSpec("Pop_Ge", "threshold", ("Pop_Ge",)),
    RowSpec("RPop_Ge", "threshold", ("RPop_Ge",)),
    RowSpec("PC+Pop_Q", "mlp", ("PC", "Pop_Q")),
    RowSpec("PC+Pop_Ge", "mlp", ("PC", "Pop_Ge")),
    RowSpec("PC+RPop_Ge", "mlp", ("PC", "RPop_Ge")),
    RowSpec("PC+ALL", "mlp", ("PC", "Pop_Q", "Pop_Ge", "RPop_Ge")),
)


@dataclass
class ProtocolReport:
    seeds: tuple[int, ...]
    per_seed: dict[str, dict[int, float | None]] = field(default_factory=dict)
    flip_details: dict | None = None

    def mean(self, row: str) -> float | None:
        cells = [v for v in self.per_seed.get(row, {}).values() if v is not None]
        return sum(cells) / len(cells) if cells else None

    def rows(self) -> list[dict]:
        out = []
        for name, cells in self.per_seed.items():
            row = {"row": name}
            for seed in self.seeds:
                row[f"seed_{seed}"] = cells.get(seed)
            row["mean"] = self.mean(name)
            out.append(row)
        return out


def _row_available(spec: RowSpec, rows: Sequence[Mapping]) -> bool:
    return all(
        feature in record and record[feature] is not None
        for record in rows
        for feature in spec.features
    )


def run_protocol(
    records: Sequence[Mapping[str, float]],
    row_specs: Sequence[RowSpec] = TABLE_ROWS,
    seeds: Sequence[int] = (0, 42, 100),
    balance: bool = False,
    balance_seed: int = 0,
    train_cfg: TrainConfig = TrainConfig(),
    flip_rows: tuple[str, str] = ("PC", "PC+ALL"),
) -> ProtocolReport:
    """Fit and evaluate every configured predictor row over the given seeds.

    Each record is a mapping with a binary ``label`` plus whatever signals the
    rows need. Per seed: optional class balancing (fixed sampling seed), an
    even train/test split, threshold fits for single-feature rows, MLP fits
    for multi-feature rows, and test accuracy in percent. Rows missing a
    signal are reported as unavailable rather than failing the run.

    The per-sample test predictions of ``flip_rows`` under the first seed are
    kept on the report for the calibration-flip listing.
    """
    if not seeds:
        raise ValueError("seeds must be non-empty")
    report = ProtocolReport(seeds=tuple(seeds))
    for spec in row_specs:
        report.per_seed[spec.name] = {}

    for seed_pos, seed in enumerate(seeds):
        data = list(records)
        if balance:
            data = balance_classes(data, balance_seed)
        train, test = split_train_test(data, seed)
        y_train = np.array([r["label"] for r in train], dtype=int)
        y_test = np.array([r["label"] for r in test], dtype=int)
        predictions: dict[str, np.ndarray] = {}
        for spec in row_specs:
            if not _row_available(spec, data):
                report.per_seed[spec.name][seed] = None
                continue
            if spec.kind == "direct":
                predictor = ConstantPredictor()
                X_test = build_feature_matrix(test, spec.features)
            elif spec.kind == "threshold":
                xs = [float(r[spec.features[0]]) for r in train]
                lam, _ = fit_threshold(xs, y_train)
                predictor = ThresholdPredictor(lam)
                X_test = np.array([[float(r[spec.features[0]])] for r in test])
            elif spec.kind == "mlp":
                stats = fit_feature_stats(train, spec.features)
                X_train = build_feature_matrix(train, spec.features, stats)
                X_test = build_feature_matrix(test, spec.features, stats)
                trained = train_mlp(X_train, y_train, replace(train_cfg, seed=seed))
                predictor = MlpPredictor(trained.model)
            else:
                raise ValueError(f"unknown row kind {spec.kind!r}")
            report.per_seed[spec.name][seed] = evaluate_predictor(predictor, X_test, y_test)
            if seed_pos == 0 and spec.name in flip_rows:
                predictions[spec.name] = predictor.predict(np.asarray(X_test, dtype=float))
        if seed_pos == 0 and all(name in predictions for name in flip_rows):
            report.flip_details = {
                "seed": seed,
                "labels": y_test.tolist(),
                "records": test,
                "predictions": {k: v.tolist() for k, v in predictions.items()},
            }
    return report
