"""Minibatch SGD training for geolocation, tile CNN and tile2vec models."""

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluate import decode_matrix, micro_f1_matrix
from .losses import LossHyper, class_weights, triplet, asl
from .models import backward, forward, geo_noise, init_params, sgd_step


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: LossHyper = field(default_factory=LossHyper)
    learning_rate: float = 0.1
    batch_size: int = 64
    epochs: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    geo_noise_mean: float = 5000.0
    prediction_mode: str = "topk"
    k: int = 20
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise TrainConfigError("val_fraction must lie in (0, 1)")
        if self.learning_rate < 0:
            raise TrainConfigError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainConfigError("batch_size and epochs must be positive")
        if self.prediction_mode not in ("topk", "threshold"):
            raise TrainConfigError(f"unknown prediction mode {self.prediction_mode!r}")


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return cls(mean, np.where(std > 0, std, 1.0))

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


@dataclass
class TrainReport:
    train_loss: list
    val_micro_f1: list
    params: object
    scaler: Standardizer
    seed: int
    best_epoch: int
    wall_time: float
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "trainLoss", "valMicroF1"])
            for i, (loss, f1) in enumerate(zip(self.train_loss, self.val_micro_f1), start=1):
                writer.writerow([i, repr(loss), repr(f1)])


def split_indices(n, val_fraction, seed):
    """Seeded site-level split into ``(train, val)`` index arrays."""
    rng = np.random.default_rng([seed, 1])
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n - n_val < 1:
        raise TrainConfigError(f"cannot split {n} sites with val_fraction={val_fraction}")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def predict_scores(params, scaler, features):
    """Sigmoid probabilities for standardized features."""
    z = forward(params, scaler(features))
    return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))


def evaluate_f1(params, scaler, features, targets, config):
    scores = predict_scores(params, scaler, features)
    pred = decode_matrix(scores, config.prediction_mode, config.k, config.threshold)
    return micro_f1_matrix(pred, targets)


def train_classifier(features, targets, arch, config, dims=None, geo=None):
    """Train a classifier with minibatch SGD and return the best-validation-epoch params.

    ``features`` is ``(n, 2)`` projected coordinates for geolocation models or
    ``(n, C, k, k)`` coefficient blocks for ``tileCnn``. Geographic jitter is
    added to training batches only, before standardization; ``geo`` defaults
    to true for the linear and MLP architectures.
    """
    start = time.perf_counter()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if len(x) != len(y):
        raise TrainConfigError("features and targets differ in length")
    if y.ndim != 2 or y.shape[1] < 1:
        raise TrainConfigError("targets must be a site x class matrix with >= 1 class")
    train_idx, val_idx = split_indices(len(x), config.val_fraction, config.seed)
    geo = arch != "tileCnn" if geo is None else geo
    scaler = Standardizer.fit(x[train_idx])

    dims = dict(dims or {})
    dims["num_classes"] = y.shape[1]
    if arch == "tileCnn":
        dims.setdefault("in_channels", x.shape[1])
        dims.setdefault("size", x.shape[2])
    else:
        dims.setdefault("in_features", x.shape[1])
    params = init_params(arch, dims, seed=config.seed)
    loss_fn = config.loss.fn(class_weights(y[train_idx]))

    rng = np.random.default_rng([config.seed, 2])
    losses, scores = [], []
    best, best_f1, best_epoch = params.copy(), -1.0, 0
    for epoch in range(config.epochs):
        order = rng.permutation(train_idx)
        batch_losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            xb = x[idx]
            if geo and config.geo_noise_mean > 0:
                xb = geo_noise(xb, config.geo_noise_mean, seed=int(rng.integers(2**63)))
            xb = scaler(xb)
            loss, g = loss_fn(forward(params, xb), y[idx])
            sgd_step(params, backward(params, xb, g), config.learning_rate)
            batch_losses.append(loss)
        losses.append(float(np.mean(batch_losses)))
        f1 = evaluate_f1(params, scaler, x[val_idx], y[val_idx], config)
        scores.append(f1)
        if f1 > best_f1:
            best, best_f1, best_epoch = params.copy(), f1, epoch + 1
    return TrainReport(
        losses, scores, best, scaler, config.seed, best_epoch,
        time.perf_counter() - start, train_idx, val_idx,
    )


# ---------------------------------------------------------------- tile2vec


@dataclass(frozen=True)
class Tile2VecConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 5
    margin: float = 1.0
    latent: int = 256
    conv_channels: tuple = (16, 16)
    seed: int = 0
    asl_weight: float = 1.0


@dataclass
class Tile2VecResult:
    encoder: object
    scaler: Standardizer
    losses: list
    probe: Optional[object] = None

    def embed(self, blocks):
        return forward(self.encoder, self.scaler(blocks))


def train_tile2vec(blocks, triplets, config, labels=None):
    """Train a headless tile CNN on ``(anchor, neighbor, distant)`` triplets.

    ``blocks`` maps surveyId to a ``(C, k, k)`` coefficient array. With
    ``labels`` (surveyId -> binary vector, e.g. species aggregated within a
    radius) the loss adds an ASL term from a linear probe on anchor embeddings.
    """
    if not triplets:
        raise TrainConfigError("no triplets to train on")
    trip = np.asarray(triplets, dtype=np.int64)
    ids = sorted({int(s) for s in trip.ravel()})
    missing = [s for s in ids if s not in blocks]
    if missing:
        raise TrainConfigError(f"triplets reference sites without tiles, e.g. {missing[0]}")
    pos = {s: i for i, s in enumerate(ids)}
    x = np.stack([np.asarray(blocks[s], dtype=np.float64) for s in ids])
    scaler = Standardizer.fit(x)
    x = scaler(x)
    dims = {
        "in_channels": x.shape[1],
        "size": x.shape[2],
        "conv_channels": tuple(config.conv_channels),
        "latent": config.latent,
        "num_classes": 0,
    }
    enc = init_params("tileCnn", dims, seed=config.seed)
    probe = None
    if labels is not None:
        y_all = np.stack([np.asarray(labels[s], dtype=np.float64) for s in ids])
        probe = init_params(
            "linear", {"in_features": config.latent, "num_classes": y_all.shape[1]}, seed=config.seed + 1
        )
    rng = np.random.default_rng([config.seed, 3])
    idx = np.vectorize(pos.get)(trip)
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(idx))
        epoch_loss = []
        for s in range(0, len(order), config.batch_size):
            batch = idx[order[s : s + config.batch_size]]
            b = len(batch)
            xb = x[batch.T.ravel()]  # anchors, neighbors, distants
            emb = forward(enc, xb)
            loss, (ga, gn, gd) = triplet(emb[:b], emb[b : 2 * b], emb[2 * b :], config.margin)
            d_emb = np.concatenate([ga, gn, gd])
            if probe is not None:
                logits = forward(probe, emb[:b])
                l2, g2 = asl(logits, y_all[batch[:, 0]])
                loss += config.asl_weight * l2
                probe_grads, d_in = backward(probe, emb[:b], config.asl_weight * g2, return_input_grad=True)
                d_emb[:b] += d_in
                sgd_step(probe, probe_grads, config.learning_rate)
            sgd_step(enc, backward(enc, xb, d_emb), config.learning_rate)
            epoch_loss.append(loss)
        history.append(float(np.mean(epoch_loss)))
    return Tile2VecResult(enc, scaler, history, probe)


def train_probe(result, blocks, targets, config):
    """Linear classifier head on frozen tile2vec embeddings."""
    emb = result.embed(np.asarray(blocks, dtype=np.float64))
    return train_classifier(emb, targets, "linear", config, geo=False)
