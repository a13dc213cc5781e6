"""Explanation heads fine-tuned on frozen embeddings, and the end-to-end
supervised baseline trained on raw features.

Two tasks: attribution regression (squared loss on per-feature scores) and
rank classification (one softmax row per importance position, scored over
features). Label budgets select a deterministic shuffled prefix of the
training split so smaller budgets nest inside larger ones.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .net import FeedForwardNet, OptimizerState, backward, forward, init_net, optimizer_step
from .oracle import AttributionVector, normalize_scores
from .rng import derive_seed, stream


class HeadError(ValueError):
    pass


@dataclass
class RankingVector:
    """positions[j] = feature occupying importance rank j (rank 0 is the most
    important). Ground truth is a permutation; predictions may collide."""

    positions: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1)


@dataclass
class LabelBudget:
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise HeadError("label fraction must lie in (0, 1]")

    def select(self, train_size: int) -> np.ndarray:
        """ceil(fraction * train_size) indices, a fixed shuffled prefix so
        budgets with the same seed are nested."""
        count = math.ceil(self.fraction * train_size)
        order = stream(self.seed, "labels").permutation(train_size)
        return np.sort(order[:count])


@dataclass
class HeadSpec:
    hidden: int = 128
    depth: int = 3  # number of weight layers
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 5e-3
    weight_decay_sweep: tuple = (1e-3, 1e-4, 1e-5, 1e-6)
    holdout_fraction: float = 0.2
    seed: int = 0

    def dims(self, in_dim: int, out_dim: int) -> list[int]:
        return [in_dim] + [self.hidden] * (self.depth - 1) + [out_dim]


def make_ranking_labels(att) -> RankingVector:
    """Features sorted by descending signed score; ties go to the lowest
    feature index."""
    scores = att.scores if isinstance(att, AttributionVector) else np.asarray(att, dtype=np.float64)
    scores = scores.reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise HeadError("ranking labels need finite scores")
    return RankingVector(np.argsort(-scores, kind="stable"))


def ranking_label_matrix(scores: np.ndarray, by_magnitude: bool = False) -> np.ndarray:
    """Row-wise ranking labels for a matrix of attribution scores."""
    scores = np.atleast_2d(scores)
    key = np.abs(scores) if by_magnitude else scores
    return np.argsort(-key, axis=1, kind="stable")


def _split_holdout(indices: np.ndarray, holdout_fraction: float):
    if indices.shape[0] < 2:
        raise HeadError("labeled subset must contain at least 2 instances to hold one out")
    n_hold = max(1, int(round(holdout_fraction * indices.shape[0])))
    n_hold = min(n_hold, indices.shape[0] - 1)
    return indices[:-n_hold], indices[-n_hold:]


def _train_net(dims, X, dY_fn, score_fn, X_val, lr, weight_decay, epochs, batch_size, seed):
    """Generic minibatch training loop.

    dY_fn(pred, batch_rows) -> (loss, dL/dpred); score_fn(val_pred) -> scalar
    where lower is better. Trains for the full epoch count and returns
    (net, holdout score); model selection happens across sweep arms, not
    across epochs.
    """
    net = init_net(dims, seed=derive_seed(seed, "init"))
    opt = OptimizerState(learning_rate=lr, weight_decay=weight_decay)
    rng = stream(seed, "batching")
    n = X.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            pred, cache = forward(net, X[idx], return_cache=True)
            _, dpred = dY_fn(pred, idx)
            grads = backward(net, cache, dpred)
            optimizer_step(opt, net.params(), grads.params())
    return net, score_fn(forward(net, X_val))


def _mse_grad(targets):
    def dY_fn(pred, idx):
        diff = pred - targets[idx]
        m = targets.shape[1]
        loss = float((diff**2).mean())
        return loss, 2.0 * diff / (m * idx.shape[0])

    return dY_fn


def _rank_ce_grad(rank_targets):
    m = rank_targets.shape[1]

    def dY_fn(pred, idx):
        logits = pred.reshape(-1, m, m)
        probs = _row_softmax(logits)
        onehot = np.zeros_like(probs)
        rows = np.arange(idx.shape[0])[:, None]
        cols = np.arange(m)[None, :]
        onehot[rows, cols, rank_targets[idx]] = 1.0
        eps = 1e-12
        loss = float(-(onehot * np.log(probs + eps)).sum(axis=(1, 2)).mean())
        grad = (probs - onehot).reshape(idx.shape[0], m * m) / idx.shape[0]
        return loss, grad

    return dY_fn


def _row_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rank_ce_loss(logits: np.ndarray, rank_targets: np.ndarray) -> float:
    """Summed per-position cross entropy against the one-hot true feature at
    each rank, averaged over instances."""
    n, m = rank_targets.shape
    probs = _row_softmax(logits.reshape(n, m, m))
    picked = probs[np.arange(n)[:, None], np.arange(m)[None, :], rank_targets]
    return float(-np.log(picked + 1e-12).sum(axis=1).mean())


def finetune_mse_head(
    embeddings: np.ndarray,
    labels: np.ndarray,
    budget: LabelBudget,
    spec: HeadSpec,
) -> tuple[FeedForwardNet, dict]:
    """Regress attribution labels on frozen embeddings over the budgeted
    subset; the weight decay is swept and the model picked on a held-out
    slice of that subset (mean l2 error)."""
    embeddings = np.atleast_2d(embeddings)
    labels = np.atleast_2d(labels)
    idx = budget.select(embeddings.shape[0])
    train_idx, hold_idx = _split_holdout(idx, spec.holdout_fraction)
    X, Y = embeddings[train_idx], labels[train_idx]
    Xh, Yh = embeddings[hold_idx], labels[hold_idx]
    dims = spec.dims(embeddings.shape[1], labels.shape[1])

    def holdout_error(pred):
        return float(np.linalg.norm(pred - Yh, axis=1).mean())

    best = None
    for wd in spec.weight_decay_sweep:
        net, score = _train_net(
            dims, X, _mse_grad(Y), holdout_error, Xh,
            spec.learning_rate, wd, spec.epochs, spec.batch_size, spec.seed,
        )
        if best is None or score < best[1]:
            best = (net, score, wd)
    net, score, wd = best
    return net, {
        "holdout_l2": score,
        "weight_decay": wd,
        "n_labels": int(idx.shape[0]),
        "train_indices": train_idx,
        "holdout_indices": hold_idx,
    }


def finetune_ce_head(
    embeddings: np.ndarray,
    rank_labels: np.ndarray,
    budget: LabelBudget,
    spec: HeadSpec,
) -> tuple[FeedForwardNet, dict]:
    """Rank-classification head on frozen embeddings: output row j scores
    which feature sits at rank j. No weight decay for this task."""
    embeddings = np.atleast_2d(embeddings)
    rank_labels = np.atleast_2d(rank_labels).astype(np.int64)
    m = rank_labels.shape[1]
    idx = budget.select(embeddings.shape[0])
    train_idx, hold_idx = _split_holdout(idx, spec.holdout_fraction)
    X, R = embeddings[train_idx], rank_labels[train_idx]
    Xh, Rh = embeddings[hold_idx], rank_labels[hold_idx]
    dims = spec.dims(embeddings.shape[1], m * m)

    def holdout_ce(pred):
        return rank_ce_loss(pred, Rh)

    net, score = _train_net(
        dims, X, _rank_ce_grad(R), holdout_ce, Xh,
        spec.learning_rate, 0.0, spec.epochs, spec.batch_size, spec.seed,
    )
    return net, {
        "holdout_ce": score,
        "weight_decay": 0.0,
        "n_labels": int(idx.shape[0]),
        "train_indices": train_idx,
        "holdout_indices": hold_idx,
    }


def predict_attribution(
    encoder: FeedForwardNet,
    head: FeedForwardNet,
    X: np.ndarray,
    f=None,
    ref=None,
) -> np.ndarray:
    """head(encoder(x)) per row; when the target model and reference are
    supplied, outputs are efficiency-normalized to sum to f(x) - f(x_r)."""
    X = np.atleast_2d(X)
    scores = forward(head, forward(encoder, X))
    if f is not None and ref is not None:
        targets = np.asarray(f(X), dtype=np.float64).reshape(-1) - float(
            np.asarray(f(ref.values[None, :])).reshape(-1)[0]
        )
        scores = normalize_scores(scores, targets)
    return scores


def predict_ranking(encoder: FeedForwardNet, head: FeedForwardNet, X: np.ndarray) -> np.ndarray:
    """Per-position argmax over the head's rank-score rows (first index wins
    ties)."""
    X = np.atleast_2d(X)
    logits = forward(head, forward(encoder, X))
    m = int(round(math.sqrt(logits.shape[1])))
    return logits.reshape(-1, m, m).argmax(axis=2)


@dataclass
class SupervisedSpec:
    """End-to-end baseline: a deeper net on raw features, same losses."""

    hidden: int = 128
    depth: int = 6
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 5e-3
    weight_decay_sweep: tuple = (1e-3, 1e-4, 1e-5, 1e-6)
    holdout_fraction: float = 0.2
    seed: int = 0

    def dims(self, in_dim: int, out_dim: int) -> list[int]:
        return [in_dim] + [self.hidden] * (self.depth - 1) + [out_dim]


def train_supervised_explainer(
    features: np.ndarray,
    labels: np.ndarray,
    budget: LabelBudget,
    spec: SupervisedSpec,
    task: str = "mse",
) -> tuple[FeedForwardNet, dict]:
    """The label-hungry baseline: one network from raw features straight to
    attribution scores (task="mse") or rank-score rows (task="ce")."""
    if task not in ("mse", "ce"):
        raise HeadError(f"unknown task {task!r}")
    features = np.atleast_2d(features)
    labels = np.atleast_2d(labels)
    m = labels.shape[1]
    idx = budget.select(features.shape[0])
    train_idx, hold_idx = _split_holdout(idx, spec.holdout_fraction)
    X, Xh = features[train_idx], features[hold_idx]

    if task == "mse":
        Y, Yh = labels[train_idx], labels[hold_idx]
        dims = spec.dims(features.shape[1], m)

        def holdout(pred):
            return float(np.linalg.norm(pred - Yh, axis=1).mean())

        best = None
        for wd in spec.weight_decay_sweep:
            net, score = _train_net(
                dims, X, _mse_grad(Y), holdout, Xh,
                spec.learning_rate, wd, spec.epochs, spec.batch_size, spec.seed,
            )
            if best is None or score < best[1]:
                best = (net, score, wd)
        net, score, wd = best
        return net, {
            "holdout_l2": score,
            "weight_decay": wd,
            "n_labels": int(idx.shape[0]),
            "train_indices": train_idx,
            "holdout_indices": hold_idx,
        }

    R, Rh = labels[train_idx].astype(np.int64), labels[hold_idx].astype(np.int64)
    dims = spec.dims(features.shape[1], m * m)
    net, score = _train_net(
        dims, X, _rank_ce_grad(R), lambda pred: rank_ce_loss(pred, Rh), Xh,
        spec.learning_rate, 0.0, spec.epochs, spec.batch_size, spec.seed,
    )
    return net, {
        "holdout_ce": score,
        "weight_decay": 0.0,
        "n_labels": int(idx.shape[0]),
        "train_indices": train_idx,
        "holdout_indices": hold_idx,
    }


def supervised_predict_attribution(net: FeedForwardNet, X: np.ndarray, f=None, ref=None) -> np.ndarray:
    X = np.atleast_2d(X)
    scores = forward(net, X)
    if f is not None and ref is not None:
        targets = np.asarray(f(X), dtype=np.float64).reshape(-1) - float(
            np.asarray(f(ref.values[None, :])).reshape(-1)[0]
        )
        scores = normalize_scores(scores, targets)
    return scores


def supervised_predict_ranking(net: FeedForwardNet, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    logits = forward(net, X)
    m = int(round(math.sqrt(logits.shape[1])))
    return logits.reshape(-1, m, m).argmax(axis=2)
