"""Contrastive pretraining of the explanation encoder.

Each anchor is pulled toward one masked positive and pushed from the other
anchors of its batch via a temperature-scaled softmax over raw dot
similarities. Training stops on relative-improvement stagnation.
"""

import time
from dataclasses import dataclass

import numpy as np

from .augment import AugmentConfig, select_positive_batch
from .data import ReferenceVector, TabularDataset
from .net import FeedForwardNet, OptimizerState, backward, forward, init_net, optimizer_step
from .rng import derive_seed, stream


class ContrastiveError(ValueError):
    pass


@dataclass
class ContrastiveConfig:
    tau: float = 0.02
    batch_size: int = 1024
    max_epochs: int = 500
    patience: int = 10
    rel_tol: float = 1e-4
    learning_rate: float = 5e-3
    normalize_embeddings: bool = False  # off by default: raw dot similarity
    seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ContrastiveError("temperature must be positive")
        if self.batch_size < 2:
            raise ContrastiveError("batch_size must be >= 2 (need at least one negative)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ContrastiveError("max_epochs and patience must be >= 1")


def infonce_loss(anchor, positive, batch, tau, anchor_index: int = 0):
    """Loss and gradients for one anchor against its positive and the other
    batch embeddings as negatives.

    loss = -log( exp(a.p/tau) / (exp(a.p/tau) + sum_{j != i} exp(a.b_j/tau)) )

    Returns (loss, grad_anchor, grad_positive, grad_batch); grad_batch's
    anchor row is zero because that entry never enters the loss (the anchor's
    own gradient is reported separately).
    """
    if tau <= 0:
        raise ContrastiveError("temperature must be positive")
    anchor = np.asarray(anchor, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=np.float64).reshape(-1)
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    N = batch.shape[0]
    if N < 2:
        raise ContrastiveError("batch must contain at least one negative")
    if not (0 <= anchor_index < N):
        raise ContrastiveError("anchor_index outside batch")

    neg_idx = np.arange(N) != anchor_index
    logits = np.concatenate([[anchor @ positive], batch[neg_idx] @ anchor]) / tau
    shift = logits.max()  # guards exp overflow inside the log-sum
    expd = np.exp(logits - shift)
    Z = expd.sum()
    loss = -(logits[0] - shift) + np.log(Z)
    p = expd / Z

    grad_anchor = ((p[0] - 1.0) * positive + p[1:] @ batch[neg_idx]) / tau
    grad_positive = (p[0] - 1.0) * anchor / tau
    grad_batch = np.zeros_like(batch)
    grad_batch[neg_idx] = np.outer(p[1:], anchor) / tau
    return float(loss), grad_anchor, grad_positive, grad_batch


def batch_infonce(H: np.ndarray, P: np.ndarray, tau: float):
    """Mean loss over a batch of anchor embeddings H and their positives P,
    with gradients w.r.t. both. Row i's negatives are the other rows of H.
    """
    if tau <= 0:
        raise ContrastiveError("temperature must be positive")
    H = np.atleast_2d(H)
    P = np.atleast_2d(P)
    N = H.shape[0]
    if N < 2:
        raise ContrastiveError("batch must contain at least one negative")

    logits = (H @ H.T) / tau
    np.fill_diagonal(logits, np.einsum("ij,ij->i", H, P) / tau)
    shift = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - shift)
    Z = expd.sum(axis=1, keepdims=True)
    losses = -(np.diagonal(logits) - shift[:, 0]) + np.log(Z[:, 0])
    probs = expd / Z

    G = probs.copy()
    diag = np.diagonal(G).copy() - 1.0
    np.fill_diagonal(G, 0.0)
    # anchor role: off-diagonal similarities plus the positive on the diagonal;
    # negative role: each h_j also appears in every other row's denominator
    dH = (G @ H + G.T @ H + diag[:, None] * P) / (tau * N)
    dP = diag[:, None] * H / (tau * N)
    return float(losses.mean()), dH, dP


def train_encoder(
    dataset: TabularDataset,
    f,
    ref: ReferenceVector,
    aug: AugmentConfig,
    cfg: ContrastiveConfig,
    encoder_dims: list[int],
) -> tuple[FeedForwardNet, list[dict]]:
    """Fit the explanation encoder on the training split; the target model f
    is only evaluated, never updated.

    Per epoch and shuffled batch: draw each anchor's candidate set, select
    its positive, embed anchors and positives, and take one optimizer step
    on the batch loss. Stops once the relative epoch-loss improvement stays
    below cfg.rel_tol for cfg.patience consecutive epochs.
    """
    if dataset.split_tag != "train":
        raise ContrastiveError("encoder trains on the train split only")
    X = dataset.features
    n = X.shape[0]
    if n < 2:
        raise ContrastiveError("need at least two training instances")
    if encoder_dims[0] != dataset.n_features:
        raise ContrastiveError("encoder input dim must match the feature count")

    encoder = init_net(encoder_dims, seed=derive_seed(cfg.seed, "init"))
    opt = OptimizerState(learning_rate=cfg.learning_rate)
    batch_rng = stream(cfg.seed, "batching")
    mask_rng = stream(cfg.seed, "masks")
    selector_rng = stream(cfg.seed, "selector")
    batch_size = min(cfg.batch_size, n)

    log = []
    last_loss = None
    stall = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        order = batch_rng.permutation(n)
        total, seen = 0.0, 0
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            if idx.shape[0] < 2:
                continue  # a lone trailing anchor has no negatives
            anchors = X[idx]
            positives = select_positive_batch(f, anchors, ref, aug, mask_rng, selector_rng)
            if cfg.normalize_embeddings:
                H, cache_h, P, cache_p, loss, dH, dP = _normalized_batch(
                    encoder, anchors, positives, cfg.tau
                )
            else:
                H, cache_h = forward(encoder, anchors, return_cache=True)
                P, cache_p = forward(encoder, positives, return_cache=True)
                loss, dH, dP = batch_infonce(H, P, cfg.tau)
            if not np.isfinite(loss):
                raise ContrastiveError(f"non-finite contrastive loss at epoch {epoch}")
            g_h = backward(encoder, cache_h, dH)
            g_p = backward(encoder, cache_p, dP)
            grads = [a + b for a, b in zip(g_h.params(), g_p.params())]
            optimizer_step(opt, encoder.params(), grads)
            total += loss * idx.shape[0]
            seen += idx.shape[0]
        epoch_loss = total / seen
        log.append(
            {"epoch": epoch, "mean_loss": float(epoch_loss), "seconds": time.perf_counter() - t0}
        )
        if last_loss is not None:
            rel_improve = (last_loss - epoch_loss) / max(abs(last_loss), 1e-12)
            stall = stall + 1 if rel_improve < cfg.rel_tol else 0
            if stall >= cfg.patience:
                break
        last_loss = epoch_loss
    return encoder, log


def _normalized_batch(encoder, anchors, positives, tau):
    """Optional unit-norm variant: embeddings are L2-normalized before the
    loss; gradients are mapped back through the normalization."""
    H_raw, cache_h = forward(encoder, anchors, return_cache=True)
    P_raw, cache_p = forward(encoder, positives, return_cache=True)
    H, jh = _normalize_rows(H_raw)
    P, jp = _normalize_rows(P_raw)
    loss, dH, dP = batch_infonce(H, P, tau)
    return H_raw, cache_h, P_raw, cache_p, loss, jh(dH), jp(dP)


def _normalize_rows(A):
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    U = A / norms

    def backprop(dU):
        return (dU - (dU * U).sum(axis=1, keepdims=True) * U) / norms

    return U, backprop


def embed(encoder: FeedForwardNet, data) -> np.ndarray:
    """Batched forward map to latent explanations; accepts a dataset or a
    plain matrix."""
    X = data.features if isinstance(data, TabularDataset) else np.atleast_2d(data)
    return forward(encoder, X)
