"""Explanation-oriented positive augmentation.

A positive candidate for an anchor x is a masked perturbation of x; the
selector picks the candidate whose model output is closest to the anchor's
(compact alignment). Random and farthest-output selectors exist as ablation
arms. Also hosts the bound check relating attribution distance to prediction
distance for linear models.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .data import ReferenceVector, apply_mask
from .oracle import exact_attribution

SELECTORS = ("compact", "random", "max-alignment")


class AugmentError(ValueError):
    pass


@dataclass
class AugmentConfig:
    set_size: int = 30  # candidates drawn per anchor
    density: float = 0.5  # Bernoulli keep-probability per coordinate
    selector: str = "compact"
    seed: int = 0

    def __post_init__(self):
        if self.set_size < 1:
            raise AugmentError("set_size must be >= 1")
        if not (0.0 < self.density < 1.0):
            raise AugmentError("density must lie in (0, 1)")
        if self.selector not in SELECTORS:
            raise AugmentError(f"unknown selector {self.selector!r}")


@dataclass
class PositivePair:
    anchor_index: int
    positive: np.ndarray
    prediction_gap: float

    def __post_init__(self):
        if not (np.isfinite(self.prediction_gap) and self.prediction_gap >= 0):
            raise AugmentError("prediction gap must be finite and non-negative")


def sample_masks(n_features: int, count: int, density: float, rng: np.random.Generator) -> np.ndarray:
    """`count` masks with independent Bernoulli(density) coordinates."""
    return (rng.random((count, n_features)) < density).astype(np.float64)


def synth_positive_set(
    x: np.ndarray, ref: ReferenceVector, config: AugmentConfig, rng: np.random.Generator = None
) -> np.ndarray:
    """Masked perturbations of x: one row per drawn mask, duplicates allowed.

    Deterministic given the config seed (or a caller-owned generator).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    M = x.shape[0]
    if M <= 30 and config.set_size > 2 ** M / 4:
        warnings.warn(
            f"candidate set size {config.set_size} is large for {2 ** M} possible masks; "
            "near-duplicate positives become likely",
            stacklevel=2,
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    masks = sample_masks(M, config.set_size, config.density, rng)
    return apply_mask(x, masks, ref)


def select_positive(
    f,
    x: np.ndarray,
    candidates: np.ndarray,
    selector: str = "compact",
    anchor_index: int = 0,
    rng: np.random.Generator = None,
) -> PositivePair:
    """Pick one candidate per the selector rule.

    compact picks the smallest |f(x) - f(candidate)|, max-alignment the
    largest, random a uniform draw. Ties break toward the lowest candidate
    index. Candidate model outputs come from a single batched forward pass.
    """
    if selector not in SELECTORS:
        raise AugmentError(f"unknown selector {selector!r}")
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if candidates.shape[0] < 1:
        raise AugmentError("candidate set is empty")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    batch = np.concatenate([x[None, :], candidates], axis=0)
    preds = np.asarray(f(batch), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(preds)):
        raise AugmentError("non-finite model output on a candidate")
    gaps = np.abs(preds[1:] - preds[0])
    if selector == "compact":
        pick = int(np.argmin(gaps))  # argmin returns the first (lowest) index on ties
    elif selector == "max-alignment":
        pick = int(np.argmax(gaps))
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = int(rng.integers(candidates.shape[0]))
    return PositivePair(anchor_index, candidates[pick], float(gaps[pick]))


def select_positive_batch(
    f,
    anchors: np.ndarray,
    ref: ReferenceVector,
    config: AugmentConfig,
    rng: np.random.Generator,
    selector_rng: np.random.Generator = None,
) -> np.ndarray:
    """Vectorized positive construction for a batch of anchors.

    Masks for all anchors and all candidate evaluations go through one model
    call; the random selector consumes `selector_rng` so ablation arms can
    share the mask stream draw-for-draw.
    """
    anchors = np.atleast_2d(anchors)
    n, M = anchors.shape
    m = config.set_size
    masks = sample_masks(M, n * m, config.density, rng).reshape(n, m, M)
    cands = apply_mask(anchors[:, None, :], masks, ref)  # (n, m, M)
    flat = np.concatenate([anchors, cands.reshape(n * m, M)], axis=0)
    preds = np.asarray(f(flat), dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(preds)):
        raise AugmentError("non-finite model output on a candidate")
    anchor_preds = preds[:n]
    gaps = np.abs(preds[n:].reshape(n, m) - anchor_preds[:, None])
    if config.selector == "compact":
        picks = np.argmin(gaps, axis=1)
    elif config.selector == "max-alignment":
        picks = np.argmax(gaps, axis=1)
    else:
        if selector_rng is None:
            selector_rng = np.random.default_rng(config.seed)
        picks = selector_rng.integers(m, size=n)
    return cands[np.arange(n), picks]


def alignment_bound_check(
    weights: np.ndarray,
    bias: float,
    x: np.ndarray,
    x_tilde: np.ndarray,
    ref: ReferenceVector,
    tol: float = 1e-9,
) -> dict:
    """For a linear model, check that the attribution distance between an
    anchor and a perturbed instance is bounded by the prediction distance:

        ||Phi(x) - Phi(x~)||_2 <= (1 + sqrt(2)*g0) * |f(x) - f(x~)| + sqrt(M)*g0,

    with g0 = ||w||_2 * ||x||_2 and uniform-subset attributions. The bound's
    hypothesis min_i phi_i(x~) >= 0 is verified first; a violation is
    reported as assumption_failed rather than a bound failure.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    x_tilde = np.asarray(x_tilde, dtype=np.float64).reshape(-1)
    M = x.shape[0]

    def f(X):
        return np.atleast_2d(X) @ w + bias

    phi_x = exact_attribution(f, x, ref, weighting="uniform").scores
    phi_t = exact_attribution(f, x_tilde, ref, weighting="uniform").scores
    if phi_t.min() < 0:
        return {
            "lhs": float(np.linalg.norm(phi_x - phi_t)),
            "rhs": float("nan"),
            "holds": False,
            "assumption_failed": True,
        }
    k_f = float(np.linalg.norm(w))
    gamma0 = k_f * float(np.linalg.norm(x))
    pred_gap = float(abs(f(x)[0] - f(x_tilde)[0]))
    lhs = float(np.linalg.norm(phi_x - phi_t))
    rhs = (1.0 + np.sqrt(2.0) * gamma0) * pred_gap + np.sqrt(M) * gamma0
    return {
        "lhs": lhs,
        "rhs": float(rhs),
        "holds": bool(lhs <= rhs + tol),
        "assumption_failed": False,
    }
