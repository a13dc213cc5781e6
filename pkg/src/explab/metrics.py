"""Evaluation quantities: attribution error, ranking accuracy, throughput,
masking curves with AUCs, log-odds, and the end-to-end error-bound report.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentConfig, select_positive_batch
from .data import ReferenceVector, apply_mask
from .rng import stream

LOG_ODDS_CLAMP = 1e-7


class MetricError(ValueError):
    pass


@dataclass
class MetricReport:
    tag: str
    values: np.ndarray  # per-instance
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def stderr(self) -> float:
        if self.values.size < 2:
            return 0.0
        return float(self.values.std(ddof=1) / np.sqrt(self.values.size))

    def to_dict(self) -> dict:
        return {
            "tag": self.tag,
            "mean": self.mean,
            "stderr": self.stderr,
            "n": int(self.values.size),
            "values": [float(v) for v in self.values],
            "metadata": self.metadata,
        }


def l2_error(pred, truth) -> float:
    """Euclidean distance between two attribution vectors."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {truth.shape}")
    return float(np.linalg.norm(pred - truth))


def l2_error_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return np.linalg.norm(pred - truth, axis=1)


def rank_acc(pred, truth) -> float:
    """Position-weighted ranking agreement: rank j (1-based) weighs 1/j,
    normalized by the harmonic sum, so the top ranks dominate."""
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    truth = np.asarray(truth, dtype=np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise MetricError(f"length mismatch: {pred.shape} vs {truth.shape}")
    weights = 1.0 / np.arange(1, pred.shape[0] + 1)
    return float(((pred == truth) * weights).sum() / weights.sum())


def rank_acc_rows(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    pred, truth = np.atleast_2d(pred), np.atleast_2d(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    weights = 1.0 / np.arange(1, pred.shape[1] + 1)
    return ((pred == truth) * weights).sum(axis=1) / weights.sum()


def throughput(explainer, test_X: np.ndarray, repetitions: int = 5, timer=time.perf_counter):
    """Instances explained per second for one full batched pass: one warm-up
    call, then the median wall-clock of `repetitions` timed passes."""
    test_X = np.atleast_2d(test_X)
    n = test_X.shape[0]
    if n < 1:
        raise MetricError("test set is empty")
    explainer(test_X)  # warm-up
    times = []
    for _ in range(repetitions):
        t0 = timer()
        explainer(test_X)
        times.append(timer() - t0)
    elapsed = float(np.median(times))
    return n / elapsed, {"median_seconds": elapsed, "seconds": times, "n_instances": n}


def log_odds(p) -> float:
    """log p/(1-p), with p clamped away from {0, 1}."""
    p = float(np.clip(p, LOG_ODDS_CLAMP, 1.0 - LOG_ODDS_CLAMP))
    return float(np.log(p / (1.0 - p)))


def delta_log_odds(p_orig, p_masked) -> float:
    """Drop in log-odds under masking."""
    return log_odds(p_orig) - log_odds(p_masked)


def _log_odds_rows(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, LOG_ODDS_CLAMP, 1.0 - LOG_ODDS_CLAMP)
    return np.log(p / (1.0 - p))


def _check_probabilities(p: np.ndarray):
    if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
        raise MetricError("model output is not a probability in [0, 1]")


def _curve_score(p_masked, orig_class, score_fn):
    if score_fn == "top1-accuracy":
        return float(((p_masked >= 0.5) == orig_class).mean())
    if score_fn == "log-odds":
        # confidence of the originally predicted class
        p_c = np.where(orig_class, p_masked, 1.0 - p_masked)
        return float(_log_odds_rows(p_c).mean())
    raise MetricError(f"unknown curve score {score_fn!r}")


def inclusion_exclusion_curves(
    f_prob,
    explainer,
    test_X: np.ndarray,
    ref: ReferenceVector,
    score_fn: str = "top1-accuracy",
) -> dict:
    """Mask features in estimated-importance order and trace the model score.

    exclusion: remove the top-k features (k = 0..M) from the intact instance;
    inclusion: insert them into the fully masked instance. AUCs integrate the
    curves over the masked fraction k/M; good explainers give low exclusion
    and high inclusion AUCs.
    """
    X = np.atleast_2d(test_X)
    n, M = X.shape
    scores = np.atleast_2d(explainer(X))
    if scores.shape != X.shape:
        raise MetricError("explainer must return one score per feature")
    order = np.argsort(-scores, axis=1, kind="stable")  # most important first

    p_orig = np.asarray(f_prob(X), dtype=np.float64).reshape(-1)
    _check_probabilities(p_orig)
    orig_class = p_orig >= 0.5

    exclusion, inclusion = [], []
    keep = np.ones((n, M))
    insert = np.zeros((n, M))
    rows = np.arange(n)
    for k in range(M + 1):
        if k > 0:
            keep[rows, order[:, k - 1]] = 0.0
            insert[rows, order[:, k - 1]] = 1.0
        p_ex = np.asarray(f_prob(apply_mask(X, keep, ref)), dtype=np.float64).reshape(-1)
        p_in = np.asarray(f_prob(apply_mask(X, insert, ref)), dtype=np.float64).reshape(-1)
        _check_probabilities(p_ex)
        _check_probabilities(p_in)
        exclusion.append(_curve_score(p_ex, orig_class, score_fn))
        inclusion.append(_curve_score(p_in, orig_class, score_fn))

    frac = np.arange(M + 1) / M
    return {
        "exclusion": np.array(exclusion),
        "inclusion": np.array(inclusion),
        "exclusion_auc": float(np.trapezoid(exclusion, frac)),
        "inclusion_auc": float(np.trapezoid(inclusion, frac)),
        "masked_fraction": frac,
    }


def bootstrap_curve_aucs(
    f_prob,
    explainer,
    test_X: np.ndarray,
    ref: ReferenceVector,
    score_fn: str = "top1-accuracy",
    n_boot: int = 20,
    sample_fraction: float = 2.0 / 3.0,
    seed: int = 0,
) -> dict:
    """Mean and spread of the curve AUCs over resampled test subsets."""
    X = np.atleast_2d(test_X)
    rng = stream(seed, "bootstrap")
    size = max(1, int(round(sample_fraction * X.shape[0])))
    ex, inc = [], []
    for _ in range(n_boot):
        idx = rng.choice(X.shape[0], size=size, replace=False)
        res = inclusion_exclusion_curves(f_prob, explainer, X[idx], ref, score_fn)
        ex.append(res["exclusion_auc"])
        inc.append(res["inclusion_auc"])
    ex, inc = np.array(ex), np.array(inc)
    return {
        "exclusion_auc_mean": float(ex.mean()),
        "exclusion_auc_std": float(ex.std(ddof=1)) if n_boot > 1 else 0.0,
        "inclusion_auc_mean": float(inc.mean()),
        "inclusion_auc_std": float(inc.std(ddof=1)) if n_boot > 1 else 0.0,
        "n_boot": n_boot,
    }


@dataclass
class BoundDiagnostics:
    """Per-test-instance comparison of the explanation error against its
    additive upper bound."""

    k_f: float
    k_eta: float
    train_error_bound: float  # max train-set explanation error
    gamma: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        for name in ("k_f", "k_eta", "train_error_bound"):
            if getattr(self, name) < 0:
                raise MetricError(f"{name} must be non-negative")

    @property
    def holds(self) -> np.ndarray:
        return self.lhs <= self.rhs + 1e-9

    @property
    def holds_fraction(self) -> float:
        return float(self.holds.mean())


def error_bound_diagnostics(
    f,
    embed_fn,
    predict_fn,
    k_f: float,
    k_eta: float,
    train_X: np.ndarray,
    train_labels: np.ndarray,
    test_X: np.ndarray,
    test_labels: np.ndarray,
    ref: ReferenceVector,
    aug: AugmentConfig,
    seed: int = 0,
) -> BoundDiagnostics:
    """Diagnostic only: per test instance x with compact positive x+,

        lhs = ||Phi(x) - Phi_hat(x)||
        rhs = (1 + sqrt(2)*g)|f(x) - f(x+)| + sqrt(M)*g + E + K_eta*||h(x+) - h(x)||

    with g = K_f ||x||_2 and E the worst train-set explanation error. The
    caller supplies Lipschitz upper bounds for the target model and the head.
    """
    train_X, test_X = np.atleast_2d(train_X), np.atleast_2d(test_X)
    M = test_X.shape[1]
    if np.atleast_2d(test_labels).shape != test_X.shape:
        raise MetricError("missing or misshapen exact labels for the test split")
    train_err = l2_error_rows(np.atleast_2d(predict_fn(train_X)), np.atleast_2d(train_labels))
    E = float(train_err.max())

    rng = stream(seed, "bound-masks")
    positives = select_positive_batch(f, test_X, ref, aug, rng)
    pred_gap = np.abs(
        np.asarray(f(test_X), dtype=np.float64).reshape(-1)
        - np.asarray(f(positives), dtype=np.float64).reshape(-1)
    )
    h_x = np.atleast_2d(embed_fn(test_X))
    h_pos = np.atleast_2d(embed_fn(positives))
    h_dist = np.linalg.norm(h_pos - h_x, axis=1)

    gamma = k_f * np.linalg.norm(test_X, axis=1)
    lhs = l2_error_rows(np.atleast_2d(predict_fn(test_X)), np.atleast_2d(test_labels))
    rhs = (1.0 + np.sqrt(2.0) * gamma) * pred_gap + np.sqrt(M) * gamma + E + k_eta * h_dist
    return BoundDiagnostics(float(k_f), float(k_eta), E, gamma, lhs, rhs)
