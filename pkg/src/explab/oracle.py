"""Attribution oracles: exact subset enumeration, permutation sampling,
antithetical permutation sampling, and kernel-weighted regression.

All oracles share the same value function: v(S) = f(S * x + (1 - S) * x_r).
The exact oracle supports two subset weightings for the marginal-contribution
average: the classic coalition weighting |S|!(M-|S|-1)!/M! and a uniform
weighting 1/2^(M-1) over all subsets.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .data import ReferenceVector, TabularDataset, apply_mask
from .rng import derive_seed

EXACT_MAX_FEATURES = 24
_EVAL_CHUNK = 16384

ATTRIBUTION_SOURCES = ("exact-shapley", "exact-uniform", "ps", "aps", "ks", "model-head")


class OracleError(ValueError):
    """Infeasible configuration or invalid model output."""


class SingularRegressionError(RuntimeError):
    """The kernel regression system is rank-deficient; increase the budget."""


@dataclass
class AttributionVector:
    scores: np.ndarray
    source: str
    budget: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.scores)):
            raise OracleError("attribution scores must be finite")
        if self.source not in ATTRIBUTION_SOURCES:
            raise OracleError(f"unknown attribution source {self.source!r}")


@dataclass
class OracleConfig:
    source: str = "exact"  # exact | ps | aps | ks
    weighting: str = "shapley"  # shapley | uniform, exact source only
    budget: int = 0
    seed: int = 0

    def validate(self, n_features: int) -> None:
        if self.source not in ("exact", "ps", "aps", "ks"):
            raise OracleError(f"unknown oracle source {self.source!r}")
        if self.weighting not in ("shapley", "uniform"):
            raise OracleError(f"unknown weighting {self.weighting!r}")
        if self.source == "exact" or (self.source == "ks" and self.budget == 0):
            # both enumerate every subset
            if n_features > EXACT_MAX_FEATURES:
                raise OracleError(
                    f"exact enumeration infeasible for M={n_features} (max {EXACT_MAX_FEATURES})"
                )
        elif self.budget < 1:
            raise OracleError("sampled sources need budget >= 1")
        if self.source == "aps" and self.budget % 2 != 0:
            raise OracleError("antithetical sampling needs an even budget")
        if self.source == "ks" and self.budget != 0 and self.budget < n_features + 2:
            raise OracleError("kernel regression needs budget >= M + 2 (or 0 for full enumeration)")


def _as_instance(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise OracleError("instance contains non-finite entries")
    return x


def _value_function(f, x, ref: ReferenceVector):
    """Batched v(S) over mask rows, evaluated in chunks."""

    def values(masks: np.ndarray) -> np.ndarray:
        out = np.empty(masks.shape[0])
        for lo in range(0, masks.shape[0], _EVAL_CHUNK):
            chunk = masks[lo : lo + _EVAL_CHUNK]
            preds = np.asarray(f(apply_mask(x, chunk, ref)), dtype=np.float64).reshape(-1)
            if preds.shape[0] != chunk.shape[0]:
                raise OracleError("model must return one prediction per row")
            out[lo : lo + _EVAL_CHUNK] = preds
        if not np.all(np.isfinite(out)):
            raise OracleError("non-finite model output on a masked instance")
        return out

    return values


def _all_masks(n_features: int) -> np.ndarray:
    idx = np.arange(2**n_features, dtype=np.uint32)
    masks = np.empty((idx.size, n_features), dtype=np.float64)
    for i in range(n_features):
        masks[:, i] = (idx >> i) & 1
    return masks


def _popcounts(n_features: int) -> np.ndarray:
    idx = np.arange(2**n_features, dtype=np.uint32)
    counts = np.zeros(idx.size, dtype=np.int64)
    for i in range(n_features):
        counts += (idx >> i) & 1
    return counts


def exact_attribution(f, x, ref: ReferenceVector, weighting: str = "shapley") -> AttributionVector:
    """Average marginal contribution of each feature over all 2^(M-1) subsets
    not containing it, with exactly 2^M model evaluations (one per distinct
    subset).
    """
    x = _as_instance(x)
    M = x.shape[0]
    config = OracleConfig(source="exact", weighting=weighting)
    config.validate(M)
    v = _value_function(f, x, ref)(_all_masks(M))
    sizes = _popcounts(M)

    if weighting == "shapley":
        # weight indexed by |S| for subsets S not containing the feature
        size_w = np.array(
            [math.factorial(s) * math.factorial(M - s - 1) / math.factorial(M) for s in range(M)]
        )
    else:
        size_w = np.full(M, 1.0 / 2 ** (M - 1))

    idx = np.arange(2**M, dtype=np.int64)
    scores = np.empty(M)
    for i in range(M):
        without = idx[(idx >> i) & 1 == 0]
        with_i = without | (1 << i)
        scores[i] = np.sum(size_w[sizes[without]] * (v[with_i] - v[without]))
    return AttributionVector(scores, f"exact-{weighting}")


def sample_orderings(n_features: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """`count` uniformly random feature orderings, one per row."""
    return np.argsort(rng.random((count, n_features)), axis=1)


def _estimate_from_orderings(f, x, ref, orderings: np.ndarray) -> np.ndarray:
    """Average per-feature marginal contribution along each ordering."""
    x = _as_instance(x)
    n, M = orderings.shape
    values = _value_function(f, x, ref)
    totals = np.zeros(M)
    # chunk over orderings: each needs an (M+1)-long chain of masks
    chunk = max(1, _EVAL_CHUNK // (M + 1))
    for lo in range(0, n, chunk):
        block = orderings[lo : lo + chunk]
        b = block.shape[0]
        masks = np.zeros((b, M + 1, M))
        rows = np.arange(b)
        for k in range(M):
            masks[:, k + 1] = masks[:, k]
            masks[rows, k + 1, block[:, k]] = 1.0
        v = values(masks.reshape(b * (M + 1), M)).reshape(b, M + 1)
        contrib = np.diff(v, axis=1)  # contrib[:, k] belongs to feature block[:, k]
        for k in range(M):
            np.add.at(totals, block[:, k], contrib[:, k])
    return totals / n


def permutation_sampling(f, x, ref: ReferenceVector, budget: int, seed: int) -> AttributionVector:
    """Unbiased estimate of the coalition-weighted attribution from `budget`
    uniformly random orderings."""
    x = _as_instance(x)
    config = OracleConfig(source="ps", budget=budget, seed=seed)
    config.validate(x.shape[0])
    rng = np.random.default_rng(seed)
    orderings = sample_orderings(x.shape[0], budget, rng)
    return AttributionVector(_estimate_from_orderings(f, x, ref, orderings), "ps", budget)


def antithetical_permutation_sampling(
    f, x, ref: ReferenceVector, budget: int, seed: int
) -> AttributionVector:
    """Permutation sampling with each drawn ordering paired with its reverse.

    The pairing cancels the position-dependent part of the sampling noise;
    the estimator stays unbiased.
    """
    x = _as_instance(x)
    config = OracleConfig(source="aps", budget=budget, seed=seed)
    config.validate(x.shape[0])
    rng = np.random.default_rng(seed)
    half = sample_orderings(x.shape[0], budget // 2, rng)
    orderings = np.concatenate([half, half[:, ::-1]], axis=0)
    return AttributionVector(_estimate_from_orderings(f, x, ref, orderings), "aps", budget)


def _kernel_size_weights(M: int) -> np.ndarray:
    """pi(S) for |S| = 1..M-1: (M-1) / (C(M,|S|) * |S| * (M-|S|))."""
    sizes = np.arange(1, M)
    return (M - 1) / (np.array([math.comb(M, int(s)) for s in sizes]) * sizes * (M - sizes))


def _sample_ks_masks(M: int, budget: int, rng: np.random.Generator, paired: bool):
    """Interior subsets drawn with probability proportional to the kernel
    weight: size first (by total kernel mass per size), then uniform within
    the size. Paired mode adds each subset's complement."""
    mass = _kernel_size_weights(M) * np.array([math.comb(M, k) for k in range(1, M)])
    p = mass / mass.sum()
    masks = np.zeros((budget, M))
    n_draws = (budget + 1) // 2 if paired else budget
    sizes = rng.choice(np.arange(1, M), size=n_draws, p=p)
    row = 0
    for k in sizes:
        members = rng.permutation(M)[:k]
        masks[row, members] = 1.0
        row += 1
        if paired and row < budget:
            masks[row] = 1.0 - masks[row - 1]
            row += 1
        if row >= budget:
            break
    return masks[:row]


def _aggregate_masks(masks: np.ndarray):
    """Unique mask rows and their draw counts."""
    uniq, counts = np.unique(masks, axis=0, return_counts=True)
    return uniq, counts.astype(np.float64)


def kernel_shap(
    f,
    x,
    ref: ReferenceVector,
    budget: int = 0,
    seed: int = 0,
    paired: bool = True,
) -> AttributionVector:
    """Shapley estimate from a kernel-weighted least-squares fit of v(S) on
    mask indicators.

    budget = 0 enumerates every interior subset (exact recovery); otherwise
    `budget` subsets are sampled. The empty and full subsets are never part
    of the regression: they enter as constraints (intercept v(empty), total
    v(full) - v(empty)) eliminated from the linear system.
    """
    x = _as_instance(x)
    M = x.shape[0]
    config = OracleConfig(source="ks", budget=budget, seed=seed)
    config.validate(M)
    values = _value_function(f, x, ref)
    v_ends = values(np.stack([np.zeros(M), np.ones(M)]))
    v_empty, v_full = float(v_ends[0]), float(v_ends[1])
    total = v_full - v_empty
    if M == 1:
        return AttributionVector([total], "ks", budget)

    if budget == 0:
        masks = _all_masks(M)
        interior = (masks.sum(axis=1) > 0) & (masks.sum(axis=1) < M)
        masks = masks[interior]
        weights = _kernel_size_weights(M)[masks.sum(axis=1).astype(int) - 1]
        scores = _solve_constrained_wls(values, masks, weights, v_empty, total)
    else:
        # a complement pair spans one direction of the eliminated system, so
        # pairing cannot reach full rank below 2(M-1) subsets
        if budget < 2 * (M - 1) + 2:
            paired = False
        rng = np.random.default_rng(seed)
        masks, weights = _aggregate_masks(_sample_ks_masks(M, budget, rng, paired))
        try:
            scores = _solve_constrained_wls(values, masks, weights, v_empty, total)
        except SingularRegressionError:
            if not paired:
                raise
            # one retry with pairing disabled to break complement collinearity
            masks, weights = _aggregate_masks(_sample_ks_masks(M, budget, rng, paired=False))
            scores = _solve_constrained_wls(values, masks, weights, v_empty, total)
    return AttributionVector(scores, "ks", budget)


def _solve_constrained_wls(values, masks, weights, v_empty, total):
    """Weighted least squares with the efficiency constraint folded in by
    eliminating the last feature's coefficient."""
    M = masks.shape[1]
    y = values(masks) - v_empty - masks[:, -1] * total
    A = masks[:, :-1] - masks[:, -1:]
    sw = np.sqrt(weights)
    sol, _, rank, _ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    if rank < M - 1:
        raise SingularRegressionError(
            f"kernel regression is rank-deficient ({rank} < {M - 1}); increase the budget"
        )
    scores = np.empty(M)
    scores[:-1] = sol
    scores[-1] = total - sol.sum()
    return scores


def normalize_scores(scores: np.ndarray, target_sum) -> np.ndarray:
    """Additive efficiency correction: spread the residual target_sum - sum
    uniformly over the features. Works on a vector or a batch of rows."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        return scores + (float(target_sum) - scores.sum()) / scores.shape[0]
    target = np.asarray(target_sum, dtype=np.float64).reshape(-1)
    return scores + (target - scores.sum(axis=1))[:, None] / scores.shape[1]


def efficient_normalize(att: AttributionVector, target_sum: float) -> AttributionVector:
    """AttributionVector wrapper over normalize_scores."""
    return AttributionVector(normalize_scores(att.scores, target_sum), att.source, att.budget)


def estimate_attribution(f, x, ref: ReferenceVector, config: OracleConfig, seed=None) -> AttributionVector:
    """Dispatch a single-instance attribution per the oracle config."""
    seed = config.seed if seed is None else seed
    if config.source == "exact":
        return exact_attribution(f, x, ref, config.weighting)
    if config.source == "ps":
        return permutation_sampling(f, x, ref, config.budget, seed)
    if config.source == "aps":
        return antithetical_permutation_sampling(f, x, ref, config.budget, seed)
    if config.source == "ks":
        return kernel_shap(f, x, ref, config.budget, seed)
    raise OracleError(f"unknown oracle source {config.source!r}")


def label_cache_build(
    f, dataset: TabularDataset, config: OracleConfig, path, ref: ReferenceVector = None
) -> list[AttributionVector]:
    """Compute one attribution per dataset instance and persist them as
    JSON lines with provenance. Byte-identical across reruns with the same
    inputs; per-instance seeds are derived from the config seed so records
    are independent of each other.

    `ref` defaults to the dataset's own column means; pass the training
    split's reference when labelling other splits.
    """
    config.validate(dataset.n_features)
    if ref is None:
        from .data import compute_reference

        ref = compute_reference(dataset, "mean")
    records = []
    for i in range(dataset.n_instances):
        att = estimate_attribution(
            f, dataset.features[i], ref, config, seed=derive_seed(config.seed, "label", str(i))
        )
        records.append(att)
    with open(path, "w", encoding="utf-8") as fh:
        for i, att in enumerate(records):
            fh.write(
                json.dumps(
                    {
                        "instance_index": i,
                        "scores": [float(s) for s in att.scores],
                        "source": att.source,
                        "budget": int(att.budget),
                        "seed": int(config.seed),
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )
    return records


def load_label_cache(path) -> tuple[np.ndarray, dict]:
    """Read a label cache back as (scores matrix, provenance dict)."""
    scores, meta = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            rec = json.loads(line)
            if rec["instance_index"] != lineno:
                raise OracleError(f"{path}: records out of order at line {lineno + 1}")
            scores.append(rec["scores"])
            meta = {"source": rec["source"], "budget": rec["budget"], "seed": rec["seed"]}
    if not scores:
        raise OracleError(f"{path}: empty label cache")
    return np.array(scores, dtype=np.float64), meta
