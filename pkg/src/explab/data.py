"""Tabular datasets, reference values, masking arithmetic, and synthetic benchmarks.

The masking convention used throughout: a binary mask S keeps feature i when
S[i] = 1 and substitutes the reference value when S[i] = 0, i.e. the perturbed
instance is S * x + (1 - S) * x_r.
"""

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .net import FeedForwardNet, forward, init_net
from .rng import stream


class DataError(ValueError):
    """Malformed input data (bad CSV, dimension mismatch, invalid spec)."""


@dataclass
class TabularDataset:
    """A feature matrix of shape (n_instances, n_features)."""

    features: np.ndarray
    feature_names: list[str]
    split_tag: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        n, m = self.features.shape
        if n < 1 or m < 1:
            raise DataError("dataset needs at least one row and one feature")
        if len(self.feature_names) != m:
            raise DataError(
                f"{len(self.feature_names)} names for {m} feature columns"
            )
        if not np.all(np.isfinite(self.features)):
            raise DataError("dataset contains non-finite entries")
        if self.split_tag not in ("train", "valid", "test"):
            raise DataError(f"unknown split tag {self.split_tag!r}")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


@dataclass
class ReferenceVector:
    """Per-feature stand-in values substituted for masked features."""

    values: np.ndarray
    policy: str = "custom"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size < 1 or not np.all(np.isfinite(self.values)):
            raise DataError("reference vector must be finite and non-empty")
        if self.policy not in ("mean", "zeros", "custom"):
            raise DataError(f"unknown reference policy {self.policy!r}")


def load_csv(path, schema: Sequence[str]) -> TabularDataset:
    """Load a numeric CSV with a mandatory header row matching `schema`.

    Raises DataError on a missing file, header mismatch, empty body, or any
    cell that does not parse as a finite real number (reported by row and
    column).
    """
    schema = list(schema)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"no such file: {path}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected header {schema}") from None
        if header != schema:
            raise DataError(f"{path}: header {header} does not match schema {schema}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(schema):
                raise DataError(f"{path}:{lineno}: expected {len(schema)} cells, got {len(row)}")
            parsed = []
            for col, cell in zip(schema, row):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: column {col!r}: non-numeric cell {cell!r}") from None
                if not np.isfinite(value):
                    raise DataError(f"{path}:{lineno}: column {col!r}: non-finite cell {cell!r}")
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no instances")
    return TabularDataset(np.array(rows, dtype=np.float64), schema)


def save_csv(path, dataset: TabularDataset) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.feature_names)
        for row in dataset.features:
            writer.writerow([repr(float(v)) for v in row])


def compute_reference(dataset: TabularDataset, policy: str = "mean") -> ReferenceVector:
    """Reference values from a dataset: column means or zeros."""
    if policy == "mean":
        return ReferenceVector(dataset.features.mean(axis=0), "mean")
    if policy == "zeros":
        return ReferenceVector(np.zeros(dataset.n_features), "zeros")
    raise DataError(f"unknown reference policy {policy!r}")


def apply_mask(x: np.ndarray, mask: np.ndarray, ref: ReferenceVector) -> np.ndarray:
    """Perturb x by keeping features where mask is 1 and substituting the
    reference where 0. Accepts a single instance or a batch; masks broadcast
    row-wise for a batch of masks against one instance.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if x.shape[-1] != ref.values.shape[0] or mask.shape[-1] != ref.values.shape[0]:
        raise DataError(
            f"dimension mismatch: x {x.shape}, mask {mask.shape}, ref {ref.values.shape}"
        )
    return mask * x + (1.0 - mask) * ref.values


@dataclass
class SyntheticModelSpec:
    """Spec for a synthetic target model with checkable ground-truth attributions.

    kinds:
      linear                f(x) = w.x + b
      pairwise-interaction  f(x) = w.x + b + sum_t c_t * x_[i_t] * x_[j_t]
      mlp-random            random ReLU network, seeded from `weights[0]`
    """

    kind: str
    n_features: int
    weights: np.ndarray = field(default=None)  # per-kind meaning, see build_model
    bias: float = 0.0
    pairs: list = field(default_factory=list)  # (i, j, coeff) interaction terms

    def __post_init__(self):
        if self.kind not in ("linear", "pairwise-interaction", "mlp-random"):
            raise DataError(f"unknown synthetic model kind {self.kind!r}")
        if self.n_features < 1:
            raise DataError("n_features must be >= 1")
        if self.kind == "mlp-random":
            # weights holds (init seed, optional first-layer scale, optional
            # per-feature input multipliers). Scaling the first layer (with
            # random hidden biases) roughens the function; per-feature
            # multipliers control how relevant each input is.
            if self.weights is None:
                self.weights = np.array([0.0])
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.size not in (1, 2, 2 + self.n_features):
                raise DataError(
                    "mlp-random weights are [init_seed], [init_seed, scale], "
                    "or [init_seed, scale, per-feature multipliers...]"
                )
        else:
            if self.weights is None:
                raise DataError(f"{self.kind} spec needs a weight vector")
            self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if self.weights.shape[0] != self.n_features:
                raise DataError("weight vector length must equal n_features")
        for i, j, _ in self.pairs:
            if not (0 <= i < self.n_features and 0 <= j < self.n_features and i != j):
                raise DataError(f"bad interaction pair ({i}, {j})")


def build_model(spec: SyntheticModelSpec) -> Callable[[np.ndarray], np.ndarray]:
    """A batched callable X (n, M) -> predictions (n,) for the spec."""
    if spec.kind == "linear":
        w, b = spec.weights, spec.bias

        def f(X):
            return np.atleast_2d(X) @ w + b

        return f
    if spec.kind == "pairwise-interaction":
        w, b, pairs = spec.weights, spec.bias, spec.pairs

        def f(X):
            X = np.atleast_2d(X)
            out = X @ w + b
            for i, j, c in pairs:
                out = out + c * X[:, i] * X[:, j]
            return out

        return f
    # mlp-random: small ReLU net, scalar output
    net = _random_mlp(spec)

    def f(X):
        return forward(net, np.atleast_2d(X))[:, 0]

    return f


def _random_mlp(spec: SyntheticModelSpec) -> FeedForwardNet:
    init_seed = int(spec.weights[0])
    scale = float(spec.weights[1]) if spec.weights.size > 1 else 1.0
    net = init_net([spec.n_features, 32, 32, 1], seed=init_seed)
    rng = np.random.default_rng(init_seed + 10_007)
    for b in net.biases[:-1]:
        b += rng.normal(0.0, 0.5, size=b.shape)
    # scaling only the first weight matrix (biases fixed) shortens the
    # length scale the function varies on; plain relu nets are positively
    # homogeneous, so uniform scaling would only change units
    net.weights[0] *= scale
    if spec.weights.size > 2:
        net.weights[0] *= spec.weights[2:][:, None]
    return net


def exact_attribution_closure(
    spec: SyntheticModelSpec, ref: ReferenceVector
) -> Callable[[np.ndarray], np.ndarray]:
    """Ground-truth attribution function for a synthetic model.

    Linear and pairwise-interaction kinds have closed forms whose marginal
    contributions make the classic and uniform subset weightings coincide;
    mlp-random falls back to exhaustive enumeration.
    """
    if spec.kind == "linear":
        w = spec.weights

        def closure(X):
            X = np.atleast_2d(X)
            return w * (X - ref.values)

        return closure
    if spec.kind == "pairwise-interaction":
        w, pairs = spec.weights, spec.pairs

        def closure(X):
            X = np.atleast_2d(X)
            att = w * (X - ref.values)
            # a term c*x_i*x_j splits as c/2*(x_i - r_i)*(x_j + r_j) to i
            # (symmetrically to j): the partner is present in half the
            # orderings/subsets under either weighting
            for i, j, c in pairs:
                att[:, i] += 0.5 * c * (X[:, i] - ref.values[i]) * (X[:, j] + ref.values[j])
                att[:, j] += 0.5 * c * (X[:, j] - ref.values[j]) * (X[:, i] + ref.values[i])
            return att

        return closure

    model = build_model(spec)

    def closure(X):
        from .oracle import exact_attribution  # deferred: oracle imports data

        X = np.atleast_2d(X)
        return np.stack([exact_attribution(model, x, ref).scores for x in X])

    return closure


def generate_synthetic(
    spec: SyntheticModelSpec,
    n: int,
    seed: int,
    split_tag: str = "train",
    loc: float = 0.0,
    scale: float = 1.0,
):
    """Draw n Gaussian instances for the spec's feature space.

    Returns (dataset, model_fn, attribution_closure); the closure maps a batch
    of instances to ground-truth attributions against the dataset's mean
    reference. Deterministic given the seed.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    rng = stream(seed, "data", split_tag)
    X = rng.normal(loc, scale, size=(n, spec.n_features))
    names = [f"f{i}" for i in range(spec.n_features)]
    dataset = TabularDataset(X, names, split_tag)
    model = build_model(spec)
    ref = compute_reference(dataset, "mean")
    return dataset, model, exact_attribution_closure(spec, ref)
