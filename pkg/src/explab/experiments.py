"""Config-driven experiment pipelines.

Every study is a pure function of (resolved config, root seed): datasets,
model weights, masks, batching, and label subsets all draw from named
sub-streams of the root seed, so paired arms share exactly the streams they
should and reruns are byte-identical (wall-clock columns aside).

Run layout: <output_dir>/<name>/
    config.resolved        resolved config (JSON)
    manifest.json          command ledger: config hash, seed, outputs
    labels_train.jsonl     oracle label cache (train split)
    labels_test.jsonl      oracle label cache (test split)
    encoder.ckpt           trained explanation encoder
    training_log.csv       per-epoch contrastive loss
    heads/*.ckpt           fine-tuned heads and the supervised baselines
    metrics/*.csv          study tables (sweep, ablation, frontier, ...)
"""

import copy
import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import net as nets
from .augment import AugmentConfig
from .contrastive import ContrastiveConfig, embed, train_encoder
from .data import (
    ReferenceVector,
    SyntheticModelSpec,
    TabularDataset,
    build_model,
    compute_reference,
    exact_attribution_closure,
    load_csv,
)
from .heads import (
    HeadSpec,
    LabelBudget,
    SupervisedSpec,
    finetune_ce_head,
    finetune_mse_head,
    predict_attribution,
    predict_ranking,
    ranking_label_matrix,
    supervised_predict_attribution,
    supervised_predict_ranking,
    train_supervised_explainer,
)
from .metrics import l2_error_rows, rank_acc_rows, throughput
from .oracle import (
    OracleConfig,
    SingularRegressionError,
    antithetical_permutation_sampling,
    exact_attribution,
    kernel_shap,
    label_cache_build,
    load_label_cache,
    permutation_sampling,
)
from .rng import derive_seed, stream


class ConfigError(ValueError):
    """Bad experiment configuration (missing files, unknown keys, bad values)."""


class RuntimeFailure(RuntimeError):
    """A runtime prerequisite is missing or a pipeline step failed."""


DEFAULT_CONFIG = {
    "name": "run",
    "seed": 0,
    "output_dir": "runs",
    "dataset": {
        "kind": "synthetic",  # synthetic | csv
        "n_train": 1000,
        "n_test": 400,
        "model": {
            "kind": "mlp-random",  # linear | pairwise-interaction | mlp-random
            "n_features": 8,
            "init_seed": 0,
            "weight_scale": 1.0,
            "feature_relevance": None,  # per-feature input multipliers
            "weights": None,
            "bias": 0.0,
            "pairs": None,
            "n_pairs": 0,
        },
        "feature_scales": None,  # per-feature data standard deviations
        "train_csv": None,
        "test_csv": None,
        "columns": None,
        "target_checkpoint": None,
    },
    "reference": {"policy": "mean"},
    "oracle": {"source": "exact", "weighting": "shapley", "budget": 0},
    "augment": {"set_size": 30, "density": 0.5, "selector": "compact"},
    "contrastive": {
        "tau": 0.02,
        "batch_size": 1024,
        "max_epochs": 200,
        "patience": 10,
        "rel_tol": 1e-4,
        "learning_rate": 5e-3,
        "embed_dim": 64,
        "hidden": 128,
        "depth": 3,
    },
    "heads": {
        "hidden": 128,
        "depth": 3,
        "epochs": 300,
        "batch_size": 256,
        "learning_rate": 5e-3,
        "weight_decay_sweep": [1e-3, 1e-4, 1e-5, 1e-6],
        "holdout_fraction": 0.2,
        "fraction": 0.25,
    },
    "supervised": {
        "hidden": 128,
        "depth": 6,
        "epochs": 300,
        "batch_size": 256,
        "learning_rate": 5e-3,
        "weight_decay_sweep": [1e-3, 1e-4, 1e-5, 1e-6],
        "holdout_fraction": 0.2,
    },
    "sweep": {"fractions": [0.01, 0.05, 0.1, 0.25, 0.5, 1.0], "n_seeds": 5},
    "ablation": {"fraction": 0.25, "n_seeds": 5, "selectors": ["compact", "random", "max-alignment"]},
    "frontier": {
        "ks_budgets": [16, 64, 256, 1024],
        "ps_budgets": [8, 32, 128, 512],
        "repetitions": 5,
        "n_throughput_repetitions": 5,
    },
    "budget_study": {"budgets": [8, 32, 128, 512], "n_seeds": 100, "n_instances": 5},
}


def _merge(defaults, override, path=""):
    if override is None:
        return copy.deepcopy(defaults)
    if not isinstance(override, dict) or not isinstance(defaults, dict):
        return copy.deepcopy(override)
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            out[key] = _merge(defaults[key], value, path + key + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user_config: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge a user config over the defaults, then apply dotted-key overrides
    (command-line flags beat config-file keys)."""
    config = _merge(DEFAULT_CONFIG, user_config or {})
    for dotted, value in (overrides or {}).items():
        node = config
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return config


def load_config_file(path) -> dict:
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} failed to parse: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return raw


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (np.floating,)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


def write_csv(path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in header])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class RunContext:
    """Paths, config, and lazily-built pipeline pieces for one run."""

    def __init__(self, config: dict):
        self.config = config
        self.hash = config_hash(config)
        self.seed = int(config["seed"])
        self.run_dir = Path(config["output_dir"]) / str(config["name"])
        self.metrics_dir = self.run_dir / "metrics"
        self.heads_dir = self.run_dir / "heads"
        self._data = None

    def prepare(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_dir.mkdir(exist_ok=True)
        self.heads_dir.mkdir(exist_ok=True)
        with open(self.run_dir / "config.resolved", "w", encoding="utf-8") as fh:
            json.dump(self.config, fh, sort_keys=True, indent=2)
        return self

    def path(self, *parts) -> Path:
        return self.run_dir.joinpath(*parts)

    def record_manifest(self, command: str, outputs: list[str], seconds: float) -> None:
        manifest_path = self.run_dir / "manifest.json"
        manifest = {}
        if manifest_path.exists():
            manifest = json.loads(manifest_path.read_text())
        manifest.setdefault("name", str(self.config["name"]))
        manifest["config_hash"] = self.hash
        manifest["seed"] = self.seed
        entries = manifest.setdefault("commands", {})
        entries[command] = {"outputs": sorted(outputs), "wall_clock_seconds": seconds}
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=2)

    # ---------------- dataset / model ----------------

    def _model_spec(self) -> SyntheticModelSpec:
        mc = self.config["dataset"]["model"]
        kind = mc["kind"]
        m = int(mc["n_features"])
        rng = stream(self.seed, "model-weights")
        if kind == "mlp-random":
            w = [float(mc["init_seed"]), float(mc["weight_scale"])]
            if mc["feature_relevance"] is not None:
                relevance = [float(v) for v in mc["feature_relevance"]]
                if len(relevance) != m:
                    raise ConfigError("feature_relevance needs one multiplier per feature")
                w.extend(relevance)
            return SyntheticModelSpec(kind, m, weights=w)
        weights = mc["weights"]
        if weights is None:
            weights = rng.normal(size=m)
        pairs = mc["pairs"]
        if kind == "pairwise-interaction" and pairs is None:
            n_pairs = int(mc["n_pairs"]) or max(1, m // 2)
            pairs = []
            for _ in range(n_pairs):
                i, j = rng.choice(m, size=2, replace=False)
                pairs.append((int(i), int(j), float(rng.normal())))
        return SyntheticModelSpec(
            kind, m, weights=np.asarray(weights, dtype=np.float64),
            bias=float(mc["bias"]), pairs=[tuple(p) for p in (pairs or [])],
        )

    def data(self) -> dict:
        """Datasets, target model, reference, and (synthetic only) the exact
        attribution closure."""
        if self._data is not None:
            return self._data
        dc = self.config["dataset"]
        if dc["kind"] == "synthetic":
            spec = self._model_spec()
            scales = np.ones(spec.n_features)
            if dc["feature_scales"] is not None:
                scales = np.asarray([float(v) for v in dc["feature_scales"]], dtype=np.float64)
                if scales.shape[0] != spec.n_features:
                    raise ConfigError("feature_scales needs one entry per feature")
            rng_train = stream(self.seed, "data", "train")
            rng_test = stream(self.seed, "data", "test")
            train = TabularDataset(
                rng_train.normal(size=(int(dc["n_train"]), spec.n_features)) * scales,
                [f"f{i}" for i in range(spec.n_features)],
                "train",
            )
            test = TabularDataset(
                rng_test.normal(size=(int(dc["n_test"]), spec.n_features)) * scales,
                [f"f{i}" for i in range(spec.n_features)],
                "test",
            )
            model = build_model(spec)
            ref = compute_reference(train, self.config["reference"]["policy"])
            closure = exact_attribution_closure(spec, ref)
            self._data = {"train": train, "test": test, "f": model, "ref": ref, "closure": closure}
        elif dc["kind"] == "csv":
            if not dc["train_csv"] or not dc["test_csv"] or not dc["columns"]:
                raise ConfigError("csv datasets need train_csv, test_csv, and columns")
            train = load_csv(dc["train_csv"], dc["columns"])
            test = load_csv(dc["test_csv"], dc["columns"])
            train.split_tag, test.split_tag = "train", "test"
            if not dc["target_checkpoint"]:
                raise ConfigError("csv datasets need target_checkpoint for the model to explain")
            target = nets.load_checkpoint(dc["target_checkpoint"])
            model = nets.scalar_fn(target)
            ref = compute_reference(train, self.config["reference"]["policy"])
            self._data = {"train": train, "test": test, "f": model, "ref": ref, "closure": None}
        else:
            raise ConfigError(f"unknown dataset kind {dc['kind']!r}")
        return self._data

    def oracle_config(self, seed_offset: str = "labels") -> OracleConfig:
        oc = self.config["oracle"]
        return OracleConfig(
            source=oc["source"],
            weighting=oc["weighting"],
            budget=int(oc["budget"]),
            seed=derive_seed(self.seed, seed_offset),
        )

    def augment_config(self, selector: str | None = None, seed: int | None = None) -> AugmentConfig:
        ac = self.config["augment"]
        return AugmentConfig(
            set_size=int(ac["set_size"]),
            density=float(ac["density"]),
            selector=selector or ac["selector"],
            seed=self.seed if seed is None else seed,
        )

    def contrastive_config(self, seed: int | None = None) -> ContrastiveConfig:
        cc = self.config["contrastive"]
        return ContrastiveConfig(
            tau=float(cc["tau"]),
            batch_size=int(cc["batch_size"]),
            max_epochs=int(cc["max_epochs"]),
            patience=int(cc["patience"]),
            rel_tol=float(cc["rel_tol"]),
            learning_rate=float(cc["learning_rate"]),
            seed=self.seed if seed is None else seed,
        )

    def encoder_dims(self, n_features: int) -> list[int]:
        cc = self.config["contrastive"]
        return [n_features] + [int(cc["hidden"])] * (int(cc["depth"]) - 1) + [int(cc["embed_dim"])]

    def head_spec(self, seed: int | None = None) -> HeadSpec:
        hc = self.config["heads"]
        return HeadSpec(
            hidden=int(hc["hidden"]),
            depth=int(hc["depth"]),
            epochs=int(hc["epochs"]),
            batch_size=int(hc["batch_size"]),
            learning_rate=float(hc["learning_rate"]),
            weight_decay_sweep=tuple(hc["weight_decay_sweep"]),
            holdout_fraction=float(hc["holdout_fraction"]),
            seed=self.seed if seed is None else seed,
        )

    def supervised_spec(self, seed: int | None = None) -> SupervisedSpec:
        sc = self.config["supervised"]
        return SupervisedSpec(
            hidden=int(sc["hidden"]),
            depth=int(sc["depth"]),
            epochs=int(sc["epochs"]),
            batch_size=int(sc["batch_size"]),
            learning_rate=float(sc["learning_rate"]),
            weight_decay_sweep=tuple(sc["weight_decay_sweep"]),
            holdout_fraction=float(sc["holdout_fraction"]),
            seed=self.seed if seed is None else seed,
        )


# ---------------- label caches ----------------


def ensure_label_caches(ctx: RunContext) -> dict:
    """Build (or reuse) the train/test label caches and return their scores."""
    data = ctx.data()
    out = {}
    for split in ("train", "test"):
        path = ctx.path(f"labels_{split}.jsonl")
        if not path.exists():
            label_cache_build(data["f"], data[split], ctx.oracle_config(), path, ref=data["ref"])
        scores, meta = load_label_cache(path)
        if scores.shape != data[split].features.shape:
            raise RuntimeFailure(
                f"label cache {path} does not match the {split} split shape"
            )
        out[split] = scores
        out[f"{split}_meta"] = meta
    return out


def require_label_caches(ctx: RunContext) -> dict:
    for split in ("train", "test"):
        path = ctx.path(f"labels_{split}.jsonl")
        if not path.exists():
            raise RuntimeFailure(
                f"label cache missing: {path} (run the 'oracle' command first)"
            )
    return ensure_label_caches(ctx)


# ---------------- oracle study (estimator error vs budget) ----------------


def _estimate_with_escalation(method, f, x, ref, budget, seed, n_features):
    """Run one sampled estimator; a singular kernel regression escalates the
    budget (doubling, up to 3 times) per the oracle's error contract."""
    if method == "ps":
        return permutation_sampling(f, x, ref, budget, seed).scores, budget
    if method == "aps":
        eff = budget + (budget % 2)
        return antithetical_permutation_sampling(f, x, ref, eff, seed).scores, eff
    if method == "ks":
        eff = max(budget, n_features + 2)
        for attempt in range(4):
            try:
                return kernel_shap(f, x, ref, budget=eff, seed=seed).scores, eff
            except SingularRegressionError:
                if attempt == 3:
                    raise
                eff *= 2
    raise ConfigError(f"unknown estimator {method!r}")


def cmd_oracle(config: dict) -> Path:
    """Build the label caches and emit the estimator-error table: per-budget
    mean l2 error and seconds per instance for PS/APS/KS against the exact
    oracle."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    data = ctx.data()
    m = data["train"].n_features
    OracleConfig(source="exact").validate(m)  # the error table needs exact ground truth
    ensure_label_caches(ctx)

    sc = config["budget_study"]
    budgets = [int(b) for b in sc["budgets"]]
    n_seeds = int(sc["n_seeds"])
    n_instances = min(int(sc["n_instances"]), data["test"].n_instances)
    X = data["test"].features[:n_instances]
    exact = np.stack([exact_attribution(data["f"], x, data["ref"]).scores for x in X])

    rows = []
    for method in ("ps", "aps", "ks"):
        for budget in budgets:
            errors = np.empty(n_seeds)
            eff_budgets = np.empty(n_seeds)
            elapsed = 0.0
            for s in range(n_seeds):
                i = s % n_instances
                seed = derive_seed(ctx.seed, "budget-study", method, str(budget), str(s))
                t_start = time.perf_counter()
                scores, eff = _estimate_with_escalation(
                    method, data["f"], X[i], data["ref"], budget, seed, m
                )
                elapsed += time.perf_counter() - t_start
                errors[s] = float(np.linalg.norm(scores - exact[i]))
                eff_budgets[s] = eff
            rows.append(
                {
                    "method": method,
                    "budget": budget,
                    "mean_l2_error": float(errors.mean()),
                    "sem_l2_error": float(errors.std(ddof=1) / np.sqrt(n_seeds)) if n_seeds > 1 else 0.0,
                    "mean_effective_budget": float(eff_budgets.mean()),
                    "seconds_per_instance": elapsed / n_seeds,
                    "n_seeds": n_seeds,
                    "seed": ctx.seed,
                    "config_hash": ctx.hash,
                }
            )
    rows.sort(key=lambda r: (r["method"], r["budget"]))
    out = ctx.metrics_dir / "estimator_budget_study.csv"
    write_csv(
        out,
        [
            "method", "budget", "mean_l2_error", "sem_l2_error", "mean_effective_budget",
            "seconds_per_instance", "n_seeds", "seed", "config_hash",
        ],
        rows,
    )
    ctx.record_manifest(
        "oracle",
        ["labels_train.jsonl", "labels_test.jsonl", "metrics/estimator_budget_study.csv"],
        time.perf_counter() - t0,
    )
    return out


# ---------------- encoder training ----------------


def cmd_train(config: dict) -> Path:
    """Contrastive pretraining of the encoder; writes a checkpoint and the
    per-epoch loss log."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    data = ctx.data()
    encoder, log = train_encoder(
        data["train"],
        data["f"],
        data["ref"],
        ctx.augment_config(),
        ctx.contrastive_config(),
        ctx.encoder_dims(data["train"].n_features),
    )
    ckpt = ctx.path("encoder.ckpt")
    nets.save_checkpoint(encoder, ckpt)
    write_csv(
        ctx.path("training_log.csv"),
        ["epoch", "mean_loss", "seconds"],
        [{"epoch": r["epoch"], "mean_loss": r["mean_loss"], "seconds": r["seconds"]} for r in log],
    )
    ctx.record_manifest("train", ["encoder.ckpt", "training_log.csv"], time.perf_counter() - t0)
    return ckpt


def require_encoder(ctx: RunContext) -> nets.FeedForwardNet:
    ckpt = ctx.path("encoder.ckpt")
    if not ckpt.exists():
        raise RuntimeFailure(f"encoder checkpoint missing: {ckpt} (run the 'train' command first)")
    return nets.load_checkpoint(ckpt)


# ---------------- fine-tuning ----------------


def cmd_finetune(config: dict) -> dict:
    """Fine-tune the attribution and ranking heads on the configured label
    fraction; persists checkpoints and the consumed label-subset manifest."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    data = ctx.data()
    labels = require_label_caches(ctx)
    encoder = require_encoder(ctx)

    E_train = embed(encoder, data["train"])
    fraction = float(config["heads"]["fraction"])
    budget = LabelBudget(fraction, seed=derive_seed(ctx.seed, "label-budget"))
    spec = ctx.head_spec(seed=derive_seed(ctx.seed, "heads"))

    mse_head, mse_info = finetune_mse_head(E_train, labels["train"], budget, spec)
    ce_head, ce_info = finetune_ce_head(
        E_train, ranking_label_matrix(labels["train"]), budget, spec
    )
    nets.save_checkpoint(mse_head, ctx.heads_dir / "mse_head.ckpt")
    nets.save_checkpoint(ce_head, ctx.heads_dir / "ce_head.ckpt")
    subset = {
        "fraction": fraction,
        "n_labels": mse_info["n_labels"],
        "train_indices": [int(i) for i in mse_info["train_indices"]],
        "holdout_indices": [int(i) for i in mse_info["holdout_indices"]],
        "mse_weight_decay": mse_info["weight_decay"],
        "seed": ctx.seed,
        "config_hash": ctx.hash,
    }
    with open(ctx.heads_dir / "label_subset.json", "w", encoding="utf-8") as fh:
        json.dump(subset, fh, sort_keys=True, indent=2)
    ctx.record_manifest(
        "finetune",
        ["heads/mse_head.ckpt", "heads/ce_head.ckpt", "heads/label_subset.json"],
        time.perf_counter() - t0,
    )
    return {"mse": mse_info, "ce": ce_info}


# ---------------- evaluation ----------------


def cmd_eval(config: dict) -> Path:
    """Test-split metrics for the trained pipeline: attribution error of the
    MSE head, ranking accuracy of both heads, and explanation throughput."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    data = ctx.data()
    labels = require_label_caches(ctx)
    encoder = require_encoder(ctx)
    for name in ("mse_head.ckpt", "ce_head.ckpt"):
        if not (ctx.heads_dir / name).exists():
            raise RuntimeFailure(f"head checkpoint missing: {ctx.heads_dir / name} (run 'finetune' first)")
    mse_head = nets.load_checkpoint(ctx.heads_dir / "mse_head.ckpt")
    ce_head = nets.load_checkpoint(ctx.heads_dir / "ce_head.ckpt")

    X_test = data["test"].features
    truth = labels["test"]
    truth_ranks = ranking_label_matrix(truth)

    att = predict_attribution(encoder, mse_head, X_test, f=data["f"], ref=data["ref"])
    l2 = l2_error_rows(att, truth)
    rank_from_mse = rank_acc_rows(ranking_label_matrix(att), truth_ranks)
    rank_from_ce = rank_acc_rows(predict_ranking(encoder, ce_head, X_test), truth_ranks)

    def ce_explainer(Z):
        return predict_ranking(encoder, ce_head, Z)

    ips, _ = throughput(ce_explainer, X_test, repetitions=int(config["frontier"]["n_throughput_repetitions"]))

    rows = [
        {"metric": "l2-error", "method": "contrastive-mse", "mean": float(l2.mean()),
         "stderr": float(l2.std(ddof=1) / np.sqrt(l2.size)), "seed": ctx.seed, "config_hash": ctx.hash},
        {"metric": "rank-acc", "method": "contrastive-mse", "mean": float(rank_from_mse.mean()),
         "stderr": float(rank_from_mse.std(ddof=1) / np.sqrt(l2.size)), "seed": ctx.seed, "config_hash": ctx.hash},
        {"metric": "rank-acc", "method": "contrastive-ce", "mean": float(rank_from_ce.mean()),
         "stderr": float(rank_from_ce.std(ddof=1) / np.sqrt(l2.size)), "seed": ctx.seed, "config_hash": ctx.hash},
        {"metric": "throughput", "method": "contrastive-ce", "mean": float(ips),
         "stderr": 0.0, "seed": ctx.seed, "config_hash": ctx.hash},
    ]
    out = ctx.metrics_dir / "eval.csv"
    write_csv(out, ["metric", "method", "mean", "stderr", "seed", "config_hash"], rows)
    ctx.record_manifest("eval", ["metrics/eval.csv"], time.perf_counter() - t0)
    return out


# ---------------- shared per-seed pipeline ----------------


def _train_pipeline_for_seed(ctx: RunContext, data, labels, seed_tag: str, selector: str):
    """Encoder pretraining for one study seed. The batching/mask/init streams
    derive from the study seed so paired arms (different selector, same seed)
    consume identical negatives and candidate masks."""
    seed = derive_seed(ctx.seed, seed_tag)
    aug = ctx.augment_config(selector=selector, seed=seed)
    cfg = ctx.contrastive_config(seed=seed)
    encoder, _ = train_encoder(
        data["train"], data["f"], data["ref"], aug, cfg,
        ctx.encoder_dims(data["train"].n_features),
    )
    return encoder, seed


def _evaluate_methods_at_fraction(ctx, data, labels, encoder, seed, fraction):
    """Test metrics for the three methods at one label fraction."""
    E_train = embed(encoder, data["train"])
    X_test = data["test"].features
    truth = labels["test"]
    truth_ranks = ranking_label_matrix(truth)
    budget = LabelBudget(fraction, seed=derive_seed(seed, "label-budget"))
    head_spec = ctx.head_spec(seed=derive_seed(seed, "heads"))
    sup_spec = ctx.supervised_spec(seed=derive_seed(seed, "supervised"))
    rank_labels = ranking_label_matrix(labels["train"])

    mse_head, _ = finetune_mse_head(E_train, labels["train"], budget, head_spec)
    ce_head, _ = finetune_ce_head(E_train, rank_labels, budget, head_spec)
    sup_mse, _ = train_supervised_explainer(
        data["train"].features, labels["train"], budget, sup_spec, task="mse"
    )
    sup_ce, _ = train_supervised_explainer(
        data["train"].features, rank_labels, budget, sup_spec, task="ce"
    )

    att_c = predict_attribution(encoder, mse_head, X_test, f=data["f"], ref=data["ref"])
    att_s = supervised_predict_attribution(sup_mse, X_test, f=data["f"], ref=data["ref"])
    results = {
        "contrastive-mse": {
            "l2_error": float(l2_error_rows(att_c, truth).mean()),
            "rank_acc": float(rank_acc_rows(ranking_label_matrix(att_c), truth_ranks).mean()),
        },
        "contrastive-ce": {
            "l2_error": float("nan"),
            "rank_acc": float(
                rank_acc_rows(predict_ranking(encoder, ce_head, X_test), truth_ranks).mean()
            ),
        },
        "supervised-rtx": {
            "l2_error": float(l2_error_rows(att_s, truth).mean()),
            "rank_acc": float(
                rank_acc_rows(supervised_predict_ranking(sup_ce, X_test), truth_ranks).mean()
            ),
        },
    }
    return results


# ---------------- label-ratio sweep ----------------


def cmd_sweep_labels(config: dict, fractions=None) -> Path:
    """Label-efficiency study: test error and ranking accuracy per method and
    label fraction over the study seeds. Completed cells found in an existing
    table are reused."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    fractions = [float(f) for f in (fractions or config["sweep"]["fractions"])]
    for f in fractions:
        if not (0.0 < f <= 1.0):
            raise ConfigError(f"label fraction {f} outside (0, 1]")
    n_seeds = int(config["sweep"]["n_seeds"])
    data = ctx.data()
    labels = ensure_label_caches(ctx)

    out = ctx.metrics_dir / "label_sweep.csv"
    done = {}
    if out.exists():
        for row in read_csv_rows(out):
            done[(row["method"], float(row["fraction"]), int(row["study_seed"]))] = row

    rows = []
    for s in range(n_seeds):
        todo = [
            fr for fr in fractions
            if any((meth, fr, s) not in done
                   for meth in ("contrastive-mse", "contrastive-ce", "supervised-rtx"))
        ]
        if todo:
            encoder, seed = _train_pipeline_for_seed(
                ctx, data, labels, f"sweep-{s}", config["augment"]["selector"]
            )
        for fr in fractions:
            missing = [
                meth for meth in ("contrastive-mse", "contrastive-ce", "supervised-rtx")
                if (meth, fr, s) not in done
            ]
            if not missing:
                for meth in ("contrastive-mse", "contrastive-ce", "supervised-rtx"):
                    rows.append(done[(meth, fr, s)])
                continue
            results = _evaluate_methods_at_fraction(ctx, data, labels, encoder, seed, fr)
            for meth, vals in results.items():
                rows.append(
                    {
                        "method": meth,
                        "fraction": fr,
                        "study_seed": s,
                        "l2_error": vals["l2_error"],
                        "rank_acc": vals["rank_acc"],
                        "seed": ctx.seed,
                        "config_hash": ctx.hash,
                    }
                )
    rows.sort(key=lambda r: (str(r["method"]), float(r["fraction"]), int(r["study_seed"])))
    write_csv(
        out,
        ["method", "fraction", "study_seed", "l2_error", "rank_acc", "seed", "config_hash"],
        rows,
    )
    ctx.record_manifest("sweep-labels", ["metrics/label_sweep.csv"], time.perf_counter() - t0)
    return out


# ---------------- positive-selector ablation ----------------


def cmd_ablation(config: dict) -> Path:
    """Same pipeline three times per seed, varying only the positive selector;
    arms share the seed-derived streams so negatives and candidate masks are
    paired."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    ac = config["ablation"]
    fraction = float(ac["fraction"])
    n_seeds = int(ac["n_seeds"])
    selectors = list(ac["selectors"])
    data = ctx.data()
    labels = ensure_label_caches(ctx)

    out = ctx.metrics_dir / "ablation.csv"
    done = {}
    if out.exists():
        for row in read_csv_rows(out):
            done[(row["selector"], int(row["study_seed"]))] = row

    rows = []
    for s in range(n_seeds):
        for selector in selectors:
            if (selector, s) in done:
                rows.append(done[(selector, s)])
                continue
            encoder, seed = _train_pipeline_for_seed(ctx, data, labels, f"ablation-{s}", selector)
            results = _evaluate_methods_at_fraction(ctx, data, labels, encoder, seed, fraction)
            rows.append(
                {
                    "selector": selector,
                    "study_seed": s,
                    "fraction": fraction,
                    "rank_acc": results["contrastive-ce"]["rank_acc"],
                    "l2_error": results["contrastive-mse"]["l2_error"],
                    "mse_rank_acc": results["contrastive-mse"]["rank_acc"],
                    "seed": ctx.seed,
                    "config_hash": ctx.hash,
                }
            )
    rows.sort(key=lambda r: (str(r["selector"]), int(r["study_seed"])))
    write_csv(
        out,
        ["selector", "study_seed", "fraction", "rank_acc", "l2_error", "mse_rank_acc", "seed", "config_hash"],
        rows,
    )
    ctx.record_manifest("ablation", ["metrics/ablation.csv"], time.perf_counter() - t0)
    return out


# ---------------- throughput-vs-accuracy frontier ----------------


def cmd_frontier(config: dict) -> Path:
    """One-feed-forward explainer against sampled oracles across budgets:
    (method, budget, throughput, rank accuracy, l2 error) rows."""
    ctx = RunContext(config).prepare()
    t0 = time.perf_counter()
    data = ctx.data()
    labels = require_label_caches(ctx)
    encoder = require_encoder(ctx)
    for name in ("mse_head.ckpt", "ce_head.ckpt"):
        if not (ctx.heads_dir / name).exists():
            raise RuntimeFailure(f"head checkpoint missing: {ctx.heads_dir / name} (run 'finetune' first)")
    mse_head = nets.load_checkpoint(ctx.heads_dir / "mse_head.ckpt")
    ce_head = nets.load_checkpoint(ctx.heads_dir / "ce_head.ckpt")

    X_test = data["test"].features
    m = X_test.shape[1]
    truth = labels["test"]
    truth_ranks = ranking_label_matrix(truth)
    reps = int(config["frontier"]["repetitions"])
    rows = []

    def add_row(method, budget, ips, ranks, att):
        rows.append(
            {
                "method": method,
                "budget": budget,
                "throughput": float(ips),
                "rank_acc": float(rank_acc_rows(ranks, truth_ranks).mean()),
                "l2_error": float(l2_error_rows(att, truth).mean()) if att is not None else float("nan"),
                "seed": ctx.seed,
                "config_hash": ctx.hash,
            }
        )

    # amortized explainers: a single batched pass each
    def ce_explainer(Z):
        return predict_ranking(encoder, ce_head, Z)

    def mse_explainer(Z):
        return predict_attribution(encoder, mse_head, Z, f=data["f"], ref=data["ref"])

    ips_ce, _ = throughput(ce_explainer, X_test, repetitions=reps)
    add_row("contrastive-ce", 0, ips_ce, ce_explainer(X_test), None)
    ips_mse, _ = throughput(mse_explainer, X_test, repetitions=reps)
    att_mse = mse_explainer(X_test)
    add_row("contrastive-mse", 0, ips_mse, ranking_label_matrix(att_mse), att_mse)

    # sampled oracles: the explanation pass runs the estimator per instance
    def run_sampled(method, budget):
        def pass_once():
            out = np.empty_like(truth)
            for i, x in enumerate(X_test):
                seed = derive_seed(ctx.seed, "frontier", method, str(budget), str(i))
                out[i], _ = _estimate_with_escalation(
                    method, data["f"], x, data["ref"], budget, seed, m
                )
            return out

        t_start = time.perf_counter()
        att = pass_once()
        elapsed = time.perf_counter() - t_start
        return att, X_test.shape[0] / elapsed

    for budget in sorted(int(b) for b in config["frontier"]["ps_budgets"]):
        att, ips = run_sampled("ps", budget)
        add_row("ps", budget, ips, ranking_label_matrix(att), att)
    for budget in sorted(int(b) for b in config["frontier"]["ks_budgets"]):
        att, ips = run_sampled("ks", budget)
        add_row("ks", budget, ips, ranking_label_matrix(att), att)

    rows.sort(key=lambda r: (str(r["method"]), int(r["budget"])))
    out = ctx.metrics_dir / "frontier.csv"
    write_csv(
        out,
        ["method", "budget", "throughput", "rank_acc", "l2_error", "seed", "config_hash"],
        rows,
    )
    ctx.record_manifest("frontier", ["metrics/frontier.csv"], time.perf_counter() - t0)
    return out
