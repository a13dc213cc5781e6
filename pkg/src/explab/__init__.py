"""explab: a desk-scale laboratory for real-time feature-attribution
explainers on tabular data.

Pipeline: mask-based attribution oracles generate ground truth; an encoder
pretrains contrastively on masked positives; small heads fine-tune on a
budgeted slice of labels; metrics and an experiment CLI reproduce the
accuracy/throughput and label-efficiency studies.
"""

__version__ = "0.1.0"

from .augment import AugmentConfig, PositivePair, alignment_bound_check, select_positive, synth_positive_set
from .contrastive import ContrastiveConfig, batch_infonce, embed, infonce_loss, train_encoder
from .data import (
    DataError,
    ReferenceVector,
    SyntheticModelSpec,
    TabularDataset,
    apply_mask,
    build_model,
    compute_reference,
    generate_synthetic,
    load_csv,
)
from .heads import (
    HeadSpec,
    LabelBudget,
    RankingVector,
    SupervisedSpec,
    finetune_ce_head,
    finetune_mse_head,
    make_ranking_labels,
    predict_attribution,
    predict_ranking,
    train_supervised_explainer,
)
from .metrics import (
    BoundDiagnostics,
    MetricReport,
    delta_log_odds,
    error_bound_diagnostics,
    inclusion_exclusion_curves,
    l2_error,
    log_odds,
    rank_acc,
    throughput,
)
from .net import (
    FeedForwardNet,
    LipschitzEstimate,
    OptimizerState,
    backward,
    forward,
    init_net,
    lipschitz_upper_bound,
    load_checkpoint,
    optimizer_step,
    save_checkpoint,
)
from .oracle import (
    AttributionVector,
    OracleConfig,
    SingularRegressionError,
    antithetical_permutation_sampling,
    efficient_normalize,
    exact_attribution,
    kernel_shap,
    label_cache_build,
    load_label_cache,
    permutation_sampling,
)
