"""harmonykb: knowledge-base completion with compositional triplet embeddings
scored by a learned quadratic harmony function."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .composition import (
    ModelKind,
    compose,
    compose_backprop,
    hidden_dim,
    score_baseline_distmult,
    score_baseline_hole,
)
from .data import (
    DatasetSplits,
    KnownTripletIndex,
    Triplet,
    Vocab,
    build_filter_index,
    generate_synthetic_kb,
    load_tsv,
    write_tsv,
)
from .evaluation import (
    Query,
    RankingMetrics,
    evaluate_split,
    neighborhood_density_study,
    neighbors,
    optimization_effect_study,
    rank_query,
    spearman,
    token_embedding,
    type_embedding,
)
from .fourier import circ_correlate, circ_correlate_naive
from .harmony import (
    HarmonyParams,
    constrain_params,
    harmony,
    harmony_type,
    integrate_dynamics,
    log_partition,
    mu,
    score,
    score_gradients,
)
from .linalg import SpectralBoundError, max_eigenvalue, solve_neg_definite
from .model import Model, triplet_scores, triplet_type_scores
from .training import (
    TrainConfig,
    adam_step,
    init_model,
    loss_linear_margin,
    loss_log_softmax,
    normalize_embeddings,
    sample_negatives,
    train,
)

__version__ = "0.1.0"
