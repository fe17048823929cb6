"""Implicit-feedback ALS recommender with exact unlearning and privacy auditing."""

from .als import (
    AlsTrainer,
    ConfidencePolicy,
    FactorModel,
    Hyperparams,
    als_loss,
    confidence_of,
    full_objective,
    load_model,
    predict,
    save_model,
    score_coords,
    solve_row_cg,
    solve_row_direct,
    train_als,
)
from .audit import (
    MiDataset,
    VulnerabilityRecord,
    audit_cell,
    audit_sweep,
    build_mi_dataset,
    mi_accuracy,
    vulnerability_denoised,
    vulnerability_naive,
)
from .data import (
    DataSplit,
    InteractionMatrix,
    ParseError,
    RatingRecord,
    RemovalSet,
    SyntheticInstance,
    binarize,
    generate_synthetic,
    parse_movielens,
    sample_removal,
    split_holdout,
)
from .evaluation import (
    CurvePoint,
    EvalSet,
    auc_score,
    build_eval_set,
    convergence_sweep,
    evaluate_model,
    sample_negatives,
)
from .unlearn import (
    DowndateWorkspace,
    PassDiagnostics,
    UnlearnRequest,
    apply_deletion,
    compute_user_inverses,
    retrain_from_scratch,
    sherman_morrison_downdate,
    untrain_als,
    untrain_loss,
    untrain_pass_downdate,
)

__version__ = "0.1.0"
