"""Cluster-discrimination representation learning at desk scale.

Pipeline pieces: embedding storage and fusion (`data`), k-means pseudo
labeling (`clustering`), a margin softmax with random class and feature
selection plus its baselines (`losses`), joint encoder/prototype training
(`training`), retrieval metrics and compactness baselines (`evaluation`),
grid experiments (`ablation`), gradient verification (`gradcheck`), and a
CLI front door (`cli`).
"""

__version__ = "0.1.0"

from .ablation import AblationConfig, AblationRow, run_ablation
from .clustering import ClusterResult, KMeansConfig, assign, kmeans_fit, objective
from .data import (
    EmbeddingSet,
    SyntheticSpec,
    ensemble_features,
    load_embeddings,
    save_embeddings,
    synth_conflict_dataset,
)
from .evaluation import (
    PcaModel,
    RetrievalReport,
    linear_probe,
    map_at_100,
    pca_fit,
    pca_project,
    pca_reduce,
    recall_at_k,
    retrieval_report,
    truncate_dims,
)
from .gradcheck import check_selection_gradients, finite_difference, max_relative_error
from .losses import (
    LossConfig,
    LossOutput,
    NceOutput,
    PrototypeMatrix,
    SelectionPlan,
    apply_feature_dropout,
    dropout_backward,
    dropout_forward,
    full_softmax_loss,
    instance_nce_loss,
    make_selection_plan,
    sample_classes,
    sample_feature_mask,
    selection_backward,
    selection_forward,
)
from .training import (
    LinearEncoder,
    TrainConfig,
    Trainer,
    TrainResult,
    encode,
    init_prototypes,
    prototypes_from_labels,
    train,
)

__all__ = [
    "AblationConfig",
    "AblationRow",
    "ClusterResult",
    "EmbeddingSet",
    "KMeansConfig",
    "LinearEncoder",
    "LossConfig",
    "LossOutput",
    "NceOutput",
    "PcaModel",
    "PrototypeMatrix",
    "RetrievalReport",
    "SelectionPlan",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "Trainer",
    "apply_feature_dropout",
    "assign",
    "check_selection_gradients",
    "dropout_backward",
    "dropout_forward",
    "encode",
    "ensemble_features",
    "finite_difference",
    "full_softmax_loss",
    "init_prototypes",
    "instance_nce_loss",
    "kmeans_fit",
    "linear_probe",
    "load_embeddings",
    "make_selection_plan",
    "map_at_100",
    "max_relative_error",
    "objective",
    "pca_fit",
    "pca_project",
    "pca_reduce",
    "prototypes_from_labels",
    "recall_at_k",
    "retrieval_report",
    "run_ablation",
    "sample_classes",
    "sample_feature_mask",
    "save_embeddings",
    "selection_backward",
    "selection_forward",
    "synth_conflict_dataset",
    "train",
    "truncate_dims",
]
