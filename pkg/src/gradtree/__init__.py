"""Gradient-trained hard oblique decision trees.

End-to-end gradient learning of trees that route each example down exactly
one root-to-leaf path: quantized forward pass, straight-through/softmax
surrogate backward pass, fully supervised minibatch training, online
training from black-box loss feedback, and bagged forests.
"""

from .backprop import GradientSet, SoftPathScores, backprop, backprop_batch
from .bandit import (
    BanditConfig,
    DatasetOracle,
    LossOracle,
    RegretTrace,
    estimate_grad_classification,
    estimate_grad_one_point,
    estimate_grad_two_point,
    make_loss,
    sample_arm,
    train_bandit,
)
from .batch import (
    OverparamSpec,
    TrainConfig,
    cosine_lr,
    init_params,
    loss_and_grad,
    optimizer_step,
    regularizer_grad,
    train_batch,
)
from .data import (
    Dataset,
    NormStats,
    OracleTreeSpec,
    accuracy,
    apply_normalization,
    fit_apply_normalization,
    fit_normalization,
    gen_oracle_tree,
    load_csv,
    load_feature_csv,
    rmse,
    split,
)
from .errors import ConfigError, DataError, NumericError
from .forest import (
    ForestModel,
    bootstrap_sample,
    predict_forest,
    predict_forest_batch,
    train_forest,
)
from .model_io import ModelFile, load_model, save_model
from .trees import (
    ObliqueTree,
    PathTables,
    PruneReport,
    PrunedTree,
    TreeParams,
    build_path_tables,
    collapse,
    decision_activations,
    forward_hard,
    forward_hard_batch,
    path_indicator_matrix,
    path_indicator_product,
    path_indicator_sum,
    prune_unreached,
)

__version__ = "0.1.0"
