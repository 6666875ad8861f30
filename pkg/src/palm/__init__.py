"""Prototypical learning with a mixture of hyperspherical prototypes.

A numpy library for training compact hyperspherical embeddings against a
class-conditional mixture of unit-norm prototypes (balanced Sinkhorn
assignment, EMA prototype updates, hand-derived gradients) and scoring
out-of-distribution samples by distance metrics.
"""

from .assignment import (AssignmentMatrix, WeightTable, build_weight_table,
                         hard_assign, prune_topk, sinkhorn_assign)
from .encoder import (MlpModel, OptimizerState, backward, cosine_lr, forward,
                      init_model, init_optimizer, sgd_step)
from .errors import (DegeneratePrototype, DegenerateRange, DegenerateVector,
                     EmptyClass, InsufficientData, InternalError,
                     InvalidConfiguration, InvalidInput, NumericalError,
                     PalmError, SingularCovariance, SpecInfeasible)
from .geometry import (EmbeddingBatch, SyntheticSpec, VmfParams, gen_synthetic,
                       normalize, normalize_jacobian, normalize_rows,
                       sample_vmf)
from .losses import (LossOutput, class_posterior, mle_loss, palm_loss,
                     proto_contrast_loss, unsup_swapped_loss)
from .metrics import (EvalReport, auroc, fpr_at_tpr, make_report, overlap_area,
                      overlap_histograms, report_from_json)
from .prototypes import (EmaPathway, PrototypeBank, detach, ema_update,
                         init_uniform)
from .scoring import (GaussianFit, ScoreSeries, compactness, far_id_fraction,
                      fit_gaussian, knn_score, mahalanobis_score,
                      posterior_score)
from .trainer import (Checkpoint, TrainConfig, config_from_dict, train,
                      train_step, train_unsupervised_step)

__version__ = "0.1.0"
