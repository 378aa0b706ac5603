"""Post-hoc open-set detection toolkit.

Consumes serialized per-detection outputs of any object detector (boxes,
class logits, embeddings), fits density and calibration models, trains a
small fusion classifier, and labels every detection in-distribution,
out-of-distribution or background, with full evaluation support.
"""

from .calibration import Temperature, apply_temperature, fit_temperature
from .density import (
    ClassDensityModel,
    DensityEvaluator,
    fit_class_gaussian,
    fit_density_model,
    fit_gmm_em,
    gmm_log_likelihoods,
    gmm_log_likelihoods_batch,
)
from .errors import DataError, InfeasibleError, OsdError
from .features import (
    FeatureConfig,
    assemble_features,
    assemble_features_batch,
    energy_density,
    entropy,
    gmm_density,
    gmm_entropy,
    prune,
    score,
    sigmoid,
)
from .fusion import (
    DecisionThresholds,
    FusionModel,
    MlpParameters,
    TrainingConfig,
    classify_records,
    forward,
    posterior,
    train_mlp,
    tune_thresholds,
)
from .interchange import (
    ClassVocabulary,
    DatasetBundle,
    DetectionRecord,
    GroundTruthObject,
    parse_detections,
    parse_ground_truth,
    parse_vocabulary,
    read_model,
    write_model,
)
from .matching import (
    COLLAPSED_ORDER,
    LabeledDetection,
    MatchLabel,
    iou,
    label_detections,
    solve_assignment,
)
from .metrics import (
    EvalReport,
    auroc,
    auroc_bd,
    average_precision,
    macro_average,
    macro_pairwise_auroc,
    measure_throughput,
    roc_curve,
    tpr_at_osr,
)
from .pipeline import PipelineConfig, SplitPlan, build_fusion_dataset, run_pipeline
from .synth import SynthConfig, generate_synthetic, make_synth_config

__version__ = "0.1.0"
