"""Momentum-queue contrastive image-text pretraining with zero-shot
multi-label chest X-ray evaluation, at desk scale.

The public surface is re-exported here; modules stay importable directly for
anything narrower.
"""

from .core import (
    NIH_PATHOLOGIES,
    NO_FINDING,
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    Embedding,
    ExclusivityViolationError,
    LabelVector,
    PathologySet,
    Sample,
    UnknownLabelError,
    l2_normalize,
    make_label_vector,
    rng_stream,
)
from .data import (
    AugmentConfig,
    Manifest,
    ManifestRow,
    SplitSpec,
    augment_views,
    generate_synthetic_dataset,
    linear_probe_auc,
    load_dataset,
    load_images,
    load_manifest,
    preprocess,
    split,
    write_manifest,
)
from .encoders import (
    EncoderPair,
    ImageArchitecture,
    ImageEncoder,
    TextArchitecture,
    TextEncoder,
    Vocabulary,
    build_vocabulary,
    encode_image,
    encode_text,
    make_pair,
    momentum_update,
    tokenize,
    tokenize_batch,
)
from .evaluation import (
    EvaluationResult,
    UndefinedMetricError,
    compare,
    evaluate,
    load_reference_table,
    roc_auc,
    roc_curve_points,
)
from .inference import ZeroShotClassifier, ZeroShotResult, pair_probability
from .losses import (
    LossBreakdown,
    LossConfig,
    clip_contrastive,
    composite_loss,
    info_nce,
    momentum_consistency,
)
from .moco_queue import KeyQueue
from .reports import (
    TemplateEntry,
    TemplateTable,
    default_template_table,
    load_template_table,
    prompt_pair,
    synthesize_report,
)
from .trainer import (
    BatchAblationResult,
    LossAblationResult,
    PreparedData,
    TrainConfig,
    TrainResult,
    TrainState,
    evaluate_zero_shot,
    init_state,
    load_state,
    prepare,
    run_batch_ablation,
    run_loss_ablation,
    save_state,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
