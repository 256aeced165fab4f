"""Task-incremental prompt learning on frozen dual encoders.

A frozen pair of toy transformer towers embeds token sequences into a shared
space; per-task prompt pools adapt them through gated cross-attention
residuals. Task identity at inference comes from cosine routing against
frozen class-caption prototypes, prompt strength from a calibrated
multi-prototype confidence score, and per-layer Hard Gumbel gates open or
close prompting on both towers together.
"""

from .benchmark import (
    MetricSummary,
    SyntheticDomain,
    TaskData,
    apply_order,
    compute_metrics,
    generate_benchmark,
    new_accuracy_matrix,
    subsample_shots,
)
from .cli import ExperimentConfig, RunRecord, ablation_suite, run_experiment
from .confidence import (
    LloydKMeans,
    TaskConfidenceModel,
    TaskThresholds,
    calibrate_thresholds,
    fit_kmeans,
    joint_confidence,
    prompting_weight,
    task_confidence,
    textual_confidence,
    visual_confidence,
)
from .encoder import (
    EncoderConfig,
    FrozenBackbone,
    PromptPool,
    class_token_sequence,
    prompt_attention,
)
from .gating import (
    GateBank,
    GateDecision,
    batch_condition,
    count_text_gate_params,
    count_trainable_params,
    gate_forward,
)
from .numerics import (
    DegenerateInputError,
    cosine,
    l2_normalize,
    make_rng,
    percentile_nearest_rank,
    softmax,
)
from .routing import (
    TextPrototypeRouter,
    VisualGaussianRouter,
    VisualMeanRouter,
    load_router,
    save_router,
)
from .trainer import (
    TaskIncrementalPrompter,
    TaskState,
    TrainConfig,
    build_gradcheck_problem,
    finite_difference_gradcheck,
    infer,
    train_task,
)

__version__ = "0.1.0"
