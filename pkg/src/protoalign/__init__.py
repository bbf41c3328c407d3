"""Few-shot image classification with visual-semantic prototype alignment.

A two-stage pipeline (supervised pretraining, then episodic meta-learning
with a cosine-softmax prototype classifier) plus an auxiliary contrastive
loss that pulls each episode's visual class prototypes toward frozen
semantic prototypes built from per-class text descriptions.
"""

from .data import (
    Dataset,
    DatasetSplit,
    DescriptionCorpus,
    LabeledExample,
    SynthConfig,
    load_descriptions,
    load_manifest,
    synth_generate,
    synth_latent_info,
    write_descriptions,
    write_manifest,
)
from .encoders import (
    EncoderConfig,
    SemanticEncoder,
    VisualEncoder,
    init_visual_encoder,
    semantic_encode,
    visual_encode,
)
from .episodes import Episode, episode_at, episode_stream, sample_episode
from .evaluation import (
    ComparisonTable,
    EvalReport,
    EvalSpec,
    compare_conditions,
    evaluate,
    evaluate_spec,
)
from .objectives import (
    LossBreakdown,
    ObjectiveConfig,
    PrototypeSet,
    combined_loss,
    cosine_similarity,
    cross_entropy,
    query_class_probabilities,
    semantic_prototype,
    visual_prototype,
    vs_alignment_loss,
)
from .training import (
    Stage1Config,
    Stage2Config,
    TrainConfig,
    TrainState,
    load_checkpoint,
    save_checkpoint,
    train_classification_stage,
    train_meta_stage,
)

__version__ = "0.1.0"
