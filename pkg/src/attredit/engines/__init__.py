"""Global (fine-tuning, token learning) and local (mask-guided) editing."""

from .backbone import Backbone, NoiseSchedule, ToyBackbone, parameter_checksum
from .editing import (
    DegenerateMaskWarning,
    LocalEditResult,
    PromptMaskMismatchWarning,
    edit_local,
    generate_global,
    reconstruct,
)
from .training import (
    RegularizationSet,
    SubjectSet,
    TokenEmbedding,
    TrainConfig,
    TrainRun,
    attach_embedding,
    build_regularization_set,
    finetune_global,
    learn_token_embedding,
)
