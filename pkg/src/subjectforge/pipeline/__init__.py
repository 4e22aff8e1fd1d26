from .config import ConfigError, TrainConfig, load_config, parse_config
from .checkpoint import (CheckpointError, load_checkpoint, save_checkpoint)
from .metrics import MetricsWriter, read_metrics, strip_wall_time
from .optim import AdamW, lr_at
from .ppm import PpmError, read_ppm, read_sidecar, write_ppm, write_sidecar
from .prompts import (CAPTION_GUIDANCE, SUBJECT_GUIDANCE, PromptError,
                      PromptSpec, parse_prompt)
from .evaluate import (alignment_residual, perplexity, retrieval_top1,
                       score_entity, score_fidelity)
from .stages import (NumericalAbort, StageError, build_condition,
                     checkpoint_path, generate_dataset, load_module,
                     run_stage, sample_to_file)

__all__ = [
    "ConfigError", "TrainConfig", "load_config", "parse_config",
    "CheckpointError", "load_checkpoint", "save_checkpoint",
    "MetricsWriter", "read_metrics", "strip_wall_time",
    "AdamW", "lr_at",
    "PpmError", "read_ppm", "read_sidecar", "write_ppm", "write_sidecar",
    "CAPTION_GUIDANCE", "SUBJECT_GUIDANCE", "PromptError", "PromptSpec",
    "parse_prompt",
    "alignment_residual", "perplexity", "retrieval_top1", "score_entity",
    "score_fidelity",
    "NumericalAbort", "StageError", "build_condition", "checkpoint_path",
    "generate_dataset", "load_module", "run_stage", "sample_to_file",
]
