from .data import (SyntheticCorpus, format_dialogue, format_multitask_example, parse_box,
                   quantize, serialize_box)
from .optim import NonFiniteGradientError, OptimizerState, TrainConfig, adamw_step, clip_gradients
from .stages import (MissingCheckpointError, NonFiniteLossError, StageReport, group_hashes,
                     prepare_model, run_stage)
