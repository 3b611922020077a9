from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradcheckReport, gradcheck
from .optim import OptimState, adamw_step, cosine_lr
from .params import GROUPS, Param, ParamSet
from .tape import (AutogradStage, CompositionError, Identity, NumericFailure, RunContext,
                   ShapeError, Stage, TapeResult, backward_tape, forward_backward, run_forward)

__all__ = [
    "AutogradStage", "CompositionError", "GROUPS", "GradcheckReport", "Identity", "NumericFailure",
    "OptimState", "Param", "ParamSet", "RunContext", "ShapeError", "Stage", "TapeResult",
    "adamw_step", "backward_tape", "cosine_lr", "forward_backward", "gradcheck", "load_checkpoint",
    "run_forward", "save_checkpoint",
]
