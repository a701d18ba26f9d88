"""Feature-gradient channel pruning on a small numpy autodiff engine."""
from .errors import (CheckpointError, ConfigError, DataError, FGPError, NumericError, PlanError,
                     ShapeError, TapeError)
from .models import Model, ModelSpec, ModelState, build, forward, init_model, predict
from .tensor import Tape, Tensor

__version__ = "0.1.0"
