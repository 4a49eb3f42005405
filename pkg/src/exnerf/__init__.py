"""Expression-conditioned deformable radiance fields with a silhouette ray prior."""
from .errors import (InvalidArgumentError, StateError, TrainingDivergenceError,
                     UnsupportedFormatError)

__version__ = "0.1.0"
