from . import functional
from .functional import ShapeError
from .gradcheck import GradcheckReport, NonFiniteError, gradcheck
from .tensor import Tensor, no_grad, tape

__all__ = [
    "Tensor",
    "no_grad",
    "tape",
    "functional",
    "gradcheck",
    "GradcheckReport",
    "NonFiniteError",
    "ShapeError",
]
