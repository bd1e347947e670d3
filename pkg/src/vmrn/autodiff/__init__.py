from vmrn.autodiff.tensor import ShapeError, Tensor, as_tensor, parameter
from vmrn.autodiff.ops import InvalidInputError
from vmrn.autodiff.optim import SgdConfig, sgd_step
from vmrn.autodiff.gradcheck import grad_check

__all__ = [
    "Tensor",
    "ShapeError",
    "InvalidInputError",
    "as_tensor",
    "parameter",
    "SgdConfig",
    "sgd_step",
    "grad_check",
]
