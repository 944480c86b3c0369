from .autodiff import Tensor, concat, no_grad, sigmoid, softmax, stack, where
from .params import ParamStore, grad_check
from .rng import SeededRng, stream_id
from .svd import svd_complex

__all__ = [
    "ParamStore",
    "SeededRng",
    "Tensor",
    "concat",
    "grad_check",
    "no_grad",
    "sigmoid",
    "softmax",
    "stack",
    "stream_id",
    "svd_complex",
    "where",
]
