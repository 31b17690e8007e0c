"""LS convolution networks on a self-contained numpy autodiff core.

Attribute access is lazy (PEP 562) so that importing the package costs
nothing until a symbol is touched; the command line relies on this to
set BLAS threading environment variables before numpy loads.
"""

import importlib

__version__ = "1.0.0"

_EXPORTS = {
    # tensor core
    "Tensor": "tensor",
    "ConvParams": "tensor",
    "BnState": "tensor",
    "conv2d": "tensor",
    "batch_norm": "tensor",
    "relu": "tensor",
    "sigmoid": "tensor",
    "softmax_lastdim": "tensor",
    "global_avg_pool": "tensor",
    "matmul": "tensor",
    "cross_entropy_logits": "tensor",
    "grad_map": "tensor",
    # LS convolution
    "LsConvConfig": "lsconv",
    "ska_forward": "lsconv",
    "ska_forward_naive": "lsconv",
    "lkp_forward": "lsconv",
    "ls_conv_forward": "lsconv",
    "ls_conv_macs": "lsconv",
    "ls_conv_closed_form_macs": "lsconv",
    "MacReport": "lsconv",
    # model assembly
    "ModelSpec": "model",
    "variant": "model",
    "ablate": "model",
    "build_model": "model",
    "count_params": "model",
    "count_macs": "model",
    "forward_features": "model",
    "forward_logits": "model",
    "forward_classify": "model",
    "save_weights": "model",
    "load_weights": "model",
    "ParamStore": "model",
    "VARIANTS": "model",
    "BUDGETS": "model",
    # data and training
    "Dataset": "data",
    "make_blobs10": "data",
    "save_dataset": "data",
    "load_dataset": "data",
    "normalize_images": "data",
    "TrainConfig": "train",
    "fit": "train",
    "evaluate": "train",
    "gradcheck_model": "train",
    # analyses
    "agg_participation": "analyze",
    "model_erf": "analyze",
    "support_count": "analyze",
    "write_pgm": "analyze",
    "read_pgm": "analyze",
    # errors
    "ConfigurationError": "errors",
    "FormatError": "errors",
    "IncompatibilityError": "errors",
    "DataError": "errors",
    "NumericError": "errors",
    "DivergenceError": "errors",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    value = getattr(importlib.import_module(f".{module}", __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
