"""Kernel backend selection.

The forward/backward kernels exist twice: a Cython extension
(fedfair._mlpcore) and a numpy fallback (fedfair._mlp_numpy) with
identical contracts. The compiled one is preferred when importable;
FEDFAIR_BACKEND=python|compiled overrides. Selection can also be
switched at runtime (used by the benchmark and the golden-file tests,
which pin the python backend).
"""

import os

from fedfair import _mlp_numpy
from fedfair.errors import ConfigError

_BACKENDS = {"python": _mlp_numpy}

try:
    from fedfair import _mlpcore

    _BACKENDS["compiled"] = _mlpcore
except ImportError:
    _mlpcore = None

_env = os.environ.get("FEDFAIR_BACKEND")
if _env is not None and _env not in ("python", "compiled"):
    raise ConfigError(f"FEDFAIR_BACKEND must be 'python' or 'compiled', got {_env!r}")
if _env == "compiled" and "compiled" not in _BACKENDS:
    raise ConfigError("FEDFAIR_BACKEND=compiled but the extension is not built")

_active_name = _env or ("compiled" if "compiled" in _BACKENDS else "python")


def available_backends():
    return tuple(sorted(_BACKENDS))


def active_backend() -> str:
    return _active_name


def use_backend(name: str) -> str:
    """Switch the active backend; returns the previous name."""
    global _active_name
    if name not in _BACKENDS:
        raise ConfigError(f"unknown backend {name!r}; available: {available_backends()}")
    prev = _active_name
    _active_name = name
    return prev


def forward(flat, sizes, act, X):
    return _BACKENDS[_active_name].forward(flat, sizes, act, X)


def backward(flat, sizes, act, acts, dout, want_param_grad=True, want_input_grad=False):
    return _BACKENDS[_active_name].backward(
        flat, sizes, act, acts, dout, want_param_grad, want_input_grad
    )
