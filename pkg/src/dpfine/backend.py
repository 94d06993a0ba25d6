"""Kernel backend selection.

Two interchangeable backends provide the layer compute kernels:

* ``native``  -- Cython extension (``dpfine._native``), used when the
  compiled module is importable.
* ``python``  -- pure numpy (``dpfine._kernels_numpy``), always available.

Selection happens once at import, preferring the native backend. The
``DPFINE_BACKEND`` environment variable (``auto`` | ``native`` | ``python``)
overrides the default, and :func:`use_backend` switches at runtime (used by
the parity tests and the benchmark).
"""

import os

from dpfine import _kernels_numpy
from dpfine.errors import ConfigError

try:
    from dpfine import _native as _native_mod

    _HAVE_NATIVE = True
except ImportError:
    _native_mod = None
    _HAVE_NATIVE = False

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward",
    "dense_forward",
    "dense_backward",
    "groupnorm_forward",
    "groupnorm_backward",
    "relu_forward",
    "relu_backward",
    "meanpool_forward",
    "meanpool_backward",
)


class _Kernels:
    """Namespace of kernel functions for one backend."""

    def __init__(self, name, module):
        self.name = name
        for fn in _KERNEL_NAMES:
            # Elementwise ops have no native win; the extension only
            # implements the matmul-shaped kernels and delegates the rest.
            setattr(self, fn, getattr(module, fn, getattr(_kernels_numpy, fn)))


_BACKENDS = {"python": _Kernels("python", _kernels_numpy)}
if _HAVE_NATIVE:
    _BACKENDS["native"] = _Kernels("native", _native_mod)


def available_backends():
    return tuple(sorted(_BACKENDS))


def _resolve(name):
    if name == "auto":
        name = "native" if _HAVE_NATIVE else "python"
    if name not in _BACKENDS:
        raise ConfigError(
            f"kernel backend {name!r} unavailable (have: {', '.join(available_backends())})"
        )
    return _BACKENDS[name]


_active = _resolve(os.environ.get("DPFINE_BACKEND", "auto"))


def kernels():
    """The active kernel namespace."""
    return _active


def active_backend():
    return _active.name


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global _active
    previous = _active.name
    _active = _resolve(name)
    return previous
