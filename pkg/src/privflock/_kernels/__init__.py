"""Hot-kernel dispatch: compiled Cython core with a numpy fallback.

The compiled core is preferred when importable; set PRIVFLOCK_BACKEND=python
(or =compiled) to force a backend, or call set_backend() at runtime. Both
backends satisfy the same contracts; results agree to floating-point
round-off but are not guaranteed bit-identical across backends.
"""

import os

from privflock._kernels import pyimpl

try:
    from privflock._kernels import _core
except ImportError:
    _core = None

_BACKENDS = {"python": pyimpl}
if _core is not None:
    _BACKENDS["compiled"] = _core

_forced = os.environ.get("PRIVFLOCK_BACKEND", "").strip().lower()
if _forced:
    if _forced not in _BACKENDS:
        raise ImportError(
            f"PRIVFLOCK_BACKEND={_forced!r} not available; "
            f"choices: {sorted(_BACKENDS)}"
        )
    _active_name = _forced
else:
    _active_name = "compiled" if _core is not None else "python"


def available_backends():
    """Names of the importable kernel backends."""
    return tuple(sorted(_BACKENDS))


def active_backend():
    """Name of the backend currently answering kernel calls."""
    return _active_name


def set_backend(name):
    """Switch the active backend ('compiled' or 'python')."""
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; choices: {sorted(_BACKENDS)}")
    _active_name = name


def get_backend(name):
    """Return a backend module by name (for side-by-side comparison)."""
    return _BACKENDS[name]


def flock_controls(*args):
    return _BACKENDS[_active_name].flock_controls(*args)


def conv3x3_forward(*args):
    return _BACKENDS[_active_name].conv3x3_forward(*args)


def conv3x3_backward(*args):
    return _BACKENDS[_active_name].conv3x3_backward(*args)


def maxpool3x3_forward(*args):
    return _BACKENDS[_active_name].maxpool3x3_forward(*args)


def maxpool3x3_backward(*args):
    return _BACKENDS[_active_name].maxpool3x3_backward(*args)
