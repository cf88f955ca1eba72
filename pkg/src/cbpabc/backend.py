"""Execution-lane selection for the hot kernels.

The env flag CBPABC_BACKEND picks the lane: "numba" (default when numba is
importable) compiles cbpabc._kernels with @njit(cache=True, nogil=True);
"python" runs the very same source uncompiled.  The two lanes are
bit-identical (tests/test_backend.py), so the flag trades speed only and
results never depend on it.
"""

from __future__ import annotations

import functools
import importlib.util
import os
import warnings
from types import SimpleNamespace

import numpy as np

from .errors import ConfigError

LANE_NAMES = ("numba", "python")

_cache: dict[str, SimpleNamespace] = {}


def numba_available() -> bool:
    return importlib.util.find_spec("numba") is not None


def _load_kernel_clone():
    # a private module instance per lane: jitting rebinds module globals so
    # compiled kernels link against compiled callees, and the pure-python
    # instance must stay untouched
    spec = importlib.util.find_spec("cbpabc._kernels")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def _wrap_python(fn):
    # numpy warns on wrapping uint64 scalar arithmetic; the RNG core wraps
    # by design
    @functools.wraps(fn)
    def wrapper(*args):
        with np.errstate(over="ignore"):
            return fn(*args)

    return wrapper


def _build(name: str) -> SimpleNamespace:
    mod = _load_kernel_clone()
    ns = SimpleNamespace(name=name)
    if name == "numba":
        import numba

        jit = numba.njit(cache=True, nogil=True)
        for fname in mod.KERNEL_NAMES:
            compiled = jit(getattr(mod, fname))
            setattr(mod, fname, compiled)
            setattr(ns, fname, compiled)
    else:
        for fname in mod.KERNEL_NAMES:
            setattr(ns, fname, _wrap_python(getattr(mod, fname)))
    return ns


def lane(name: str | None = None) -> SimpleNamespace:
    """Return the kernel namespace for `name` (default: the env selection)."""
    if name is None:
        name = os.environ.get("CBPABC_BACKEND", "").strip().lower() or None
    if name is None:
        name = "numba" if numba_available() else "python"
    if name not in LANE_NAMES:
        raise ConfigError(f"unknown backend {name!r}; expected one of {LANE_NAMES}")
    if name == "numba" and not numba_available():
        if os.environ.get("CBPABC_BACKEND", "").strip().lower() == "numba":
            raise ConfigError("CBPABC_BACKEND=numba but numba is not importable")
        warnings.warn("numba not importable; falling back to the python lane")
        name = "python"
    if name not in _cache:
        _cache[name] = _build(name)
    return _cache[name]


def active() -> SimpleNamespace:
    return lane(None)


def active_name() -> str:
    return active().name
