"""Shared projection entry point so a whole model can switch to FP8 GEMMs."""

from __future__ import annotations

import contextlib

from . import autodiff as ad

_fp8 = False


@contextlib.contextmanager
def fp8_linears(enabled: bool = True):
    """Route every ``linear`` call in the block through the FP8 emulation."""
    global _fp8
    prev, _fp8 = _fp8, enabled
    try:
        yield
    finally:
        _fp8 = prev


def linear(x, w) -> ad.Tensor:
    if _fp8:
        from .fp8.linear import fp8_linear

        return fp8_linear(x, w)
    return ad.matmul(x, w.T)
