"""Linear layer whose three GEMMs see FP8-rounded operands."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .formats import E4M3, FpFormat
from .quant import BLOCK, COLUMN_TILE, TILE, fake_quant


def fp8_linear(x, w, fmt: FpFormat = E4M3) -> ad.Tensor:
    """``x @ w.T`` with fine-grained fake quantization on every operand.

    Forward and input-gradient GEMMs quantize activations and gradients in
    1x128 tiles along the inner dimension and weights in 128x128 blocks.
    The weight-gradient GEMM contracts over tokens, so activations and
    gradients are re-tiled as 128x1 columns. Activation scales are powers
    of two. Products accumulate in float64.
    """
    x, w = ad.tensor(x), ad.tensor(w)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    xq = fake_quant(x2, TILE, fmt, pow2_scales=True)
    wq = fake_quant(w.data, BLOCK, fmt)
    y = (xq @ wq.T).reshape(lead + (w.shape[0],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[0])
        gq = fake_quant(g2, TILE, fmt, pow2_scales=True)
        dx = (gq @ wq).reshape(x.shape)
        xt = fake_quant(xq, COLUMN_TILE, fmt, pow2_scales=True)
        gt = fake_quant(g2, COLUMN_TILE, fmt, pow2_scales=True)
        return dx, gt.T @ xt

    return ad._make(np.asarray(y), (x, w), bw)
