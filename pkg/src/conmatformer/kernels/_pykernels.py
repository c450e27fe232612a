"""Pure-numpy conv lowering kernels (fallback backend).

Both kernels loop over the kh*kw kernel offsets only; the per-offset work is
vectorized slicing, so the cost is dominated by the large copies/adds that
BLAS-backed matmul consumes afterwards.
"""

import numpy as np

BACKEND = "numpy"


def im2col(xp, kh, kw, stride):
    """Lower a padded image batch to column form.

    xp: [B, C, Hp, Wp] (already padded). Returns [B, C*kh*kw, Ho*Wo] where
    Ho = (Hp-kh)//stride + 1 and column index runs over output positions in
    row-major order. Row layout is channel-major: (c, i, j) -> (c*kh + i)*kw + j.
    """
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def col2im(cols, c, hp, wp, kh, kw, stride):
    """Adjoint of im2col: scatter-add columns back onto the padded image grid.

    cols: [B, C*kh*kw, Ho*Wo]. Returns [B, C, Hp, Wp].
    """
    b = cols.shape[0]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out
