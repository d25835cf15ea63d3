"""Pure numpy implementations of the hot kernels.

Every function here has a signature-identical twin in the compiled
``_ckernels`` extension.  All 2-D inputs are C-contiguous ``[rows, cols]``
arrays in float32 or float64; reductions run along the last axis.
"""

import numpy as np


def softmax_fwd(x):
    """Row-wise softmax with max-shift for stability."""
    out = x - x.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def softmax_bwd(y, dy):
    dot = np.sum(y * dy, axis=1, keepdims=True)
    return y * (dy - dot)


def log_softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    shifted -= lse
    return shifted


def log_softmax_bwd(y, dy):
    return dy - np.exp(y) * dy.sum(axis=1, keepdims=True)


def layer_norm_fwd(x, gain, bias, eps):
    """Returns (y, mean, rstd); mean/rstd are cached for the backward pass."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layer_norm_bwd(x, gain, mean, rstd, dy):
    """Returns (dx, dgain, dbias)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgain, dbias


def nll_fwd(logp, targets, mask):
    """Token-mean negative log-likelihood over unmasked steps.

    Returns (loss, n_unmasked).  Targets are pre-validated by the caller.
    """
    idx = np.nonzero(mask)[0]
    n = idx.shape[0]
    loss = -logp[idx, targets[idx]].sum(dtype=np.float64) / n
    return logp.dtype.type(loss), n


def nll_bwd(logp_shape, dtype, targets, mask, n, gscalar):
    dlogp = np.zeros(logp_shape, dtype=dtype)
    idx = np.nonzero(mask)[0]
    dlogp[idx, targets[idx]] = -gscalar / n
    return dlogp
