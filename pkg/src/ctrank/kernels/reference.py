"""NumPy reference implementations of the hot kernels.

These are the fallback backend when the compiled extension is unavailable
and the ground truth the extension is tested against.  All reductions
accumulate in 64-bit regardless of the storage dtype; results are cast
back to the input dtype.
"""

import numpy as np

BACKEND = "numpy"

# tanh-approximation GELU constants
_GELU_SCALE = 0.7978845608028654  # sqrt(2/pi)
_GELU_CUBIC = 0.044715


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64, copy=False)
    inner = np.tanh(_GELU_SCALE * (xd + _GELU_CUBIC * xd**3))
    return (0.5 * xd * (1.0 + inner)).astype(x.dtype, copy=False)


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    xd = x.astype(np.float64, copy=False)
    t = np.tanh(_GELU_SCALE * (xd + _GELU_CUBIC * xd**3))
    sech2 = 1.0 - t * t
    local = 0.5 * (1.0 + t) + 0.5 * xd * sech2 * _GELU_SCALE * (
        1.0 + 3.0 * _GELU_CUBIC * xd * xd
    )
    return (dy.astype(np.float64, copy=False) * local).astype(x.dtype, copy=False)


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax of a 2-D array, stabilised by max subtraction."""
    xd = x.astype(np.float64, copy=False)
    shifted = xd - xd.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return (e / e.sum(axis=1, keepdims=True)).astype(x.dtype, copy=False)


def softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    yd = y.astype(np.float64, copy=False)
    dyd = dy.astype(np.float64, copy=False)
    inner = (yd * dyd).sum(axis=1, keepdims=True)
    return (yd * (dyd - inner)).astype(y.dtype, copy=False)


def layernorm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    """Normalise each row to zero mean / unit variance, then apply the affine.

    Returns (y, mean, rstd); mean and rstd are float64 and are consumed by
    layernorm_bwd.
    """
    xd = x.astype(np.float64, copy=False)
    mean = xd.mean(axis=1)
    centred = xd - mean[:, None]
    var = (centred * centred).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centred * rstd[:, None] * gain.astype(np.float64, copy=False) + bias.astype(
        np.float64, copy=False
    )
    return y.astype(x.dtype, copy=False), mean, rstd


def layernorm_bwd(
    x: np.ndarray,
    gain: np.ndarray,
    mean: np.ndarray,
    rstd: np.ndarray,
    dy: np.ndarray,
):
    """Returns (dx, dgain, dbias) for layernorm_fwd."""
    n = x.shape[1]
    xd = x.astype(np.float64, copy=False)
    dyd = dy.astype(np.float64, copy=False)
    xhat = (xd - mean[:, None]) * rstd[:, None]
    dgain = (dyd * xhat).sum(axis=0)
    dbias = dyd.sum(axis=0)
    dxhat = dyd * gain.astype(np.float64, copy=False)
    dx = (
        rstd[:, None]
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
    )
    return (
        dx.astype(x.dtype, copy=False),
        dgain.astype(gain.dtype, copy=False),
        dbias.astype(gain.dtype, copy=False),
    )


def adam_step(
    p: np.ndarray,
    g: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    step: int,
) -> None:
    """One Adam update, in place on p, m and v (all same shape and dtype)."""
    gd = g.astype(np.float64, copy=False)
    md = beta1 * m.astype(np.float64, copy=False) + (1.0 - beta1) * gd
    vd = beta2 * v.astype(np.float64, copy=False) + (1.0 - beta2) * gd * gd
    m[...] = md.astype(m.dtype, copy=False)
    v[...] = vd.astype(v.dtype, copy=False)
    mhat = md / (1.0 - beta1**step)
    vhat = vd / (1.0 - beta2**step)
    update = p.astype(np.float64, copy=False) - lr * mhat / (np.sqrt(vhat) + eps)
    p[...] = update.astype(p.dtype, copy=False)
