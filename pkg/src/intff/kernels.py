"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Every kernel exists in two variants that compute identical results: a
numba ``@njit`` loop version and a vectorized numpy fallback.  The module
binds the public names to the numba variants unless numba is unavailable
or the environment variable ``INTFF_NO_NUMBA`` is set to 1/true/yes/on.
``benchmarks/bench_kernels.py`` times the two paths against each other.
"""

import math
import os

import numpy as np

__all__ = [
    "NUMBA_ENABLED",
    "adam_step",
    "normalize_rows",
    "conv2d_forward_padded",
    "conv2d_backward_padded",
]


def _numba_requested() -> bool:
    flag = os.environ.get("INTFF_NO_NUMBA", "").strip().lower()
    return flag not in ("1", "true", "yes", "on")


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def normalize_rows_numpy(x: np.ndarray, eps: float) -> np.ndarray:
    """Scale each row of x to unit L2 norm; rows shorter than eps are divided by eps."""
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    return x / np.maximum(norms, eps)[:, None]


def adam_step_numpy(param, grad, m, v, t, lr, beta1, beta2, eps):
    """One in-place Adam update with bias correction (eps outside the sqrt)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


def conv2d_forward_padded_numpy(xp, kernels, bias, stride, oh, ow):
    """Cross-correlation on a pre-padded input xp (n, ic, H, W) -> (n, oc, oh, ow)."""
    n = xp.shape[0]
    oc, _, kh, kw = kernels.shape
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("nchw,oc->nohw", patch, kernels[:, :, i, j])
    out += bias[None, :, None, None]
    return out


def conv2d_backward_padded_numpy(xp, kernels, dz, stride):
    """Gradients of a padded cross-correlation.

    dz is the upstream gradient at the pre-activation output.  Returns
    (dkernels, dbias, dxp) with dxp shaped like the padded input.
    """
    oc, ic, kh, kw = kernels.shape
    oh, ow = dz.shape[2:]
    dk = np.empty_like(kernels)
    dxp = np.zeros_like(xp)
    dbias = dz.sum(axis=(0, 2, 3))
    for i in range(kh):
        for j in range(kw):
            rows = slice(i, i + stride * oh, stride)
            cols = slice(j, j + stride * ow, stride)
            patch = xp[:, :, rows, cols]
            dk[:, :, i, j] = np.einsum("nohw,nchw->oc", dz, patch)
            dxp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", dz, kernels[:, :, i, j])
    return dk, dbias, dxp


# ---------------------------------------------------------------------------
# numba loop bodies (compiled below when enabled)
# ---------------------------------------------------------------------------

def _normalize_rows_loops(x, eps):
    n, d = x.shape
    out = np.empty((n, d), dtype=np.float64)
    for r in range(n):
        acc = 0.0
        for c in range(d):
            acc += x[r, c] * x[r, c]
        norm = math.sqrt(acc)
        if norm < eps:
            norm = eps
        inv = 1.0 / norm
        for c in range(d):
            out[r, c] = x[r, c] * inv
    return out


def _adam_step_loops(param, grad, m, v, t, lr, beta1, beta2, eps):
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(param.size):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        param[i] -= lr * (mi / c1) / (math.sqrt(vi / c2) + eps)


def _conv2d_forward_loops(xp, kernels, bias, stride, oh, ow):
    # kernels transposed to (ic, kh, kw, oc) so the inner loop runs over
    # contiguous memory and vectorizes
    n, ic = xp.shape[0], xp.shape[1]
    oc, _, kh, kw = kernels.shape
    kt = np.ascontiguousarray(np.transpose(kernels, (1, 2, 3, 0)))
    out = np.empty((n, oh, ow, oc), dtype=np.float64)
    acc = np.empty(oc, dtype=np.float64)
    for im in range(n):
        for r in range(oh):
            r0 = r * stride
            for c in range(ow):
                c0 = c * stride
                acc[:] = bias
                for ch in range(ic):
                    for i in range(kh):
                        for j in range(kw):
                            v = xp[im, ch, r0 + i, c0 + j]
                            kv = kt[ch, i, j]
                            for o in range(oc):
                                acc[o] += v * kv[o]
                out[im, r, c] = acc
    return np.ascontiguousarray(np.transpose(out, (0, 3, 1, 2)))


def _conv2d_backward_loops(xp, kernels, dz, stride):
    n, ic = xp.shape[0], xp.shape[1]
    oc, _, kh, kw = kernels.shape
    oh, ow = dz.shape[2], dz.shape[3]
    kt = np.ascontiguousarray(np.transpose(kernels, (1, 2, 3, 0)))
    dzt = np.ascontiguousarray(np.transpose(dz, (0, 2, 3, 1)))
    dkt = np.zeros((ic, kh, kw, oc), dtype=np.float64)
    dbias = np.zeros(oc, dtype=np.float64)
    dxp = np.zeros_like(xp)
    for im in range(n):
        for r in range(oh):
            r0 = r * stride
            for c in range(ow):
                c0 = c * stride
                g = dzt[im, r, c]
                for o in range(oc):
                    dbias[o] += g[o]
                for ch in range(ic):
                    for i in range(kh):
                        for j in range(kw):
                            v = xp[im, ch, r0 + i, c0 + j]
                            kv = kt[ch, i, j]
                            dkv = dkt[ch, i, j]
                            acc = 0.0
                            for o in range(oc):
                                dkv[o] += g[o] * v
                                acc += g[o] * kv[o]
                            dxp[im, ch, r0 + i, c0 + j] += acc
    dk = np.ascontiguousarray(np.transpose(dkt, (3, 0, 1, 2)))
    return dk, dbias, dxp


def _adam_step_flat(param, grad, m, v, t, lr, beta1, beta2, eps, impl):
    # flat views keep the jit signature to 1-D arrays; all params are C-contiguous
    impl(param.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
         t, lr, beta1, beta2, eps)


NUMBA_ENABLED = False
if _numba_requested():
    try:
        from numba import njit
    except ImportError:
        pass
    else:
        NUMBA_ENABLED = True
        normalize_rows_jit = njit(cache=True)(_normalize_rows_loops)
        _adam_step_jit_1d = njit(cache=True)(_adam_step_loops)
        conv2d_forward_padded_jit = njit(cache=True)(_conv2d_forward_loops)
        conv2d_backward_padded_jit = njit(cache=True)(_conv2d_backward_loops)

        def adam_step_jit(param, grad, m, v, t, lr, beta1, beta2, eps):
            _adam_step_flat(param, grad, m, v, t, lr, beta1, beta2, eps,
                            _adam_step_jit_1d)


def _adam_step_numpy_entry(param, grad, m, v, t, lr, beta1, beta2, eps):
    adam_step_numpy(param, grad, m, v, t, lr, beta1, beta2, eps)


if NUMBA_ENABLED:
    normalize_rows = normalize_rows_jit
    adam_step = adam_step_jit
    conv2d_forward_padded = conv2d_forward_padded_jit
    conv2d_backward_padded = conv2d_backward_padded_jit
else:
    normalize_rows = normalize_rows_numpy
    adam_step = _adam_step_numpy_entry
    conv2d_forward_padded = conv2d_forward_padded_numpy
    conv2d_backward_padded = conv2d_backward_padded_numpy
