"""Dense tensor math: layer primitives with hand-written forward/backward
passes, parameter initialization, and a finite-difference gradient oracle.

All arrays are float64 numpy arrays.  Backward passes are written per layer;
there is no autodiff graph.
"""

import numpy as np

from . import kernels
from .errors import NumericalOverflowError, ShapeError

NORM_EPS = 1e-8


def check_finite(arr, what: str):
    """Raise NumericalOverflowError if arr contains NaN/Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericalOverflowError(f"non-finite values in {what}")


def matmul(a, b) -> np.ndarray:
    """Matrix product in float64."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def relu(x):
    """Elementwise max(0, x).  Returns (values, mask) where mask = x > 0,
    stored for the backward pass; the derivative at exactly 0 is 0."""
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0.0
    return np.where(mask, x, 0.0), mask


def relu_backward(upstream, mask):
    return np.where(mask, upstream, 0.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def l2_normalize(v, eps: float = NORM_EPS):
    """v / max(||v||2, eps); unit norm whenever ||v|| >= eps."""
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    return v / max(norm, eps)


def l2_normalize_rows(x, eps: float = NORM_EPS):
    """Row-wise L2 normalization of a (n, d) batch."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    return kernels.normalize_rows(x, eps)


def mean_square(v) -> float:
    """Mean of squared entries; the per-group goodness primitive."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("mean_square of an empty vector")
    return float(np.mean(np.square(v)))


def mean_square_rows(x) -> np.ndarray:
    """Per-row mean of squares for a (n, d) batch, 64-bit accumulation."""
    x = np.asarray(x, dtype=np.float64)
    return np.einsum("ij,ij->i", x, x) / x.shape[1]


def he_uniform_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """(fan_out, fan_in) matrix with entries i.i.d. uniform on +-sqrt(6/fan_in)."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"he_uniform_init needs positive fan_in/fan_out, got {fan_in}, {fan_out}")
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def finite_diff_grad(f, params, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time.

    f is evaluated at params with single entries perturbed by +-h; everything
    runs in float64.  Non-finite values of f abort with a diagnostic.
    """
    p = np.array(params, dtype=np.float64)
    grad = np.empty_like(p)
    flat = p.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalOverflowError(f"non-finite loss while probing parameter {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


class DenseLayer:
    """Fully connected layer y = act(x W^T + b) with a hand-written backward.

    W has shape (out_width, in_width); activation is "relu" or "identity".
    """

    def __init__(self, W, b, activation: str = "relu"):
        W = np.asarray(W, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
            raise ShapeError(f"inconsistent dense parameters: W {W.shape}, b {b.shape}")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.W = W
        self.b = b
        self.activation = activation

    @classmethod
    def init(cls, in_width: int, out_width: int, rng: np.random.Generator,
             activation: str = "relu") -> "DenseLayer":
        W = he_uniform_init(in_width, out_width, rng)
        b = np.zeros(out_width, dtype=np.float64)
        return cls(W, b, activation)

    @property
    def in_width(self) -> int:
        return self.W.shape[1]

    @property
    def out_width(self) -> int:
        return self.W.shape[0]

    def params(self):
        return [self.W, self.b]

    def forward(self, x):
        """x (n, in_width) -> (y, cache); cache feeds backward()."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(
                f"dense forward expects (n, {self.in_width}), got {x.shape}")
        z = x @ self.W.T + self.b
        if self.activation == "relu":
            y, mask = relu(z)
        else:
            y, mask = z, None
        return y, (x, mask)

    def backward(self, dy, cache):
        """Upstream dL/dy -> (dW, db, dx), exact gradients of the same scalar."""
        x, mask = cache
        dz = relu_backward(dy, mask) if mask is not None else dy
        dW = dz.T @ x
        db = dz.sum(axis=0)
        dx = dz @ self.W
        return dW, db, dx


class Conv2DLayer:
    """2-D cross-correlation layer for use inside hidden-unit interiors.

    kernels has shape (out_channels, in_channels, kh, kw).  When in_shape
    (ic, h, w) is set the layer accepts flat (n, ic*h*w) rows and returns
    flat rows, so it can sit in the same chain as DenseLayer.
    """

    def __init__(self, kernels_, bias, stride: int = 1, padding: int = 0,
                 activation: str = "relu", in_shape=None):
        kernels_ = np.asarray(kernels_, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if kernels_.ndim != 4 or bias.ndim != 1 or bias.shape[0] != kernels_.shape[0]:
            raise ShapeError(
                f"inconsistent conv parameters: kernels {kernels_.shape}, bias {bias.shape}")
        if stride < 1 or padding < 0:
            raise ValueError(f"bad stride/padding: {stride}, {padding}")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.kernels = kernels_
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.activation = activation
        self.in_shape = tuple(in_shape) if in_shape is not None else None

    @classmethod
    def init(cls, in_channels: int, out_channels: int, kh: int, kw: int,
             rng: np.random.Generator, stride: int = 1, padding: int = 0,
             activation: str = "relu", in_shape=None) -> "Conv2DLayer":
        fan_in = in_channels * kh * kw
        limit = np.sqrt(6.0 / fan_in)
        k = rng.uniform(-limit, limit, size=(out_channels, in_channels, kh, kw))
        return cls(k, np.zeros(out_channels), stride, padding, activation, in_shape)

    @property
    def in_width(self) -> int:
        if self.in_shape is None:
            raise ShapeError("conv layer has no in_shape; flat width undefined")
        ic, h, w = self.in_shape
        return ic * h * w

    @property
    def out_width(self) -> int:
        ic, h, w = self.in_shape if self.in_shape is not None else (None, None, None)
        if ic is None:
            raise ShapeError("conv layer has no in_shape; flat width undefined")
        oh, ow = self.output_hw(h, w)
        return self.kernels.shape[0] * oh * ow

    def params(self):
        return [self.kernels, self.bias]

    def output_hw(self, h: int, w: int):
        kh, kw = self.kernels.shape[2:]
        oh = (h + 2 * self.padding - kh) // self.stride + 1
        ow = (w + 2 * self.padding - kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(
                f"conv output dims not positive for input {h}x{w}, "
                f"kernel {kh}x{kw}, stride {self.stride}, padding {self.padding}")
        return oh, ow

    def _to_nchw(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            if self.in_shape is None:
                raise ShapeError("flat conv input needs in_shape set on the layer")
            ic, h, w = self.in_shape
            if x.shape[1] != ic * h * w:
                raise ShapeError(
                    f"conv forward expects (n, {ic * h * w}) flat rows, got {x.shape}")
            return x.reshape(x.shape[0], ic, h, w), True
        if x.ndim != 4 or x.shape[1] != self.kernels.shape[1]:
            raise ShapeError(
                f"conv forward expects (n, {self.kernels.shape[1]}, h, w), got {x.shape}")
        return x, False

    def forward(self, x):
        x4, was_flat = self._to_nchw(x)
        n, ic, h, w = x4.shape
        oh, ow = self.output_hw(h, w)
        p = self.padding
        if p:
            xp = np.zeros((n, ic, h + 2 * p, w + 2 * p), dtype=np.float64)
            xp[:, :, p:p + h, p:p + w] = x4
        else:
            xp = np.ascontiguousarray(x4)
        z = kernels.conv2d_forward_padded(xp, self.kernels, self.bias, self.stride, oh, ow)
        if self.activation == "relu":
            y, mask = relu(z)
        else:
            y, mask = z, None
        out = y.reshape(n, -1) if was_flat else y
        return out, (xp, mask, was_flat, y.shape)

    def backward(self, dy, cache):
        xp, mask, was_flat, out_shape = cache
        dy = np.asarray(dy, dtype=np.float64)
        if was_flat:
            dy = dy.reshape(out_shape)
        dz = relu_backward(dy, mask) if mask is not None else dy
        dk, dbias, dxp = kernels.conv2d_backward_padded(
            xp, self.kernels, np.ascontiguousarray(dz), self.stride)
        p = self.padding
        dx = dxp[:, :, p:-p, p:-p] if p else dxp
        if was_flat:
            dx = dx.reshape(dx.shape[0], -1)
        return dk, dbias, dx
