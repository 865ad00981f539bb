"""Dense-tensor ops with hand-written analytic backward passes.

Tensors are plain numpy arrays in row-major N×C×H×W layout. Two precisions
are supported: float32 for training state, float64 for verification; every
op preserves the dtype of its inputs. Any non-finite value raises
NumericalError immediately instead of propagating.

No autodiff graph: each `<op>` has a matching `<op>_backward` and callers
chain them explicitly.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericalError

LOG_EPS = 1e-12  # clamp for log() of probabilities


def ensure_finite(arr: np.ndarray, op: str) -> np.ndarray:
    """Raise NumericalError if `arr` contains NaN or Inf."""
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: non-finite values in result")
    return arr


# ---------------------------------------------------------------------------
# convolution

def _check_conv_args(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(
            f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if padding < 0:
        raise ConfigurationError("conv2d: padding must be >= 0")
    if stride < 1:
        raise ConfigurationError("conv2d: stride must be >= 1")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ConfigurationError(
            f"conv2d: non-integral output extent for input {h}x{wd}, "
            f"kernel {kh}, stride {stride}, padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigurationError("conv2d: output extent would be empty")
    return ho, wo


def im2col(x: np.ndarray, k: int, stride: int, padding: int) -> np.ndarray:
    """Unfold x (N,C,H,W) into patch rows of shape (N*Ho*Wo, C*k*k)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (N, C, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(cols)


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
           cols: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlate x (N,C,H,W) with kernels w (C',C,k,k), no bias."""
    ho, wo = _check_conv_args(x, w, stride, padding)
    n = x.shape[0]
    co, _, k, _ = w.shape
    if cols is None:
        cols = im2col(x, k, stride, padding)
    y = cols @ w.reshape(co, -1).T
    y = y.reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return ensure_finite(np.ascontiguousarray(y), "conv2d")


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                    stride: int = 1, padding: int = 0,
                    cols: np.ndarray | None = None):
    """Gradients of conv2d; returns (dx, dw). Pass the forward cols to skip re-unfolding."""
    ho, wo = _check_conv_args(x, w, stride, padding)
    n, c, h, wd = x.shape
    co, _, k, _ = w.shape
    if dy.shape != (n, co, ho, wo):
        raise DimensionError(f"conv2d_backward: dy shape {dy.shape} != {(n, co, ho, wo)}")
    if cols is None:
        cols = im2col(x, k, stride, padding)
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
    dw = (dy_rows.T @ cols).reshape(w.shape)

    dcols = dy_rows @ w.reshape(co, -1)  # (N*Ho*Wo, C*k*k)
    dcols = dcols.reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    ensure_finite(dw, "conv2d_backward")
    return ensure_finite(np.ascontiguousarray(dx), "conv2d_backward"), dw


def bias_add(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Add per-channel bias to an N×C×H×W map or per-feature bias to N×D."""
    if x.ndim == 4:
        if b.shape != (x.shape[1],):
            raise DimensionError(f"bias_add: bias {b.shape} vs {x.shape[1]} channels")
        return ensure_finite(x + b[None, :, None, None], "bias_add")
    if b.shape != (x.shape[-1],):
        raise DimensionError(f"bias_add: bias {b.shape} vs {x.shape[-1]} features")
    return ensure_finite(x + b, "bias_add")


def bias_add_backward(x_ndim: int, dy: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the bias (dy w.r.t. input is identity)."""
    if x_ndim == 4:
        return dy.sum(axis=(0, 2, 3))
    return dy.sum(axis=0)


# ---------------------------------------------------------------------------
# pooling

def adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Mean-pool x (N,C,H,W) to (N,C,out_h,out_w); windows must tile exactly."""
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if out_h < 1 or out_w < 1 or out_h > h or out_w > w:
        raise ConfigurationError(f"adaptive_avg_pool: bad target {out_h}x{out_w} for {h}x{w}")
    if h % out_h or w % out_w:
        raise ConfigurationError(
            f"adaptive_avg_pool: {h}x{w} not divisible by {out_h}x{out_w}")
    wh, ww = h // out_h, w // out_w
    y = x.reshape(n, c, out_h, wh, out_w, ww).mean(axis=(3, 5))
    return ensure_finite(y, "adaptive_avg_pool")


def adaptive_avg_pool_backward(dy: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Distribute pooled gradient uniformly over each window."""
    n, c, oh, ow = dy.shape
    wh, ww = in_h // oh, in_w // ow
    g = dy / (wh * ww)
    dx = np.broadcast_to(g[:, :, :, None, :, None], (n, c, oh, wh, ow, ww))
    return np.ascontiguousarray(dx.reshape(n, c, in_h, in_w))


def avg_pool(x: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping mean pooling with a square window."""
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ConfigurationError(f"avg_pool: window {window} does not tile {h}x{w}")
    return adaptive_avg_pool(x, h // window, w // window)


def avg_pool_backward(dy: np.ndarray, window: int) -> np.ndarray:
    return adaptive_avg_pool_backward(dy, dy.shape[2] * window, dy.shape[3] * window)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over spatial extents: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return ensure_finite(x.mean(axis=(2, 3)), "global_avg_pool")


def global_avg_pool_backward(dy: np.ndarray, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(
        np.broadcast_to((dy / (h * w))[:, :, None, None], dy.shape + (h, w)))


# ---------------------------------------------------------------------------
# activations and losses

def relu(x: np.ndarray) -> np.ndarray:
    return ensure_finite(np.maximum(x, 0), "relu")


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Fully connected layer: x (N,Din) @ w (Dout,Din)^T + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    y = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} vs {w.shape[0]} outputs")
        y = y + b
    return ensure_finite(y, "linear")


def linear_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    """Returns (dx, dw, db)."""
    dx = dy @ w
    dw = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dw, db


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax via max subtraction; rows sum to 1."""
    ensure_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    ensure_finite(z, "log_softmax input")
    zs = z - z.max(axis=axis, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=axis, keepdims=True))


def softmax_backward(p: np.ndarray, dp: np.ndarray, axis: int = -1) -> np.ndarray:
    """dL/dz given p = softmax(z) and dL/dp."""
    inner = (dp * p).sum(axis=axis, keepdims=True)
    return p * (dp - inner)


def log_softmax_backward(logp: np.ndarray, dlogp: np.ndarray, axis: int = -1) -> np.ndarray:
    return dlogp - np.exp(logp) * dlogp.sum(axis=axis, keepdims=True)


def _ce_terms(pred: np.ndarray, target: np.ndarray, from_logits: bool):
    if pred.shape != target.shape:
        raise DimensionError(f"cross_entropy: pred {pred.shape} vs target {target.shape}")
    sums = target.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-6):
        raise ConfigurationError("cross_entropy: target rows must sum to 1")
    if from_logits:
        logp = log_softmax(pred, axis=-1)
    else:
        logp = np.log(np.maximum(pred, LOG_EPS))
    return -(target * logp).sum(axis=-1)


def cross_entropy(pred: np.ndarray, target: np.ndarray,
                  from_logits: bool = False) -> float:
    """-sum(target * log pred), averaged over the batch axis when 2-d.

    Zero predicted probability at a supported class is clamped at 1e-12,
    never NaN.
    """
    ce = _ce_terms(pred, target, from_logits)
    val = float(ce.mean()) if ce.ndim else float(ce)
    if not np.isfinite(val):
        raise NumericalError("cross_entropy: non-finite loss")
    return val


def cross_entropy_backward(pred: np.ndarray, target: np.ndarray,
                           from_logits: bool = False) -> np.ndarray:
    """Gradient of the batch-mean cross entropy w.r.t. pred."""
    scale = 1.0 / pred.shape[0] if pred.ndim == 2 else 1.0
    if from_logits:
        return (softmax(pred, axis=-1) - target) * scale
    return -(target / np.maximum(pred, LOG_EPS)) * scale


# ---------------------------------------------------------------------------
# optimization and verification

def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0) -> None:
    """In-place SGD: v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise DimensionError(
            f"sgd_step: shapes {param.shape}/{grad.shape}/{velocity.shape} differ")
    if lr <= 0:
        raise ConfigurationError("sgd_step: lr must be > 0")
    velocity *= momentum
    velocity += grad
    if weight_decay:
        velocity += weight_decay * param
    param -= lr * velocity
    ensure_finite(param, "sgd_step")


def finite_difference_gradient(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn, element by element.

    fn must be deterministic and pure; x should be float64.
    """
    # fresh contiguous copy: reshape(-1) must be a view so the in-place
    # perturbations below are visible to fn
    x = np.array(x, dtype=np.float64, order="C")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise deviation, scaled by the largest gradient magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)
