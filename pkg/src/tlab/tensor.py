"""Dense float32 array ops with exact analytic gradients.

Five layer types (3x3 stride-1 conv, 2x2 stride-2 max-pool, ReLU, dense,
softmax cross-entropy) plus the Adam update. Everything is a pure function
of float32 numpy arrays; the batched variants (leading N axis) are what the
training loop and the attack code actually call, the single-sample wrappers
match the documented per-patch contracts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

F32 = np.float32


@dataclass
class LayerGrad:
    """Gradients produced by one layer's backward pass."""

    input_grad: np.ndarray
    param_grads: list = field(default_factory=list)


def _f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=F32)


# ---------------------------------------------------------------------------
# conv 3x3, stride 1, zero-pad 1 (spatial size preserved)
# ---------------------------------------------------------------------------

def _conv_cols(x: np.ndarray) -> np.ndarray:
    """im2col for a padded NCHW batch: (N, H*W, C*9)."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N,C,H,W,3,3
    return _f32(win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9))


def conv2d_forward_batch(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    co, ci, kh, kw = kernels.shape
    if (kh, kw) != (3, 3):
        raise DimensionError(f"conv kernels must be 3x3, got {kh}x{kw}")
    if ci != c:
        raise DimensionError(f"conv input has {c} channels, kernels expect {ci}")
    if bias.shape != (co,):
        raise DimensionError(f"conv bias shape {bias.shape} != ({co},)")
    cols = _conv_cols(x)
    kmat = kernels.reshape(co, ci * 9)
    out = cols @ kmat.T + bias  # N, H*W, Co
    return _f32(out.transpose(0, 2, 1).reshape(n, co, h, w))


def conv2d_backward_batch(x: np.ndarray, kernels: np.ndarray, upstream: np.ndarray,
                          need_param_grads: bool = True):
    """Adjoint of conv2d_forward_batch.

    Returns (input_grad, kernel_grad, bias_grad); param grads are summed over
    the batch (None when need_param_grads is False).
    """
    n, c, h, w = x.shape
    co, ci, _, _ = kernels.shape
    if upstream.shape != (n, co, h, w):
        raise DimensionError(
            f"conv upstream shape {upstream.shape} != {(n, co, h, w)}")
    g = _f32(upstream.transpose(0, 2, 3, 1).reshape(n, h * w, co))
    kmat = kernels.reshape(co, ci * 9)

    kernel_grad = bias_grad = None
    if need_param_grads:
        cols = _conv_cols(x)
        kernel_grad = np.einsum("npo,npk->ok", g, cols, optimize=True).reshape(kernels.shape)
        bias_grad = g.sum(axis=(0, 1))

    dcols = (g @ kmat).reshape(n, h, w, c, 3, 3)
    xp_grad = np.zeros((n, c, h + 2, w + 2), dtype=F32)
    for di in range(3):
        for dj in range(3):
            xp_grad[:, :, di:di + h, dj:dj + w] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    input_grad = xp_grad[:, :, 1:-1, 1:-1]
    return _f32(input_grad), kernel_grad, bias_grad


def conv2d_forward(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-sample (C,H,W) convolution, 3x3 / stride 1 / zero-pad 1."""
    if x.ndim != 3:
        raise DimensionError(f"conv input must be (C,H,W), got shape {x.shape}")
    return conv2d_forward_batch(_f32(x)[None], _f32(kernels), _f32(bias))[0]


def conv2d_backward(x: np.ndarray, kernels: np.ndarray, upstream: np.ndarray) -> LayerGrad:
    if x.ndim != 3 or upstream.ndim != 3:
        raise DimensionError("conv backward expects (C,H,W) input and upstream")
    ig, kg, bg = conv2d_backward_batch(_f32(x)[None], _f32(kernels), _f32(upstream)[None])
    return LayerGrad(ig[0], [kg, bg])


# ---------------------------------------------------------------------------
# max-pool 2x2, stride 2
# ---------------------------------------------------------------------------

def maxpool2x2_forward_batch(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1).astype(np.int8)  # first occurrence on ties
    out = np.take_along_axis(flat, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return _f32(out), idx


def maxpool2x2_backward_batch(argmax_indices: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if upstream.shape != argmax_indices.shape:
        raise DimensionError(
            f"pool upstream shape {upstream.shape} != {argmax_indices.shape}")
    n, c, hh, hw = upstream.shape
    flat = np.zeros((n, c, hh, hw, 4), dtype=F32)
    np.put_along_axis(flat, argmax_indices[..., None].astype(np.intp),
                      _f32(upstream)[..., None], axis=-1)
    return flat.reshape(n, c, hh, hw, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh * 2, hw * 2)


def maxpool2x2_forward(x: np.ndarray):
    if x.ndim != 3:
        raise DimensionError(f"maxpool input must be (C,H,W), got shape {x.shape}")
    out, idx = maxpool2x2_forward_batch(_f32(x)[None])
    return out[0], idx[0]


def maxpool2x2_backward(argmax_indices: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return maxpool2x2_backward_batch(argmax_indices[None], _f32(upstream)[None])[0]


# ---------------------------------------------------------------------------
# ReLU
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(_f32(x), F32(0))


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != np.shape(upstream):
        raise DimensionError(f"relu upstream shape {np.shape(upstream)} != {x.shape}")
    # subgradient 0 at exactly 0
    return np.where(x > 0, _f32(upstream), F32(0))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    m, nfeat = weights.shape
    if x.shape[-1] != nfeat:
        raise DimensionError(f"dense input length {x.shape[-1]} != {nfeat}")
    if bias.shape != (m,):
        raise DimensionError(f"dense bias shape {bias.shape} != ({m},)")
    return _f32(x @ weights.T + bias)


def dense_backward_batch(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
                         need_param_grads: bool = True):
    m, nfeat = weights.shape
    if upstream.shape[-1] != m:
        raise DimensionError(f"dense upstream length {upstream.shape[-1]} != {m}")
    input_grad = _f32(upstream @ weights)
    weight_grad = bias_grad = None
    if need_param_grads:
        weight_grad = _f32(upstream.T @ x)
        bias_grad = _f32(upstream.sum(axis=0))
    return input_grad, weight_grad, bias_grad


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 1:
        raise DimensionError(f"dense input must be 1-D, got shape {x.shape}")
    return dense_forward_batch(_f32(x)[None], _f32(weights), _f32(bias))[0]


def dense_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> LayerGrad:
    ig, wg, bg = dense_backward_batch(_f32(x)[None], _f32(weights), _f32(upstream)[None])
    return LayerGrad(ig[0], [wg, bg])


# ---------------------------------------------------------------------------
# softmax cross-entropy
# ---------------------------------------------------------------------------

def softmax_batch(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z, dtype=F32)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy_batch(logits: np.ndarray, true_classes: np.ndarray):
    """Mean loss over the batch plus per-sample logit grads (already /N)."""
    n, k = logits.shape
    p = softmax_batch(_f32(logits))
    rows = np.arange(n)
    eps = np.finfo(F32).tiny
    losses = -np.log(np.maximum(p[rows, true_classes], eps))
    grad = p.copy()
    grad[rows, true_classes] -= F32(1)
    return F32(losses.mean()), _f32(grad / n)


def softmax_cross_entropy(logits: np.ndarray, true_class: int):
    logits = _f32(logits)
    k = logits.shape[0]
    if k < 2 or not 0 <= true_class < k:
        raise DimensionError(f"need K>=2 logits and true_class < K, got K={k}, class {true_class}")
    z = (logits - logits.max()).astype(np.float64)
    e = np.exp(z)
    lse = np.log(e.sum())
    loss = F32(lse - z[true_class])
    p = e / e.sum()
    grad = p.copy()
    # p-1 loses all precision near saturation; -(sum of the others) is exact
    grad[true_class] = -np.delete(p, true_class).sum()
    return loss, _f32(grad)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators and step counter for one param list."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def init(cls, params: list) -> "AdamState":
        return cls(m=[np.zeros_like(p, dtype=F32) for p in params],
                   v=[np.zeros_like(p, dtype=F32) for p in params])


def adam_step(params: list, grads: list, state: AdamState, lr: float = 1e-4,
              beta1: float = 0.99, beta2: float = 0.999, eps_adam: float = 1e-8):
    """One bias-corrected Adam update; returns (new_params, state) in place."""
    state.t += 1
    t = state.t
    b1, b2 = F32(beta1), F32(beta2)
    bc1 = F32(1.0 - beta1 ** t)
    bc2 = F32(1.0 - beta2 ** t)
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = _f32(g)
        state.m[i] = b1 * state.m[i] + (F32(1) - b1) * g
        state.v[i] = b2 * state.v[i] + (F32(1) - b2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(_f32(p - F32(lr) * m_hat / (np.sqrt(v_hat) + F32(eps_adam))))
    return out, state
