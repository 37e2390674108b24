"""
Layer kernels for the convolutional feature extractor.

Activations are numpy arrays laid out channels x height x width. Every
kernel also accepts a leading batch axis (N x C x H x W) and keeps it.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class LayerError(ValueError):
    pass


class PatchTooLarge(LayerError):
    pass


class PoolLargerThanInput(LayerError):
    pass


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], False
    if x.ndim == 4:
        return x, True
    raise LayerError(f"expected a C x H x W tensor or a batch of them, got shape {x.shape}")


def _restore(x: np.ndarray, batched: bool) -> np.ndarray:
    return x if batched else x[0]


# --- convolution ---

def conv_forward(x: np.ndarray, filters: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid (unpadded, stride 1) cross-correlation.

    filters: F x C x patch_h x patch_w, bias: F. Output: F x (H-patch_h+1) x (W-patch_w+1).
    """
    xb, batched = _as_batch(x)
    n_filters, channels, patch_h, patch_w = filters.shape
    _, in_channels, height, width = xb.shape
    if in_channels != channels:
        raise LayerError(f"input has {in_channels} channels, filters expect {channels}")
    if height < patch_h or width < patch_w:
        raise PatchTooLarge(f"{patch_h}x{patch_w} patch does not fit a {height}x{width} input")

    windows = sliding_window_view(xb, (patch_h, patch_w), axis=(2, 3))  # N,C,Ho,Wo,ph,pw
    out = np.tensordot(windows, filters, axes=([1, 4, 5], [1, 2, 3]))   # N,Ho,Wo,F
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return _restore(np.ascontiguousarray(out), batched)


def conv_backward(x: np.ndarray, filters: np.ndarray, grad_out: np.ndarray):
    """Gradients of a conv_forward call with respect to (input, filters, bias)."""
    xb, batched = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    _, _, patch_h, patch_w = filters.shape
    out_h, out_w = gb.shape[2], gb.shape[3]

    windows = sliding_window_view(xb, (patch_h, patch_w), axis=(2, 3))
    grad_filters = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))  # F,C,ph,pw
    grad_bias = gb.sum(axis=(0, 2, 3))

    grad_x = np.zeros_like(xb)
    for i in range(patch_h):
        for j in range(patch_w):
            contrib = np.tensordot(gb, filters[:, :, i, j], axes=([1], [0]))  # N,Ho,Wo,C
            grad_x[:, :, i:i + out_h, j:j + out_w] += contrib.transpose(0, 3, 1, 2)
    return _restore(grad_x, batched), grad_filters, grad_bias


# --- activation ---

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass the gradient where the forward input was positive, zero elsewhere."""
    return grad_out * (x > 0)


# --- max pooling ---

@dataclass
class PoolRecord:
    """Per-window position of the winning cell, needed to route the gradient back."""
    argmax: np.ndarray
    input_shape: Tuple[int, ...]
    pool_h: int
    pool_w: int
    batched: bool


def maxpool_forward(x: np.ndarray, pool_w: int, pool_h: int) -> Tuple[np.ndarray, PoolRecord]:
    """Non-overlapping max pooling; a ragged last row/column is dropped."""
    xb, batched = _as_batch(x)
    n, c, height, width = xb.shape
    out_h, out_w = height // pool_h, width // pool_w
    if out_h == 0 or out_w == 0:
        raise PoolLargerThanInput(f"{pool_h}x{pool_w} pool on a {height}x{width} map leaves nothing")

    cropped = xb[:, :, :out_h * pool_h, :out_w * pool_w]
    windows = (cropped.reshape(n, c, out_h, pool_h, out_w, pool_w)
               .transpose(0, 1, 2, 4, 3, 5)
               .reshape(n, c, out_h, out_w, pool_h * pool_w))
    argmax = np.argmax(windows, axis=-1)  # first maximum in row-major scan
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    record = PoolRecord(argmax=argmax, input_shape=xb.shape, pool_h=pool_h, pool_w=pool_w, batched=batched)
    return _restore(out, batched), record


def maxpool_backward(grad_out: np.ndarray, record: PoolRecord) -> np.ndarray:
    gb, _ = _as_batch(grad_out)
    n, c, height, width = record.input_shape
    out_h, out_w = record.argmax.shape[2], record.argmax.shape[3]
    ph, pw = record.pool_h, record.pool_w

    windows = np.zeros((n, c, out_h, out_w, ph * pw), dtype=np.float64)
    np.put_along_axis(windows, record.argmax[..., None], gb[..., None], axis=-1)
    routed = (windows.reshape(n, c, out_h, out_w, ph, pw)
              .transpose(0, 1, 2, 4, 3, 5)
              .reshape(n, c, out_h * ph, out_w * pw))
    grad_x = np.zeros((n, c, height, width), dtype=np.float64)
    grad_x[:, :, :out_h * ph, :out_w * pw] = routed
    return _restore(grad_x, record.batched)


# --- dropout ---

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise LayerError(f"dropout rate must lie in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(x: np.ndarray, rate: float, training: bool,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise LayerError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise LayerError("training-mode dropout needs a random stream")
    return x * dropout_mask(np.shape(x), rate, rng)


# --- fully connected head ---

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def dense_forward(features: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map; weights are in_features x out_features."""
    return features @ weights + bias


def dense_backward(features: np.ndarray, weights: np.ndarray, grad_out: np.ndarray):
    """Gradients of ``dense_forward`` with respect to (features, weights, bias)."""
    features2 = np.atleast_2d(features)
    grad2 = np.atleast_2d(grad_out)
    grad_features = grad2 @ weights.T
    return grad_features.reshape(np.shape(features)), features2.T @ grad2, grad2.sum(axis=0)


def dense_softmax_forward(features: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return softmax(dense_forward(features, weights, bias))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(labels.size), labels]))
