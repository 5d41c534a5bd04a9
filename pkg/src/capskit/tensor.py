"""Dense float64 array primitives with hand-paired forward/backward passes.

Arrays are plain ``numpy.ndarray`` objects of dtype float64.  Every
function here is pure.  Most accept an optional leading batch axis so the
training loop can push a whole mini-batch through a single BLAS call.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

Tensor = np.ndarray


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def _batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim:
        return x[None], True
    if x.ndim == ndim + 1:
        return x, False
    raise InvalidArgument(f"expected a {ndim}-d array (or a batch of them), got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _im2col(x: Tensor, k: int, stride: int) -> tuple[Tensor, int, int]:
    # x: [N, C, H, W] -> cols: [N*Ho*Wo, C*k*k]
    n, c, h, w = x.shape
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _check_conv(x: Tensor, kernels: Tensor, stride: int) -> None:
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise InvalidArgument(f"kernels must be [F, C, k, k], got {kernels.shape}")
    if x.shape[1] != kernels.shape[1]:
        raise InvalidArgument(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}")
    if stride < 1:
        raise InvalidArgument(f"stride must be >= 1, got {stride}")
    k = kernels.shape[2]
    if x.shape[2] < k or x.shape[3] < k:
        raise InvalidArgument(f"input {x.shape[2:]} smaller than kernel {k}x{k}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding 2-d cross-correlation.

    ``x`` is ``[C, H, W]`` or ``[N, C, H, W]``; ``kernels`` is ``[F, C, k, k]``.
    """
    xb, single = _batched(as_tensor(x), 3)
    out, _ = conv2d_cols(xb, kernels, bias, stride)
    return out[0] if single else out


def conv2d_cols(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1):
    """Batched :func:`conv2d` that also returns the im2col matrix for reuse in backward."""
    _check_conv(x, kernels, stride)
    f, _, k, _ = kernels.shape
    if bias.shape != (f,):
        raise InvalidArgument(f"bias must have shape ({f},), got {bias.shape}")
    cols, ho, wo = _im2col(x, k, stride)
    out = cols @ kernels.reshape(f, -1).T + bias
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, f).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward(grad_out: Tensor, saved_input: Tensor, kernels: Tensor, stride: int = 1,
                    input_grad: bool = True, cols: Tensor | None = None):
    """Gradients of :func:`conv2d` w.r.t. input, kernels and bias.

    ``cols`` may carry the im2col matrix from :func:`conv2d_cols`.  With
    ``input_grad=False`` the first element of the result is ``None``.
    """
    xb, single = _batched(as_tensor(saved_input), 3)
    _check_conv(xb, kernels, stride)
    f, c, k, _ = kernels.shape
    n, _, h, w = xb.shape
    ho, wo = conv_output_size(h, k, stride), conv_output_size(w, k, stride)
    gb = grad_out[None] if single else grad_out
    if gb.shape != (n, f, ho, wo):
        raise InvalidArgument(f"grad_out shape {grad_out.shape} does not match forward output "
                              f"{(f, ho, wo) if single else (n, f, ho, wo)}")
    if cols is None:
        cols, _, _ = _im2col(xb, k, stride)
    g_nhwf = np.ascontiguousarray(gb.transpose(0, 2, 3, 1))
    g2 = g_nhwf.reshape(n * ho * wo, f)
    grad_kernels = (g2.T @ cols).reshape(f, c, k, k)
    grad_bias = g2.sum(axis=0)
    if not input_grad:
        return None, grad_kernels, grad_bias

    # scatter one kernel offset at a time; each offset is a dense [F, C] matmul
    k_t = np.ascontiguousarray(kernels.transpose(2, 3, 0, 1))   # [k, k, F, C]
    grad_x = np.zeros((n, h, w, c))
    hi, wi = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for a in range(k):
        for b in range(k):
            grad_x[:, a:a + hi:stride, b:b + wi:stride, :] += g_nhwf @ k_t[a, b]
    grad_x = np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2))
    return (grad_x[0] if single else grad_x), grad_kernels, grad_bias


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, saved_input: Tensor) -> Tensor:
    return grad_out * (saved_input > 0)


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    z = as_tensor(logits)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(probs: Tensor, grad_probs: Tensor, axis: int = -1) -> Tensor:
    return probs * (grad_probs - (grad_probs * probs).sum(axis=axis, keepdims=True))


def vector_norm(v, p=2) -> float:
    """p-norm of a 1-d vector; ``p`` is a positive integer or ``math.inf``."""
    a = np.abs(as_tensor(v)).ravel()
    if a.size == 0:
        return 0.0
    big = a.max()
    if p == math.inf or big == 0.0:
        return float(big)
    if p < 1:
        raise InvalidArgument(f"norm order must be >= 1, got {p}")
    # factoring out the max keeps a**p clear of both overflow and underflow
    return float(big * np.sum((a / big) ** p) ** (1.0 / p))


def matvec_votes(W: Tensor, u: Tensor) -> Tensor:
    """Prediction vectors ``out[..., i, j] = W[i, j] @ u[..., i]``.

    ``W`` is ``[Nin, Nout, dout, din]``; ``u`` is ``[Nin, din]`` or
    ``[N, Nin, din]``.
    """
    ub, single = _batched(as_tensor(u), 2)
    if W.ndim != 4 or W.shape[0] != ub.shape[1] or W.shape[3] != ub.shape[2]:
        raise InvalidArgument(f"W {W.shape} incompatible with capsules {ub.shape[1:]}")
    nin, nout, dout, din = W.shape
    n = ub.shape[0]
    out = W.reshape(nin, nout * dout, din) @ ub.transpose(1, 2, 0)   # [Nin, Nout*dout, N]
    out = out.transpose(2, 0, 1).reshape(n, nin, nout, dout)
    return out[0] if single else out


def matvec_votes_backward(grad_votes: Tensor, W: Tensor, u: Tensor) -> tuple[Tensor, Tensor]:
    """Returns ``(grad_W, grad_u)`` for :func:`matvec_votes`."""
    ub, single = _batched(as_tensor(u), 2)
    gb = grad_votes[None] if single else grad_votes
    nin, nout, dout, din = W.shape
    n = ub.shape[0]
    if gb.shape != (n, nin, nout, dout):
        raise InvalidArgument(f"grad_votes shape {grad_votes.shape} does not match votes")
    g = gb.reshape(n, nin, nout * dout).transpose(1, 2, 0)            # [Nin, Nout*dout, N]
    grad_W = (g @ ub.transpose(1, 0, 2)).reshape(nin, nout, dout, din)
    grad_u = (W.reshape(nin, nout * dout, din).transpose(0, 2, 1) @ g).transpose(2, 0, 1)
    return grad_W, (grad_u[0] if single else grad_u)
