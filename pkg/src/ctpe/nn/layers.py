"""Network layers with hand-derived forward and backward passes.

Tensors are plain numpy arrays laid out (batch, channels, x, y, z) for
the convolutional stages and (batch, features) after global pooling.
There is no autodiff: each layer exposes ``forward`` and a ``backward``
that consumes exactly what the forward produced.  All arithmetic follows
the dtype of the layer's parameters — float32 for training, float64 for
finite-difference gradient checks.

Convolutions are evaluated offset-by-offset: a 3x3x3 valid convolution
is 27 shifted channel-mixing matmuls.  This keeps peak memory at one
activation copy (no im2col buffer of 27x the input) while still running
on BLAS.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError, StateError
from ..rng import Stream

KERNEL = 3  # all conv filters are 3x3x3


def _he_uniform(shape: tuple[int, ...], fan_in: int, stream: Stream, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    n = int(np.prod(shape))
    return (stream.uniform(n, -limit, limit)).reshape(shape).astype(dtype)


def _glorot_uniform(shape: tuple[int, ...], fan_in: int, fan_out: int, stream: Stream, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    n = int(np.prod(shape))
    return (stream.uniform(n, -limit, limit)).reshape(shape).astype(dtype)


def _require_rank5(x: np.ndarray, who: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{who} expects a (batch, channels, x, y, z) tensor, got rank {x.ndim}")


class Conv3d:
    """Valid (unpadded) 3x3x3 cross-correlation, stride 1."""

    def __init__(self, in_ch: int, out_ch: int, *, stream: Stream | None = None, dtype=np.float32):
        self.in_ch = in_ch
        self.out_ch = out_ch
        if stream is None:
            self.w = np.zeros((out_ch, in_ch, KERNEL, KERNEL, KERNEL), dtype=dtype)
        else:
            self.w = _he_uniform(
                (out_ch, in_ch, KERNEL, KERNEL, KERNEL), in_ch * KERNEL**3, stream, dtype
            )
        self.b = np.zeros(out_ch, dtype=dtype)

    def _check_input(self, x: np.ndarray) -> tuple[int, ...]:
        _require_rank5(x, "Conv3d")
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv3d built for {self.in_ch} input channels, got tensor shape {x.shape}")
        if min(x.shape[2:]) < KERNEL:
            raise ShapeError(f"Conv3d needs spatial extents >= {KERNEL}, got tensor shape {x.shape}")
        return tuple(d - (KERNEL - 1) for d in x.shape[2:])

    def forward(self, x: np.ndarray) -> np.ndarray:
        ox, oy, oz = self._check_input(x)
        batch = x.shape[0]
        acc = np.zeros((batch, ox, oy, oz, self.out_ch), dtype=self.w.dtype)
        for dx in range(KERNEL):
            for dy in range(KERNEL):
                for dz in range(KERNEL):
                    window = x[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz]
                    acc += np.tensordot(window, self.w[:, :, dx, dy, dz], axes=([1], [1]))
        out = np.ascontiguousarray(np.moveaxis(acc, -1, 1))
        out += self.b.reshape(1, -1, 1, 1, 1)
        return out

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Gradients of the forward map: (grad_x, grad_w, grad_b)."""
        ox, oy, oz = self._check_input(x)
        if grad_out.shape != (x.shape[0], self.out_ch, ox, oy, oz):
            raise ShapeError(
                f"grad_out shape {grad_out.shape} does not match forward output "
                f"{(x.shape[0], self.out_ch, ox, oy, oz)}"
            )
        grad_b = grad_out.sum(axis=(0, 2, 3, 4))
        grad_w = np.empty_like(self.w)
        grad_x = np.zeros_like(x)
        for dx in range(KERNEL):
            for dy in range(KERNEL):
                for dz in range(KERNEL):
                    window = x[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz]
                    grad_w[:, :, dx, dy, dz] = np.tensordot(
                        grad_out, window, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                    )
                    spread = np.tensordot(grad_out, self.w[:, :, dx, dy, dz], axes=([1], [0]))
                    grad_x[:, :, dx : dx + ox, dy : dy + oy, dz : dz + oz] += np.moveaxis(spread, -1, 1)
        return grad_x, grad_w, grad_b

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}


class MaxPool3d:
    """2x2x2 max pooling, stride 2; odd trailing slabs are dropped."""

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _require_rank5(x, "MaxPool3d")
        if min(x.shape[2:]) < 2:
            raise ShapeError(f"MaxPool3d needs spatial extents >= 2, got tensor shape {x.shape}")
        b, c, nx, ny, nz = x.shape
        hx, hy, hz = nx // 2, ny // 2, nz // 2
        blocks = (
            x[:, :, : 2 * hx, : 2 * hy, : 2 * hz]
            .reshape(b, c, hx, 2, hy, 2, hz, 2)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(b, c, hx, hy, hz, 8)
        )
        argmax = blocks.argmax(axis=-1).astype(np.uint8)
        out = np.take_along_axis(blocks, argmax[..., None].astype(np.intp), axis=-1)[..., 0]
        return np.ascontiguousarray(out), argmax

    def backward(self, argmax: np.ndarray, in_shape: tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
        b, c, nx, ny, nz = in_shape
        hx, hy, hz = grad_out.shape[2:]
        scattered = np.zeros((b, c, hx, hy, hz, 8), dtype=grad_out.dtype)
        np.put_along_axis(scattered, argmax[..., None].astype(np.intp), grad_out[..., None], axis=-1)
        grad_cropped = (
            scattered.reshape(b, c, hx, hy, hz, 2, 2, 2)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(b, c, 2 * hx, 2 * hy, 2 * hz)
        )
        grad_x = np.zeros(in_shape, dtype=grad_out.dtype)
        grad_x[:, :, : 2 * hx, : 2 * hy, : 2 * hz] = grad_cropped
        return grad_x


class BatchNorm3d:
    """Per-channel batch normalization over (batch, x, y, z).

    Training normalizes by the biased batch variance and blends the
    running statistics as ``running = momentum * running + (1 - momentum)
    * batch``; inference normalizes by the running statistics.
    """

    def __init__(self, channels: int, *, epsilon: float = 1e-3, momentum: float = 0.99, dtype=np.float32):
        self.channels = channels
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _check_input(self, x: np.ndarray) -> None:
        _require_rank5(x, "BatchNorm3d")
        if x.shape[1] != self.channels:
            raise ShapeError(f"BatchNorm3d built for {self.channels} channels, got tensor shape {x.shape}")

    def forward(self, x: np.ndarray, train: bool):
        """Returns (out, cache); cache is None in inference mode."""
        self._check_input(x)
        shape = (1, -1, 1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3, 4))
            var = x.var(axis=(0, 2, 3, 4))
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
            m = np.asarray(self.momentum, dtype=self.running_mean.dtype)
            self.running_mean = m * self.running_mean + (1 - m) * mean.astype(self.running_mean.dtype)
            self.running_var = m * self.running_var + (1 - m) * var.astype(self.running_var.dtype)
            out = self.gamma.reshape(shape) * xhat + self.beta.reshape(shape)
            return out, (xhat, inv_std)
        if not (np.isfinite(self.running_mean).all() and np.isfinite(self.running_var).all()):
            raise StateError("BatchNorm running statistics are non-finite (corrupted checkpoint?)")
        if (self.running_var < 0).any():
            raise StateError("BatchNorm running variance is negative (corrupted checkpoint?)")
        inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
        out = self.gamma.reshape(shape) * (x - self.running_mean.reshape(shape)) * inv_std.reshape(
            shape
        ) + self.beta.reshape(shape)
        return out, None

    def backward(self, cache, grad_out: np.ndarray):
        """Training-mode gradients: (grad_x, grad_gamma, grad_beta)."""
        xhat, inv_std = cache
        reduce_axes = (0, 2, 3, 4)
        count = grad_out.size // grad_out.shape[1]
        grad_beta = grad_out.sum(axis=reduce_axes)
        grad_gamma = (grad_out * xhat).sum(axis=reduce_axes)
        shape = (1, -1, 1, 1, 1)
        grad_x = (
            (self.gamma * inv_std).reshape(shape)
            * (grad_out - grad_beta.reshape(shape) / count - xhat * grad_gamma.reshape(shape) / count)
        )
        return grad_x, grad_gamma, grad_beta

    def params(self) -> dict[str, np.ndarray]:
        return {"gamma": self.gamma, "beta": self.beta}

    def running_stats(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class Dense:
    """Affine map on (batch, features) tensors."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        *,
        stream: Stream | None = None,
        init: str = "he",
        dtype=np.float32,
    ):
        self.in_features = in_features
        self.out_features = out_features
        if stream is None:
            self.w = np.zeros((in_features, out_features), dtype=dtype)
        elif init == "he":
            self.w = _he_uniform((in_features, out_features), in_features, stream, dtype)
        else:
            self.w = _glorot_uniform((in_features, out_features), in_features, out_features, stream, dtype)
        self.b = np.zeros(out_features, dtype=dtype)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Dense built for {self.in_features} inputs, got tensor shape {x.shape}")
        return x @ self.w + self.b

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        if grad_out.shape != (x.shape[0], self.out_features):
            raise ShapeError(f"grad_out shape {grad_out.shape} does not match ({x.shape[0]}, {self.out_features})")
        return grad_out @ self.w.T, x.T @ grad_out, grad_out.sum(axis=0)

    def params(self) -> dict[str, np.ndarray]:
        return {"w": self.w, "b": self.b}


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def gap_forward(x: np.ndarray) -> np.ndarray:
    """Per-(batch, channel) mean over all spatial positions."""
    _require_rank5(x, "global average pooling")
    return x.mean(axis=(2, 3, 4))


def gap_backward(in_shape: tuple[int, ...], grad_out: np.ndarray) -> np.ndarray:
    spatial = in_shape[2] * in_shape[3] * in_shape[4]
    return np.broadcast_to(
        (grad_out / spatial)[:, :, None, None, None], in_shape
    ).astype(grad_out.dtype, copy=True)


def dropout_forward(x: np.ndarray, p: float, seed: int, train: bool):
    """Inverted dropout: keep with probability 1-p, scale kept units by 1/(1-p).

    The mask is a pure function of ``seed`` via the counter RNG, so a fixed
    seed reproduces the exact forward pass.  Returns (out, mask); mask is
    None in inference mode, where dropout is the identity.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x, None
    u = Stream(seed).uniform(x.size)
    mask = (u >= p).reshape(x.shape)
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    return x * mask * scale, mask


def dropout_backward(mask: np.ndarray | None, p: float, grad_out: np.ndarray) -> np.ndarray:
    if mask is None:
        return grad_out
    return grad_out * mask * np.asarray(1.0 / (1.0 - p), dtype=grad_out.dtype)


def sigmoid_forward(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * y * (1.0 - y)


BCE_EPSILON = 1e-7


def bce_loss(p: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient with respect to p.

    Probabilities are clamped to [eps, 1-eps]; the gradient is evaluated
    at the clamped values (straight-through on the clamp) so saturated
    predictions still receive a finite, correctly-signed signal.
    """
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    if p.shape != y.shape:
        raise ValueError(f"probabilities {p.shape} and labels {y.shape} differ in shape")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    eps = np.asarray(BCE_EPSILON, dtype=p.dtype)
    pc = np.clip(p, eps, 1 - eps)
    loss = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log1p(-pc))))
    grad = (pc - y) / (pc * (1 - pc) * p.size)
    return loss, grad.astype(p.dtype)
