"""The volumetric binary classifier assembled from the layer primitives.

Architecture family: N blocks of [Conv3d(3x3x3, valid) -> ReLU ->
MaxPool(2) -> BatchNorm], channel widths configurable, followed by
global average pooling, a ReLU dense layer, dropout, and a single
sigmoid output unit.  The default widths (64, 64, 128, 256) with a
512-unit dense layer give 1,351,873 trainable parameters and 1,352,897
including the batch-norm running statistics; both counts are asserted at
construction.

Input shape compatibility (each block needs >= 3 voxels per axis going
into its convolution and >= 2 going into its pool) is validated when the
model is built, never mid-training.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..rng import Stream, derive
from . import layers
from .layers import BatchNorm3d, Conv3d, Dense, MaxPool3d

DEFAULT_WIDTHS = (64, 64, 128, 256)
DEFAULT_DENSE_UNITS = 512
DEFAULT_INPUT_DIMS = (128, 128, 64)
DEFAULT_TRAINABLE_PARAMS = 1_351_873
DEFAULT_TOTAL_PARAMS = 1_352_897


@dataclass(frozen=True)
class Architecture:
    """Shape-defining hyperparameters; hashed into checkpoints."""

    widths: tuple[int, ...] = DEFAULT_WIDTHS
    dense_units: int = DEFAULT_DENSE_UNITS
    dropout_p: float = 0.3
    input_dims: tuple[int, int, int] = DEFAULT_INPUT_DIMS
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99

    def __post_init__(self):
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.dense_units < 1:
            raise ValueError(f"dense_units must be positive, got {self.dense_units}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def spatial_trace(self) -> list[tuple[int, int, int]]:
        """Spatial shape after each conv and each pool, in order.

        Raises ShapeError if the input dims cannot feed every block.
        """
        dims = tuple(int(d) for d in self.input_dims)
        trace = []
        for i, _ in enumerate(self.widths):
            if min(dims) < layers.KERNEL:
                raise ShapeError(
                    f"input dims {self.input_dims} leave {dims} at block {i}: too small for a "
                    f"{layers.KERNEL}x{layers.KERNEL}x{layers.KERNEL} valid convolution"
                )
            dims = tuple(d - (layers.KERNEL - 1) for d in dims)
            trace.append(dims)
            if min(dims) < 2:
                raise ShapeError(
                    f"input dims {self.input_dims} leave {dims} at block {i}: too small for 2x pooling"
                )
            dims = tuple(d // 2 for d in dims)
            trace.append(dims)
        return trace

    def canonical(self) -> str:
        return (
            f"widths={','.join(str(w) for w in self.widths)};dense={self.dense_units};"
            f"dropout={self.dropout_p!r};input={','.join(str(d) for d in self.input_dims)};"
            f"bn_eps={self.bn_epsilon!r};bn_mom={self.bn_momentum!r}"
        )

    def hash64(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")


class Cnn3d:
    """Trainable 3D CNN for binary volume classification."""

    def __init__(self, arch: Architecture = Architecture(), *, init_seed: int = 0, dtype=np.float32):
        arch.spatial_trace()  # reject incompatible input shapes up front
        self.arch = arch
        self.dtype = np.dtype(dtype)
        stream = Stream(derive(init_seed, 0x1217))

        self.blocks: list[tuple[Conv3d, MaxPool3d, BatchNorm3d]] = []
        in_ch = 1
        for width in arch.widths:
            conv = Conv3d(in_ch, width, stream=stream, dtype=dtype)
            bn = BatchNorm3d(width, epsilon=arch.bn_epsilon, momentum=arch.bn_momentum, dtype=dtype)
            self.blocks.append((conv, MaxPool3d(), bn))
            in_ch = width
        self.dense1 = Dense(in_ch, arch.dense_units, stream=stream, init="he", dtype=dtype)
        self.dense2 = Dense(arch.dense_units, 1, stream=stream, init="glorot", dtype=dtype)

        if arch.widths == DEFAULT_WIDTHS and arch.dense_units == DEFAULT_DENSE_UNITS:
            trainable, total = self.param_count()
            assert trainable == DEFAULT_TRAINABLE_PARAMS, f"trainable count drifted: {trainable}"
            assert total == DEFAULT_TOTAL_PARAMS, f"total count drifted: {total}"

    # -- parameter registry ------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (conv, _, bn) in enumerate(self.blocks):
            out[f"block{i}.conv.w"] = conv.w
            out[f"block{i}.conv.b"] = conv.b
            out[f"block{i}.bn.gamma"] = bn.gamma
            out[f"block{i}.bn.beta"] = bn.beta
        out["dense1.w"] = self.dense1.w
        out["dense1.b"] = self.dense1.b
        out["dense2.w"] = self.dense2.w
        out["dense2.b"] = self.dense2.b
        return out

    def running_stats(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (_, _, bn) in enumerate(self.blocks):
            out[f"block{i}.bn.running_mean"] = bn.running_mean
            out[f"block{i}.bn.running_var"] = bn.running_var
        return out

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        current = {**self.parameters(), **self.running_stats()}[name]
        if current.shape != value.shape:
            raise ShapeError(f"parameter {name} has shape {current.shape}, got {value.shape}")
        if name.endswith("running_mean") or name.endswith("running_var"):
            i = int(name.split(".")[0].removeprefix("block"))
            bn = self.blocks[i][2]
            setattr(bn, name.rsplit(".", 1)[1], value.astype(self.dtype))
        else:
            current[...] = value

    def param_count(self) -> tuple[int, int]:
        """(trainable, total-including-running-statistics) parameter counts."""
        trainable = sum(int(p.size) for p in self.parameters().values())
        total = trainable + sum(int(s.size) for s in self.running_stats().values())
        return trainable, total

    # -- forward / backward ------------------------------------------------

    def _check_batch(self, x: np.ndarray) -> None:
        expected = (1, *self.arch.input_dims)
        if x.ndim != 5 or x.shape[1:] != expected:
            raise ShapeError(f"batch shape {x.shape} does not match (batch, {', '.join(map(str, expected))})")

    def forward(self, x: np.ndarray, *, train: bool = False, dropout_seed: int = 0) -> np.ndarray:
        """Class probabilities, shape (batch,)."""
        probs, _ = self._forward_impl(np.asarray(x, dtype=self.dtype), train, dropout_seed, keep_caches=False)
        return probs

    def _forward_impl(self, x: np.ndarray, train: bool, dropout_seed: int, keep_caches: bool):
        self._check_batch(x)
        caches = [] if keep_caches else None
        h = x
        for conv, pool, bn in self.blocks:
            pre_act = conv.forward(h)
            activated = layers.relu_forward(pre_act)
            pooled, argmax = pool.forward(activated)
            normed, bn_cache = bn.forward(pooled, train)
            if keep_caches:
                caches.append((h, pre_act, argmax, activated.shape, bn_cache))
            h = normed
        feats = layers.gap_forward(h)
        hidden = self.dense1.forward(feats)
        hidden_act = layers.relu_forward(hidden)
        dropped, mask = layers.dropout_forward(hidden_act, self.arch.dropout_p, dropout_seed, train)
        logits = self.dense2.forward(dropped)
        probs = layers.sigmoid_forward(logits)
        if keep_caches:
            head_cache = (h.shape, feats, hidden, hidden_act, mask, dropped, probs)
            return probs[:, 0], (caches, head_cache)
        return probs[:, 0], None

    def backward(self, x: np.ndarray, labels: np.ndarray, *, dropout_seed: int = 0):
        """Train-mode forward plus full backprop.

        Returns (loss, probabilities, grads) where grads maps every
        trainable parameter name to its gradient.  Batch-norm running
        statistics are updated as a side effect, as in any training step.
        """
        x = np.asarray(x, dtype=self.dtype)
        labels = np.asarray(labels, dtype=self.dtype).ravel()
        probs, (caches, head_cache) = self._forward_impl(x, True, dropout_seed, keep_caches=True)
        loss, grad_probs = layers.bce_loss(probs, labels)

        last_shape, feats, hidden, hidden_act, mask, dropped, sig_out = head_cache
        grads: dict[str, np.ndarray] = {}
        g = layers.sigmoid_backward(sig_out, grad_probs[:, None])
        g, grads["dense2.w"], grads["dense2.b"] = self.dense2.backward(dropped, g)
        g = layers.dropout_backward(mask, self.arch.dropout_p, g)
        g = layers.relu_backward(hidden, g)
        g, grads["dense1.w"], grads["dense1.b"] = self.dense1.backward(feats, g)
        g = layers.gap_backward(last_shape, g)
        for i in range(len(self.blocks) - 1, -1, -1):
            conv, pool, bn = self.blocks[i]
            block_in, pre_act, argmax, act_shape, bn_cache = caches[i]
            g, grads[f"block{i}.bn.gamma"], grads[f"block{i}.bn.beta"] = bn.backward(bn_cache, g)
            g = pool.backward(argmax, act_shape, g)
            g = layers.relu_backward(pre_act, g)
            g, grads[f"block{i}.conv.w"], grads[f"block{i}.conv.b"] = conv.backward(block_in, g)
        return loss, probs, grads
