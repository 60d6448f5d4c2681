"""Feed-forward building blocks: MLPs, initialization, serialization.

Networks hold plain float64 numpy arrays and are lifted onto a tape at
forward time, so the same parameter arrays can be updated in place by the
optimizer between tapes.  Hidden layers apply ReLU, then batch normalization
(if enabled), then dropout (if enabled); the final layer is linear with an
optional sigmoid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from . import autodiff as ad

_MAGIC = b"CBRE"
_VERSION = 1
_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9


@dataclass(frozen=True)
class MlpConfig:
    """Shape and behaviour of one feed-forward network."""

    input_dim: int
    hidden_dim: int
    output_dim: int
    depth: int
    dropout_rate: float = 0.0
    use_batchnorm: bool = False
    final_activation: str = "none"

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        for name in ("input_dim", "hidden_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.final_activation not in ("none", "sigmoid"):
            raise ValueError(f"unknown final_activation {self.final_activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(out, in) pairs for every weight layer."""
        if self.depth == 1:
            return [(self.output_dim, self.input_dim)]
        dims = [(self.hidden_dim, self.input_dim)]
        dims += [(self.hidden_dim, self.hidden_dim)] * (self.depth - 2)
        dims.append((self.output_dim, self.hidden_dim))
        return dims


class _BatchNormState:
    __slots__ = ("gamma", "beta", "running_mean", "running_var")

    def __init__(self, dim: int):
        self.gamma = np.ones((1, dim))
        self.beta = np.zeros((1, dim))
        self.running_mean = np.zeros((1, dim))
        self.running_var = np.ones((1, dim))


class Mlp:
    """A stack of affine layers with ReLU/batchnorm/dropout between them.

    ``mode`` selects train behaviour (dropout active, batchnorm batch
    statistics) versus eval behaviour (deterministic, running statistics).
    """

    def __init__(self, config: MlpConfig, weights, biases, batchnorms):
        self.config = config
        self.weights: list[np.ndarray] = weights
        self.biases: list[np.ndarray] = biases
        self.batchnorms: list[_BatchNormState | None] = batchnorms
        self.mode = "train"

    def parameters(self) -> list[np.ndarray]:
        """All trainable arrays, weights first, in layer order."""
        out: list[np.ndarray] = []
        for i in range(len(self.weights)):
            out.append(self.weights[i])
            out.append(self.biases[i])
            bn = self.batchnorms[i]
            if bn is not None:
                out.append(bn.gamma)
                out.append(bn.beta)
        return out

    def weight_matrices(self) -> list[np.ndarray]:
        return list(self.weights)

    def forward(
        self,
        tape: ad.Tape,
        x: ad.Tensor,
        mode: str | None = None,
        rng: np.random.Generator | None = None,
        update_stats: bool | None = None,
    ) -> ad.Tensor:
        """Apply the network to a batch, recording every op on the tape."""
        mode = self.mode if mode is None else mode
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        training = mode == "train"
        if update_stats is None:
            update_stats = training
        cfg = self.config
        if x.value.ndim != 2 or x.value.shape[1] != cfg.input_dim:
            raise ValueError(
                f"forward: expected (n, {cfg.input_dim}) input, got {x.value.shape}"
            )
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            wt = tape.param(w)
            bt = tape.param(b)
            h = ad.add(ad.matmul(h, ad.transpose(wt)), bt)
            if i == last:
                break
            h = ad.relu(h)
            bn = self.batchnorms[i]
            if bn is not None:
                h = self._batchnorm(tape, h, bn, training, update_stats)
            if cfg.dropout_rate > 0.0 and training:
                if rng is None:
                    raise ValueError("dropout in train mode requires an rng")
                keep = 1.0 - cfg.dropout_rate
                mask = (rng.random(h.value.shape) < keep) / keep
                h = ad.mul_elem(h, tape.const(mask))
        if cfg.final_activation == "sigmoid":
            h = ad.sigmoid(h)
        return h

    def _batchnorm(
        self,
        tape: ad.Tape,
        h: ad.Tensor,
        bn: _BatchNormState,
        training: bool,
        update_stats: bool,
    ) -> ad.Tensor:
        n, m = h.value.shape
        gamma = tape.param(bn.gamma)
        beta = tape.param(bn.beta)
        if training:
            col_mean = ad.matmul(tape.const(np.full((1, n), 1.0 / n)), h)
            centered = ad.add(h, ad.scalar_mul(-1.0, col_mean))
            col_var = ad.matmul(tape.const(np.full((1, n), 1.0 / n)), ad.square(centered))
            if update_stats:
                bn.running_mean *= _BN_MOMENTUM
                bn.running_mean += (1.0 - _BN_MOMENTUM) * col_mean.value
                bn.running_var *= _BN_MOMENTUM
                bn.running_var += (1.0 - _BN_MOMENTUM) * col_var.value
        else:
            col_mean = tape.const(bn.running_mean)
            centered = ad.add(h, ad.scalar_mul(-1.0, col_mean))
            col_var = tape.const(bn.running_var)
        inv_std = ad.recip(ad.sqrt_eps(ad.add(col_var, tape.const(np.full((1, m), _BN_EPS)))))
        # Row replication via ones-column matmul keeps the scale
        # differentiable with plain same-shape elementwise ops.
        ones_col = tape.const(np.ones((n, 1)))
        scale = ad.matmul(ones_col, ad.mul_elem(inv_std, gamma))
        return ad.add(ad.mul_elem(centered, scale), beta)


def init_mlp(config: MlpConfig, seed: int) -> Mlp:
    """He-initialized network: W ~ Normal(0, 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases, batchnorms = [], [], []
    n_layers = len(config.layer_dims())
    for i, (out_dim, in_dim) in enumerate(config.layer_dims()):
        std = np.sqrt(2.0 / in_dim)
        weights.append(rng.standard_normal((out_dim, in_dim)) * std)
        biases.append(np.zeros((1, out_dim)))
        hidden = i < n_layers - 1
        batchnorms.append(_BatchNormState(out_dim) if config.use_batchnorm and hidden else None)
    return Mlp(config, weights, biases, batchnorms)


# ---------------------------------------------------------------------------
# Binary parameter serialization: magic, version, layer count, then
# per-layer row-major little-endian float64 weight and bias blocks (plus
# batchnorm blocks where present).


def _write_array(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f: BinaryIO, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    buf = f.read(count * 8)
    if len(buf) != count * 8:
        raise ValueError("parameter file truncated")
    return np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)


def save_mlp(net: Mlp, f: BinaryIO) -> None:
    """Append one network's parameter block to a binary stream."""
    f.write(_MAGIC)
    f.write(struct.pack("<I", _VERSION))
    f.write(struct.pack("<I", len(net.weights)))
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        bn = net.batchnorms[i]
        f.write(struct.pack("<IIB", w.shape[0], w.shape[1], 1 if bn is not None else 0))
        _write_array(f, w)
        _write_array(f, b)
        if bn is not None:
            for arr in (bn.gamma, bn.beta, bn.running_mean, bn.running_var):
                _write_array(f, arr)


def load_mlp(net: Mlp, f: BinaryIO) -> None:
    """Read one parameter block into an existing network, in place.

    In-place assignment keeps array identities stable, so optimizer state
    and tape parameter caches keyed by identity remain valid.
    """
    magic = f.read(4)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    (n_layers,) = struct.unpack("<I", f.read(4))
    if n_layers != len(net.weights):
        raise ValueError(f"layer count mismatch: file {n_layers}, net {len(net.weights)}")
    for i in range(n_layers):
        out_dim, in_dim, bn_flag = struct.unpack("<IIB", f.read(9))
        if (out_dim, in_dim) != net.weights[i].shape:
            raise ValueError(
                f"layer {i} shape mismatch: file ({out_dim}, {in_dim}), "
                f"net {net.weights[i].shape}"
            )
        has_bn = net.batchnorms[i] is not None
        if bool(bn_flag) != has_bn:
            raise ValueError(f"layer {i} batchnorm flag mismatch")
        net.weights[i][:] = _read_array(f, (out_dim, in_dim))
        net.biases[i][:] = _read_array(f, (1, out_dim))
        if has_bn:
            bn = net.batchnorms[i]
            bn.gamma[:] = _read_array(f, (1, out_dim))
            bn.beta[:] = _read_array(f, (1, out_dim))
            bn.running_mean[:] = _read_array(f, (1, out_dim))
            bn.running_var[:] = _read_array(f, (1, out_dim))
