"""Convolutional encoder: grayscale image -> bank of annotation vectors.

The stack interleaves 3x3 convolutions (stride 1, padding 1, ReLU after
each, batch norm on the three deepest convs) with four max pools whose
strides multiply to 8 along both axes, so an H x W input becomes an
H/8 x W/8 x d feature map.  A fixed two-axis sinusoidal signal is added
so each feature vector carries its grid position, then the map is
flattened row-major into a MemoryBank the decoder attends over.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor, TensorError


@dataclass
class EncoderConfig:
    d: int = 512            # annotation vector width; conv channels scale d/8 .. d
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    timescale: float = 10000.0
    dtype: str = "f64"      # "f64" or "f32"

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


def positional_encoding(height: int, width: int, d: int,
                        timescale: float = 10000.0) -> np.ndarray:
    """Two-axis sinusoidal position signal, shape (d, height, width).

    The first d/2 channels encode the column index x, the second d/2 the
    row index y, each as interleaved sin/cos pairs:

        pe[2i]       = sin(x / timescale^(4i/d))
        pe[2i+1]     = cos(x / timescale^(4i/d))
        pe[d/2+2j]   = sin(y / timescale^(4j/d))
        pe[d/2+2j+1] = cos(y / timescale^(4j/d))

    for i, j in [0, d/4).  Positions are zero-based, so channels in
    [0, d/2) are constant along columns of fixed x and channels in
    [d/2, d) constant along rows of fixed y.
    """
    if d % 4 != 0:
        raise ValueError(f"positional encoding width must be a multiple of 4, got {d}")
    if height < 1 or width < 1:
        raise ValueError(f"positional encoding needs positive extent, got {height}x{width}")
    q = d // 4
    inv = timescale ** (-4.0 * np.arange(q) / d)            # (q,)
    ang_x = np.outer(inv, np.arange(width))                 # (q, W)
    ang_y = np.outer(inv, np.arange(height))                # (q, H)
    pe = np.zeros((d, height, width), dtype=np.float64)
    pe[0:d // 2:2] = np.sin(ang_x)[:, None, :]
    pe[1:d // 2:2] = np.cos(ang_x)[:, None, :]
    pe[d // 2::2] = np.sin(ang_y)[:, :, None]
    pe[d // 2 + 1::2] = np.cos(ang_y)[:, :, None]
    return pe


@dataclass
class MemoryBank:
    """Flattened encoder output the decoder attends over.

    entries has shape (B, L, d) with L = h_prime * w_prime; entry l of an
    image came from feature-map cell divmod(l, w_prime).  proj caches the
    attention key projection of entries for the lifetime of the bank (the
    bank is rebuilt on every forward pass, so the cache can never go
    stale against updated weights).
    """
    entries: Tensor
    h_prime: int
    w_prime: int
    proj: Tensor | None = None

    @property
    def length(self) -> int:
        return self.entries.shape[1]

    def provenance(self, index: int) -> tuple[int, int]:
        """Feature-map (row, col) that produced entry `index`."""
        if not 0 <= index < self.length:
            raise IndexError(f"memory index {index} out of range [0, {self.length})")
        return divmod(index, self.w_prime)


# (out_channels as a fraction of d, batchnorm?) per conv, and the pool
# that follows each stage; pools are (kh, kw) with stride = kernel.
_CONV_PLAN = [
    # (in_frac, out_frac, has_bn, pool_after)
    (None, 8, False, (2, 2)),   # 1 -> d/8
    (8, 4, False, (2, 2)),      # d/8 -> d/4
    (4, 2, True, None),         # d/4 -> d/2
    (2, 2, False, (1, 2)),      # d/2 -> d/2, pool width only
    (2, 1, True, (2, 1)),       # d/2 -> d,   pool height only
    (1, 1, True, None),         # d -> d
]


class Encoder:
    """Six-conv feature extractor with total downsampling 8x8."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        if config.d % 8 != 0:
            raise ValueError(f"encoder width d must be a multiple of 8, got {config.d}")
        self.config = config
        dt = config.np_dtype()
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.layers = []
        for idx, (in_frac, out_frac, has_bn, pool) in enumerate(_CONV_PLAN, start=1):
            cin = 1 if in_frac is None else config.d // in_frac
            cout = config.d // out_frac
            fan_in = cin * 9
            fan_out = cout * 9
            w = Parameter(f"enc.conv{idx}.w",
                          T.glorot_uniform((cout, cin, 3, 3), fan_in, fan_out, rng, dt))
            b = Parameter(f"enc.conv{idx}.b", np.zeros(cout, dtype=dt))
            self.params[w.name] = w
            self.params[b.name] = b
            bn = None
            if has_bn:
                gamma = Parameter(f"enc.bn{idx}.gamma", np.ones(cout, dtype=dt))
                beta = Parameter(f"enc.bn{idx}.beta", np.zeros(cout, dtype=dt))
                self.params[gamma.name] = gamma
                self.params[beta.name] = beta
                self.buffers[f"enc.bn{idx}.running_mean"] = np.zeros(cout, dtype=np.float64)
                self.buffers[f"enc.bn{idx}.running_var"] = np.ones(cout, dtype=np.float64)
                bn = idx
            self.layers.append((w, b, bn, pool))

    def cnn_forward(self, x: Tensor, train: bool = False) -> Tensor:
        """(B, 1, H, W) -> (B, d, H/8, W/8); H and W must be multiples of 8."""
        if x.ndim != 4 or x.shape[1] != 1:
            raise TensorError(f"encoder input must be (B, 1, H, W), got {x.shape}")
        _, _, h, w = x.shape
        if h % 8 != 0 or w % 8 != 0:
            raise TensorError(
                f"encoder input {h}x{w} is not a multiple of 8; pad the image "
                "(white, bottom/right) to the next multiple of 8 first"
            )
        out = x
        for w_p, b_p, bn, pool in self.layers:
            out = T.conv2d(out, w_p.tensor, b_p.tensor, stride=1, padding=1)
            if bn is not None:
                out = T.batchnorm2d(
                    out, self.params[f"enc.bn{bn}.gamma"].tensor,
                    self.params[f"enc.bn{bn}.beta"].tensor,
                    self.buffers[f"enc.bn{bn}.running_mean"],
                    self.buffers[f"enc.bn{bn}.running_var"],
                    momentum=self.config.bn_momentum, eps=self.config.bn_eps,
                    train=train,
                )
            out = T.relu(out)
            if pool is not None:
                out = T.maxpool2d(out, pool, pool)
        return out

    def encode(self, images, train: bool = False) -> MemoryBank:
        """Images -> MemoryBank.

        Accepts a single (H, W) grayscale array or a batch (B, 1, H, W);
        values are expected in [0, 1] (0 = black ink, 1 = white).
        """
        arr = images.data if isinstance(images, Tensor) else np.asarray(images)
        if arr.ndim == 2:
            arr = arr[None, None]
        x = images if isinstance(images, Tensor) else Tensor(arr.astype(self.config.np_dtype()))
        if x.ndim == 2:
            x = T.reshape(x, (1, 1) + x.shape)
        feats = self.cnn_forward(x, train=train)
        b, d, hp, wp = feats.shape
        pe = positional_encoding(hp, wp, d, self.config.timescale)
        feats = feats + Tensor(pe[None].astype(feats.dtype))
        entries = T.reshape(T.transpose(feats, (0, 2, 3, 1)), (b, hp * wp, d))
        return MemoryBank(entries=entries, h_prime=hp, w_prime=wp)
