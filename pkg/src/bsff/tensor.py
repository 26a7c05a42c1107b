"""Dense tensor kernels for real and binary activations.

Everything here is a pure function over (batch, channel, height, width)
arrays.  Convolutions report their multiplication counts to an energy
ledger, bucketed by operand bit widths: a real convolution pays one 32x32
multiply per kernel tap, a binary convolution pays none (it reduces to
indexing and adding), and a small-integer convolution pays narrow
multiplies.  The counts follow the idealized hardware model, not what the
host BLAS happens to do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

REAL = "real32"
BINARY = "binary"
SMALLINT = "smallint"


def int_bits(levels: int) -> int:
    """Bits needed for integers in [0, levels]: ceil(log2(levels + 1))."""
    return max(1, int(np.ceil(np.log2(levels + 1))))


@dataclass
class Tensor4:
    """Rank-4 activation carrier in (N, C, H, W) layout.

    ``kind`` declares the storage class: ``real32`` (float), ``binary``
    (one bit per element, values in {0, 1}) or ``smallint`` (integers in
    [0, levels], ceil(log2(levels+1)) bits per element).  Binary and
    small-int data travel as uint8 in host memory; ``packed()`` gives the
    1-bit-per-element wire form used by checkpoints.
    """

    data: np.ndarray
    kind: str = REAL
    levels: int = 1  # max value for smallint storage

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"expected 4 dims, got shape {self.data.shape}")
        if self.kind == BINARY:
            if self.data.size and (self.data.max() > 1 or self.data.min() < 0):
                raise ShapeError("binary tensor holds values outside {0, 1}")
            self.levels = 1
        elif self.kind == SMALLINT:
            if self.data.size and (self.data.max() > self.levels or self.data.min() < 0):
                raise ShapeError(f"smallint tensor exceeds level cap {self.levels}")
        elif self.kind != REAL:
            raise ShapeError(f"unknown storage kind {self.kind!r}")

    @property
    def dims(self):
        return self.data.shape

    @property
    def bits(self) -> int:
        """Per-element storage width under the cost model."""
        if self.kind == REAL:
            return 32
        if self.kind == BINARY:
            return 1
        return int_bits(self.levels)

    def at(self, n, c, h, w):
        return self.data[n, c, h, w]

    def as_float(self) -> np.ndarray:
        if self.data.dtype.kind == "f":
            return self.data
        return self.data.astype(np.float32)

    def packed(self) -> np.ndarray:
        """Bit-packed bytes (binary tensors only), 8 elements per byte."""
        if self.kind != BINARY:
            raise ShapeError("only binary tensors pack to 1 bit/element")
        return np.packbits(self.data.astype(np.uint8).ravel())

    @staticmethod
    def from_packed(packed: np.ndarray, dims) -> "Tensor4":
        flat = np.unpackbits(packed)[: int(np.prod(dims))]
        return Tensor4(flat.reshape(dims).astype(np.uint8), BINARY)


@dataclass
class KernelBank:
    """Convolution weights (C_out, C_in_per_group, K, K) plus per-channel bias."""

    weights: np.ndarray
    bias: np.ndarray
    groups: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError("kernel weights must be rank 4")
        c_out, _, kh, kw = self.weights.shape
        if kh != kw:
            raise ShapeError("kernels must be square")
        if c_out % self.groups:
            raise ShapeError("C_out must be divisible by groups")
        if self.bias.shape != (c_out,):
            raise ShapeError("bias length must equal C_out")

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in_per_group(self) -> int:
        return self.weights.shape[1]

    @property
    def k(self) -> int:
        return self.weights.shape[2]


@dataclass
class BnStats:
    """Per-channel batch mean and (biased) variance."""

    mu: np.ndarray
    sigma2: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ShapeError("epsilon must be positive")
        if np.any(self.sigma2 < 0):
            raise ShapeError("variance must be nonnegative")


@dataclass
class AbsorbedBn:
    """Normalization folded to per-channel scale/shift: u = alpha*x + delta."""

    alpha: np.ndarray
    delta: np.ndarray


@dataclass
class ArgmaxMap:
    """Winning input coordinates of a 2x2 max pool, for gradient routing.

    ``rows``/``cols`` give, per pooled cell, the input coordinates of the
    maximum (ties broken toward the lowest flat row-major index).
    """

    rows: np.ndarray
    cols: np.ndarray
    in_hw: tuple[int, int]


def _out_hw(h, w, k, stride, padding):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding requires an odd kernel")
        ph = (k - 1) // 2
    elif padding == "valid":
        ph = 0
    else:
        raise ShapeError(f"unknown padding {padding!r}")
    h_out = (h + 2 * ph - k) // stride + 1
    w_out = (w + 2 * ph - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(f"non-positive output dims {h_out}x{w_out}")
    return h_out, w_out, ph


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*K*K, H_out*W_out) patch matrix."""
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2], x.shape[3]
    h_out = (hp - k) // stride + 1
    w_out = (wp - k) // stride + 1
    sn, sc, sh, sw = x.strides
    patches = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, k, k, h_out, w_out),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(patches).reshape(n, c * k * k, h_out * w_out)


def conv_mult_count(n, c_in_per_group, c_out, k, h_out, w_out) -> int:
    """Multiplies in a direct convolution: one per kernel tap per output."""
    return int(n) * int(c_in_per_group) * int(c_out) * int(k) * int(k) * int(h_out) * int(w_out)


def conv2d(inp: Tensor4, kernels: KernelBank, stride: int = 1,
           padding: str = "same", ledger=None, *, phase: str = "forward",
           layer: int = 1) -> Tensor4:
    """Cross-correlate ``inp`` with a kernel bank (grouped, with bias).

    Real input records ``N * C_in_pg * C_out * K^2 * H_out * W_out``
    multiplications in the 32x32 bucket.  Binary input records none: each
    tap is an indexed add.  Small-int input records the same count in the
    (narrow x 32) bucket.
    """
    n, c_in, h, w = inp.dims
    g = kernels.groups
    if c_in != g * kernels.c_in_per_group:
        raise ShapeError(
            f"input channels {c_in} != groups {g} x {kernels.c_in_per_group}")
    k = kernels.k
    h_out, w_out, pad = _out_hw(h, w, k, stride, padding)

    x = inp.as_float()
    c_out = kernels.c_out
    cpg_in = kernels.c_in_per_group
    cpg_out = c_out // g
    dtype = np.result_type(x.dtype, kernels.weights.dtype)
    out = np.empty((n, c_out, h_out * w_out), dtype=dtype)
    wmat = kernels.weights.reshape(c_out, cpg_in * k * k).astype(dtype, copy=False)
    for gi in range(g):
        cols = _im2col(x.astype(dtype, copy=False)[:, gi * cpg_in:(gi + 1) * cpg_in],
                       k, stride, pad)
        np.matmul(wmat[gi * cpg_out:(gi + 1) * cpg_out], cols,
                  out=out[:, gi * cpg_out:(gi + 1) * cpg_out])
    out = out.reshape(n, c_out, h_out, w_out)
    out += kernels.bias[None, :, None, None]

    if ledger is not None:
        count = conv_mult_count(n, cpg_in, c_out, k, h_out, w_out)
        if inp.kind == REAL:
            ledger.add_mults(phase, layer, 32, 32, count)
        elif inp.kind == SMALLINT and inp.levels > 1:
            ledger.add_mults(phase, layer, inp.bits, 32, count)
        # binary input: indexing and adding only, nothing recorded
    return Tensor4(out, REAL)


def maxpool2x2(inp: Tensor4) -> tuple[Tensor4, ArgmaxMap]:
    """2x2 stride-2 max pool; ties go to the lowest flat row-major index."""
    n, c, h, w = inp.dims
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even, got {h}x{w}")
    x = inp.data
    s0 = x[:, :, 0::2, 0::2]
    s1 = x[:, :, 0::2, 1::2]
    s2 = x[:, :, 1::2, 0::2]
    s3 = x[:, :, 1::2, 1::2]
    pooled = np.maximum(np.maximum(s0, s1), np.maximum(s2, s3))
    # first slice (in row-major block order) attaining the max wins
    idx = np.where(s0 == pooled, 0,
                   np.where(s1 == pooled, 1,
                            np.where(s2 == pooled, 2, 3))).astype(np.int32)
    hh = np.arange(h // 2, dtype=np.int32)[None, None, :, None]
    ww = np.arange(w // 2, dtype=np.int32)[None, None, None, :]
    rows = hh * 2 + idx // 2
    cols = ww * 2 + idx % 2
    out = Tensor4(np.ascontiguousarray(pooled), inp.kind, inp.levels)
    return out, ArgmaxMap(rows, cols, (h, w))


def maxpool_scatter(grad_pooled: np.ndarray, amap: ArgmaxMap) -> np.ndarray:
    """Route a pooled-space gradient back to the winning input positions."""
    n, c, hp, wp = grad_pooled.shape
    h, w = amap.in_hw
    out = np.zeros((n, c, h, w), dtype=grad_pooled.dtype)
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    out[ni, ci, amap.rows, amap.cols] = grad_pooled
    return out


def batch_stats(inp: Tensor4) -> BnStats:
    """Per-channel mean/variance over (N, H, W); variance clamped at 0."""
    n, c, h, w = inp.dims
    if n * h * w < 2:
        raise ShapeError("need at least two elements per channel")
    x = inp.as_float()
    mu = x.mean(axis=(0, 2, 3), dtype=np.float64)
    ex2 = (x.astype(np.float64) ** 2).mean(axis=(0, 2, 3))
    sigma2 = np.maximum(ex2 - mu**2, 0.0)
    return BnStats(mu.astype(x.dtype), sigma2.astype(x.dtype))


def apply_bn(inp: Tensor4, stats: BnStats) -> Tensor4:
    """Plain z-scoring per channel: (x - mu) / sqrt(sigma2 + eps)."""
    if inp.dims[1] != stats.mu.shape[0]:
        raise ShapeError("channel count mismatch between input and stats")
    x = inp.as_float()
    inv = (1.0 / np.sqrt(stats.sigma2 + stats.epsilon)).astype(x.dtype)
    out = (x - stats.mu[None, :, None, None].astype(x.dtype)) * inv[None, :, None, None]
    return Tensor4(out, REAL)


def absorb_bn(stats: BnStats) -> AbsorbedBn:
    """Fold z-scoring into per-channel constants alpha, delta."""
    alpha = 1.0 / np.sqrt(stats.sigma2 + stats.epsilon)
    delta = -stats.mu * alpha
    return AbsorbedBn(np.asarray(alpha), np.asarray(delta))


def identity_absorbed(c: int) -> AbsorbedBn:
    return AbsorbedBn(np.ones(c, dtype=np.float32), np.zeros(c, dtype=np.float32))


def conv_absorbed(inp: Tensor4, kernels: KernelBank, ab: AbsorbedBn,
                  ledger=None, *, stride: int = 1, padding: str = "same",
                  phase: str = "forward", layer: int = 2) -> Tensor4:
    """Convolve pre-normalization binary/small-int input with folded constants.

    Computes ``sum_c' W[c,c'] * (alpha[c'] u[c'] + delta[c'])`` without ever
    materializing a real-valued activation tensor: the scale folds into the
    kernels and the shift becomes an input-independent additive map.  Cost
    per sample and channel pair is 2*K^2 full-width multiplies (the folded
    constants), plus M*K^2 narrow multiplies when the input has M > 1 levels.
    """
    if inp.kind == REAL:
        raise ShapeError("conv_absorbed expects binary or small-int input")
    n, c_in, h, w = inp.dims
    g = kernels.groups
    if c_in != g * kernels.c_in_per_group:
        raise ShapeError("input channels do not match kernel bank")
    if ab.alpha.shape[0] != c_in:
        raise ShapeError("absorbed constants do not match input channels")

    scaled = KernelBank(
        kernels.weights * _per_group_alpha(ab.alpha, kernels)[:, :, None, None],
        kernels.bias, kernels.groups)
    out = conv2d(inp, scaled, stride, padding, None)

    # Shift term: delta inside the image, zero in the padding, so it is the
    # same convolution applied to a batch-independent constant image.
    shift_dtype = np.result_type(ab.delta.dtype, kernels.weights.dtype)
    ones = Tensor4(np.broadcast_to(
        ab.delta[None, :, None, None], (1, c_in, h, w)).astype(shift_dtype).copy(), REAL)
    zero_bias = KernelBank(kernels.weights, np.zeros_like(kernels.bias), kernels.groups)
    shift = conv2d(ones, zero_bias, stride, padding, None)
    out = Tensor4(out.data + shift.data, REAL)

    if ledger is not None:
        k = kernels.k
        folds = 2 * n * kernels.c_out * kernels.c_in_per_group * k * k
        ledger.add_mults(phase, layer, 32, 32, folds)
        if inp.kind == SMALLINT and inp.levels > 1:
            narrow = inp.levels * n * kernels.c_out * kernels.c_in_per_group * k * k
            ledger.add_mults(phase, layer, inp.bits, 32, narrow)
    return out


def _per_group_alpha(alpha: np.ndarray, kernels: KernelBank) -> np.ndarray:
    """Alpha seen by each (output channel, in-group channel) weight slice."""
    cpg_in = kernels.c_in_per_group
    per_out = np.repeat(
        alpha.reshape(kernels.groups, cpg_in),
        kernels.c_out // kernels.groups, axis=0)
    return per_out  # (C_out, C_in_pg)
