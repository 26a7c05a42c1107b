"""Deterministic binary stochastic sampling, the software model of a p-bit.

Every random draw in the package comes from a counter-based Philox stream
keyed by ``(seed, purpose, epoch, sample, layer)``.  Within one key the
uniforms are consumed in C order over ``(tile, channel, row, col)``; that
flat position is the unit index.  Identical keys give identical draws no
matter how many worker threads run or how calls interleave, which is the
whole reproducibility contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.random import Generator, Philox

# Key purposes. New consumers must take a fresh value, never reuse one.
PURPOSE_ACTIVATION = 0
PURPOSE_SHUFFLE = 1
PURPOSE_INIT = 2
PURPOSE_IMPORTANCE = 3
PURPOSE_EVAL = 4

_SAMPLE_BITS = 16  # layer index lives in the low 16 bits of counter word 2


def logistic(x):
    """Numerically stable 1 / (1 + exp(-x)); saturates instead of overflowing.

    Single-exponential form: with t = sigma(-|x|) = e^{-|x|} / (1 + e^{-|x|}),
    sigma(x) is 1 - t for x >= 0 and t otherwise.
    """
    x = np.asarray(x)
    t = np.exp(-np.abs(x))
    t /= 1.0 + t
    out = np.where(x >= 0, 1.0 - t, t)
    if np.ndim(x) == 0:
        return float(out)
    return out


def surprise_indicator(rho, h):
    """Binary surprise: 1 when a unit fired against the odds.

    Equals ``h`` when the firing probability is at most one half, and
    ``1 - h`` otherwise. Its expectation over h ~ Bernoulli(rho) is
    min(rho, 1 - rho), a hill of activity peaking at rho = 1/2.
    """
    rho = np.asarray(rho)
    h = np.asarray(h)
    out = np.where(rho <= 0.5, h, 1 - h)
    if out.ndim == 0:
        return int(out)
    return out


@dataclass(frozen=True)
class PbitStream:
    """Keyed, stateless source of uniform(0, 1) draws.

    ``seed`` is the run seed; ``purpose`` separates independent consumers
    (activation sampling, shuffling, weight init, ...).  Draw blocks are
    addressed by ``(epoch, sample_index, layer_index)`` and are statistically
    independent across distinct keys.
    """

    seed: int
    purpose: int = PURPOSE_ACTIVATION

    def with_purpose(self, purpose: int) -> "PbitStream":
        return PbitStream(self.seed, purpose)

    def generator(self, epoch: int = 0, sample: int = 0, layer: int = 0) -> Generator:
        """Fresh generator positioned at unit 0 of the keyed block."""
        if layer >= (1 << _SAMPLE_BITS) or layer < 0:
            raise ValueError(f"layer index {layer} out of key range")
        if sample < 0 or epoch < 0:
            raise ValueError("epoch and sample indices must be nonnegative")
        word2 = (int(sample) << _SAMPLE_BITS) | int(layer)
        bg = Philox(key=[self.seed & (2**64 - 1), self.purpose],
                    counter=[0, 0, word2 & (2**64 - 1), int(epoch)])
        return Generator(bg)

    def uniforms(self, shape, epoch: int = 0, sample: int = 0, layer: int = 0) -> np.ndarray:
        """Uniform(0,1) block for one sample; flat C-order position = unit index."""
        return self.generator(epoch, sample, layer).random(shape, dtype=np.float32)


def bernoulli_layer(probs, stream: PbitStream, *, epoch: int = 0,
                    layer: int = 0, sample_ids=None):
    """Draw one bit per element: 1 iff prob > the element's keyed uniform.

    ``probs`` is an (N, ...) array or a real activation tensor, one keyed
    stream per leading index; ``sample_ids`` maps each row to its
    dataset-level sample index so the draw does not depend on how the batch
    was assembled.  Returns the same carrier flavor as the input.
    """
    wrap = hasattr(probs, "data") and hasattr(probs, "kind")
    vals = probs.data if wrap else np.asarray(probs)
    if vals.size and (vals.min() < 0.0 or vals.max() > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    n = vals.shape[0]
    if sample_ids is None:
        sample_ids = range(n)
    out = np.empty(vals.shape, dtype=np.uint8)
    for i, sid in zip(range(n), sample_ids):
        u = stream.uniforms(vals.shape[1:], epoch=epoch, sample=int(sid), layer=layer)
        out[i] = vals[i] > u
    if wrap:
        from .tensor import BINARY, Tensor4
        return Tensor4(out, BINARY)
    return out


def tiled_logistic_sample(x, tiles: int, stream: PbitStream, *, epoch: int = 0,
                          layer: int = 0, sample: int = 0):
    """Integer activation in [0, tiles]: a sum of shifted-bias logistic bits.

    Tile m of M fires with probability sigma(x - m + 0.5), m = 1..M, each
    against its own uniform.  M = 1 reduces to a Bernoulli draw on
    sigma(x - 0.5).  The sum approximates a rectifier response while staying
    integer-valued.
    """
    if tiles < 1:
        raise ValueError("tiles must be >= 1")
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=np.float32))
    shifts = (np.arange(1, tiles + 1, dtype=np.float32) - 0.5)
    probs = logistic(x[None, :] - shifts[:, None])  # (tiles, n)
    u = stream.uniforms(probs.shape, epoch=epoch, sample=sample, layer=layer)
    val = (probs > u).sum(axis=0).astype(np.uint8)
    if scalar:
        return int(val[0])
    return val


def tiled_expectation(x, tiles: int):
    """Mean response of the tiled unit: sum_m sigma(x - m + 0.5)."""
    x = np.asarray(x, dtype=np.float32)
    shifts = np.arange(1, tiles + 1, dtype=np.float32) - 0.5
    return logistic(x[None] - shifts.reshape((tiles,) + (1,) * x.ndim)).sum(axis=0)


def sample_activation_block(z: np.ndarray, tiles: int, stream: PbitStream, *,
                            epoch: int, layer: int, sample_ids,
                            delta_kind: str, shifted: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Sample a whole (N, C, H, W) pre-activation block of tiled units.

    Returns ``(values, delta)`` where ``values`` holds integers in [0, tiles]
    and ``delta`` is the stored per-unit gradient factor: the summed logistic
    derivative ``rho(1 - rho)`` per tile for ``delta_kind='smooth'``, or the
    summed binary surprise bits for ``delta_kind='surprise'``.

    ``shifted=False`` drops the linearly spaced biases (plain logistic units,
    only meaningful with ``tiles=1``).  One keyed block of shape
    (tiles, C, H, W) is drawn per sample, so the result is independent of
    batch composition and worker count.
    """
    if delta_kind not in ("smooth", "surprise"):
        raise ValueError(f"unknown delta_kind {delta_kind!r}")
    n = z.shape[0]
    if shifted:
        shifts = (np.arange(1, tiles + 1, dtype=np.float32) - 0.5)
    else:
        shifts = np.zeros(tiles, dtype=np.float32)
    # Probabilities are sample-independent given z and the draws are keyed
    # per sample; everything else runs batched over the block.
    p = logistic(z[None] - shifts[:, None, None, None, None])  # (tiles, N, C, H, W)
    u = np.empty_like(p)
    block = p.shape[0:1] + p.shape[2:]
    for i, sid in zip(range(n), sample_ids):
        u[:, i] = stream.uniforms(block, epoch=epoch, sample=int(sid), layer=layer)
    bits = p > u
    values = bits.sum(axis=0, dtype=np.uint8)
    if delta_kind == "smooth":
        delta = (p * (1.0 - p)).sum(axis=0, dtype=np.float32)
    else:
        # surprise bit = fired XOR (rho > 1/2), summed over tiles
        delta = (bits ^ (p > 0.5)).sum(axis=0, dtype=np.uint8)
    return values, delta
