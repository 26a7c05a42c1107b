"""Fixed readout matrices, inverse links, and layerwise goodness losses.

The readout weights are never learned.  In channelwise-competitive mode the
hidden units are split into contiguous class blocks and each class's natural
parameter is the mean of its block; in the single-row mode it is the mean of
everything.  For binary activations both are pure block sums scaled by a
constant, so no multiplications are spent on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

HINTON = "hinton"
CWC = "cwc"


@dataclass(frozen=True)
class ReadoutMatrix:
    """Implicit structured readout; never materialized densely.

    ``cwc``: Ncat rows, row j holding D/Ncat entries of value Ncat/D on the
    j-th contiguous block. ``hinton``: a single row of 1/D.
    """

    mode: str
    d: int
    ncat: int = 1

    def __post_init__(self):
        if self.mode not in (HINTON, CWC):
            raise ShapeError(f"unknown readout mode {self.mode!r}")
        if self.mode == CWC and self.d % self.ncat:
            raise ShapeError(f"D={self.d} not divisible by Ncat={self.ncat}")

    @property
    def block(self) -> int:
        return self.d // self.ncat if self.mode == CWC else self.d

    @property
    def scale(self) -> float:
        """Value of every nonzero entry."""
        return self.ncat / self.d if self.mode == CWC else 1.0 / self.d

    def group_of(self, unit: int) -> int:
        """Class block owning hidden unit ``unit`` (0 in hinton mode)."""
        return unit // self.block if self.mode == CWC else 0

    def dense(self) -> np.ndarray:
        """Explicit matrix, for tests and probes only."""
        if self.mode == HINTON:
            return np.full((1, self.d), 1.0 / self.d)
        m = np.zeros((self.ncat, self.d))
        for j in range(self.ncat):
            m[j, j * self.block:(j + 1) * self.block] = self.scale
        return m


def natural_params(readout: ReadoutMatrix, h: np.ndarray) -> np.ndarray:
    """Block means of the activity vector: eta = W_out h.

    Accepts (D,) or batched (B, D); returns (Ncat,) / (B, Ncat) for cwc and
    (1,) / (B, 1) for hinton.  Implemented as block sums, float64 inside.
    """
    h = np.asarray(h)
    if h.shape[-1] != readout.d:
        raise ShapeError(f"expected activity length {readout.d}, got {h.shape[-1]}")
    hb = h.reshape(-1, readout.d).astype(np.float64)
    if readout.mode == HINTON:
        eta = hb.mean(axis=-1, keepdims=True)
    else:
        eta = hb.reshape(hb.shape[0], readout.ncat, readout.block).sum(axis=-1)
        eta *= readout.scale
    return eta.reshape(h.shape[:-1] + (eta.shape[-1],))


def inverse_link(eta: np.ndarray, mode: str) -> np.ndarray:
    """Mean mapping of the output family: softmax (cwc) or logistic (hinton)."""
    eta = np.asarray(eta, dtype=np.float64)
    if mode == HINTON:
        out = np.empty_like(eta)
        pos = eta >= 0
        np.divide(1.0, 1.0 + np.exp(-np.where(pos, eta, 0.0)), out=out, where=pos)
        ex = np.exp(np.where(pos, 0.0, eta))
        np.divide(ex, 1.0 + ex, out=out, where=~pos)
        return out
    if mode != CWC:
        raise ShapeError(f"unknown readout mode {mode!r}")
    shifted = eta - eta.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_partition(eta: np.ndarray, mode: str) -> np.ndarray:
    """A(eta): logsumexp for the categorical family, softplus for Bernoulli."""
    eta = np.asarray(eta, dtype=np.float64)
    if mode == HINTON:
        return np.logaddexp(0.0, eta[..., 0])
    m = eta.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(eta - m).sum(axis=-1, keepdims=True)))[..., 0]


def layer_loss(eta: np.ndarray, y, mode: str = CWC) -> np.ndarray:
    """Negative log-likelihood A(eta) - y.eta of the label under eta.

    ``y`` is an integer class (cwc) or a {0,1} target (hinton); batched when
    eta is batched.
    """
    eta = np.asarray(eta, dtype=np.float64)
    scalar = eta.ndim == 1
    etab = eta.reshape(-1, eta.shape[-1])
    yb = np.atleast_1d(np.asarray(y))
    if mode == CWC:
        if yb.min() < 0 or yb.max() >= etab.shape[-1]:
            raise ShapeError("label out of range")
        a = log_partition(etab, mode)
        loss = a - etab[np.arange(etab.shape[0]), yb]
    elif mode == HINTON:
        if np.any((yb != 0) & (yb != 1)):
            raise ShapeError("hinton labels must be 0 or 1")
        a = np.logaddexp(0.0, etab[:, 0])
        loss = a - yb * etab[:, 0]
    else:
        raise ShapeError(f"unknown readout mode {mode!r}")
    return float(loss[0]) if scalar else loss


def one_hot(y, ncat: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    out = np.zeros((y.shape[0], ncat))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def goodness_grad(u: np.ndarray, group_size: int) -> np.ndarray:
    """Derivative of a group's mean squared activation: (2/|N_j|) u."""
    if group_size <= 0:
        raise ShapeError("group must be non-empty")
    return (2.0 / group_size) * np.asarray(u)


def conv_goodness(u: np.ndarray, ncat: int) -> np.ndarray:
    """Per-class goodness of a conv activation map.

    ``u`` is (N, C, H, W) with C divisible by ncat; class j's goodness is the
    mean of u^2 over its contiguous channel block and all spatial positions.
    Returns (N, ncat), float64.
    """
    n, c, h, w = u.shape
    if c % ncat:
        raise ShapeError(f"channels {c} not divisible by classes {ncat}")
    sq = np.asarray(u, dtype=np.float64) ** 2
    return sq.reshape(n, ncat, (c // ncat) * h * w).mean(axis=-1)
