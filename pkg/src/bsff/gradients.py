"""Weight-gradient estimators for layerwise forward-only training.

Five estimators over the dense single-layer abstraction, all descending a
layer-local exponential-family loss whose natural parameters are a fixed
readout of the hidden activity:

* ``lff_gradient``: deterministic units, the activity is the firing
  probability itself.
* ``bsff_gradient``: one binary sample per unit; the readout residual uses
  the sample, the derivative factor stays ``rho (1 - rho)``.
* ``bgbsff_gradient``: same, but the smooth derivative factor is replaced
  by the binary surprise indicator, making every per-sample factor except
  the input and the residual binary.
* ``exact_joint_gradient``: exact gradient of the enumerated variational
  bound; the ground-truth oracle for the estimators above (D <= 12).
* ``importance_gradient``: self-normalized importance estimator of the
  marginal-loss gradient, with the factorized Bernoulli prior as proposal.

``conv_layer_gradient`` lifts the estimators to an instrumented
convolutional layer: softmax residual on per-class goodness, optional
batch-norm backward, max-pool unrouting, the stored activation factor, and
a correlation with the layer input.  All math here runs in float64 for the
dense path and float32 for the conv path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeightsError, ShapeError
from .parallel import run_chunks
from .readout import (CWC, HINTON, ReadoutMatrix, conv_goodness, goodness_grad,
                      inverse_link, log_partition, natural_params, one_hot)
from .sampler import PbitStream, logistic, surprise_indicator, PURPOSE_IMPORTANCE
from .tensor import (AbsorbedBn, ArgmaxMap, BnStats, KernelBank, Tensor4,
                     _im2col, absorb_bn, int_bits, maxpool_scatter)

ENUM_CAP = 12


@dataclass
class GradSample:
    """One minibatch of dense-layer training state.

    ``x`` (B, Din) conditioners, ``y`` (B,) labels, ``rho`` (B, D) firing
    probabilities, ``h`` (B, D) the binary activities actually sampled, and
    ``eta`` (B, Ncat) the natural parameters computed from ``h``.
    """

    x: np.ndarray
    y: np.ndarray
    rho: np.ndarray
    h: np.ndarray
    eta: np.ndarray


def hidden_probs(w_in: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Firing probabilities sigma(W_in x) for a batch of inputs."""
    return logistic(np.asarray(x, dtype=np.float64) @ np.asarray(w_in, dtype=np.float64).T)


def make_sample(w_in, x, y, readout: ReadoutMatrix, stream: PbitStream | None = None,
                *, epoch: int = 0, layer: int = 0, sample_ids=None) -> GradSample:
    """Run the dense forward pass; ``stream=None`` keeps h deterministic (h = rho)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y))
    rho = hidden_probs(w_in, x)
    if stream is None:
        h = rho.copy()
    else:
        n = rho.shape[0]
        ids = sample_ids if sample_ids is not None else range(n)
        h = np.empty_like(rho)
        for i, sid in zip(range(n), ids):
            u = stream.generator(epoch, int(sid), layer).random(rho.shape[1])
            h[i] = rho[i] > u
    return GradSample(x, y, rho, h, natural_params(readout, h))


def _targets(y, readout: ReadoutMatrix) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if readout.mode == CWC:
        return one_hot(y, readout.ncat)
    return y.reshape(-1, 1).astype(np.float64)


def _unit_coeff(residual: np.ndarray, readout: ReadoutMatrix) -> np.ndarray:
    """(residual^T w_out,l) for every unit l: pick the unit's block, scale."""
    if readout.mode == HINTON:
        return np.repeat(residual, readout.d, axis=1) * readout.scale
    return np.repeat(residual, readout.block, axis=1) * readout.scale


def lff_gradient(sample: GradSample, readout: ReadoutMatrix) -> np.ndarray:
    """Deterministic layerwise gradient; the activity is rho itself."""
    eta = natural_params(readout, sample.rho)
    residual = inverse_link(eta, readout.mode) - _targets(sample.y, readout)
    factor = _unit_coeff(residual, readout) * sample.rho * (1.0 - sample.rho)
    return factor.T @ sample.x / sample.x.shape[0]


def bsff_gradient(sample: GradSample, readout: ReadoutMatrix) -> np.ndarray:
    """Single-sample variational gradient: sampled residual, smooth factor."""
    residual = inverse_link(sample.eta, readout.mode) - _targets(sample.y, readout)
    factor = _unit_coeff(residual, readout) * sample.rho * (1.0 - sample.rho)
    return factor.T @ sample.x / sample.x.shape[0]


def bgbsff_gradient(sample: GradSample, readout: ReadoutMatrix) -> np.ndarray:
    """Binary-gradient variant: the smooth factor becomes the surprise bit."""
    residual = inverse_link(sample.eta, readout.mode) - _targets(sample.y, readout)
    hill = surprise_indicator(sample.rho, sample.h).astype(np.float64)
    factor = _unit_coeff(residual, readout) * hill
    return factor.T @ sample.x / sample.x.shape[0]


def enumerate_states(d: int) -> np.ndarray:
    """All 2^d binary activity vectors, one per row."""
    if d > ENUM_CAP:
        raise ShapeError(f"enumeration capped at D={ENUM_CAP}, got {d}")
    idx = np.arange(2**d, dtype=np.uint32)
    return ((idx[:, None] >> np.arange(d)[None, :]) & 1).astype(np.float64)


def state_probs(states: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Probability of each enumerated state under independent Bernoullis."""
    return np.prod(states * rho + (1.0 - states) * (1.0 - rho), axis=1)


def _nll(states: np.ndarray, y, readout: ReadoutMatrix) -> np.ndarray:
    """Per-state negative log likelihood A(eta) - y.eta (up to a constant)."""
    eta = natural_params(readout, states)
    a = log_partition(eta, readout.mode)
    if readout.mode == CWC:
        return a - eta[:, int(y)]
    return a - float(y) * eta[:, 0]


def exact_joint_gradient(x, y, w_in, readout: ReadoutMatrix) -> np.ndarray:
    """Exact gradient of the enumerated variational bound.

    The bound is the expectation, under the factorized Bernoulli hidden
    distribution, of the output negative log likelihood.  Expanding the
    expectation over each unit's two values gives, per row l,
    ``E_h[ nll(h) (h_l - rho_l) ] x``; the enumeration is exact for
    D <= 12 and serves as ground truth for every stochastic estimator.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(y))
    d = readout.d
    states = enumerate_states(d)
    dw = np.zeros((d, x.shape[1]))
    for xb, yb in zip(x, ys):
        rho = hidden_probs(w_in, xb[None, :])[0]
        q = state_probs(states, rho)
        g = _nll(states, yb, readout)
        row = (q * g) @ (states - rho)  # (d,)
        dw += row[:, None] * xb[None, :]
    return dw / x.shape[0]


def enumerated_bound(x, y, w_in, readout: ReadoutMatrix) -> float:
    """The variational bound itself, enumerated; finite-difference target."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(y))
    states = enumerate_states(readout.d)
    total = 0.0
    for xb, yb in zip(x, ys):
        rho = hidden_probs(w_in, xb[None, :])[0]
        total += float(state_probs(states, rho) @ _nll(states, yb, readout))
    return total / x.shape[0]


def importance_gradient(x, y, w_in, readout: ReadoutMatrix,
                        n_samples: int | None = None,
                        stream: PbitStream | None = None) -> np.ndarray:
    """Self-normalized importance estimate of the marginal-loss gradient.

    Proposal: the factorized Bernoulli hidden distribution; weight: the
    output likelihood of each proposal draw.  ``n_samples=None`` enumerates
    every state (D <= 12), which closes the estimator to the exact marginal
    gradient.  Raises ``DegenerateWeightsError`` when all weights vanish.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(y))
    d = readout.d
    dw = np.zeros((d, x.shape[1]))
    if n_samples is not None and n_samples < 1:
        raise ShapeError("n_samples must be >= 1")
    stream = (stream or PbitStream(0)).with_purpose(PURPOSE_IMPORTANCE)
    for b, (xb, yb) in enumerate(zip(x, ys)):
        rho = hidden_probs(w_in, xb[None, :])[0]
        if n_samples is None:
            states = enumerate_states(d)
            base = state_probs(states, rho)
        else:
            u = stream.generator(0, b, 0).random((n_samples, d))
            states = (rho[None, :] > u).astype(np.float64)
            base = np.ones(len(states))
        eta = natural_params(readout, states)
        lik = np.exp(-(log_partition(eta, readout.mode)
                       - (eta[:, int(yb)] if readout.mode == CWC
                          else float(yb) * eta[:, 0])))
        weights = base * lik
        denom = weights.sum()
        if not np.isfinite(denom) or denom <= 0.0:
            raise DegenerateWeightsError("importance weights vanished")
        row = weights @ (rho[None, :] - states) / denom
        dw += row[:, None] * xb[None, :]
    return dw / x.shape[0]


# ---------------------------------------------------------------------------
# Convolutional lifting


@dataclass
class ConvLayerState:
    """Forward-pass state a conv layer stores for its local gradient.

    ``inp`` is the raw tensor the convolution consumed (pre-normalization
    values of the previous layer, or the image) and ``in_ab`` the folded
    scale/shift that was absorbed into the kernels, if any.  ``delta`` holds
    the per-unit activation factor stored during the forward pass (smooth
    rho(1-rho) sums, surprise bits, or a rectifier mask), at conv-output
    dims.  ``pooled`` is the pre-normalization pooled activation; ``stats``
    this layer's batch statistics when its loss sits after normalization.
    """

    kernels: KernelBank
    inp: Tensor4
    in_ab: AbsorbedBn | None
    delta: np.ndarray
    pooled: Tensor4
    amap: ArgmaxMap | None
    stats: BnStats | None
    loss_at: str
    ncat: int
    tiles: int = 1


def layer_loss_values(state: ConvLayerState) -> np.ndarray:
    """Pooled activations at the loss point (normalized or raw)."""
    pooled = state.pooled.as_float()
    if state.loss_at == "post_norm":
        if state.stats is None:
            raise ShapeError("post_norm loss needs batch statistics")
        ab = absorb_bn(state.stats)
        return ab.alpha[None, :, None, None] * pooled + ab.delta[None, :, None, None]
    if state.loss_at != "post_pool":
        raise ShapeError(f"unknown loss placement {state.loss_at!r}")
    return pooled


def goodness_residual(state: ConvLayerState, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-class softmax residual of the layer's goodness, plus the loss."""
    u = layer_loss_values(state)
    g = conv_goodness(u, state.ncat)
    probs = inverse_link(g, CWC)
    residual = probs - one_hot(y, state.ncat)
    nll = log_partition(g, CWC) - g[np.arange(len(y)), np.asarray(y)]
    return residual, nll


def conv_layer_gradient(state: ConvLayerState, residual: np.ndarray, kind: str,
                        ledger=None, layer: int = 1,
                        workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Local weight/bias gradient of one conv layer.

    Chain: class residual -> goodness derivative -> optional batch-norm
    backward -> max-pool unrouting -> stored activation factor -> correlation
    with the effective layer input.  Returns batch-mean (dW, db) matching the
    kernel bank's shapes.  Ledger increments follow the counting model of the
    energy module exactly.
    """
    if kind not in ("lff", "bsff", "bgbsff"):
        raise ShapeError(f"unknown estimator kind {kind!r}")
    n, c, hp, wp = state.pooled.dims
    if state.delta.shape[0] != n:
        raise ShapeError("stored forward state does not match batch")
    ncat = state.ncat
    group_c = c // ncat
    nj = group_c * hp * wp

    u = layer_loss_values(state)
    dtype = np.result_type(u.dtype, state.delta.dtype if state.delta.dtype.kind == "f"
                           else np.float32)
    coeff = np.repeat(np.asarray(residual, dtype=dtype), group_c, axis=1)
    dldu = goodness_grad(u, nj).astype(dtype) * coeff[:, :, None, None]

    if state.loss_at == "post_norm":
        pooled = state.pooled.as_float().astype(dtype, copy=False)
        var = (state.stats.sigma2 + state.stats.epsilon).astype(dtype)
        inv_std = (1.0 / np.sqrt(var))[None, :, None, None]
        mu_grad = dldu.mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        ubar = pooled - state.stats.mu.astype(dtype)[None, :, None, None]
        sigma_term = ((dldu * ubar).mean(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
                      / var[None, :, None, None])
        g_pool = inv_std * (dldu - mu_grad.astype(dtype)
                            - ubar * sigma_term.astype(dtype))
    else:
        g_pool = dldu

    g_full = maxpool_scatter(g_pool, state.amap) if state.amap is not None else g_pool
    dldz = g_full * state.delta.astype(dtype)

    x_eff = state.inp.as_float().astype(dtype, copy=False)
    if state.in_ab is not None:
        x_eff = (state.in_ab.alpha.astype(dtype)[None, :, None, None] * x_eff
                 + state.in_ab.delta.astype(dtype)[None, :, None, None])

    dw, db = _im2col_corr(x_eff, dldz, state.kernels, workers)

    if ledger is not None:
        _record_gradient_costs(ledger, state, kind, layer, n, c, hp, wp)
    return dw, db


def _im2col_corr(x_eff: np.ndarray, dldz: np.ndarray, kern: KernelBank,
                 workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Batch-mean correlation of the layer input with dL/dz, per group."""
    n = x_eff.shape[0]
    k = kern.k
    pad = (k - 1) // 2
    g_cnt, cpg_in, cpg_out = kern.groups, kern.c_in_per_group, kern.c_out // kern.groups
    hw = dldz.shape[2] * dldz.shape[3]
    go = dldz.reshape(n, kern.c_out, hw)
    dtype = np.result_type(x_eff.dtype, dldz.dtype)

    def corr_chunk(sl):
        acc = np.empty((kern.c_out, cpg_in * k * k), dtype=dtype)
        for gi in range(g_cnt):
            cols = _im2col(x_eff[sl, gi * cpg_in:(gi + 1) * cpg_in], k, 1, pad)
            acc[gi * cpg_out:(gi + 1) * cpg_out] = np.einsum(
                "ncp,nkp->ck", go[sl, gi * cpg_out:(gi + 1) * cpg_out], cols,
                optimize=True)
        return acc

    parts = run_chunks(corr_chunk, n, workers)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    dw = (total / n).reshape(kern.c_out, cpg_in, k, k)
    db = dldz.sum(axis=(2, 3)).mean(axis=0)
    return dw, db


def _record_gradient_costs(ledger, state: ConvLayerState, kind, layer, n, c, hp, wp):
    """Multiplication counts of the local gradient under the hardware model.

    Spatial gradient terms count at pooled dims: the pool routes one
    position per cell and products against the zeros are skipped.
    """
    kern = state.kernels
    k2 = kern.k * kern.k
    pairs = kern.c_out * kern.c_in_per_group
    with_bn = state.loss_at == "post_norm"
    in_binary = state.inp.kind != "real32"
    in_tiles = state.inp.levels if state.inp.kind == "smallint" else 1
    if kind == "lff":
        chain = 3 if with_bn else 1
        ledger.add_mults("gradient", layer, 32, 32, chain * n * c * hp * wp)
        ledger.add_mults("gradient", layer, 32, 32, n * pairs * k2 * hp * wp)
        return
    # Binary-stochastic estimators: the goodness/normalization chain runs on
    # binary masks and per-channel constants, nothing recorded.
    if kind == "bsff":
        ledger.add_mults("gradient", layer, 32, 32, n * c * hp * wp)
    elif state.tiles > 1:  # bgbsff with a small-int surprise factor
        ledger.add_mults("gradient", layer, int_bits(state.tiles), 32, n * c * hp * wp)
    if with_bn:
        if not in_binary:
            ledger.add_mults("gradient", layer, 32, 32, n * pairs * k2 * hp * wp)
        elif state.in_ab is not None:
            ledger.add_mults("gradient", layer, 32, 32, 2 * n * pairs * k2)
            if in_tiles > 1:
                ledger.add_mults("gradient", layer, int_bits(in_tiles), 32,
                                 in_tiles * n * pairs * k2)
    else:
        if kind == "bgbsff":
            ledger.add_mults("gradient", layer, 32, 32, n * pairs * k2)
        elif not in_binary:
            ledger.add_mults("gradient", layer, 32, 32, n * pairs * k2 * hp * wp)
