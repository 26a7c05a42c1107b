"""Greedy layerwise training with staggered termination.

Every layer descends its own goodness loss; no gradient crosses a layer
boundary.  All layers train simultaneously on the same forward pass, each
stopping at its own end epoch, after which its weights and normalization
statistics are frozen.  Once every conv layer has frozen, a linear softmax
head is trained on the final layer's features; all reported accuracies come
from that head.

Frozen layers keep sampling stochastically while later layers still train
(the units are stochastic devices; freezing only pins parameters).  For
classifier training and evaluation the default policy replaces activations
by their expectations, which makes features deterministic and cacheable;
sampled majority-vote evaluation is available behind a flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyLedger, LayerGeom
from .errors import ConfigError, NanLossError, ShapeError
from .gradients import ConvLayerState, conv_layer_gradient, goodness_residual
from .parallel import run_chunks
from .readout import CWC, inverse_link, log_partition, one_hot
from .sampler import (PURPOSE_EVAL, PURPOSE_INIT, PURPOSE_SHUFFLE, PbitStream,
                      logistic, sample_activation_block, tiled_expectation)
from .tensor import (BINARY, REAL, SMALLINT, ArgmaxMap, BnStats, KernelBank,
                     Tensor4, absorb_bn, apply_bn, batch_stats, conv2d,
                     conv_absorbed, int_bits, maxpool2x2)

RELU = "relu"
LOGISTIC_BSN = "logistic_bsn"
TILED = "tiled_logistic"

BN_MOMENTUM = 0.1


@dataclass
class LayerSpec:
    out_channels: int
    kernel: int = 3
    groups: int = 1
    activation: str = TILED
    tiles: int = 1
    pool: str = "none"          # none | max2x2
    norm: str = "batchnorm"     # batchnorm | zscore_only | none
    loss_at: str = ""           # post_norm | post_pool; default follows norm

    def __post_init__(self):
        if self.activation not in (RELU, LOGISTIC_BSN, TILED):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.activation == LOGISTIC_BSN and self.tiles != 1:
            raise ConfigError("logistic_bsn units have a single p-bit")
        if self.tiles < 1:
            raise ConfigError("tiles must be >= 1")
        if self.pool not in ("none", "max2x2"):
            raise ConfigError(f"unknown pool {self.pool!r}")
        if self.norm not in ("batchnorm", "zscore_only", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if not self.loss_at:
            self.loss_at = "post_norm" if self.norm == "batchnorm" else "post_pool"
        if self.loss_at not in ("post_norm", "post_pool"):
            raise ConfigError(f"unknown loss placement {self.loss_at!r}")
        if self.loss_at == "post_norm" and self.norm == "none":
            raise ConfigError("post_norm loss needs a normalization mode")

    @property
    def stochastic(self) -> bool:
        return self.activation != RELU


@dataclass
class NetSpec:
    in_channels: int
    image_hw: tuple[int, int]
    ncat: int
    layers: list[LayerSpec]

    def __post_init__(self):
        h, w = self.image_hw
        for i, layer in enumerate(self.layers):
            if layer.out_channels % self.ncat:
                raise ConfigError(
                    f"layer {i + 1}: {layer.out_channels} channels not divisible "
                    f"by {self.ncat} classes")
            c_in = self.in_channels if i == 0 else self.layers[i - 1].out_channels
            if c_in % layer.groups:
                raise ConfigError(f"layer {i + 1}: input channels not divisible by groups")
            if layer.pool == "max2x2" and (h % 2 or w % 2):
                raise ConfigError(f"layer {i + 1}: cannot pool odd dims {h}x{w}")
            if layer.pool == "max2x2":
                h, w = h // 2, w // 2

    def geometry(self) -> list[LayerGeom]:
        geoms = []
        h, w = self.image_hw
        prev_c = self.in_channels
        for layer in self.layers:
            g = LayerGeom(prev_c, layer.out_channels, layer.kernel, layer.groups,
                          h, w, layer.pool == "max2x2",
                          normed=layer.norm != "none",
                          loss_at_pool=layer.loss_at == "post_pool")
            geoms.append(g)
            prev_c = layer.out_channels
            h, w = g.hp, g.wp
        return geoms

    @property
    def feature_dim(self) -> int:
        g = self.geometry()[-1]
        return g.c_out * g.hp * g.wp


@dataclass
class TrainSchedule:
    """Per-layer epoch windows (last entry is the classifier head)."""

    windows: list[tuple[int, int]]
    lr_conv: float = 1e-3
    lr_classifier: float = 1e-3
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        ends = [e for _, e in self.windows]
        if any(b < a for a, b in zip(ends, ends[1:])):
            raise ConfigError("end epochs must be non-decreasing across layers")
        if any(s < 0 or e < s for s, e in self.windows):
            raise ConfigError("invalid epoch window")

    @property
    def conv_end(self) -> int:
        return max((e for _, e in self.windows[:-1]), default=0)

    @property
    def total_epochs(self) -> int:
        return self.windows[-1][1]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def like(param: np.ndarray) -> "AdamState":
        return AdamState(np.zeros_like(param), np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One Adam update with bias correction; mutates ``state``, returns param."""
    if param.shape != grad.shape:
        raise ShapeError("gradient shape does not match parameter")
    if not np.all(np.isfinite(grad)):
        raise NanLossError(-1, -1, "non-finite gradient")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    return param - lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class LayerState:
    spec: LayerSpec
    kernels: KernelBank
    adam_w: AdamState
    adam_b: AdamState
    run_mu: np.ndarray | None = None
    run_var: np.ndarray | None = None
    frozen: bool = False

    def stats(self) -> BnStats | None:
        if self.run_mu is None:
            return None
        return BnStats(self.run_mu, self.run_var)

    def update_running(self, stats: BnStats):
        if self.run_mu is None:
            self.run_mu = stats.mu.copy()
            self.run_var = stats.sigma2.copy()
        else:
            self.run_mu = (1 - BN_MOMENTUM) * self.run_mu + BN_MOMENTUM * stats.mu
            self.run_var = (1 - BN_MOMENTUM) * self.run_var + BN_MOMENTUM * stats.sigma2


@dataclass
class Model:
    net: NetSpec
    layers: list[LayerState]
    clf_w: np.ndarray
    clf_b: np.ndarray
    seed: int
    epoch: int = 0


@dataclass
class RunMetrics:
    layer_loss: list = field(default_factory=list)  # (epoch, layer, mean loss)
    test_acc: list = field(default_factory=list)    # (epoch, accuracy)
    final_accuracy: float = float("nan")
    ledger: EnergyLedger = field(default_factory=EnergyLedger)
    epoch_ledgers: list = field(default_factory=list)  # per-epoch snapshots

    def to_csv(self) -> str:
        lines = ["# schema v1: epoch,layer,loss,test_acc"]
        lines.append("epoch,layer,loss,test_acc")
        for epoch, layer, loss in self.layer_loss:
            lines.append(f"{epoch},{layer},{loss:.9g},")
        for epoch, acc in self.test_acc:
            lines.append(f"{epoch},classifier,,{acc:.9g}")
        lines.append(f"final,classifier,,{self.final_accuracy:.9g}")
        return "\n".join(lines) + "\n"


def init_model(net: NetSpec, seed: int) -> Model:
    """He-normal conv weights (std sqrt(2/fan_in)), zero biases, zero head."""
    stream = PbitStream(seed, PURPOSE_INIT)
    layers = []
    prev_c = net.in_channels
    for li, spec in enumerate(net.layers):
        gen = stream.generator(layer=li + 1)
        fan_in = (prev_c // spec.groups) * spec.kernel * spec.kernel
        w = gen.normal(0.0, math.sqrt(2.0 / fan_in),
                       (spec.out_channels, prev_c // spec.groups,
                        spec.kernel, spec.kernel)).astype(np.float32)
        kern = KernelBank(w, np.zeros(spec.out_channels, dtype=np.float32), spec.groups)
        layers.append(LayerState(spec, kern, AdamState.like(w),
                                 AdamState.like(kern.bias)))
        prev_c = spec.out_channels
    d = net.feature_dim
    return Model(net, layers, np.zeros((net.ncat, d), dtype=np.float32),
                 np.zeros(net.ncat, dtype=np.float32), seed)


def layer_forward_normalize(pooled: Tensor4, norm: str,
                            stats: BnStats | None = None) -> Tensor4:
    """Normalization applied between layers: z-score, or passthrough."""
    if norm == "none":
        return pooled
    if norm not in ("batchnorm", "zscore_only"):
        raise ConfigError(f"unknown norm {norm!r}")
    return apply_bn(pooled, stats if stats is not None else batch_stats(pooled))


# ---------------------------------------------------------------------------
# Training forward pass


def _record_forward_mem(ledger, li, inp: Tensor4, spec: LayerSpec, kern,
                        delta_bits, pooled: Tensor4, normed_real: bool):
    n = inp.dims[0]
    wcount = kern.c_out * kern.c_in_per_group * kern.k * kern.k
    ledger.add_mem("forward", li, 32, wcount)                       # read W
    ledger.add_mem("forward", li, inp.bits, n * int(np.prod(inp.dims[1:])))
    ledger.add_mem("forward", li, delta_bits,
                   n * int(np.prod(_conv_dims(inp, kern))))          # store Delta
    ledger.add_mem("forward", li, pooled.bits, int(np.prod(pooled.dims)))
    if normed_real:
        ledger.add_mem("forward", li, 32, int(np.prod(pooled.dims)))  # re-read pool
        ledger.add_mem("forward", li, 32, int(np.prod(pooled.dims)))  # store BN out


def _conv_dims(inp: Tensor4, kern) -> tuple:
    return (kern.c_out, inp.dims[2], inp.dims[3])


def forward_layer_train(model: Model, li: int, inp: Tensor4, in_ab, sample_ids,
                        epoch: int, estimator: str, stream: PbitStream,
                        ledger=None, workers: int = 1):
    """One layer's stochastic training forward; returns (state, next input, next fold)."""
    layer = model.layers[li]
    spec = layer.spec
    n = inp.dims[0]
    delta_kind = "surprise" if estimator == "bgbsff" else "smooth"

    def fwd_chunk(sl):
        sub = EnergyLedger()
        chunk_inp = Tensor4(inp.data[sl], inp.kind, inp.levels)
        if in_ab is not None:
            z = conv_absorbed(chunk_inp, layer.kernels, in_ab, sub, layer=li + 1)
        else:
            z = conv2d(chunk_inp, layer.kernels, 1, "same", sub, layer=li + 1)
        ids = [sample_ids[i] for i in range(sl.start, sl.stop)]
        if spec.activation == RELU:
            a = np.maximum(z.data, 0.0)
            delta = (z.data > 0).astype(np.float32)
            act = Tensor4(a, REAL)
        else:
            values, delta = sample_activation_block(
                z.data, spec.tiles, stream, epoch=epoch, layer=li + 1,
                sample_ids=ids, delta_kind=delta_kind,
                shifted=spec.activation == TILED)
            kind = BINARY if spec.tiles == 1 else SMALLINT
            act = Tensor4(values, kind, spec.tiles)
        if spec.pool == "max2x2":
            pooled, amap = maxpool2x2(act)
        else:
            pooled, amap = act, None
        return pooled, amap, delta, sub

    parts = run_chunks(fwd_chunk, n, workers)
    pooled = Tensor4(np.concatenate([p[0].data for p in parts]),
                     parts[0][0].kind, parts[0][0].levels)
    amap = None
    if parts[0][1] is not None:
        amap = ArgmaxMap(np.concatenate([p[1].rows for p in parts]),
                         np.concatenate([p[1].cols for p in parts]),
                         parts[0][1].in_hw)
    delta = np.concatenate([p[2] for p in parts])
    if ledger is not None:
        for p in parts:
            ledger.merge(p[3])

    if spec.norm != "none":
        stats = batch_stats(pooled)
        if not layer.frozen:
            layer.update_running(stats)
        else:
            stats = layer.stats()
    else:
        stats = None

    state = ConvLayerState(layer.kernels, inp, in_ab, delta, pooled, amap,
                           stats, spec.loss_at, model.net.ncat, spec.tiles)
    if ledger is not None:
        delta_bits = int_bits(spec.tiles) if estimator == "bgbsff" and spec.stochastic else 32
        _record_forward_mem(ledger, li + 1, inp, spec, layer.kernels, delta_bits,
                            pooled, normed_real=spec.norm != "none" and not spec.stochastic)

    # Wire the next layer's input: binary path hands the raw pooled tensor
    # plus folding constants; the real path materializes the normalization.
    if spec.stochastic:
        next_inp = pooled
        next_ab = absorb_bn(stats) if stats is not None else None
    else:
        next_inp = layer_forward_normalize(pooled, spec.norm, stats)
        next_ab = None
    return state, next_inp, next_ab


def _record_gradient_mem(ledger, li, state: ConvLayerState, estimator):
    spec_bits_pool = state.pooled.bits if state.pooled.kind != REAL else 32
    n = state.pooled.dims[0]
    delta_bits = 32
    if estimator == "bgbsff" and state.pooled.kind != REAL:
        delta_bits = int_bits(state.tiles)
    ledger.add_mem("gradient", li, spec_bits_pool, int(np.prod(state.pooled.dims)))
    ledger.add_mem("gradient", li, delta_bits, int(np.prod(state.delta.shape)))
    in_elems = int(np.prod(state.inp.dims[1:]))
    kern = state.kernels
    if state.loss_at == "post_norm":
        reread = kern.c_out // kern.groups
        ledger.add_mem("gradient", li, state.inp.bits, n * reread * in_elems)
    else:
        ledger.add_mem("gradient", li, state.inp.bits, n * in_elems)


def train_batch_layer(model: Model, li: int, state: ConvLayerState, labels,
                      estimator: str, schedule: TrainSchedule, ledger=None,
                      workers: int = 1, epoch: int = 0) -> float:
    """Loss, local gradient, Adam update, and ledger entries for one layer."""
    layer = model.layers[li]
    residual, nll = goodness_residual(state, labels)
    loss = float(nll.mean())
    if not np.isfinite(loss):
        raise NanLossError(li + 1, epoch)
    kind = "lff" if not layer.spec.stochastic else estimator
    dw, db = conv_layer_gradient(state, residual, kind, ledger, li + 1, workers)
    if ledger is not None:
        _record_gradient_mem(ledger, li + 1, state, kind)
        wcount = layer.kernels.c_out * layer.kernels.c_in_per_group * layer.kernels.k ** 2
        ledger.add_mem("update", li + 1, 32, wcount)
    layer.kernels.weights = adam_step(layer.kernels.weights, dw.astype(np.float32),
                                      layer.adam_w, schedule.lr_conv,
                                      schedule.beta1, schedule.beta2, schedule.eps)
    layer.kernels.bias = adam_step(layer.kernels.bias, db.astype(np.float32),
                                   layer.adam_b, schedule.lr_conv,
                                   schedule.beta1, schedule.beta2, schedule.eps)
    return loss


# ---------------------------------------------------------------------------
# Deterministic (expectation) forward for features and evaluation


def expectation_forward(model: Model, images: np.ndarray, workers: int = 1,
                        upto: int | None = None,
                        out: np.ndarray | None = None) -> np.ndarray:
    """Forward with activations replaced by their means; returns features.

    ``out`` may be a preallocated (possibly disk-backed) (N, D) array that
    chunks are written into, to keep large feature caches off the heap.
    """
    upto = len(model.layers) if upto is None else upto

    def fwd_chunk(sl):
        x = Tensor4(np.ascontiguousarray(images[sl]), REAL)
        for li in range(upto):
            layer = model.layers[li]
            spec = layer.spec
            z = conv2d(x, layer.kernels, 1, "same", None)
            if spec.activation == RELU:
                a = np.maximum(z.data, 0.0)
            elif spec.activation == LOGISTIC_BSN:
                a = logistic(z.data)
            else:
                a = tiled_expectation(z.data, spec.tiles)
            t = Tensor4(a, REAL)
            if spec.pool == "max2x2":
                t, _ = maxpool2x2(t)
            t = layer_forward_normalize(t, spec.norm, layer.stats())
            x = t
        feats = x.data.reshape(x.dims[0], -1)
        if out is not None:
            out[sl] = feats
            return None
        return feats

    parts = run_chunks(fwd_chunk, images.shape[0], workers)
    if out is not None:
        return out
    return np.concatenate(parts)


# Feature caches above this many bytes go to a disk-backed memmap instead of
# the heap (the full reference stack on 60k images is several GB).
FEATURE_CACHE_RAM_LIMIT = 1 << 30


def _feature_cache(model: Model, images: np.ndarray, workers: int,
                   tag: str):
    """Extract expectation features into RAM or a disk-backed scratch file."""
    n = images.shape[0]
    d = model.net.feature_dim
    path = None
    if n * d * 4 > FEATURE_CACHE_RAM_LIMIT:
        import tempfile
        f = tempfile.NamedTemporaryFile(prefix=f"bsff-feats-{tag}-",
                                        suffix=".f32", delete=False)
        path = f.name
        f.close()
        out = np.memmap(path, dtype=np.float32, mode="w+", shape=(n, d))
    else:
        out = np.empty((n, d), dtype=np.float32)
    return expectation_forward(model, images, workers, out=out), path


def _drop_feature_cache(feats, path):
    if path is not None:
        import os
        mm = getattr(feats, "_mmap", None)
        del feats
        if mm is not None:
            mm.close()
        try:
            os.unlink(path)
        except OSError:
            pass


def sampled_forward_features(model: Model, images: np.ndarray, stream: PbitStream,
                             draw: int, workers: int = 1) -> np.ndarray:
    """One stochastic forward of frozen layers, keyed by evaluation draw index."""
    def fwd_chunk(sl):
        x = Tensor4(np.ascontiguousarray(images[sl]), REAL)
        ab = None
        for li, layer in enumerate(model.layers):
            spec = layer.spec
            if ab is not None:
                z = conv_absorbed(x, layer.kernels, ab, None, layer=li + 1)
            else:
                z = conv2d(x, layer.kernels, 1, "same", None)
            if spec.activation == RELU:
                t = Tensor4(np.maximum(z.data, 0.0), REAL)
            else:
                ids = range(sl.start, sl.stop)
                values, _ = sample_activation_block(
                    z.data, spec.tiles, stream, epoch=draw, layer=li + 1,
                    sample_ids=ids, delta_kind="smooth",
                    shifted=spec.activation == TILED)
                t = Tensor4(values, BINARY if spec.tiles == 1 else SMALLINT, spec.tiles)
            if spec.pool == "max2x2":
                t, _ = maxpool2x2(t)
            stats = layer.stats()
            if spec.stochastic:
                ab = absorb_bn(stats) if stats is not None else None
                x = t
            else:
                x = layer_forward_normalize(t, spec.norm, stats)
                ab = None
        out = x.as_float()
        if ab is not None:
            out = ab.alpha[None, :, None, None] * out + ab.delta[None, :, None, None]
        return out.reshape(out.shape[0], -1)

    parts = run_chunks(fwd_chunk, images.shape[0], workers)
    return np.concatenate(parts)


def calibrate_missing_stats(model: Model, images: np.ndarray, workers: int = 1,
                            batch: int = 512):
    """Fill running stats for normalized layers that never saw a batch."""
    for li, layer in enumerate(model.layers):
        if layer.spec.norm == "none" or layer.run_mu is not None:
            continue
        c = layer.spec.out_channels
        total = np.zeros(c, dtype=np.float64)
        total_sq = np.zeros(c, dtype=np.float64)
        count = 0
        for start in range(0, images.shape[0], batch):
            feats = _pre_norm_expectation(model, images[start:start + batch], li, workers)
            total += feats.sum(axis=(0, 2, 3), dtype=np.float64)
            total_sq += (feats.astype(np.float64) ** 2).sum(axis=(0, 2, 3))
            count += feats.shape[0] * feats.shape[2] * feats.shape[3]
        mu = total / count
        layer.run_mu = mu.astype(np.float32)
        layer.run_var = np.maximum(total_sq / count - mu**2, 0.0).astype(np.float32)


def _pre_norm_expectation(model: Model, images, li: int, workers: int) -> np.ndarray:
    """Expectation activations of layer ``li`` before its normalization."""
    feats = expectation_forward(model, images, workers, upto=li)
    g = model.net.geometry()[li]
    x = Tensor4(feats.reshape(images.shape[0], g.c_in, g.h_in, g.w_in), REAL)
    layer = model.layers[li]
    z = conv2d(x, layer.kernels, 1, "same", None)
    spec = layer.spec
    if spec.activation == RELU:
        a = np.maximum(z.data, 0.0)
    elif spec.activation == LOGISTIC_BSN:
        a = logistic(z.data)
    else:
        a = tiled_expectation(z.data, spec.tiles)
    t = Tensor4(a, REAL)
    if spec.pool == "max2x2":
        t, _ = maxpool2x2(t)
    return t.data


# ---------------------------------------------------------------------------
# Classifier head


def softmax_logits(w, b, feats):
    return feats @ w.T + b[None, :]


def train_classifier_head(features: np.ndarray, labels: np.ndarray, *, ncat: int,
                          lr: float, epochs: int, batch_size: int, seed: int,
                          schedule: TrainSchedule | None = None,
                          start_epoch: int = 0, test_features=None,
                          test_labels=None, on_epoch=None):
    """Train a linear softmax head with Adam; returns (w, b, history).

    ``history`` holds (epoch, mean loss, test accuracy or nan) per epoch.
    """
    d = features.shape[1]
    w = np.zeros((ncat, d), dtype=np.float32)
    b = np.zeros(ncat, dtype=np.float32)
    aw, ab_state = AdamState.like(w), AdamState.like(b)
    beta1, beta2, eps = ((schedule.beta1, schedule.beta2, schedule.eps)
                        if schedule else (0.9, 0.999, 1e-8))
    stream = PbitStream(seed, PURPOSE_SHUFFLE)
    history = []
    n = features.shape[0]
    for ep in range(epochs):
        order = stream.generator(epoch=start_epoch + ep, layer=0x7FFF).permutation(n)
        losses = []
        for s in range(0, n, batch_size):
            ids = order[s:s + batch_size]
            f = features[ids].astype(np.float32)
            logits = softmax_logits(w, b, f)
            probs = inverse_link(logits, CWC)
            yvec = one_hot(labels[ids], ncat)
            loss = float(np.mean(log_partition(logits, CWC)
                                 - logits[np.arange(len(ids)), labels[ids]]))
            if not np.isfinite(loss):
                raise NanLossError(0, start_epoch + ep, "classifier head")
            resid = (probs - yvec).astype(np.float32)
            gw = resid.T @ f / len(ids)
            gb = resid.mean(axis=0)
            w = adam_step(w, gw, aw, lr, beta1, beta2, eps)
            b = adam_step(b, gb.astype(np.float32), ab_state, lr, beta1, beta2, eps)
            losses.append(loss)
        acc = float("nan")
        if test_features is not None:
            acc = head_accuracy(w, b, test_features, test_labels)
        history.append((start_epoch + ep, float(np.mean(losses)), acc))
        if on_epoch:
            on_epoch(history[-1])
    return w, b, history


def head_accuracy(w, b, features, labels) -> float:
    pred = softmax_logits(w, b, features.astype(np.float32)).argmax(axis=1)
    return float((pred == labels).mean())


def evaluate(model: Model, images: np.ndarray, labels: np.ndarray, *,
             policy: str = "expectation", n_eval_samples: int = 32,
             workers: int = 1) -> float:
    """Top-1 accuracy of the classifier head on a test set."""
    if policy == "expectation":
        feats = expectation_forward(model, images, workers)
        return head_accuracy(model.clf_w, model.clf_b, feats, labels)
    if policy != "sampled":
        raise ConfigError(f"unknown evaluation policy {policy!r}")
    stream = PbitStream(model.seed, PURPOSE_EVAL)
    votes = np.zeros((images.shape[0], model.net.ncat), dtype=np.int64)
    for draw in range(n_eval_samples):
        feats = sampled_forward_features(model, images, stream, draw, workers)
        pred = softmax_logits(model.clf_w, model.clf_b,
                              feats.astype(np.float32)).argmax(axis=1)
        votes[np.arange(len(pred)), pred] += 1
    return float((votes.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# The full training loop


def train(net: NetSpec, schedule: TrainSchedule, train_ds, test_ds, seed: int,
          estimator: str = "bgbsff", ledger: EnergyLedger | None = None,
          log=None, eval_policy: str = "expectation") -> tuple[Model, RunMetrics]:
    """Greedy layerwise training, then the classifier head.

    Returns the trained model and full metrics.  Deterministic: identical
    (net, schedule, data, seed) reproduce identical metrics byte for byte.
    """
    from .data import batches

    if estimator not in ("lff", "bsff", "bgbsff", "importance"):
        raise ConfigError(f"unknown estimator {estimator!r}")
    if len(schedule.windows) != len(net.layers) + 1:
        raise ConfigError("schedule needs one window per layer plus the classifier")
    metrics = RunMetrics()
    ledger = ledger if ledger is not None else metrics.ledger
    metrics.ledger = ledger
    model = init_model(net, seed)
    stream = PbitStream(seed)
    workers = schedule.workers

    conv_end = schedule.conv_end
    for epoch in range(conv_end):
        active = [li for li, (s, e) in enumerate(schedule.windows[:-1])
                  if s <= epoch < e]
        for li, (s, e) in enumerate(schedule.windows[:-1]):
            model.layers[li].frozen = not (s <= epoch < e)
        if not active:
            continue
        deepest = max(active)
        sums = {li: 0.0 for li in active}
        counts = {li: 0 for li in active}
        for ids, images, labels in batches(train_ds, schedule.batch_size, epoch, seed):
            inp = Tensor4(np.ascontiguousarray(images), REAL)
            ab = None
            for li in range(deepest + 1):
                state, inp, ab = forward_layer_train(
                    model, li, inp, ab, ids, epoch, estimator, stream,
                    ledger, workers)
                if li in sums:
                    if estimator == "importance" and model.layers[li].spec.stochastic:
                        loss = _importance_update(model, li, state, labels,
                                                  schedule, stream, epoch, ids,
                                                  workers)
                    else:
                        loss = train_batch_layer(model, li, state, labels,
                                                 estimator, schedule, ledger,
                                                 workers, epoch)
                    sums[li] += loss * len(ids)
                    counts[li] += len(ids)
        for li in active:
            metrics.layer_loss.append((epoch, li + 1, sums[li] / max(counts[li], 1)))
        metrics.epoch_ledgers.append(ledger.copy())
        if log:
            losses = " ".join(f"L{li + 1}={sums[li] / max(counts[li], 1):.4f}"
                              for li in active)
            log(f"epoch {epoch}: {losses}")

    for layer in model.layers:
        layer.frozen = True
    calibrate_missing_stats(model, train_ds.images, workers)

    feats, feats_path = _feature_cache(model, train_ds.images, workers, "train")
    test_feats, test_path = _feature_cache(model, test_ds.images, workers, "test")
    try:
        clf_epochs = max(schedule.total_epochs - conv_end, 0)
        if clf_epochs:
            def on_epoch(row):
                ep, loss, acc = row
                metrics.layer_loss.append((ep, "classifier", loss))
                metrics.test_acc.append((ep, acc))
                if log:
                    log(f"epoch {ep}: clf={loss:.4f} acc={acc:.4f}")

            model.clf_w, model.clf_b, _ = train_classifier_head(
                feats, train_ds.labels, ncat=net.ncat, lr=schedule.lr_classifier,
                epochs=clf_epochs, batch_size=schedule.batch_size, seed=seed,
                schedule=schedule, start_epoch=conv_end, test_features=test_feats,
                test_labels=test_ds.labels, on_epoch=on_epoch)
        model.epoch = schedule.total_epochs
        if eval_policy == "expectation":
            metrics.final_accuracy = head_accuracy(model.clf_w, model.clf_b,
                                                   test_feats, test_ds.labels)
        else:
            metrics.final_accuracy = evaluate(model, test_ds.images,
                                              test_ds.labels, policy=eval_policy,
                                              workers=workers)
    finally:
        _drop_feature_cache(feats, feats_path)
        _drop_feature_cache(test_feats, test_path)
    return model, metrics


def _importance_update(model: Model, li: int, state: ConvLayerState, labels,
                       schedule: TrainSchedule, stream: PbitStream, epoch: int,
                       sample_ids, workers: int, n_draws: int = 8) -> float:
    """Self-normalized importance step for a conv layer (comparison path).

    Draws fresh hidden samples, weighs each by the layer's output likelihood
    of the label, and descends the weighted log-prior gradient.  Kept for
    completeness; accuracy is known to lag the variational estimators.
    """
    from .readout import conv_goodness
    from .sampler import PURPOSE_IMPORTANCE

    layer = model.layers[li]
    spec = layer.spec
    inp = state.inp
    if state.in_ab is not None:
        x_eff = (state.in_ab.alpha[None, :, None, None] * inp.as_float()
                 + state.in_ab.delta[None, :, None, None])
    else:
        x_eff = inp.as_float()
    z = conv2d(Tensor4(x_eff, REAL), layer.kernels, 1, "same", None)
    shifts = ((np.arange(1, spec.tiles + 1, dtype=np.float32) - 0.5)
              if spec.activation == TILED else np.zeros(spec.tiles, dtype=np.float32))
    rho = np.stack([logistic(z.data - s) for s in shifts])  # (tiles, N, C, H, W)
    imp = stream.with_purpose(PURPOSE_IMPORTANCE)
    n = z.data.shape[0]
    num = np.zeros_like(z.data)
    den = np.zeros(n, dtype=np.float64)
    base_loss = 0.0
    for draw in range(n_draws):
        bits = np.empty_like(rho, dtype=np.uint8)
        for i, sid in enumerate(sample_ids):
            u = imp.uniforms(rho.shape[0:1] + rho.shape[2:], epoch=epoch,
                             sample=int(sid), layer=(li + 1) * 64 + draw)
            bits[:, i] = rho[:, i] > u
        values = bits.sum(axis=0).astype(np.float32)
        t = Tensor4(values.astype(np.uint8),
                    BINARY if spec.tiles == 1 else SMALLINT, spec.tiles)
        pooled, _ = maxpool2x2(t) if spec.pool == "max2x2" else (t, None)
        u_loss = pooled.as_float()
        if spec.loss_at == "post_norm" and state.stats is not None:
            ab = absorb_bn(state.stats)
            u_loss = (ab.alpha[None, :, None, None] * u_loss
                      + ab.delta[None, :, None, None])
        g = conv_goodness(u_loss, model.net.ncat)
        lik = np.exp(g[np.arange(n), labels] - log_partition(g, CWC))
        base_loss += float(np.mean(log_partition(g, CWC) - g[np.arange(n), labels]))
        num += (lik[:, None, None, None]
                * (rho.sum(axis=0) - values)).astype(np.float32)
        den += lik
    dldz = num / np.maximum(den[:, None, None, None], 1e-300)
    from .errors import DegenerateWeightsError
    if np.any(den <= 0):
        raise DegenerateWeightsError("importance weights vanished in conv layer")
    from .gradients import _im2col_corr
    dw, db = _im2col_corr(x_eff, dldz, layer.kernels, workers)
    layer.kernels.weights = adam_step(layer.kernels.weights, dw.astype(np.float32),
                                      layer.adam_w, schedule.lr_conv,
                                      schedule.beta1, schedule.beta2, schedule.eps)
    layer.kernels.bias = adam_step(layer.kernels.bias, db.astype(np.float32),
                                   layer.adam_b, schedule.lr_conv,
                                   schedule.beta1, schedule.beta2, schedule.eps)
    return base_loss / n_draws
