"""Energy-cost accounting: instrumented counters and analytic predictions.

The cost currency is (number of multiplications, bucketed by operand bit
widths) and (number of memory words moved, bucketed by element bit width,
where 32 one-bit elements count as one word).  Counters fire only at the
modeled algorithmic sites, the explicit main-memory reads/writes and the
multiplications of the layer-by-layer training procedure, never at host
load/store granularity; the point of the ledger is to validate the cost
model, not the host machine's cache behavior.

``analytic_cost`` produces the same bucket schema from the architecture
alone, line item by line item, so ``reconcile`` is a straight diff.
Spatial bookkeeping convention: per layer, ``(Hc, Wc)`` are the convolution
output dims and ``(Hp, Wp)`` the post-pool dims.  Gradient-path spatial
counts use the pooled dims because the max-pool routes gradients to one
position per pooled cell and products against the zeros are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import conv_mult_count, int_bits

PHASES = ("forward", "gradient", "update")


@dataclass
class EnergyLedger:
    """Monotone counters of multiplications and memory words.

    Multiplication buckets are keyed ``(phase, layer, bits_a, bits_b)`` with
    ``bits_a <= bits_b``; memory buckets ``(phase, layer, bits)``.  Memory
    counts are in elements of the given width; ``word_count`` converts to
    32-bit words (the 1/32 packing factor for binary tensors).
    """

    mults: dict = field(default_factory=dict)
    mem: dict = field(default_factory=dict)

    def add_mults(self, phase, layer, bits_a, bits_b, count):
        if count < 0:
            raise ValueError("counts are monotone, negative increment refused")
        if count == 0:
            return
        key = (phase, int(layer), min(bits_a, bits_b), max(bits_a, bits_b))
        self.mults[key] = self.mults.get(key, 0) + int(count)

    def add_mem(self, phase, layer, bits, count):
        if count < 0:
            raise ValueError("counts are monotone, negative increment refused")
        if count == 0:
            return
        key = (phase, int(layer), int(bits))
        self.mem[key] = self.mem.get(key, 0) + int(count)

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        for k, v in other.mults.items():
            self.mults[k] = self.mults.get(k, 0) + v
        for k, v in other.mem.items():
            self.mem[k] = self.mem.get(k, 0) + v
        return self

    def copy(self) -> "EnergyLedger":
        out = EnergyLedger()
        out.mults = dict(self.mults)
        out.mem = dict(self.mem)
        return out

    def total_mults(self, bits=None) -> int:
        if bits is None:
            return sum(self.mults.values())
        return sum(v for k, v in self.mults.items() if (k[2], k[3]) == bits)

    def total_mem_words(self) -> float:
        return sum(v * k[2] / 32.0 for k, v in self.mem.items())

    def mem_elements(self, bits=None) -> int:
        if bits is None:
            return sum(self.mem.values())
        return sum(v for k, v in self.mem.items() if k[2] == bits)

    def rows(self):
        """Flat (kind, phase, layer, bits, count) rows, deterministic order."""
        out = []
        for (phase, layer, ba, bb), v in sorted(self.mults.items()):
            out.append(("mult", phase, layer, f"{ba}x{bb}", v))
        for (phase, layer, bits), v in sorted(self.mem.items()):
            out.append(("mem", phase, layer, str(bits), v))
        return out


@dataclass
class CostModel:
    """Conversion ratios to MAC-equivalent energy units.

    One 32x32 multiply costs 1.  A multiply between a-bit and b-bit operands
    costs ``(a*b/32^2)^(exponent/2)`` since multiplier energy scales roughly
    with the square of operand width.  One 32-bit memory access costs
    ``dram_mac_ratio`` (or ``sram_mac_ratio``) MACs, scaled linearly by
    element width.
    """

    dram_mac_ratio: float = 200.0
    sram_mac_ratio: float = 6.0
    bit_exponent: float = 2.0
    memory_tier: str = "dram"

    def __post_init__(self):
        if self.dram_mac_ratio <= 0 or self.sram_mac_ratio <= 0:
            raise ValueError("access ratios must be positive")
        if self.memory_tier not in ("dram", "sram"):
            raise ValueError("memory_tier must be 'dram' or 'sram'")

    @property
    def access_ratio(self) -> float:
        return self.dram_mac_ratio if self.memory_tier == "dram" else self.sram_mac_ratio

    def mult_cost(self, bits_a: int, bits_b: int) -> float:
        return float((bits_a * bits_b / 1024.0) ** (self.bit_exponent / 2.0))

    def mem_cost(self, bits: int) -> float:
        return self.access_ratio * bits / 32.0


def mac_equivalent(ledger: EnergyLedger, model: CostModel | None = None) -> float:
    """Scalar MAC-equivalent energy of everything in the ledger."""
    model = model or CostModel()
    total = 0.0
    for (_, _, ba, bb), v in ledger.mults.items():
        total += v * model.mult_cost(ba, bb)
    for (_, _, bits), v in ledger.mem.items():
        total += v * model.mem_cost(bits)
    return total


# ---------------------------------------------------------------------------
# Architecture geometry shared by the analytic formulas


@dataclass
class LayerGeom:
    """Static per-layer dims and placement flags needed by the cost formulas."""

    c_in: int
    c_out: int
    k: int
    groups: int
    h_in: int
    w_in: int
    pooled: bool
    normed: bool  # batch stats computed and folded into the next layer
    loss_at_pool: bool = False  # layer loss taken before normalization

    @property
    def c_in_pg(self) -> int:
        return self.c_in // self.groups

    @property
    def hc(self) -> int:  # conv output (same padding, stride 1)
        return self.h_in

    @property
    def wc(self) -> int:
        return self.w_in

    @property
    def hp(self) -> int:
        return self.hc // 2 if self.pooled else self.hc

    @property
    def wp(self) -> int:
        return self.wc // 2 if self.pooled else self.wc


def net_geometry(channels, *, c_in, hw, kernel=3, groups=None, pools=None,
                 norms=None) -> list[LayerGeom]:
    """Build per-layer geometry for a stack of same-padding conv layers.

    ``norms`` entries are 'batchnorm', 'zscore_only' or 'none'; the default
    is batchnorm everywhere except the last layer, matching the reference
    stacks.  'zscore_only' still feeds folded constants to the next layer
    but takes the layer loss before normalization.
    """
    n_layers = len(channels)
    groups = groups or [1] * n_layers
    pools = pools if pools is not None else [False] * n_layers
    norms = norms if norms is not None else ["batchnorm"] * (n_layers - 1) + ["none"]
    geoms = []
    h, w = hw if isinstance(hw, tuple) else (hw, hw)
    prev_c = c_in
    for i in range(n_layers):
        norm = norms[i]
        if norm not in ("batchnorm", "zscore_only", "none"):
            raise ValueError(f"unknown norm mode {norm!r}")
        g = LayerGeom(prev_c, channels[i], kernel, groups[i], h, w,
                      bool(pools[i]), normed=norm != "none",
                      loss_at_pool=norm != "batchnorm")
        geoms.append(g)
        prev_c = channels[i]
        h, w = g.hp, g.wp
    return geoms


# ---------------------------------------------------------------------------
# Exact line-item predictions, one entry per counted algorithm line


def _act_bits(tiles: int) -> int:
    return 1 if tiles <= 1 else int_bits(tiles)


def analytic_cost(geoms: list[LayerGeom], n: int, algo: str, *, tiles: int = 1,
                  batch_size: int | None = None) -> EnergyLedger:
    """Predicted ledger for one full pass (forward + gradient + update)
    over ``n`` samples.

    ``algo`` is one of ``backprop``, ``cwcff``, ``bsff``, ``bgbsff``,
    ``bgbsff_nobn``.  Weight traffic is per batch; everything else is per
    sample, so ``batch_size`` (default: one batch of n) only affects the
    weight read/write terms.
    """
    if algo not in ("backprop", "cwcff", "bsff", "bgbsff", "bgbsff_nobn"):
        raise ValueError(f"unsupported algo {algo!r}")
    batch_size = batch_size or n
    n_batches = -(-n // batch_size)
    led = EnergyLedger()
    prev_normed = True  # layer 1 consumes the raw image, flag unused there
    for i, g in enumerate(geoms):
        ell = i + 1
        if algo == "backprop":
            _backprop_layer(led, g, ell, n, n_batches)
        elif algo == "cwcff":
            _cwcff_layer(led, g, ell, n, n_batches)
        else:
            binary_grad = algo.startswith("bgbsff")
            with_bn = not g.loss_at_pool and algo != "bgbsff_nobn"
            _bsn_layer(led, g, ell, n, n_batches, tiles, binary_grad, with_bn,
                       prev_normed)
        prev_normed = g.normed
    return led


def _weight_traffic(led, g, ell, n_batches):
    wcount = g.c_out * g.c_in_pg * g.k * g.k
    led.add_mem("forward", ell, 32, n_batches * wcount)   # read W per batch
    led.add_mem("update", ell, 32, n_batches * wcount)    # write updated W


def _backprop_layer(led, g, ell, n, n_batches):
    k2 = g.k * g.k
    conv = conv_mult_count(n, g.c_in_pg, g.c_out, g.k, g.hc, g.wc)
    led.add_mults("forward", ell, 32, 32, conv)
    _weight_traffic(led, g, ell, n_batches)
    led.add_mem("forward", ell, 32, n * g.c_in * g.h_in * g.w_in)   # input read
    led.add_mem("forward", ell, 32, n * g.c_out * g.hc * g.wc)      # activation store
    led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)      # pool store
    led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)      # pool re-read for BN
    led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)      # BN output store
    led.add_mem("forward", ell, 32, n_batches * 2 * g.c_out)        # mu, sigma2 store
    # Backward: BN chain, then weight and upstream-input gradients.
    led.add_mults("gradient", ell, 32, 32, 2 * n * g.c_out * g.hp * g.wp)  # Sigma term
    led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.hp * g.wp)      # scale to dL/da
    led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.c_in_pg * k2 * g.hp * g.wp)  # dL/dW
    led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.c_in_pg * k2 * g.hp * g.wp)  # dL/du_prev
    led.add_mem("gradient", ell, 32, 2 * n * g.c_out * g.hp * g.wp)  # read pooled, read dL/du
    led.add_mem("gradient", ell, 32, n * g.c_out * g.hc * g.wc)      # read activations
    led.add_mem("gradient", ell, 32, n * g.c_out * g.c_in_pg * g.h_in * g.w_in)  # re-read input per c_out
    led.add_mem("gradient", ell, 32, n_batches * g.c_out * g.c_in_pg * g.k * g.k)  # read W for transposed conv


def _cwcff_layer(led, g, ell, n, n_batches):
    k2 = g.k * g.k
    conv = conv_mult_count(n, g.c_in_pg, g.c_out, g.k, g.hc, g.wc)
    led.add_mults("forward", ell, 32, 32, conv)
    _weight_traffic(led, g, ell, n_batches)
    led.add_mem("forward", ell, 32, n * g.c_in * g.h_in * g.w_in)  # input read
    led.add_mem("forward", ell, 32, n * g.c_out * g.hc * g.wc)     # activation-derivative store
    led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)     # pool store
    if g.normed:
        led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)  # pool re-read for BN
        led.add_mem("forward", ell, 32, n * g.c_out * g.hp * g.wp)  # BN output store
    # Local gradient: goodness scale, BN chain, then the weight correlation.
    chain = 1 if g.loss_at_pool else 3  # dL/du, plus Sigma term and dL/da under BN
    led.add_mults("gradient", ell, 32, 32, chain * n * g.c_out * g.hp * g.wp)
    led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.c_in_pg * k2 * g.hp * g.wp)  # dL/dW
    led.add_mem("gradient", ell, 32, n * g.c_out * g.hp * g.wp)  # read loss-point activations
    led.add_mem("gradient", ell, 32, n * g.c_out * g.hc * g.wc)  # read derivative factors
    led.add_mem("gradient", ell, 32, n * g.c_out * g.c_in_pg * g.h_in * g.w_in)  # re-read input per c_out


def _bsn_layer(led, g, ell, n, n_batches, tiles, binary_grad, with_bn,
               prev_normed):
    k2 = g.k * g.k
    act_bits = _act_bits(tiles)
    first = ell == 1
    _weight_traffic(led, g, ell, n_batches)
    if first:
        led.add_mults("forward", ell, 32, 32,
                      conv_mult_count(n, g.c_in_pg, g.c_out, g.k, g.hc, g.wc))
        led.add_mem("forward", ell, 32, n * g.c_in * g.h_in * g.w_in)
    else:
        if prev_normed:
            # Folding the previous layer's z-score constants into the
            # kernels costs 2 K^2 full multiplies per sample and channel
            # pair, plus M narrow ones per tap for tiled inputs.
            led.add_mults("forward", ell, 32, 32, 2 * n * g.c_out * g.c_in_pg * k2)
            if tiles > 1:
                led.add_mults("forward", ell, act_bits, 32,
                              tiles * n * g.c_out * g.c_in_pg * k2)
        led.add_mem("forward", ell, act_bits, n * g.c_in * g.h_in * g.w_in)
    delta_bits = act_bits if binary_grad else 32
    led.add_mem("forward", ell, delta_bits, n * g.c_out * g.hc * g.wc)  # store Delta
    led.add_mem("forward", ell, act_bits, n * g.c_out * g.hp * g.wp)    # store pooled bits

    # Gradient pass.
    led.add_mem("gradient", ell, act_bits, n * g.c_out * g.hp * g.wp)   # read pooled bits
    led.add_mem("gradient", ell, delta_bits, n * g.c_out * g.hc * g.wc)  # read Delta
    if binary_grad:
        if tiles > 1:
            led.add_mults("gradient", ell, delta_bits, 32, n * g.c_out * g.hp * g.wp)
    else:
        led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.hp * g.wp)  # dL/da * Delta
    if with_bn:
        # BN couples the batch, so the layer input is re-read once per
        # output channel of its group.
        if first:
            led.add_mem("gradient", ell, 32,
                        n * (g.c_out // g.groups) * g.c_in * g.h_in * g.w_in)
            led.add_mults("gradient", ell, 32, 32,
                          n * g.c_out * g.c_in_pg * k2 * g.hp * g.wp)
        else:
            led.add_mem("gradient", ell, act_bits,
                        n * (g.c_out // g.groups) * g.c_in * g.h_in * g.w_in)
            if prev_normed:
                led.add_mults("gradient", ell, 32, 32, 2 * n * g.c_out * g.c_in_pg * k2)
                if tiles > 1:
                    led.add_mults("gradient", ell, act_bits, 32,
                                  tiles * n * g.c_out * g.c_in_pg * k2)
    else:
        # Loss before normalization: every sample is independent, the input
        # is read once per sample, and the weight correlation reduces to
        # indexed sums.  With a binary gradient those sums are scaled once
        # per kernel tap by the sample's residual; with a smooth gradient
        # the binary input indexes real values, costing nothing extra.
        in_bits = 32 if first else act_bits
        led.add_mem("gradient", ell, in_bits, n * g.c_in * g.h_in * g.w_in)
        if binary_grad:
            led.add_mults("gradient", ell, 32, 32, n * g.c_out * g.c_in_pg * k2)
        elif first:
            led.add_mults("gradient", ell, 32, 32,
                          n * g.c_out * g.c_in_pg * k2 * g.hp * g.wp)


def analytic_schedule_cost(geoms: list[LayerGeom], n: int, algo: str,
                           windows, *, tiles: int = 1,
                           batch_size: int | None = None) -> EnergyLedger:
    """Predicted ledger for a staggered training schedule.

    ``windows`` holds per-layer (start, end) epochs (a trailing classifier
    window is ignored; the classifier is outside the conv cost model).  A
    layer's forward runs in every epoch where any layer at its depth or
    deeper is training; its gradient and update run only in its own window.
    """
    conv_windows = list(windows[:len(geoms)])
    one_pass = analytic_cost(geoms, n, algo, tiles=tiles, batch_size=batch_size)
    conv_end = max((e for _, e in conv_windows), default=0)
    fwd_epochs = [0] * len(geoms)
    grad_epochs = [0] * len(geoms)
    for epoch in range(conv_end):
        active = [i for i, (s, e) in enumerate(conv_windows) if s <= epoch < e]
        if not active:
            continue
        deepest = max(active)
        for i in range(deepest + 1):
            fwd_epochs[i] += 1
        for i in active:
            grad_epochs[i] += 1
    led = EnergyLedger()
    for (phase, layer, ba, bb), v in one_pass.mults.items():
        scale = fwd_epochs[layer - 1] if phase == "forward" else grad_epochs[layer - 1]
        led.add_mults(phase, layer, ba, bb, v * scale)
    for (phase, layer, bits), v in one_pass.mem.items():
        scale = fwd_epochs[layer - 1] if phase == "forward" else grad_epochs[layer - 1]
        led.add_mem(phase, layer, bits, v * scale)
    return led


# ---------------------------------------------------------------------------
# Dominant-term summaries (uniform-channel approximation)


def dominant_terms(algo: str, *, n, c, c_in, k, h, w, layers, tiles: int = 1) -> dict:
    """Leading-order mult and memory-word totals under uniform channels."""
    k2 = k * k
    hw = h * w
    if algo == "backprop":
        return {"mults": 3 * n * c * c * k2 * hw * layers,
                "mem_words": n * c * c * hw * layers}
    if algo == "cwcff":
        return {"mults": 2 * n * c * c * k2 * hw * layers,
                "mem_words": n * c * c * hw * layers}
    if algo in ("bsff", "bgbsff"):
        bits = _act_bits(tiles)
        return {"mults": 2 * n * c_in * c * k2 * hw + 4 * n * c * c * k2 * (layers - 1),
                "mem_words": n * c_in * c * hw + (bits / 32.0) * n * c * c * hw * (layers - 1)}
    if algo == "bgbsff_nobn":
        bits = _act_bits(tiles)
        return {"mults": n * c_in * c * k2 * hw + 2 * n * c * c * k2 * (layers - 1),
                "mem_words": n * c_in * hw + (bits / 32.0) * n * c * hw * (layers - 1)}
    raise ValueError(f"unsupported algo {algo!r}")


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ReconcileRow:
    layer: int
    phase: str
    metric: str
    bits: str
    instrumented: int
    analytic: int

    @property
    def delta(self) -> int:
        return self.instrumented - self.analytic


def reconcile(ledger: EnergyLedger, predicted: EnergyLedger) -> list[ReconcileRow]:
    """Instrumented vs analytic counts, one row per (layer, phase, bucket)."""
    rows = []
    keys = sorted(set(ledger.mults) | set(predicted.mults))
    for phase, layer, ba, bb in keys:
        rows.append(ReconcileRow(layer, phase, "mult", f"{ba}x{bb}",
                                 ledger.mults.get((phase, layer, ba, bb), 0),
                                 predicted.mults.get((phase, layer, ba, bb), 0)))
    keys = sorted(set(ledger.mem) | set(predicted.mem))
    for phase, layer, bits in keys:
        rows.append(ReconcileRow(layer, phase, "mem", str(bits),
                                 ledger.mem.get((phase, layer, bits), 0),
                                 predicted.mem.get((phase, layer, bits), 0)))
    return rows


def reconcile_csv(rows: list[ReconcileRow]) -> str:
    lines = ["# schema v1: layer,phase,metric,bits,instrumented,analytic,delta"]
    lines.append("layer,phase,metric,bits,instrumented,analytic,delta")
    for r in rows:
        lines.append(f"{r.layer},{r.phase},{r.metric},{r.bits},"
                     f"{r.instrumented},{r.analytic},{r.delta}")
    return "\n".join(lines) + "\n"


def reconcile_text(rows: list[ReconcileRow]) -> str:
    head = f"{'layer':>5} {'phase':>9} {'metric':>6} {'bits':>6} " \
           f"{'instrumented':>16} {'analytic':>16} {'delta':>10}"
    out = [head, "-" * len(head)]
    for r in rows:
        out.append(f"{r.layer:>5} {r.phase:>9} {r.metric:>6} {r.bits:>6} "
                   f"{r.instrumented:>16} {r.analytic:>16} {r.delta:>10}")
    return "\n".join(out) + "\n"


def savings_report(geoms: list[LayerGeom], n: int, algos: tuple[str, str], *,
                   tiles: int = 1) -> dict:
    """Cost ratios of ``algos[0]`` over ``algos[1]`` in both regimes.

    Emits dominant-term decompositions, the exact line-item totals, the
    compute-regime ratio (which for cwcff vs bsff tends to C / (C_in * L))
    and the memory-regime ratio (about 32, divided by the activation bit
    width for tiled units).
    """
    base, other = algos
    c = int(round(np.mean([g.c_out for g in geoms])))
    c_in = geoms[0].c_in
    h, w = geoms[0].h_in, geoms[0].w_in
    layers = len(geoms)
    k = geoms[0].k
    dom = {a: dominant_terms(a, n=n, c=c, c_in=c_in, k=k, h=h, w=w,
                             layers=layers, tiles=tiles)
           for a in (base, other)}
    exact = {a: analytic_cost(geoms, n, a, tiles=tiles) for a in (base, other)}
    report = {
        "algos": (base, other),
        "arch": {"c_mean": c, "c_in": c_in, "k": k, "h": h, "w": w,
                 "layers": layers, "tiles": tiles, "n": n},
        "dominant": dom,
        "exact_mults": {a: exact[a].total_mults() for a in (base, other)},
        "exact_mem_words": {a: exact[a].total_mem_words() for a in (base, other)},
    }
    report["compute_ratio_dominant"] = dom[base]["mults"] / dom[other]["mults"]
    report["memory_ratio_dominant"] = dom[base]["mem_words"] / dom[other]["mem_words"]
    report["compute_ratio_exact"] = (
        report["exact_mults"][base] / max(report["exact_mults"][other], 1))
    report["exact_mem_ratio"] = (
        report["exact_mem_words"][base] / max(report["exact_mem_words"][other], 1e-12))
    report["closed_form_compute_ratio"] = c / (c_in * layers)
    report["packing_ratio"] = 32.0 / _act_bits(tiles)
    return report


def savings_text(report: dict) -> str:
    base, other = report["algos"]
    a = report["arch"]
    lines = [
        f"cost comparison: {base} vs {other}",
        f"arch: C~{a['c_mean']} C_in={a['c_in']} K={a['k']} "
        f"{a['h']}x{a['w']} L={a['layers']} tiles={a['tiles']} N={a['n']}",
        "",
        f"{'':24}{base:>18} {other:>18} {'ratio':>10}",
    ]
    for label, key in (("dominant mults", "mults"), ("dominant mem words", "mem_words")):
        b = report["dominant"][base][key]
        o = report["dominant"][other][key]
        lines.append(f"{label:<24}{b:>18.4g} {o:>18.4g} {b / o:>10.2f}")
    b, o = report["exact_mults"][base], report["exact_mults"][other]
    lines.append(f"{'exact mults':<24}{b:>18.4g} {o:>18.4g} {b / max(o, 1):>10.2f}")
    b, o = report["exact_mem_words"][base], report["exact_mem_words"][other]
    lines.append(f"{'exact mem words':<24}{b:>18.4g} {o:>18.4g} {b / max(o, 1e-12):>10.2f}")
    lines.append("")
    lines.append(f"closed-form compute ratio C/(C_in*L) = "
                 f"{report['closed_form_compute_ratio']:.2f}")
    return "\n".join(lines) + "\n"
