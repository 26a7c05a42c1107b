"""Operator command line: train, sweep, energy.

Every training run leaves a self-describing directory: the resolved config
snapshot, metrics.csv, energy.csv, model.ckpt, and a convergence figure.
Exit codes: 0 ok, 1 run failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import statistics
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, data, energy, plots, trainer
from .errors import ConfigError, DataFormatError


def _add_common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--dataset", choices=config.DATASETS)
    p.add_argument("--data-root", dest="data_root")
    p.add_argument("--estimator", choices=config.ESTIMATORS)
    p.add_argument("--activation", choices=config.ACTIVATIONS)
    p.add_argument("--tiles", type=int)
    p.add_argument("--loss-at", dest="loss_at", choices=["post_norm", "post_pool"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr-conv", dest="lr_conv", type=float)
    p.add_argument("--lr-classifier", dest="lr_classifier", type=float)
    p.add_argument("--windows")
    p.add_argument("--channels")
    p.add_argument("--kernel", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--subset", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--eval-policy", dest="eval_policy",
                   choices=["expectation", "sampled"])


def _config_from_args(args) -> config.RunConfig:
    file_values = config.parse_config_file(args.config) if args.config else {}
    overrides = {k: v for k, v in vars(args).items()
                 if k in config._FIELD_TYPES and v is not None}
    return config.build_config(file_values, overrides)


def _load_splits(cfg: config.RunConfig):
    train_ds = data.load_dataset(cfg.dataset, "train", cfg.data_root or None)
    test_ds = data.load_dataset(cfg.dataset, "test", cfg.data_root or None)
    if cfg.subset:
        train_ds = train_ds.subset(cfg.subset)
    return train_ds, test_ds


def run_training(cfg: config.RunConfig, out_dir: Path, log=print):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved").write_text(config.resolved_text(cfg))
    train_ds, test_ds = _load_splits(cfg)
    net = config.net_from_config(cfg, ncat=10)
    schedule = config.schedule_from_config(cfg)
    model, metrics = trainer.train(net, schedule, train_ds, test_ds, cfg.seed,
                                   estimator=cfg.estimator, log=log,
                                   eval_policy=cfg.eval_policy)
    (out_dir / "metrics.csv").write_text(metrics.to_csv())
    geoms = net.geometry()
    algo = _ledger_algo(cfg)
    predicted = energy.analytic_schedule_cost(geoms, train_ds.n, algo,
                                              schedule.windows, tiles=cfg.tiles,
                                              batch_size=schedule.batch_size)
    rows = energy.reconcile(metrics.ledger, predicted)
    (out_dir / "energy.csv").write_text(energy.reconcile_csv(rows))
    checkpoint.save_model(out_dir / "model.ckpt", model)
    plots.plot_convergence(metrics, out_dir / "convergence.svg")
    log(f"final test accuracy: {metrics.final_accuracy:.4f}")
    return model, metrics


def _ledger_algo(cfg: config.RunConfig) -> str:
    if cfg.estimator == "lff":
        return "cwcff"
    if cfg.estimator == "bgbsff":
        return "bgbsff_nobn" if cfg.loss_at == "post_pool" else "bgbsff"
    return "bsff"


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out_dir)
    run_training(cfg, out_dir)
    return 0


def _sweep_one(run_cfg: config.RunConfig) -> float:
    _, metrics = run_training(run_cfg, Path(run_cfg.out_dir), log=lambda *_: None)
    return metrics.final_accuracy


def cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    if len(seeds) < 2:
        print("error: need >= 2 seeds", file=sys.stderr)
        return 2
    base = Path(cfg.out_dir)
    run_cfgs = [dataclasses.replace(cfg, seed=seed, out_dir=str(base / f"seed{seed}"))
                for seed in seeds]
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            accs = list(pool.map(_sweep_one, run_cfgs))
    else:
        accs = [_sweep_one(rc) for rc in run_cfgs]
    rows = [{"seed": seed, "accuracy": acc} for seed, acc in zip(seeds, accs)]
    accs = [r["accuracy"] for r in rows]
    mean = statistics.fmean(accs)
    std = statistics.pstdev(accs) if len(accs) > 1 else 0.0
    q1, med, q3 = (float(np.percentile(accs, p)) for p in (25, 50, 75))
    base.mkdir(parents=True, exist_ok=True)
    lines = ["# schema v1: seed,accuracy", "seed,accuracy"]
    lines += [f"{r['seed']},{r['accuracy']:.9g}" for r in rows]
    lines.append(f"summary,mean={mean:.9g},std={std:.9g},"
                 f"q1={q1:.9g},median={med:.9g},q3={q3:.9g}")
    (base / "summary.csv").write_text("\n".join(lines) + "\n")
    plots.plot_sweep(rows, base / "sweep.svg")
    print(f"accuracy over {len(seeds)} seeds: {mean:.4f} +/- {std:.4f} "
          f"(IQR {q1:.4f}..{q3:.4f})")
    return 0


def cmd_energy(args) -> int:
    cfg = _config_from_args(args)
    if args.checkpoint:
        net = checkpoint.load_model(args.checkpoint).net
    else:
        net = config.net_from_config(cfg, ncat=10)
    geoms = net.geometry()
    n = args.n
    algos = args.algos.split(",")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dominant = {}
    c_mean = int(round(sum(g.c_out for g in geoms) / len(geoms)))
    for algo in algos:
        dominant[algo] = energy.dominant_terms(
            algo, n=n, c=c_mean, c_in=geoms[0].c_in, k=geoms[0].k,
            h=geoms[0].h_in, w=geoms[0].w_in, layers=len(geoms), tiles=cfg.tiles)
    model = energy.CostModel()
    text = ("cost model assumptions: one 32x32 multiply = 1 MAC-equivalent; "
            f"multiplier energy ~ (bit width)^{model.bit_exponent:g}; one 32-bit "
            f"{model.memory_tier} access = {model.access_ratio:g} MACs, scaled "
            "linearly by element width (binary tensors pack 32 per word); "
            "counters fire at the modeled algorithmic read/write and multiply "
            "sites, not host loads/stores.\n\n")
    if len(algos) >= 2:
        report = energy.savings_report(geoms, n, (algos[0], algos[1]),
                                       tiles=cfg.tiles)
        text += energy.savings_text(report)
    lines = ["# schema v1: algo,metric,value", "algo,metric,value"]
    for algo in algos:
        led = energy.analytic_cost(geoms, n, algo, tiles=cfg.tiles,
                                   batch_size=cfg.batch_size)
        lines.append(f"{algo},dominant_mults,{dominant[algo]['mults']:.9g}")
        lines.append(f"{algo},dominant_mem_words,{dominant[algo]['mem_words']:.9g}")
        lines.append(f"{algo},exact_mults,{led.total_mults()}")
        lines.append(f"{algo},exact_mem_words,{led.total_mem_words():.9g}")
        lines.append(f"{algo},mac_equivalent,{energy.mac_equivalent(led, model):.9g}")
    csv_text = "\n".join(lines) + "\n"
    if args.ledger:
        led = _ledger_from_csv(args.ledger)
        predicted = energy.analytic_cost(geoms, n, algos[0], tiles=cfg.tiles,
                                         batch_size=cfg.batch_size)
        rows = energy.reconcile(led, predicted)
        text += "\n" + energy.reconcile_text(rows)
        (out_dir / "reconcile.csv").write_text(energy.reconcile_csv(rows))
    else:
        text += "\n(no instrumented ledger supplied: analytic-only report)\n"
    (out_dir / "energy.csv").write_text(csv_text)
    (out_dir / "energy.txt").write_text(text)
    plots.plot_cost_bars(dominant, out_dir / "energy.svg")
    if args.format == "csv":
        print(csv_text, end="")
    else:
        print(text, end="")
    return 0


def _ledger_from_csv(path) -> energy.EnergyLedger:
    led = energy.EnergyLedger()
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") or line.startswith("layer,") or not line.strip():
            continue
        layer, phase, metric, bits, instrumented = line.split(",")[:5]
        if metric == "mult":
            a, b = bits.split("x")
            led.add_mults(phase, int(layer), int(a), int(b), int(instrumented))
        else:
            led.add_mem(phase, int(layer), int(bits), int(instrumented))
    return led


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bsff",
        description="binary stochastic forward-forward training and energy reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one model, write artifacts")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_sweep = sub.add_parser("sweep", help="train across seeds, summarize")
    _add_common(p_sweep)
    p_sweep.add_argument("--seeds", required=True, help="comma-separated, >= 2")
    p_sweep.add_argument("--parallel", type=int, default=1,
                         help="run up to this many seeds as parallel processes")
    p_sweep.set_defaults(func=cmd_sweep)

    p_energy = sub.add_parser("energy", help="analytic cost and savings report")
    _add_common(p_energy)
    p_energy.add_argument("--algos", default="cwcff,bsff",
                          help="comma-separated cost models to compare")
    p_energy.add_argument("--n", type=int, default=128, help="samples per pass")
    p_energy.add_argument("--checkpoint",
                          help="derive the architecture from a model.ckpt")
    p_energy.add_argument("--ledger", help="instrumented energy.csv to reconcile")
    p_energy.add_argument("--format", choices=["text", "csv"], default="text")
    p_energy.set_defaults(func=cmd_energy)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
