"""Command-line interface.

Subcommands: generate, sample, infer, se, experiment-iters, experiment-sweep,
baselines.  Exit codes: 0 success, 1 configuration error, 2 partial trial
failures (partial results are still written).
"""
import argparse
import json
import os
import sys

import numpy as np

from .engine import run
from .errors import ConfigError, MlvampError
from .experiment import (
    PAPER_SWEEP_N_MEAS,
    ExperimentConfig,
    run_baseline_comparison,
    run_iteration_experiment,
    run_measurement_sweep,
    se_to_rows,
    write_rows_csv,
)
from .network import (
    build_synthetic_network,
    load_network,
    sample_trajectory,
    save_network,
)
from .state_evolution import run_se, se_state_to_json, stats_from_network


def _add_config_args(p, sweep=False):
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--paper", action="store_true",
                   help="use the built-in synthetic-experiment preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--n-meas", help="measurement count (comma list for sweeps)")
    p.add_argument("--methods", help="comma list from mlvamp,map,sgld")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-runtime", action="store_true",
                   help="leave the runtime_ms column empty (byte-reproducible CSV)")
    p.add_argument("--out", default=".", help="output directory")


def _parse_n_meas(text):
    vals = [int(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ConfigError("empty n_meas list")
    return vals if len(vals) > 1 else vals[0]


def load_config(args, sweep=False):
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            cfg = ExperimentConfig.from_dict(json.load(fh))
    else:
        cfg = ExperimentConfig()
    if sweep and (args.config is None and args.n_meas is None):
        cfg.n_meas = list(PAPER_SWEEP_N_MEAS)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "trials", None) is not None:
        cfg.n_trials = args.trials
    if getattr(args, "iters", None) is not None:
        cfg.n_iter = args.iters
    if getattr(args, "n_meas", None):
        cfg.n_meas = _parse_n_meas(args.n_meas)
    if getattr(args, "methods", None):
        cfg.methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "no_runtime", False):
        cfg.include_runtime = False
    cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _outdir(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _net_from_args(args):
    if getattr(args, "net", None):
        return load_network(args.net)
    cfg = load_config(args)
    if not np.isscalar(cfg.n_meas):
        raise ConfigError("network generation needs a single n_meas")
    return build_synthetic_network(cfg.dims, cfg.rho, cfg.kappa, cfg.snr_db,
                                   int(cfg.n_meas), cfg.seed)


def cmd_generate(args):
    out = _outdir(args)
    net = _net_from_args(args)
    path = os.path.join(out, "network.json")
    save_network(net, path, mode="explicit" if args.explicit else "auto")
    print(path)
    return 0


def cmd_sample(args):
    out = _outdir(args)
    net = load_network(args.net)
    traj = sample_trajectory(net, args.seed)
    path = os.path.join(out, "trajectory.npz")
    arrays = {f"z{i}": z for i, z in enumerate(traj.z)}
    arrays.update({f"q0_{i}": q for i, q in enumerate(traj.q0)})
    arrays.update({f"p0_{i}": p for i, p in enumerate(traj.p0)})
    np.savez(path, **arrays)
    print(path)
    return 0


def cmd_infer(args):
    out = _outdir(args)
    net = load_network(args.net)
    cfg = load_config(args)
    cfg.store_estimates = True
    truth = None
    if args.observation:
        y = np.load(args.observation)
    elif args.sample_seed is not None:
        truth = sample_trajectory(net, args.sample_seed)
        y = truth.z[-1]
    else:
        raise ConfigError("infer needs --observation or --sample-seed")
    opts = cfg.engine_options()
    records = run(net, y, opts, truth=truth)
    se = run_se(stats_from_network(net), cfg.n_iter, opts)
    rows = []
    for rec in records:
        se_rec = se.records[rec.half_iter - 1]
        for layer in range(net.n_layers):
            rows.append({
                "trial": 0, "method": "mlvamp", "half_iter": rec.half_iter,
                "layer": layer,
                "nmse_db": float(rec.nmse_db[layer]) if truth is not None else "",
                "se_nmse_db": float(se_rec.nmse_db[layer]),
                "gamma_plus": float(rec.gamma_plus[layer]),
                "gamma_minus": float(rec.gamma_minus[layer]),
                "clamp_events": rec.clamp_events, "runtime_ms": "",
            })
    write_rows_csv(rows, os.path.join(out, "infer.csv"))
    # last forward-sweep estimate of the input layer (the default series)
    z0_hat = records[-2].z_hat[0] if len(records) >= 2 else records[-1].z_hat[0]
    np.save(os.path.join(out, "z0_hat.npy"), z0_hat)
    print(os.path.join(out, "infer.csv"))
    return 0


def cmd_se(args):
    out = _outdir(args)
    net = _net_from_args(args)
    cfg = load_config(args)
    se = run_se(stats_from_network(net), cfg.n_iter, cfg.engine_options())
    write_rows_csv(se_to_rows(se), os.path.join(out, "se.csv"))
    with open(os.path.join(out, "se.json"), "w", encoding="utf-8") as fh:
        json.dump(se_state_to_json(se), fh)
    print(os.path.join(out, "se.csv"))
    return 0


def cmd_experiment_iters(args):
    out = _outdir(args)
    cfg = load_config(args)
    result = run_iteration_experiment(cfg)
    result.write_csv(os.path.join(out, "iters.csv"))
    result.write_json(os.path.join(out, "result.json"))
    print(os.path.join(out, "iters.csv"))
    return 2 if result.partial else 0


def cmd_experiment_sweep(args):
    out = _outdir(args)
    cfg = load_config(args, sweep=True)
    sweep = run_measurement_sweep(cfg)
    for m, res in sweep.per_m.items():
        res.write_csv(os.path.join(out, f"iters_M{m}.csv"))
    sweep.write_summary_csv(os.path.join(out, "sweep_summary.csv"))
    doc = {"config": sweep.config, "summary": sweep.summary_rows,
           "metadata": sweep.metadata}
    with open(os.path.join(out, "sweep.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    print(os.path.join(out, "sweep_summary.csv"))
    return 2 if sweep.partial else 0


def cmd_baselines(args):
    out = _outdir(args)
    cfg = load_config(args)
    if not set(cfg.methods) - {"mlvamp"}:
        cfg.methods = tuple(cfg.methods) + ("map", "sgld")
        cfg.validate()
    result = run_baseline_comparison(cfg)
    result.write_csv(os.path.join(out, "baselines.csv"))
    result.write_json(os.path.join(out, "baselines.json"))
    print(os.path.join(out, "baselines.csv"))
    return 2 if result.partial else 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="mlvamp",
        description="Inference in multi-layer stochastic generative networks "
                    "with a state-evolution predictor and MAP/SGLD baselines.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="emit a network JSON document")
    _add_config_args(g)
    g.add_argument("--net", help=argparse.SUPPRESS)
    g.add_argument("--explicit", action="store_true",
                   help="store orthogonal factors explicitly")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("sample", help="sample one trajectory from a network")
    s.add_argument("--net", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_sample)

    i = sub.add_parser("infer", help="run inference on one observation")
    _add_config_args(i)
    i.add_argument("--net", required=True)
    i.add_argument("--observation", help=".npy observation vector")
    i.add_argument("--sample-seed", type=int,
                   help="sample the observation (enables NMSE tracking)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("se", help="run the state-evolution predictor")
    _add_config_args(e)
    e.add_argument("--net")
    e.set_defaults(func=cmd_se)

    x = sub.add_parser("experiment-iters", help="NMSE-vs-iteration experiment")
    _add_config_args(x)
    x.set_defaults(func=cmd_experiment_iters)

    w = sub.add_parser("experiment-sweep", help="final NMSE vs measurement count")
    _add_config_args(w, sweep=True)
    w.set_defaults(func=cmd_experiment_sweep)

    b = sub.add_parser("baselines", help="MAP/SGLD comparison on shared trials")
    _add_config_args(b)
    b.set_defaults(func=cmd_baselines)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except MlvampError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
