"""Command-line experiment runner.

    rpsp train --config cfg.yaml [--seed N ... --env NAME --agent NAME --iters N --out DIR]
    rpsp compare --runs DIR [DIR ...]
    rpsp check-gradients
    rpsp collect --env NAME --trajectories M --out batch.npz
    rpsp init-psr --traj batch.npz --out psr.npz

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from .checkpoint import save_checkpoint
from .config import FIELDS, ExperimentConfig, dump_config, from_dict, load_config
from .envs import collect_blind, make_env
from .errors import InvalidConfigurationError, RPSPError
from .trajectory import load_batch, save_batch

log = logging.getLogger("rpsp")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CSV_COLUMNS = ("iteration", "env_steps", "avg_return", "pred_loss", "mean_kl",
               "grad_norm_l1", "grad_norm_l2", "cap_events", "wall_ms", "mean_length")
SUMMARY_METRICS = ("avg_return", "mean_length", "pred_loss")


def area_under_curve(values):
    """Sum of a per-iteration curve (a constant c over N iterations gives c * N)."""
    return float(np.sum(np.asarray(values, dtype=float)))


def csv_path(out, seed):
    return os.path.join(out, f"seed{seed}.csv")


def _run_seed(cfg, seed):
    """Train one seed, appending a flushed CSV row per iteration. Returns the rows."""
    from .training import rpspo_train

    ckpt_dir = os.path.join(cfg.out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    with open(csv_path(cfg.out, seed), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        fh.flush()

        def on_metrics(row):
            writer.writerow(row)
            fh.flush()

        result = rpspo_train(cfg, seed, on_metrics=on_metrics, checkpoint_dir=ckpt_dir)
    save_checkpoint(os.path.join(ckpt_dir, f"seed{seed}_final.npz"), result.psr, result.policy,
                    {"seed": seed, "iteration": cfg.iters, "env": cfg.env, "agent": cfg.agent})
    return result.metrics


def read_metrics(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def summarize(cfg, per_seed):
    """Per-iteration mean and standard error across seeds, plus the AUC of the mean return."""
    n = min(len(rows) for rows in per_seed.values())
    out = {"env": cfg.env, "agent": cfg.agent, "seeds": sorted(per_seed), "iterations": n}
    for key in SUMMARY_METRICS:
        vals = np.array([[rows[i][key] for i in range(n)] for rows in per_seed.values()], dtype=float)
        mean = vals.mean(axis=0)
        stderr = vals.std(axis=0, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else np.zeros(n)
        out[key] = {"mean": mean.tolist(), "stderr": stderr.tolist()}
    out["auc"] = area_under_curve(out["avg_return"]["mean"])
    return out


def run_experiment(cfg):
    """Runs every seed (up to ``cfg.workers`` at a time) and writes CSVs, config and summary."""
    cfg.validate()
    os.makedirs(cfg.out, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out, "config.yaml"))
    workers = min(cfg.workers, len(cfg.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {s: pool.submit(_run_seed, cfg, s) for s in cfg.seeds}
            per_seed = {s: f.result() for s, f in futures.items()}
    else:
        per_seed = {s: _run_seed(cfg, s) for s in cfg.seeds}
    summary = summarize(cfg, per_seed)
    with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def compare_agents(summaries, labels=None):
    """Ranked rows (best AUC first) of label, env, seeds, AUC, final mean return and its stderr."""
    labels = labels or [s["agent"] for s in summaries]
    rows = [dict(label=lab, env=s["env"], seeds=len(s["seeds"]), auc=s["auc"],
                 final=s["avg_return"]["mean"][-1] if s["iterations"] else float("nan"),
                 final_stderr=s["avg_return"]["stderr"][-1] if s["iterations"] else float("nan"))
            for lab, s in zip(labels, summaries)]
    rows.sort(key=lambda r: -r["auc"])
    for rank, r in enumerate(rows, 1):
        r["rank"] = rank
    return rows


def format_table(rows):
    lines = [f"{'rank':>4}  {'agent':<16} {'env':<14} {'seeds':>5} {'AUC':>12} {'final return':>22}"]
    for r in rows:
        final = f"{r['final']:.2f} +/- {r['final_stderr']:.2f}"
        lines.append(f"{r['rank']:>4}  {r['label']:<16} {r['env']:<14} {r['seeds']:>5} {r['auc']:>12.2f} {final:>22}")
    return "\n".join(lines)


def _parse_value(text):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidConfigurationError(f"cannot parse value {text!r}") from exc


def resolve_config(args):
    """Defaults < config file < --set pairs < explicit flags."""
    base = load_config(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    for pair in args.set or []:
        if "=" not in pair:
            raise InvalidConfigurationError(f"--set expects KEY=VALUE, got {pair!r}")
        k, v = pair.split("=", 1)
        base[k.strip()] = _parse_value(v)
    for name in FIELDS:
        raw = getattr(args, "cfg_" + name, None)
        if raw is not None:
            base[name] = _parse_value(raw)
    if args.seed:
        base["seeds"] = list(args.seed)
    return from_dict(base)


def _add_config_flags(p, skip=("seeds",)):
    p.add_argument("--config", help="YAML file with flat config keys")
    p.add_argument("--seed", type=int, action="append", help="seed to run (repeatable; replaces 'seeds')")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    for name in FIELDS:
        if name not in skip:
            p.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, metavar="VALUE")


def cmd_train(args):
    cfg = resolve_config(args)
    summary = run_experiment(cfg)
    print(f"{cfg.agent} on {cfg.env}: AUC {summary['auc']:.2f} over {summary['iterations']} iterations; "
          f"results in {cfg.out}")
    return EXIT_OK


def cmd_compare(args):
    summaries, labels = [], []
    for d in args.runs:
        path = os.path.join(d, "summary.json")
        try:
            with open(path) as fh:
                summaries.append(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfigurationError(f"cannot read {path}: {exc}") from exc
        labels.append(summaries[-1]["agent"])
    if len(set(labels)) < len(labels):
        labels = [f"{lab} ({os.path.basename(os.path.normpath(d))})" for lab, d in zip(labels, args.runs)]
    rows = compare_agents(summaries, labels)
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
    return EXIT_OK


def cmd_check_gradients(args):
    from .gradcore import gradient_check_suite

    worst = 0.0
    for seed, name, res in gradient_check_suite(seeds=range(args.seeds)):
        worst = max(worst, res.max_rel_err)
        print(f"seed {seed} {name:<10} max rel err {res.max_rel_err:.2e} at {res.key}{list(res.index or ())} "
              f"({res.n_checked} coordinates)")
    ok = worst <= args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst relative error {worst:.2e} (tolerance {args.tol:g})")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_collect(args):
    if args.trajectories < 1:
        raise InvalidConfigurationError("--trajectories must be >= 1")
    env_fn = lambda s: make_env(args.env, seed=s, horizon=args.horizon, noise=args.noise)
    trajs = collect_blind(env_fn, args.trajectories, np.random.default_rng(args.seed))
    save_batch(args.out, trajs)
    print(f"saved {len(trajs)} trajectories ({sum(len(t) for t in trajs)} steps) to {args.out}")
    return EXIT_OK


def cmd_init_psr(args):
    from .gradcore import prediction_loss
    from .init2sr import initialize_psr
    from .training import psr_config

    cfg = resolve_config(args)
    try:
        trajs = load_batch(args.traj)
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidConfigurationError(f"cannot read trajectory batch {args.traj}: {exc}") from exc
    spec = make_env(cfg.env).spec
    psr = initialize_psr(trajs, psr_config(cfg, cfg.seeds[0]), action_low=spec.action_low,
                         action_high=spec.action_high)
    save_checkpoint(args.out, psr, None, {"source": os.path.abspath(args.traj), "env": cfg.env})
    print(f"initialized PSR (d_q={psr.d_q}) from {len(trajs)} trajectories; "
          f"prediction loss {prediction_loss(psr, trajs):.4f}; saved to {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="rpsp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one agent over one or more seeds")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compare", help="rank finished runs by area under the return curve")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", help="also write the table as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check-gradients", help="finite-difference check of the backward pass")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_gradients)

    p = sub.add_parser("collect", help="save blind-exploration trajectories")
    p.add_argument("--env", default="po_cartpole")
    p.add_argument("--trajectories", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=int)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("init-psr", help="two-stage initialization from a saved batch")
    p.add_argument("--traj", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    _add_config_flags(p, skip=("seeds", "out"))
    p.set_defaults(func=cmd_init_psr)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvalidConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RPSPError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        ckpt = getattr(exc, "checkpoint", None)
        if ckpt:
            print(f"checkpoint: {ckpt}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
