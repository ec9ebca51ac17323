"""``maipp`` command line: generate-data, pretrain, finetune, eval, compare.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data corruption,
5 numerical failure, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .autodiff import CheckpointError
from .bench import METHODS, ConfigurationError, EvalConfig, EvalResult, compare, plot_comparison, plot_snapshot, run_eval
from .config import ConfigError, apply_overrides, load_config
from .dataset import DatasetCorruptError, batch_sampler, collect_demos, load_dataset
from .diffusion import BCConfig, NoiseSchedule, train_bc
from .dppo import DivergenceError, FinetuneConfig, finetune
from .episode import EpisodeConfig, build_env, run_episode
from .gp import GPConditioningError
from .nets import NetConfig, PolicyNetworks
from .planners import PlannerParams

log = logging.getLogger("maipp")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4, 5


def _episode_config(args, cfg) -> EpisodeConfig:
    ep = apply_overrides(EpisodeConfig(), "episode", cfg)
    changes = {}
    if getattr(args, "agents", None) is not None and isinstance(args.agents, int):
        changes["n_agents"] = args.agents
    if getattr(args, "budget", None) is not None:
        changes["budget"] = args.budget
    return replace(ep, **changes) if changes else ep


def _schedule(cfg) -> NoiseSchedule:
    s = cfg.get("schedule", {})
    return NoiseSchedule.linear(int(s.get("steps", 20)), float(s.get("beta_start", 1e-4)), float(s.get("beta_end", 0.5)))


def cmd_generate_data(args, cfg) -> None:
    ep = _episode_config(args, cfg)
    params = apply_overrides(PlannerParams(), "planner", cfg)
    manifest = collect_demos(args.planner, args.envs, args.seed, args.out, ep, params)
    print(json.dumps(manifest["counts"]))


def cmd_pretrain(args, cfg) -> None:
    ds = load_dataset(args.data)
    bc = apply_overrides(BCConfig(), "bc", cfg)
    if args.steps is not None:
        bc = replace(bc, steps=args.steps)
    nets = PolicyNetworks(NetConfig(), seed=args.seed)
    losses = train_bc(nets, batch_sampler(ds, bc.batch_size), _schedule(cfg), bc, np.random.default_rng(args.seed),
                      on_log=lambda s, l: log.info("step %d loss %.4f", s, l))
    nets.save(args.out, {"stage": "pretrain", "bc": asdict(bc), "dataset_hash": ds.manifest["config_hash"], "final_loss": losses[-1]})
    print(f"saved {args.out} (final loss {losses[-1]:.4f})")


def cmd_finetune(args, cfg) -> None:
    if not Path(args.checkpoint).exists():
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    nets, meta = PolicyNetworks.load(args.checkpoint)
    ft = apply_overrides(FinetuneConfig(), "finetune", cfg)
    if args.iterations is not None:
        ft = replace(ft, iterations=args.iterations)
    ft = replace(ft, seed=args.seed)
    out = Path(args.out)
    log_path = out.with_suffix(".csv")
    outcome = finetune(nets, _schedule(cfg), ft, _episode_config(args, cfg), log_path)
    outcome.nets.save(out, {"stage": "finetune", "finetune": asdict(ft), "best_iteration": outcome.best_iteration})
    print(f"saved {out} (best iteration {outcome.best_iteration}); log {log_path}")


def cmd_eval(args, cfg) -> None:
    ep = _episode_config(args, cfg)
    params = apply_overrides(PlannerParams(), "planner", cfg)
    beta_end = float(cfg.get("schedule", {}).get("beta_end", 0.5))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for m in args.agents:
        ec = EvalConfig(args.method, args.envs, m, args.seed, ep.budget if args.budget is None else args.budget,
                        str(out), args.checkpoint, ep, params, beta_end, args.workers)
        res = run_eval(ec)
        results.append(res)
        print(f"{args.method} m={m}: trace {res.mean('final_trace'):.3f} ± {res.std('final_trace'):.3f}, "
              f"time {res.mean('planning_time'):.3f}s")
    (out / f"{args.method}_meta.json").write_text(json.dumps({"hardware": results[0].hardware, "episode": asdict(ep)}, indent=1))
    if args.snapshot:
        ec = EvalConfig(args.method, 1, args.agents[0], args.seed, ep.budget, None, args.checkpoint, ep, params, beta_end)
        from .bench import make_planner

        planner = make_planner(ec)
        epc = ec.episode_config
        res = run_episode(build_env(ec.env_seeds[0], epc, with_graphs=planner.needs_observation), planner, epc)
        plot_snapshot(res, epc, out / f"{args.method}_snapshot.png")


def cmd_compare(args, cfg) -> None:
    results = [EvalResult.from_csv(p) for p in args.results]
    text = compare(results, args.out)
    plot_comparison(results, Path(args.out) / "comparison.png")
    print(text)


def _agents_list(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated team sizes, got {s!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maipp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, agents_multi=False):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", default=None, help="key = value overrides file")
        sp.add_argument("--budget", type=float, default=None)
        if agents_multi:
            sp.add_argument("--agents", type=_agents_list, default=[3])
        else:
            sp.add_argument("--agents", type=int, default=None)

    g = sub.add_parser("generate-data", help="collect demonstrations from a classical planner")
    common(g)
    g.add_argument("--planner", choices=("rigtree_sga", "random_walk"), default="rigtree_sga")
    g.add_argument("--envs", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("pretrain", help="behaviour-clone a diffusion policy")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="PPO fine-tuning of a pre-trained checkpoint")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--iterations", type=int, default=None)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a method on the fixed evaluation environments")
    common(e, agents_multi=True)
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--envs", type=int, default=100)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--snapshot", action="store_true", help="also plot belief maps of the first environment")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("compare", help="tabulate evaluation results")
    c.add_argument("--results", nargs="+", required=True)
    c.add_argument("--config", default=None)
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args, load_config(args.config))
    except (ConfigError, ConfigurationError, CheckpointError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetCorruptError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (GPConditioningError, DivergenceError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
