"""Evaluation harness: paired multi-method runs, result tables and belief plots."""
from __future__ import annotations

import csv
import logging
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import EVAL_SEED_BASE
from .diffusion import NoiseSchedule
from .dppo import terminal_reward
from .episode import (
    DiffusionPlanner,
    EpisodeConfig,
    EpisodeResult,
    RandomWalkPlanner,
    RigTreeSGAPlanner,
    belief_from_state,
    build_env,
    run_episode,
)
from .nets import PolicyNetworks
from .planners import PlannerParams

log = logging.getLogger(__name__)

METHODS = ("rigtree_sga", "aid_pt", "aid_ft", "random_walk")
LEARNED = ("aid_pt", "aid_ft")
ROW_COLUMNS = (
    "method", "n_agents", "env_seed", "initial_trace", "final_trace", "planning_time",
    "n_decisions", "time_per_decision", "max_path_length", "mean_terminal_reward",
)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    method: str
    n_envs: int = 100
    n_agents: int = 3
    seed: int = 0
    budget: float = 3.0
    out_dir: str | None = None
    checkpoint: str | None = None
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    planner: PlannerParams = field(default_factory=PlannerParams)
    schedule_beta_end: float = 0.5
    workers: int = 1

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.n_envs < 1:
            raise ConfigurationError("n_envs must be positive")

    @property
    def env_seeds(self) -> list[int]:
        return [EVAL_SEED_BASE + self.seed + j for j in range(self.n_envs)]

    @property
    def episode_config(self) -> EpisodeConfig:
        from dataclasses import replace

        return replace(self.episode, n_agents=self.n_agents, budget=self.budget)


@dataclass
class EvalResult:
    method: str
    n_agents: int
    rows: list[dict]
    hardware: dict = field(default_factory=dict)

    @property
    def env_seeds(self) -> list[int]:
        return [int(r["env_seed"]) for r in self.rows]

    def column(self, name: str) -> np.ndarray:
        return np.array([float(r[name]) for r in self.rows])

    def mean(self, name: str) -> float:
        return float(np.mean(self.column(name)))

    def std(self, name: str) -> float:
        return float(np.std(self.column(name)))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ROW_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in ROW_COLUMNS])
            for agg, fn in (("mean", np.mean), ("std", np.std)):
                w.writerow([self.method, self.n_agents, agg] + [
                    _fmt(float(fn(self.column(c)))) for c in ROW_COLUMNS[3:]
                ])

    @classmethod
    def from_csv(cls, path: str | Path) -> "EvalResult":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                if r["env_seed"] in ("mean", "std"):
                    continue
                rows.append({k: (r[k] if k == "method" else float(r[k])) for k in ROW_COLUMNS})
        if not rows:
            raise ValueError(f"{path}: no result rows")
        for r in rows:
            r["n_agents"] = int(r["n_agents"])
            r["env_seed"] = int(r["env_seed"])
            r["n_decisions"] = int(r["n_decisions"])
        return cls(rows[0]["method"], rows[0]["n_agents"], rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def hardware_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(), "cpus": os.cpu_count()}


def make_planner(config: EvalConfig, nets: PolicyNetworks | None = None):
    if config.method == "rigtree_sga":
        return RigTreeSGAPlanner(config.planner)
    if config.method == "random_walk":
        return RandomWalkPlanner()
    if nets is None:
        if not config.checkpoint:
            raise ConfigurationError(f"method {config.method} needs a checkpoint")
        if not Path(config.checkpoint).exists():
            raise ConfigurationError(f"checkpoint not found: {config.checkpoint}")
        nets, _ = PolicyNetworks.load(config.checkpoint)
    return DiffusionPlanner(nets, NoiseSchedule.linear(beta_end=config.schedule_beta_end), name=config.method)


def episode_row(method: str, res: EpisodeResult, n_agents: int) -> dict:
    rewards = [terminal_reward(t, res.initial_trace) for t in res.depletion_traces.values()]
    return {
        "method": method,
        "n_agents": n_agents,
        "env_seed": res.seed,
        "initial_trace": res.initial_trace,
        "final_trace": res.final_trace,
        "planning_time": res.planning_time,
        "n_decisions": res.n_decisions,
        "time_per_decision": res.planning_time / max(res.n_decisions, 1),
        "max_path_length": max(res.path_lengths),
        "mean_terminal_reward": float(np.mean(rewards)) if rewards else float("nan"),
    }


def _eval_one(args) -> dict:
    config, seed, nets = args
    ep = config.episode_config
    planner = make_planner(config, nets)
    res = run_episode(build_env(seed, ep, with_graphs=planner.needs_observation), planner, ep)
    return episode_row(config.method, res, config.n_agents)


def run_eval(config: EvalConfig, nets: PolicyNetworks | None = None) -> EvalResult:
    """Run ``config.n_envs`` evaluation episodes; rows are ordered by environment seed."""
    planner = make_planner(config, nets)  # validates the checkpoint up front
    nets = getattr(planner, "nets", None)
    jobs = [(config, s, nets) for s in config.env_seeds]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            rows = list(pool.map(_eval_one, jobs))
    else:
        rows = [_eval_one(j) for j in jobs]
    result = EvalResult(config.method, config.n_agents, rows, hardware_info())
    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.to_csv(out / f"{config.method}_m{config.n_agents}.csv")
    return result


# ----------------------------------------------------------------------------- comparison tables


def improvement(baseline: float, method: float) -> float:
    """Relative reduction of the baseline's trace: (baseline − method) / baseline."""
    return (baseline - method) / baseline


def _check_paired(results: Sequence[EvalResult]) -> None:
    by_m: dict[int, list[EvalResult]] = {}
    for r in results:
        by_m.setdefault(r.n_agents, []).append(r)
    for m, rs in by_m.items():
        ref = rs[0].env_seeds
        for r in rs[1:]:
            if r.env_seeds != ref:
                raise ValueError(f"results for m={m} were run on different environment sets")


def comparison_table(results: Sequence[EvalResult], baseline: str = "rigtree_sga") -> tuple[list[str], list[list[str]]]:
    """Rows per method; a (Cov. Trace, Time (s)) column pair per team size, mean ± std."""
    if len(results) < 2:
        raise ValueError("compare needs at least two results")
    _check_paired(results)
    sizes = sorted({r.n_agents for r in results})
    methods = [m for m in METHODS if any(r.method == m for r in results)]
    methods += sorted({r.method for r in results} - set(methods))
    lookup = {(r.method, r.n_agents): r for r in results}
    header = ["Method"]
    for m in sizes:
        header += [f"Cov. Trace (m={m})", f"Time (s) (m={m})"]
    body = []
    for meth in methods:
        row = [meth]
        for m in sizes:
            r = lookup.get((meth, m))
            if r is None:
                row += ["-", "-"]
            else:
                row += [f"{r.mean('final_trace'):.2f} ± {r.std('final_trace'):.2f}", f"{r.mean('planning_time'):.2f} ± {r.std('planning_time'):.2f}"]
        body.append(row)
    return header, body


def improvement_table(results: Sequence[EvalResult], baseline: str = "rigtree_sga") -> tuple[list[str], list[list[str]]]:
    _check_paired(results)
    sizes = sorted({r.n_agents for r in results})
    lookup = {(r.method, r.n_agents): r for r in results}
    header = ["Method"] + [f"Improvement % (m={m})" for m in sizes]
    body = []
    for meth in sorted({r.method for r in results}, key=lambda x: METHODS.index(x) if x in METHODS else len(METHODS)):
        row = [meth]
        for m in sizes:
            base, r = lookup.get((baseline, m)), lookup.get((meth, m))
            row.append("-" if base is None or r is None else f"{100 * improvement(base.mean('final_trace'), r.mean('final_trace')):.2f}")
        body.append(row)
    return header, body


def markdown(header: list[str], body: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in body]
    return "\n".join(lines) + "\n"


def compare(results: Sequence[EvalResult], out_dir: str | Path | None = None, baseline: str = "rigtree_sga") -> str:
    """Markdown comparison (plus CSV files when ``out_dir`` is given)."""
    header, body = comparison_table(results, baseline)
    iheader, ibody = improvement_table(results, baseline)
    text = markdown(header, body) + "\n" + markdown(iheader, ibody)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.md").write_text(text)
        for name, (h, b) in (("comparison.csv", (header, body)), ("improvement.csv", (iheader, ibody))):
            with open(out / name, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(h)
                w.writerows(b)
    return text


# ----------------------------------------------------------------------------- plots


def plot_snapshot(result: EpisodeResult, config: EpisodeConfig, path: str | Path, agent_id: int = 0) -> None:
    """Mean, std, interest-region and intent maps of the final belief with trajectories."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .gp import interest_set, posterior
    from .intent import fuse_intents

    state = result.final_state
    post = posterior(belief_from_state(state, config), config.grid)
    mask = interest_set(post, config.mu_th, config.beta_ucb)
    fused = fuse_intents([it for j, it in enumerate(state.intents) if j != agent_id], config.grid)
    n = config.grid_res
    panels = [
        ("mean", post.mean), ("std", post.std), ("interest region", mask.flags.astype(float)),
        (f"intent map (agent {agent_id})", fused.grid_values),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(16, 4))
    for ax, (title, values) in zip(axes, panels):
        im = ax.imshow(values.reshape(n, n), origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
        for traj in result.trajectories:
            ax.plot(traj[:, 0], traj[:, 1], "-", color="w", lw=1)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)


def plot_comparison(results: Sequence[EvalResult], path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({r.method for r in results})
    for meth in methods:
        rs = sorted((r for r in results if r.method == meth), key=lambda r: r.n_agents)
        ax.errorbar([r.n_agents for r in rs], [r.mean("final_trace") for r in rs], [r.std("final_trace") for r in rs], marker="o", capsize=3, label=meth)
    ax.set_xlabel("team size")
    ax.set_ylabel("final covariance trace")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=80)
    plt.close(fig)
