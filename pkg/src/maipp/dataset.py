"""Demonstration datasets: collection from classical planners, storage, minibatching.

Layout of a dataset directory::

    manifest.json   format version, counts, generator config + hash, sha256 per file
                    and of the manifest itself
    graphs.jsonl    one line per roadmap: id, node count, offsets into graphs.bin
    graphs.bin      little-endian float64: node positions then spectral encoding
    records.jsonl   one line per decision: graph id, env seed, agent id, decision index, offset
    records.bin     little-endian float64: nodes, prev_nodes, agent, prev_agent, action

Roadmaps are stored once and referenced by id from every record.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .diffusion import MAX_STEP
from .episode import EpisodeConfig, RandomWalkPlanner, RigTreeSGAPlanner, build_env, demo_action, run_episode
from .nets import ObsBatch
from .planners import PlannerParams

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
FILES = ("graphs.jsonl", "graphs.bin", "records.jsonl", "records.bin")
DEMO_PLANNERS = ("rigtree_sga", "random_walk")
VALIDATION_SEED_BASE = 500_000
EVAL_SEED_BASE = 1_000_000


class DatasetCorruptError(ValueError):
    def __init__(self, file: str, reason: str) -> None:
        super().__init__(f"dataset file {file!r} failed validation: {reason}")
        self.file = file


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _manifest_checksum(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def training_seeds(n_envs: int, seed: int) -> list[int]:
    seeds = [seed + j for j in range(n_envs)]
    if seeds and (seeds[0] < 0 or seeds[-1] >= VALIDATION_SEED_BASE):
        raise ValueError(f"training seeds must lie in [0, {VALIDATION_SEED_BASE})")
    return seeds


def _planner(planner_id: str, params: PlannerParams):
    if planner_id == "rigtree_sga":
        return RigTreeSGAPlanner(params)
    if planner_id == "random_walk":
        return RandomWalkPlanner()
    raise ValueError(f"unknown demonstration planner {planner_id!r}; choose from {DEMO_PLANNERS}")


def collect_demos(
    planner_id: str,
    n_envs: int,
    seed: int,
    out_dir: str | Path,
    config: EpisodeConfig = EpisodeConfig(),
    params: PlannerParams = PlannerParams(),
) -> dict:
    """Run full episodes and store (observation, normalised next-T_p delta) pairs.

    Returns the manifest written to ``out_dir``.
    """
    planner = _planner(planner_id, params)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gen_config = {
        "planner": planner_id,
        "n_envs": n_envs,
        "seed": seed,
        "episode": asdict(config),
        "planner_params": {k: v for k, v in asdict(params).items() if k != "candidate_points"},
        "max_step": MAX_STEP,
    }
    n_records = n_graphs = 0
    with open(out / "graphs.jsonl", "w") as gj, open(out / "graphs.bin", "wb") as gb, \
            open(out / "records.jsonl", "w") as rj, open(out / "records.bin", "wb") as rb:
        goff = roff = 0
        for env_seed in training_seeds(n_envs, seed):
            env = build_env(env_seed, config)
            for i, (g, enc) in enumerate(zip(env.graphs, env.encodings)):
                blob = np.concatenate([g.nodes.ravel(), enc.vectors.ravel()]).astype("<f8")
                gj.write(json.dumps({"graph_id": f"{env_seed}:{i}", "n": g.n, "dim": enc.dim, "k": g.k, "offset": goff}, sort_keys=True) + "\n")
                gb.write(blob.tobytes())
                goff += blob.size
                n_graphs += 1
            result = run_episode(env, planner, config, keep_observations=True)
            for rec in result.decisions:
                o = rec.observation
                action = demo_action(rec, MAX_STEP)
                if not np.all(np.isfinite(action)) or np.abs(action).max() > 1.0 + 1e-9:
                    raise ValueError(f"env {env_seed}: demonstration step exceeds the normalisation scale")
                action = np.clip(action, -1.0, 1.0)
                blob = np.concatenate([o.nodes.ravel(), o.prev_nodes.ravel(), o.agent, o.prev_agent, action.ravel()]).astype("<f8")
                meta = {
                    "graph_id": o.graph_id,
                    "env_seed": env_seed,
                    "agent_id": rec.agent_id,
                    "decision_index": rec.decision_index,
                    "n": o.n,
                    "horizon": len(action),
                    "offset": roff,
                }
                rj.write(json.dumps(meta, sort_keys=True) + "\n")
                rb.write(blob.tobytes())
                roff += blob.size
                n_records += 1
            log.info("env %d: %d decisions", env_seed, result.n_decisions)
    manifest = {
        "format_version": FORMAT_VERSION,
        "counts": {"records": n_records, "graphs": n_graphs, "envs": n_envs},
        "config": gen_config,
        "config_hash": config_hash(gen_config),
        "checksums": {f: _sha256(out / f) for f in FILES},
    }
    manifest["manifest_checksum"] = _manifest_checksum(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


@dataclass
class Dataset:
    manifest: dict
    graph_ids: list[str]
    graph_nodes: list[np.ndarray]
    encodings: list[np.ndarray]
    record_meta: list[dict]
    nodes: np.ndarray  # (N, n, 5)
    prev_nodes: np.ndarray
    agent: np.ndarray  # (N, 4)
    prev_agent: np.ndarray
    actions: np.ndarray  # (N, T_p, 2)
    graph_index: np.ndarray  # (N,) index into encodings

    def __len__(self) -> int:
        return len(self.actions)

    def batch(self, idx) -> tuple[ObsBatch, np.ndarray]:
        idx = np.asarray(idx, dtype=np.intp)
        enc = np.stack([self.encodings[g] for g in self.graph_index[idx]])
        obs = ObsBatch(self.nodes[idx], enc, self.agent[idx], self.prev_nodes[idx], self.prev_agent[idx])
        return obs, self.actions[idx]


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetCorruptError("manifest.json", str(e)) from None
    if not isinstance(manifest, dict) or manifest.get("manifest_checksum") != _manifest_checksum(manifest):
        raise DatasetCorruptError("manifest.json", "manifest checksum mismatch")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetCorruptError("manifest.json", f"unsupported format version {manifest.get('format_version')!r}")
    for f in FILES:
        p = root / f
        if not p.exists():
            raise DatasetCorruptError(f, "missing")
        if _sha256(p) != manifest["checksums"].get(f):
            raise DatasetCorruptError(f, "checksum mismatch")

    gblob = np.frombuffer((root / "graphs.bin").read_bytes(), dtype="<f8")
    graph_ids, gnodes, encs = [], [], []
    for line in (root / "graphs.jsonl").read_text().splitlines():
        g = json.loads(line)
        n, dim, off = g["n"], g["dim"], g["offset"]
        graph_ids.append(g["graph_id"])
        gnodes.append(gblob[off : off + 2 * n].reshape(n, 2).astype(float))
        encs.append(gblob[off + 2 * n : off + 2 * n + n * dim].reshape(n, dim).astype(float))
    gpos = {gid: i for i, gid in enumerate(graph_ids)}

    rblob = np.frombuffer((root / "records.bin").read_bytes(), dtype="<f8")
    metas = [json.loads(line) for line in (root / "records.jsonl").read_text().splitlines()]
    if len(metas) != manifest["counts"]["records"]:
        raise DatasetCorruptError("records.jsonl", "record count differs from manifest")
    nodes, prev_nodes, agent, prev_agent, actions, gidx = [], [], [], [], [], []
    for m in metas:
        n, t, off = m["n"], m["horizon"], m["offset"]
        sizes = [5 * n, 5 * n, 4, 4, 2 * t]
        parts = np.split(rblob[off : off + sum(sizes)].astype(float), np.cumsum(sizes)[:-1])
        nodes.append(parts[0].reshape(n, 5))
        prev_nodes.append(parts[1].reshape(n, 5))
        agent.append(parts[2])
        prev_agent.append(parts[3])
        actions.append(parts[4].reshape(t, 2))
        gidx.append(gpos[m["graph_id"]])
    return Dataset(
        manifest, graph_ids, gnodes, encs, metas,
        np.stack(nodes), np.stack(prev_nodes), np.stack(agent), np.stack(prev_agent), np.stack(actions),
        np.asarray(gidx, dtype=np.intp),
    )


def load_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[ObsBatch, np.ndarray, np.ndarray]]:
    """One epoch of shuffled minibatches ``(observations, actions, record indices)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = rng.permutation(len(dataset))
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        obs, act = dataset.batch(idx)
        yield obs, act, idx


def batch_sampler(dataset: Dataset, batch_size: int):
    """Endless epoch-ordered minibatch source for :func:`maipp.diffusion.train_bc`."""
    state: dict = {"it": None}

    def next_batch(rng: np.random.Generator) -> tuple[ObsBatch, np.ndarray]:
        while True:
            if state["it"] is None:
                state["it"] = load_batches(dataset, batch_size, rng)
            try:
                obs, act, _ = next(state["it"])
                return obs, act
            except StopIteration:
                state["it"] = None

    return next_batch
