import numpy as np
import pytest

from maipp.dataset import (
    DatasetCorruptError,
    FILES,
    batch_sampler,
    collect_demos,
    load_batches,
    load_dataset,
    training_seeds,
)
from maipp.diffusion import deltas_to_waypoints
from maipp.episode import EpisodeConfig, RigTreeSGAPlanner, build_env, run_episode
from maipp.planners import PlannerParams

EP = EpisodeConfig(n_agents=3, budget=3.0)
PARAMS = PlannerParams(samples_per_plan=30)


@pytest.fixture(scope="module")
def demo_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("demos")
    manifest = collect_demos("rigtree_sga", 1, 0, out, EP, PARAMS)
    return out, manifest


def test_record_count_matches_episode(demo_dir):
    out, manifest = demo_dir
    res = run_episode(build_env(0, EP), RigTreeSGAPlanner(PARAMS), EP)
    per_agent = [sum(r.agent_id == i for r in res.decisions) for i in range(3)]
    assert manifest["counts"]["records"] == sum(per_agent) == res.n_decisions
    assert manifest["counts"]["graphs"] == 3
    assert len(load_dataset(out)) == res.n_decisions


def test_same_seed_byte_identical(demo_dir, tmp_path):
    out, _ = demo_dir
    collect_demos("rigtree_sga", 1, 0, tmp_path, EP, PARAMS)
    for f in FILES + ("manifest.json",):
        assert (out / f).read_bytes() == (tmp_path / f).read_bytes(), f


def test_actions_round_trip_to_planner_waypoints(demo_dir):
    out, _ = demo_dir
    ds = load_dataset(out)
    res = run_episode(build_env(0, EP), RigTreeSGAPlanner(PARAMS), EP)
    assert np.all(np.abs(ds.actions) <= 1.0)
    for j, rec in enumerate(res.decisions):
        meta = ds.record_meta[j]
        assert (meta["agent_id"], meta["decision_index"]) == (rec.agent_id, rec.decision_index)
        wps = deltas_to_waypoints(ds.actions[j], ds.agent[j, :2])
        assert np.abs(wps - rec.plan.waypoints).max() < 1e-9


def test_round_trip_bit_exact(demo_dir):
    out, _ = demo_dir
    ds = load_dataset(out)
    res = run_episode(build_env(0, EP), RigTreeSGAPlanner(PARAMS), EP, keep_observations=True)
    env = build_env(0, EP)
    for j, rec in enumerate(res.decisions):
        o = rec.observation
        assert np.array_equal(ds.nodes[j], o.nodes) and np.array_equal(ds.prev_nodes[j], o.prev_nodes)
        assert np.array_equal(ds.agent[j], o.agent) and np.array_equal(ds.prev_agent[j], o.prev_agent)
        g = ds.graph_index[j]
        assert ds.graph_ids[g] == o.graph_id
        assert np.array_equal(ds.encodings[g], env.encodings[rec.agent_id].vectors)
        assert np.array_equal(ds.graph_nodes[g], env.graphs[rec.agent_id].nodes)


def test_batches_cover_epoch(demo_dir):
    ds = load_dataset(demo_dir[0])
    idx = np.concatenate([i for _, _, i in load_batches(ds, 7, np.random.default_rng(0))])
    assert sorted(idx) == list(range(len(ds)))
    full = list(load_batches(ds, len(ds), np.random.default_rng(0)))
    assert len(full) == 1 and len(full[0][1]) == len(ds)
    a = [i.tolist() for _, _, i in load_batches(ds, 5, np.random.default_rng(3))]
    b = [i.tolist() for _, _, i in load_batches(ds, 5, np.random.default_rng(3))]
    assert a == b
    obs, acts, i = next(load_batches(ds, 4, np.random.default_rng(1)))
    assert obs.nodes.shape == (4, 200, 5) and obs.encoding.shape == (4, 200, 32) and acts.shape == (4, 8, 2)


def test_batch_sampler_cycles(demo_dir):
    ds = load_dataset(demo_dir[0])
    nxt = batch_sampler(ds, 16)
    rng = np.random.default_rng(0)
    sizes = [len(nxt(rng)[1]) for _ in range(2 * (len(ds) // 16 + 1) + 1)]
    assert max(sizes) == 16 and all(s > 0 for s in sizes)


def _corrupt(src, dst, name, pos):
    import shutil

    shutil.copytree(src, dst)
    data = bytearray((dst / name).read_bytes())
    data[pos] ^= 0xFF
    (dst / name).write_bytes(bytes(data))


@pytest.mark.parametrize("name", FILES)
def test_data_file_corruption_detected(demo_dir, tmp_path, name):
    out, _ = demo_dir
    size = (out / name).stat().st_size
    for t, pos in enumerate(sorted({0, size - 1, size // 2, *np.random.default_rng(1).integers(0, size, 3).tolist()})):
        dst = tmp_path / f"c{t}"
        _corrupt(out, dst, name, pos)
        with pytest.raises(DatasetCorruptError) as e:
            load_dataset(dst)
        assert e.value.file == name


def test_every_manifest_byte_checked(demo_dir, tmp_path):
    import shutil

    out, _ = demo_dir
    dst = tmp_path / "m"
    shutil.copytree(out, dst)
    raw = (out / "manifest.json").read_bytes()
    for pos in range(len(raw)):
        data = bytearray(raw)
        data[pos] ^= 0xFF
        (dst / "manifest.json").write_bytes(bytes(data))
        with pytest.raises(DatasetCorruptError):
            load_dataset(dst)


def test_missing_file(demo_dir, tmp_path):
    import shutil

    shutil.copytree(demo_dir[0], tmp_path / "d")
    (tmp_path / "d" / "records.bin").unlink()
    with pytest.raises(DatasetCorruptError, match="records.bin"):
        load_dataset(tmp_path / "d")


def test_seed_ranges():
    assert training_seeds(3, 10) == [10, 11, 12]
    with pytest.raises(ValueError):
        training_seeds(10, 499_995)


def test_unknown_planner(tmp_path):
    with pytest.raises(ValueError):
        collect_demos("aid_pt", 1, 0, tmp_path)


def test_random_walk_demos(tmp_path):
    ep = EpisodeConfig(n_agents=2, budget=0.8, prm_nodes=30, prm_k=5, grid_res=10)
    m = collect_demos("random_walk", 2, 5, tmp_path, ep)
    ds = load_dataset(tmp_path)
    assert len(ds) == m["counts"]["records"] > 0
    assert np.all(np.abs(ds.actions) <= 1.0)
