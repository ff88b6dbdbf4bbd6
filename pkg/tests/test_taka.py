import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import brute_force_select
from lifelong_nav.errors import ConfigurationError, InputError, RoutingError
from lifelong_nav.learning import Hyperparams, new_checkpoint, train_task
from lifelong_nav.navsim import BenchmarkConfig, EpisodeSpec, Pose, build_benchmark
from lifelong_nav.taka import (
    IndexEntry,
    RetrievalIndex,
    RouterConfig,
    TaskSimilarity,
    dedup,
    index_summary,
    infer_episode,
    register_task,
    route,
    select_experts,
    similarities,
)


def greedy_oracle(vectors, threshold=0.9):
    kept = []
    for v in vectors:
        ok = True
        for k in kept:
            c = float(v @ k / (np.linalg.norm(v) * np.linalg.norm(k)))
            if c > threshold:
                ok = False
                break
        if ok:
            kept.append(v)
    return kept


def test_router_config_validation():
    with pytest.raises(ConfigurationError):
        RouterConfig(K=0)
    with pytest.raises(ConfigurationError):
        RouterConfig(mu_threshold=1.2)
    with pytest.raises(ConfigurationError):
        RouterConfig(reduction="median")


def test_dedup_examples():
    v = np.array([1.0, 2.0, 3.0])
    assert dedup(np.stack([v, v, 2 * v])).shape == (1, 3)
    assert dedup(np.eye(4)).shape == (4, 4)
    with pytest.raises(InputError):
        dedup(np.ones(3))


@given(st.integers(0, 2**32 - 1))
def test_dedup_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((5, 6))
    vecs = base[rng.integers(0, 5, 50)] + 0.3 * rng.standard_normal((50, 6))
    kept = dedup(vecs)
    oracle = greedy_oracle(list(vecs))
    assert len(kept) == len(oracle)
    for a, b in zip(kept, oracle):
        assert np.array_equal(a, b)
    unit = kept / np.linalg.norm(kept, axis=1, keepdims=True)
    gram = unit @ unit.T
    assert np.all(gram[~np.eye(len(kept), dtype=bool)] <= 0.9 + 1e-12)


def random_index(rng, n_tasks=5, d=8):
    entries = []
    for t in range(n_tasks):
        entries.append(IndexEntry(t, t, "VLN", rng.standard_normal((int(rng.integers(1, 6)), d)),
                                  rng.standard_normal((int(rng.integers(1, 4)), d))))
    return RetrievalIndex(entries)


def test_similarities_match_exhaustive_oracle(rng):
    index = random_index(rng)
    q_o, q_i = rng.standard_normal(8), rng.standard_normal(8)
    sims = similarities(index, q_o, q_i)
    for e, s in zip(index.entries, sims):
        want_o = max(float(q_o @ x / np.linalg.norm(q_o) / np.linalg.norm(x)) for x in e.scene_embeddings)
        want_i = max(float(q_i @ x / np.linalg.norm(q_i) / np.linalg.norm(x)) for x in e.instruction_embeddings)
        assert abs(s.sm_obs - want_o) < 1e-12 and abs(s.sm_instr - want_i) < 1e-12
    exact = similarities(index, index.entries[2].scene_embeddings[0], q_i)
    assert exact[2].sm_obs == pytest.approx(1.0)
    with pytest.raises(RoutingError):
        similarities(RetrievalIndex(), q_o, q_i)


def test_orthogonal_query_scores_nonpositive():
    index = RetrievalIndex([IndexEntry(0, 0, "VLN", np.eye(4)[:2], np.eye(4)[:1])])
    s = similarities(index, np.array([0, 0, 1.0, 0]), np.array([0, 0, 0, 1.0]))[0]
    assert s.sm_obs <= 0 and s.sm_instr <= 0


def test_mean_reduction(rng):
    index = random_index(rng)
    q = rng.standard_normal(8)
    s_max = similarities(index, q, q, "max")
    s_mean = similarities(index, q, q, "mean")
    assert all(b.sm_obs <= a.sm_obs + 1e-12 for a, b in zip(s_max, s_mean))


def test_select_examples():
    cfg = RouterConfig(K=2, mu_threshold=0.5)
    assert select_experts([TaskSimilarity(4, 0.3, 0.7)], cfg) == [4]
    sims = [TaskSimilarity(0, 0.9, 1.0), TaskSimilarity(1, 0.8, 1.0), TaskSimilarity(2, 0.95, 0.0)]
    assert select_experts(sims, cfg) == [0, 1]
    fallback = [TaskSimilarity(0, 0.2, 0.1), TaskSimilarity(1, 0.7, 0.4), TaskSimilarity(2, 0.5, 0.3)]
    assert select_experts(fallback, cfg) == [1, 2]
    ties = [TaskSimilarity(i, 0.5, 0.9) for i in range(4)]
    assert select_experts(ties, cfg) == [0, 1]
    with pytest.raises(RoutingError):
        select_experts([], cfg)


levels = st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])


@given(st.lists(st.tuples(levels, levels), min_size=1, max_size=6), st.integers(1, 4),
       st.sampled_from([0.0, 0.5, 0.8]))
def test_select_matches_brute_force(pairs, K, mu):
    sims = [TaskSimilarity(i, o, s) for i, (o, s) in enumerate(pairs)]
    got = select_experts(sims, RouterConfig(K=K, mu_threshold=mu))
    assert got == brute_force_select(sims, K, mu)
    assert len(got) == min(K, len(sims)) and len(set(got)) == len(got)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_selection_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    index = random_index(rng)
    q_o, q_i = rng.standard_normal(8), rng.standard_normal(8)
    cfg = RouterConfig(K=2, mu_threshold=0.0)
    assert route(index, q_o, q_i, cfg) == route(index, c * q_o, c * q_i, cfg)
    # mu = 0 is plain top-K on observation similarity
    sims = similarities(index, q_o, q_i)
    plain = sorted(range(len(sims)), key=lambda i: (-sims[i].sm_obs, i))[:2]
    if all(s.sm_instr >= 0 for s in sims):
        assert route(index, q_o, q_i, cfg) == plain


@pytest.fixture(scope="module")
def one_task_model():
    bench = build_benchmark(BenchmarkConfig(n_continual=2, n_unseen=1, train_episodes=12, test_episodes=4), seed=1)
    state = new_checkpoint("uniwalker", Hyperparams(steps_per_task=40, batch_size=16, fisher_samples=16), 0)
    train_task(state, bench.continual[0])
    return bench, state


def test_register_and_summary(one_task_model):
    bench, state = one_task_model
    entry = state.index.entries[0]
    assert entry.expert == 0 and entry.style == "VLN"
    summary = index_summary(state.index)
    assert summary["tasks"][0]["scene_set"] == entry.scene_embeddings.shape[0]
    assert summary["scene_max_sim"][0][0] == pytest.approx(1.0)
    with pytest.raises(RoutingError):
        register_task(RetrievalIndex(), bench.continual[0], 3, n_experts=1)


def test_infer_episode_deterministic_and_capped(one_task_model):
    bench, state = one_task_model
    task = bench.continual[0]
    cfg = state.hp.router()
    for ep in task.test:
        a = infer_episode(state, task.scene, ep, task.style, cfg)
        b = infer_episode(state, task.scene, ep, task.style, cfg)
        assert a.actions == b.actions and a.poses == b.poses
        assert all(r == (0,) for r in a.routed)  # only one expert exists
        assert len(a.actions) <= 4 * ep.optimal_length + 10
    bad = EpisodeSpec("x", Pose(0, 0, 0), (0, 0), 0, {}, 0)
    with pytest.raises(InputError):
        infer_episode(state, task.scene, bad, task.style, cfg)


def test_frozen_routing_mode(one_task_model):
    bench, state = one_task_model
    task = bench.continual[0]
    cfg = RouterConfig(per_step=False)
    traj = infer_episode(state, task.scene, task.test[0], task.style, cfg)
    assert len(set(traj.routed)) == 1


def test_empty_index_rolls_out_the_frozen_backbone():
    bench = build_benchmark(BenchmarkConfig(n_continual=1, n_unseen=1, train_episodes=4, test_episodes=2), seed=1)
    state = new_checkpoint("uniwalker", Hyperparams(), 0)
    task = bench.tasks[0]
    traj = infer_episode(state, task.scene, task.test[0], task.style, state.hp.router())
    assert all(active == () for active in traj.routed)
    with pytest.raises(RoutingError):
        route(state.index, np.ones(16), np.ones(16), state.hp.router())
