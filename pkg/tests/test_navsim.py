import itertools
from collections import deque

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lifelong_nav.backbone import FORWARD, STOP, TURN_LEFT, TURN_RIGHT
from lifelong_nav.errors import GenerationError, InputError
from lifelong_nav.navsim import (
    BenchmarkConfig,
    InstructionStyle,
    Pose,
    Scene,
    SceneObject,
    Trajectory,
    bfs_distances,
    build_benchmark,
    dumps_benchmark,
    encode_instruction,
    encode_observation,
    expert_actions,
    expert_demo,
    loads_benchmark,
    make_scene,
    render_instruction,
    step,
    style_anchor,
    validate_benchmark,
)

VLN, OLN, DUN = InstructionStyle.VLN, InstructionStyle.OLN, InstructionStyle.DUN


@pytest.fixture(scope="module")
def bench():
    return build_benchmark(seed=0)


def open_room(w=5, h=5, walls=()):
    return Scene("t", w, h, frozenset(walls), (SceneObject((4, 4), "chair", "red"),), 1)


def resimulate(scene, pose, actions):
    """Independent dynamics: headings as compass vectors, walls checked inline."""
    vec = {0: (0, -1), 1: (1, 0), 2: (0, 1), 3: (-1, 0)}
    x, y, h = pose
    for a in actions:
        if a == STOP:
            break
        if a == FORWARD:
            nx, ny = x + vec[h][0], y + vec[h][1]
            if 0 <= nx < scene.width and 0 <= ny < scene.height and (nx, ny) not in scene.walls:
                x, y = nx, ny
        elif a == TURN_LEFT:
            h = (h - 1) % 4
        else:
            h = (h + 1) % 4
    return Pose(x, y, h)


def test_step_examples():
    scene = open_room(walls=[(2, 1)])
    p = Pose(2, 2, 0)
    q = p
    for _ in range(4):
        q = step(scene, q, TURN_LEFT)
    assert q == p
    assert step(scene, p, FORWARD) == p  # wall ahead
    assert step(scene, Pose(0, 0, 3), FORWARD) == Pose(0, 0, 3)  # boundary
    assert step(scene, p, STOP) == p
    assert step(scene, Pose(0, 0, 1), FORWARD) == Pose(1, 0, 1)
    with pytest.raises(InputError):
        step(scene, p, 9)


@given(st.lists(st.integers(0, 2), max_size=40), st.integers(0, 2**32 - 1))
def test_step_matches_resimulation(actions, seed):
    rng = np.random.default_rng(seed)
    scene = make_scene(rng, "h", BenchmarkConfig())
    cell = scene.free_cells()[int(rng.integers(len(scene.free_cells())))]
    pose = Pose(cell[0], cell[1], int(rng.integers(4)))
    p = pose
    for a in actions:
        p = step(scene, p, a)
    assert p == resimulate(scene, pose, actions)


def bfs_oracle(scene, goal):
    """Bellman-Ford style relaxation until nothing changes."""
    inf = 10**9
    dist = {c: inf for c in scene.free_cells()}
    dist[goal] = 0
    changed = True
    while changed:
        changed = False
        for (x, y), d in list(dist.items()):
            for nb in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if nb in dist and dist[nb] + 1 < d:
                    dist[(x, y)] = d = dist[nb] + 1
                    changed = True
    return {c: d for c, d in dist.items() if d < inf}


def test_bfs_matches_relaxation(bench):
    for task in bench.tasks:
        for obj in task.scene.objects:
            assert bfs_distances(task.scene, obj.cell) == bfs_oracle(task.scene, obj.cell)
    with pytest.raises(GenerationError):
        bfs_distances(open_room(walls=[(1, 1)]), (1, 1))


def test_expert_small_cases():
    scene = open_room()
    assert expert_actions(scene, Pose(4, 3, 2), (4, 4)) == [FORWARD, STOP]
    assert expert_actions(scene, Pose(4, 4, 0), (4, 4)) == [STOP]
    walled = Scene("w", 3, 3, frozenset({(1, 0), (1, 1), (1, 2)}), (), 0)
    with pytest.raises(GenerationError):
        expert_actions(walled, Pose(0, 0, 0), (2, 2))


def test_expert_replay_reaches_goal_optimally(bench):
    for task in bench.tasks:
        for ep in task.train + task.test:
            actions = expert_actions(task.scene, ep.start, ep.goal)
            poses = [ep.start]
            for a in actions[:-1]:
                poses.append(step(task.scene, poses[-1], a))
            traj = Trajectory(poses, actions, ep.goal, ep.optimal_length)
            assert traj.success and traj.path_length == ep.optimal_length
            assert actions[-1] == STOP and STOP not in actions[:-1]


def test_expert_demo_pairs(bench):
    task = bench.continual[0]
    ep = task.train[0]
    demo = expert_demo(task.scene, ep, task.style)
    assert [a for _, a in demo] == expert_actions(task.scene, ep.start, ep.goal)
    assert all(x.shape == (32,) for x, _ in demo)


def test_observation_encoder_properties(bench):
    scene = bench.tasks[0].scene
    pose = Pose(*scene.free_cells()[0], 1)
    v = encode_observation(scene, pose)
    assert np.array_equal(v, encode_observation(scene, pose))
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12
    assert encode_observation(scene, pose, 32).shape == (32,)


def test_scenes_separate_in_observation_space(bench):
    embs = []
    for task in bench.tasks:
        s = task.scene
        embs.append(np.stack([encode_observation(s, Pose(x, y, h), 16)
                              for (x, y) in s.free_cells() for h in range(4)]))
    intra, inter = [], []
    for i, j in itertools.combinations_with_replacement(range(len(embs)), 2):
        c = (embs[i] @ embs[j].T).mean()
        (intra if i == j else inter).append(c)
    assert np.mean(intra) > np.mean(inter)


def test_instruction_encoder_style_separation(bench):
    by_style = {s: [] for s in InstructionStyle}
    for task in bench.tasks:
        for ep in task.train + task.test:
            by_style[task.style].append(encode_instruction(ep.instruction, task.style))
    for s, vs in by_style.items():
        m = np.stack(vs)
        assert np.allclose(np.linalg.norm(m, axis=1), 1.0)
        assert (m @ m.T).min() >= 0.5
    for a, b in itertools.combinations(InstructionStyle, 2):
        assert (np.stack(by_style[a]) @ np.stack(by_style[b]).T).max() < 0.5
    for a, b in itertools.combinations(InstructionStyle, 2):
        assert style_anchor(a) @ style_anchor(b) <= 0


def test_instruction_record_checks():
    with pytest.raises(InputError):
        encode_instruction({"descriptor": ["chair", "red"]}, VLN)
    with pytest.raises(InputError):
        encode_instruction({"style": "VLN", "descriptor": ["chair", "red"]}, OLN)
    rec = {"style": "OLN", "descriptor": ["chair", "red"]}
    assert np.array_equal(encode_instruction(rec, OLN), encode_instruction(dict(rec), OLN))


def count_segments_and_turns(actions):
    segments = sum(1 for k, _ in itertools.groupby(actions) if k == FORWARD)
    return segments + sum(1 for a in actions if a in (TURN_LEFT, TURN_RIGHT))


def test_render_instruction_examples(bench):
    for task in bench.tasks:
        for ep in task.test:
            rec = ep.instruction
            goal = task.scene.objects[ep.goal_object]
            if task.style is OLN:
                assert rec["descriptor"] == [goal.category, goal.color]
            elif task.style is VLN:
                actions = expert_actions(task.scene, ep.start, ep.goal)
                assert len(rec["tokens"]) == count_segments_and_turns(actions)
            else:
                assert 2 <= len(rec["turns"]) <= 3
                assert rec["turns"][-1][-2:] == [goal.color, goal.category]
            assert render_instruction(task.scene, ep, task.style, 5) == render_instruction(task.scene, ep, task.style, 5)


def test_benchmark_layout(bench):
    assert len(bench.continual) == 6 and len(bench.unseen) == 3
    ids = [t.scene.scene_id for t in bench.tasks]
    assert len(set(ids)) == len(ids)
    assert [t.style for t in bench.tasks] == [VLN, OLN, DUN] * 3
    assert all(len(t.train) == 64 and len(t.test) == 16 for t in bench.continual)
    assert all(not t.train and len(t.test) == 16 for t in bench.unseen)
    for t in bench.tasks:
        train = {(e.start, e.goal) for e in t.train}
        assert not any((e.start, e.goal) in train for e in t.test)
        for ep in t.train + t.test:
            assert ep.optimal_length == bfs_oracle(t.scene, ep.goal)[ep.start.cell] > 0


def test_unseen_scenes_perturb_a_learned_scene(bench):
    for u in bench.unseen:
        parents = [c for c in bench.continual if c.scene.objects == u.scene.objects and c.style == u.style]
        assert parents
        p = parents[0].scene
        assert p.scene_id != u.scene.scene_id and p.palette_seed != u.scene.palette_seed
        assert len(u.scene.walls) == len(p.walls) and len(u.scene.walls ^ p.walls) <= 2


def test_serialization_round_trip_and_determinism(bench):
    text = dumps_benchmark(bench)
    assert text == dumps_benchmark(build_benchmark(seed=0))
    again = loads_benchmark(text)
    assert dumps_benchmark(again) == text
    assert text != dumps_benchmark(build_benchmark(seed=1))


def test_loader_rejects_bad_files(bench):
    import json

    d = json.loads(dumps_benchmark(bench))
    d["version"] = 99
    with pytest.raises(InputError):
        loads_benchmark(json.dumps(d))
    d = json.loads(dumps_benchmark(bench))
    d["tasks"][1]["scene"]["scene_id"] = d["tasks"][0]["scene"]["scene_id"]
    with pytest.raises(InputError):
        loads_benchmark(json.dumps(d))
    d = json.loads(dumps_benchmark(bench))
    d["tasks"][0]["test"][0]["optimal_length"] += 1
    with pytest.raises(InputError):
        loads_benchmark(json.dumps(d))


def test_impossible_config():
    with pytest.raises(GenerationError):
        build_benchmark(BenchmarkConfig(width=2, height=2))
    with pytest.raises(GenerationError):
        build_benchmark(BenchmarkConfig(n_continual=1, n_unseen=0))


def test_connectivity(bench):
    for task in bench.tasks:
        free = set(task.scene.free_cells())
        start = next(iter(free))
        seen, q = {start}, deque([start])
        while q:
            x, y = q.popleft()
            for nb in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if nb in free and nb not in seen:
                    seen.add(nb)
                    q.append(nb)
        assert seen == free
    validate_benchmark(bench)
