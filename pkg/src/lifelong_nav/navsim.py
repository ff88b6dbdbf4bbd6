"""Deterministic gridworld navigation benchmark.

Scenes are small walled grids with a few colored objects. Each task pairs one
scene with one instruction style:

* VLN: route tokens read off the expert path, plus the landmark at the end.
* OLN: a (category, color) description of the goal object.
* DUN: a short dialogue whose last turn names the goal object.

Observations and instructions are mapped to fixed-size unit vectors by seeded
hashing encoders; the policy input is the two vectors concatenated.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .backbone import FORWARD, STOP, TURN_LEFT, TURN_RIGHT
from .errors import GenerationError, InputError

BENCHMARK_FORMAT = "lifelong-nav-benchmark"
BENCHMARK_VERSION = 1

CATEGORIES = ("chair", "table", "bed", "sofa", "plant", "tv", "lamp", "sink", "desk", "shelf")
COLORS = ("red", "green", "blue", "yellow", "white", "black")

# heading 0 = north (y - 1), then clockwise
HEADING_STEPS = ((0, -1), (1, 0), (0, 1), (-1, 0))
WINDOW_RADIUS = 2


class InstructionStyle(str, Enum):
    VLN = "VLN"
    OLN = "OLN"
    DUN = "DUN"


STYLE_ORDER = (InstructionStyle.VLN, InstructionStyle.OLN, InstructionStyle.DUN)


class Pose(NamedTuple):
    x: int
    y: int
    heading: int

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class SceneObject:
    cell: tuple[int, int]
    category: str
    color: str


@dataclass(frozen=True)
class Scene:
    scene_id: str
    width: int
    height: int
    walls: frozenset
    objects: tuple[SceneObject, ...]
    palette_seed: int

    def is_free(self, cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height and (x, y) not in self.walls

    def free_cells(self) -> list[tuple[int, int]]:
        return [
            (x, y) for y in range(self.height) for x in range(self.width)
            if (x, y) not in self.walls
        ]

    def object_at(self, cell) -> SceneObject | None:
        for obj in self.objects:
            if obj.cell == tuple(cell):
                return obj
        return None

    def ascii_grid(self) -> list[str]:
        rows = []
        for y in range(self.height):
            rows.append("".join("#" if (x, y) in self.walls else "." for x in range(self.width)))
        return rows


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    start: Pose
    goal: tuple[int, int]
    goal_object: int
    instruction: dict
    optimal_length: int


@dataclass
class Task:
    task_id: int
    scene: Scene
    style: InstructionStyle
    train: list[EpisodeSpec]
    test: list[EpisodeSpec]
    kind: str = "continual"


@dataclass
class Trajectory:
    poses: list[Pose]
    actions: list[int]
    goal: tuple[int, int]
    optimal_length: int
    routed: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def path_length(self) -> int:
        return sum(1 for a, b in zip(self.poses, self.poses[1:]) if a.cell != b.cell)

    @property
    def success(self) -> bool:
        return self.poses[-1].cell == tuple(self.goal)

    @property
    def oracle_success(self) -> bool:
        goal = tuple(self.goal)
        return any(p.cell == goal for p in self.poses)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_continual: int = 6
    n_unseen: int = 3
    width: int = 7
    height: int = 7
    n_walls: int = 3
    n_objects: int = 3
    train_episodes: int = 64
    test_episodes: int = 16
    obs_dim: int = 16
    instr_dim: int = 16
    unseen_wall_moves: int = 1  # unseen scenes perturb a learned same-style scene

    @property
    def n_tasks(self) -> int:
        return self.n_continual + self.n_unseen


# ---------------------------------------------------------------- dynamics


def step(scene: Scene, pose: Pose, action: int) -> Pose:
    if action == FORWARD:
        dx, dy = HEADING_STEPS[pose.heading]
        nxt = (pose.x + dx, pose.y + dy)
        if scene.is_free(nxt):
            return Pose(nxt[0], nxt[1], pose.heading)
        return pose
    if action == TURN_LEFT:
        return Pose(pose.x, pose.y, (pose.heading + 3) % 4)
    if action == TURN_RIGHT:
        return Pose(pose.x, pose.y, (pose.heading + 1) % 4)
    if action == STOP:
        return pose
    raise InputError(f"unknown action {action}")


def bfs_distances(scene: Scene, goal) -> dict:
    """Shortest 4-connected grid distance from every reachable free cell to ``goal``."""
    goal = tuple(goal)
    if not scene.is_free(goal):
        raise GenerationError(f"goal {goal} is not a free cell")
    dist = {goal: 0}
    queue = deque([goal])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in HEADING_STEPS:
            nxt = (cx + dx, cy + dy)
            if nxt not in dist and scene.is_free(nxt):
                dist[nxt] = dist[(cx, cy)] + 1
                queue.append(nxt)
    return dist


def expert_action(dist: dict, pose: Pose) -> int:
    """Shortest-path action; keeps going straight when that is optimal."""
    d = dist.get(pose.cell)
    if d is None:
        raise GenerationError(f"pose {pose} cannot reach the goal")
    if d == 0:
        return STOP
    h = pose.heading
    # straight, then left, right, behind
    for rel, action in ((0, FORWARD), (3, TURN_LEFT), (1, TURN_RIGHT), (2, TURN_RIGHT)):
        dx, dy = HEADING_STEPS[(h + rel) % 4]
        if dist.get((pose.x + dx, pose.y + dy)) == d - 1:
            return action
    raise GenerationError(f"no descending neighbour at {pose}")  # pragma: no cover


def expert_actions(scene: Scene, start: Pose, goal) -> list[int]:
    dist = bfs_distances(scene, goal)
    if start.cell not in dist:
        raise GenerationError(f"goal {tuple(goal)} unreachable from {start}")
    actions = []
    pose = start
    while True:
        a = expert_action(dist, pose)
        actions.append(a)
        if a == STOP:
            return actions
        pose = step(scene, pose, a)


def expert_demo(scene: Scene, spec: EpisodeSpec, style: InstructionStyle, dims=(16, 16)):
    """(policy input, action label) pairs along the expert path."""
    instr = encode_instruction(spec.instruction, style, dims[1])
    out = []
    pose = spec.start
    for a in expert_actions(scene, spec.start, spec.goal):
        obs = encode_observation(scene, pose, dims[0])
        out.append((np.concatenate([obs, instr]), a))
        pose = step(scene, pose, a)
    return out


# ---------------------------------------------------------------- encoders


@lru_cache(maxsize=None)
def _hash_vector(token: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def _bag(tokens, dim: int) -> np.ndarray:
    acc = np.zeros(dim)
    for tok in tokens:
        acc = acc + _hash_vector(tok, dim)
    return _unit(acc)


@lru_cache(maxsize=4096)
def _scene_palette(palette_seed: int, dim: int) -> np.ndarray:
    rng = np.random.default_rng(palette_seed)
    v = _unit(rng.standard_normal(dim))
    v.setflags(write=False)
    return v


def egocentric_window(scene: Scene, pose: Pose) -> list[str]:
    """Cell contents of the 5x5 window in front of/around the agent, row-major."""
    fx, fy = HEADING_STEPS[pose.heading]
    rx, ry = HEADING_STEPS[(pose.heading + 1) % 4]
    cells = []
    for ahead in range(WINDOW_RADIUS, -WINDOW_RADIUS - 1, -1):
        for right in range(-WINDOW_RADIUS, WINDOW_RADIUS + 1):
            cell = (pose.x + ahead * fx + right * rx, pose.y + ahead * fy + right * ry)
            if not scene.is_free(cell):
                cells.append("wall")
                continue
            obj = scene.object_at(cell)
            cells.append(f"obj:{obj.category}" if obj else "free")
    return cells


OBS_WINDOW_WEIGHT = 1.0
OBS_HISTOGRAM_WEIGHT = 0.5
OBS_PALETTE_WEIGHT = 0.1


def encode_observation(scene: Scene, pose: Pose, dim: int = 16) -> np.ndarray:
    """Unit feature vector: hashed egocentric window + visible-object histogram + scene palette."""
    window = egocentric_window(scene, pose)
    win = _bag((f"{i}:{c}" for i, c in enumerate(window)), dim)
    visible = [c[4:] for c in window if c.startswith("obj:")]
    hist = _bag((f"hist:{c}" for c in visible), dim) if visible else np.zeros(dim)
    v = (
        OBS_WINDOW_WEIGHT * win
        + OBS_HISTOGRAM_WEIGHT * hist
        + OBS_PALETTE_WEIGHT * _scene_palette(scene.palette_seed, dim)
    )
    return _unit(v)


INSTR_ANCHOR_WEIGHT = 1.0
INSTR_CONTENT_WEIGHT = 0.5


def _check_record(record: dict, style: InstructionStyle):
    required = {
        InstructionStyle.VLN: ("tokens", "landmark"),
        InstructionStyle.OLN: ("descriptor",),
        InstructionStyle.DUN: ("turns",),
    }[style]
    if not isinstance(record, dict) or any(k not in record for k in required):
        raise InputError(f"instruction record {record!r} does not match style {style.value}")
    if record.get("style") not in (None, style.value):
        raise InputError(f"record style {record.get('style')} != {style.value}")


def _descriptor_tokens(desc) -> list[str]:
    category, color = desc
    return [f"cat:{category}", f"color:{color}"]


def encode_instruction(record: dict, style, dim: int = 16) -> np.ndarray:
    """Unit vector = style anchor (one of three orthogonal axes) + hashed content.

    Content lives in the coordinates orthogonal to the anchors, so two
    instructions of different styles have cosine at most c^2 / (a^2 + c^2) and
    two of the same style at least (a^2 - c^2) / (a^2 + c^2).
    """
    style = InstructionStyle(style)
    _check_record(record, style)
    if dim < 4:
        raise InputError("instruction dim must be >= 4")
    sub = dim - 3
    if style is InstructionStyle.OLN:
        content = _bag(_descriptor_tokens(record["descriptor"]), sub)
    elif style is InstructionStyle.VLN:
        route = _bag((f"route:{i}:{t}" for i, t in enumerate(record["tokens"])), sub)
        content = _unit(_bag(_descriptor_tokens(record["landmark"]), sub) + 0.5 * route)
    else:
        turns = record["turns"]
        final = _bag((f"tok:{t}" for t in turns[-1][-2:]), sub)
        history = _bag((f"tok:{t}" for turn in turns[:-1] for t in turn), sub)
        content = _unit(final + 0.4 * history)
    v = np.zeros(dim)
    v[STYLE_ORDER.index(style)] = INSTR_ANCHOR_WEIGHT
    v[3:] = INSTR_CONTENT_WEIGHT * content
    return _unit(v)


def style_anchor(style, dim: int = 16) -> np.ndarray:
    v = np.zeros(dim)
    v[STYLE_ORDER.index(InstructionStyle(style))] = 1.0
    return v


def policy_input(scene: Scene, pose: Pose, instr_emb: np.ndarray, obs_dim: int = 16):
    return np.concatenate([encode_observation(scene, pose, obs_dim), instr_emb])


# ---------------------------------------------------------------- instructions


def route_tokens(actions: list[int]) -> list[str]:
    """Compress an action list into turn tokens and forward-run tokens."""
    tokens = []
    run = 0
    for a in actions:
        if a == FORWARD:
            run += 1
            continue
        if run:
            tokens.append(f"forward-{run}")
            run = 0
        if a == TURN_LEFT:
            tokens.append("left")
        elif a == TURN_RIGHT:
            tokens.append("right")
    if run:
        tokens.append(f"forward-{run}")
    return tokens


def render_instruction(scene: Scene, spec: EpisodeSpec, style, seed: int) -> dict:
    style = InstructionStyle(style)
    goal = scene.objects[spec.goal_object]
    desc = [goal.category, goal.color]
    if style is InstructionStyle.OLN:
        return {"style": style.value, "descriptor": desc}
    if style is InstructionStyle.VLN:
        actions = expert_actions(scene, spec.start, spec.goal)
        return {"style": style.value, "tokens": route_tokens(actions), "landmark": desc}
    rng = np.random.default_rng(seed)
    others = [o for i, o in enumerate(scene.objects) if i != spec.goal_object]
    n_turns = int(rng.integers(2, 4))
    turns = [["i", "am", "looking", "for", "the", goal.category]]
    if n_turns == 3 and others:
        d = others[int(rng.integers(len(others)))]
        turns.append(["not", "the", d.color, d.category])
    turns.append(["it", "is", "the", goal.color, goal.category])
    return {"style": style.value, "turns": turns}


# ---------------------------------------------------------------- generation


def _connected(free: set) -> bool:
    if not free:
        return False
    start = next(iter(sorted(free)))
    seen = {start}
    queue = deque([start])
    while queue:
        cx, cy = queue.popleft()
        for dx, dy in HEADING_STEPS:
            nxt = (cx + dx, cy + dy)
            if nxt in free and nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(free)


def make_scene(rng: np.random.Generator, scene_id: str, cfg: BenchmarkConfig) -> Scene:
    w, h = cfg.width, cfg.height
    if w < 3 or h < 3 or w * h - cfg.n_walls < cfg.n_objects + 2:
        raise GenerationError(f"scene {w}x{h} too small for {cfg.n_walls} walls / {cfg.n_objects} objects")
    if cfg.n_objects > len(CATEGORIES):
        raise GenerationError("more objects than categories")
    cells = [(x, y) for y in range(h) for x in range(w)]
    for _ in range(200):
        picks = rng.choice(len(cells), size=cfg.n_walls, replace=False) if cfg.n_walls else []
        walls = frozenset(cells[i] for i in picks)
        free = [c for c in cells if c not in walls]
        if not _connected(set(free)):
            continue
        obj_cells = rng.choice(len(free), size=cfg.n_objects, replace=False)
        cats = rng.choice(len(CATEGORIES), size=cfg.n_objects, replace=False)
        objects = tuple(
            SceneObject(free[int(ci)], CATEGORIES[int(k)], COLORS[int(rng.integers(len(COLORS)))])
            for ci, k in zip(obj_cells, cats)
        )
        palette_seed = int(rng.integers(2**31 - 1))
        return Scene(scene_id, w, h, walls, objects, palette_seed)
    raise GenerationError(f"could not generate a connected {w}x{h} scene")


def make_variant_scene(rng: np.random.Generator, base: Scene, scene_id: str, moves: int) -> Scene:
    """A new scene sharing ``base``'s objects, with ``moves`` wall cells relocated and a fresh palette."""
    objects = {o.cell for o in base.objects}
    for _ in range(200):
        walls = set(base.walls)
        ok = True
        for _ in range(min(moves, len(walls))):
            old = sorted(walls)[int(rng.integers(len(walls)))]
            free = [c for c in base.free_cells() if c not in objects and c not in walls]
            if not free:
                ok = False
                break
            walls.discard(old)
            walls.add(free[int(rng.integers(len(free)))])
        cells = {(x, y) for y in range(base.height) for x in range(base.width)} - walls
        if ok and _connected(cells):
            return Scene(scene_id, base.width, base.height, frozenset(walls), base.objects,
                         int(rng.integers(2**31 - 1)))
    raise GenerationError(f"could not perturb scene {base.scene_id}")


def _sample_episodes(rng, scene, style, n_train, n_test, task_id):
    free = scene.free_cells()
    pairs = []
    for gi, obj in enumerate(scene.objects):
        for cell in free:
            if cell == obj.cell:
                continue
            for heading in range(4):
                pairs.append((Pose(cell[0], cell[1], heading), gi))
    if len(pairs) < n_train + n_test:
        raise GenerationError(
            f"scene {scene.scene_id} has {len(pairs)} episode candidates, need {n_train + n_test}"
        )
    order = rng.permutation(len(pairs))[: n_train + n_test]
    episodes = []
    for j, idx in enumerate(order):
        start, gi = pairs[int(idx)]
        goal = scene.objects[gi].cell
        dist = bfs_distances(scene, goal)
        base = EpisodeSpec(f"t{task_id}-e{j}", start, goal, gi, {}, dist[start.cell])
        record = render_instruction(scene, base, style, int(rng.integers(2**31 - 1)))
        episodes.append(EpisodeSpec(base.episode_id, start, goal, gi, record, base.optimal_length))
    return episodes[:n_train], episodes[n_train:]


def generate_benchmark(config: BenchmarkConfig | None = None, seed: int = 0) -> list[Task]:
    cfg = config or BenchmarkConfig()
    if cfg.n_continual + cfg.n_unseen < 2:
        raise GenerationError("a benchmark needs at least 2 tasks")
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(cfg.n_tasks):
        style = STYLE_ORDER[t % 3]
        kind = "continual" if t < cfg.n_continual else "unseen"
        parents = [p for p in tasks if p.kind == "continual" and p.style == style]
        if kind == "unseen" and parents:
            parent = parents[int(rng.integers(len(parents)))]
            scene = make_variant_scene(rng, parent.scene, f"s{seed}-{t:02d}", cfg.unseen_wall_moves)
        else:
            scene = make_scene(rng, f"s{seed}-{t:02d}", cfg)
        n_train = cfg.train_episodes if kind == "continual" else 0
        train, test = _sample_episodes(rng, scene, style, n_train, cfg.test_episodes, t)
        tasks.append(Task(t, scene, style, train, test, kind))
    return tasks


@dataclass
class Benchmark:
    config: BenchmarkConfig
    seed: int
    tasks: list[Task]

    @property
    def continual(self) -> list[Task]:
        return [t for t in self.tasks if t.kind == "continual"]

    @property
    def unseen(self) -> list[Task]:
        return [t for t in self.tasks if t.kind == "unseen"]


def build_benchmark(config: BenchmarkConfig | None = None, seed: int = 0) -> Benchmark:
    cfg = config or BenchmarkConfig()
    return Benchmark(cfg, seed, generate_benchmark(cfg, seed))


# ---------------------------------------------------------------- serialization


def _episode_to_dict(ep: EpisodeSpec) -> dict:
    return {
        "episode_id": ep.episode_id,
        "start": list(ep.start),
        "goal": list(ep.goal),
        "goal_object": ep.goal_object,
        "optimal_length": ep.optimal_length,
        "instruction": ep.instruction,
    }


def _episode_from_dict(d: dict) -> EpisodeSpec:
    return EpisodeSpec(
        d["episode_id"], Pose(*d["start"]), tuple(d["goal"]), int(d["goal_object"]),
        d["instruction"], int(d["optimal_length"]),
    )


def benchmark_to_dict(bench: Benchmark) -> dict:
    tasks = []
    for t in bench.tasks:
        s = t.scene
        tasks.append({
            "task_id": t.task_id,
            "kind": t.kind,
            "style": t.style.value,
            "scene": {
                "scene_id": s.scene_id,
                "width": s.width,
                "height": s.height,
                "grid": s.ascii_grid(),
                "objects": [
                    {"x": o.cell[0], "y": o.cell[1], "category": o.category, "color": o.color}
                    for o in s.objects
                ],
                "palette_seed": s.palette_seed,
            },
            "train": [_episode_to_dict(e) for e in t.train],
            "test": [_episode_to_dict(e) for e in t.test],
        })
    return {
        "format": BENCHMARK_FORMAT,
        "version": BENCHMARK_VERSION,
        "seed": bench.seed,
        "config": asdict(bench.config),
        "tasks": tasks,
    }


def dumps_benchmark(bench: Benchmark) -> str:
    return json.dumps(benchmark_to_dict(bench), indent=1, sort_keys=True) + "\n"


def benchmark_from_dict(d: dict, validate: bool = True) -> Benchmark:
    if d.get("format") != BENCHMARK_FORMAT:
        raise InputError(f"not a benchmark file (format={d.get('format')!r})")
    if d.get("version") != BENCHMARK_VERSION:
        raise InputError(f"unsupported benchmark version {d.get('version')}")
    cfg = BenchmarkConfig(**d["config"])
    tasks = []
    for td in d["tasks"]:
        sd = td["scene"]
        walls = frozenset(
            (x, y) for y, row in enumerate(sd["grid"]) for x, ch in enumerate(row) if ch == "#"
        )
        objects = tuple(
            SceneObject((o["x"], o["y"]), o["category"], o["color"]) for o in sd["objects"]
        )
        scene = Scene(sd["scene_id"], sd["width"], sd["height"], walls, objects, sd["palette_seed"])
        tasks.append(Task(
            td["task_id"], scene, InstructionStyle(td["style"]),
            [_episode_from_dict(e) for e in td["train"]],
            [_episode_from_dict(e) for e in td["test"]],
            td["kind"],
        ))
    bench = Benchmark(cfg, d["seed"], tasks)
    if validate:
        validate_benchmark(bench)
    return bench


def loads_benchmark(text: str, validate: bool = True) -> Benchmark:
    return benchmark_from_dict(json.loads(text), validate)


def validate_benchmark(bench: Benchmark) -> None:
    """Raise InputError if any generator invariant is broken."""
    ids = [t.scene.scene_id for t in bench.tasks]
    if len(set(ids)) != len(ids):
        raise InputError("benchmark reuses a scene id")
    for t in bench.tasks:
        s = t.scene
        if not _connected(set(s.free_cells())):
            raise InputError(f"scene {s.scene_id} free space is not connected")
        for o in s.objects:
            if not s.is_free(o.cell):
                raise InputError(f"object {o} in scene {s.scene_id} is not on a free cell")
        if not t.test:
            raise InputError(f"task {t.task_id} has no test episodes")
        for ep in t.train + t.test:
            if not s.is_free(ep.start.cell):
                raise InputError(f"episode {ep.episode_id} starts in a wall")
            dist = bfs_distances(s, ep.goal)
            if dist.get(ep.start.cell) != ep.optimal_length or ep.optimal_length <= 0:
                raise InputError(f"episode {ep.episode_id} optimal length mismatch")
            _check_record(ep.instruction, t.style)
        train_keys = {(e.start, e.goal) for e in t.train}
        if any((e.start, e.goal) in train_keys for e in t.test):
            raise InputError(f"task {t.task_id} shares an episode between train and test")
