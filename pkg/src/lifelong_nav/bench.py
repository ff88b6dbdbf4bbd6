"""Lifelong evaluation protocol, navigation metrics and forgetting rates."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigurationError, InputError
from .learning import STRATEGIES, Checkpoint, Hyperparams, new_checkpoint, train_task
from .navsim import Benchmark, Task, Trajectory
from .taka import RouterConfig, infer_episode

METRICS = ("SR", "SPL", "OSR")


@dataclass
class TaskEval:
    SR: float
    SPL: float
    OSR: float
    routing_hit: float | None = None

    def as_tuple(self):
        return self.SR, self.SPL, self.OSR


def episode_metrics(traj: Trajectory) -> tuple[float, float, float]:
    s = 1.0 if traj.success else 0.0
    spl = s * traj.optimal_length / max(traj.path_length, traj.optimal_length)
    return s, spl, 1.0 if traj.oracle_success else 0.0


def aggregate(trajectories: Iterable[Trajectory]) -> tuple[float, float, float]:
    rows = [episode_metrics(t) for t in trajectories]
    if not rows:
        raise InputError("no trajectories to aggregate")
    arr = np.asarray(rows)
    return tuple(float(v) for v in arr.mean(axis=0))


def own_expert(state: Checkpoint, task: Task) -> int | None:
    for e in state.index.entries:
        if e.task_id == task.task_id:
            return e.expert
    return None


def eval_task(state: Checkpoint, task: Task, cfg: RouterConfig | None = None) -> TaskEval:
    """Roll out every test episode of ``task`` without revealing its id."""
    cfg = cfg or state.hp.router()
    trajs = [infer_episode(state, task.scene, ep, task.style, cfg) for ep in task.test]
    sr, spl, osr = aggregate(trajs)
    hit = None
    expert = own_expert(state, task) if state.routes else None
    if expert is not None:
        hit = float(np.mean([expert in t.routed[0] for t in trajs]))
    return TaskEval(sr, spl, osr, hit)


def forgetting_rate(after_learning: float, final: float) -> float | None:
    """Relative drop since the task was learned, clamped at 0; None if it never worked."""
    if after_learning == 0:
        return None
    return max(0.0, (after_learning - final) / after_learning)


def transfer(after_learning: float, final: float) -> float:
    """Signed change since the task was learned (positive = improved)."""
    return final - after_learning


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsReport:
    strategy: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    averages: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def continual_rows(self):
        return [r for r in self.rows if r["kind"] == "continual"]

    def unseen_rows(self):
        return [r for r in self.rows if r["kind"] == "unseen"]

    def recompute_averages(self) -> dict:
        cont = self.continual_rows()
        unseen = self.unseen_rows()
        avg = {}
        for m in METRICS:
            avg[m] = _mean_defined(r[m] for r in cont)
            avg[f"{m}-F"] = _mean_defined(r[f"{m}-F"] for r in cont)
            avg[f"unseen_{m}"] = _mean_defined(r[m] for r in unseen)
        avg["routing_hit"] = _mean_defined(r.get("routing_hit") for r in cont)
        return avg

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "rows": self.rows,
                "averages": self.averages, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["strategy"], d["seed"], d["rows"], d["averages"], d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def train_lifelong(benchmark: Benchmark, state: Checkpoint, hp: Hyperparams | None = None,
                   seed: int | None = None, on_task_end: Callable[[Checkpoint, Task], None] | None = None,
                   max_tasks: int | None = None) -> Checkpoint:
    """Train continual tasks from ``state.position`` on, recording after-learning metrics.

    ``max_tasks`` caps the total number of tasks learned (not the number in
    this call), so an interrupted run can be resumed with the same value.
    """
    seed = state.seed if seed is None else seed
    tasks = benchmark.continual
    for done, sid in enumerate(state.scene_ids):
        if done >= len(tasks) or tasks[done].scene.scene_id != sid:
            raise InputError(f"checkpoint scene {sid} does not match the benchmark task order")
    stop = len(tasks) if max_tasks is None else min(max_tasks, len(tasks))
    for task in tasks[state.position:stop]:
        train_task(state, task, hp, seed)
        state.history[-1]["M"] = list(eval_task(state, task).as_tuple())
        if on_task_end is not None:
            on_task_end(state, task)
    return state


def run_lifelong(benchmark: Benchmark, strategy: str = "uniwalker", hp: Hyperparams | None = None,
                 seed: int = 0, on_task_end: Callable[[Checkpoint, Task], None] | None = None,
                 state: Checkpoint | None = None, m_metrics: dict | None = None):
    """Train the continual tasks in order, then test everything task-agnostically.

    Returns ``(report, final_checkpoint)``. Passing a per-task checkpoint as
    ``state`` resumes after its last task; the after-learning metrics are
    taken from its history unless ``m_metrics`` is given.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    hp = hp or Hyperparams()
    dims = (benchmark.config.obs_dim, benchmark.config.instr_dim)
    state = state or new_checkpoint(strategy, hp, seed, dims=dims)
    train_lifelong(benchmark, state, hp, seed, on_task_end)
    return evaluate(benchmark, state, m_metrics), state


def evaluate(benchmark: Benchmark, state: Checkpoint, m_metrics: dict | None = None) -> MetricsReport:
    if m_metrics is None:
        m_metrics = {h["task_id"]: tuple(h["M"]) for h in state.history if "M" in h}
    report = MetricsReport(state.strategy, state.seed)
    for task in benchmark.tasks:
        ev = eval_task(state, task)
        row = {"task_id": task.task_id, "kind": task.kind, "style": task.style.value,
               "scene_id": task.scene.scene_id, "SR": ev.SR, "SPL": ev.SPL, "OSR": ev.OSR,
               "routing_hit": ev.routing_hit}
        if task.kind == "continual":
            m = m_metrics.get(task.task_id)
            for name, final, after in zip(METRICS, ev.as_tuple(), m or (None,) * 3):
                row[f"M-{name}"] = after
                row[f"{name}-F"] = None if after is None else forgetting_rate(after, final)
                row[f"{name}-transfer"] = None if after is None else transfer(after, final)
        report.rows.append(row)
    report.averages = report.recompute_averages()
    report.meta = {"hp": state.hp.to_dict(), "benchmark_seed": benchmark.seed,
                   "tasks_trained": state.position, "experts": state.bank.n_experts}
    return report


def _pct(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "  -"
    return f"{100 * v:3.0f}"


def format_table(report: MetricsReport) -> str:
    """Plain-text table: one column per task, one row per metric, averages last."""
    cont = report.continual_rows()
    unseen = report.unseen_rows()
    head = ["metric"] + [f"S{r['task_id'] + 1}" for r in cont + unseen] + ["Avg", "UnseenAvg"]
    lines = [f"# {report.strategy} (seed {report.seed})", " ".join(f"{h:>9}" for h in head)]
    for m in ("SR", "SR-F", "SPL", "SPL-F", "OSR", "OSR-F"):
        cells = [m]
        for r in cont:
            cells.append(_pct(r.get(m)))
        for r in unseen:
            cells.append(_pct(r.get(m)) if "-F" not in m else "  -")
        cells.append(_pct(report.averages.get(m)))
        cells.append(_pct(report.averages.get(f"unseen_{m}")) if "-F" not in m else "  -")
        lines.append(" ".join(f"{c:>9}" for c in cells))
    return "\n".join(lines) + "\n"


def compare_reports(reports: list[MetricsReport]) -> dict:
    """Align reports by task id; deltas are relative to the first report."""
    base = reports[0]
    keys = ("SR", "SPL", "OSR", "SR-F", "SPL-F", "OSR-F")
    out = {"base": f"{base.strategy}:{base.seed}", "tasks": [], "averages": []}
    base_rows = {r["task_id"]: r for r in base.rows}
    for rep in reports:
        for r in rep.rows:
            b = base_rows.get(r["task_id"])
            if b is None:
                continue
            deltas = {}
            for k in keys:
                if r.get(k) is not None and b.get(k) is not None:
                    deltas[k] = r[k] - b[k]
            out["tasks"].append({"report": f"{rep.strategy}:{rep.seed}", "task_id": r["task_id"],
                                 "delta": deltas})
        avg = {}
        for k in keys:
            a, b = rep.averages.get(k), base.averages.get(k)
            if a is not None and b is not None:
                avg[k] = a - b
        out["averages"].append({"report": f"{rep.strategy}:{rep.seed}", "delta": avg})
    return out


def format_comparison(reports: list[MetricsReport]) -> str:
    lines = []
    names = [f"{r.strategy}:{r.seed}" for r in reports]
    lines.append(" ".join(f"{h:>16}" for h in ["metric"] + names))
    for k in ("SR", "SR-F", "SPL", "SPL-F", "OSR", "OSR-F", "unseen_SR"):
        cells = [k] + [_pct(r.averages.get(k)) for r in reports]
        lines.append(" ".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"


def run_baseline_seqft(benchmark: Benchmark, hp: Hyperparams | None = None, seed: int = 0):
    return run_lifelong(benchmark, "seqft", hp, seed)


def run_baseline_ewc(benchmark: Benchmark, hp: Hyperparams | None = None, seed: int = 0):
    return run_lifelong(benchmark, "ewclora", hp, seed)
