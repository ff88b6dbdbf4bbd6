"""Command-line entry point: ``lifelong-nav {gen-bench,train,eval,compare,inspect}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from . import __version__
from .bench import MetricsReport, compare_reports, evaluate, format_comparison, format_table, train_lifelong
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    CONFIG_DIR_ENV,
    RunConfig,
    config_hash,
    effective,
    load_config_file,
    merge,
    resolve_config_path,
)
from .errors import ConfigurationError, LifelongNavError, TrainingDivergence
from .learning import STRATEGIES, Checkpoint, Hyperparams, new_checkpoint
from .navsim import BenchmarkConfig, build_benchmark, dumps_benchmark, loads_benchmark
from .taka import index_summary

log = logging.getLogger("lifelong_nav")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _manifest(command: str, cfg: RunConfig, inputs: dict, outputs: dict) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config": effective(cfg),
        "config_hash": config_hash(cfg),
        "inputs": {k: _sha256(v) for k, v in sorted(inputs.items())},
        "outputs": {k: _sha256(v) for k, v in sorted(outputs.items())},
    }


def _require(value, flag: str):
    if value is None:
        raise ConfigurationError(f"{flag} is required")
    if not Path(value).exists():
        raise ConfigurationError(f"{flag} {value}: no such file")
    return value


def _load_benchmark(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read benchmark {path}: {exc.strerror}") from None
    try:
        return loads_benchmark(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"benchmark {path} is not valid JSON: {exc}") from None


def _check_compatible(state: Checkpoint, bench, ckpt_path) -> None:
    dims = (bench.config.obs_dim, bench.config.instr_dim)
    if tuple(state.dims) != dims:
        raise ConfigurationError(f"checkpoint {ckpt_path} uses encoder dims {state.dims}, benchmark has {dims}")
    expected = [t.scene.scene_id for t in bench.continual[: len(state.scene_ids)]]
    if expected != list(state.scene_ids):
        raise ConfigurationError(f"checkpoint {ckpt_path} was trained on a different benchmark")


# ---------------------------------------------------------------- commands


def cmd_gen_bench(cfg: RunConfig) -> int:
    out = Path(cfg.out or "benchmark.json")
    bench = build_benchmark(cfg.benchmark_config(), cfg.seed)
    out.write_text(dumps_benchmark(bench), encoding="utf-8")
    _write_json(out.with_name(out.name + ".manifest.json"),
                _manifest("gen-bench", cfg, {}, {"benchmark": out}))
    log.info("wrote %s (%d continual, %d unseen)", out, len(bench.continual), len(bench.unseen))
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    bench_path = _require(cfg.benchmark, "--benchmark")
    bench = _load_benchmark(bench_path)
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    hp = cfg.hyperparams()
    inputs = {"benchmark": bench_path}
    if cfg.resume:
        inputs["resume"] = _require(cfg.resume, "--resume")
        state = load_checkpoint(cfg.resume)
        _check_compatible(state, bench, cfg.resume)
        if state.strategy != cfg.strategy or state.seed != cfg.seed:
            raise ConfigurationError(
                f"resume checkpoint is {state.strategy}/seed {state.seed}, "
                f"run asks for {cfg.strategy}/seed {cfg.seed}")
        if state.hp != hp:
            raise ConfigurationError("resume checkpoint was trained with different hyperparameters")
    else:
        dims = (bench.config.obs_dim, bench.config.instr_dim)
        state = new_checkpoint(cfg.strategy, hp, cfg.seed, dims=dims)

    written = {}

    def on_task_end(st: Checkpoint, task) -> None:
        path = out / f"task{task.task_id:02d}.ckpt"
        save_checkpoint(st, path)
        written[path.stem] = path
        m = st.history[-1]["M"]
        log.info("task %d learned: SR %.3f SPL %.3f OSR %.3f", task.task_id, *m)

    try:
        train_lifelong(bench, state, hp, cfg.seed, on_task_end, cfg.max_tasks)
    except TrainingDivergence as exc:
        dump = out / "divergence.json"
        _write_json(dump, {"error": str(exc), "batch": exc.batch})
        print(f"error: {exc}; offending batch written to {dump}", file=sys.stderr)
        return EXIT_DIVERGED
    final = out / "final.ckpt"
    save_checkpoint(state, final)
    written["final"] = final
    _write_json(out / "manifest.json", _manifest("train", cfg, inputs, written))
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    bench_path = _require(cfg.benchmark, "--benchmark")
    ckpt_path = _require(cfg.checkpoint, "--checkpoint")
    bench = _load_benchmark(bench_path)
    state = load_checkpoint(ckpt_path)
    _check_compatible(state, bench, ckpt_path)
    report = evaluate(bench, state)
    out = Path(cfg.out or "report.json")
    out.write_text(report.to_json(), encoding="utf-8")
    table = format_table(report)
    out.with_suffix(".txt").write_text(table, encoding="utf-8")
    _write_json(out.with_name(out.name + ".manifest.json"),
                _manifest("eval", cfg, {"benchmark": bench_path, "checkpoint": ckpt_path},
                          {"report": out}))
    sys.stdout.write(table)
    return EXIT_OK


def _load_report(path) -> MetricsReport:
    try:
        return MetricsReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigurationError(f"cannot read report {path}: {exc}") from None


def cmd_compare(cfg: RunConfig, reports: list[str]) -> int:
    if not reports:
        raise ConfigurationError("compare needs at least one report")
    loaded = [_load_report(p) for p in reports]
    sys.stdout.write(format_comparison(loaded))
    if cfg.out:
        _write_json(cfg.out, compare_reports(loaded))
    return EXIT_OK


def inspect_checkpoint(state: Checkpoint) -> dict:
    bank = state.bank
    fisher = {
        "tasks_seen": state.fisher.task_count_seen,
        "A": [{"shape": list(f.shape), "mean": float(f.mean()), "max": float(f.max())}
              for f in state.fisher.A],
    }
    if state.fisher.B is not None:
        fisher["B"] = [{"shape": list(f.shape), "mean": float(f.mean()), "max": float(f.max())}
                       for f in state.fisher.B]
    return {
        "strategy": state.strategy,
        "seed": state.seed,
        "tasks_trained": state.position,
        "scene_ids": list(state.scene_ids),
        "backbone": {"layer_dims": list(state.backbone.spec.layer_dims),
                     "checksum": state.backbone.checksum()},
        "bank": {
            "rank": bank.rank,
            "A_shapes": [list(a.shape) for a in bank.A],
            "B_shapes": [list(b.shape) for b in bank.experts[0]],
            "experts": bank.n_experts,
            "expert_styles": list(bank.expert_styles),
            "expert_norms": [[float(np.linalg.norm(b)) for b in layers] for layers in bank.experts],
            "trainable_expert": bank.trainable_expert,
        },
        "fisher": fisher,
        "index": index_summary(state.index),
        "history": state.history,
        "hp": state.hp.to_dict(),
    }


def cmd_inspect(cfg: RunConfig) -> int:
    ckpt_path = _require(cfg.checkpoint, "--checkpoint")
    info = inspect_checkpoint(load_checkpoint(ckpt_path))
    text = json.dumps(info, indent=1, sort_keys=True) + "\n"
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, title: str) -> None:
    group = parser.add_argument_group(title)
    for f in fields(cls):
        default = f.default if f.default is not MISSING else None
        if isinstance(default, bool):
            group.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None, help=f"default {default}")
        else:
            group.add_argument(_flag(f.name), dest=f.name, type=type(default), default=None,
                               metavar=f.name.upper(), help=f"default {default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifelong-nav",
        description="Lifelong navigation learning with shared/expert low-rank adapters.",
        epilog=f"Config files are flat JSON objects whose keys match the flags. "
               f"{CONFIG_DIR_ENV} names a directory searched for --config names "
               f"(and for default.json when --config is omitted).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, strategy=False):
        p.add_argument("--config", help="JSON config; flags override its values")
        p.add_argument("--seed", type=int, default=None, help="default 0")
        p.add_argument("--out", default=None, help="output path")
        p.add_argument("-v", "--verbose", action="count", default=None)
        if strategy:
            p.add_argument("--strategy", choices=STRATEGIES, default=None, help="default uniwalker")

    p = sub.add_parser("gen-bench", help="generate a benchmark file")
    common(p)
    _add_dataclass_flags(p, BenchmarkConfig, "benchmark")

    p = sub.add_parser("train", help="train all continual tasks, writing per-task checkpoints")
    common(p, strategy=True)
    p.add_argument("--benchmark")
    p.add_argument("--resume", help="per-task checkpoint to continue from")
    p.add_argument("--max-tasks", dest="max_tasks", type=int, default=None,
                   help="stop once this many tasks are learned")
    _add_dataclass_flags(p, Hyperparams, "hyperparameters")

    p = sub.add_parser("eval", help="evaluate a checkpoint on every task")
    common(p)
    p.add_argument("--benchmark")
    p.add_argument("--checkpoint")

    p = sub.add_parser("compare", help="align reports by task; deltas are against the first")
    common(p)
    p.add_argument("reports", nargs="+")

    p = sub.add_parser("inspect", help="dump adapter bank, Fisher and retrieval index summaries")
    common(p)
    p.add_argument("--checkpoint")
    return parser


_NOT_CONFIG = {"command", "config", "reports"}


def resolve(args: argparse.Namespace) -> RunConfig:
    path = resolve_config_path(args.config)
    file_values = load_config_file(path) if path else {}
    flags = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    return merge(file_values, flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        level = logging.WARNING if cfg.verbose <= 0 else logging.INFO if cfg.verbose == 1 else logging.DEBUG
        logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        if args.command == "gen-bench":
            return cmd_gen_bench(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "compare":
            return cmd_compare(cfg, args.reports)
        return cmd_inspect(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LifelongNavError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
