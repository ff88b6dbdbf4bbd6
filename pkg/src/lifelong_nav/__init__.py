"""Lifelong navigation learning with a shared low-rank encoder and growing expert decoders."""

__version__ = "0.1.0"

from .backbone import BackboneSpec, BackboneWeights, backward, forward, init_backbone
from .bench import MetricsReport, eval_task, evaluate, forgetting_rate, run_lifelong
from .checkpoint import load_checkpoint, save_checkpoint
from .delora import ActiveAdapters, AdapterBank, add_expert, esoc_loss, init_bank, kis_init
from .learning import REFERENCE_HYPERPARAMS, Checkpoint, Hyperparams, new_checkpoint, train_task
from .navsim import Benchmark, BenchmarkConfig, InstructionStyle, build_benchmark
from .taka import RouterConfig, infer_episode, route, select_experts

__all__ = [
    "ActiveAdapters", "AdapterBank", "BackboneSpec", "BackboneWeights", "Benchmark",
    "BenchmarkConfig", "Checkpoint", "Hyperparams", "InstructionStyle", "MetricsReport",
    "REFERENCE_HYPERPARAMS", "RouterConfig", "add_expert", "backward", "build_benchmark",
    "esoc_loss", "eval_task", "evaluate", "forgetting_rate", "forward", "infer_episode",
    "init_backbone", "init_bank", "kis_init", "load_checkpoint", "new_checkpoint", "route",
    "run_lifelong", "save_checkpoint", "select_experts", "train_task",
]
