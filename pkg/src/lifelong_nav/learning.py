"""Losses, Fisher importance, Adam and the per-task lifelong training loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .backbone import (
    BackboneSpec,
    BackboneWeights,
    backward,
    forward,
    init_backbone,
    log_softmax,
    per_sample_grad_A,
    per_sample_grad_B,
)
from .delora import ActiveAdapters, AdapterBank, add_expert, esoc_loss, init_bank, kis_init
from .errors import (
    ConfigurationError,
    DimensionError,
    PreconditionError,
    ProtocolViolation,
    TrainingDivergence,
)
from .navsim import Task, expert_demo
from .taka import RetrievalIndex, RouterConfig, register_task, route

log = logging.getLogger(__name__)

STRATEGIES = ("uniwalker", "seqft", "ewclora")


@dataclass(frozen=True)
class Hyperparams:
    lambda_ssc: float = 0.1
    lambda_esoc: float = 0.1
    omega: float = 0.9
    eps: float = 0.01
    mu_threshold: float = 0.5
    r: int = 16
    K: int = 2
    learning_rate: float = 1e-2
    # step size of the shared A relative to the experts; keeps A slow as the
    # small full-size learning rate does, while B can still fit in few steps
    shared_lr_scale: float = 0.01
    steps_per_task: int = 1000
    batch_size: int = 64
    fisher_samples: int = 256
    # the F*F weighting makes useful penalty weights of order 1/F^2
    ewc_lambda: float = 1e6
    # ablation switches; the loss weighting still uses the lambdas above
    kis: bool = True
    ecas: bool = True
    ssc: bool = True
    esoc: bool = True
    log_every: int = 0

    def __post_init__(self):
        if not self.lambda_ssc + self.lambda_esoc < 1.0:
            raise ConfigurationError("lambda_ssc + lambda_esoc must be < 1")
        if not 0.0 < self.omega < 1.0:
            raise ConfigurationError(f"omega must be in (0, 1), got {self.omega}")
        if not 0.0 <= self.mu_threshold <= 1.0:
            raise ConfigurationError(f"mu_threshold must be in [0, 1], got {self.mu_threshold}")
        if self.K < 1 or self.r < 1:
            raise ConfigurationError("K and r must be >= 1")
        if self.steps_per_task < 0 or self.batch_size < 1 or self.fisher_samples < 1:
            raise ConfigurationError("steps_per_task, batch_size and fisher_samples must be positive")
        if self.learning_rate <= 0 or self.shared_lr_scale < 0:
            raise ConfigurationError("learning_rate must be > 0 and shared_lr_scale >= 0")
        if self.ewc_lambda < 0.0:
            raise ConfigurationError("ewc_lambda must be >= 0")

    def router(self) -> RouterConfig:
        return RouterConfig(K=self.K, mu_threshold=self.mu_threshold)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


# values reported for the full-size model; the defaults above are desk-scale
REFERENCE_HYPERPARAMS = Hyperparams(learning_rate=3e-5, shared_lr_scale=1.0, steps_per_task=2000,
                                    batch_size=64)


@dataclass
class FisherState:
    A: list[np.ndarray]
    B: list[np.ndarray] | None = None
    task_count_seen: int = 0

    @classmethod
    def empty(cls, bank: AdapterBank, with_B: bool = False) -> "FisherState":
        return cls(
            [np.zeros_like(a) for a in bank.A],
            [np.zeros_like(b) for b in bank.experts[0]] if with_B else None,
            0,
        )

    def copy(self) -> "FisherState":
        return FisherState(
            [a.copy() for a in self.A],
            None if self.B is None else [b.copy() for b in self.B],
            self.task_count_seen,
        )


@dataclass
class TaskData:
    X: np.ndarray
    labels: np.ndarray
    obs: np.ndarray
    instr: np.ndarray
    co_experts: list[tuple[int, ...]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class Checkpoint:
    strategy: str
    hp: Hyperparams
    backbone: BackboneWeights
    bank: AdapterBank
    fisher: FisherState
    snapshot_A: list[np.ndarray]
    index: RetrievalIndex
    seed: int
    dims: tuple[int, int] = (16, 16)
    position: int = 0
    snapshot_B: list[np.ndarray] | None = None
    scene_ids: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def routes(self) -> bool:
        return self.strategy == "uniwalker"

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            strategy=self.strategy,
            hp=self.hp,
            backbone=self.backbone,
            bank=self.bank.copy(),
            fisher=self.fisher.copy(),
            snapshot_A=[a.copy() for a in self.snapshot_A],
            index=self.index.copy(),
            seed=self.seed,
            dims=self.dims,
            position=self.position,
            snapshot_B=None if self.snapshot_B is None else [b.copy() for b in self.snapshot_B],
            scene_ids=list(self.scene_ids),
            history=[dict(h) for h in self.history],
        )


def derive_seed(seed: int, *keys: int) -> int:
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def new_checkpoint(strategy: str = "uniwalker", hp: Hyperparams | None = None, seed: int = 0,
                   spec: BackboneSpec | None = None, dims=(16, 16)) -> Checkpoint:
    """Fresh model: backbone and initial adapters depend only on ``seed``."""
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    hp = hp or Hyperparams()
    spec = spec or BackboneSpec((dims[0] + dims[1], 64, 64, 4))
    if spec.input_dim != dims[0] + dims[1]:
        raise ConfigurationError(f"backbone input {spec.input_dim} != {dims[0]} + {dims[1]}")
    backbone = init_backbone(spec, derive_seed(seed, 1))
    bank = init_bank(spec, hp.r, derive_seed(seed, 2))
    with_B = strategy == "ewclora"
    return Checkpoint(
        strategy=strategy,
        hp=hp,
        backbone=backbone,
        bank=bank,
        fisher=FisherState.empty(bank, with_B),
        snapshot_A=[a.copy() for a in bank.A],
        snapshot_B=[b.copy() for b in bank.experts[0]] if with_B else None,
        index=RetrievalIndex(),
        seed=seed,
        dims=tuple(dims),
    )


# ---------------------------------------------------------------- losses


def task_loss(trace, label) -> float:
    logits = np.atleast_2d(trace.logits if hasattr(trace, "logits") else trace)
    labels = np.atleast_1d(label)
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def ssc_loss(bank: AdapterBank, snapshot, fisher: FisherState, lambda_ssc: float):
    """Fisher-weighted squared drift of each layer's A from its snapshot."""
    loss = 0.0
    grads = []
    for a, a0, f in zip(bank.A, snapshot, fisher.A):
        if a.shape != a0.shape or a.shape != f.shape:
            raise DimensionError("ssc_loss shape mismatch")
        diff = a - a0
        w = f * diff
        loss += float(np.sum(w * w))
        grads.append(2.0 * lambda_ssc * f * f * diff)
    return lambda_ssc * loss, grads


def ewc_penalty(params, anchors, fisher, weight: float):
    """Same form as ``ssc_loss`` for an arbitrary list of parameters."""
    loss = 0.0
    grads = []
    for p, p0, f in zip(params, anchors, fisher):
        diff = p - p0
        w = f * diff
        loss += float(np.sum(w * w))
        grads.append(2.0 * weight * f * f * diff)
    return weight * loss, grads


def task_weight(hp: Hyperparams, strategy: str = "uniwalker") -> float:
    if strategy == "uniwalker":
        lam = 1.0 - (hp.lambda_ssc + hp.lambda_esoc)
    else:
        lam = 1.0
    if lam <= 0.0:
        raise ConfigurationError(f"task-loss weight must be positive, got {lam}")
    return lam


def total_loss(task: float, ssc: float, esoc: float, hp: Hyperparams) -> float:
    return task_weight(hp) * task + ssc + esoc


# ---------------------------------------------------------------- fisher


def estimate_fisher(backbone: BackboneWeights, bank: AdapterBank, data: TaskData,
                    sample_count: int, seed: int = 0, with_B: bool = False) -> FisherState:
    """Empirical Fisher: mean squared log-likelihood gradient at demonstration labels."""
    n = len(data)
    if n == 0:
        raise PreconditionError("cannot estimate Fisher on an empty task")
    m = min(sample_count, n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=m, replace=False)) if m < n else np.arange(n)
    sq_A = [np.zeros((m, *a.shape)) for a in bank.A]
    sq_B = [np.zeros((m, *b.shape)) for b in bank.experts[0]] if with_B else None
    groups = _group(data, idx, bank.trainable_expert)
    for active, pos in groups:
        sel = idx[pos]
        adapters = ActiveAdapters(bank, active)
        trace = forward(backbone, adapters, data.X[sel])
        for l, g in enumerate(per_sample_grad_A(trace, backbone, adapters, data.labels[sel])):
            sq_A[l][pos] = g * g
        if with_B:
            for l, g in enumerate(per_sample_grad_B(trace, backbone, adapters, data.labels[sel])):
                sq_B[l][pos] = g * g
    return FisherState(
        [s.mean(axis=0) for s in sq_A],
        None if sq_B is None else [s.mean(axis=0) for s in sq_B],
        1,
    )


def update_fisher_ema(prev: FisherState, current: FisherState, omega: float) -> FisherState:
    def mix(p, c):
        if p.shape != c.shape:
            raise DimensionError(f"fisher shape mismatch {p.shape} vs {c.shape}")
        return omega * p + (1.0 - omega) * c

    B = None
    if prev.B is not None and current.B is not None:
        B = [mix(p, c) for p, c in zip(prev.B, current.B)]
    return FisherState(
        [mix(p, c) for p, c in zip(prev.A, current.A)],
        B,
        prev.task_count_seen + 1,
    )


def accumulate_fisher(prev: FisherState, current: FisherState, omega: float) -> FisherState:
    """EMA update, except the first estimate is taken as-is (nothing to smooth yet)."""
    if prev.task_count_seen == 0:
        return FisherState(current.A, current.B, 1)
    return update_fisher_ema(prev, current, omega)


# ---------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr):
    """In-place Adam update of ``params``; returns ``(params, state)``.

    ``lr`` is a scalar or one step size per parameter.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    lrs = list(lr) if isinstance(lr, (list, tuple)) else [lr] * len(params)
    if len(lrs) != len(params):
        raise DimensionError("adam_step: one learning rate per parameter expected")
    for p, g, m, v, step_size in zip(params, grads, state.m, state.v, lrs):
        if p.shape != g.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= step_size * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------- training


def task_data(task: Task, dims=(16, 16)) -> TaskData:
    rows, labels = [], []
    for ep in task.train:
        for x, a in expert_demo(task.scene, ep, task.style, dims):
            rows.append(x)
            labels.append(a)
    if not rows:
        raise PreconditionError(f"task {task.task_id} has no demonstrations")
    X = np.stack(rows)
    return TaskData(X, np.asarray(labels, dtype=np.int64), X[:, : dims[0]], X[:, dims[0]:])


def _group(data: TaskData, idx: np.ndarray, trainable: int | None):
    """Split sample positions by active expert set, in first-appearance order."""
    groups: dict[tuple, list[int]] = {}
    for pos, i in enumerate(idx):
        co = data.co_experts[i] if data.co_experts else ()
        active = tuple(co) + ((trainable,) if trainable is not None else ())
        groups.setdefault(active, []).append(pos)
    return [(k, np.asarray(v)) for k, v in groups.items()]


def _trainable_params(state: Checkpoint):
    t = state.bank.trainable_expert
    return list(state.bank.A) + list(state.bank.experts[t])


def mean_task_loss(state: Checkpoint, data: TaskData) -> float:
    total = 0.0
    for active, pos in _group(data, np.arange(len(data)), state.bank.trainable_expert):
        adapters = ActiveAdapters(state.bank, active)
        trace = forward(state.backbone, adapters, data.X[pos])
        total += task_loss(trace.post[-1], data.labels[pos]) * len(pos)
    return total / len(data)


def _prepare_task(state: Checkpoint, task: Task) -> TaskData:
    """Grow the bank and register retrieval embeddings (start of a task)."""
    hp = state.hp
    bank = state.bank
    style = task.style.value
    if state.routes:
        if state.position == 0:
            bank.expert_styles[0] = style
            bank.trainable_expert = 0
        else:
            new = add_expert(bank, style)
            if hp.kis:
                kis_init(bank, new, style)
    elif bank.expert_styles[0] is None:
        bank.expert_styles[0] = style
    data = task_data(task, state.dims)
    if state.routes:
        t = bank.trainable_expert
        register_task(state.index, task, t, *state.dims, n_experts=bank.n_experts)
        k = hp.K - 1
        if hp.ecas and k > 0 and len(state.index) > 1:
            cfg = hp.router()
            data.co_experts = [
                tuple(route(state.index, o, i, cfg, k=k, exclude_expert=t))
                for o, i in zip(data.obs, data.instr)
            ]
    return data


def train_task(state: Checkpoint, task: Task, hp: Hyperparams | None = None,
               seed: int | None = None) -> Checkpoint:
    """Learn one task in place and return ``state``.

    uniwalker: new expert (+ inheritance) for every task after the first,
    co-activated frozen experts chosen by retrieval, Fisher-weighted anchoring
    of A and orthogonality of the new expert. The baselines train one adapter
    pair; ``ewclora`` adds a Fisher penalty on both of its matrices.
    """
    if hp is not None:
        state.hp = hp
    hp = state.hp
    seed = state.seed if seed is None else seed
    if task.scene.scene_id in state.scene_ids:
        raise ProtocolViolation(f"scene {task.scene.scene_id} was already learned")
    data = _prepare_task(state, task)
    bank = state.bank
    t = bank.trainable_expert
    lam = task_weight(hp, state.strategy)
    use_ssc = state.routes and hp.ssc and state.fisher.task_count_seen > 0
    use_esoc = state.routes and hp.esoc and t > 0
    use_ewc = state.strategy == "ewclora" and state.fisher.task_count_seen > 0 and hp.ewc_lambda > 0

    params = _trainable_params(state)
    n_layers = bank.n_layers
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(derive_seed(seed, 3, state.position))
    n = len(data)
    batch = min(hp.batch_size, n)
    loss_before = mean_task_loss(state, data)

    for it in range(hp.steps_per_task):
        idx = rng.choice(n, size=batch, replace=False)
        gA = [np.zeros_like(a) for a in bank.A]
        gB = [np.zeros_like(b) for b in bank.experts[t]]
        task_l = 0.0
        for active, pos in _group(data, idx, t):
            adapters = ActiveAdapters(bank, active)
            trace = forward(state.backbone, adapters, data.X[idx[pos]])
            g = backward(trace, state.backbone, adapters, data.labels[idx[pos]])
            w = len(pos) / batch
            task_l += w * g.loss
            for l in range(n_layers):
                gA[l] += w * g.A[l]
                gB[l] += w * g.B[l]
        reg_l = 0.0
        grads_A = [lam * g for g in gA]
        grads_B = [lam * g for g in gB]
        if use_ssc:
            s_l, s_g = ssc_loss(bank, state.snapshot_A, state.fisher, hp.lambda_ssc)
            reg_l += s_l
            grads_A = [a + b for a, b in zip(grads_A, s_g)]
        if use_esoc:
            e_l, e_g = esoc_loss(bank, t, hp.lambda_esoc, hp.eps)
            reg_l += e_l
            grads_B = [a + b for a, b in zip(grads_B, e_g)]
        if use_ewc:
            pa, ga = ewc_penalty(bank.A, state.snapshot_A, state.fisher.A, hp.ewc_lambda)
            pb, gb = ewc_penalty(bank.experts[t], state.snapshot_B, state.fisher.B, hp.ewc_lambda)
            reg_l += pa + pb
            grads_A = [a + b for a, b in zip(grads_A, ga)]
            grads_B = [a + b for a, b in zip(grads_B, gb)]
        total = lam * task_l + reg_l
        if not np.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads_A + grads_B):
            raise TrainingDivergence(
                f"non-finite loss {total} at step {it} of task {task.task_id}",
                batch={"indices": idx.tolist(), "X": data.X[idx].tolist(),
                       "labels": data.labels[idx].tolist()},
            )
        lrs = [hp.learning_rate * hp.shared_lr_scale] * n_layers + [hp.learning_rate] * n_layers
        adam_step(params, grads_A + grads_B, adam, lrs)
        bank.touch()
        if hp.log_every and it % hp.log_every == 0:
            log.info("task %d step %d loss %.5f (task %.5f)", task.task_id, it, total, task_l)

    loss_after = mean_task_loss(state, data)
    with_B = state.strategy == "ewclora"
    current = estimate_fisher(state.backbone, bank, data, hp.fisher_samples,
                              derive_seed(seed, 4, state.position), with_B=with_B)
    state.fisher = accumulate_fisher(state.fisher, current, hp.omega)
    state.snapshot_A = [a.copy() for a in bank.A]
    if with_B:
        state.snapshot_B = [b.copy() for b in bank.experts[t]]
    state.scene_ids.append(task.scene.scene_id)
    state.history.append({
        "task_id": task.task_id,
        "expert": t,
        "style": task.style.value,
        "samples": n,
        "loss_before": loss_before,
        "loss_after": loss_after,
    })
    state.position += 1
    return state


def with_overrides(hp: Hyperparams, **kw) -> Hyperparams:
    return replace(hp, **kw)
