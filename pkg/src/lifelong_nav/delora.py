"""Growing bank of low-rank experts sharing one down-projection per layer.

Layer ``l`` holds a shared ``A[l]`` (r x in) and one ``B`` (out x r) per expert.
New experts start at zero and may be initialized from same-style predecessors
by PCA (knowledge inheritance). ``esoc_loss`` pushes the trainable expert
towards orthogonality with all earlier experts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneSpec
from .errors import ConfigurationError, ContractViolation
from .linalg import pca_top_r

_bank_ids = itertools.count()


@dataclass
class AdapterBank:
    rank: int
    A: list[np.ndarray]
    experts: list[list[np.ndarray]]  # experts[k][l]
    expert_styles: list[str | None]
    trainable_expert: int | None = 0
    version: int = 0
    uid: int = field(default_factory=lambda: next(_bank_ids))

    @property
    def n_layers(self) -> int:
        return len(self.A)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def touch(self) -> None:
        """Mark parameters as changed so older forward traces go stale."""
        self.version += 1

    def copy(self) -> "AdapterBank":
        return AdapterBank(
            rank=self.rank,
            A=[a.copy() for a in self.A],
            experts=[[b.copy() for b in layers] for layers in self.experts],
            expert_styles=list(self.expert_styles),
            trainable_expert=self.trainable_expert,
        )

    def check(self) -> None:
        for l in range(self.n_layers):
            shapes = {e[l].shape for e in self.experts}
            if len(shapes) > 1:
                raise ContractViolation(f"layer {l} experts have mixed shapes {shapes}")
        if len(self.expert_styles) != self.n_experts:
            raise ContractViolation("expert_styles length differs from expert count")
        if self.trainable_expert is not None and not 0 <= self.trainable_expert < self.n_experts:
            raise ContractViolation(f"trainable expert {self.trainable_expert} does not exist")


class ActiveAdapters:
    """A view of the bank restricted to an ordered set of active experts."""

    def __init__(self, bank: AdapterBank, active, max_active: int | None = None):
        active = tuple(int(i) for i in active)
        if len(set(active)) != len(active):
            raise ContractViolation(f"duplicate active experts {active}")
        for i in active:
            if not 0 <= i < bank.n_experts:
                raise ContractViolation(f"active expert {i} does not exist")
        if max_active is not None and len(active) > max_active:
            raise ContractViolation(f"{len(active)} active experts exceeds K={max_active}")
        self.bank = bank
        self.active = active

    def key(self) -> tuple:
        return (self.bank.uid, self.bank.version, self.active)

    def layer_terms(self, l: int):
        """(A, sum of active B) for layer ``l``, or None when nothing is active."""
        if not self.active:
            return None
        experts = self.bank.experts
        B_sum = experts[self.active[0]][l]
        for i in self.active[1:]:
            B_sum = B_sum + experts[i][l]
        return self.bank.A[l], B_sum

    def trainable_active(self) -> int | None:
        t = self.bank.trainable_expert
        return t if t is not None and t in self.active else None


def init_bank(spec: BackboneSpec, r: int, seed: int) -> AdapterBank:
    """Kaiming-normal ``A`` on every layer plus one all-zero expert."""
    if r < 1:
        raise ConfigurationError(f"rank must be >= 1, got {r}")
    rng = np.random.default_rng(seed)
    A, B1 = [], []
    for l in range(spec.n_layers):
        out_dim, in_dim = spec.layer_shape(l)
        A.append(rng.standard_normal((r, in_dim)) * np.sqrt(2.0 / in_dim))
        B1.append(np.zeros((out_dim, r)))
    return AdapterBank(rank=r, A=A, experts=[B1], expert_styles=[None], trainable_expert=0)


def add_expert(bank: AdapterBank, style) -> int:
    new = [np.zeros_like(b) for b in bank.experts[0]]
    bank.experts.append(new)
    bank.expert_styles.append(style)
    bank.trainable_expert = bank.n_experts - 1
    bank.touch()
    return bank.trainable_expert


def kis_init(bank: AdapterBank, new_expert: int, style) -> int:
    """Initialize ``new_expert`` from earlier experts of the same style.

    Per layer: flatten each predecessor, take the mean and top principal
    directions, and set ``B = mean + (1/r) * sum(directions)``. Returns the
    number of predecessors used.
    """
    if not 0 <= new_expert < bank.n_experts:
        raise ContractViolation(f"expert {new_expert} does not exist")
    if any(np.any(b != 0) for b in bank.experts[new_expert]):
        raise ContractViolation(f"expert {new_expert} is not zero-initialized")
    sources = [
        k for k in range(bank.n_experts)
        if k != new_expert and bank.expert_styles[k] == style
    ]
    if not sources:
        return 0
    r = bank.rank
    for l in range(bank.n_layers):
        shape = bank.experts[new_expert][l].shape
        thetas = [bank.experts[k][l].reshape(-1) for k in sources]
        mean, comps, _ = pca_top_r(thetas, r)
        theta = mean + sum(comps, np.zeros_like(mean)) / r
        bank.experts[new_expert][l] = theta.reshape(shape)
    bank.touch()
    return len(sources)


def esoc_loss(bank: AdapterBank, t: int, lambda_esoc: float, eps: float):
    """Absolute normalized trace overlap between expert ``t`` and every earlier expert.

    Returns ``(loss, grads)``; ``grads[l]`` is the subgradient w.r.t. the raw
    ``B_t`` of layer ``l`` (zero where an overlap is exactly 0).
    """
    if bank.trainable_expert is not None and t != bank.trainable_expert:
        raise ContractViolation(f"esoc_loss on expert {t}, trainable is {bank.trainable_expert}")
    loss = 0.0
    grads = []
    for l in range(bank.n_layers):
        bt = bank.experts[t][l]
        nt = np.sqrt(np.sum(bt * bt))
        dt = nt + eps
        g = np.zeros_like(bt)
        for i in range(t):
            bi = bank.experts[i][l]
            bi_n = bi / (np.sqrt(np.sum(bi * bi)) + eps)
            inner = float(np.sum(bi_n * bt))
            s = inner / dt
            loss += abs(s)
            sign = np.sign(s)
            if sign == 0.0:
                continue
            ds = bi_n / dt
            if nt > 0.0:
                ds = ds - (inner / dt**2) * (bt / nt)
            g += sign * ds
        grads.append(lambda_esoc * g)
    return lambda_esoc * loss, grads


def expert_overlap(bank: AdapterBank, i: int, j: int, eps: float = 0.0) -> float:
    """Mean over layers of |tr(B~_i^T B~_j)|."""
    vals = []
    for l in range(bank.n_layers):
        bi, bj = bank.experts[i][l], bank.experts[j][l]
        ni = np.sqrt(np.sum(bi * bi)) + eps
        nj = np.sqrt(np.sum(bj * bj)) + eps
        if ni == 0.0 or nj == 0.0:
            vals.append(0.0)
            continue
        vals.append(abs(float(np.sum(bi * bj)) / (ni * nj)))
    return float(np.mean(vals))
