"""Shared oracles for the test-suite."""

import itertools

import numpy as np

from lifelong_nav.backbone import BackboneSpec, init_backbone
from lifelong_nav.delora import init_bank


def central_fd(f, params, h=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of every array in ``params``.

    ``params`` are modified in place during the probe and restored afterwards.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    b = np.concatenate([np.ravel(x) for x in numeric])
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def random_model(rng, n_experts=3, r=None):
    """Small random backbone plus a bank whose experts are all non-zero."""
    dims = (int(rng.integers(3, 7)), int(rng.integers(4, 8)), int(rng.integers(4, 8)), 4)
    spec = BackboneSpec(dims)
    r = int(rng.integers(1, 4)) if r is None else r
    backbone = init_backbone(spec, int(rng.integers(2**31)))
    bank = init_bank(spec, r, int(rng.integers(2**31)))
    for _ in range(n_experts - 1):
        bank.experts.append([np.zeros_like(b) for b in bank.experts[0]])
        bank.expert_styles.append("VLN")
    for layers in bank.experts:
        for l in range(len(layers)):
            layers[l] = rng.standard_normal(layers[l].shape) * 0.5
    bank.trainable_expert = n_experts - 1
    return spec, backbone, bank


def brute_force_select(sims, K, mu):
    """Enumerate every size-min(K, n) subset of tasks and keep the best one.

    A subset is better when its descending score vector is larger; equal
    vectors prefer the lexicographically smaller task indices.
    """
    n = len(sims)
    masked = [s.sm_obs if s.sm_instr >= mu else 0.0 for s in sims]
    scores = masked if any(s.sm_instr >= mu for s in sims) else [s.sm_obs for s in sims]
    best, best_key = None, None
    for subset in itertools.combinations(range(n), min(K, n)):
        ordered = sorted(subset, key=lambda i: (-scores[i], i))
        key = (tuple(scores[i] for i in ordered), tuple(-i for i in ordered))
        if best_key is None or key > best_key:
            best, best_key = ordered, key
    return [sims[i].expert for i in best]
