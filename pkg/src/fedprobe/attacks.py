"""Malicious update construction.

Local training (benign or on poisoned data), the two hiding modes (norm
projection and the stealth objective), model replacement scaling, and the
adaptive attack that deviates from the estimated global update direction
and binary-searches the largest undetected magnitude.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import ClientShard
from .nn import NetworkSpec, loss_and_grad, sgd_step


@dataclass
class LocalTrainConfig:
    lr: float = 0.001
    epochs: int = 1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4


@dataclass
class AttackConfig:
    kind: str = "trigger"          # trigger | subpopulation | adaptive_*
    mode: str = "blackbox"         # blackbox | pgd | smp (backdoor kinds only)
    epsilon: float = 5e-2          # pgd norm bound
    rho1: float = 10.0             # stealth objective: poison-loss weight
    rho2: float = 1e-4             # stealth objective: distance weight
    replace_scale: float | None = None  # optional model-replacement multiplier
    target_label: int = 0
    poison_fraction: float = 0.3
    trigger_block: int = 3
    trigger_corner: str = "br"
    # attackers control their own local training (threat model): optional
    # overrides for the malicious clients' epochs and learning rate
    local_epochs: int | None = None
    lr_scale: float = 1.0

    KINDS = ("trigger", "subpopulation", "adaptive_krum", "adaptive_probe")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.mode not in ("blackbox", "pgd", "smp"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.mode == "pgd" and self.epsilon <= 0:
            raise ValueError("epsilon must be positive in pgd mode")
        if self.mode == "smp" and (self.rho1 < 0 or self.rho2 < 0):
            raise ValueError("rho1 and rho2 must be nonnegative")
        if self.replace_scale is not None and self.replace_scale < 1:
            raise ValueError("replace_scale must be >= 1")


# ---------------------------------------------------------------------------
# Local training
# ---------------------------------------------------------------------------

def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _sgd_epochs(params: np.ndarray, spec: NetworkSpec, inputs, labels,
                hyper: LocalTrainConfig, rng: np.random.Generator,
                grad_fn: Callable | None = None) -> np.ndarray:
    w = params.copy()
    state = np.zeros_like(w)
    for _ in range(hyper.epochs):
        for idx in _epoch_batches(len(labels), hyper.batch_size, rng):
            if grad_fn is None:
                _, grad = loss_and_grad(w, spec, (inputs[idx], labels[idx]))
            else:
                grad = grad_fn(w, idx)
            w, state = sgd_step(w, grad, hyper.lr, hyper.momentum,
                                hyper.weight_decay, state)
    return w


def train_local(global_params: np.ndarray, spec: NetworkSpec,
                shard: ClientShard, hyper: LocalTrainConfig,
                seed: int, poisoned: bool = False) -> np.ndarray:
    """Run local SGD from the global model; return the update w_after - w_g.

    Benign clients train on their clean data; a black-box attacker passes
    poisoned=True to train on clean plus poison.
    """
    if poisoned:
        inputs, labels = shard.training_data()
    else:
        inputs, labels = shard.clean.inputs, shard.clean.labels
    if len(labels) == 0:
        raise ValueError("empty shard")
    rng = np.random.default_rng(seed)
    w = _sgd_epochs(global_params, spec, inputs, labels, hyper, rng)
    return w - global_params


def smp_train(global_params: np.ndarray, spec: NetworkSpec,
              shard: ClientShard, rho1: float, rho2: float,
              hyper: LocalTrainConfig, seed: int) -> np.ndarray:
    """Stealth-mode training: rho1 * poison loss + clean loss + rho2 * distance.

    The distance term ||w - w_g||_2 contributes the subgradient
    rho2 * (w - w_g) / ||w - w_g|| (zero exactly at w = w_g). Poison batches
    cycle alongside clean batches. Returns the update w_after - w_g.
    """
    if shard.poisoned is None or len(shard.poisoned) == 0:
        raise ValueError("smp mode needs a nonempty poisoned set")
    if len(shard.clean) == 0:
        raise ValueError("smp mode needs a nonempty clean set")
    rng = np.random.default_rng(seed)
    # the poison cycle gets its own stream so the clean-batch order matches
    # plain local training exactly (rho1 = rho2 = 0 reduces to it)
    poison_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xED)))
    px, py = shard.poisoned.inputs, shard.poisoned.labels
    n_poison = len(py)
    poison_order = poison_rng.permutation(n_poison)
    cursor = 0

    def next_poison_batch(size: int) -> np.ndarray:
        nonlocal cursor, poison_order
        take = []
        remaining = size
        while remaining > 0:
            if cursor == n_poison:
                poison_order = poison_rng.permutation(n_poison)
                cursor = 0
            grab = min(remaining, n_poison - cursor)
            take.append(poison_order[cursor:cursor + grab])
            cursor += grab
            remaining -= grab
        return np.concatenate(take)

    def grad_fn(w: np.ndarray, idx: np.ndarray) -> np.ndarray:
        _, g_clean = loss_and_grad(w, spec, (shard.clean.inputs[idx],
                                             shard.clean.labels[idx]))
        pidx = next_poison_batch(min(len(idx), n_poison))
        _, g_poison = loss_and_grad(w, spec, (px[pidx], py[pidx]))
        diff = w - global_params
        dist = float(np.linalg.norm(diff))
        g_dist = diff / dist if dist > 0 else np.zeros_like(diff)
        return rho1 * g_poison + g_clean + rho2 * g_dist

    w = _sgd_epochs(global_params, spec, shard.clean.inputs, shard.clean.labels,
                    hyper, rng, grad_fn=grad_fn)
    return w - global_params


# ---------------------------------------------------------------------------
# Update manipulation
# ---------------------------------------------------------------------------

def pgd_project(update: np.ndarray, epsilon: float) -> np.ndarray:
    """Rescale to L2 norm epsilon, preserving direction; zero stays zero."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    update = np.asarray(update, dtype=np.float64)
    norm = float(np.linalg.norm(update))
    if norm == 0.0:
        return update.copy()
    return update * (epsilon / norm)


def model_replacement_scale(update: np.ndarray, tau: float) -> np.ndarray:
    """Magnify the update so one aggregation overwrites the global model."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    return np.asarray(update, dtype=np.float64) * tau


# ---------------------------------------------------------------------------
# Adaptive attack
# ---------------------------------------------------------------------------

def sign_vector(v: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0 (the direction-aggregation convention)."""
    return np.sign(np.asarray(v, dtype=np.float64))


def adaptive_craft(global_update_est: np.ndarray, lam: float) -> np.ndarray:
    """Deviate the estimated global update against its own sign direction.

    Every colluding attacker submits this same vector.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    u = np.asarray(global_update_est, dtype=np.float64)
    return u - lam * sign_vector(u)


def binary_search_lambda(accepts: Callable[[float], bool],
                         init_lambda: float = 1.0,
                         floor: float = 1e-10) -> tuple[float, bool, int]:
    """Halve lambda until the oracle accepts or lambda drops to the floor.

    The probe sequence is init, init/2, init/4, ...; returns
    (final lambda, accepted, probes used). When nothing is ever accepted the
    returned lambda is the first value <= floor.
    """
    if init_lambda <= 0 or floor <= 0:
        raise ValueError("init_lambda and floor must be positive")
    lam = init_lambda
    probes = 0
    while lam > floor:
        probes += 1
        if accepts(lam):
            return lam, True, probes
        lam /= 2.0
    return lam, False, probes


def krum_accepts(benign_updates: list[np.ndarray], f: int,
                 crafted: np.ndarray) -> bool:
    """Krum-attack acceptance: krum's pick is one of the f malicious copies."""
    from .aggregation import krum

    stacked = [crafted.copy() for _ in range(f)] + list(benign_updates)
    _, scores = krum(stacked, f)
    return int(np.argmin(scores)) < f


def probe_screen_accepts(benign_updates: list[np.ndarray], f: int,
                         crafted: np.ndarray, spec: NetworkSpec,
                         probe: np.ndarray, min_cluster_size: int = 0,
                         min_samples: int = 1) -> bool:
    """Probe-screen acceptance: all f malicious land in the major cluster.

    Acceptance follows the attack loop's own condition: the density
    clustering must produce clusters and every attacker index must sit in
    the biggest one. Rounds where clustering has no verdict leave the
    attackers nowhere to hide, so the search keeps shrinking lambda.
    """
    from . import clustering
    from .aggregation import majority_cluster_size, probe_responses

    stacked = [crafted.copy() for _ in range(f)] + list(benign_updates)
    slous = probe_responses(stacked, spec, probe)
    mcs = majority_cluster_size(len(stacked)) if min_cluster_size == 0 else min_cluster_size
    result = clustering.hdbscan(slous, min_cluster_size=mcs,
                                min_samples=min_samples)
    if result.major is None:
        return False
    major = set(result.major.tolist())
    return all(i in major for i in range(f))
