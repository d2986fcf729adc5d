"""Round orchestration: sampling, local training, attacks, aggregation, metrics.

A round follows the usual three-step protocol: the server publishes the
global model, sampled clients train locally and return updates, the server
aggregates. Everything is in-process and deterministic under the master
seed; per-round and per-client randomness is derived from it.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .aggregation import AggregationResult, AggregatorConfig, make_probe, run_aggregator
from .attacks import (AttackConfig, LocalTrainConfig, adaptive_craft,
                      binary_search_lambda, krum_accepts, pgd_project,
                      probe_screen_accepts, sign_vector, smp_train, train_local)
from .data import BackdoorTask, ClientShard, Dataset

ADAPTIVE_KINDS = ("adaptive_krum", "adaptive_probe")


@dataclass
class ExperimentConfig:
    total_clients: int = 200
    tau: int = 30                     # updates collected per round
    malicious_fraction: float = 0.0
    global_iterations: int = 100
    local_iterations: int = 1
    batch_size: int = 32
    lr: float = 0.001
    lr_decay: float = 0.998
    momentum: float = 0.9
    weight_decay: float = 1e-4
    global_lr: float = 1.0
    seed: int = 0
    attack: AttackConfig | None = None
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    adaptive_floor: float = 1e-10
    measure_screening_time: bool = True

    def __post_init__(self):
        if not (0 <= self.malicious_fraction < 0.5):
            raise ValueError(
                "malicious_fraction must be in [0, 0.5): the threat model "
                "assumes attackers are a minority")
        if not (1 <= self.tau <= self.total_clients):
            raise ValueError("tau must be in [1, total_clients]")
        if self.global_iterations < 0 or self.local_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")

    def malicious_per_round(self) -> int:
        return int(round(self.tau * self.malicious_fraction))

    def local_hyper(self, round_idx: int) -> LocalTrainConfig:
        return LocalTrainConfig(
            lr=self.lr * self.lr_decay ** round_idx,
            epochs=self.local_iterations,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )


@dataclass
class RoundReport:
    iteration: int
    test_error_rate: float
    attack_success_rate: float | None
    sampled_ids: list[int]
    malicious_ids: list[int]          # sampled clients that are malicious
    preserved_ids: list[int]          # client ids the aggregator kept
    screening_seconds: float
    adaptive_lambda: float | None = None
    adaptive_accepted: bool | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class SimState:
    spec: nn.NetworkSpec
    global_params: np.ndarray
    shards: list[ClientShard]
    test_set: Dataset
    backdoor: BackdoorTask | None = None
    round_idx: int = 0


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _predictions(params: np.ndarray, spec: nn.NetworkSpec,
                 inputs: np.ndarray, chunk: int = 512) -> np.ndarray:
    outs = []
    for start in range(0, len(inputs), chunk):
        probs = nn.batch_forward(params, spec, inputs[start:start + chunk])
        outs.append(np.argmax(probs, axis=1))
    return np.concatenate(outs) if outs else np.zeros(0, dtype=int)


def testing_error_rate(params: np.ndarray, spec: nn.NetworkSpec,
                       test: Dataset) -> float:
    """Fraction of the test set the model misclassifies."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = _predictions(params, spec, test.inputs)
    return float((pred != test.labels).mean())


def attack_success_rate(params: np.ndarray, spec: nn.NetworkSpec,
                        task: BackdoorTask) -> float:
    """Fraction of backdoor-task inputs classified as the attacker's target."""
    if len(task.test_set) == 0:
        raise ValueError("empty backdoor test set")
    pred = _predictions(params, spec, task.test_set.inputs)
    return float((pred == task.target_label).mean())


# ---------------------------------------------------------------------------
# One round
# ---------------------------------------------------------------------------

def _sample_clients(state: SimState, config: ExperimentConfig,
                    rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Stratified sampling: exactly round(tau * fraction) malicious clients."""
    malicious_pool = [s.client_id for s in state.shards if s.is_malicious]
    benign_pool = [s.client_id for s in state.shards if not s.is_malicious]
    m = config.malicious_per_round()
    if m > len(malicious_pool):
        raise ValueError(f"need {m} malicious clients but only "
                         f"{len(malicious_pool)} exist in the population")
    chosen_mal = sorted(rng.choice(malicious_pool, size=m, replace=False).tolist()) if m else []
    chosen_ben = sorted(rng.choice(benign_pool, size=config.tau - m,
                                   replace=False).tolist())
    return chosen_mal + chosen_ben, chosen_mal


def _train_updates(state: SimState, config: ExperimentConfig,
                   sampled: list[int], malicious: set[int]) -> list[np.ndarray]:
    hyper = config.local_hyper(state.round_idx)
    attack = config.attack
    adaptive = attack is not None and attack.kind in ADAPTIVE_KINDS
    if attack is not None and not adaptive:
        # backdoor attackers may run their own local schedule (threat model:
        # malicious clients control local epochs and learning rate)
        mal_hyper = replace(
            hyper,
            lr=hyper.lr * attack.lr_scale,
            epochs=attack.local_epochs if attack.local_epochs is not None
            else hyper.epochs)
    else:
        mal_hyper = hyper
    updates = []
    for cid in sampled:
        shard = state.shards[cid]
        seed = _client_seed(config.seed, state.round_idx, cid)
        if cid not in malicious or adaptive:
            # adaptive attackers train on clean data first; their updates
            # feed the leader's estimate and get replaced afterwards
            if hyper.epochs == 0:
                updates.append(np.zeros_like(state.global_params))
                continue
            updates.append(train_local(state.global_params, state.spec, shard,
                                       hyper, seed, poisoned=False))
        elif attack.mode == "smp":
            updates.append(smp_train(state.global_params, state.spec, shard,
                                     attack.rho1, attack.rho2, mal_hyper, seed))
        elif mal_hyper.epochs == 0:
            updates.append(np.zeros_like(state.global_params))
        else:
            u = train_local(state.global_params, state.spec, shard, mal_hyper,
                            seed, poisoned=True)
            if attack.mode == "pgd":
                u = pgd_project(u, attack.epsilon)
            updates.append(u)
    if attack is not None and attack.replace_scale is not None and not adaptive:
        updates = [u * attack.replace_scale if cid in malicious else u
                   for cid, u in zip(sampled, updates)]
    return updates


def _apply_adaptive(state: SimState, config: ExperimentConfig,
                    sampled: list[int], malicious: set[int],
                    updates: list[np.ndarray]) -> tuple[list[np.ndarray], float, bool]:
    """Full-knowledge collusion: craft u_g - lambda*s, binary-search lambda."""
    attack = config.attack
    f = len(malicious)
    mal_pos = [i for i, cid in enumerate(sampled) if cid in malicious]
    ben_pos = [i for i, cid in enumerate(sampled) if cid not in malicious]
    u_g = np.mean(updates, axis=0)
    benign_updates = [updates[i] for i in ben_pos]

    if attack.kind == "adaptive_krum":
        def accepts(lam: float) -> bool:
            return krum_accepts(benign_updates, f, adaptive_craft(u_g, lam))
    else:
        probe = make_probe(state.spec, config.aggregator.probe,
                           config.aggregator.probe_seed)

        def accepts(lam: float) -> bool:
            return probe_screen_accepts(
                benign_updates, f, adaptive_craft(u_g, lam), state.spec, probe,
                min_cluster_size=config.aggregator.min_cluster_size,
                min_samples=config.aggregator.min_samples)

    lam, accepted, _ = binary_search_lambda(accepts, floor=config.adaptive_floor)
    crafted = adaptive_craft(u_g, lam)
    out = list(updates)
    for i in mal_pos:
        out[i] = crafted.copy()
    return out, lam, accepted


def run_round(state: SimState, config: ExperimentConfig) -> tuple[SimState, RoundReport]:
    """Execute one global iteration and report its metrics.

    The crafted/collected updates are ordered with malicious clients first,
    matching the adaptive-attack convention that attacker indices are
    0..f-1.
    """
    t = state.round_idx
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, t, 0xC0FFEE)))
    sampled, malicious_list = _sample_clients(state, config, rng)
    malicious = set(malicious_list)

    updates = _train_updates(state, config, sampled, malicious)
    adaptive_lambda = adaptive_accepted = None
    if config.attack is not None and config.attack.kind in ADAPTIVE_KINDS and malicious:
        updates, adaptive_lambda, adaptive_accepted = _apply_adaptive(
            state, config, sampled, malicious, updates)

    agg_cfg = replace(config.aggregator, eta_g=1.0)
    result: AggregationResult = run_aggregator(
        agg_cfg, updates, spec=state.spec, round_idx=t,
        global_model=state.global_params)

    new_params = state.global_params + config.global_lr * result.global_update
    new_state = replace(state, global_params=new_params, round_idx=t + 1)

    report = RoundReport(
        iteration=t,
        test_error_rate=testing_error_rate(new_params, state.spec, state.test_set),
        attack_success_rate=(attack_success_rate(new_params, state.spec, state.backdoor)
                             if state.backdoor is not None else None),
        sampled_ids=sampled,
        malicious_ids=malicious_list,
        preserved_ids=sorted(sampled[i] for i in result.preserved_ids),
        screening_seconds=(result.screening_seconds
                           if config.measure_screening_time else 0.0),
        adaptive_lambda=adaptive_lambda,
        adaptive_accepted=adaptive_accepted,
        diagnostics={"updates": updates, **result.diagnostics},
    )
    return new_state, report


# ---------------------------------------------------------------------------
# Whole experiments
# ---------------------------------------------------------------------------

def run_experiment(state: SimState, config: ExperimentConfig,
                   sink=None, keep_diagnostics: bool = False) -> tuple[SimState, list[RoundReport]]:
    """Run config.global_iterations rounds; stream reports to `sink`.

    Unless keep_diagnostics is set, bulky per-round diagnostics (raw updates,
    probe outputs) are dropped after each round to keep memory flat.
    """
    reports = []
    for _ in range(config.global_iterations):
        state, report = run_round(state, config)
        if not keep_diagnostics:
            report.diagnostics = {}
        if sink is not None:
            sink(report)
        reports.append(report)
    return state, reports


def screening_benchmark(kinds: list[str], tau: int, zeta: int, num_classes: int,
                        repeats: int = 5, seed: int = 0,
                        f: int | None = None) -> dict[str, dict[str, float]]:
    """Screening wall time per rule on synthetic random updates.

    The probe screen runs against a dense single-layer network sized so its
    parameter count is exactly zeta (zeta must be divisible by num_classes).
    """
    if repeats < 3:
        raise ValueError("need at least 3 repeats")
    spec = bench_spec(zeta, num_classes)
    rng = np.random.default_rng(seed)
    if f is None:
        f = max(0, round(0.2 * tau))
    table: dict[str, dict[str, float]] = {}
    for kind in kinds:
        cfg = AggregatorConfig(kind=kind, f=f)
        times = []
        for _ in range(repeats):
            updates = [rng.normal(0, 1e-2, zeta) for _ in range(tau)]
            result = run_aggregator(cfg, updates, spec=spec, round_idx=0)
            times.append(result.screening_seconds)
        table[kind] = {"mean_seconds": float(np.mean(times)),
                       "std_seconds": float(np.std(times))}
    return table


def bench_spec(zeta: int, num_classes: int) -> nn.NetworkSpec:
    if zeta % num_classes:
        raise ValueError("zeta must be divisible by num_classes")
    in_dim = zeta // num_classes - 1
    if in_dim < 1:
        raise ValueError("zeta too small")
    spec = nn.linear_net((1, 1, in_dim), num_classes)
    assert nn.param_count(spec) == zeta
    return spec


def _client_seed(master: int, round_idx: int, client_id: int) -> int:
    ss = np.random.SeedSequence((master, round_idx, client_id, 0x7EA1))
    return int(ss.generate_state(1)[0])
