"""Aggregation rules mapping a round's collected updates to one global update.

Seven rules: plain averaging (fedavg), norm clipping (ndc), sign averaging
(rsa), smoothed geometric median (rfa), krum, multi-krum, and the
softmax-probe screen (load each update as network parameters, forward a
fixed probe matrix, cluster the softmax outputs, keep the major cluster).

Every rule reports the wall time of its screening phase separately from the
final combine, so screening costs are comparable across rules; fedavg has no
screening phase and reports exactly zero.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import clustering
from .nn import NetworkSpec, batch_forward, param_count


@dataclass
class AggregatorConfig:
    kind: str = "fedavg"
    # ndc
    delta: float = 2.0
    # rsa (beta_r = rsa_lr * rsa_decay ** t, evaluated by the caller per round)
    rsa_lr: float = 5e-5
    rsa_decay: float = 0.998
    # rfa
    v: float = 0.1
    mu: float = 1e-5
    weiszfeld_rounds: int = 500
    # krum family: assumed byzantine count
    f: int = 0
    # probe screen
    probe: str = "ones"            # "ones" | "random"
    probe_seed: int = 0
    min_cluster_size: int = 0      # 0 = majority size (tau//2 + 1)
    min_samples: int = 1
    sum_preserved: bool = False    # literal sum instead of mean over survivors
    no_cluster_policy: str = "component"   # "component" | "keep_all"
    cut_factor: float = 3.0
    probe_full_model: bool = False  # experimental: probe w_g + u instead of u
    eta_g: float = 1.0

    KINDS = ("fedavg", "ndc", "rsa", "rfa", "krum", "multikrum", "softmax_probe")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown aggregator kind {self.kind!r}; "
                             f"expected one of {self.KINDS}")
        if self.delta <= 0 or self.v <= 0 or self.mu <= 0:
            raise ValueError("delta, v and mu must be positive")
        if self.weiszfeld_rounds < 1:
            raise ValueError("weiszfeld_rounds must be >= 1")
        if self.f < 0:
            raise ValueError("f must be nonnegative")
        if self.min_cluster_size == 1 or self.min_cluster_size < 0:
            raise ValueError("min_cluster_size must be 0 (majority) or >= 2")


@dataclass
class AggregationResult:
    global_update: np.ndarray
    preserved_ids: list[int]
    screening_seconds: float = 0.0
    diagnostics: dict = field(default_factory=dict)


def _as_matrix(updates) -> np.ndarray:
    if len(updates) == 0:
        raise ValueError("no updates to aggregate")
    if isinstance(updates, np.ndarray) and updates.dtype == np.float64:
        mat = updates
    else:
        mat = np.asarray(updates, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("updates must be equal-length vectors")
    return mat


# ---------------------------------------------------------------------------
# Plain and clipped averaging
# ---------------------------------------------------------------------------

def fedavg(updates: list[np.ndarray], weights: np.ndarray | None = None) -> np.ndarray:
    """Weighted mean of the updates (uniform when weights is None)."""
    mat = _as_matrix(updates)
    if weights is None:
        return mat.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(mat) or np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative and sum to > 0")
    return (w[:, None] * mat).sum(axis=0) / w.sum()


def ndc_clip(update: np.ndarray, delta: float) -> np.ndarray:
    """Rescale the update so its L2 norm is at most delta."""
    norm = float(np.linalg.norm(update))
    return update / max(1.0, norm / delta)


def ndc(updates: list[np.ndarray], delta: float = 2.0) -> np.ndarray:
    mat = _as_matrix(updates)
    norms = np.linalg.norm(mat, axis=1)
    scale = np.maximum(1.0, norms / delta)
    return (mat / scale[:, None]).mean(axis=0)


def rsa(updates: list[np.ndarray], beta_r: float) -> np.ndarray:
    """Direction-only aggregation: beta_r * sum of elementwise signs.

    sign(0) is pinned to 0 for determinism.
    """
    if beta_r <= 0:
        raise ValueError("beta_r must be positive")
    mat = _as_matrix(updates)
    return beta_r * np.sign(mat).sum(axis=0)


# ---------------------------------------------------------------------------
# Smoothed geometric median
# ---------------------------------------------------------------------------

def rfa(updates: list[np.ndarray], weights: np.ndarray | None = None,
        v: float = 0.1, mu: float = 1e-5, max_rounds: int = 500) -> np.ndarray:
    """Weighted geometric median via the smoothed Weiszfeld iteration.

    q_i = p_i / max(v, ||z - u_i||); z <- sum q_i u_i / sum q_i, starting
    from the weighted mean, until the step is below mu or max_rounds hit.
    """
    mat = _as_matrix(updates)
    n = len(mat)
    p = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(p) != n or np.any(p <= 0):
        raise ValueError("weights must be positive")
    z = (p[:, None] * mat).sum(axis=0) / p.sum()
    for _ in range(max_rounds):
        dist = np.linalg.norm(mat - z, axis=1)
        q = p / np.maximum(v, dist)
        z_next = (q[:, None] * mat).sum(axis=0) / q.sum()
        step = float(np.linalg.norm(z_next - z))
        z = z_next
        if step < mu:
            break
    return z


def rfa_objective(z: np.ndarray, updates: list[np.ndarray],
                  weights: np.ndarray | None = None, v: float = 0.1) -> float:
    """The smoothed objective sum_i p_i * max(v, ||z - u_i||)."""
    mat = _as_matrix(updates)
    n = len(mat)
    p = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    return float((p * np.maximum(v, np.linalg.norm(mat - z, axis=1))).sum())


# ---------------------------------------------------------------------------
# Krum family
# ---------------------------------------------------------------------------

def _krum_scores(dist2: np.ndarray, k: int) -> np.ndarray:
    """score(i) = sum of squared distances to i's k nearest other updates."""
    tau = len(dist2)
    scores = np.empty(tau)
    for i in range(tau):
        others = np.delete(dist2[i], i)
        others.sort()
        scores[i] = others[:k].sum()
    return scores


def _check_krum_args(tau: int, f: int):
    if tau < f + 3:
        raise ValueError(f"krum needs tau >= f + 3 (got tau={tau}, f={f})")


def krum(updates: list[np.ndarray], f: int) -> tuple[np.ndarray, np.ndarray]:
    """Select the update closest to its tau-f-2 nearest neighbours.

    Returns (selected update, per-client scores); ties go to the lowest
    index.
    """
    mat = _as_matrix(updates)
    _check_krum_args(len(mat), f)
    d = clustering.pairwise_distances(mat)
    scores = _krum_scores(d * d, len(mat) - f - 2)
    return mat[int(np.argmin(scores))].copy(), scores


def multi_krum(updates: list[np.ndarray], f: int) -> np.ndarray:
    """Iterated krum: select, remove, repeat until tau-f-2 survive; mean them."""
    selected, _ = multi_krum_select(updates, f)
    mat = _as_matrix(updates)
    return mat[selected].mean(axis=0)


def multi_krum_select(updates: list[np.ndarray], f: int) -> tuple[list[int], np.ndarray]:
    """Indices multi-krum keeps, in selection order, plus first-round scores.

    The pairwise distances are computed once; each iteration rescores the
    remaining updates with the original tau-f-2 neighbour count (capped by
    how many others remain), then removes the winner. Keeping the neighbour
    count fixed preserves permutation invariance of the selected set: a
    shrinking count would always end at one nearest neighbour, where the
    closest remaining pair ties by construction.
    """
    mat = _as_matrix(updates)
    tau = len(mat)
    _check_krum_args(tau, f)
    k = tau - f - 2
    d2 = clustering.pairwise_distances(mat) ** 2
    remaining = list(range(tau))
    selected: list[int] = []
    first_scores: np.ndarray | None = None
    while len(selected) < tau - f - 2:
        sub = d2[np.ix_(remaining, remaining)]
        scores = _krum_scores(sub, min(k, len(remaining) - 1))
        if first_scores is None:
            first_scores = scores.copy()
        pick = remaining[int(np.argmin(scores))]
        selected.append(pick)
        remaining.remove(pick)
    return selected, first_scores


# ---------------------------------------------------------------------------
# Softmax-probe screening
# ---------------------------------------------------------------------------

def majority_cluster_size(tau: int) -> int:
    """Smallest cluster size that certifies a benign majority."""
    return tau // 2 + 1


def make_probe(spec: NetworkSpec, kind: str = "ones", seed: int = 0) -> np.ndarray:
    """The fixed examination input, shaped like the network input."""
    if kind == "ones":
        return np.ones(spec.input_shape, dtype=np.float64)
    if kind == "random":
        return np.random.default_rng(seed).normal(size=spec.input_shape)
    raise ValueError(f"unknown probe kind {kind!r}")


def probe_response(update: np.ndarray, spec: NetworkSpec,
                   probe: np.ndarray) -> np.ndarray:
    """Softmax output of the network whose parameters ARE the update.

    The update vector itself is loaded as the model (not added to any
    global model), then the probe input is pushed through.
    """
    update = np.asarray(update, dtype=np.float64)
    if update.size != param_count(spec):
        raise ValueError(f"update length {update.size} != {param_count(spec)}")
    return batch_forward(update, spec, np.asarray(probe)[None])[0]


def probe_responses(updates, spec: NetworkSpec,
                    probe: np.ndarray) -> np.ndarray:
    # batching would need per-sample parameters, so loop; tau is small and
    # each forward is one pass over the update vector
    mat = _as_matrix(updates)
    probe = np.asarray(probe, dtype=np.float64)[None]
    return np.array([batch_forward(u, spec, probe)[0] for u in mat])


def probe_aggregate(updates: list[np.ndarray], spec: NetworkSpec,
                    probe: np.ndarray | None = None, eta_g: float = 1.0,
                    min_cluster_size: int = 2, min_samples: int = 1,
                    sum_preserved: bool = False,
                    no_cluster_policy: str = "component",
                    cut_factor: float = 3.0,
                    global_model: np.ndarray | None = None) -> AggregationResult:
    """Screen updates by clustering their probe responses; keep the majority.

    min_cluster_size = 0 derives the majority size tau//2 + 1: under the
    sub-50% threat model only a cluster holding most of the round can be
    trusted, and smaller spurious clusters (including a block of identical
    crafted updates) can never become the verdict.

    Density clustering has no verdict on a uniform response cloud (every
    point ends up noise). The no-cluster policy then decides:
    - "component": keep the largest mutual-reachability core component if it
      holds a strict majority of the updates, otherwise keep everyone;
    - "keep_all": keep everyone, flagged in diagnostics.
    """
    mat = _as_matrix(updates)
    if len(mat) < 2:
        raise ValueError("probe screening needs at least two updates")
    if no_cluster_policy not in ("component", "keep_all"):
        raise ValueError(f"unknown no_cluster_policy {no_cluster_policy!r}")
    if probe is None:
        probe = make_probe(spec)
    mcs = majority_cluster_size(len(mat)) if min_cluster_size == 0 else min_cluster_size
    loaded = mat if global_model is None else mat + global_model
    t0 = time.perf_counter()
    slous = probe_responses(loaded, spec, probe)
    result = clustering.hdbscan(slous, min_cluster_size=mcs,
                                min_samples=min_samples)
    all_noise = result.major is None
    verdict = "cluster"
    if not all_noise:
        preserved = [int(i) for i in result.major]
    else:
        preserved = list(range(len(mat)))
        verdict = "keep_all"
        if no_cluster_policy == "component":
            core = clustering.reachability_core_component(
                slous, min_samples=min_samples, cut_factor=cut_factor)
            if len(core) > len(mat) / 2:
                preserved = [int(i) for i in core]
                verdict = "core_component"
    screening = time.perf_counter() - t0
    kept = mat[preserved]
    combined = kept.sum(axis=0) if sum_preserved else kept.mean(axis=0)
    return AggregationResult(
        global_update=eta_g * combined,
        preserved_ids=preserved,
        screening_seconds=screening,
        diagnostics={
            "slous": slous,
            "cluster_labels": result.labels,
            "all_noise": all_noise,
            "screen_verdict": verdict,
        },
    )


# ---------------------------------------------------------------------------
# Uniform dispatch used by the simulator and benchmarks
# ---------------------------------------------------------------------------

def run_aggregator(cfg: AggregatorConfig, updates: list[np.ndarray],
                   spec: NetworkSpec | None = None, round_idx: int = 0,
                   global_model: np.ndarray | None = None) -> AggregationResult:
    """Apply the configured rule; time the screening phase only."""
    mat = _as_matrix(updates)
    tau = len(mat)
    everyone = list(range(tau))

    if cfg.kind == "fedavg":
        return AggregationResult(fedavg(list(mat)), everyone, 0.0)

    if cfg.kind == "ndc":
        t0 = time.perf_counter()
        norms = np.linalg.norm(mat, axis=1)
        scale = np.maximum(1.0, norms / cfg.delta)
        clipped = mat / scale[:, None]
        dt = time.perf_counter() - t0
        return AggregationResult(clipped.mean(axis=0), everyone, dt,
                                 {"clip_scale": scale})

    if cfg.kind == "rsa":
        beta = cfg.rsa_lr * cfg.rsa_decay ** round_idx
        t0 = time.perf_counter()
        signs = np.sign(mat)
        dt = time.perf_counter() - t0
        return AggregationResult(beta * signs.sum(axis=0), everyone, dt)

    if cfg.kind == "rfa":
        t0 = time.perf_counter()
        z = rfa(list(mat), v=cfg.v, mu=cfg.mu, max_rounds=cfg.weiszfeld_rounds)
        dt = time.perf_counter() - t0
        return AggregationResult(z, everyone, dt)

    if cfg.kind == "krum":
        t0 = time.perf_counter()
        selected, scores = krum(list(mat), cfg.f)
        idx = int(np.argmin(scores))
        dt = time.perf_counter() - t0
        return AggregationResult(selected, [idx], dt, {"scores": scores})

    if cfg.kind == "multikrum":
        t0 = time.perf_counter()
        chosen, scores = multi_krum_select(list(mat), cfg.f)
        dt = time.perf_counter() - t0
        return AggregationResult(mat[chosen].mean(axis=0), sorted(chosen), dt,
                                 {"scores": scores})

    if cfg.kind == "softmax_probe":
        if spec is None:
            raise ValueError("softmax_probe needs the network spec")
        probe = make_probe(spec, cfg.probe, cfg.probe_seed)
        return probe_aggregate(
            mat, spec, probe, eta_g=cfg.eta_g,
            min_cluster_size=cfg.min_cluster_size, min_samples=cfg.min_samples,
            sum_preserved=cfg.sum_preserved,
            no_cluster_policy=cfg.no_cluster_policy, cut_factor=cfg.cut_factor,
            global_model=global_model if cfg.probe_full_model else None)

    raise ValueError(f"unknown aggregator kind {cfg.kind!r}")
