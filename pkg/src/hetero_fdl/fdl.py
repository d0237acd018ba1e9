"""Round-synchronous decentralized training engine.

Each worker i holds a model copy x_i, a tracking variable y_i whose network
average always equals the average gradient estimate, and a variance-reduced
gradient estimate g_i that is refreshed with an exact full local gradient
every q rounds and corrected with minibatch gradient differences in between.
One round:

    x_i  <-  sum_j W_ij x_j - gamma * y_i          (consensus update)
    g_i  <-  full or recursively corrected estimate at the new iterate
    y_i  <-  sum_j W_ij y_j + g_i_new - g_i_old    (gradient tracking)

All cross-worker reductions happen in worker-index order, so runs are
bit-reproducible; workers may still be evaluated in parallel threads.
The non-exchanging variant (every worker descends alone) and the pooled
single-worker variant double as the local / fusion-center baselines.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import WorkbenchError
from .objectives import LocalObjective
from .topology import ConsensusMatrix, step_size_bound


class LengthMismatch(WorkbenchError):
    pass


class EmptyBatch(WorkbenchError):
    pass


class ConfigError(WorkbenchError):
    pass


class StepSizeExceedsBound(WorkbenchError):
    pass


@dataclass
class WorkerState:
    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    objective: LocalObjective
    rng: np.random.Generator


def init(objectives: Sequence[LocalObjective], x0: np.ndarray, seed: int = 0) -> list:
    """Give every worker the shared start point and its exact local gradient."""
    x0 = np.asarray(x0, dtype=np.float64)
    states = []
    seeds = np.random.SeedSequence(seed).spawn(len(objectives))
    for obj, ss in zip(objectives, seeds):
        if obj.dim != x0.size:
            raise LengthMismatch(f"objective dimension {obj.dim} != start point length {x0.size}")
        g0 = obj.gradient(x0)
        states.append(WorkerState(x=x0.copy(), y=g0.copy(), g=g0.copy(), objective=obj, rng=np.random.default_rng(ss)))
    return states


def consensus_step(states: Sequence[WorkerState], W: Optional[ConsensusMatrix], gamma: float) -> np.ndarray:
    """New x per worker from a synchronous snapshot: mix then descend along y."""
    X = np.stack([s.x for s in states])
    Y = np.stack([s.y for s in states])
    mixed = W.entries @ X if W is not None else X
    return mixed - gamma * Y


def spider_gradient(
    state: WorkerState,
    x_new: np.ndarray,
    x_old: np.ndarray,
    k: int,
    q: int,
    batch_size: int,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Gradient estimate for round k+1.

    Rounds with k+1 = 0 (mod q) take the exact full local gradient at the new
    iterate; other rounds correct the previous estimate with one minibatch of
    per-sample gradient differences, the batch drawn once and reused at both
    evaluation points. A batch covering the whole shard uses every index
    exactly once, so the correction telescopes exactly.
    """
    if q < 1:
        raise ConfigError(f"q must be >= 1, got {q}")
    if batch_size < 1:
        raise EmptyBatch(f"batch size must be >= 1, got {batch_size}")
    obj = state.objective
    if (k + 1) % q == 0:
        return obj.gradient(x_new)
    if batch_size >= obj.n:
        subset = np.arange(obj.n)
    else:
        rng = rng if rng is not None else state.rng
        subset = rng.integers(0, obj.n, size=batch_size)
    return state.g + obj.gradient(x_new, subset) - obj.gradient(x_old, subset)


def tracking_step(states: Sequence[WorkerState], W: Optional[ConsensusMatrix], g_new: np.ndarray) -> np.ndarray:
    """New y per worker; preserves mean(y) = mean(g) exactly."""
    Y = np.stack([s.y for s in states])
    G_old = np.stack([s.g for s in states])
    mixed = W.entries @ Y if W is not None else Y
    return mixed + g_new - G_old


def stationarity(states: Sequence[WorkerState], global_grad: Optional[np.ndarray] = None) -> float:
    """Gradient norm squared at the worker average plus mean consensus error."""
    X = np.stack([s.x for s in states])
    x_bar = X.mean(axis=0)
    if global_grad is None:
        global_grad = np.mean([s.objective.gradient(x_bar) for s in states], axis=0)
    grad_norm_sq = float(global_grad @ global_grad)
    consensus = float(((X - x_bar) ** 2).sum(axis=1).mean())
    return grad_norm_sq + consensus


@dataclass
class RoundRecord:
    round: int
    losses: np.ndarray
    consensus_error: float
    grad_norm_sq: float
    stationarity: float
    tracking_gap: float
    wall_clock: float
    recall: list = field(default_factory=list)  # per worker, None off eval rounds
    auc: list = field(default_factory=list)


@dataclass
class RunResult:
    records: list
    final_x: np.ndarray  # (m, p)
    gamma: float
    q: int
    batch_sizes: list
    step_bound: Optional[float]
    strict: bool


def _diagnostics(states, pool) -> tuple:
    X = np.stack([s.x for s in states])
    x_bar = X.mean(axis=0)
    grads = _map_workers(pool, lambda s: s.objective.gradient(x_bar), states)
    g_bar = np.mean(grads, axis=0)
    grad_norm_sq = float(g_bar @ g_bar)
    consensus = float(((X - x_bar) ** 2).sum(axis=1).mean())
    losses = np.array(_map_workers(pool, lambda s: s.objective.value(s.x), states))
    Y = np.stack([s.y for s in states])
    G = np.stack([s.g for s in states])
    gap = float(np.max(np.abs(Y.mean(axis=0) - G.mean(axis=0))))
    return losses, consensus, grad_norm_sq, grad_norm_sq + consensus, gap


def _map_workers(pool, fn, states):
    if pool is None:
        return [fn(s) for s in states]
    return list(pool.map(fn, states))


def _thread_count(threads: Optional[int], m: int) -> int:
    if threads is None:
        threads = int(os.environ.get("HETERO_FDL_THREADS", "1") or "1")
    return max(1, min(threads, m))


def run(
    mode: str,
    objectives: Sequence[LocalObjective],
    x0: np.ndarray,
    W: Optional[ConsensusMatrix] = None,
    gamma: float | str = "auto",
    q: int | str = "auto",
    batch_size: int | str = "auto",
    rounds: int = 100,
    seed: int = 0,
    strict_step_size: bool = False,
    lipschitz: Optional[float] = None,
    evaluator: Optional[Callable] = None,
    diag_every: int = 1,
    eval_every: int = 25,
    threads: Optional[int] = None,
) -> RunResult:
    """Train per `mode` and emit per-round records.

    * ``fdl``    -- the decentralized algorithm over a validated mixing matrix.
    * ``local``  -- no exchange; every worker descends on its own shard.
    * ``global`` -- one pooled worker (callers pass the merged objective).

    ``gamma="auto"`` takes 0.9x the step-size bound (needs `lipschitz`). With
    `strict_step_size`, any gamma above the bound raises.
    """
    if mode not in ("fdl", "local", "global"):
        raise ConfigError(f"mode must be fdl|local|global, got {mode!r}")
    m = len(objectives)
    if m == 0:
        raise ConfigError("need at least one worker objective")
    if mode == "global" and m != 1:
        raise ConfigError("global mode expects exactly one pooled objective")
    mixing = None
    lam = 0.0
    if mode == "fdl":
        if W is None:
            raise ConfigError("fdl mode needs a consensus matrix")
        if W.m != m:
            raise ConfigError(f"consensus matrix is {W.m}x{W.m} but there are {m} workers")
        if m > 1:
            mixing = W
        lam = W.lam

    bound = None
    if lipschitz is not None:
        bound = step_size_bound(lipschitz, lam, m)
    if gamma == "auto":
        if bound is None:
            raise ConfigError("gamma='auto' needs a Lipschitz constant")
        gamma = 0.9 * bound
    gamma = float(gamma)
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    if strict_step_size:
        if bound is None:
            raise ConfigError("strict step-size mode needs a Lipschitz constant")
        if gamma > bound * (1.0 + 1e-12):
            raise StepSizeExceedsBound(f"gamma {gamma!r} exceeds the bound {bound!r}")

    n_max = max(obj.n for obj in objectives)
    if q == "auto":
        q = int(math.ceil(math.sqrt(n_max)))
    q = int(q)
    batch_sizes = (
        [int(math.ceil(math.sqrt(obj.n))) for obj in objectives]
        if batch_size == "auto"
        else [int(batch_size)] * m
    )

    states = init(objectives, x0, seed=seed)
    pool = None
    n_threads = _thread_count(threads, m)
    if n_threads > 1:
        pool = ThreadPoolExecutor(max_workers=n_threads)

    records: list = []
    t_start = time.perf_counter()

    def record_round(k: int):
        if k % diag_every != 0 and k != rounds:
            return
        losses, cons, gns, stat, gap = _diagnostics(states, pool)
        rec = RoundRecord(
            round=k,
            losses=losses,
            consensus_error=cons,
            grad_norm_sq=gns,
            stationarity=stat,
            tracking_gap=gap,
            wall_clock=time.perf_counter() - t_start,
        )
        if evaluator is not None and eval_every > 0 and (k % eval_every == 0 or k == rounds):
            scores = _map_workers(pool, lambda s_i: evaluator(s_i[0], s_i[1].x), list(enumerate(states)))
            rec.recall = [r for r, _ in scores]
            rec.auc = [a for _, a in scores]
        records.append(rec)

    try:
        for k in range(rounds):
            record_round(k)
            X_old = np.stack([s.x for s in states])
            X_new = consensus_step(states, mixing, gamma)
            g_new = np.stack(
                _map_workers(
                    pool,
                    lambda item: spider_gradient(item[1], X_new[item[0]], X_old[item[0]], k, q, batch_sizes[item[0]]),
                    list(enumerate(states)),
                )
            )
            Y_new = tracking_step(states, mixing, g_new)
            for i, s in enumerate(states):
                s.x = X_new[i]
                s.y = Y_new[i]
                s.g = g_new[i]
        record_round(rounds)
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(
        records=records,
        final_x=np.stack([s.x for s in states]),
        gamma=gamma,
        q=q,
        batch_sizes=batch_sizes,
        step_bound=bound,
        strict=strict_step_size,
    )


# ---------------------------------------------------------------------------
# metrics.csv


METRICS_COLUMNS = ("round", "mode", "worker", "loss", "consensus_error", "grad_norm_sq", "stationarity", "recall", "auc")


def write_metrics(records: Sequence[RoundRecord], mode: str, path) -> None:
    """One row per (round, worker); ranking columns are empty off eval rounds."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for rec in records:
            for i, loss in enumerate(rec.losses):
                recall = rec.recall[i] if rec.recall else None
                auc_v = rec.auc[i] if rec.auc else None
                fh.write(
                    ",".join(
                        [
                            str(rec.round),
                            mode,
                            str(i),
                            repr(float(loss)),
                            repr(rec.consensus_error),
                            repr(rec.grad_norm_sq),
                            repr(rec.stationarity),
                            "" if recall is None else repr(float(recall)),
                            "" if auc_v is None else repr(float(auc_v)),
                        ]
                    )
                    + "\n"
                )


def read_metrics(path) -> list:
    import csv as _csv

    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(_csv.DictReader(fh))


def fit_decay_slope(records: Sequence[RoundRecord], t_min: int = 100, t_max: int = 2000) -> float:
    """Log-log slope of the running-average stationarity over rounds in
    [t_min, t_max]; the empirical face of the O(1/T) guarantee."""
    stats = np.array([r.stationarity for r in records if r.round < t_max + 1])
    rounds_idx = np.array([r.round for r in records if r.round < t_max + 1])
    order = np.argsort(rounds_idx)
    stats = stats[order]
    running = np.cumsum(stats) / np.arange(1, len(stats) + 1)
    ts = rounds_idx[order] + 1
    window = (ts >= t_min) & (ts <= t_max)
    if window.sum() < 2:
        raise ConfigError("not enough rounds recorded to fit a slope")
    slope, _ = np.polyfit(np.log(ts[window]), np.log(np.maximum(running[window], 1e-300)), 1)
    return float(slope)
