"""Losses, ranking metrics and worker-local objectives.

A local objective owns a sample list and exposes ``value(x, subset)`` /
``gradient(x, subset)`` closures over a flat parameter vector, where the
full-set value is the weighted three-task reconstruction loss and a subset
gives the corresponding minibatch mean. Everything is deterministic given
(parameters, subset, construction seed), which the variance-reduced gradient
estimator relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import hgat, tape
from .ehr_graph import EdgeKind, HeteroGraph, MaskedSplit, NodeKind
from .errors import WorkbenchError
from .features import FeatureTable


class LabelOutOfRange(WorkbenchError):
    pass


class AllWeightsZero(WorkbenchError):
    pass


class EmptyPositives(WorkbenchError):
    pass


class DegenerateLabels(WorkbenchError):
    pass


class EmptySubset(WorkbenchError):
    pass


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """-log softmax(logits)[label], log-sum-exp stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    if not (0 <= label < logits.shape[-1]):
        raise LabelOutOfRange(f"label {label} for {logits.shape[-1]} classes")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def bpr_loss(score_pos: float, score_neg: float) -> float:
    """-ln sigmoid(score_pos - score_neg), softplus-stabilized."""
    return float(np.logaddexp(0.0, -(score_pos - score_neg)))


def combined_loss(ds_losses, ss_losses, pd_losses, weights) -> float:
    """Weighted sum of the three per-task batch means (empty task counts 0)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (3,) or np.any(weights < 0):
        raise AllWeightsZero("weights must be three non-negative reals")
    if not np.any(weights > 0):
        raise AllWeightsZero("at least one loss weight must be positive")
    total = 0.0
    for w, losses in zip(weights, (ds_losses, ss_losses, pd_losses)):
        losses = np.asarray(losses, dtype=np.float64)
        if losses.size:
            total += w * float(losses.mean())
    return total


# ---------------------------------------------------------------------------
# ranking metrics


def recall_at_mask(ranked: Sequence[int], positives, cutoff: Optional[int] = None) -> float:
    positives = set(positives)
    if not positives:
        raise EmptyPositives("no ground-truth doctors to recall")
    k = len(positives) if cutoff is None else cutoff
    hit = len(set(ranked[:k]) & positives)
    return hit / len(positives)


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Rank-based Mann-Whitney form; agrees with brute-force pair counting.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# local objectives


class LocalObjective:
    """Contract: `n` samples, `dim` parameters, deterministic value/gradient."""

    n: int
    dim: int

    def value(self, x: np.ndarray, subset: Optional[np.ndarray] = None) -> float:
        raise NotImplementedError

    def gradient(self, x: np.ndarray, subset: Optional[np.ndarray] = None) -> np.ndarray:
        raise NotImplementedError

    def _resolve_subset(self, subset) -> np.ndarray:
        if subset is None:
            return np.arange(self.n)
        subset = np.asarray(subset, dtype=np.int64)
        if subset.size == 0:
            raise EmptySubset("gradient over an empty sample subset")
        if subset.min() < 0 or subset.max() >= self.n:
            raise EmptySubset(f"subset indices must lie in [0, {self.n})")
        return subset


class QuadraticObjective(LocalObjective):
    """f(x; z_j) = 0.5 ||x - z_j||^2; the closed-form testbed."""

    def __init__(self, targets: np.ndarray):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.n, self.dim = self.targets.shape

    def value(self, x, subset=None):
        idx = self._resolve_subset(subset)
        diffs = x[None, :] - self.targets[idx]
        return float(0.5 * (diffs**2).sum(axis=1).mean())

    def gradient(self, x, subset=None):
        idx = self._resolve_subset(subset)
        return x - self.targets[idx].mean(axis=0)

    def lipschitz_bound(self) -> float:
        return 1.0

    def minimizer(self) -> np.ndarray:
        return self.targets.mean(axis=0)


class LogisticRegularizedObjective(LocalObjective):
    """Binary logistic loss plus a smooth non-convex penalty.

    f(x; (a, b)) = log(1 + exp(-b a.x)) + rho * sum_d x_d^2 / (1 + x_d^2)

    The penalty is bounded with curvature in [-rho/2 * 4, 2 rho]; a valid
    gradient-Lipschitz bound is 0.25 * lambda_max(A^T A / n) + 2 rho.
    """

    def __init__(self, features: np.ndarray, labels: np.ndarray, rho: float = 0.1):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.rho = float(rho)
        self.n, self.dim = self.features.shape

    def value(self, x, subset=None):
        idx = self._resolve_subset(subset)
        margins = -self.labels[idx] * (self.features[idx] @ x)
        reg = self.rho * float((x**2 / (1.0 + x**2)).sum())
        return float(np.logaddexp(0.0, margins).mean() + reg)

    def gradient(self, x, subset=None):
        idx = self._resolve_subset(subset)
        a, b = self.features[idx], self.labels[idx]
        sig = 1.0 / (1.0 + np.exp(np.clip(b * (a @ x), -500, 500)))
        grad_data = (-(b * sig)[:, None] * a).mean(axis=0)
        grad_reg = self.rho * 2.0 * x / (1.0 + x**2) ** 2
        return grad_data + grad_reg

    def lipschitz_bound(self) -> float:
        gram = self.features.T @ self.features / self.n
        return 0.25 * float(np.linalg.eigvalsh(gram)[-1]) + 2.0 * self.rho


# -- model-backed objective ---------------------------------------------------


@dataclass(frozen=True)
class PdSample:
    patient: int
    pos_doctor: int
    neg_doctor: int


@dataclass(frozen=True)
class DsSample:
    doctor: int
    specialty: int


@dataclass(frozen=True)
class SsSample:
    service: int
    next_service: int


def build_training_samples(split: MaskedSplit, seed: int = 0) -> list:
    """One ranking triple per observed patient-doctor edge (negative drawn from
    doctors the patient never interacted with), one specialty sample per
    connected doctor, one succession sample per service-service edge."""
    graph = split.graph
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    linked: dict = {}
    for p, d in graph.patient_doctor_pairs():
        linked.setdefault(p, set()).add(d)
    samples: list = []
    for p in sorted(linked):
        seen = linked[p]
        pool = np.array([d for d in range(graph.n_doctors) if d not in seen], dtype=np.int64)
        for d in sorted(seen):
            neg = int(pool[rng.integers(0, len(pool))]) if len(pool) else d
            samples.append(PdSample(p, d, neg))
    connected_doctors = sorted(
        {e.src.index for e in graph.edges if e.kind == EdgeKind.DOCTOR_SERVICE}
        | {e.dst.index for e in graph.edges if e.kind == EdgeKind.PATIENT_DOCTOR}
    )
    for d in connected_doctors:
        samples.append(DsSample(d, int(graph.doctor_specialty[d])))
    for e in graph.edges:
        if e.kind == EdgeKind.SERVICE_SERVICE:
            samples.append(SsSample(e.src.index, e.dst.index))
    return samples


class HgatObjective(LocalObjective):
    """The three-task reconstruction loss of one shard as a worker objective.

    Neighbor draws are frozen at construction (seeded), so the objective is a
    fixed deterministic function of the parameter vector and per-sample
    gradient differences telescope exactly. Per-sample losses are scaled by
    ``weight_task * n / n_task`` so the full-set average equals the weighted
    sum of per-task batch means.
    """

    def __init__(
        self,
        graph: HeteroGraph,
        features: FeatureTable,
        config: hgat.ModelConfig,
        samples: Sequence,
        weights=(1.0, 1.0, 1.0),
        sample_size: int = 5,
        plan_seed: int = 0,
        l2: float = 0.0,
    ):
        weights = np.asarray(weights, dtype=np.float64)
        if not np.any(weights > 0):
            raise AllWeightsZero("at least one loss weight must be positive")
        if weights.shape != (3,) or np.any(weights < 0):
            raise AllWeightsZero("weights must be three non-negative reals")
        w_ds, w_ss, w_pd = (float(w) for w in weights)
        active_ds = any(isinstance(s, DsSample) for s in samples) and w_ds > 0
        if active_ds and features.doctor_specialty_encoded:
            raise hgat.LabelLeakage(
                "doctor specialty is encoded in the input features while the specialty task is active"
            )
        self.graph = graph
        self.features = features
        self.config = config
        self.samples = list(samples)
        self.weights = weights
        self.l2 = float(l2)  # ridge on the parameters, part of every per-sample term
        self.n = len(self.samples)
        if self.n < 1:
            raise EmptySubset("objective needs at least one sample")
        self.dim = hgat.param_count(config)
        self.ctx = hgat.build_context(graph, config.layers, sample_size, plan_seed)
        counts = {"pd": 0, "ds": 0, "ss": 0}
        for s in self.samples:
            counts[_task_of(s)] += 1
        task_w = {"ds": w_ds, "ss": w_ss, "pd": w_pd}
        self._scale = np.array(
            [task_w[_task_of(s)] * self.n / counts[_task_of(s)] for s in self.samples]
        )

    def _loss_tensor(self, ptensors: dict, idx: np.ndarray):
        embed = hgat.embed_tape(self.ctx, self.features, ptensors, self.config)
        off = self.ctx.offsets
        po, do, so = off[NodeKind.PATIENT], off[NodeKind.DOCTOR], off[NodeKind.SERVICE]
        pieces = []
        pd = [(j, self.samples[j]) for j in idx if isinstance(self.samples[j], PdSample)]
        ds = [(j, self.samples[j]) for j in idx if isinstance(self.samples[j], DsSample)]
        ss = [(j, self.samples[j]) for j in idx if isinstance(self.samples[j], SsSample)]
        if pd:
            scale = tape.Tensor(self._scale[[j for j, _ in pd]])
            ep = tape.gather_rows(embed, np.array([s.patient for _, s in pd]) + po)
            if self.config.score_mode == "bilinear":
                ep = ep @ ptensors["score.bilinear"]
            e_pos = tape.gather_rows(embed, np.array([s.pos_doctor for _, s in pd]) + do)
            e_neg = tape.gather_rows(embed, np.array([s.neg_doctor for _, s in pd]) + do)
            losses = tape.softplus((ep * e_neg).sum(axis=1) - (ep * e_pos).sum(axis=1))
            pieces.append((scale * losses).sum())
        if ds:
            scale = tape.Tensor(self._scale[[j for j, _ in ds]])
            logits = tape.gather_rows(embed, np.array([s.doctor for _, s in ds]) + do) @ ptensors["head.specialty"]
            nll = -tape.select_positions(
                tape.log_softmax(logits, axis=1),
                np.arange(len(ds)),
                np.array([s.specialty for _, s in ds]),
            )
            pieces.append((scale * nll).sum())
        if ss:
            scale = tape.Tensor(self._scale[[j for j, _ in ss]])
            logits = tape.gather_rows(embed, np.array([s.service for _, s in ss]) + so) @ ptensors["head.next_service"]
            nll = -tape.select_positions(
                tape.log_softmax(logits, axis=1),
                np.arange(len(ss)),
                np.array([s.next_service for _, s in ss]),
            )
            pieces.append((scale * nll).sum())
        total = pieces[0]
        for p in pieces[1:]:
            total = total + p
        return total * (1.0 / len(idx))

    def value(self, x, subset=None):
        idx = self._resolve_subset(subset)
        x = np.asarray(x, dtype=np.float64)
        params = hgat.HgatParams.unflatten(x, self.config)
        ptensors = {name: tape.Tensor(arr) for name, arr in params.arrays.items()}
        out = self._loss_tensor(ptensors, idx).item()
        if self.l2:
            out += 0.5 * self.l2 * float(x @ x)
        return out

    def gradient(self, x, subset=None):
        idx = self._resolve_subset(subset)
        x = np.asarray(x, dtype=np.float64)
        params = hgat.HgatParams.unflatten(x, self.config)
        ptensors = {name: tape.parameter(arr) for name, arr in params.arrays.items()}
        self._loss_tensor(ptensors, idx).backward()
        grad = np.zeros(self.dim)
        for name, (a, b, _) in params.layout.offsets.items():
            g = ptensors[name].grad
            if g is not None:
                grad[a:b] = g.ravel()
        if self.l2:
            grad += self.l2 * x
        return grad


def _task_of(sample) -> str:
    if isinstance(sample, PdSample):
        return "pd"
    if isinstance(sample, DsSample):
        return "ds"
    return "ss"


# ---------------------------------------------------------------------------
# gradient plumbing


def stochastic_gradient(obj: LocalObjective, x: np.ndarray, subset) -> np.ndarray:
    """Mean per-sample gradient over `subset` (duplicates allowed)."""
    subset = np.asarray(subset, dtype=np.int64)
    if subset.size == 0:
        raise EmptySubset("stochastic gradient over an empty subset")
    return obj.gradient(np.asarray(x, dtype=np.float64), subset)


def finite_difference_check(
    obj: LocalObjective,
    x: np.ndarray,
    subset=None,
    h: float = 1e-6,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error of the analytic gradient against central differences.

    Relative error uses denominator max(1e-8, |analytic|) per coordinate.
    """
    if h <= 0:
        raise EmptySubset("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    analytic = obj.gradient(x, subset)
    rng = np.random.default_rng(seed)
    dim = x.size
    coords = rng.choice(dim, size=min(n_coords, dim), replace=False)
    worst = 0.0
    for c in coords:
        xp = x.copy()
        xp[c] += h
        xm = x.copy()
        xm[c] -= h
        fd = (obj.value(xp, subset) - obj.value(xm, subset)) / (2.0 * h)
        err = abs(fd - analytic[c]) / max(1e-8, abs(analytic[c]))
        worst = max(worst, err)
    return worst


def estimate_lipschitz(obj: LocalObjective, x0: np.ndarray, iters: int = 15, eps: float = 1e-4, seed: int = 0) -> float:
    """Power-iteration estimate of the loss Hessian's top eigenvalue magnitude
    at x0, via finite differences of the analytic gradient. A local probe, not
    a global guarantee."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=x0.size)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv = (obj.gradient(x0 + eps * v) - obj.gradient(x0 - eps * v)) / (2.0 * eps)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            return 0.0
        v = hv / lam
    return lam


# ---------------------------------------------------------------------------
# ranked evaluation of a masked split


def evaluate_split(
    graph: HeteroGraph,
    features: FeatureTable,
    params: hgat.HgatParams,
    split: MaskedSplit,
    sample_size: int = 5,
    seed: int = 0,
    ctx: Optional[hgat.GraphContext] = None,
    pooled: bool = False,
) -> dict:
    """Rank each patient's candidate doctors; returns mean recall and AUC.

    Recall cutoff is the patient's positive count. AUC is averaged per patient
    by default; ``pooled=True`` pools all candidate scores instead.
    """
    config = params.config
    if ctx is None:
        ctx = hgat.build_context(graph, config.layers, sample_size, seed)
    ptensors = {name: tape.Tensor(arr) for name, arr in params.arrays.items()}
    embed = hgat.embed_tape(ctx, features, ptensors, config).value
    po, do = ctx.offsets[NodeKind.PATIENT], ctx.offsets[NodeKind.DOCTOR]
    recalls, aucs = [], []
    pooled_scores, pooled_labels = [], []
    bilinear = params.arrays.get("score.bilinear")
    for p, cands in split.candidates.items():
        pos = split.positives[p]
        if not pos or not cands or len(pos) == len(cands):
            continue
        cand_idx = np.asarray(cands, dtype=np.int64)
        ep = embed[po + p]
        if bilinear is not None and config.score_mode == "bilinear":
            ep = ep @ bilinear
        scores = embed[do + cand_idx] @ ep
        labels = np.array([d in pos for d in cand_idx])
        order = np.argsort(-scores, kind="stable")
        ranked = cand_idx[order]
        recalls.append(recall_at_mask(list(ranked), pos))
        aucs.append(auc(scores, labels))
        pooled_scores.append(scores)
        pooled_labels.append(labels)
    if not recalls:
        return {"recall": float("nan"), "auc": float("nan"), "patients": 0}
    result = {
        "recall": float(np.mean(recalls)),
        "auc": float(np.mean(aucs)),
        "patients": len(recalls),
    }
    if pooled:
        result["auc_pooled"] = auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    return result
