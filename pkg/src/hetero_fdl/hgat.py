"""Type-aware graph attention model.

Attention over a node's sampled neighbors scores each neighbor j of node i by
``LeakyReLU(a . [Q_ti h_i || Q_tj h_j || V_(ti,tj)])`` (slope 0.2) and
normalizes with a softmax across the sampled multiset; per head the neighbor
projections are combined with those coefficients, heads are averaged (or,
optionally, concatenated after the nonlinearity) and pushed through an ELU.
The per-ordered-type-pair vectors V are the heterogeneous part; zeroing them
and sharing one projection reduces the layer to a plain GAT layer, which the
comparison arm uses.

Parameters live in named arrays with a canonical flat layout so an optimizer
can treat a model replica as one vector. Parameter count (heterogeneous
mode):

    sum over layers l of  K * (sum_t F' * F_in(l, t)  +  (2 F' + d_V)  +  9 d_V)
    + (F_e^2 if bilinear scoring else 0) + F_e * n_specialties + F_e * n_services

with F_in(0, t) the per-kind input widths, F_in(l>=1, .) = F_e, and
F_e = F' for head averaging or K*F' for concatenation. In plain-GAT mode the
per-kind projections collapse to one Q per head and the V block is absent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tape
from .ehr_graph import HeteroGraph, NodeKind
from .errors import WorkbenchError
from .features import FeatureTable

LEAKY_SLOPE = 0.2
KINDS = (NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE)


class ShapeMismatch(WorkbenchError):
    pass


class LayoutMismatch(WorkbenchError):
    pass


class LabelLeakage(WorkbenchError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_dims: dict  # NodeKind -> input width
    f_prime: int = 16
    heads: int = 2
    layers: int = 2
    d_v: Optional[int] = None  # defaults to f_prime
    combine: str = "average"  # or "concat"
    score_mode: str = "dot"  # or "bilinear"
    heterogeneous: bool = True
    n_specialties: int = 1
    n_services: int = 1

    def __post_init__(self):
        if self.combine not in ("average", "concat"):
            raise ShapeMismatch(f"combine must be average|concat, got {self.combine!r}")
        if self.score_mode not in ("dot", "bilinear"):
            raise ShapeMismatch(f"score_mode must be dot|bilinear, got {self.score_mode!r}")
        if self.f_prime < 1 or self.heads < 1 or self.layers < 1:
            raise ShapeMismatch("f_prime, heads and layers must be positive")
        if not self.heterogeneous:
            widths = {self.in_dims[k] for k in KINDS}
            if len(widths) != 1:
                raise ShapeMismatch("plain-GAT mode needs equal input widths for all node kinds")

    @property
    def dv(self) -> int:
        return self.f_prime if self.d_v is None else self.d_v

    @property
    def embed_dim(self) -> int:
        return self.f_prime * (self.heads if self.combine == "concat" else 1)

    def layer_in_dim(self, layer: int, kind: NodeKind) -> int:
        return self.in_dims[kind] if layer == 0 else self.embed_dim


@dataclass
class ParamLayout:
    entries: list  # (name, shape)
    offsets: dict = field(default_factory=dict)
    total: int = 0

    def __post_init__(self):
        pos = 0
        for name, shape in self.entries:
            size = int(np.prod(shape))
            self.offsets[name] = (pos, pos + size, shape)
            pos += size
        self.total = pos


def layout_for(config: ModelConfig) -> ParamLayout:
    entries = []
    for l in range(config.layers):
        for k in range(config.heads):
            if config.heterogeneous:
                for kind in KINDS:
                    entries.append((f"layer{l}.head{k}.Q.{kind.name.lower()}", (config.layer_in_dim(l, kind), config.f_prime)))
                entries.append((f"layer{l}.head{k}.a", (2 * config.f_prime + config.dv,)))
                entries.append((f"layer{l}.head{k}.V", (9, config.dv)))
            else:
                entries.append((f"layer{l}.head{k}.Q", (config.layer_in_dim(l, KINDS[0]), config.f_prime)))
                entries.append((f"layer{l}.head{k}.a", (2 * config.f_prime,)))
    if config.score_mode == "bilinear":
        entries.append(("score.bilinear", (config.embed_dim, config.embed_dim)))
    entries.append(("head.specialty", (config.embed_dim, config.n_specialties)))
    entries.append(("head.next_service", (config.embed_dim, config.n_services)))
    return ParamLayout(entries)


def param_count(config: ModelConfig) -> int:
    return layout_for(config).total


class HgatParams:
    """Named parameter arrays for one model replica."""

    def __init__(self, config: ModelConfig, arrays: dict):
        self.config = config
        self.layout = layout_for(config)
        for name, shape in self.layout.entries:
            if name not in arrays or arrays[name].shape != tuple(shape):
                raise LayoutMismatch(f"missing or misshaped tensor {name}")
        self.arrays = arrays

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "HgatParams":
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in layout_for(config).entries:
            if ".Q" in name:
                # attention aggregation averages neighbor projections, which
                # shrinks activation variance per layer; the extra gain keeps
                # embeddings (and therefore gradients) at a usable scale
                scale = 2.0 * math.sqrt(2.0 / sum(shape))
            elif name.startswith(("score.", "head.")):
                fan = sum(shape) if len(shape) == 2 else shape[0]
                scale = math.sqrt(2.0 / fan)
            else:
                scale = 0.1
            arrays[name] = rng.normal(0.0, scale, size=shape)
        return cls(config, arrays)

    def flatten(self) -> np.ndarray:
        vec = np.empty(self.layout.total)
        for name, (a, b, shape) in self.layout.offsets.items():
            vec[a:b] = self.arrays[name].ravel()
        return vec

    @classmethod
    def unflatten(cls, vec: np.ndarray, config: ModelConfig) -> "HgatParams":
        layout = layout_for(config)
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != layout.total:
            raise LayoutMismatch(f"expected vector of length {layout.total}, got shape {vec.shape}")
        arrays = {name: vec[a:b].reshape(shape).copy() for name, (a, b, shape) in layout.offsets.items()}
        return cls(config, arrays)


# ---------------------------------------------------------------------------
# sampling plans over the graph


@dataclass
class LayerPlan:
    nbr_idx: np.ndarray  # (N, s) global node indices, padded with 0
    pair_idx: np.ndarray  # (N, s) ordered type-pair index 3*t_i + t_j
    mask: np.ndarray  # (N, s) True where the slot holds a real draw


@dataclass
class GraphContext:
    """Node ordering (patients, doctors, services) plus per-layer neighbor draws."""

    offsets: dict
    node_type: np.ndarray
    n_total: int
    plans: list

    def global_index(self, kind: NodeKind, local: int) -> int:
        return self.offsets[kind] + local


def build_context(graph: HeteroGraph, n_layers: int, sample_size: int, seed: int) -> GraphContext:
    """Draw the neighbor multisets once; nodes with degree <= sample_size keep
    their full neighborhood, others get roulette draws by edge weight, and
    isolated nodes fall back to a self-loop."""
    counts = [graph.count(k) for k in KINDS]
    offsets = {k: int(sum(counts[:i])) for i, k in enumerate(KINDS)}
    n_total = int(sum(counts))
    node_type = np.concatenate([np.full(c, int(k)) for k, c in zip(KINDS, counts)])

    neighbor_lists = []
    weight_lists = []
    for kind in KINDS:
        for i in range(graph.count(kind)):
            edges = graph.neighbors(graph.node(kind, i))
            neighbor_lists.append([offsets[e.dst.kind] + e.dst.index for e in edges])
            weight_lists.append(np.array([e.weight for e in edges], dtype=np.float64))

    plans = []
    for layer in range(n_layers):
        rng = np.random.default_rng(np.random.SeedSequence([seed, layer]))
        rows = []
        for g in range(n_total):
            nbrs, w = neighbor_lists[g], weight_lists[g]
            if not nbrs:
                rows.append([g])
            elif len(nbrs) <= sample_size:
                rows.append(list(nbrs))
            else:
                total = w.sum()
                if total <= 0:
                    rows.append([g])
                else:
                    picks = rng.choice(len(nbrs), size=sample_size, replace=True, p=w / total)
                    rows.append([nbrs[p] for p in picks])
        s = max(len(r) for r in rows)
        nbr_idx = np.zeros((n_total, s), dtype=np.int64)
        mask = np.zeros((n_total, s), dtype=bool)
        for g, r in enumerate(rows):
            nbr_idx[g, : len(r)] = r
            mask[g, : len(r)] = True
        pair_idx = 3 * node_type[:, None] + node_type[nbr_idx]
        plans.append(LayerPlan(nbr_idx=nbr_idx, pair_idx=pair_idx, mask=mask))
    return GraphContext(offsets=offsets, node_type=node_type, n_total=n_total, plans=plans)


# ---------------------------------------------------------------------------
# forward passes (tape)


def _param_tensors(params: HgatParams) -> dict:
    return {name: tape.parameter(arr) for name, arr in params.arrays.items()}


def _layer_tape(ptensors: dict, config: ModelConfig, layer: int, plan: LayerPlan, feats_by_kind: dict, counts: dict):
    """One attention layer on the tape; returns the (N, F_e) output tensor."""
    f_prime = config.f_prime
    penalty = np.where(plan.mask, 0.0, -1e30)
    head_outputs = []
    for k in range(config.heads):
        if config.heterogeneous:
            parts = [feats_by_kind[kind] @ ptensors[f"layer{layer}.head{k}.Q.{kind.name.lower()}"] for kind in KINDS]
            proj = tape.concat(parts, axis=0)
        else:
            stacked = tape.concat([feats_by_kind[kind] for kind in KINDS], axis=0)
            proj = stacked @ ptensors[f"layer{layer}.head{k}.Q"]
        a = ptensors[f"layer{layer}.head{k}.a"]
        a_src = a.slice1d(0, f_prime)
        a_dst = a.slice1d(f_prime, 2 * f_prime)
        s_src = proj @ a_src
        s_dst = proj @ a_dst
        n = proj.shape[0]
        logits = s_src.reshape(n, 1) + tape.gather_rows(s_dst, plan.nbr_idx)
        if config.heterogeneous:
            a_pair = a.slice1d(2 * f_prime, 2 * f_prime + config.dv)
            pair_scores = ptensors[f"layer{layer}.head{k}.V"] @ a_pair
            logits = logits + tape.gather_rows(pair_scores, plan.pair_idx)
        logits = tape.leaky_relu(logits, LEAKY_SLOPE)
        alpha = tape.softmax(tape.add_constant(logits, penalty), axis=1)
        messages = tape.gather_rows(proj, plan.nbr_idx)
        s = plan.nbr_idx.shape[1]
        agg = (alpha.reshape(n, s, 1) * messages).sum(axis=1)
        head_outputs.append(agg)
    if config.combine == "average":
        total = head_outputs[0]
        for h in head_outputs[1:]:
            total = total + h
        out = tape.elu(total * (1.0 / config.heads))
    else:
        out = tape.concat([tape.elu(h) for h in head_outputs], axis=1)
    # split rows back into per-kind blocks for the next layer
    result = {}
    pos = 0
    for kind in KINDS:
        result[kind] = out.slice1d(pos, pos + counts[kind])
        pos += counts[kind]
    return out, result


def _check_feature_dims(config: ModelConfig, features: FeatureTable):
    for kind in KINDS:
        want = config.in_dims[kind]
        got = features.for_kind(kind).shape[1]
        if want != got:
            raise ShapeMismatch(f"{kind.name} features are {got}-dimensional, model expects {want}")


def embed_tape(ctx: GraphContext, features: FeatureTable, ptensors: dict, config: ModelConfig):
    """All layers; returns the (N, F_e) embedding tensor in global node order."""
    counts = {kind: features.for_kind(kind).shape[0] for kind in KINDS}
    feats_by_kind = {kind: tape.Tensor(features.for_kind(kind)) for kind in KINDS}
    out = None
    for layer in range(config.layers):
        out, feats_by_kind = _layer_tape(ptensors, config, layer, ctx.plans[layer], feats_by_kind, counts)
    return out


@dataclass
class TaskBatch:
    """Node index sets the three output heads should score (local indices)."""

    pd_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    ds_doctors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    ss_services: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class TaskOutputs:
    pd_scores: np.ndarray
    specialty_logits: np.ndarray
    next_service_logits: np.ndarray


def heads_tape(embed, ctx: GraphContext, ptensors: dict, config: ModelConfig, batch: TaskBatch):
    """Score heads on top of shared embeddings; returns three tensors."""
    po, do, so = ctx.offsets[NodeKind.PATIENT], ctx.offsets[NodeKind.DOCTOR], ctx.offsets[NodeKind.SERVICE]
    if len(batch.pd_pairs):
        ep = tape.gather_rows(embed, batch.pd_pairs[:, 0] + po)
        ed = tape.gather_rows(embed, batch.pd_pairs[:, 1] + do)
        if config.score_mode == "bilinear":
            ep = ep @ ptensors["score.bilinear"]
        pd_scores = (ep * ed).sum(axis=1)
    else:
        pd_scores = tape.Tensor(np.zeros(0))
    if len(batch.ds_doctors):
        spec_logits = tape.gather_rows(embed, batch.ds_doctors + do) @ ptensors["head.specialty"]
    else:
        spec_logits = tape.Tensor(np.zeros((0, config.n_specialties)))
    if len(batch.ss_services):
        next_logits = tape.gather_rows(embed, batch.ss_services + so) @ ptensors["head.next_service"]
    else:
        next_logits = tape.Tensor(np.zeros((0, config.n_services)))
    return pd_scores, spec_logits, next_logits


def model_forward(
    graph: HeteroGraph,
    features: FeatureTable,
    params: HgatParams,
    batch: TaskBatch,
    sample_size: int = 5,
    seed: int = 0,
    ctx: Optional[GraphContext] = None,
    specialty_task_active: Optional[bool] = None,
) -> TaskOutputs:
    """Full forward pass; deterministic for a fixed seed.

    Raises LabelLeakage when specialty prediction is requested while the
    doctor input features still encode the specialty.
    """
    config = params.config
    _check_feature_dims(config, features)
    if specialty_task_active is None:
        specialty_task_active = len(batch.ds_doctors) > 0
    if specialty_task_active and features.doctor_specialty_encoded:
        raise LabelLeakage("doctor specialty present in input features while the specialty task is active")
    if ctx is None:
        ctx = build_context(graph, config.layers, sample_size, seed)
    ptensors = _param_tensors(params)
    embed = embed_tape(ctx, features, ptensors, config)
    pd, ds, ss = heads_tape(embed, ctx, ptensors, config, batch)
    return TaskOutputs(pd.value.copy(), ds.value.copy(), ss.value.copy())


def layer_forward(
    graph: HeteroGraph,
    features: FeatureTable,
    params: HgatParams,
    sample_size: int = 5,
    seed: int = 0,
    layer: int = 0,
    ctx: Optional[GraphContext] = None,
) -> FeatureTable:
    """Run one attention layer and return the updated per-kind tables."""
    config = params.config
    for kind in KINDS:
        want = config.layer_in_dim(layer, kind)
        got = features.for_kind(kind).shape[1]
        if want != got:
            raise ShapeMismatch(f"{kind.name} features are {got}-dimensional, layer {layer} expects {want}")
    if ctx is None:
        ctx = build_context(graph, config.layers, sample_size, seed)
    counts = {kind: features.for_kind(kind).shape[0] for kind in KINDS}
    feats_by_kind = {kind: tape.Tensor(features.for_kind(kind)) for kind in KINDS}
    ptensors = _param_tensors(params)
    _, by_kind = _layer_tape(ptensors, config, layer, ctx.plans[layer], feats_by_kind, counts)
    return FeatureTable(
        patient=by_kind[NodeKind.PATIENT].value.copy(),
        doctor=by_kind[NodeKind.DOCTOR].value.copy(),
        service=by_kind[NodeKind.SERVICE].value.copy(),
        doctor_specialty_encoded=features.doctor_specialty_encoded,
    )


# ---------------------------------------------------------------------------
# small public pieces used by tests and baselines


def attention_coefficients(
    params: HgatParams,
    h_i: np.ndarray,
    type_i: NodeKind,
    neighbor_feats: list,
    neighbor_types: list,
    layer: int = 0,
    head: int = 0,
) -> np.ndarray:
    """Attention weights of one node over its sampled neighbors (numpy path)."""
    if not neighbor_feats:
        raise ShapeMismatch("need at least one neighbor")
    if len(neighbor_feats) != len(neighbor_types):
        raise ShapeMismatch("neighbor feature/type lists differ in length")
    config = params.config
    h_i = np.asarray(h_i, dtype=np.float64)
    if h_i.shape != (config.layer_in_dim(layer, type_i),):
        raise ShapeMismatch(f"node feature has shape {h_i.shape}, expected ({config.layer_in_dim(layer, type_i)},)")
    a = params.arrays[f"layer{layer}.head{head}.a"]
    logits = np.empty(len(neighbor_feats))
    if config.heterogeneous:
        q_i = params.arrays[f"layer{layer}.head{head}.Q.{type_i.name.lower()}"]
        v = params.arrays[f"layer{layer}.head{head}.V"]
        zi = h_i @ q_i
        for j, (h_j, t_j) in enumerate(zip(neighbor_feats, neighbor_types)):
            h_j = np.asarray(h_j, dtype=np.float64)
            if h_j.shape != (config.layer_in_dim(layer, t_j),):
                raise ShapeMismatch(f"neighbor {j} feature has shape {h_j.shape}")
            q_j = params.arrays[f"layer{layer}.head{head}.Q.{t_j.name.lower()}"]
            zj = h_j @ q_j
            stacked = np.concatenate([zi, zj, v[3 * int(type_i) + int(t_j)]])
            logits[j] = a @ stacked
    else:
        q = params.arrays[f"layer{layer}.head{head}.Q"]
        zi = h_i @ q
        for j, h_j in enumerate(neighbor_feats):
            zj = np.asarray(h_j, dtype=np.float64) @ q
            logits[j] = a @ np.concatenate([zi, zj])
    logits = np.where(logits > 0, logits, LEAKY_SLOPE * logits)
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def score_patient_doctor(embed_p: np.ndarray, embed_d: np.ndarray, params: HgatParams) -> float:
    embed_p = np.asarray(embed_p, dtype=np.float64)
    embed_d = np.asarray(embed_d, dtype=np.float64)
    d = params.config.embed_dim
    if embed_p.shape != (d,) or embed_d.shape != (d,):
        raise ShapeMismatch(f"embeddings must have shape ({d},)")
    if params.config.score_mode == "bilinear":
        return float(embed_p @ params.arrays["score.bilinear"] @ embed_d)
    return float(embed_p @ embed_d)


# ---------------------------------------------------------------------------
# checkpoints: text layout header, then little-endian float64 payload


def save_checkpoint(params: HgatParams, path) -> None:
    vec = params.flatten()
    with open(path, "wb") as fh:
        lines = ["HGAT-CHECKPOINT v1", f"tensors {len(params.layout.entries)}"]
        for name, shape in params.layout.entries:
            lines.append(f"{name} {'x'.join(str(d) for d in shape)}")
        lines.append("end")
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        fh.write(vec.astype("<f8").tobytes())


def load_checkpoint(path, config: ModelConfig) -> HgatParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = b"end\n"
    cut = blob.find(marker)
    if cut < 0 or not blob.startswith(b"HGAT-CHECKPOINT v1\n"):
        raise LayoutMismatch("not a checkpoint file")
    header = blob[:cut].decode("utf-8").splitlines()
    entries = []
    for line in header[2:]:
        name, dims = line.rsplit(" ", 1)
        entries.append((name, tuple(int(d) for d in dims.split("x"))))
    expected = [(name, tuple(shape)) for name, shape in layout_for(config).entries]
    if entries != expected:
        raise LayoutMismatch("checkpoint layout does not match the model configuration")
    vec = np.frombuffer(blob[cut + len(marker) :], dtype="<f8").astype(np.float64)
    return HgatParams.unflatten(vec, config)
