"""Heterogeneous claims graphs: ingestion, synthesis, masking, sampling.

The graph has three node kinds (patient, doctor, service; services carry a
dx/px/rx subtype) and four edge kinds. Patient-service, doctor-service and
patient-doctor edges are undirected and mirrored in the adjacency; the
service-service edges are directed and encode chronological succession, with
weight equal to the number of *distinct patients* exhibiting that ordered
pair. Patient-service / doctor-service edge weights are recency weights in
(0, 1], newest interaction = 1, so roulette sampling favours recent history.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date as _date
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import WorkbenchError


class MalformedRow(WorkbenchError):
    def __init__(self, row_number: int, reason: str):
        super().__init__(f"row {row_number}: {reason}")
        self.row_number = row_number
        self.reason = reason


class UnknownServiceType(WorkbenchError):
    pass


class EmptyFile(WorkbenchError):
    pass


class InvalidConfig(WorkbenchError):
    pass


class PatientTooShort(WorkbenchError):
    pass


class OutOfRangeTimestamp(WorkbenchError):
    pass


class IsolatedNode(WorkbenchError):
    pass


class ZeroTotalWeight(WorkbenchError):
    pass


class BadGraphFile(WorkbenchError):
    pass


class NodeKind(IntEnum):
    PATIENT = 0
    DOCTOR = 1
    SERVICE = 2


class ServiceSubtype(IntEnum):
    DX = 0
    PX = 1
    RX = 2


SUBTYPE_NAMES = {ServiceSubtype.DX: "dx", ServiceSubtype.PX: "px", ServiceSubtype.RX: "rx"}
SUBTYPE_FROM_NAME = {v: k for k, v in SUBTYPE_NAMES.items()}

SEX_CODES = {"M": 0, "F": 1, "U": 2}
SEX_NAMES = {v: k for k, v in SEX_CODES.items()}


class EdgeKind(IntEnum):
    PATIENT_SERVICE = 0
    DOCTOR_SERVICE = 1
    SERVICE_SERVICE = 2
    PATIENT_DOCTOR = 3


# endpoint kinds allowed per edge kind, in canonical storage direction
_CANONICAL_ENDPOINTS = {
    EdgeKind.PATIENT_SERVICE: (NodeKind.PATIENT, NodeKind.SERVICE),
    EdgeKind.DOCTOR_SERVICE: (NodeKind.DOCTOR, NodeKind.SERVICE),
    EdgeKind.SERVICE_SERVICE: (NodeKind.SERVICE, NodeKind.SERVICE),
    EdgeKind.PATIENT_DOCTOR: (NodeKind.PATIENT, NodeKind.DOCTOR),
}

UNDIRECTED_KINDS = (EdgeKind.PATIENT_SERVICE, EdgeKind.DOCTOR_SERVICE, EdgeKind.PATIENT_DOCTOR)


@dataclass(frozen=True)
class NodeRef:
    """A typed node handle: kind, per-kind index, subtype for services only."""

    kind: NodeKind
    index: int
    service_subtype: Optional[ServiceSubtype] = None

    def __post_init__(self):
        if (self.kind == NodeKind.SERVICE) != (self.service_subtype is not None):
            raise ValueError("service_subtype must be present iff kind is SERVICE")
        if self.index < 0:
            raise ValueError("node index must be non-negative")


@dataclass(frozen=True)
class Edge:
    src: NodeRef
    dst: NodeRef
    kind: EdgeKind
    timestamp: int
    weight: float

    def __post_init__(self):
        a, b = _CANONICAL_ENDPOINTS[self.kind]
        pair = (self.src.kind, self.dst.kind)
        if pair != (a, b) and not (self.kind in UNDIRECTED_KINDS and pair == (b, a)):
            raise ValueError(f"edge kind {self.kind.name} inconsistent with endpoints {pair}")
        if self.weight < 0:
            raise ValueError("edge weight must be non-negative")


CLAIMS_COLUMNS = (
    "patient_id",
    "doctor_id",
    "service_code",
    "service_type",
    "timestamp",
    "patient_age",
    "patient_sex",
    "patient_region",
    "doctor_specialty",
    "doctor_region",
)


@dataclass(frozen=True)
class ClaimsSchema:
    columns: tuple = CLAIMS_COLUMNS


@dataclass(frozen=True)
class Claim:
    patient_id: str
    doctor_id: str
    service_code: str
    service_type: ServiceSubtype
    timestamp: int  # proleptic ordinal day
    patient_age: int
    patient_sex: str
    patient_region: str
    doctor_specialty: str
    doctor_region: str


class HeteroGraph:
    """Immutable typed multigraph over patients, doctors and services.

    Nodes are dense per-kind indices with attribute arrays; ``edges`` is the
    canonical edge list (undirected kinds stored once, mirrored in the
    adjacency). Three node kinds plus four edge kinds comfortably clear the
    heterogeneity floor of at least three combined types.
    """

    def __init__(
        self,
        patient_ids: Sequence[str],
        doctor_ids: Sequence[str],
        service_codes: Sequence[str],
        patient_age: Sequence[int],
        patient_sex: Sequence[int],
        patient_region: Sequence[int],
        doctor_specialty: Sequence[int],
        doctor_region: Sequence[int],
        service_subtype: Sequence[int],
        region_names: Sequence[str],
        specialty_names: Sequence[str],
        edges: Sequence[Edge],
    ):
        self.patient_ids = list(patient_ids)
        self.doctor_ids = list(doctor_ids)
        self.service_codes = list(service_codes)
        self.patient_age = np.asarray(patient_age, dtype=np.int64)
        self.patient_sex = np.asarray(patient_sex, dtype=np.int64)
        self.patient_region = np.asarray(patient_region, dtype=np.int64)
        self.doctor_specialty = np.asarray(doctor_specialty, dtype=np.int64)
        self.doctor_region = np.asarray(doctor_region, dtype=np.int64)
        self.service_subtype = np.asarray(service_subtype, dtype=np.int64)
        self.region_names = list(region_names)
        self.specialty_names = list(specialty_names)
        self.edges = tuple(edges)

        counts = {
            NodeKind.PATIENT: len(self.patient_ids),
            NodeKind.DOCTOR: len(self.doctor_ids),
            NodeKind.SERVICE: len(self.service_codes),
        }
        self._counts = counts
        self._adj: dict = {}
        for e in self.edges:
            if e.src.index >= counts[e.src.kind] or e.dst.index >= counts[e.dst.kind]:
                raise ValueError("edge endpoint outside node tables")
            self._adj.setdefault((e.src.kind, e.src.index), {}).setdefault(e.kind, []).append(e)
            if e.kind in UNDIRECTED_KINDS:
                mirror = Edge(e.dst, e.src, e.kind, e.timestamp, e.weight)
                self._adj.setdefault((e.dst.kind, e.dst.index), {}).setdefault(e.kind, []).append(mirror)

    def count(self, kind: NodeKind) -> int:
        return self._counts[kind]

    @property
    def n_patients(self) -> int:
        return self._counts[NodeKind.PATIENT]

    @property
    def n_doctors(self) -> int:
        return self._counts[NodeKind.DOCTOR]

    @property
    def n_services(self) -> int:
        return self._counts[NodeKind.SERVICE]

    def node(self, kind: NodeKind, index: int) -> NodeRef:
        if index >= self._counts[kind]:
            raise ValueError(f"{kind.name} index {index} out of range")
        sub = ServiceSubtype(int(self.service_subtype[index])) if kind == NodeKind.SERVICE else None
        return NodeRef(kind, index, sub)

    def neighbors(self, node: NodeRef, kind: Optional[EdgeKind] = None) -> list:
        """Edges leaving `node`; undirected kinds are mirrored, service-service is not."""
        per_kind = self._adj.get((node.kind, node.index), {})
        if kind is not None:
            return list(per_kind.get(kind, ()))
        out = []
        for k in EdgeKind:
            out.extend(per_kind.get(k, ()))
        return out

    def patient_doctor_pairs(self) -> set:
        return {
            (e.src.index, e.dst.index)
            for e in self.edges
            if e.kind == EdgeKind.PATIENT_DOCTOR
        }


# ---------------------------------------------------------------------------
# ingestion


def read_claims(path, schema: ClaimsSchema = ClaimsSchema()) -> list:
    """Parse the claims CSV into Claim records, validating as we go."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path} is empty")
        if tuple(header) != tuple(schema.columns):
            raise MalformedRow(1, f"header {header!r} does not match schema {list(schema.columns)!r}")
        claims = []
        subtype_seen: dict = {}
        for row_number, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(schema.columns):
                raise MalformedRow(row_number, f"expected {len(schema.columns)} fields, got {len(row)}")
            rec = dict(zip(schema.columns, row))
            stype = rec["service_type"].strip().lower()
            if stype not in SUBTYPE_FROM_NAME:
                raise UnknownServiceType(f"row {row_number}: service_type {rec['service_type']!r} not in dx/px/rx")
            try:
                day = _date.fromisoformat(rec["timestamp"].strip()).toordinal()
            except ValueError:
                raise MalformedRow(row_number, f"timestamp {rec['timestamp']!r} is not an ISO date")
            try:
                age = int(rec["patient_age"])
            except ValueError:
                raise MalformedRow(row_number, f"patient_age {rec['patient_age']!r} is not an integer")
            sex = rec["patient_sex"].strip().upper()
            if sex not in SEX_CODES:
                raise MalformedRow(row_number, f"patient_sex {rec['patient_sex']!r} not in M/F/U")
            for key in ("patient_id", "doctor_id", "service_code"):
                if not rec[key] or any(c.isspace() for c in rec[key]):
                    raise MalformedRow(row_number, f"{key} {rec[key]!r} must be non-empty and whitespace-free")
            code = rec["service_code"]
            prev = subtype_seen.setdefault(code, stype)
            if prev != stype:
                raise MalformedRow(row_number, f"service {code!r} changes subtype {prev!r} -> {stype!r}")
            claims.append(
                Claim(
                    patient_id=rec["patient_id"],
                    doctor_id=rec["doctor_id"],
                    service_code=code,
                    service_type=SUBTYPE_FROM_NAME[stype],
                    timestamp=day,
                    patient_age=age,
                    patient_sex=sex,
                    patient_region=rec["patient_region"],
                    doctor_specialty=rec["doctor_specialty"],
                    doctor_region=rec["doctor_region"],
                )
            )
    if not claims:
        raise EmptyFile(f"{path} has a header but no data rows")
    return claims


def _index_of(order: dict, key: str) -> int:
    return order.setdefault(key, len(order))


def _sorted_patient_claims(claims: Iterable[Claim]):
    """Claims grouped per patient, each group sorted by (date, arrival order)."""
    groups: dict = {}
    for pos, c in enumerate(claims):
        groups.setdefault(c.patient_id, []).append((c.timestamp, pos, c))
    for pid in groups:
        groups[pid].sort(key=lambda t: (t[0], t[1]))
    return {pid: [c for _, _, c in rows] for pid, rows in groups.items()}


def build_graph(
    claims: Sequence[Claim],
    node_universe: Optional[Sequence[Claim]] = None,
    weight_method: str = "linear",
) -> HeteroGraph:
    """Assemble the typed graph from claim rows.

    `node_universe` widens the node tables beyond the rows that contribute
    edges, so entities seen only in a masked tail still get scoreable nodes.
    """
    universe = list(node_universe) if node_universe is not None else list(claims)
    if not universe:
        raise EmptyFile("no claims to build a graph from")

    p_order: dict = {}
    d_order: dict = {}
    s_order: dict = {}
    r_order: dict = {}
    sp_order: dict = {}
    p_attrs: dict = {}
    d_attrs: dict = {}
    s_attrs: dict = {}
    for c in universe:
        pi = _index_of(p_order, c.patient_id)
        di = _index_of(d_order, c.doctor_id)
        si = _index_of(s_order, c.service_code)
        if pi not in p_attrs:
            p_attrs[pi] = (c.patient_age, SEX_CODES[c.patient_sex], _index_of(r_order, c.patient_region))
        if di not in d_attrs:
            d_attrs[di] = (_index_of(sp_order, c.doctor_specialty), _index_of(r_order, c.doctor_region))
        if si not in s_attrs:
            s_attrs[si] = int(c.service_type)

    if node_universe is not None:
        for c in claims:
            if c.patient_id not in p_order or c.doctor_id not in d_order or c.service_code not in s_order:
                raise InvalidConfig("claims reference entities outside the node universe")

    def svc(i: int) -> NodeRef:
        return NodeRef(NodeKind.SERVICE, i, ServiceSubtype(s_attrs[i]))

    def pat(i: int) -> NodeRef:
        return NodeRef(NodeKind.PATIENT, i)

    def doc(i: int) -> NodeRef:
        return NodeRef(NodeKind.DOCTOR, i)

    edges: list = []
    if claims:
        t_min = min(c.timestamp for c in claims)
        t_max = max(c.timestamp for c in claims)
        for c in claims:
            w = edge_recency_weight(c.timestamp, t_min, t_max, weight_method)
            pi, di, si = p_order[c.patient_id], d_order[c.doctor_id], s_order[c.service_code]
            edges.append(Edge(pat(pi), svc(si), EdgeKind.PATIENT_SERVICE, c.timestamp, w))
            edges.append(Edge(doc(di), svc(si), EdgeKind.DOCTOR_SERVICE, c.timestamp, w))

        # one patient-doctor edge per distinct pair, stamped with the latest visit
        pd_latest: dict = {}
        for c in claims:
            key = (p_order[c.patient_id], d_order[c.doctor_id])
            pd_latest[key] = max(pd_latest.get(key, c.timestamp), c.timestamp)
        for (pi, di), ts in pd_latest.items():
            w = edge_recency_weight(ts, t_min, t_max, weight_method)
            edges.append(Edge(pat(pi), doc(di), EdgeKind.PATIENT_DOCTOR, ts, w))

        # service succession: weight = distinct patients with the ordered pair
        pair_patients: dict = {}
        pair_first_ts: dict = {}
        for pid, rows in _sorted_patient_claims(claims).items():
            for a, b in zip(rows, rows[1:]):
                key = (s_order[a.service_code], s_order[b.service_code])
                pair_patients.setdefault(key, set()).add(pid)
                pair_first_ts.setdefault(key, b.timestamp)
        for (sa, sb), pats in pair_patients.items():
            edges.append(
                Edge(svc(sa), svc(sb), EdgeKind.SERVICE_SERVICE, pair_first_ts[(sa, sb)], float(len(pats)))
            )

    n_p, n_d, n_s = len(p_order), len(d_order), len(s_order)
    return HeteroGraph(
        patient_ids=list(p_order),
        doctor_ids=list(d_order),
        service_codes=list(s_order),
        patient_age=[p_attrs[i][0] for i in range(n_p)],
        patient_sex=[p_attrs[i][1] for i in range(n_p)],
        patient_region=[p_attrs[i][2] for i in range(n_p)],
        doctor_specialty=[d_attrs[i][0] for i in range(n_d)],
        doctor_region=[d_attrs[i][1] for i in range(n_d)],
        service_subtype=[s_attrs[i] for i in range(n_s)],
        region_names=list(r_order),
        specialty_names=list(sp_order),
        edges=edges,
    )


def ingest_claims(path, schema: ClaimsSchema = ClaimsSchema(), weight_method: str = "linear") -> HeteroGraph:
    return build_graph(read_claims(path, schema), weight_method=weight_method)


# ---------------------------------------------------------------------------
# recency weights and roulette sampling


def edge_recency_weight(timestamp: int, t_min: int, t_max: int, method: str = "linear") -> float:
    """Map a timestamp to (0, 1], newest = 1, non-decreasing in time."""
    if not (t_min <= timestamp <= t_max):
        raise OutOfRangeTimestamp(f"timestamp {timestamp} outside [{t_min}, {t_max}]")
    if method == "linear":
        return (timestamp - t_min + 1.0) / (t_max - t_min + 1.0)
    if method == "log":
        return 1.0 / (1.0 + math.log1p(float(t_max - timestamp)))
    raise InvalidConfig(f"unknown recency method {method!r}")


def sample_neighbors(graph: HeteroGraph, node: NodeRef, k: int, seed: int) -> list:
    """k roulette draws (with replacement) over the node's weighted edges."""
    if k < 1:
        raise InvalidConfig("k must be >= 1")
    edges = graph.neighbors(node)
    if not edges:
        raise IsolatedNode(f"{node.kind.name}:{node.index} has no edges")
    weights = np.array([e.weight for e in edges], dtype=np.float64)
    total = weights.sum()
    if total <= 0.0:
        raise ZeroTotalWeight(f"{node.kind.name}:{node.index} has zero total edge weight")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(edges), size=k, replace=True, p=weights / total)
    return [edges[i].dst for i in picks]


# ---------------------------------------------------------------------------
# chronological masking


@dataclass
class MaskedSplit:
    """Training graph from each patient's earliest claims, plus held-out labels.

    ``positives[p]`` holds doctors that appear only in the masked tail of
    patient ``p``; the graph contains their nodes but none of their edges with
    ``p``. ``candidates[p]`` is the ranked-evaluation pool: all positives plus
    sampled never-seen doctors, shuffled deterministically.
    """

    graph: HeteroGraph
    positives: dict
    candidates: dict
    mask_fraction: float


def chronological_mask(
    claims: Sequence[Claim],
    fraction: float,
    candidate_size: int = 250,
    seed: int = 0,
    node_universe: Optional[Sequence[Claim]] = None,
) -> MaskedSplit:
    """Split each patient's history at the mask fraction and build the graph.

    `node_universe` (default: `claims`) fixes the node tables; passing the
    full multi-shard claim set gives every shard identical node indexing, so
    label spaces and candidate draws agree across workers and training modes.
    Candidate negatives are seeded per (seed, universe patient index).
    """
    if not (0.0 < fraction < 1.0):
        raise InvalidConfig(f"mask fraction must be in (0,1), got {fraction}")
    universe = list(node_universe) if node_universe is not None else list(claims)
    groups = _sorted_patient_claims(claims)
    head_claims: list = []
    tail_by_patient: dict = {}
    head_doctors: dict = {}
    all_doctors_by_patient: dict = {}
    for pid, rows in groups.items():
        if len(rows) < 2:
            raise PatientTooShort(pid)
        n = len(rows)
        head_len = min(max(math.ceil(fraction * n), 1), n - 1)
        head_claims.extend(rows[:head_len])
        tail_by_patient[pid] = rows[head_len:]
        head_doctors[pid] = {c.doctor_id for c in rows[:head_len]}
        all_doctors_by_patient[pid] = {c.doctor_id for c in rows}

    graph = build_graph(head_claims, node_universe=universe)
    doc_index = {d: i for i, d in enumerate(graph.doctor_ids)}
    pat_index = {p: i for i, p in enumerate(graph.patient_ids)}

    positives: dict = {}
    candidates: dict = {}
    for pid, tail in tail_by_patient.items():
        pi = pat_index[pid]
        pos = {doc_index[c.doctor_id] for c in tail if c.doctor_id not in head_doctors[pid]}
        positives[pi] = frozenset(pos)
        seen = {doc_index[d] for d in all_doctors_by_patient[pid]}
        never_seen = [d for d in range(graph.n_doctors) if d not in seen]
        rng = np.random.default_rng(np.random.SeedSequence([seed, pi]))
        n_neg = min(max(candidate_size - len(pos), 0), len(never_seen))
        negs = rng.choice(len(never_seen), size=n_neg, replace=False) if n_neg else []
        pool = list(pos) + [never_seen[i] for i in negs]
        rng.shuffle(pool)
        candidates[pi] = tuple(pool)
    return MaskedSplit(graph=graph, positives=positives, candidates=candidates, mask_fraction=fraction)


def connected_doctors(graph: HeteroGraph) -> set:
    """Doctor indices with at least one edge."""
    out = set()
    for e in graph.edges:
        if e.src.kind == NodeKind.DOCTOR:
            out.add(e.src.index)
        if e.dst.kind == NodeKind.DOCTOR:
            out.add(e.dst.index)
    return out


def resample_candidates(split: MaskedSplit, eligible, candidate_size: int, seed: int) -> MaskedSplit:
    """Rebuild candidate pools with negatives drawn from `eligible` doctors.

    Restricting negatives (e.g. to doctors that actually have edges in the
    shard) avoids degenerate candidates that an embedding model could separate
    by connectivity alone. Positives always stay in the pool. Draws are seeded
    per universe patient index, so pools agree across training modes.
    """
    eligible = set(eligible)
    linked: dict = {}
    for p, d in split.graph.patient_doctor_pairs():
        linked.setdefault(p, set()).add(d)
    candidates: dict = {}
    for pi, pos in split.positives.items():
        pool_negs = sorted(eligible - set(pos) - linked.get(pi, set()))
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17, pi]))
        n_neg = min(max(candidate_size - len(pos), 0), len(pool_negs))
        picks = rng.choice(len(pool_negs), size=n_neg, replace=False) if n_neg else []
        pool = list(pos) + [pool_negs[i] for i in picks]
        rng.shuffle(pool)
        candidates[pi] = tuple(pool)
    return MaskedSplit(
        graph=split.graph,
        positives=dict(split.positives),
        candidates=candidates,
        mask_fraction=split.mask_fraction,
    )


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic claims generator.

    Shards are non-iid by construction: each region owns a block of doctors
    and patients overwhelmingly visit their own region. Each patient has a
    condition (a couple of specialties); their doctors mostly match it, their
    services come from the visited doctor's specialty service cluster (with
    uniform noise mixed in), and the doctors that appear only in the masked
    tail are drawn from *other* same-region patients' repertoires with the
    same specialty preference. Ranking future doctors therefore requires the
    condition-to-specialty structure that flows through service and
    co-visitation edges rather than any connectivity artifact. Successive
    same-cluster services favour a cyclic chain, giving the succession head
    something to learn.
    """

    region_sizes: tuple = (145, 158, 177, 207, 147, 171)
    doctors: int = 320
    services: int = 150
    specialties: int = 8
    claims_per_patient: tuple = (30, 60)
    fresh_tail_doctors: tuple = (5, 10)
    mask_fraction_hint: float = 0.65
    cross_region_rate: float = 0.08
    service_noise: float = 0.5
    condition_specialties: int = 2
    specialty_affinity: float = 0.85
    chain_step_prob: float = 0.6
    start_date: str = "2010-01-04"
    day_span: int = 1500

    def validate(self):
        if not self.region_sizes or any(s <= 0 for s in self.region_sizes):
            raise InvalidConfig("region_sizes must be non-empty positive integers")
        if self.doctors <= 0 or self.services <= 0 or self.specialties <= 0:
            raise InvalidConfig("doctors, services and specialties must be positive")
        lo, hi = self.claims_per_patient
        if lo < 2 or hi < lo:
            raise InvalidConfig("claims_per_patient must satisfy 2 <= lo <= hi")
        flo, fhi = self.fresh_tail_doctors
        if flo < 0 or fhi < flo:
            raise InvalidConfig("fresh_tail_doctors must satisfy 0 <= lo <= hi")
        if not (0.0 < self.mask_fraction_hint < 1.0):
            raise InvalidConfig("mask_fraction_hint must be in (0,1)")
        if self.doctors < len(self.region_sizes):
            raise InvalidConfig("need at least one doctor per region")
        if self.condition_specialties < 1 or not (0.0 <= self.specialty_affinity <= 1.0):
            raise InvalidConfig("condition_specialties must be >= 1 and specialty_affinity in [0,1]")


def synthesize_claims(gen: SynthConfig, seed: int) -> list:
    """Deterministic synthetic claim rows for a fixed (config, seed)."""
    gen.validate()
    rng = np.random.default_rng(seed)
    m = len(gen.region_sizes)
    start = _date.fromisoformat(gen.start_date).toordinal()

    doc_region = np.array([d * m // gen.doctors for d in range(gen.doctors)])
    docs_in_region = [np.flatnonzero(doc_region == r) for r in range(m)]
    # round-robin specialties within each region so every pool is covered
    doc_specialty = np.zeros(gen.doctors, dtype=np.int64)
    for r in range(m):
        for j, d in enumerate(docs_in_region[r]):
            doc_specialty[d] = j % gen.specialties
    svc_cluster = np.array([s * gen.specialties // gen.services for s in range(gen.services)])
    cluster_members = [np.flatnonzero(svc_cluster == c) for c in range(gen.specialties)]
    region_spec_pool = [
        [list(d for d in docs_in_region[r] if doc_specialty[d] == c) for c in range(gen.specialties)]
        for r in range(m)
    ]

    n_cond = min(gen.condition_specialties, gen.specialties)

    # first pass: per-patient demographics, conditions and head repertoires
    patients: list = []
    patient_idx = 0
    for region, size in enumerate(gen.region_sizes):
        for _ in range(size):
            condition = sorted(int(c) for c in rng.choice(gen.specialties, size=n_cond, replace=False))
            n_claims = int(rng.integers(gen.claims_per_patient[0], gen.claims_per_patient[1] + 1))
            head_len = min(max(math.ceil(gen.mask_fraction_hint * n_claims), 1), n_claims - 1)

            def draw_doctor():
                r = int(rng.integers(0, m)) if rng.random() < gen.cross_region_rate else region
                if rng.random() < gen.specialty_affinity:
                    spec = condition[int(rng.integers(0, n_cond))]
                    pool = region_spec_pool[r][spec]
                    if pool:
                        return int(pool[rng.integers(0, len(pool))])
                pool = docs_in_region[r]
                return int(pool[rng.integers(0, len(pool))])

            repertoire = sorted({draw_doctor() for _ in range(int(rng.integers(3, 7)))})
            patients.append(
                {
                    "pid": f"P{patient_idx:05d}",
                    "region": region,
                    "age": int(rng.integers(18, 91)),
                    "sex": ("M", "F", "U")[rng.choice(3, p=[0.48, 0.48, 0.04])],
                    "condition": condition,
                    "n_claims": n_claims,
                    "head_len": head_len,
                    "repertoire": repertoire,
                }
            )
            patient_idx += 1

    # fresh tail doctors come from other same-region repertoires (connected by
    # construction), preferring the patient's condition specialties
    region_repertoire_union: dict = {}
    for p in patients:
        region_repertoire_union.setdefault(p["region"], set()).update(p["repertoire"])

    claims: list = []
    for p in patients:
        region = p["region"]
        repertoire = p["repertoire"]
        condition = p["condition"]
        n_claims, head_len = p["n_claims"], p["head_len"]
        tail_len = n_claims - head_len

        shared = region_repertoire_union.get(region, set()) - set(repertoire)
        matching = sorted(d for d in shared if doc_specialty[d] in condition)
        other = sorted(d for d in shared if doc_specialty[d] not in condition)
        n_fresh = min(int(rng.integers(gen.fresh_tail_doctors[0], gen.fresh_tail_doctors[1] + 1)), tail_len, len(shared))
        fresh: list = []
        while len(fresh) < n_fresh:
            use_match = matching and (rng.random() < gen.specialty_affinity or not other)
            pool = matching if use_match else (other if other else matching)
            d = pool.pop(int(rng.integers(0, len(pool))))
            fresh.append(d)

        doctors_per_claim = [repertoire[rng.integers(0, len(repertoire))] for _ in range(head_len)]
        tail_docs = list(fresh)
        while len(tail_docs) < tail_len:
            tail_docs.append(repertoire[rng.integers(0, len(repertoire))])
        rng.shuffle(tail_docs)
        doctors_per_claim.extend(tail_docs)

        days = np.sort(rng.choice(gen.day_span, size=n_claims, replace=n_claims > gen.day_span))
        chain_pos: dict = {}
        for i in range(n_claims):
            d = doctors_per_claim[i]
            if rng.random() < gen.service_noise:
                s = int(rng.integers(0, gen.services))
            else:
                c = int(doc_specialty[d])
                members = cluster_members[c]
                if len(members) == 0:
                    s = int(rng.integers(0, gen.services))
                elif c in chain_pos and rng.random() < gen.chain_step_prob:
                    chain_pos[c] = (chain_pos[c] + 1) % len(members)
                    s = int(members[chain_pos[c]])
                else:
                    j = int(rng.integers(0, len(members)))
                    chain_pos[c] = j
                    s = int(members[j])
            claims.append(
                Claim(
                    patient_id=p["pid"],
                    doctor_id=f"D{d:05d}",
                    service_code=f"S{s:05d}",
                    service_type=ServiceSubtype(s % 3),
                    timestamp=start + int(days[i]),
                    patient_age=p["age"],
                    patient_sex=p["sex"],
                    patient_region=f"region{region}",
                    doctor_specialty=f"spec{doc_specialty[d]}",
                    doctor_region=f"region{doc_region[d]}",
                )
            )
    return claims


def synthesize(gen: SynthConfig, seed: int):
    """Build the full synthetic graph; returns (graph, region index per patient)."""
    claims = synthesize_claims(gen, seed)
    graph = build_graph(claims)
    region_of = np.zeros(graph.n_patients, dtype=np.int64)
    for i in range(graph.n_patients):
        region_of[i] = graph.patient_region[i]
    return graph, region_of


# ---------------------------------------------------------------------------
# persistence ("HGRAPH v1")


def save_graph(graph: HeteroGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        _write_graph(graph, fh)


def graph_to_text(graph: HeteroGraph) -> str:
    import io

    buf = io.StringIO()
    _write_graph(graph, buf)
    return buf.getvalue()


def _write_graph(graph: HeteroGraph, fh) -> None:
        fh.write("HGRAPH v1\n")
        fh.write(f"regions {len(graph.region_names)}\n")
        for name in graph.region_names:
            fh.write(name + "\n")
        fh.write(f"specialties {len(graph.specialty_names)}\n")
        for name in graph.specialty_names:
            fh.write(name + "\n")
        fh.write(f"patients {graph.n_patients}\n")
        for i in range(graph.n_patients):
            fh.write(
                f"{graph.patient_ids[i]} {graph.patient_age[i]} "
                f"{SEX_NAMES[int(graph.patient_sex[i])]} {graph.patient_region[i]}\n"
            )
        fh.write(f"doctors {graph.n_doctors}\n")
        for i in range(graph.n_doctors):
            fh.write(f"{graph.doctor_ids[i]} {graph.doctor_specialty[i]} {graph.doctor_region[i]}\n")
        fh.write(f"services {graph.n_services}\n")
        for i in range(graph.n_services):
            fh.write(f"{graph.service_codes[i]} {SUBTYPE_NAMES[ServiceSubtype(int(graph.service_subtype[i]))]}\n")
        fh.write(f"edges {len(graph.edges)}\n")
        for e in graph.edges:
            fh.write(
                f"{e.kind.name} {e.src.kind.name} {e.src.index} "
                f"{e.dst.kind.name} {e.dst.index} {e.timestamp} {e.weight!r}\n"
            )


def load_graph(path) -> HeteroGraph:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "HGRAPH v1":
        raise BadGraphFile("missing 'HGRAPH v1' header")
    pos = 1

    def expect_count(tag: str) -> int:
        nonlocal pos
        parts = lines[pos].split()
        if len(parts) != 2 or parts[0] != tag:
            raise BadGraphFile(f"line {pos + 1}: expected '{tag} <n>'")
        pos += 1
        return int(parts[1])

    def take(n: int) -> list:
        nonlocal pos
        out = lines[pos : pos + n]
        if len(out) != n:
            raise BadGraphFile("unexpected end of file")
        pos += n
        return out

    region_names = take(expect_count("regions"))
    specialty_names = take(expect_count("specialties"))
    n_p = expect_count("patients")
    p_rows = [ln.split() for ln in take(n_p)]
    n_d = expect_count("doctors")
    d_rows = [ln.split() for ln in take(n_d)]
    n_s = expect_count("services")
    s_rows = [ln.split() for ln in take(n_s)]
    n_e = expect_count("edges")
    subtype_by_index = [int(SUBTYPE_FROM_NAME[r[1]]) for r in s_rows]

    def parse_ref(kind_name: str, idx: str) -> NodeRef:
        kind = NodeKind[kind_name]
        i = int(idx)
        sub = ServiceSubtype(subtype_by_index[i]) if kind == NodeKind.SERVICE else None
        return NodeRef(kind, i, sub)

    edges = []
    for ln in take(n_e):
        parts = ln.split()
        if len(parts) != 7:
            raise BadGraphFile(f"bad edge line: {ln!r}")
        kind, sk, si, dk, di, ts, w = parts
        edges.append(Edge(parse_ref(sk, si), parse_ref(dk, di), EdgeKind[kind], int(ts), float(w)))

    return HeteroGraph(
        patient_ids=[r[0] for r in p_rows],
        doctor_ids=[r[0] for r in d_rows],
        service_codes=[r[0] for r in s_rows],
        patient_age=[int(r[1]) for r in p_rows],
        patient_sex=[SEX_CODES[r[2]] for r in p_rows],
        patient_region=[int(r[3]) for r in p_rows],
        doctor_specialty=[int(r[1]) for r in d_rows],
        doctor_region=[int(r[2]) for r in d_rows],
        service_subtype=subtype_by_index,
        region_names=region_names,
        specialty_names=specialty_names,
        edges=edges,
    )
