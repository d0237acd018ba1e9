import numpy as np
import pytest

from hetero_fdl.ehr_graph import (
    Edge,
    EdgeKind,
    HeteroGraph,
    NodeKind,
    NodeRef,
    ServiceSubtype,
    SynthConfig,
)


def make_toy5():
    """5-node graph with every edge kind: 1 patient, 2 doctors, 2 services."""
    P = NodeRef(NodeKind.PATIENT, 0)
    D0, D1 = NodeRef(NodeKind.DOCTOR, 0), NodeRef(NodeKind.DOCTOR, 1)
    S0 = NodeRef(NodeKind.SERVICE, 0, ServiceSubtype.DX)
    S1 = NodeRef(NodeKind.SERVICE, 1, ServiceSubtype.RX)
    edges = [
        Edge(P, S0, EdgeKind.PATIENT_SERVICE, 10, 0.6),
        Edge(P, S1, EdgeKind.PATIENT_SERVICE, 12, 1.0),
        Edge(D0, S0, EdgeKind.DOCTOR_SERVICE, 10, 0.6),
        Edge(D1, S1, EdgeKind.DOCTOR_SERVICE, 12, 1.0),
        Edge(S0, S1, EdgeKind.SERVICE_SERVICE, 12, 1.0),
        Edge(P, D0, EdgeKind.PATIENT_DOCTOR, 10, 0.6),
    ]
    return HeteroGraph(
        patient_ids=["p0"],
        doctor_ids=["d0", "d1"],
        service_codes=["s0", "s1"],
        patient_age=[40],
        patient_sex=[0],
        patient_region=[0],
        doctor_specialty=[0, 1],
        doctor_region=[0, 0],
        service_subtype=[int(ServiceSubtype.DX), int(ServiceSubtype.RX)],
        region_names=["r0"],
        specialty_names=["spec0", "spec1"],
        edges=edges,
    )


@pytest.fixture
def toy5():
    return make_toy5()


def random_hetero_graph(rng, n_p=3, n_d=3, n_s=4):
    """Random valid graph touching all edge kinds; used by property tests."""
    def svc(i):
        return NodeRef(NodeKind.SERVICE, i, ServiceSubtype(i % 3))

    edges = []
    for p in range(n_p):
        for s in rng.choice(n_s, size=rng.integers(1, n_s + 1), replace=False):
            edges.append(Edge(NodeRef(NodeKind.PATIENT, p), svc(int(s)), EdgeKind.PATIENT_SERVICE, 10, float(rng.uniform(0.2, 1.0))))
        d = int(rng.integers(0, n_d))
        edges.append(Edge(NodeRef(NodeKind.PATIENT, p), NodeRef(NodeKind.DOCTOR, d), EdgeKind.PATIENT_DOCTOR, 10, float(rng.uniform(0.2, 1.0))))
    for d in range(n_d):
        for s in rng.choice(n_s, size=rng.integers(1, 3), replace=False):
            edges.append(Edge(NodeRef(NodeKind.DOCTOR, d), svc(int(s)), EdgeKind.DOCTOR_SERVICE, 11, float(rng.uniform(0.2, 1.0))))
    for s in range(n_s - 1):
        if rng.random() < 0.7:
            edges.append(Edge(svc(s), svc(s + 1), EdgeKind.SERVICE_SERVICE, 12, float(rng.integers(1, 4))))
    return HeteroGraph(
        patient_ids=[f"p{i}" for i in range(n_p)],
        doctor_ids=[f"d{i}" for i in range(n_d)],
        service_codes=[f"s{i}" for i in range(n_s)],
        patient_age=list(rng.integers(20, 80, size=n_p)),
        patient_sex=list(rng.integers(0, 3, size=n_p)),
        patient_region=list(rng.integers(0, 2, size=n_p)),
        doctor_specialty=list(rng.integers(0, 2, size=n_d)),
        doctor_region=list(rng.integers(0, 2, size=n_d)),
        service_subtype=[i % 3 for i in range(n_s)],
        region_names=["r0", "r1"],
        specialty_names=["sp0", "sp1"],
        edges=edges,
    )


def small_synth_config(**overrides) -> SynthConfig:
    base = dict(
        region_sizes=(10, 10),
        doctors=25,
        services=15,
        specialties=3,
        claims_per_patient=(12, 20),
        fresh_tail_doctors=(2, 4),
        cross_region_rate=0.1,
        service_noise=0.4,
    )
    base.update(overrides)
    return SynthConfig(**base)
