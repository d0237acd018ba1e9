import math

import numpy as np
import pytest

from hetero_fdl import ehr_graph as eg
from hetero_fdl.ehr_graph import Edge, EdgeKind, HeteroGraph, NodeKind, NodeRef, ServiceSubtype
from hetero_fdl.features import DimMismatch, init_features, ppmi_matrix
from tests.conftest import small_synth_config


def graph_with_attrs():
    """One doctor with specialty 2 of 5 and region 1 of 3."""
    D = NodeRef(NodeKind.DOCTOR, 0)
    S = NodeRef(NodeKind.SERVICE, 0, ServiceSubtype.DX)
    return HeteroGraph(
        patient_ids=["p0"],
        doctor_ids=["d0"],
        service_codes=["s0"],
        patient_age=[52],
        patient_sex=[1],
        patient_region=[2],
        doctor_specialty=[2],
        doctor_region=[1],
        service_subtype=[0],
        region_names=["r0", "r1", "r2"],
        specialty_names=["a", "b", "c", "d", "e"],
        edges=[Edge(D, S, EdgeKind.DOCTOR_SERVICE, 3, 1.0)],
    )


def test_one_hot_doctor_example():
    table = init_features(graph_with_attrs(), "onehot")
    np.testing.assert_array_equal(table.doctor[0], [0, 0, 1, 0, 0, 0, 1, 0])
    assert table.doctor_specialty_encoded


def test_one_hot_row_sums_and_exclusion():
    g, _ = eg.synthesize(small_synth_config(), seed=2)
    table = init_features(g, "onehot")
    np.testing.assert_allclose(table.patient.sum(axis=1), 3.0)  # region + sex + age bin
    np.testing.assert_allclose(table.doctor.sum(axis=1), 2.0)  # specialty + region
    np.testing.assert_allclose(table.service.sum(axis=1), 1.0)  # subtype
    noleak = init_features(g, "onehot", include_doctor_specialty=False)
    np.testing.assert_allclose(noleak.doctor.sum(axis=1), 1.0)
    assert not noleak.doctor_specialty_encoded


def test_one_hot_dim_mismatch():
    g = graph_with_attrs()
    good = init_features(g, "onehot")
    dims = good.dims()
    init_features(g, "onehot", dims=dims)  # consistent dims accepted
    dims[NodeKind.DOCTOR] += 1
    with pytest.raises(DimMismatch):
        init_features(g, "onehot", dims=dims)


def test_gaussian_deterministic_and_row_norms():
    g, _ = eg.synthesize(small_synth_config(region_sizes=(60, 60)), seed=4)
    dims = {NodeKind.PATIENT: 64, NodeKind.DOCTOR: 96, NodeKind.SERVICE: 128}
    t1 = init_features(g, "gaussian", dims, seed=7)
    t2 = init_features(g, "gaussian", dims, seed=7)
    for kind in NodeKind:
        np.testing.assert_array_equal(t1.for_kind(kind), t2.for_kind(kind))
    for kind in NodeKind:
        norms = np.linalg.norm(t1.for_kind(kind), axis=1)
        assert abs(norms.mean() - 1.0) < 0.1


def test_ppmi_hand_oracle():
    """a,b always co-occur; c,d co-occur; a never with c."""
    svc = [NodeRef(NodeKind.SERVICE, i, ServiceSubtype(i % 3)) for i in range(4)]
    edges = [
        Edge(svc[0], svc[1], EdgeKind.SERVICE_SERVICE, 1, 2.0),  # (a,b) x 2 patients
        Edge(svc[2], svc[3], EdgeKind.SERVICE_SERVICE, 1, 2.0),  # (c,d) x 2 patients
    ]
    g = HeteroGraph([], [], ["a", "b", "c", "d"], [], [], [], [], [], [0, 1, 2, 0], [], [], edges)
    pm = ppmi_matrix(g)
    # joint p(a,b)=0.5, marginals p_src(a)=0.5, p_dst(b)=0.5 -> PMI = ln 2
    assert pm[0, 1] == pytest.approx(math.log(2.0), abs=1e-12)
    assert pm[0, 2] == 0.0
    assert pm[1, 0] == 0.0  # never observed in that order
    table = init_features(g, "pmi", dims={NodeKind.PATIENT: 2, NodeKind.DOCTOR: 2, NodeKind.SERVICE: 3}, seed=0)
    assert table.service.shape == (4, 3)


def test_pmi_pads_when_wider_than_vocabulary():
    g = graph_with_attrs()
    table = init_features(g, "pmi", dims={NodeKind.PATIENT: 2, NodeKind.DOCTOR: 2, NodeKind.SERVICE: 5}, seed=0)
    assert table.service.shape == (1, 5)


def test_unknown_scheme():
    with pytest.raises(DimMismatch):
        init_features(graph_with_attrs(), "bert")
