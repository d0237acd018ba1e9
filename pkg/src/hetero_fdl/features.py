"""Initial node feature tables.

Pretrained text embeddings are out of scope here; these self-contained
initializers give each node kind a dense float matrix the attention layers
then refine. Age bins: <30, 30-44, 45-59, 60-74, >=75.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ehr_graph import HeteroGraph, NodeKind
from .errors import WorkbenchError

AGE_BIN_EDGES = (30, 45, 60, 75)


class DimMismatch(WorkbenchError):
    pass


@dataclass
class FeatureTable:
    patient: np.ndarray
    doctor: np.ndarray
    service: np.ndarray
    doctor_specialty_encoded: bool = False

    def for_kind(self, kind: NodeKind) -> np.ndarray:
        return {NodeKind.PATIENT: self.patient, NodeKind.DOCTOR: self.doctor, NodeKind.SERVICE: self.service}[kind]

    def dims(self) -> dict:
        return {
            NodeKind.PATIENT: self.patient.shape[1],
            NodeKind.DOCTOR: self.doctor.shape[1],
            NodeKind.SERVICE: self.service.shape[1],
        }

    def validate(self, graph: HeteroGraph) -> None:
        for kind in NodeKind:
            mat = self.for_kind(kind)
            if mat.shape[0] != graph.count(kind):
                raise DimMismatch(f"{kind.name} table has {mat.shape[0]} rows for {graph.count(kind)} nodes")
            if not np.all(np.isfinite(mat)):
                raise DimMismatch(f"{kind.name} table contains non-finite entries")


def _gaussian(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    # variance 1/dim keeps expected row norms near 1
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n, dim))


def _one_hot(values: np.ndarray, width: int) -> np.ndarray:
    out = np.zeros((len(values), width))
    out[np.arange(len(values)), values] = 1.0
    return out


def _one_hot_tables(graph: HeteroGraph, include_doctor_specialty: bool):
    n_regions = max(len(graph.region_names), 1)
    n_spec = max(len(graph.specialty_names), 1)
    age_bin = np.digitize(graph.patient_age, AGE_BIN_EDGES)
    patient = np.concatenate(
        [
            _one_hot(graph.patient_region, n_regions),
            _one_hot(graph.patient_sex, 3),
            _one_hot(age_bin, len(AGE_BIN_EDGES) + 1),
        ],
        axis=1,
    )
    doctor_parts = []
    if include_doctor_specialty:
        doctor_parts.append(_one_hot(graph.doctor_specialty, n_spec))
    doctor_parts.append(_one_hot(graph.doctor_region, n_regions))
    doctor = np.concatenate(doctor_parts, axis=1)
    service = _one_hot(graph.service_subtype, 3)
    return patient, doctor, service


def ppmi_matrix(graph: HeteroGraph) -> np.ndarray:
    """Positive PMI over directed consecutive-service pair counts."""
    from .ehr_graph import EdgeKind

    n = graph.n_services
    counts = np.zeros((n, n))
    for e in graph.edges:
        if e.kind == EdgeKind.SERVICE_SERVICE:
            counts[e.src.index, e.dst.index] += e.weight
    total = counts.sum()
    if total == 0:
        return np.zeros((n, n))
    p_src = counts.sum(axis=1) / total
    p_dst = counts.sum(axis=0) / total
    out = np.zeros((n, n))
    nz = counts > 0
    denom = np.outer(p_src, p_dst)
    out[nz] = np.log((counts[nz] / total) / denom[nz])
    return np.maximum(out, 0.0)


def _truncate_by_variance(mat: np.ndarray, dim: int) -> np.ndarray:
    if mat.shape[1] >= dim:
        var = mat.var(axis=0)
        # stable tie-break: variance descending, then column index ascending
        order = np.lexsort((np.arange(len(var)), -var))[:dim]
        return mat[:, np.sort(order)]
    out = np.zeros((mat.shape[0], dim))
    out[:, : mat.shape[1]] = mat
    return out


def init_features(
    graph: HeteroGraph,
    scheme: str,
    dims: dict | None = None,
    seed: int = 0,
    include_doctor_specialty: bool = True,
) -> FeatureTable:
    """Build per-kind feature matrices.

    scheme:
      * ``gaussian`` -- i.i.d. N(0, 1/F) entries, shapes from `dims`.
      * ``onehot``   -- concatenated one-hot attribute encodings, widths
        inferred (explicit `dims` that disagree raise DimMismatch).
      * ``pmi``      -- services get the positive-PMI succession matrix cut to
        the top-variance `dims` columns; other kinds fall back to gaussian.
    """
    rng = np.random.default_rng(seed)
    if scheme == "gaussian":
        if dims is None:
            raise DimMismatch("gaussian scheme needs explicit dims per node kind")
        _check_dims(dims)
        table = FeatureTable(
            patient=_gaussian(rng, graph.n_patients, dims[NodeKind.PATIENT]),
            doctor=_gaussian(rng, graph.n_doctors, dims[NodeKind.DOCTOR]),
            service=_gaussian(rng, graph.n_services, dims[NodeKind.SERVICE]),
            doctor_specialty_encoded=False,
        )
    elif scheme == "onehot":
        patient, doctor, service = _one_hot_tables(graph, include_doctor_specialty)
        inferred = {NodeKind.PATIENT: patient.shape[1], NodeKind.DOCTOR: doctor.shape[1], NodeKind.SERVICE: service.shape[1]}
        if dims is not None:
            for kind, want in dims.items():
                if want != inferred[kind]:
                    raise DimMismatch(f"{kind.name}: requested dim {want} but one-hot encoding infers {inferred[kind]}")
        table = FeatureTable(patient, doctor, service, doctor_specialty_encoded=include_doctor_specialty)
    elif scheme == "pmi":
        if dims is None:
            raise DimMismatch("pmi scheme needs explicit dims per node kind")
        _check_dims(dims)
        service = _truncate_by_variance(ppmi_matrix(graph), dims[NodeKind.SERVICE])
        table = FeatureTable(
            patient=_gaussian(rng, graph.n_patients, dims[NodeKind.PATIENT]),
            doctor=_gaussian(rng, graph.n_doctors, dims[NodeKind.DOCTOR]),
            service=service,
            doctor_specialty_encoded=False,
        )
    else:
        raise DimMismatch(f"unknown feature scheme {scheme!r}")
    table.validate(graph)
    return table


def _check_dims(dims: dict) -> None:
    for kind in NodeKind:
        if kind not in dims or dims[kind] < 1:
            raise DimMismatch(f"dims must give a positive width for {kind.name}")
