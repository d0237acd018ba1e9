"""Consensus (mixing) matrices over the worker network.

A valid matrix is symmetric, doubly stochastic, non-negative, matches the
declared network sparsity off the diagonal, and mixes (second-largest
eigenvalue magnitude lambda < 1, i.e. the topology is connected). lambda
governs how fast disagreement contracts and feeds the step-size bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional

import numpy as np

from .errors import WorkbenchError

DEFAULT_TOL = 1e-12


class NotDoublyStochastic(WorkbenchError):
    pass


class NotSymmetric(WorkbenchError):
    pass


class SparsityViolation(WorkbenchError):
    pass


class Disconnected(WorkbenchError):
    pass


class DisconnectedGraph(WorkbenchError):
    pass


class InvalidLambda(WorkbenchError):
    pass


class BadTopologyFile(WorkbenchError):
    pass


@dataclass(frozen=True)
class ConsensusMatrix:
    m: int
    entries: np.ndarray
    lam: float  # second-largest eigenvalue magnitude

    def mix(self, x: np.ndarray) -> np.ndarray:
        """Apply the mixing weights to per-worker rows of x (m, ...)."""
        return self.entries @ x


def spectral_gap_lambda(entries: np.ndarray) -> float:
    """max(|lambda_2|, |lambda_m|) by dense symmetric eigendecomposition."""
    entries = np.asarray(entries, dtype=np.float64)
    m = entries.shape[0]
    if m == 1:
        return 0.0
    eig = np.linalg.eigvalsh(entries)
    return float(max(abs(eig[0]), abs(eig[-2])))


def _normalize_edges(edges: Iterable, m: int) -> set:
    out = set()
    for i, j in edges:
        if not (0 <= i < m and 0 <= j < m) or i == j:
            raise SparsityViolation(f"edge ({i},{j}) is not a valid off-diagonal pair for m={m}")
        out.add((min(i, j), max(i, j)))
    return out


def validate(entries: np.ndarray, declared_edges: Optional[Iterable] = None, tol: float = DEFAULT_TOL) -> ConsensusMatrix:
    """Check the mixing-matrix properties and cache lambda.

    The sparsity pattern is enforced on off-diagonal entries only; diagonals
    are free (self weights are always allowed).
    """
    entries = np.asarray(entries, dtype=np.float64)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise NotDoublyStochastic(f"matrix must be square, got shape {entries.shape}")
    m = entries.shape[0]
    rows = entries.sum(axis=1)
    cols = entries.sum(axis=0)
    worst_row = int(np.argmax(np.abs(rows - 1.0)))
    worst_col = int(np.argmax(np.abs(cols - 1.0)))
    if abs(rows[worst_row] - 1.0) > tol or abs(cols[worst_col] - 1.0) > tol:
        raise NotDoublyStochastic(
            f"row {worst_row} sums to {rows[worst_row]!r}, column {worst_col} to {cols[worst_col]!r}"
        )
    if np.max(np.abs(entries - entries.T)) > tol:
        i, j = np.unravel_index(np.argmax(np.abs(entries - entries.T)), entries.shape)
        raise NotSymmetric(f"entries ({i},{j}) and ({j},{i}) differ by {entries[i, j] - entries[j, i]!r}")
    if np.min(entries) < -tol:
        i, j = np.unravel_index(np.argmin(entries), entries.shape)
        raise SparsityViolation(f"negative weight at ({i},{j}): {entries[i, j]!r}")
    if declared_edges is not None:
        edge_set = _normalize_edges(declared_edges, m)
        for i in range(m):
            for j in range(i + 1, m):
                present = (i, j) in edge_set
                if present and entries[i, j] <= tol:
                    raise SparsityViolation(f"declared edge ({i},{j}) has weight {entries[i, j]!r}")
                if not present and abs(entries[i, j]) > tol:
                    raise SparsityViolation(f"weight {entries[i, j]!r} at non-edge ({i},{j})")
    lam = spectral_gap_lambda(entries)
    if m > 1 and lam >= 1.0 - 1e-12:
        raise Disconnected(f"lambda = {lam!r}; topology does not mix")
    return ConsensusMatrix(m=m, entries=entries.copy(), lam=lam)


def metropolis_weights(edges: Iterable, m: int) -> ConsensusMatrix:
    """Metropolis construction: w_ij = 1/(1 + max(deg_i, deg_j)) on edges,
    diagonal absorbs the remainder."""
    edge_set = _normalize_edges(edges, m)
    adj = [set() for _ in range(m)]
    for i, j in edge_set:
        adj[i].add(j)
        adj[j].add(i)
    # connectivity check (breadth-first)
    if m > 1:
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        nxt.append(v)
            frontier = nxt
        if len(seen) != m:
            raise DisconnectedGraph(f"only {len(seen)} of {m} workers reachable from worker 0")
    deg = [len(a) for a in adj]
    entries = np.zeros((m, m))
    for i, j in edge_set:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        entries[i, j] = w
        entries[j, i] = w
    for i in range(m):
        entries[i, i] = 1.0 - entries[i].sum()
    return validate(entries, declared_edges=edge_set)


def ring_edges(m: int) -> list:
    if m < 2:
        return []
    if m == 2:
        return [(0, 1)]
    return [(i, (i + 1) % m) for i in range(m)]


def complete_edges(m: int) -> list:
    return [(i, j) for i in range(m) for j in range(i + 1, m)]


def star_edges(m: int) -> list:
    return [(0, i) for i in range(1, m)]


NAMED_GRAPHS = {"ring": ring_edges, "complete": complete_edges, "star": star_edges}


def step_size_bound(L: float, lam: float, m: int) -> float:
    """Largest constant step size the convergence guarantee admits: the
    minimum of nine terms in (L, lambda, m)."""
    if L <= 0:
        raise InvalidLambda(f"Lipschitz constant must be positive, got {L}")
    if not (0.0 <= lam < 1.0):
        raise InvalidLambda(f"lambda must lie in [0, 1), got {lam}")
    if m < 1:
        raise InvalidLambda(f"worker count must be >= 1, got {m}")
    one = 1.0 - lam
    terms = (
        1.0 / (3.0 * L),
        np.sqrt(one / (72.0 * m * L * L)),
        np.sqrt(1.0 / (24.0 * m * L * L)),
        1.0 / 5.0,
        1.0 / (40.0 * L * L),
        one / (120.0 * L * L),
        one * one / 3.0,
        one / (6.0 * L),
        np.sqrt(one / (12.0 * L * L)),
    )
    return float(min(terms))


# ---------------------------------------------------------------------------
# topology files: first line m, then m rows of m space-separated decimals


def save_topology(entries: np.ndarray, path) -> None:
    entries = np.asarray(entries, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{entries.shape[0]}\n")
        for row in entries:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_topology(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise BadTopologyFile("empty topology file")
    try:
        m = int(lines[0])
    except ValueError:
        raise BadTopologyFile(f"first line must be the worker count, got {lines[0]!r}")
    if len(lines) != m + 1:
        raise BadTopologyFile(f"expected {m} matrix rows, found {len(lines) - 1}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != m:
            raise BadTopologyFile(f"row {ln!r} does not have {m} entries")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise BadTopologyFile(f"non-numeric entry in row {ln!r}")
    return np.array(rows)


def six_region_topology() -> np.ndarray:
    """The bundled six-region mixing matrix example."""
    path = resources.files("hetero_fdl.data").joinpath("six_region_topology.txt")
    with resources.as_file(path) as p:
        return load_topology(p)
