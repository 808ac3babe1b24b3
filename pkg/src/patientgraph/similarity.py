"""Hybrid cosine/Jaccard patient similarity and threshold graph construction."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .encoding import EncodingSchema


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityParams:
    alpha: float = 0.7
    tau_percentile: float = 90.0
    tau_override: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise GraphError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not (0.0 < self.tau_percentile < 100.0):
            raise GraphError(f"tau_percentile must lie in (0, 100), got {self.tau_percentile}")


def cosine_similarity(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise GraphError(f"length mismatch: {x.shape} vs {y.shape}")
    nx, ny = np.sqrt(np.dot(x, x)), np.sqrt(np.dot(y, y))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def jaccard_similarity(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def hybrid_similarity(u_fv, v_fv, schema: EncodingSchema, params: SimilarityParams) -> float:
    u_fv = np.asarray(u_fv, dtype=float)
    v_fv = np.asarray(v_fv, dtype=float)
    if u_fv.shape != (schema.total_dim,) or v_fv.shape != (schema.total_dim,):
        raise GraphError(
            f"feature vectors of shape {u_fv.shape}/{v_fv.shape} do not match schema width {schema.total_dim}"
        )
    _, rows = _similarity_rows(u_fv[None, :], np.vstack([v_fv]), schema.n_continuous, params.alpha)
    return float(rows[0])


def compute_tau(similarities, percentile: float) -> float:
    """Nearest-rank percentile: element ``ceil(p/100 * n) - 1`` of the sorted values."""
    values = np.asarray(similarities, dtype=float).ravel()
    n = values.size
    if n == 0:
        raise GraphError("cannot compute a threshold from an empty similarity list")
    if not (0.0 < percentile < 100.0):
        raise GraphError(f"percentile must lie in (0, 100), got {percentile}")
    # round() guards against p*n/100 landing a hair above an integer
    k = max(math.ceil(round(percentile * n / 100.0, 9)) - 1, 0)
    return float(np.partition(values, k)[k])


class _Features:
    """Pre-split feature blocks shared by every similarity evaluation."""

    def __init__(self, fvs: np.ndarray, n_continuous: int):
        fvs = np.asarray(fvs, dtype=float)
        self.cont = np.ascontiguousarray(fvs[:, :n_continuous])
        self.binary = fvs[:, n_continuous:] == 1.0
        self.sq_norm = np.einsum("ij,ij->i", self.cont, self.cont)
        self.count = self.binary.sum(axis=1)


def _row(feats: _Features, i: int, others: _Features, cols, alpha: float) -> np.ndarray:
    """Similarities of node ``i`` (in ``feats``) to nodes ``cols`` of ``others``.

    Every pair is evaluated from its own two rows only, so the result for a pair is
    identical no matter which batch it is computed in (or in which argument order).
    """
    c = others.cont[cols]
    dots = np.einsum("ij,ij->i", c, np.broadcast_to(feats.cont[i], c.shape))
    denom = np.sqrt(feats.sq_norm[i]) * np.sqrt(others.sq_norm[cols])
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    inter = (others.binary[cols] & feats.binary[i]).sum(axis=1)
    union = feats.count[i] + others.count[cols] - inter
    jac = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return alpha * cos + (1.0 - alpha) * jac


def _similarity_rows(a: np.ndarray, b: np.ndarray, n_continuous: int, alpha: float):
    fa, fb = _Features(a, n_continuous), _Features(b, n_continuous)
    return fa, _row(fa, 0, fb, np.arange(len(b)), alpha)


@dataclass(frozen=True)
class PatientGraph:
    node_ids: tuple[str, ...]
    features: np.ndarray
    edges: dict  # (i, j) with i < j -> weight
    tau: float
    params: SimilarityParams
    n_continuous: int
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._index:
            self._index.update({nid: i for i, nid in enumerate(self.node_ids)})

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index(self, node_id: str) -> int:
        return self._index[node_id]

    def weight(self, u: int, v: int) -> float:
        if u == v:
            return 0.0
        return self.edges.get((min(u, v), max(u, v)), 0.0)

    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges as parallel (i, j, w) arrays, i < j, sorted."""
        if not self.edges:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        keys = sorted(self.edges)
        ij = np.array(keys, dtype=np.int64)
        w = np.array([self.edges[k] for k in keys])
        return ij[:, 0], ij[:, 1], w

    def neighbors(self, u: int) -> list[int]:
        return sorted(v for (a, b) in self.edges for v in ((b,) if a == u else (a,) if b == u else ()))

    def dense_adjacency(self) -> np.ndarray:
        A = np.zeros((self.n_nodes, self.n_nodes))
        for (i, j), w in self.edges.items():
            A[i, j] = A[j, i] = w
        return A

    def permuted(self, perm: Sequence[int]) -> "PatientGraph":
        """Graph with node ``perm[k]`` moved to position ``k``."""
        perm = list(perm)
        inv = {old: new for new, old in enumerate(perm)}
        edges = {}
        for (i, j), w in self.edges.items():
            a, b = inv[i], inv[j]
            edges[(min(a, b), max(a, b))] = w
        return PatientGraph(tuple(self.node_ids[k] for k in perm), self.features[perm], edges,
                            self.tau, self.params, self.n_continuous)

    # -- export ---------------------------------------------------------

    def write_edge_list(self, path) -> None:
        i, j, w = self.edge_arrays()
        lines = ["u,v,weight"]
        lines += [f"{self.node_ids[a]},{self.node_ids[b]},{x:.12g}" for a, b, x in zip(i, j, w)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def sidecar(self) -> dict:
        return {
            "tau": self.tau,
            "alpha": self.params.alpha,
            "percentile": self.params.tau_percentile,
            "tau_override": self.params.tau_override,
            "n_nodes": self.n_nodes,
            "n_edges": self.n_edges,
        }

    def write_sidecar(self, path) -> None:
        Path(path).write_text(json.dumps(self.sidecar(), indent=2) + "\n", encoding="utf-8")


def build_graph(cohort_fvs, ids: Sequence[str], schema: EncodingSchema,
                params: SimilarityParams = SimilarityParams()) -> PatientGraph:
    """All-pairs hybrid similarity, threshold at tau, keep pairs with S > tau.

    Isolated nodes are kept.
    """
    X = np.asarray(cohort_fvs, dtype=float)
    ids = tuple(ids)
    n = len(ids)
    if n < 2:
        raise GraphError(f"need at least 2 patients to build a graph, got {n}")
    if len(set(ids)) != n:
        raise GraphError("patient ids must be unique")
    if X.shape != (n, schema.total_dim):
        raise GraphError(f"features have shape {X.shape}, expected ({n}, {schema.total_dim})")

    feats = _Features(X, schema.n_continuous)
    sims = np.empty(n * (n - 1) // 2)
    starts = np.empty(n, dtype=np.int64)
    pos = 0
    for i in range(n - 1):
        starts[i] = pos
        row = _row(feats, i, feats, np.arange(i + 1, n), params.alpha)
        sims[pos:pos + row.size] = row
        pos += row.size

    tau = float(params.tau_override) if params.tau_override is not None else compute_tau(sims, params.tau_percentile)

    edges = {}
    for i in range(n - 1):
        row = sims[starts[i]:starts[i] + (n - 1 - i)]
        for k in np.flatnonzero(row > tau):
            edges[(i, i + 1 + int(k))] = float(row[k])
    return PatientGraph(ids, X.copy(), edges, tau, params, schema.n_continuous)


def add_node(graph: PatientGraph, fv, node_id: str) -> PatientGraph:
    """Insert one patient, connecting it under the graph's frozen tau."""
    if node_id in graph.node_ids:
        raise GraphError(f"duplicate node id {node_id!r}")
    fv = np.asarray(fv, dtype=float)
    if fv.shape != (graph.features.shape[1],):
        raise GraphError(f"feature vector shape {fv.shape} does not match graph width")
    n = graph.n_nodes
    X = np.vstack([graph.features, fv])
    new = _Features(fv[None, :], graph.n_continuous)
    old = _Features(graph.features, graph.n_continuous)
    row = _row(new, 0, old, np.arange(n), graph.params.alpha)
    edges = dict(graph.edges)
    for k in np.flatnonzero(row > graph.tau):
        edges[(int(k), n)] = float(row[k])
    return PatientGraph(graph.node_ids + (node_id,), X, edges, graph.tau, graph.params, graph.n_continuous)


def recompute_similarity(graph: PatientGraph, u: int, v: int) -> float:
    feats = _Features(graph.features[[u, v]], graph.n_continuous)
    return float(_row(feats, 0, feats, np.array([1]), graph.params.alpha)[0])
