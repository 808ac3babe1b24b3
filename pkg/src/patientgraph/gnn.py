"""GCN / GraphSAGE / GAT layers, batch norm, and the stacked model, in numpy.

Each layer has a forward that returns ``(output, cache)`` and a backward that maps
the output gradient to input and parameter gradients using that cache. The
public ``*_forward`` functions return outputs only.

Message passing runs on a :class:`GraphOps`, the sparse operators derived once
from a :class:`~patientgraph.similarity.PatientGraph`:

* GCN:  ``P = D^-1/2 (A + I) D^-1/2`` with similarity-weighted ``A``
* SAGE: ``M`` with ``M[v, u] = 1/|N(v)|`` (unweighted neighbour mean)
* GAT:  directed edge list ``u -> v`` over ``N(v) + {v}``, grouped by target
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
KINDS = ("gcn", "sage", "gat")

_CHUNK = 1 << 17
_DENSE_LIMIT = 2048


class ShapeError(ValueError):
    pass


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# graph operators


class GraphOps:
    """Message-passing operators for one graph.

    ``dense=None`` picks dense matrices for graphs up to ``_DENSE_LIMIT`` nodes
    (faster at that scale) and scipy CSR otherwise; both paths compute the same
    quantities.
    """

    def __init__(self, n: int, i=(), j=(), w=(), dense: bool | None = None):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        w = np.asarray(w, dtype=float)
        if np.any(i == j):
            raise ShapeError("self-edges are not allowed in the similarity graph")
        self.n = n
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        vals = np.concatenate([w, w])
        A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        A.sum_duplicates()
        A.sort_indices()
        self.adjacency = A

        deg = np.asarray(A.sum(axis=1)).ravel() + 1.0
        inv_sqrt = 1.0 / np.sqrt(deg)
        A_hat = A + sp.identity(n, format="csr")
        self.gcn = sp.csr_matrix(sp.diags(inv_sqrt) @ A_hat @ sp.diags(inv_sqrt))
        self.gcn.sort_indices()

        B = A.copy()
        B.data[:] = 1.0
        counts = np.asarray(B.sum(axis=1)).ravel()
        scale = np.where(counts > 0, 1.0 / np.maximum(counts, 1.0), 0.0)
        self.sage = sp.csr_matrix(sp.diags(scale) @ B)
        self.sage.sort_indices()
        self.sage_t = sp.csr_matrix(self.sage.T)

        # GAT: row v of (B + I) lists the sources u of messages into v
        S = (B + sp.identity(n, format="csr")).tocsr()
        S.sort_indices()
        self.gat_indptr = S.indptr.astype(np.int64)
        self.gat_src = S.indices.astype(np.int64)
        self.gat_dst = np.repeat(np.arange(n), np.diff(self.gat_indptr))

        self.dense = n <= _DENSE_LIMIT if dense is None else dense
        if self.dense:
            self.gcn = self.gcn.toarray()
            self.sage = self.sage.toarray()
            self.sage_t = np.ascontiguousarray(self.sage.T)

    def attention_matrix(self, alpha: np.ndarray):
        """Operator with ``M[v, u] = alpha`` on each message edge ``u -> v``."""
        if self.dense:
            M = np.zeros((self.n, self.n))
            M[self.gat_dst, self.gat_src] = alpha
            return M
        return sp.csr_matrix((alpha, self.gat_src, self.gat_indptr), shape=(self.n, self.n))

    @classmethod
    def from_graph(cls, graph, dense: bool | None = None) -> "GraphOps":
        i, j, w = graph.edge_arrays()
        return cls(graph.n_nodes, i, j, w, dense)

    @classmethod
    def empty(cls, n: int, dense: bool | None = None) -> "GraphOps":
        return cls(n, dense=dense)


def as_ops(graph) -> GraphOps:
    return graph if isinstance(graph, GraphOps) else GraphOps.from_graph(graph)


def _check(h: np.ndarray, W: np.ndarray, ops: GraphOps):
    if h.ndim != 2 or h.shape[0] != ops.n:
        raise ShapeError(f"embedding has shape {h.shape}, graph has {ops.n} nodes")
    if W.shape[-2] != h.shape[1]:
        raise ShapeError(f"weight expects input dim {W.shape[-2]}, got {h.shape[1]}")
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite values in layer input")


# ---------------------------------------------------------------------------
# GCN


def _gcn(h, ops, W, b):
    _check(h, W, ops)
    ph = ops.gcn @ h
    return ph @ W + b, (h, ph)


def _gcn_back(dout, cache, ops, W):
    h, ph = cache
    grads = {"W": ph.T @ dout, "b": dout.sum(axis=0)}
    dh = ops.gcn.T @ (dout @ W.T)
    return dh, grads


def gcn_forward(h, graph, W, b=None):
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[1]) if b is None else b
    return _gcn(np.asarray(h, dtype=float), as_ops(graph), W, b)[0]


# ---------------------------------------------------------------------------
# GraphSAGE (mean aggregator, full neighbourhood)


def _sage(h, ops, W_self, W_neigh, b):
    _check(h, W_self, ops)
    _check(h, W_neigh, ops)
    mh = ops.sage @ h
    return h @ W_self + mh @ W_neigh + b, (h, mh)


def _sage_back(dout, cache, ops, W_self, W_neigh):
    h, mh = cache
    grads = {"W_self": h.T @ dout, "W_neigh": mh.T @ dout, "b": dout.sum(axis=0)}
    dh = dout @ W_self.T + ops.sage_t @ (dout @ W_neigh.T)
    return dh, grads


def sage_forward(h, graph, W_self, W_neigh, b=None):
    W_self = np.asarray(W_self, dtype=float)
    b = np.zeros(W_self.shape[1]) if b is None else b
    return _sage(np.asarray(h, dtype=float), as_ops(graph), W_self, np.asarray(W_neigh, float), b)[0]


# ---------------------------------------------------------------------------
# GAT


@dataclass
class AttentionMap:
    src: np.ndarray  # message source u
    dst: np.ndarray  # receiving node v
    weights: np.ndarray  # (heads, n_edges); rows over each v sum to 1

    @property
    def mean(self) -> np.ndarray:
        return self.weights.mean(axis=0)

    def to_json(self, node_ids: Sequence[str]) -> str:
        entries = [
            {
                "src": node_ids[u],
                "dst": node_ids[v],
                "heads": [float(x) for x in self.weights[:, e]],
                "mean": float(m),
            }
            for e, (u, v, m) in enumerate(zip(self.src, self.dst, self.mean))
        ]
        return json.dumps({"n_heads": int(self.weights.shape[0]), "edges": entries}, indent=1)

    def write_json(self, path, node_ids: Sequence[str]) -> None:
        Path(path).write_text(self.to_json(node_ids) + "\n", encoding="utf-8")


def _segment_sum(values, indptr):
    return np.add.reduceat(values, indptr[:-1]) if values.size else np.zeros(len(indptr) - 1)


def _edge_dots(a, b, src, dst):
    """Row-wise dot of a[dst] and b[src] without materialising the full edge tensor."""
    if a.shape[0] <= _DENSE_LIMIT:
        return (a @ b.T)[dst, src]
    out = np.empty(src.size)
    for s in range(0, src.size, _CHUNK):
        e = slice(s, s + _CHUNK)
        out[e] = np.einsum("ij,ij->i", a[dst[e]], b[src[e]])
    return out


def _gat(h, ops, W, a, b):
    """``W``: (heads, in, out); ``a``: (heads, 2*out), first half scores the source."""
    _check(h, W, ops)
    heads, _, d = W.shape
    if a.shape != (heads, 2 * d):
        raise ShapeError(f"attention vectors have shape {a.shape}, expected {(heads, 2 * d)}")
    src, dst, indptr = ops.gat_src, ops.gat_dst, ops.gat_indptr
    n = ops.n
    out = np.zeros((n, d))
    per_head = []
    alphas = np.empty((heads, src.size))
    for k in range(heads):
        z = h @ W[k]
        e = (z @ a[k, :d])[src] + (z @ a[k, d:])[dst]
        if not np.all(np.isfinite(e)):
            raise NumericalError("non-finite attention logits")
        lrelu = np.where(e > 0, e, LEAKY_SLOPE * e)
        peak = np.maximum.reduceat(lrelu, indptr[:-1])
        ex = np.exp(lrelu - peak[dst])
        alpha = ex / _segment_sum(ex, indptr)[dst]
        att = ops.attention_matrix(alpha)
        out += att @ z
        alphas[k] = alpha
        per_head.append((z, e, alpha, att))
    out = out / heads + b
    return out, (h, per_head), AttentionMap(src.copy(), dst.copy(), alphas)


def _gat_back(dout, cache, ops, W, a):
    h, per_head = cache
    heads, _, d = W.shape
    src, dst, indptr = ops.gat_src, ops.gat_dst, ops.gat_indptr
    n = ops.n
    g = dout / heads
    dW = np.zeros_like(W)
    da = np.zeros_like(a)
    dh = np.zeros_like(h)
    for k, (z, e, alpha, att) in enumerate(per_head):
        dz = att.T @ g
        dalpha = _edge_dots(g, z, src, dst)
        t = alpha * dalpha
        dl = t - alpha * _segment_sum(t, indptr)[dst]
        de = dl * np.where(e > 0, 1.0, LEAKY_SLOPE)
        ds_src = np.bincount(src, weights=de, minlength=n)
        ds_dst = np.bincount(dst, weights=de, minlength=n)
        da[k, :d] = z.T @ ds_src
        da[k, d:] = z.T @ ds_dst
        dz += np.outer(ds_src, a[k, :d]) + np.outer(ds_dst, a[k, d:])
        dW[k] = h.T @ dz
        dh += dz @ W[k].T
    return dh, {"W": dW, "a": da, "b": dout.sum(axis=0)}


def gat_forward(h, graph, W, a, b=None):
    """Multi-head attention layer; returns ``(embedding, AttentionMap)``."""
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[2]) if b is None else b
    out, _, att = _gat(np.asarray(h, dtype=float), as_ops(graph), W, np.asarray(a, float), b)
    return out, att


# ---------------------------------------------------------------------------
# batch norm


def _bn_train(h, gamma, beta):
    mu = h.mean(axis=0)
    var = h.var(axis=0)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mu) * inv
    return gamma * xhat + beta, (xhat, inv), mu, var


def _bn_back(dout, cache, gamma):
    xhat, inv = cache
    n = dout.shape[0]
    dxhat = dout * gamma
    dh = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dh, {"gamma": (dout * xhat).sum(axis=0), "beta": dout.sum(axis=0)}


def _running_update(running_mean, running_var, mu, var, n):
    unbiased = var * n / (n - 1) if n > 1 else var
    return (
        (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mu,
        (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased,
    )


def batch_norm_forward(h, gamma, beta, running_mean, running_var, mode="train",
                       num_batches_tracked: int = 0):
    """Column-wise batch norm.

    Train mode returns ``(out, (new_running_mean, new_running_var))`` computed with
    momentum 0.1; eval mode returns ``(out, None)`` and needs at least one prior
    train step.
    """
    h = np.asarray(h, dtype=float)
    if h.shape[1] != np.shape(gamma)[0]:
        raise ShapeError(f"batch norm over {np.shape(gamma)[0]} features got {h.shape[1]}")
    if mode == "train":
        out, _, mu, var = _bn_train(h, gamma, beta)
        return out, _running_update(running_mean, running_var, mu, var, h.shape[0])
    if mode != "eval":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if num_batches_tracked <= 0:
        raise NumericalError("batch norm running statistics are uninitialised (no train step yet)")
    return gamma * (h - running_mean) / np.sqrt(running_var + BN_EPS) + beta, None


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    heads: int = 4
    uses_batch_norm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0 or self.heads < 1:
            raise ShapeError(f"invalid layer dimensions in {self}")
        if self.activation not in ("relu", "identity"):
            raise ShapeError(f"unknown activation {self.activation!r}")


ARCHITECTURES = {
    "hybrid": ("gcn", "gcn", "sage", "sage", "gat"),
    "gcn": ("gcn",) * 5,
    "sage": ("sage",) * 5,
    "gat": ("gat",) * 5,
}


def make_stack(kinds: Sequence[str] = ARCHITECTURES["hybrid"], in_dim: int = 133, hidden: int = 64,
               heads: int = 4, batch_norm: bool = True) -> tuple[LayerSpec, ...]:
    """Layer chain ``in_dim -> hidden -> ... -> hidden``.

    Every layer but the last is followed by batch norm and ReLU; the last emits
    pre-activation embeddings for the prediction heads.
    """
    specs = []
    for i, kind in enumerate(kinds):
        last = i == len(kinds) - 1
        specs.append(LayerSpec(kind, in_dim if i == 0 else hidden, hidden, heads,
                               uses_batch_norm=batch_norm and not last,
                               activation="identity" if last else "relu"))
    return tuple(specs)


@dataclass
class ModelParams:
    specs: tuple[LayerSpec, ...]
    weights: dict  # trainable tensors, including both prediction heads
    buffers: dict  # batch-norm running statistics

    def copy(self) -> "ModelParams":
        return ModelParams(self.specs, {k: v.copy() for k, v in self.weights.items()},
                           {k: v.copy() for k, v in self.buffers.items()})

    @property
    def out_dim(self) -> int:
        return self.specs[-1].out_dim


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(specs: Sequence[LayerSpec], seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and attention vectors, zero biases, unit BN scale."""
    specs = tuple(specs)
    for prev, cur in zip(specs, specs[1:]):
        if prev.out_dim != cur.in_dim:
            raise ShapeError(f"layer chain broken: {prev.out_dim} -> {cur.in_dim}")
    rng = np.random.default_rng(seed)
    w, buf = {}, {}
    for l, s in enumerate(specs):
        p = f"l{l}."
        if s.kind == "gcn":
            w[p + "W"] = _glorot(rng, (s.in_dim, s.out_dim), s.in_dim, s.out_dim)
        elif s.kind == "sage":
            w[p + "W_self"] = _glorot(rng, (s.in_dim, s.out_dim), s.in_dim, s.out_dim)
            w[p + "W_neigh"] = _glorot(rng, (s.in_dim, s.out_dim), s.in_dim, s.out_dim)
        else:
            w[p + "W"] = _glorot(rng, (s.heads, s.in_dim, s.out_dim), s.in_dim, s.out_dim)
            w[p + "a"] = _glorot(rng, (s.heads, 2 * s.out_dim), 2 * s.out_dim, 1)
        w[p + "b"] = np.zeros(s.out_dim)
        if s.uses_batch_norm:
            w[p + "gamma"] = np.ones(s.out_dim)
            w[p + "beta"] = np.zeros(s.out_dim)
            buf[p + "running_mean"] = np.zeros(s.out_dim)
            buf[p + "running_var"] = np.ones(s.out_dim)
            buf[p + "num_batches_tracked"] = np.zeros(1)
    d = specs[-1].out_dim
    w["mortality.w"] = _glorot(rng, (d,), d, 1)
    w["mortality.b"] = np.zeros(1)
    w["severity.w"] = _glorot(rng, (d,), d, 1)
    w["severity.b"] = np.zeros(1)
    return ModelParams(specs, w, buf)


@dataclass
class ForwardResult:
    embedding: np.ndarray
    attention: AttentionMap | None
    caches: list
    buffer_updates: dict


def forward(x, ops: GraphOps, params: ModelParams, mode: str = "train") -> ForwardResult:
    """Run the stack. Pure: running-stat updates are returned, never applied."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = np.asarray(x, dtype=float)
    w, buf = params.weights, params.buffers
    caches, updates, attention = [], {}, None
    for l, s in enumerate(params.specs):
        p = f"l{l}."
        if s.kind == "gcn":
            z, cache = _gcn(h, ops, w[p + "W"], w[p + "b"])
        elif s.kind == "sage":
            z, cache = _sage(h, ops, w[p + "W_self"], w[p + "W_neigh"], w[p + "b"])
        else:
            z, cache, attention = _gat(h, ops, w[p + "W"], w[p + "a"], w[p + "b"])
        bn_cache = None
        if s.uses_batch_norm:
            if mode == "train":
                z, bn_cache, mu, var = _bn_train(z, w[p + "gamma"], w[p + "beta"])
                rm, rv = _running_update(buf[p + "running_mean"], buf[p + "running_var"], mu, var, z.shape[0])
                updates[p + "running_mean"] = rm
                updates[p + "running_var"] = rv
                updates[p + "num_batches_tracked"] = buf[p + "num_batches_tracked"] + 1
            else:
                z, _ = batch_norm_forward(z, w[p + "gamma"], w[p + "beta"], buf[p + "running_mean"],
                                          buf[p + "running_var"], "eval",
                                          int(buf[p + "num_batches_tracked"][0]))
        if s.activation == "relu":
            z = np.maximum(z, 0.0)
        caches.append((cache, bn_cache, z))
        h = z
    if not np.all(np.isfinite(h)):
        raise NumericalError("non-finite embedding")
    return ForwardResult(h, attention, caches, updates)


def backward(d_emb, result: ForwardResult, ops: GraphOps, params: ModelParams) -> dict:
    """Gradients of every stack parameter given the gradient at the final embedding.

    Requires a train-mode forward result (batch norm uses batch statistics).
    """
    w = params.weights
    grads = {}
    g = d_emb
    for l in reversed(range(len(params.specs))):
        s = params.specs[l]
        p = f"l{l}."
        cache, bn_cache, out = result.caches[l]
        if s.activation == "relu":
            g = g * (out > 0)
        if s.uses_batch_norm:
            if bn_cache is None:
                raise ValueError("backward needs a train-mode forward pass")
            g, bg = _bn_back(g, bn_cache, w[p + "gamma"])
            grads[p + "gamma"], grads[p + "beta"] = bg["gamma"], bg["beta"]
        if s.kind == "gcn":
            g, lg = _gcn_back(g, cache, ops, w[p + "W"])
        elif s.kind == "sage":
            g, lg = _sage_back(g, cache, ops, w[p + "W_self"], w[p + "W_neigh"])
        else:
            g, lg = _gat_back(g, cache, ops, w[p + "W"], w[p + "a"])
        for k, v in lg.items():
            grads[p + k] = v
    return grads


def model_forward(x, graph, params: ModelParams, mode: str = "train"):
    """Final embeddings and the last GAT layer's attention (None without GAT layers)."""
    res = forward(x, as_ops(graph), params, mode)
    return res.embedding, res.attention
