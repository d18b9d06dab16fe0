"""Graph supports: learned adjacency from node embeddings and normalized
pre-defined road graphs."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor, as_tensor, matmul, relu, softmax_rows, stack, transpose

DAGG_VARIANTS = ("dagg_r", "dagg_1", "dagg_2")
SUPPORT_VARIANTS = DAGG_VARIANTS + ("predefined",)
_N_SUPPORTS = {"dagg_r": 1, "dagg_1": 2, "dagg_2": 3, "predefined": 2}


def n_supports(variant: str) -> int:
    try:
        return _N_SUPPORTS[variant]
    except KeyError:
        raise ValueError(f"unknown support variant {variant!r}; expected one of {SUPPORT_VARIANTS}") from None


def dagg_matrix(emb) -> Tensor:
    """Row-normalized similarity graph ``softmax(relu(E @ E.T))``.

    Produces the normalized adjacency directly; no separate degree matrix is
    formed.  Differentiable back to ``emb``.
    """
    emb = as_tensor(emb)
    if emb.ndim != 2:
        raise ValueError(f"node embedding must be N x d, got {emb.shape}")
    return softmax_rows(relu(matmul(emb, transpose(emb))))


@dataclass
class PredefinedGraph:
    """Undirected weighted graph given as an edge list.

    An edge (u, v, w) sets both A[u, v] and A[v, u] to w; a later duplicate
    overrides an earlier one.
    """

    n_nodes: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ValueError(f"graph needs at least 2 nodes, got {self.n_nodes}")
        for u, v, w in self.edges:
            if not (0 <= u < self.n_nodes and 0 <= v < self.n_nodes):
                raise ValueError(f"edge ({u}, {v}) out of range for {self.n_nodes} nodes")
            if u == v:
                raise ValueError(f"self-loop on node {u}; self information comes from the identity support")
            if not w >= 0:
                raise ValueError(f"edge ({u}, {v}) has negative weight {w}")

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for u, v, w in self.edges:
            a[u, v] = a[v, u] = w
        return a

    def normalized_adjacency(self) -> np.ndarray:
        """``D^-1/2 A D^-1/2``; zero-degree nodes get all-zero rows and columns."""
        a = self.adjacency()
        deg = a.sum(axis=1)
        inv_sqrt = np.zeros_like(deg)
        nz = deg > 0
        inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
        return inv_sqrt[:, None] * a * inv_sqrt[None, :]


def load_edge_list(path, n_nodes: int) -> PredefinedGraph:
    """Read ``u,v,weight`` rows; a non-numeric first row is taken as a header."""
    edges = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                u, v = int(row[0]), int(row[1])
                w = float(row[2]) if len(row) > 2 and row[2].strip() else 1.0
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise ValueError(f"{path}:{lineno}: expected 'u,v,weight', got {row!r}") from None
            edges.append((u, v, w))
    return PredefinedGraph(n_nodes, edges)


def write_edge_list(path, graph: PredefinedGraph) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "v", "weight"])
        for u, v, wt in graph.edges:
            w.writerow([u, v, repr(float(wt))])


@dataclass
class SupportSet:
    supports: list[Tensor]
    variant: str

    def __post_init__(self):
        if len(self.supports) != n_supports(self.variant):
            raise ValueError(
                f"{self.variant} expects {n_supports(self.variant)} supports, got {len(self.supports)}")

    def __len__(self) -> int:
        return len(self.supports)

    @property
    def n_nodes(self) -> int:
        return self.supports[0].shape[0]

    def stacked(self) -> Tensor:
        """K x N x N tensor, still differentiable through learned supports."""
        return stack(self.supports, axis=0)


def build_supports(graph, variant: str) -> SupportSet:
    """Assemble the support list for a graph convolution.

    ``graph`` is either a learned N x N tensor (from :func:`dagg_matrix`) or a
    :class:`PredefinedGraph`.
    """
    n_supports(variant)
    if isinstance(graph, PredefinedGraph):
        if variant != "predefined":
            raise ValueError(f"variant {variant!r} needs a learned graph, got a PredefinedGraph")
        eye = Tensor(np.eye(graph.n_nodes))
        return SupportSet([eye, Tensor(graph.normalized_adjacency())], variant)
    if variant == "predefined":
        raise ValueError("variant 'predefined' needs a PredefinedGraph")
    a = as_tensor(graph)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adaptive graph must be square, got {a.shape}")
    eye = Tensor(np.eye(a.shape[0]))
    if variant == "dagg_r":
        return SupportSet([a], variant)
    if variant == "dagg_1":
        return SupportSet([eye, a], variant)
    return SupportSet([eye, a, matmul(a, a)], variant)


def community_graph(labels: Sequence[int]) -> PredefinedGraph:
    """Unit-weight clique per community label; used as the baseline graph for
    synthetic data."""
    labels = list(labels)
    edges = [(i, j, 1.0)
             for i in range(len(labels)) for j in range(i + 1, len(labels))
             if labels[i] == labels[j]]
    return PredefinedGraph(len(labels), edges)


def within_across_weight(a: np.ndarray, labels: Sequence[int]) -> tuple[float, float]:
    """Mean off-diagonal weight inside communities and across them."""
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    within = a[same & off]
    across = a[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(across.mean()) if across.size else float("nan"))

