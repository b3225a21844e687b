"""Spatial grid graph over feature-map locations.

Nodes are the cells of an h x w grid in row-major order.  Edges connect
4-neighbors (up/down/left/right, clipped at the borders), and every outgoing
edge of node i carries the same weight 1/|N_i|, so each row of the implied
adjacency matrix S sums to 1 (to 0 for the degenerate 1x1 grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["GridGraph", "build_grid_graph", "serialize_graph", "write_graph_file"]


@dataclass(frozen=True)
class GridGraph:
    """Immutable 4-connectivity grid graph.

    neighbors[i] lists the node indices adjacent to node i; weights[i] is the
    shared edge weight 1/len(neighbors[i]) (0.0 for an isolated node).
    """

    height: int
    width: int
    neighbors: tuple[tuple[int, ...], ...]
    weights: tuple[float, ...]
    _dense_cache: list = field(default_factory=list, repr=False, compare=False)

    @property
    def d(self) -> int:
        return self.height * self.width

    def dense_s(self) -> np.ndarray:
        """Dense d x d adjacency matrix S (float64). Cached after first call."""
        if not self._dense_cache:
            s = np.zeros((self.d, self.d), dtype=np.float64)
            for i, (nbrs, w) in enumerate(zip(self.neighbors, self.weights)):
                for j in nbrs:
                    s[i, j] = w
            self._dense_cache.append(s)
        return self._dense_cache[0]


def build_grid_graph(height: int, width: int) -> GridGraph:
    """Build the grid graph for an ``height x width`` feature map.

    Node (r, c) gets index r*width + c.  Raises ValueError on non-positive
    dimensions.
    """
    if height < 1 or width < 1:
        raise ValueError(f"grid dimensions must be positive, got {height}x{width}")
    neighbors = []
    weights = []
    for r in range(height):
        for c in range(width):
            nbrs = []
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < height and 0 <= cc < width:
                    nbrs.append(rr * width + cc)
            neighbors.append(tuple(sorted(nbrs)))
            weights.append(1.0 / len(nbrs) if nbrs else 0.0)
    return GridGraph(height, width, tuple(neighbors), tuple(weights))


def aggregate(graph: GridGraph, v: np.ndarray) -> np.ndarray:
    """Self-plus-neighbor aggregation (I + S) @ V.

    ``v`` has shape (d, c) or (batch, d, c); returns the same shape.  Each
    row becomes the node value plus the mean of its neighbors' values.
    """
    if v.shape[-2] != graph.d:
        raise ValueError(f"expected {graph.d} rows, got {v.shape[-2]}")
    s = graph.dense_s().astype(v.dtype)
    return v + np.matmul(s, v) if v.ndim == 2 else v + np.einsum("ij,bjc->bic", s, v)


def serialize_graph(graph: GridGraph) -> list[tuple[int, int, float]]:
    """List the nonzeros of S as (i, j, weight) triplets sorted by (i, j)."""
    out = []
    for i, (nbrs, w) in enumerate(zip(graph.neighbors, graph.weights)):
        for j in nbrs:
            out.append((i, j, w))
    return out


def write_graph_file(graph: GridGraph, path) -> None:
    """Dump the graph as 'h w' header followed by 'i j weight' triplets.

    Weights are printed at 17 significant digits so the dump round-trips
    float64 exactly.
    """
    with open(path, "w") as fh:
        fh.write(f"{graph.height} {graph.width}\n")
        for i, j, w in serialize_graph(graph):
            fh.write(f"{i} {j} {w:.17g}\n")
