"""Spatial discretizations: the unit interval and the lower triangle for kernels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SpatialGrid", "TriangleGrid"]


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid on [0, 1] with ``n_cells`` cells and ``n_cells + 1`` nodes."""

    n_cells: int

    def __post_init__(self):
        if self.n_cells < 1:
            raise ValueError("n_cells must be >= 1")

    @property
    def h(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_cells + 1)

    @property
    def midpoints(self) -> np.ndarray:
        x = self.nodes
        return 0.5 * (x[:-1] + x[1:])


@dataclass(frozen=True)
class TriangleGrid:
    """Tensor nodes (x_p, xi_q) restricted to 0 <= xi <= x <= 1.

    Fields of kernel type are stored as dense (n, n, P, P) arrays with the
    strictly-upper part (q > p) unused; ``mask`` flags the valid nodes.
    """

    base: SpatialGrid

    @property
    def h(self) -> float:
        return self.base.h

    @property
    def n_nodes_1d(self) -> int:
        return self.base.n_nodes

    @property
    def mask(self) -> np.ndarray:
        p = self.base.n_nodes
        return np.tril(np.ones((p, p), dtype=bool))

    @property
    def node_count(self) -> int:
        p = self.base.n_nodes
        return p * (p + 1) // 2

    def node_coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat arrays (x, xi) of the triangle nodes, row-major in (p, q)."""
        xs = self.base.nodes
        pp, qq = np.nonzero(self.mask)
        return xs[pp], xs[qq]

    def node_indices(self) -> tuple[np.ndarray, np.ndarray]:
        return tuple(np.nonzero(self.mask))
