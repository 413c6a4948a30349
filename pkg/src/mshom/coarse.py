"""Auxiliary coarse space: tensor-product piecewise-quadratic nodal bumps.

Each interior lattice node carries the cardinal kernel

    w(s) = 1 - 3|s|/4 - s^2/4          |s| <= 1,
    w(s) = (|s| - 1)(|s| - 2)/4        1 < |s| <= 2,

which is nodal (w(k) = delta_0k on integers) and reproduces quadratics on a
uniform lattice. Near the boundary the kernel that would sit on the exterior
ghost node is folded back with quadratic-extrapolation weights (-3 onto the
first interior node, +1 onto the second), which preserves the nodal property,
keeps supports inside two lattice spacings, vanishes identically on the
boundary, and retains second-order best approximation for functions with zero
trace. Kernels are evaluated in fine-index space so lattice-node and boundary
values are exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigvalsh
from scipy.sparse import csc_matrix

from .fem import FEFunction, assemble_stiffness
from .grid import CoarseLattice, FineMesh


def kernel_quadratic(s: np.ndarray) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=np.float64))
    out = np.zeros_like(s)
    near = s <= 1.0
    out[near] = 1.0 - 0.75 * s[near] - 0.25 * s[near] ** 2
    far = (s > 1.0) & (s < 2.0)
    out[far] = 0.25 * (s[far] - 1.0) * (s[far] - 2.0)
    return out


def kernel_linear(s: np.ndarray) -> np.ndarray:
    s = np.abs(np.asarray(s, dtype=np.float64))
    return np.maximum(0.0, 1.0 - s)


def _axis_table(n: int, m: int, order: int) -> np.ndarray:
    """(m-1, n+1) table of axis kernels at fine-node indices."""
    r = n // m
    p = np.arange(n + 1, dtype=np.float64)
    W = np.zeros((m - 1, n + 1))
    if order == 1:
        for k in range(1, m):
            W[k - 1] = kernel_linear((p - k * r) / r)
        return W
    left = kernel_quadratic((p + r) / r)        # ghost bump at -1 - h
    right = kernel_quadratic((p - (n + r)) / r)  # ghost bump at 1 + h
    for k in range(1, m):
        W[k - 1] = kernel_quadratic((p - k * r) / r)
        if k == 1:
            W[k - 1] -= 3.0 * left
        if k == 2:
            W[k - 1] += left
        if k == m - 1:
            W[k - 1] -= 3.0 * right
        if k == m - 2:
            W[k - 1] += right
    return W


@dataclass
class CoarseBasis:
    """Coarse functions interpolated on the fine mesh, as a prolongation matrix.

    ``matrix`` has one column per lattice node (lattice ordering), rows over
    fine interior dofs. Support records are cell-resolved.
    """

    mesh: FineMesh
    lattice: CoarseLattice
    matrix: csc_matrix
    support_cells: list  # per-i sorted triangle ids where phi_i != 0
    support_radius: np.ndarray  # per-i Chebyshev radius of the support
    order: int = 2

    def __len__(self) -> int:
        return self.matrix.shape[1]

    @property
    def kappa(self) -> float:
        """Reported support-radius constant: r_i <= kappa * h for all i."""
        return float(self.support_radius.max() / self.lattice.h)

    def function(self, i: int) -> FEFunction:
        return FEFunction(self.mesh, self.matrix[:, [i]].toarray().ravel())

    def gram(self) -> np.ndarray:
        """Dense Gram matrix of the gradients, int grad(phi_i).grad(phi_j)."""
        K1 = assemble_stiffness(self.mesh, 1.0)
        G = (self.matrix.T @ (K1 @ self.matrix)).toarray()
        return 0.5 * (G + G.T)


def build_coarse_basis(mesh: FineMesh, lattice: CoarseLattice, order: int = 2) -> CoarseBasis:
    if order not in (1, 2):
        raise ValueError(f"coarse order must be 1 or 2, got {order}")
    lattice.axis_fine_stride(mesh)  # raises on lattice/mesh mismatch
    n, m = mesh.n, lattice.m
    W = _axis_table(n, m, order)
    if not (W[:, 0] == 0.0).all() or not (W[:, n] == 0.0).all():
        raise AssertionError("coarse axis kernels must vanish on the boundary")

    side = n + 1
    dof_map = mesh.interior_dof_map
    nz_idx = [np.nonzero(W[k])[0] for k in range(m - 1)]

    indptr = [0]
    indices = []
    data = []
    support_cells = []
    support_radius = np.zeros((m - 1) * (m - 1))
    node_mask = [W[k] != 0.0 for k in range(m - 1)]

    for j in range(m - 1):
        iy = nz_idx[j]
        vy = W[j][iy]
        for i in range(m - 1):
            ix = nz_idx[i]
            vx = W[i][ix]
            rows = (iy[:, None] * side + ix[None, :]).ravel()
            vals = (vy[:, None] * vx[None, :]).ravel()
            dofs = dof_map[rows]
            keep = dofs >= 0
            order_r = np.argsort(dofs[keep], kind="stable")
            indices.append(dofs[keep][order_r])
            data.append(vals[keep][order_r])
            indptr.append(indptr[-1] + keep.sum())

            # per-triangle support: a triangle is active iff one of its own
            # vertices is nonzero (the two triangles of a square differ)
            V = np.outer(node_mask[j], node_mask[i])  # V[iy, ix]
            lower = V[:-1, :-1] | V[:-1, 1:] | V[1:, 1:]
            upper = V[:-1, :-1] | V[1:, 1:] | V[1:, :-1]
            squares = np.arange(n * n).reshape(n, n)
            tris = np.sort(np.concatenate(
                [2 * squares[lower], 2 * squares[upper] + 1]))
            support_cells.append(tris)
            center = lattice.points[j * (m - 1) + i]
            verts = np.unique(mesh.triangles[tris])
            cheb = np.abs(mesh.nodes[verts] - center).max()
            support_radius[j * (m - 1) + i] = cheb

    P = csc_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)),
        shape=(mesh.num_interior_dofs, (m - 1) * (m - 1)),
    )
    return CoarseBasis(mesh=mesh, lattice=lattice, matrix=P,
                       support_cells=support_cells,
                       support_radius=support_radius, order=order)


def check_coarse_stability(basis: CoarseBasis) -> float:
    """Minimal eigenvalue of the gradient Gram matrix."""
    G = basis.gram()
    return float(eigvalsh(G, subset_by_index=[0, 0])[0])


def interpolation_error_probe(basis: CoarseBasis, f) -> float:
    """Best-approximation error of f in the H1 seminorm over the coarse span.

    f is a callable (x, y) -> values with zero trace; it is interpolated on
    the fine mesh first, so the probe measures the coarse space against the
    fine one.
    """
    mesh = basis.mesh
    fI = FEFunction.from_callable(mesh, f)
    K1 = assemble_stiffness(mesh, 1.0)
    P = basis.matrix
    b = P.T @ (K1 @ fI.values)
    G = basis.gram()
    c = cho_solve(cho_factor(G), b)
    e = fI.values - P @ c
    return float(np.sqrt(e @ (K1 @ e)))


def write_basis_function_csv(basis: CoarseBasis, i: int, path) -> None:
    """Nodal values of one coarse function on the fine grid, row-major CSV."""
    nodal = basis.function(i).to_nodal().reshape(basis.mesh.n + 1, basis.mesh.n + 1)
    np.savetxt(path, nodal, fmt="%.17g", delimiter=",")
