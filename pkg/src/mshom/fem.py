"""Sparse P1 finite-element core: assembly, SPD solves, norms, flux-norm.

Element stiffness and mass are exact for piecewise-constant coefficients;
loads use one-point (barycenter) quadrature. Assembly sums duplicate entries
in a canonical order so assembled operators are exactly symmetric, not
symmetrized after the fact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csc_matrix, csr_matrix, identity
from scipy.sparse.linalg import cg, splu

from .grid import FineMesh, Subdomain


class SolverError(RuntimeError):
    """Linear solve failed; carries the final relative residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class SolverConfig:
    method: str = "pcg"  # "pcg" (diag-preconditioned CG) or "direct" (sparse LU)
    tol: float = 1e-10
    maxiter: int = 50000

    def __post_init__(self):
        if self.method not in ("pcg", "direct"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tolerance must lie in (0, 1), got {self.tol}")
        if self.maxiter < 1:
            raise ValueError(f"maxiter must be >= 1, got {self.maxiter}")


DEFAULT_SOLVER = SolverConfig()
DIRECT_SOLVER = SolverConfig(method="direct")


@dataclass
class FEFunction:
    """P1 function on the fine mesh with zero trace; values over interior dofs."""

    mesh: FineMesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != self.mesh.num_interior_dofs:
            raise ValueError(
                f"expected {self.mesh.num_interior_dofs} dof values, got {len(self.values)}"
            )

    @classmethod
    def zero(cls, mesh: FineMesh) -> "FEFunction":
        return cls(mesh, np.zeros(mesh.num_interior_dofs))

    @classmethod
    def from_callable(cls, mesh: FineMesh, f) -> "FEFunction":
        vals = f(mesh.nodes[mesh.dof_nodes, 0], mesh.nodes[mesh.dof_nodes, 1])
        return cls(mesh, np.asarray(vals, dtype=np.float64))

    @classmethod
    def from_nodal(cls, mesh: FineMesh, nodal: np.ndarray) -> "FEFunction":
        return cls(mesh, np.asarray(nodal, dtype=np.float64)[mesh.dof_nodes])

    def to_nodal(self) -> np.ndarray:
        nodal = np.zeros(self.mesh.num_nodes)
        nodal[self.mesh.dof_nodes] = self.values
        return nodal

    def __add__(self, other):
        return FEFunction(self.mesh, self.values + other.values)

    def __sub__(self, other):
        return FEFunction(self.mesh, self.values - other.values)

    def __mul__(self, s: float):
        return FEFunction(self.mesh, self.values * s)

    __rmul__ = __mul__


def _space(mesh_or_sub):
    """(mesh, member cells, node -> dof map, dof count) for a mesh or subdomain."""
    if isinstance(mesh_or_sub, Subdomain):
        s = mesh_or_sub
        return s.mesh, s.cells, s.local_dof_map, s.num_local_dofs
    mesh = mesh_or_sub
    return mesh, np.arange(mesh.num_triangles), mesh.interior_dof_map, mesh.num_interior_dofs


def _csr_canonical(rows, cols, vals, ndof) -> csr_matrix:
    """COO triplets -> CSR, summing duplicates in lexicographic (row, col) order.

    The stable sort keeps duplicates in element order, so entries (i, j) and
    (j, i) accumulate identical floating-point sums and A == A.T exactly.
    """
    keep = vals != 0.0
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    if len(vals) == 0:
        return csr_matrix((ndof, ndof))
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    boundary = np.empty(len(rows), dtype=bool)
    boundary[0] = True
    boundary[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    starts = np.nonzero(boundary)[0]
    sums = np.add.reduceat(vals, starts)
    urows, ucols = rows[starts], cols[starts]
    counts = np.bincount(urows, minlength=ndof)
    indptr = np.zeros(ndof + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return csr_matrix((sums, ucols, indptr), shape=(ndof, ndof))


_MASS_LOCAL = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def _element_matrices(mesh, cells, cell_coeff, screening_weight):
    """(ncells, 3, 3) element matrices: coeff * A * grad.grad^T (+ screening mass)."""
    g = mesh.grads[cells]
    a = mesh.areas[cells]
    elems = np.einsum("tid,tjd->tij", g, g) * (cell_coeff * a)[:, None, None]
    if screening_weight is not None and screening_weight != 0.0:
        elems = elems + (screening_weight * a)[:, None, None] * _MASS_LOCAL
    return elems


def _assemble(mesh, cells, dof_map, ndof, elems) -> csr_matrix:
    conn = mesh.triangles[cells]
    dofs = dof_map[conn]  # (ncells, 3)
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    vals = elems.reshape(-1)
    keep = (rows >= 0) & (cols >= 0)
    return _csr_canonical(rows[keep], cols[keep], vals[keep], ndof)


def _cell_values(coeff_or_values, mesh, cells, what="coefficient"):
    vals = getattr(coeff_or_values, "values", coeff_or_values)
    vals = np.asarray(vals, dtype=np.float64)
    if vals.ndim == 0:
        return np.full(len(cells), float(vals))
    if len(vals) != mesh.num_triangles:
        raise ValueError(
            f"{what} has {len(vals)} cell values, mesh has {mesh.num_triangles}"
        )
    return vals[cells]


def assemble_stiffness(mesh_or_sub, coeff, screening: float | None = None) -> csr_matrix:
    """Matrix of int a grad(v).grad(w), plus screening * int v w when set.

    `screening` is the zeroth-order weight itself (1/T for the screened
    operator). The mass part uses the exact P1 element matrices.
    """
    mesh, cells, dof_map, ndof = _space(mesh_or_sub)
    a = _cell_values(coeff, mesh, cells)
    if (a <= 0).any():
        raise ValueError("coefficient must be strictly positive on every member cell")
    if screening is not None and screening < 0:
        raise ValueError(f"screening weight must be nonnegative, got {screening}")
    elems = _element_matrices(mesh, cells, a, screening)
    return _assemble(mesh, cells, dof_map, ndof, elems)


def assemble_mass(mesh_or_sub, weight=None, *, include_boundary: bool = False) -> csr_matrix:
    """Matrix of int rho v w with exact P1 element mass.

    With include_boundary the matrix ranges over all nodes of the member
    cells (diagnostics only; no Dirichlet rows dropped).
    """
    mesh, cells, dof_map, ndof = _space(mesh_or_sub)
    if include_boundary:
        dof_map = np.arange(mesh.num_nodes)
        ndof = mesh.num_nodes
    rho = (np.ones(len(cells)) if weight is None
           else _cell_values(weight, mesh, cells, "density"))
    if (rho <= 0).any():
        raise ValueError("density must be strictly positive on every member cell")
    elems = (rho * mesh.areas[cells])[:, None, None] * _MASS_LOCAL
    return _assemble(mesh, cells, dof_map, ndof, elems)


def assemble_load(mesh_or_sub, g) -> np.ndarray:
    """Entries int g v_i by one-point barycenter quadrature.

    g is a callable (x, y) -> value or an array of per-cell values.
    """
    mesh, cells, dof_map, ndof = _space(mesh_or_sub)
    if callable(g):
        b = mesh.barycenters[cells]
        gc = np.asarray(g(b[:, 0], b[:, 1]), dtype=np.float64)
        gc = np.broadcast_to(gc, (len(cells),))
    else:
        gc = _cell_values(g, mesh, cells, "load")
    contrib = gc * mesh.areas[cells] / 3.0
    out = np.zeros(ndof)
    dofs = dof_map[mesh.triangles[cells]]
    for k in range(3):
        good = dofs[:, k] >= 0
        np.add.at(out, dofs[good, k], contrib[good])
    return out


def weak_laplacian_rhs(mesh_or_sub, phi: FEFunction) -> np.ndarray:
    """Entries -int grad(phi).grad(v_j) over the target dofs (weak Laplacian).

    phi lives on the full mesh; only member cells contribute, which matches
    the full-mesh unit-coefficient stiffness applied to phi whenever the
    target dofs are interior to the cell set.
    """
    mesh, cells, dof_map, ndof = _space(mesh_or_sub)
    nodal = phi.to_nodal()
    g = mesh.grads[cells]
    vert = nodal[mesh.triangles[cells]]  # (ncells, 3)
    grad_phi = np.einsum("tk,tkd->td", vert, g)
    contrib = -np.einsum("td,tjd->tj", grad_phi, g) * mesh.areas[cells][:, None]
    out = np.zeros(ndof)
    dofs = dof_map[mesh.triangles[cells]]
    for k in range(3):
        good = dofs[:, k] >= 0
        np.add.at(out, dofs[good, k], contrib[good, k])
    return out


def spd_solver(A, cfg: SolverConfig = DEFAULT_SOLVER):
    """Reusable solve callable for an SPD matrix (shared across right sides)."""
    if cfg.method == "direct":
        lu = splu(csc_matrix(A), permc_spec="MMD_AT_PLUS_A",
                  options={"SymmetricMode": True})

        def solve(b):
            return lu.solve(b)

        return solve

    diag = A.diagonal()
    if (diag <= 0).any():
        raise SolverError("matrix has nonpositive diagonal; not SPD")
    from scipy.sparse import diags

    M = diags(1.0 / diag)

    def solve(b):
        x, info = cg(A, b, rtol=cfg.tol, atol=0.0, maxiter=cfg.maxiter, M=M)
        if info > 0:
            res = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
            raise SolverError(
                f"CG did not converge in {cfg.maxiter} iterations "
                f"(relative residual {res:.3e})", residual=res)
        return x

    return solve


def solve_spd(A, b, cfg: SolverConfig = DEFAULT_SOLVER) -> np.ndarray:
    """Solve A x = b with relative residual at most cfg.tol."""
    b = np.asarray(b, dtype=np.float64)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return np.zeros_like(b)
    x = spd_solver(A, cfg)(b)
    res = np.linalg.norm(b - A @ x) / nb
    if not res <= cfg.tol:
        raise SolverError(
            f"solve ended with relative residual {res:.3e} > {cfg.tol:.1e}",
            residual=res)
    return x


@dataclass
class NormReport:
    l2: float
    h1: float  # H1 seminorm
    linf: float
    rel_l2: float | None = None
    rel_h1: float | None = None
    rel_linf: float | None = None


def norms(u: FEFunction, against: FEFunction | None = None) -> NormReport:
    """L2, H1-seminorm (exact P1 elementwise) and nodal Linf; relative when a
    reference is given (norms of the difference over norms of the reference)."""
    def _abs(v: FEFunction):
        mesh = v.mesh
        nodal = v.to_nodal()
        vert = nodal[mesh.triangles]
        l2sq = np.einsum("ti,ij,tj->t", vert, _MASS_LOCAL, vert) @ mesh.areas
        grads = np.einsum("tk,tkd->td", vert, mesh.grads)
        h1sq = (grads**2).sum(axis=1) @ mesh.areas
        return np.sqrt(l2sq), np.sqrt(h1sq), np.abs(nodal).max()

    if against is None:
        l2, h1, linf = _abs(u)
        return NormReport(l2=l2, h1=h1, linf=linf)
    dl2, dh1, dlinf = _abs(u - against)
    rl2, rh1, rlinf = _abs(against)
    return NormReport(
        l2=dl2, h1=dh1, linf=dlinf,
        rel_l2=dl2 / rl2 if rl2 > 0 else np.inf,
        rel_h1=dh1 / rh1 if rh1 > 0 else np.inf,
        rel_linf=dlinf / rlinf if rlinf > 0 else np.inf,
    )


def flux_norm(u: FEFunction, coeff, cfg: SolverConfig = DEFAULT_SOLVER, *,
              stiffness=None, unit_stiffness=None, poisson=None) -> float:
    """Norm of the potential part of the flux a grad(u).

    Solves the discrete Poisson problem grad(chi).grad(v) = a grad(u).grad(v)
    for chi in the zero-trace space and returns ||grad chi||. The optional
    keyword arguments let callers reuse assembled operators and a factorized
    Poisson solve across many evaluations.
    """
    mesh = u.mesh
    K1 = unit_stiffness if unit_stiffness is not None else assemble_stiffness(mesh, 1.0)
    Ka = stiffness if stiffness is not None else assemble_stiffness(mesh, coeff)
    rhs = Ka @ u.values
    if np.linalg.norm(rhs) == 0.0:
        return 0.0
    chi = poisson(rhs) if poisson is not None else solve_spd(K1, rhs, cfg)
    return float(np.sqrt(chi @ (K1 @ chi)))


def identity_prolongation(mesh: FineMesh):
    return identity(mesh.num_interior_dofs, format="csr")


def write_matrix_text(A, path) -> None:
    """Coordinate text export: one `row col value` record per nonzero."""
    coo = A.tocoo()
    with open(path, "w") as f:
        f.write(f"{A.shape[0]} {A.shape[1]} {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            f.write(f"{r} {c} {float(v)!r}\n")


def write_vector_csv(v, path) -> None:
    np.savetxt(path, np.asarray(v), fmt="%.17g", delimiter=",")
