"""The homogenization basis: screened local solves driven by coarse bumps.

Each coarse function phi_i spawns one local problem

    (1/T) psi - div(a grad psi) = weak Laplacian of phi_i

on a subdomain around its lattice node, with zero boundary values, and the
solution is extended by zero to the whole mesh. Four construction modes:
the two global references (plain and screened, solved on the whole domain),
the localized default, and the high-contrast variant whose subdomains are
grown by `buffered_subdomain` so no high-conductivity component is clipped.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csc_matrix

from . import fem
from .coarse import CoarseBasis
from .fem import FEFunction, SolverConfig, SolverError
from .grid import (
    FineMesh,
    Subdomain,
    buffered_subdomain,
    extract_subdomain,
    whole_mesh_subdomain,
)

MODES = ("global", "screened-global", "localized", "high-contrast")


def _resolve_rule(rule, h: float, alpha: float, c: float) -> float:
    """Length/time rules: 'theory' = c * h^alpha * ln(1/h), 'sqrt' the same
    with c = 1 and alpha = 1/2, '3h'-style multiples of h, or a literal."""
    if isinstance(rule, (int, float)):
        return float(rule)
    if rule == "theory":
        return c * h**alpha * math.log(1.0 / h)
    if rule == "sqrt":
        return math.sqrt(h) * math.log(1.0 / h)
    if isinstance(rule, str) and rule.endswith("h"):
        return float(rule[:-1] or 1.0) * h
    raise ValueError(f"cannot parse length rule {rule!r}")


def _resolve_t(rule, h: float, alpha: float) -> float:
    if isinstance(rule, (int, float)):
        if rule <= 0:
            raise ValueError(f"screening time must be positive, got {rule}")
        return float(rule)
    if rule == "theory":
        return h ** (2.0 * alpha)
    if rule == "h":
        return h
    if rule == "h^2":
        return h * h
    if rule == "sqrt":
        return math.sqrt(h)
    if rule == "inf":
        return math.inf
    raise ValueError(f"cannot parse screening rule {rule!r}")


@dataclass(frozen=True)
class BasisRecipe:
    mode: str = "localized"
    alpha: float = 0.5
    c1: float = 3.0
    t_rule: object = "theory"        # default T = h^(2 alpha)
    radius_rule: object = "theory"   # default c1 * h^alpha * ln(1/h)
    buffer_rule: object = "theory"   # default buffer_c0 * h^alpha * ln(1/h)
    buffer_c0: float = 1.0
    contrast_threshold: float = 10.0
    strict_support: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.c1 <= 0 or self.buffer_c0 <= 0:
            raise ValueError("radius and buffer constants must be positive")
        if self.contrast_threshold <= 1.0:
            raise ValueError("contrast threshold must exceed 1")

    def t_for(self, h: float) -> float:
        if self.mode == "global":
            return math.inf
        return _resolve_t(self.t_rule, h, self.alpha)

    def radius_for(self, h: float) -> float:
        return _resolve_rule(self.radius_rule, h, self.alpha, self.c1)

    def buffer_for(self, h: float) -> float:
        return _resolve_rule(self.buffer_rule, h, self.alpha, self.buffer_c0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "alpha": self.alpha, "c1": self.c1,
            "t_rule": self.t_rule, "radius_rule": self.radius_rule,
            "buffer_rule": self.buffer_rule, "buffer_c0": self.buffer_c0,
            "contrast_threshold": self.contrast_threshold,
            "strict_support": self.strict_support,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisRecipe":
        return cls(**d)


def solve_screened_local(mesh: FineMesh, coeff, phi: FEFunction,
                         subdomain: Subdomain, t: float,
                         cfg: SolverConfig = fem.DIRECT_SOLVER, *,
                         support_cells=None, strict_support: bool = True):
    """Solve one screened local problem; returns (FEFunction, relative residual).

    ``t`` is the screening time; ``math.inf`` (or None) disables the
    zeroth-order term. With strict_support the support of phi must lie inside
    the subdomain, which the error analysis assumes; the localization sweeps
    deliberately relax it.
    """
    if t is not None and not t > 0:
        raise ValueError(f"screening time must be positive, got {t}")
    if strict_support:
        if support_cells is None:
            nodal = phi.to_nodal()
            nz = np.nonzero(np.abs(nodal[mesh.triangles]).max(axis=1))[0]
            support_cells = nz
        if not subdomain.contains_cells(np.asarray(support_cells)):
            raise ValueError(
                "subdomain does not contain the support of the coarse function")
    if subdomain.num_local_dofs == 0:
        raise ValueError("subdomain has no free dofs")
    screening = None if (t is None or math.isinf(t)) else 1.0 / t
    A = fem.assemble_stiffness(subdomain, coeff, screening=screening)
    rhs = fem.weak_laplacian_rhs(subdomain, phi)
    x = fem.solve_spd(A, rhs, cfg)
    nb = np.linalg.norm(rhs)
    res = float(np.linalg.norm(rhs - A @ x) / nb) if nb > 0 else 0.0
    full = np.zeros(mesh.num_interior_dofs)
    full[mesh.interior_dof_map[subdomain.local_nodes]] = x
    return FEFunction(mesh, full), res


@dataclass
class LocalizedBasis:
    """The functions psi_i as columns of a sparse prolongation matrix."""

    mesh: FineMesh
    lattice: object
    recipe: BasisRecipe
    matrix: csc_matrix
    records: list
    coeff_hash: str
    solver: SolverConfig

    def __len__(self) -> int:
        return self.matrix.shape[1]

    def function(self, i: int) -> FEFunction:
        return FEFunction(self.mesh, self.matrix[:, [i]].toarray().ravel())

    def save(self, prefix) -> None:
        """Sparse per-function records plus JSON metadata; reload is bit-exact."""
        prefix = str(prefix)
        P = self.matrix
        np.savez(prefix + ".npz", data=P.data, indices=P.indices,
                 indptr=P.indptr, shape=np.array(P.shape))
        meta = {
            "mesh_n": self.mesh.n,
            "lattice_h": self.lattice.h,
            "recipe": self.recipe.to_dict(),
            "coeff_hash": self.coeff_hash,
            "solver": {"method": self.solver.method, "tol": self.solver.tol,
                       "maxiter": self.solver.maxiter},
            "records": self.records,
        }
        with open(prefix + ".json", "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, prefix, mesh: FineMesh, lattice) -> "LocalizedBasis":
        prefix = str(prefix)
        with open(prefix + ".json") as f:
            meta = json.load(f)
        if meta["mesh_n"] != mesh.n or meta["lattice_h"] != lattice.h:
            raise ValueError("basis file does not match the given mesh/lattice")
        z = np.load(prefix + ".npz")
        P = csc_matrix((z["data"], z["indices"], z["indptr"]),
                       shape=tuple(z["shape"]))
        return cls(mesh=mesh, lattice=lattice,
                   recipe=BasisRecipe.from_dict(meta["recipe"]), matrix=P,
                   records=meta["records"], coeff_hash=meta["coeff_hash"],
                   solver=SolverConfig(**meta["solver"]))


def build_basis(mesh: FineMesh, coeff, coarse: CoarseBasis, recipe: BasisRecipe,
                cfg: SolverConfig = fem.DIRECT_SOLVER, jobs: int = 1) -> LocalizedBasis:
    """Solve the N local problems of the recipe and collect psi_1..psi_N.

    The solves are independent; `jobs` > 1 runs them on a thread pool with
    results placed by index, so the output is schedule-independent.
    """
    lattice = coarse.lattice
    h = lattice.h
    t = recipe.t_for(h)
    n_funcs = len(coarse)
    global_mode = recipe.mode in ("global", "screened-global")

    shared: dict = {}

    def whole() -> Subdomain:
        if "whole" not in shared:
            shared["whole"] = whole_mesh_subdomain(mesh)
        return shared["whole"]

    def subdomain_for(i: int) -> Subdomain:
        if global_mode:
            return whole()
        center = lattice.points[i]
        radius = recipe.radius_for(h)
        sub = extract_subdomain(mesh, center, radius)
        if recipe.mode == "high-contrast":
            sub = buffered_subdomain(mesh, coeff, sub, recipe.buffer_for(h),
                                     recipe.contrast_threshold)
        if sub.covers_mesh:
            return whole()  # identical dof set; share the factorization
        return sub

    screening = None if math.isinf(t) else 1.0 / t

    def shared_solver():
        if "solve" not in shared:
            A = fem.assemble_stiffness(whole(), coeff, screening=screening)
            shared["A"] = A
            shared["solve"] = fem.spd_solver(A, cfg)
        return shared["solve"], shared["A"]

    def run_one(i: int):
        try:
            sub = subdomain_for(i)
            if recipe.strict_support and not sub.contains_cells(coarse.support_cells[i]):
                raise ValueError(
                    f"subdomain of basis function {i} does not contain the "
                    f"support of its coarse function")
            phi = coarse.function(i)
            if sub.covers_mesh:
                solve, A = shared_solver()
                rhs = fem.weak_laplacian_rhs(sub, phi)
                x = solve(rhs)
                nb = np.linalg.norm(rhs)
                res = float(np.linalg.norm(rhs - A @ x) / nb) if nb > 0 else 0.0
                if not res <= cfg.tol:
                    raise SolverError(
                        f"relative residual {res:.3e} > {cfg.tol:.1e}",
                        residual=res)
                psi = FEFunction(mesh, np.zeros(mesh.num_interior_dofs))
                psi.values[mesh.interior_dof_map[sub.local_nodes]] = x
            else:
                psi, res = solve_screened_local(
                    mesh, coeff, phi, sub, t, cfg,
                    support_cells=coarse.support_cells[i],
                    strict_support=recipe.strict_support)
            dofs = mesh.interior_dof_map[sub.local_nodes]
            record = {
                "index": i,
                "center": [float(c) for c in lattice.points[i]],
                "radius": None if global_mode else recipe.radius_for(h),
                "t": t if math.isfinite(t) else None,
                "alpha": recipe.alpha,
                "c1": recipe.c1,
                "cells": int(len(sub.cells)),
                "residual": res,
                "warning": bool(sub.warning),
            }
            return dofs, psi.values[dofs], record
        except Exception as exc:
            raise SolverError(f"local solve for basis function {i} failed: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, range(n_funcs)))
    else:
        results = [run_one(i) for i in range(n_funcs)]

    indptr = np.zeros(n_funcs + 1, dtype=np.int64)
    for i, (dofs, _, _) in enumerate(results):
        indptr[i + 1] = indptr[i] + len(dofs)
    indices = np.concatenate([dofs for dofs, _, _ in results])
    data = np.concatenate([vals for _, vals, _ in results])
    P = csc_matrix((data, indices, indptr),
                   shape=(mesh.num_interior_dofs, n_funcs))
    return LocalizedBasis(mesh=mesh, lattice=lattice, recipe=recipe, matrix=P,
                          records=[r for _, _, r in results],
                          coeff_hash=coeff.content_hash(), solver=cfg)


@dataclass
class DecayProfile:
    radii: np.ndarray
    tails: np.ndarray
    slope: float


def decay_profile(psi: FEFunction, center, radii) -> DecayProfile:
    """Tail H1 norms ||psi||_{H1 outside B(center, r)} and the fitted slope of
    log(tail) against r."""
    radii = np.asarray(radii, dtype=float)
    if len(radii) < 1 or (np.diff(radii) <= 0).any():
        raise ValueError("radii must be strictly increasing")
    mesh = psi.mesh
    nodal = psi.to_nodal()
    vert = nodal[mesh.triangles]
    l2 = np.einsum("ti,ij,tj->t", vert, fem._MASS_LOCAL, vert) * mesh.areas
    grads = np.einsum("tk,tkd->td", vert, mesh.grads)
    h1 = (grads**2).sum(axis=1) * mesh.areas
    cell_energy = l2 + h1
    dist = np.linalg.norm(mesh.barycenters - np.asarray(center, float), axis=1)
    tails = np.array([np.sqrt(cell_energy[dist > r].sum()) for r in radii])
    floor = tails.max() * 1e-13 if tails.max() > 0 else 0.0
    ok = tails > floor
    if ok.sum() >= 2:
        slope = float(np.polyfit(radii[ok], np.log(tails[ok]), 1)[0])
    else:
        slope = float("nan")
    return DecayProfile(radii=radii, tails=tails, slope=slope)
