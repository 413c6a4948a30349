"""Galerkin solves in a given basis: elliptic, implicit-Euler parabolic, and
Newmark (average acceleration) wave stepping, plus error reports against fine
references.

The coarse operators are the triple products K_c = P^T K P and M_c = P^T M P
for a prolongation P whose columns are the basis functions on the fine grid;
P = identity recovers the plain fine-grid solver, which is how fine references
are produced. Reduced systems are held dense (a few hundred coarse functions);
fine ones stay sparse. Factorizations are cached since time stepping reuses
them every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse import issparse

from . import fem
from .fem import FEFunction, SolverConfig
from .grid import FineMesh

@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int

    def __post_init__(self):
        if self.dt <= 0 or self.steps < 1:
            raise ValueError("time grid needs dt > 0 and at least one step")

    @property
    def t_end(self) -> float:
        return self.dt * self.steps

    @classmethod
    def for_interval(cls, t_end: float, dt: float) -> "TimeGrid":
        steps = int(round(t_end / dt))
        if abs(steps * dt - t_end) > 1e-9 * max(1.0, t_end):
            raise ValueError(f"dt={dt} does not divide t_end={t_end}")
        return cls(dt=dt, steps=steps)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)


class _Factor:
    """SPD solve wrapper: dense Cholesky for small systems, sparse otherwise."""

    def __init__(self, A, cfg: SolverConfig):
        self.dense = not issparse(A)
        if self.dense:
            self._cho = cho_factor(A)
        else:
            self._solve = fem.spd_solver(A, cfg)

    def __call__(self, b):
        if self.dense:
            return cho_solve(self._cho, b)
        return self._solve(b)


def _triple_product(P, A) -> np.ndarray:
    """Dense P^T A P, streamed in column blocks to bound memory."""
    n_cols = P.shape[1]
    out = np.empty((n_cols, n_cols))
    block = max(1, min(n_cols, int(8e6 // max(P.shape[0], 1))))
    Pt = P.T.tocsr()
    for lo in range(0, n_cols, block):
        hi = min(lo + block, n_cols)
        dense_block = P[:, lo:hi].toarray()
        out[:, lo:hi] = Pt @ (A @ dense_block)
    return 0.5 * (out + out.T)


@dataclass
class CoarseOperatorSet:
    """Stiffness/mass pair reduced to the span of a basis, plus the basis."""

    mesh: FineMesh
    k_c: object
    m_c: object
    prol: object
    cfg: SolverConfig = fem.DIRECT_SOLVER
    _factors: dict = dc_field(default_factory=dict, repr=False)

    @classmethod
    def from_basis(cls, mesh: FineMesh, coeff, basis, *, density=None,
                   cfg: SolverConfig = fem.DIRECT_SOLVER) -> "CoarseOperatorSet":
        """Reduce the fine operators onto `basis` (anything with a .matrix).

        `density` weights the mass matrix; pass coeff.density for wave
        problems in a variable-density medium.
        """
        K = fem.assemble_stiffness(mesh, coeff)
        M = fem.assemble_mass(mesh, weight=density)
        return cls.from_basis_precomputed(mesh, K, M, basis, cfg=cfg)

    @classmethod
    def from_basis_precomputed(cls, mesh: FineMesh, fine_k, fine_m, basis, *,
                               cfg: SolverConfig = fem.DIRECT_SOLVER) -> "CoarseOperatorSet":
        """Like from_basis but reusing already assembled fine operators."""
        P = basis.matrix if hasattr(basis, "matrix") else basis
        return cls(mesh=mesh, k_c=_triple_product(P, fine_k),
                   m_c=_triple_product(P, fine_m), prol=P, cfg=cfg)

    @classmethod
    def from_fine(cls, mesh: FineMesh, coeff, *, density=None,
                  cfg: SolverConfig = fem.DIRECT_SOLVER) -> "CoarseOperatorSet":
        """Identity prolongation: the plain fine-grid operators."""
        K = fem.assemble_stiffness(mesh, coeff)
        M = fem.assemble_mass(mesh, weight=density)
        return cls(mesh=mesh, k_c=K, m_c=M, prol=None, cfg=cfg)

    @property
    def dim(self) -> int:
        return self.k_c.shape[0]

    def restrict(self, b_fine: np.ndarray) -> np.ndarray:
        if self.prol is None:
            return b_fine
        return self.prol.T @ b_fine

    def prolong(self, c: np.ndarray) -> FEFunction:
        vals = c if self.prol is None else self.prol @ c
        return FEFunction(self.mesh, np.asarray(vals).ravel())

    def factor(self, key: str, matrix) -> _Factor:
        if key not in self._factors:
            self._factors[key] = _Factor(matrix, self.cfg)
        return self._factors[key]

    def energy(self, c: np.ndarray) -> float:
        return float(c @ (self.k_c @ c))


@dataclass
class EllipticResult:
    ops: CoarseOperatorSet
    coeffs: np.ndarray
    fine: FEFunction
    wall_time: float


def _fine_load(mesh: FineMesh, g) -> np.ndarray:
    if g is None:
        return np.zeros(mesh.num_interior_dofs)
    if callable(g):
        return fem.assemble_load(mesh, g)
    return np.asarray(g, dtype=np.float64)


def galerkin_elliptic(ops: CoarseOperatorSet, g) -> EllipticResult:
    """Solve K_c c = P^T b for the load b of g; returns the coarse coefficients
    and their fine-grid representative."""
    t0 = time.perf_counter()
    b = ops.restrict(_fine_load(ops.mesh, g))
    if np.linalg.norm(b) == 0.0:
        c = np.zeros(ops.dim)
    else:
        c = ops.factor("k", ops.k_c)(b)
    return EllipticResult(ops=ops, coeffs=c, fine=ops.prolong(c),
                          wall_time=time.perf_counter() - t0)


@dataclass
class Trajectory:
    """Coarse-coefficient snapshots; fine representatives on demand."""

    ops: CoarseOperatorSet
    times: np.ndarray
    states: list
    velocities: list | None = None
    work: float = 0.0

    def fine(self, k: int) -> FEFunction:
        return self.ops.prolong(self.states[k])

    @property
    def final(self) -> FEFunction:
        return self.fine(len(self.states) - 1)


def _time_callable(g):
    if g is None:
        return None
    if not callable(g):
        raise TypeError("g must be a callable (x, y, t) or None")
    return g


def parabolic_implicit_euler(ops: CoarseOperatorSet, g, grid: TimeGrid, *,
                             init_state=None, snapshot_every: int = 1) -> Trajectory:
    """Implicit Euler from a zero initial state: per step solve
    (M_c + dt K_c) c+ = M_c c + P^T (dt g(t_mid)), the time integral of the
    load taken by the midpoint rule.

    `init_state` exists for diagnostics (dissipativity checks) only.
    """
    g = _time_callable(g)
    dt = grid.dt
    S = ops.m_c + dt * ops.k_c
    solve = _Factor(S, ops.cfg)
    c = np.zeros(ops.dim) if init_state is None else np.asarray(init_state, float).copy()
    times = [0.0]
    states = [c.copy()]
    for k in range(grid.steps):
        rhs = ops.m_c @ c
        if g is not None:
            tmid = (k + 0.5) * dt
            rhs = rhs + dt * ops.restrict(
                fem.assemble_load(ops.mesh, lambda x, y: g(x, y, tmid)))
        try:
            c = solve(rhs)
        except fem.SolverError as exc:
            raise fem.SolverError(f"parabolic step {k + 1} failed: {exc}") from exc
        if (k + 1) % snapshot_every == 0 or k + 1 == grid.steps:
            times.append((k + 1) * dt)
            states.append(c.copy())
    return Trajectory(ops=ops, times=np.array(times), states=states)


def wave_newmark(ops: CoarseOperatorSet, g, grid: TimeGrid, *,
                 init_state=None, init_velocity=None,
                 snapshot_every: int = 1) -> Trajectory:
    """Average-acceleration Newmark (beta = 1/4, gamma = 1/2) for
    M_c c'' + K_c c = P^T g(t), zero initial displacement and velocity.

    Accumulates the discrete work of the forcing, which the scheme balances
    exactly against the discrete energy.
    """
    g = _time_callable(g)
    dt = grid.dt
    c = np.zeros(ops.dim) if init_state is None else np.asarray(init_state, float).copy()
    v = np.zeros(ops.dim) if init_velocity is None else np.asarray(init_velocity, float).copy()

    def load(t):
        if g is None:
            return np.zeros(ops.dim)
        return ops.restrict(fem.assemble_load(ops.mesh, lambda x, y: g(x, y, t)))

    b = load(0.0)
    a = _Factor(ops.m_c, ops.cfg)(b - ops.k_c @ c)
    S = ops.m_c + (0.25 * dt * dt) * ops.k_c
    solve = _Factor(S, ops.cfg)
    times = [0.0]
    states = [c.copy()]
    velocities = [v.copy()]
    work = 0.0
    for k in range(grid.steps):
        b_new = load((k + 1) * dt)
        predictor = c + dt * v + (0.25 * dt * dt) * a
        try:
            a_new = solve(b_new - ops.k_c @ predictor)
        except fem.SolverError as exc:
            raise fem.SolverError(f"wave step {k + 1} failed: {exc}") from exc
        c_new = predictor + (0.25 * dt * dt) * a_new
        v_new = v + (0.5 * dt) * (a + a_new)
        work += 0.25 * dt * float((v + v_new) @ (b + b_new))
        c, v, a, b = c_new, v_new, a_new, b_new
        if (k + 1) % snapshot_every == 0 or k + 1 == grid.steps:
            times.append((k + 1) * dt)
            states.append(c.copy())
            velocities.append(v.copy())
    return Trajectory(ops=ops, times=np.array(times), states=states,
                      velocities=velocities, work=work)


def wave_energy(ops: CoarseOperatorSet, c: np.ndarray, v: np.ndarray) -> float:
    return 0.5 * float(v @ (ops.m_c @ v)) + 0.5 * float(c @ (ops.k_c @ c))


@dataclass
class ErrorReport:
    rel_l2: float
    rel_h1: float
    rel_linf: float
    ref_l2: float
    ref_h1: float
    ref_linf: float
    space_time_h1: float | None = None
    wall_time: float | None = None
    solver_stats: dict | None = None

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


def error_report(reference, candidate, *, wall_time=None) -> ErrorReport:
    """Relative L2/H1/Linf errors on the fine grid.

    For trajectories the report carries final-time norms plus the space-time
    L2(0,T; H1) error accumulated by the trapezoidal rule over the common
    snapshot times.
    """
    space_time = None
    if isinstance(reference, Trajectory):
        if not np.allclose(reference.times, candidate.times):
            raise ValueError("trajectories must share snapshot times")
        sq = np.empty(len(reference.times))
        for k in range(len(reference.times)):
            diff = reference.fine(k) - candidate.fine(k)
            sq[k] = fem.norms(diff).h1 ** 2
        space_time = float(np.sqrt(np.trapezoid(sq, reference.times)))
        ref_f, cand_f = reference.final, candidate.final
    else:
        ref_f, cand_f = reference, candidate
    r = fem.norms(cand_f, against=ref_f)
    report = ErrorReport(
        rel_l2=r.rel_l2, rel_h1=r.rel_h1, rel_linf=r.rel_linf,
        ref_l2=fem.norms(ref_f).l2, ref_h1=fem.norms(ref_f).h1,
        ref_linf=fem.norms(ref_f).linf,
        space_time_h1=space_time, wall_time=wall_time,
    )
    for v in (report.rel_l2, report.rel_h1, report.rel_linf):
        if not np.isfinite(v) or v < 0:
            raise ValueError("error report produced a non-finite entry")
    return report
