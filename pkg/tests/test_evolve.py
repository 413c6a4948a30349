import numpy as np
import pytest
from scipy.linalg import eigvalsh

from mshom import coarse, coeff, evolve, fem, grid, locbasis


@pytest.fixture(scope="module")
def setup32():
    mesh = grid.build_fine_mesh(32)
    field = coeff.gen_trig(mesh)
    K = fem.assemble_stiffness(mesh, field)
    M = fem.assemble_mass(mesh)
    lattice = grid.build_coarse_lattice(0.25, mesh)
    cb = coarse.build_coarse_basis(mesh, lattice)
    basis = locbasis.build_basis(mesh, field, cb,
                                 locbasis.BasisRecipe(t_rule="h"))
    ops = evolve.CoarseOperatorSet.from_basis_precomputed(mesh, K, M, basis)
    fine = evolve.CoarseOperatorSet(mesh=mesh, k_c=K, m_c=M, prol=None)
    g = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    return mesh, field, K, M, ops, fine, g


class TestTimeGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            evolve.TimeGrid(dt=0.0, steps=5)
        with pytest.raises(ValueError):
            evolve.TimeGrid(dt=0.1, steps=0)
        with pytest.raises(ValueError):
            evolve.TimeGrid.for_interval(1.0, 0.3)

    def test_times(self):
        tg = evolve.TimeGrid.for_interval(1.0, 0.25)
        assert tg.steps == 4
        assert np.allclose(tg.times, [0, 0.25, 0.5, 0.75, 1.0])


class TestCoarseOperators:
    def test_symmetric_and_positive(self, setup32):
        _, _, _, _, ops, _, _ = setup32
        assert np.array_equal(ops.k_c, ops.k_c.T)
        assert np.array_equal(ops.m_c, ops.m_c.T)
        assert eigvalsh(ops.m_c).min() > 0
        assert eigvalsh(ops.k_c).min() > 0

    def test_identity_prolongation_is_fine_solve(self, setup32):
        mesh, _, K, _, _, fine, g = setup32
        sol = evolve.galerkin_elliptic(fine, g)
        b = fem.assemble_load(mesh, g)
        direct = fem.solve_spd(K, b, fem.DIRECT_SOLVER)
        assert np.array_equal(sol.fine.values, sol.coeffs)
        assert np.allclose(sol.coeffs, direct, atol=1e-12)


class TestElliptic:
    def test_zero_load(self, setup32):
        _, _, _, _, ops, _, _ = setup32
        sol = evolve.galerkin_elliptic(ops, None)
        assert (sol.fine.values == 0).all()

    def test_galerkin_optimality(self, setup32):
        mesh, _, K, _, ops, fine, g = setup32
        ref = evolve.galerkin_elliptic(fine, g)
        sol = evolve.galerkin_elliptic(ops, g)
        du = ref.fine.values - sol.fine.values
        best = du @ (K @ du)
        rng = np.random.default_rng(0)
        for _ in range(50):
            c = sol.coeffs + rng.standard_normal(ops.dim) * rng.choice(
                [1e-3, 1e-1, 1.0])
            dv = ref.fine.values - ops.prolong(c).values
            assert best <= dv @ (K @ dv) + 1e-12 * best

    def test_galerkin_orthogonality(self, setup32):
        mesh, _, K, _, ops, fine, g = setup32
        ref = evolve.galerkin_elliptic(fine, g)
        sol = evolve.galerkin_elliptic(ops, g)
        du = ref.fine.values - sol.fine.values
        resid = ops.prol.T @ (K @ du)
        u_h1 = fem.norms(ref.fine).h1
        for j in range(ops.dim):
            psi_h1 = np.sqrt(ops.k_c[j, j])
            assert abs(resid[j]) <= 1e-9 * u_h1 * psi_h1


class TestParabolic:
    def test_zero_forcing_stays_zero(self, setup32):
        _, _, _, _, ops, _, _ = setup32
        traj = evolve.parabolic_implicit_euler(
            ops, None, evolve.TimeGrid(dt=0.1, steps=10))
        assert all((s == 0).all() for s in traj.states)

    @pytest.mark.parametrize("dt", [1e-3, 1.0, 100.0])
    def test_unconditional_dissipativity(self, setup32, dt):
        _, _, _, _, ops, _, _ = setup32
        rng = np.random.default_rng(7)
        c0 = rng.standard_normal(ops.dim)
        traj = evolve.parabolic_implicit_euler(
            ops, None, evolve.TimeGrid(dt=dt, steps=30), init_state=c0)
        norms = [np.sqrt(s @ (ops.m_c @ s)) for s in traj.states]
        assert all(b <= a * (1 + 1e-12) for a, b in zip(norms, norms[1:]))

    def test_steady_state_matches_elliptic(self, setup32):
        _, _, _, _, ops, _, g = setup32
        ell = evolve.galerkin_elliptic(ops, g)
        traj = evolve.parabolic_implicit_euler(
            ops, lambda x, y, t: g(x, y), evolve.TimeGrid(dt=0.5, steps=50),
            snapshot_every=50)
        gap = fem.norms(traj.final - ell.fine).h1 / fem.norms(ell.fine).h1
        assert gap < 0.05

    def test_discrete_energy_estimate(self, setup32):
        mesh, _, _, _, ops, _, g = setup32
        tg = evolve.TimeGrid(dt=0.05, steps=20)
        traj = evolve.parabolic_implicit_euler(
            ops, lambda x, y, t: g(x, y), tg)
        D = ops.energy(traj.states[-1])
        for a, b in zip(traj.states, traj.states[1:]):
            d = (b - a) / tg.dt
            D += tg.dt * float(d @ (ops.m_c @ d))
        g_sq = fem.norms(fem.FEFunction.from_callable(mesh, g)).l2 ** 2 * tg.t_end
        assert D <= 1.0 * g_sq  # measured ratio ~ 0.032

    def test_dt_refinement_insensitive(self, setup32):
        # time step ~ h does not limit the reported (spatial) error
        _, _, _, _, ops, fine, g = setup32
        def err(dt):
            tg = evolve.TimeGrid.for_interval(1.0, dt)
            ref = evolve.parabolic_implicit_euler(
                fine, lambda x, y, t: g(x, y), tg, snapshot_every=tg.steps)
            cand = evolve.parabolic_implicit_euler(
                ops, lambda x, y, t: g(x, y), tg, snapshot_every=tg.steps)
            return evolve.error_report(ref.final, cand.final).rel_h1
        e1, e2 = err(0.25), err(0.125)
        assert abs(e2 - e1) / e1 < 0.20

    def test_step_failure_identifies_step(self, setup32):
        _, _, _, _, ops, _, g = setup32
        bad = evolve.CoarseOperatorSet(
            mesh=ops.mesh, k_c=ops.k_c, m_c=ops.m_c, prol=ops.prol,
            cfg=fem.SolverConfig(method="pcg", tol=1e-14, maxiter=1))
        import scipy.sparse as sp
        bad = evolve.CoarseOperatorSet(
            mesh=ops.mesh, k_c=sp.csr_matrix(ops.k_c),
            m_c=sp.csr_matrix(ops.m_c), prol=ops.prol,
            cfg=fem.SolverConfig(method="pcg", tol=1e-14, maxiter=1))
        with pytest.raises(fem.SolverError, match="step 1"):
            evolve.parabolic_implicit_euler(
                bad, lambda x, y, t: g(x, y), evolve.TimeGrid(dt=0.1, steps=3))


class TestWave:
    def test_zero_forcing_stays_zero(self, setup32):
        _, _, _, _, ops, _, _ = setup32
        traj = evolve.wave_newmark(ops, None, evolve.TimeGrid(dt=0.05, steps=20))
        assert all((s == 0).all() for s in traj.states)

    def test_energy_conservation_unforced(self, setup32):
        _, _, _, _, ops, _, _ = setup32
        rng = np.random.default_rng(1)
        traj = evolve.wave_newmark(
            ops, None, evolve.TimeGrid(dt=0.01, steps=1000),
            init_state=rng.standard_normal(ops.dim),
            init_velocity=rng.standard_normal(ops.dim), snapshot_every=100)
        E = [evolve.wave_energy(ops, c, v)
             for c, v in zip(traj.states, traj.velocities)]
        assert max(abs(e - E[0]) for e in E) / E[0] < 1e-8

    def test_forced_energy_balance(self, setup32):
        _, _, _, _, ops, _, g = setup32
        traj = evolve.wave_newmark(ops, lambda x, y, t: g(x, y),
                                   evolve.TimeGrid(dt=0.01, steps=100))
        E = evolve.wave_energy(ops, traj.states[-1], traj.velocities[-1])
        assert E <= traj.work * (1 + 1e-6)
        assert abs(E - traj.work) / abs(traj.work) < 1e-6

    def test_density_weighted_mass(self, setup32):
        mesh, field, K, _, _, _, _ = setup32
        rho = 2.0 * np.ones(mesh.num_triangles)
        M2 = fem.assemble_mass(mesh, rho)
        M1 = fem.assemble_mass(mesh)
        assert (M2 - 2.0 * M1).nnz == 0


class TestErrorReport:
    def test_identical_gives_zero(self, setup32):
        _, _, _, _, ops, fine, g = setup32
        sol = evolve.galerkin_elliptic(ops, g)
        rep = evolve.error_report(sol.fine, sol.fine)
        assert rep.rel_l2 == rep.rel_h1 == rep.rel_linf == 0.0

    def test_double_gives_one(self, setup32):
        _, _, _, _, ops, _, g = setup32
        sol = evolve.galerkin_elliptic(ops, g)
        rep = evolve.error_report(sol.fine, 2.0 * sol.fine)
        assert rep.rel_l2 == pytest.approx(1.0, rel=1e-12)

    def test_space_time_of_constant_difference(self, setup32):
        mesh, _, _, _, _, fine, g = setup32
        u = fem.FEFunction.from_callable(mesh, g)
        times = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
        ref = evolve.Trajectory(ops=fine, times=times,
                                states=[u.values] * 5)
        cand = evolve.Trajectory(ops=fine, times=times,
                                 states=[2.0 * u.values] * 5)
        rep = evolve.error_report(ref, cand)
        assert rep.space_time_h1 == pytest.approx(
            np.sqrt(2.0) * fem.norms(u).h1, rel=1e-12)

    def test_mismatched_times_rejected(self, setup32):
        _, _, _, _, _, fine, g = setup32
        mesh = fine.mesh
        u = fem.FEFunction.from_callable(mesh, g)
        a = evolve.Trajectory(ops=fine, times=np.array([0.0, 1.0]),
                              states=[u.values] * 2)
        b = evolve.Trajectory(ops=fine, times=np.array([0.0, 2.0]),
                              states=[u.values] * 2)
        with pytest.raises(ValueError):
            evolve.error_report(a, b)

    def test_nonfinite_rejected(self, setup32):
        _, _, _, _, _, fine, g = setup32
        mesh = fine.mesh
        u = fem.FEFunction.from_callable(mesh, g)
        bad = fem.FEFunction(mesh, np.full(mesh.num_interior_dofs, np.nan))
        with pytest.raises(ValueError):
            evolve.error_report(u, bad)
