import numpy as np
import pytest

from stochid.errors import ConfigError, DomainError, SolverError
from stochid import fem
from stochid import randfield as rf
from stochid.qoi import dispersion_coefficient


def isotropic_compliance(young, nu, shear=None):
    shear = shear if shear is not None else young / (2.0 * (1.0 + nu))
    return np.array(
        [
            [1.0 / young, -nu / young, 0.0],
            [-nu / young, 1.0 / young, 0.0],
            [0.0, 0.0, 1.0 / shear],
        ]
    )


def uniform_field(s, nx, ny):
    return np.broadcast_to(s, (nx, ny, 3, 3)).copy()


def heterogeneous_sample(nx, seed=5, delta=0.55, ell=1e-4, side=1e-3):
    h = rf.HyperParams(delta, ell, 12e9, 3.5e9)
    grid = rf.GridSpec(nx, nx, side / nx, side / nx, x0=side / nx / 2, y0=side / nx / 2)
    return rf.sample_compliance_field(h, grid, seed=seed, n_bins=16)


class TestAssembleSolve:
    def test_zero_load_zero_displacement(self):
        mesh = fem.RectMesh(4, 4, 0.25, 0.25)
        field = uniform_field(isotropic_compliance(1e9, 0.3), 4, 4)
        fixed = np.array([0, 1, 2, 3])
        u = fem.assemble_solve(mesh, field, np.zeros(mesh.n_dofs), fixed)
        assert np.all(u == 0.0)

    def test_patch_test_exact_constant_strain(self):
        # linear displacement imposed on the boundary of a homogeneous patch
        mesh = fem.RectMesh(5, 4, 0.13, 0.21)
        field = uniform_field(isotropic_compliance(2.3e9, 0.27), 5, 4)
        a = np.array([[3.1e-4, 0.4e-4], [0.9e-4, -1.7e-4]])
        coords = mesh.node_coords()
        boundary = mesh.boundary_nodes()
        fixed = np.concatenate([2 * boundary, 2 * boundary + 1])
        vals = np.concatenate(
            [coords[boundary] @ a[0], coords[boundary] @ a[1]]
        )
        u = fem.assemble_solve(mesh, field, np.zeros(mesh.n_dofs), fixed, vals)
        eps = fem.element_strains(mesh, u)
        expected = np.array([a[0, 0], a[1, 1], a[0, 1] + a[1, 0]])
        assert np.abs(eps - expected).max() < 1e-10 * np.abs(expected).max()

    def test_energy_consistency(self):
        field = heterogeneous_sample(8)
        mesh = fem.RectMesh(8, 8, 1e-3 / 8, 1e-3 / 8)
        k = fem.assemble_stiffness(mesh, field.values)
        f = np.zeros(mesh.n_dofs)
        top = mesh.node_index(np.arange(9), 8)
        f[2 * top + 1] = -1e3
        bottom = mesh.node_index(np.arange(9), 0)
        fixed = np.concatenate([2 * bottom, 2 * bottom + 1])
        u = fem.assemble_solve(mesh, field.values, f, fixed)
        lhs = u @ (k @ u)
        rhs = f @ u
        assert abs(lhs - rhs) / abs(rhs) < 1e-9

    def test_missing_constraints_rejected(self):
        mesh = fem.RectMesh(3, 3, 0.1, 0.1)
        field = uniform_field(isotropic_compliance(1e9, 0.3), 3, 3)
        with pytest.raises(SolverError):
            fem.assemble_solve(mesh, field, np.zeros(mesh.n_dofs), np.array([], dtype=int))

    def test_non_spd_material_rejected(self):
        mesh = fem.RectMesh(2, 2, 0.1, 0.1)
        field = uniform_field(-np.eye(3), 2, 2)
        with pytest.raises(DomainError):
            fem.assemble_solve(mesh, field, np.zeros(mesh.n_dofs), np.array([0, 1]))

    def test_cg_matches_direct(self):
        field = heterogeneous_sample(6)
        mesh = fem.RectMesh(6, 6, 1e-3 / 6, 1e-3 / 6)
        f = np.zeros(mesh.n_dofs)
        top = mesh.node_index(np.arange(7), 6)
        f[2 * top + 1] = -1e3
        bottom = mesh.node_index(np.arange(7), 0)
        fixed = np.concatenate([2 * bottom, 2 * bottom + 1])
        u_direct = fem.assemble_solve(mesh, field.values, f, fixed, method="direct")
        u_cg = fem.assemble_solve(mesh, field.values, f, fixed, method="cg")
        assert np.linalg.norm(u_cg - u_direct) / np.linalg.norm(u_direct) < 1e-8


class TestMacroCompression:
    def test_window_alignment_validation(self):
        with pytest.raises(ConfigError):
            fem.MacroProblem(nx=10, window_fraction=0.15)
        fem.MacroProblem(nx=20, window_fraction=0.1)

    def test_frictionless_compression_matches_uniaxial_solution(self):
        # roller-supported bottom: the uniform-stress solution sigma_22 = -p,
        # sigma_11 = 0 is exact, so eps_22 = -p/E and eps_11 = nu p / E
        young, nu = 12e9, 0.3
        problem = fem.MacroProblem(side=1e-2, nx=30, load=5e5, window_fraction=0.2)
        mesh = problem.mesh
        s = isotropic_compliance(young, nu)
        field = uniform_field(s, 30, 30)
        bottom = mesh.node_index(np.arange(31), 0)
        fixed = np.concatenate([2 * bottom + 1, [2 * bottom[0]]])
        u = fem.assemble_solve(mesh, field, problem.loads(), fixed)
        eps = fem.element_strains(mesh, u)
        p = problem.load
        interior = eps[10:20, 10:20]
        assert np.allclose(interior[..., 1], -p / young, rtol=0.05)
        assert np.allclose(interior[..., 0], nu * p / young, rtol=0.05)

    def test_clamped_interior_axial_strain(self):
        # with the clamped bottom of the actual test, the axial strain still
        # approaches the uniaxial value in the interior third
        young, nu = 12e9, 0.3
        problem = fem.MacroProblem(side=1e-2, nx=30, load=5e5, window_fraction=0.2)
        field = uniform_field(isotropic_compliance(young, nu), 30, 30)
        u = fem.assemble_solve(problem.mesh, field, problem.loads(), problem.fixed_dofs())
        eps = fem.element_strains(problem.mesh, u)
        assert np.allclose(eps[10:20, 10:20, 1], -problem.load / young, rtol=0.05)

    def test_homogeneous_window_dispersion_negligible(self):
        # frictionless idealization: strain exactly constant over the window
        problem = fem.MacroProblem(side=1e-2, nx=20, load=5e5, window_fraction=0.2)
        mesh = problem.mesh
        field = uniform_field(isotropic_compliance(12e9, 0.3), 20, 20)
        bottom = mesh.node_index(np.arange(21), 0)
        fixed = np.concatenate([2 * bottom + 1, [2 * bottom[0]]])
        u = fem.assemble_solve(mesh, field, problem.loads(), fixed)
        eps = fem.element_strains(mesh, u)
        start, count = problem.window_elements
        window = fem.StrainField(
            eps[start:start + count, start:start + count], mesh.dx, mesh.dy
        )
        assert dispersion_coefficient(window) < 1e-3

    def test_homogeneous_clamped_window_dispersion_small(self):
        # the clamped bottom leaves a genuine mild gradient in the window
        # (measured 4.8e-3 at the desk geometry, mesh-converged); it stays an
        # order of magnitude below the heterogeneous baseline
        problem = fem.MacroProblem(side=1e-2, nx=40, load=5e5, window_fraction=0.1)
        field = uniform_field(isotropic_compliance(12e9, 0.3), 40, 40)
        strains = fem.run_macro_compression(field, problem)
        assert dispersion_coefficient(strains) < 0.01

    def test_linearity_in_load(self):
        problem1 = fem.MacroProblem(side=1e-2, nx=20, load=5e5, window_fraction=0.2)
        problem2 = fem.MacroProblem(side=1e-2, nx=20, load=1e6, window_fraction=0.2)
        h = rf.HyperParams(0.4, 2e-4, 12e9, 3.5e9)
        grid = problem1.mesh.centroid_grid()
        field = rf.build_compliance_field(h, rf.sample_germ_field(h.ell, grid, 3, n_bins=8))
        s1 = fem.run_macro_compression(field, problem1)
        s2 = fem.run_macro_compression(field, problem2)
        assert np.allclose(2.0 * s1.values, s2.values, rtol=1e-10)

    def test_heterogeneous_sample_has_strain_dispersion(self):
        # regression baseline: a strongly heterogeneous sample must produce
        # clearly nonzero strain fluctuations over the window
        problem = fem.MacroProblem(side=1e-2, nx=40, load=5e5, window_fraction=0.25)
        h = rf.HyperParams(0.55, 1e-4, 12e9, 3.5e9)
        grid = problem.mesh.centroid_grid()
        field = rf.build_compliance_field(h, rf.sample_germ_field(h.ell, grid, 7, n_bins=32))
        strains = fem.run_macro_compression(field, problem)
        assert dispersion_coefficient(strains) > 0.05

    def test_field_must_cover_macro_mesh(self):
        problem = fem.MacroProblem(side=1e-2, nx=20, load=5e5, window_fraction=0.2)
        with pytest.raises(ConfigError):
            fem.run_macro_compression(np.zeros((10, 10, 3, 3)), problem)


class TestHomogenization:
    def test_homogeneous_material_exact(self):
        s = isotropic_compliance(12e9, 0.3)
        s_eff = fem.effective_compliance_subc(uniform_field(s, 16, 16), 1e-3 / 16, 1e-3 / 16)
        assert np.linalg.norm(s_eff - s) / np.linalg.norm(s) < 1e-8

    def test_symmetry_before_symmetrization(self):
        s = isotropic_compliance(9e9, 0.25)
        raw = fem.effective_compliance_subc(
            uniform_field(s, 12, 12), 1e-3 / 12, 1e-3 / 12, _raw=True
        )
        assert np.linalg.norm(raw - raw.T) / np.linalg.norm(raw) < 1e-8

    def test_two_phase_laminate_mixing_rule(self):
        # layers normal to x1 with matched S12: traction load cases 1 and 3
        # admit exact piecewise-uniform stress solutions, so the homogenized
        # column 1 and shear entry follow the series (Reuss) mixing rule
        s12 = -2.0e-11
        sa = np.array([[8.0e-11, s12, 0.0], [s12, 8.0e-11, 0.0], [0.0, 0.0, 2.4e-10]])
        sb = np.array([[3.0e-11, s12, 0.0], [s12, 3.0e-11, 0.0], [0.0, 0.0, 1.1e-10]])
        nx = ny = 16
        field = np.empty((nx, ny, 3, 3))
        field[0::2] = sa
        field[1::2] = sb
        raw = fem.effective_compliance_subc(field, 1e-3 / nx, 1e-3 / ny, _raw=True)
        assert raw[0, 0] == pytest.approx(0.5 * (sa[0, 0] + sb[0, 0]), rel=1e-8)
        assert raw[1, 0] == pytest.approx(s12, rel=1e-8)
        assert raw[2, 0] == pytest.approx(0.0, abs=1e-14)
        assert raw[2, 2] == pytest.approx(0.5 * (sa[2, 2] + sb[2, 2]), rel=1e-8)
        assert raw[0, 2] == pytest.approx(0.0, abs=1e-14)
        assert raw[1, 2] == pytest.approx(0.0, abs=1e-14)

    def test_rigid_body_pin_choice_is_neutral(self):
        field = heterogeneous_sample(10)
        a = fem.effective_compliance_subc(field, pin_choice=0)
        b = fem.effective_compliance_subc(field, pin_choice=1)
        assert np.linalg.norm(a - b) / np.linalg.norm(a) < 1e-8

    def test_subc_bounds_kubc(self):
        # traction-controlled apparent compliance dominates the
        # displacement-controlled one in the Loewner sense
        field = heterogeneous_sample(12, seed=11)
        s_subc = fem.effective_compliance_subc(field)
        s_kubc = fem.effective_compliance_kubc(field)
        w = np.linalg.eigvalsh(s_subc - s_kubc)
        assert w.min() > -1e-10 * np.linalg.norm(s_subc)

    def test_mesh_convergence_trend(self):
        # smooth deterministic heterogeneity sampled at element centroids:
        # refining the mesh shrinks the change in S_eff by roughly 4x
        base = isotropic_compliance(12e9, 0.3)

        def field(n):
            grid = np.linspace(0, 1, n, endpoint=False) + 0.5 / n
            x, y = np.meshgrid(grid, grid, indexing="ij")
            mod = 1.0 + 0.4 * np.sin(2 * np.pi * x) * np.sin(2 * np.pi * y)
            return base[None, None] * mod[..., None, None]

        results = [
            fem.effective_compliance_subc(field(n), 1e-3 / n, 1e-3 / n)
            for n in (8, 16, 32)
        ]
        d1 = np.linalg.norm(results[0] - results[1])
        d2 = np.linalg.norm(results[1] - results[2])
        assert d1 / d2 > 2.5

    def test_runtime_budget_32(self):
        import time

        s = isotropic_compliance(12e9, 0.3)
        field = uniform_field(s, 32, 32)
        t0 = time.perf_counter()
        fem.effective_compliance_subc(field, 1e-3 / 32, 1e-3 / 32)
        assert time.perf_counter() - t0 < 1.0
