"""2D plane-stress linear elasticity on structured Q4 meshes.

Covers the two boundary-value problems of the forward pipeline: the macro
compression test (top line load, clamped bottom) whose strains are observed
on a centered window, and traction-controlled homogenization of a window
sample into an effective 3x3 compliance matrix.

Elements are 4-node bilinear quadrilaterals with 2x2 Gauss quadrature and
piecewise-constant material per element.  Node (i, j) of an (nx, ny)-element
mesh has index ``i*(ny+1) + j``; dofs are interleaved (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg, splu

from .errors import ConfigError, DomainError, SolverError, SpdError
from .randfield import ComplianceFieldSample, GridSpec

_GAUSS = 1.0 / np.sqrt(3.0)
_GAUSS_POINTS = ((-_GAUSS, -_GAUSS), (_GAUSS, -_GAUSS), (_GAUSS, _GAUSS), (-_GAUSS, _GAUSS))

#: relative residual required from every linear solve
RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class RectMesh:
    """Structured mesh of nx-by-ny rectangular Q4 elements."""

    nx: int
    ny: int
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise DomainError("mesh needs at least one element per direction")
        if self.dx <= 0.0 or self.dy <= 0.0:
            raise DomainError("element size must be positive")

    @property
    def n_nodes(self):
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self):
        return 2 * self.n_nodes

    @property
    def n_elements(self):
        return self.nx * self.ny

    def node_index(self, i, j):
        return np.asarray(i) * (self.ny + 1) + np.asarray(j)

    def node_coords(self):
        i, j = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1), indexing="ij")
        return np.column_stack([(i * self.dx).ravel(), (j * self.dy).ravel()])

    def element_nodes(self):
        """Connectivity (ne, 4), counter-clockwise from the lower-left node."""
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny), indexing="ij")
        n0 = self.node_index(i, j).ravel()
        step = self.ny + 1
        return np.column_stack([n0, n0 + step, n0 + step + 1, n0 + 1])

    def element_dofs(self):
        nodes = self.element_nodes()
        dofs = np.empty((self.n_elements, 8), dtype=np.int64)
        dofs[:, 0::2] = 2 * nodes
        dofs[:, 1::2] = 2 * nodes + 1
        return dofs

    def centroid_grid(self):
        """Element centroids as a lattice spec (origin at dx/2, dy/2)."""
        return GridSpec(self.nx, self.ny, self.dx, self.dy, x0=self.dx / 2.0, y0=self.dy / 2.0)

    def boundary_nodes(self):
        idx = []
        for i in range(self.nx + 1):
            idx.extend([self.node_index(i, 0), self.node_index(i, self.ny)])
        for j in range(1, self.ny):
            idx.extend([self.node_index(0, j), self.node_index(self.nx, j)])
        return np.unique(np.asarray(idx))


def _shape_gradients(mesh):
    """B matrices (4, 3, 8) at the Gauss points plus their weights*detJ."""
    bs = np.zeros((4, 3, 8))
    inv_jx, inv_jy = 2.0 / mesh.dx, 2.0 / mesh.dy
    for g, (xi, eta) in enumerate(_GAUSS_POINTS):
        dn_dxi = 0.25 * np.array(
            [-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)]
        )
        dn_deta = 0.25 * np.array(
            [-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)]
        )
        dn_dx = dn_dxi * inv_jx
        dn_dy = dn_deta * inv_jy
        bs[g, 0, 0::2] = dn_dx
        bs[g, 1, 1::2] = dn_dy
        bs[g, 2, 0::2] = dn_dy
        bs[g, 2, 1::2] = dn_dx
    wdet = np.full(4, mesh.dx * mesh.dy / 4.0)
    return bs, wdet


def _element_compliances(mesh, compliance):
    values = np.asarray(compliance, dtype=float)
    if values.shape == (mesh.nx, mesh.ny, 3, 3):
        values = values.reshape(mesh.n_elements, 3, 3)
    if values.shape != (mesh.n_elements, 3, 3):
        raise DomainError(
            f"compliance field shape {values.shape} does not match mesh "
            f"({mesh.nx}x{mesh.ny} elements)"
        )
    return values


def assemble_stiffness(mesh, compliance):
    """Assemble the global stiffness matrix from an elementwise compliance field."""
    s_el = _element_compliances(mesh, compliance)
    try:
        np.linalg.cholesky(s_el)
    except np.linalg.LinAlgError as exc:
        raise DomainError("every element compliance matrix must be SPD") from exc
    d_el = np.linalg.inv(s_el)
    bs, wdet = _shape_gradients(mesh)
    ke = np.einsum("gai,eab,gbj,g->eij", bs, d_el, bs, wdet, optimize=True)
    dofs = mesh.element_dofs()
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    k = sparse.coo_matrix((ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs))
    return k.tocsc()


def assemble_solve(mesh, compliance, loads, fixed_dofs, fixed_values=None, method="direct"):
    """Solve K u = f with prescribed displacements on ``fixed_dofs``.

    Returns the full nodal displacement vector.  The relative residual of the
    reduced system must reach ``RESIDUAL_TOL`` or a SolverError is raised.
    """
    k = assemble_stiffness(mesh, compliance)
    fixed_dofs = np.asarray(fixed_dofs, dtype=np.int64)
    if fixed_dofs.size == 0:
        raise SolverError("no constrained dofs: system is singular")
    if fixed_values is None:
        fixed_values = np.zeros(fixed_dofs.size)
    fixed_values = np.asarray(fixed_values, dtype=float)
    loads = np.asarray(loads, dtype=float)
    if loads.shape != (mesh.n_dofs,):
        raise DomainError(f"load vector must have {mesh.n_dofs} entries")

    free = np.setdiff1d(np.arange(mesh.n_dofs), fixed_dofs)
    u = np.zeros(mesh.n_dofs)
    u[fixed_dofs] = fixed_values
    rhs = loads[free] - k[np.ix_(free, fixed_dofs)] @ fixed_values
    kff = k[np.ix_(free, free)].tocsc()

    if method == "direct":
        try:
            u_free = splu(kff, permc_spec="MMD_ATA").solve(rhs)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
    elif method == "cg":
        precond = sparse.diags(1.0 / kff.diagonal())
        u_free, info = cg(kff, rhs, rtol=1e-12, atol=0.0, maxiter=20000, M=precond)
        if info != 0:
            raise SolverError(f"conjugate gradient did not converge (info={info})")
    else:
        raise ConfigError(f"unknown solver method {method!r}")

    ref = np.linalg.norm(rhs)
    if ref > 0.0:
        residual = np.linalg.norm(kff @ u_free - rhs) / ref
        if not np.isfinite(residual) or residual > RESIDUAL_TOL:
            raise SolverError(f"solver residual {residual:.3e} exceeds {RESIDUAL_TOL}")
    u[free] = u_free
    return u


def element_strains(mesh, u):
    """Centroid strains (nx, ny, 3): mean of the 2x2 Gauss-point strains."""
    bs, _ = _shape_gradients(mesh)
    b_bar = bs.mean(axis=0)
    ue = np.asarray(u, dtype=float)[mesh.element_dofs()]
    eps = ue @ b_bar.T
    return eps.reshape(mesh.nx, mesh.ny, 3)


@dataclass(frozen=True)
class StrainField:
    """Plane-stress strain vectors (e11, e22, 2*e12) on a window lattice."""

    values: np.ndarray  # (wx, wy, 3)
    dx: float
    dy: float


@dataclass(frozen=True)
class MacroProblem:
    """Compression test on a square domain: uniform downward line load on the
    top edge, clamped bottom edge, stress-free sides.

    The observation window is centered, ``window_fraction`` of the side, and
    must align with element boundaries.
    """

    side: float = 1e-2
    nx: int = 100
    load: float = 5e5
    window_fraction: float = 0.1

    def __post_init__(self):
        if self.side <= 0.0 or self.load < 0.0 or self.nx < 2:
            raise ConfigError("invalid macro problem dimensions")
        n_win = self.nx * self.window_fraction
        if abs(n_win - round(n_win)) > 1e-9 or round(n_win) < 1:
            raise ConfigError(
                f"window of fraction {self.window_fraction} does not align with "
                f"a {self.nx}x{self.nx} mesh"
            )
        if (self.nx - round(n_win)) % 2 != 0:
            raise ConfigError("window cannot be centered on this mesh")

    @property
    def mesh(self):
        h = self.side / self.nx
        return RectMesh(self.nx, self.nx, h, h)

    @property
    def window_elements(self):
        """(start, count) of window elements along each axis."""
        count = round(self.nx * self.window_fraction)
        start = (self.nx - count) // 2
        return start, count

    def window_grid(self, n_sub):
        """Lattice of n_sub x n_sub element centroids re-meshing the window."""
        start, count = self.window_elements
        h = self.side / self.nx
        length = count * h
        sub = length / n_sub
        origin = start * h + sub / 2.0
        return GridSpec(n_sub, n_sub, sub, sub, x0=origin, y0=origin)

    def loads(self):
        mesh = self.mesh
        f = np.zeros(mesh.n_dofs)
        top = mesh.node_index(np.arange(self.nx + 1), self.nx)
        f[2 * top + 1] = -self.load * mesh.dx
        f[2 * top[[0, -1]] + 1] = -self.load * mesh.dx / 2.0
        return f

    def fixed_dofs(self):
        mesh = self.mesh
        bottom = mesh.node_index(np.arange(self.nx + 1), 0)
        return np.sort(np.concatenate([2 * bottom, 2 * bottom + 1]))


def run_macro_compression(field, problem, method="direct"):
    """Solve the compression test and return window-restricted centroid strains."""
    if isinstance(field, ComplianceFieldSample):
        values = field.values
    else:
        values = np.asarray(field, dtype=float)
    mesh = problem.mesh
    if values.shape != (mesh.nx, mesh.ny, 3, 3):
        raise ConfigError(
            f"compliance field shape {values.shape} does not cover the "
            f"{mesh.nx}x{mesh.ny} macro mesh"
        )
    u = assemble_solve(mesh, values, problem.loads(), problem.fixed_dofs(), method=method)
    eps = element_strains(mesh, u)
    start, count = problem.window_elements
    window = eps[start:start + count, start:start + count, :]
    return StrainField(values=np.ascontiguousarray(window), dx=mesh.dx, dy=mesh.dy)


def _boundary_tractions(mesh, sigma):
    """Consistent nodal loads for uniform boundary tractions t = sigma.n."""
    s = np.array([[sigma[0], sigma[2]], [sigma[2], sigma[1]]])
    f = np.zeros(mesh.n_dofs)
    edges = [
        (mesh.node_index(0, np.arange(mesh.ny + 1)), np.array([-1.0, 0.0]), mesh.dy),
        (mesh.node_index(mesh.nx, np.arange(mesh.ny + 1)), np.array([1.0, 0.0]), mesh.dy),
        (mesh.node_index(np.arange(mesh.nx + 1), 0), np.array([0.0, -1.0]), mesh.dx),
        (mesh.node_index(np.arange(mesh.nx + 1), mesh.ny), np.array([0.0, 1.0]), mesh.dx),
    ]
    for nodes, normal, length in edges:
        t = s @ normal
        w = np.full(nodes.size, length)
        w[[0, -1]] = length / 2.0
        f[2 * nodes] += t[0] * w
        f[2 * nodes + 1] += t[1] * w
    return f


def _rigid_body_pins(mesh, choice=0):
    """Minimal pin set removing the three rigid-body modes."""
    if choice == 0:
        a = mesh.node_index(0, 0)
        b = mesh.node_index(0, mesh.ny)
        return np.array([2 * a, 2 * a + 1, 2 * b], dtype=np.int64)
    a = mesh.node_index(mesh.nx, 0)
    b = mesh.node_index(mesh.nx, mesh.ny)
    return np.array([2 * a, 2 * a + 1, 2 * b], dtype=np.int64)


def effective_compliance_subc(field, dx=None, dy=None, pin_choice=0, _raw=False):
    """Traction-controlled homogenization of a window sample.

    Applies the three unit macroscopic stress states as uniform boundary
    tractions, pins the rigid-body modes, and collects the volume-averaged
    strains as columns of the effective compliance, symmetrized at the end.
    """
    if isinstance(field, ComplianceFieldSample):
        values = field.values
        dx, dy = field.grid.dx, field.grid.dy
    else:
        values = np.asarray(field, dtype=float)
        if dx is None or dy is None:
            raise ConfigError("dx, dy required when passing a raw array")
    nx, ny = values.shape[0], values.shape[1]
    mesh = RectMesh(nx, ny, dx, dy)
    k = assemble_stiffness(mesh, values)
    pins = _rigid_body_pins(mesh, pin_choice)
    free = np.setdiff1d(np.arange(mesh.n_dofs), pins)
    kff = k[np.ix_(free, free)].tocsc()
    try:
        lu = splu(kff, permc_spec="MMD_ATA")
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc

    s_eff = np.zeros((3, 3))
    for case in range(3):
        sigma = np.zeros(3)
        sigma[case] = 1.0
        f = _boundary_tractions(mesh, sigma)
        rhs = f[free]
        u_free = lu.solve(rhs)
        ref = np.linalg.norm(rhs)
        residual = np.linalg.norm(kff @ u_free - rhs) / ref
        if not np.isfinite(residual) or residual > RESIDUAL_TOL:
            raise SolverError(f"traction case {case}: residual {residual:.3e}")
        u = np.zeros(mesh.n_dofs)
        u[free] = u_free
        eps = element_strains(mesh, u)
        s_eff[:, case] = eps.mean(axis=(0, 1))
    if _raw:
        return s_eff
    s_eff = 0.5 * (s_eff + s_eff.T)
    if np.linalg.eigvalsh(s_eff).min() <= 0.0:
        raise SpdError("homogenized compliance is not positive-definite")
    return s_eff


def effective_compliance_kubc(field, dx=None, dy=None):
    """Displacement-controlled homogenization (reference bound for checks)."""
    if isinstance(field, ComplianceFieldSample):
        values = field.values
        dx, dy = field.grid.dx, field.grid.dy
    else:
        values = np.asarray(field, dtype=float)
        if dx is None or dy is None:
            raise ConfigError("dx, dy required when passing a raw array")
    nx, ny = values.shape[0], values.shape[1]
    mesh = RectMesh(nx, ny, dx, dy)
    d_el = np.linalg.inv(_element_compliances(mesh, values))
    coords = mesh.node_coords()
    boundary = mesh.boundary_nodes()
    fixed = np.concatenate([2 * boundary, 2 * boundary + 1])
    loads = np.zeros(mesh.n_dofs)

    c_eff = np.zeros((3, 3))
    for case in range(3):
        e0 = np.zeros(3)
        e0[case] = 1.0
        ux = e0[0] * coords[boundary, 0] + 0.5 * e0[2] * coords[boundary, 1]
        uy = 0.5 * e0[2] * coords[boundary, 0] + e0[1] * coords[boundary, 1]
        vals = np.empty(fixed.size)
        vals[: boundary.size] = ux
        vals[boundary.size:] = uy
        u = assemble_solve(mesh, values, loads, fixed, vals)
        eps = element_strains(mesh, u).reshape(-1, 3)
        sig = np.einsum("eij,ej->ei", d_el, eps)
        c_eff[:, case] = sig.mean(axis=0)
    c_eff = 0.5 * (c_eff + c_eff.T)
    s = np.linalg.inv(c_eff)
    return 0.5 * (s + s.T)
