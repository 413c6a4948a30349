"""Structured triangulations of [-1, 1]^2, coarse node lattices, and subdomains.

All meshes live on the fixed square domain. Each grid cell is split along its
lower-left to upper-right diagonal, so the triangulation is fully determined
by the number of cells per axis. Everything built here is immutable after
construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

DOMAIN_LO = -1.0
DOMAIN_HI = 1.0
#: Diameter of the square domain [-1, 1]^2.
DOMAIN_DIAM = 2.0 * np.sqrt(2.0)


class FineMesh:
    """Uniform triangulation of [-1, 1]^2 with n x n square cells.

    Node ids are lexicographic, ``iy * (n + 1) + ix``. Each square cell
    (ix, iy) produces two triangles: the lower one (ll, lr, ur) followed by
    the upper one (ll, ur, ul), both counterclockwise. Triangle ids follow
    cell order, so triangles ``2k`` and ``2k + 1`` share square cell ``k``.
    """

    def __init__(self, n: int):
        if n < 1:
            raise ValueError(f"cells-per-axis must be a positive integer, got {n}")
        self.n = int(n)
        n = self.n
        side = n + 1
        xs = np.linspace(DOMAIN_LO, DOMAIN_HI, side)
        self.axis_coords = xs
        X, Y = np.meshgrid(xs, xs)  # row iy, column ix
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])

        ix, iy = np.meshgrid(np.arange(n), np.arange(n))
        ll = (iy * side + ix).ravel()
        lr = ll + 1
        ul = ll + side
        ur = ul + 1
        tris = np.empty((2 * n * n, 3), dtype=np.int64)
        tris[0::2] = np.column_stack([ll, lr, ur])
        tris[1::2] = np.column_stack([ll, ur, ul])
        self.triangles = tris

        p = self.nodes[tris]  # (T, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        self.areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        self.barycenters = p.mean(axis=1)

        # P1 barycentric gradients: grad_i = (y_{i+1} - y_{i+2}, x_{i+2} - x_{i+1}) / (2A)
        g = np.empty((len(tris), 3, 2))
        for i in range(3):
            j, k = (i + 1) % 3, (i + 2) % 3
            g[:, i, 0] = p[:, j, 1] - p[:, k, 1]
            g[:, i, 1] = p[:, k, 0] - p[:, j, 0]
        g /= 2.0 * self.areas[:, None, None]
        self.grads = g

        gx, gy = np.meshgrid(np.arange(side), np.arange(side))
        boundary = (gx == 0) | (gx == n) | (gy == 0) | (gy == n)
        dof_map = -np.ones(side * side, dtype=np.int64)
        interior = ~boundary.ravel()
        dof_map[interior] = np.arange(interior.sum())
        self.interior_dof_map = dof_map
        self.dof_nodes = np.nonzero(interior)[0]

        self.node_tri_count = np.bincount(tris.ravel(), minlength=side * side)
        self.cell_size = (DOMAIN_HI - DOMAIN_LO) / n
        self._adjacency = None

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    @property
    def num_interior_dofs(self) -> int:
        return len(self.dof_nodes)

    def node_id(self, ix: int, iy: int) -> int:
        return iy * (self.n + 1) + ix

    def triangle_adjacency(self) -> csr_matrix:
        """Face-adjacency graph of triangles (shared edge), built on demand."""
        if self._adjacency is None:
            tris = self.triangles
            edges = np.concatenate(
                [tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]], axis=0
            )
            edges.sort(axis=1)
            owner = np.tile(np.arange(len(tris)), 3)
            key = edges[:, 0] * self.num_nodes + edges[:, 1]
            order = np.argsort(key, kind="stable")
            key, owner = key[order], owner[order]
            shared = key[1:] == key[:-1]
            a, b = owner[:-1][shared], owner[1:][shared]
            ones = np.ones(len(a))
            adj = coo_matrix(
                (np.concatenate([ones, ones]),
                 (np.concatenate([a, b]), np.concatenate([b, a]))),
                shape=(len(tris), len(tris)),
            )
            self._adjacency = adj.tocsr()
        return self._adjacency

    def export_text(self, nodes_path, triangles_path) -> None:
        """Plain-text dump: one record per line (index, then coords / vertex ids)."""
        with open(nodes_path, "w") as f:
            for i, (x, y) in enumerate(self.nodes):
                f.write(f"{i} {float(x)!r} {float(y)!r}\n")
        with open(triangles_path, "w") as f:
            for i, (a, b, c) in enumerate(self.triangles):
                f.write(f"{i} {a} {b} {c}\n")


def build_fine_mesh(n: int) -> FineMesh:
    return FineMesh(n)


@dataclass(frozen=True)
class CoarseLattice:
    """Interior lattice of spacing h: points (-1 + i*h, -1 + j*h), 0 < i, j < 2/h."""

    h: float
    m: int  # subdivisions per axis, m = 2/h
    points: np.ndarray  # (N, 2), row-major over (j, i)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def nodes_per_axis(self) -> int:
        return self.m - 1

    def flat_index(self, i: int, j: int) -> int:
        return (j - 1) * (self.m - 1) + (i - 1)

    def axis_fine_stride(self, mesh: FineMesh) -> int:
        """Fine cells per coarse cell; raises if the mesh does not resolve h."""
        if mesh.n % self.m != 0:
            raise ValueError(
                f"fine mesh n={mesh.n} does not resolve coarse spacing h={self.h}"
            )
        return mesh.n // self.m

    def fine_node_ids(self, mesh: FineMesh) -> np.ndarray:
        """Fine-mesh node id of every lattice point (same ordering as points)."""
        r = self.axis_fine_stride(mesh)
        k = np.arange(1, self.m)
        ix, iy = np.meshgrid(k * r, k * r)
        return (iy * (mesh.n + 1) + ix).ravel()


def build_coarse_lattice(h: float, mesh: FineMesh | None = None) -> CoarseLattice:
    if h <= 0:
        raise ValueError(f"coarse spacing must be positive, got {h}")
    m_real = (DOMAIN_HI - DOMAIN_LO) / h
    m = int(round(m_real))
    if m < 1 or abs(m_real - m) > 1e-9:
        raise ValueError(f"coarse spacing h={h} does not divide the domain evenly")
    if m < 2:
        raise ValueError(f"coarse spacing h={h} leaves no interior lattice node")
    if mesh is not None and mesh.n % m != 0:
        raise ValueError(
            f"fine mesh n={mesh.n} does not resolve coarse spacing h={h}"
        )
    if mesh is not None:
        xs = mesh.axis_coords[:: mesh.n // m][1:-1]
    else:
        xs = DOMAIN_LO + h * np.arange(1, m)
    X, Y = np.meshgrid(xs, xs)
    return CoarseLattice(h=float(h), m=m, points=np.column_stack([X.ravel(), Y.ravel()]))


@dataclass
class Subdomain:
    """A face-connected set of fine triangles with its own Dirichlet dof set.

    ``local_nodes`` are the parent nodes lying strictly inside the cell union
    (every incident triangle is a member) and not on the domain boundary;
    everything else touching a member cell is pinned. ``base_cells`` records
    the pre-buffering cell set so that re-buffering an already buffered
    subdomain reproduces it.
    """

    mesh: FineMesh
    cells: np.ndarray
    local_nodes: np.ndarray
    local_dof_map: np.ndarray
    boundary_nodes: np.ndarray
    base_cells: np.ndarray
    center: np.ndarray | None = None
    radius: float | None = None
    warning: bool = False

    @property
    def num_local_dofs(self) -> int:
        return len(self.local_nodes)

    @property
    def covers_mesh(self) -> bool:
        return len(self.cells) == self.mesh.num_triangles

    def contains_cells(self, cells: np.ndarray) -> bool:
        return bool(np.isin(cells, self.cells, assume_unique=False).all())


def _make_subdomain(mesh: FineMesh, cells: np.ndarray, base_cells=None,
                    center=None, radius=None, warning=False) -> Subdomain:
    cells = np.unique(np.asarray(cells, dtype=np.int64))
    if len(cells) == 0:
        raise ValueError("subdomain has an empty cell set")
    counts = np.zeros(mesh.num_nodes, dtype=np.int64)
    np.add.at(counts, mesh.triangles[cells].ravel(), 1)
    member = np.nonzero(counts)[0]
    is_local = (counts[member] == mesh.node_tri_count[member]) & (
        mesh.interior_dof_map[member] >= 0
    )
    local_nodes = member[is_local]
    dof_map = -np.ones(mesh.num_nodes, dtype=np.int64)
    dof_map[local_nodes] = np.arange(len(local_nodes))
    if base_cells is None:
        base_cells = cells
    return Subdomain(
        mesh=mesh,
        cells=cells,
        local_nodes=local_nodes,
        local_dof_map=dof_map,
        boundary_nodes=member[~is_local],
        base_cells=np.asarray(base_cells, dtype=np.int64),
        center=None if center is None else np.asarray(center, dtype=float),
        radius=radius,
        warning=warning,
    )


def whole_mesh_subdomain(mesh: FineMesh) -> Subdomain:
    """The trivial subdomain covering all of the mesh; its dof order matches
    the mesh interior dof order exactly."""
    return _make_subdomain(mesh, np.arange(mesh.num_triangles))


def extract_subdomain(mesh: FineMesh, center, radius: float) -> Subdomain:
    """Cells whose barycenter lies in the closed ball B(center, radius)."""
    if radius <= 0:
        raise ValueError(f"subdomain radius must be positive, got {radius}")
    center = np.asarray(center, dtype=float)
    dist = np.linalg.norm(mesh.barycenters - center, axis=1)
    cells = np.nonzero(dist <= radius)[0]
    if len(cells) == 0:
        raise ValueError(
            f"ball B({tuple(center)}, {radius}) contains no cell barycenter"
        )
    return _make_subdomain(mesh, cells, center=center, radius=float(radius))


def _dilate_cells(mesh: FineMesh, cell_mask: np.ndarray, dist: float) -> np.ndarray:
    """Mask of cells whose barycenter is within `dist` of any masked barycenter."""
    src = mesh.barycenters[cell_mask]
    tree = cKDTree(src)
    d, _ = tree.query(mesh.barycenters, k=1, distance_upper_bound=dist * (1 + 1e-12) + 1e-300)
    return d <= dist


def buffered_subdomain(mesh: FineMesh, coeff, base: Subdomain, buffer: float,
                       contrast_threshold: float) -> Subdomain:
    """Grow `base` so high-contrast components are swallowed whole, then add a
    bounded-contrast buffer ring of the given width.

    A cell is high-contrast when its value exceeds contrast_threshold times
    the median value. The result is the dilation by `buffer` of the smallest
    cell set containing base's pre-buffer cells such that no high-contrast
    component is clipped by the dilated set. Growth is computed from
    ``base.base_cells``, so the operation is idempotent.
    """
    if buffer <= 0:
        raise ValueError(f"buffer width must be positive, got {buffer}")
    if contrast_threshold <= 1:
        raise ValueError(
            f"contrast threshold must exceed 1, got {contrast_threshold}"
        )
    values = np.asarray(coeff.values, dtype=float)
    if len(values) != mesh.num_triangles:
        raise ValueError("coefficient field does not match the mesh")
    high = values > contrast_threshold * np.median(values)

    labels = -np.ones(mesh.num_triangles, dtype=np.int64)
    comp_cells: list[np.ndarray] = []
    if high.any():
        high_idx = np.nonzero(high)[0]
        sub = mesh.triangle_adjacency()[high_idx][:, high_idx]
        ncomp, sub_labels = connected_components(sub, directed=False)
        labels[high_idx] = sub_labels
        order = np.argsort(sub_labels, kind="stable")
        splits = np.searchsorted(sub_labels[order], np.arange(1, ncomp))
        comp_cells = np.split(high_idx[order], splits)

    core = np.zeros(mesh.num_triangles, dtype=bool)
    core[base.base_cells] = True
    swallowed = False
    while True:
        result = _dilate_cells(mesh, core, buffer)
        hit = np.unique(labels[result])
        hit = hit[hit >= 0]
        grew = False
        for comp_id in hit:
            comp = comp_cells[comp_id]
            if not core[comp].all():
                core[comp] = True
                grew = True
                swallowed = True
        if not grew:
            break

    cells = np.nonzero(result)[0]
    warning = swallowed and len(cells) == mesh.num_triangles
    return _make_subdomain(mesh, cells, base_cells=base.base_cells,
                           center=base.center, radius=base.radius,
                           warning=warning)
