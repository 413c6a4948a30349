"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately simple and loop-based: shape functions come
from solving 3x3 Vandermonde systems, integrals from quadrature rules, set
operations from explicit scans. Slow, but a genuinely different code path.
"""

import numpy as np

# 7-point Gauss rule on the reference triangle (degree 5), barycentric coords.
_G7_BARY = np.array([
    [1 / 3, 1 / 3, 1 / 3],
    [0.797426985353087, 0.101286507323456, 0.101286507323456],
    [0.101286507323456, 0.797426985353087, 0.101286507323456],
    [0.101286507323456, 0.101286507323456, 0.797426985353087],
    [0.059715871789770, 0.470142064105115, 0.470142064105115],
    [0.470142064105115, 0.059715871789770, 0.470142064105115],
    [0.470142064105115, 0.470142064105115, 0.059715871789770],
])
_G7_W = np.array([
    0.225,
    0.125939180544827, 0.125939180544827, 0.125939180544827,
    0.132394152788506, 0.132394152788506, 0.132394152788506,
])


def shape_gradients(p):
    """Gradients of the three P1 shape functions of a triangle, from scratch."""
    V = np.column_stack([np.ones(3), p[:, 0], p[:, 1]])
    grads = np.empty((3, 2))
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1.0
        coeff = np.linalg.solve(V, e)
        grads[i] = coeff[1:]
    return grads


def _tri_area(p):
    return 0.5 * abs((p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
                     - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1]))


def dense_stiffness(mesh, avals, dof_map, ndof, screening=None):
    """Dense assembly of int a grad v . grad w (+ screening mass) by quadrature."""
    avals = np.broadcast_to(np.asarray(avals, dtype=float), (mesh.num_triangles,))
    A = np.zeros((ndof, ndof))
    mids = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    for t, tri in enumerate(mesh.triangles):
        p = mesh.nodes[tri]
        area = _tri_area(p)
        g = shape_gradients(p)
        dofs = dof_map[tri]
        for i in range(3):
            if dofs[i] < 0:
                continue
            for j in range(3):
                if dofs[j] < 0:
                    continue
                val = avals[t] * area * (g[i] @ g[j])
                if screening:
                    # edge-midpoint rule, exact for the quadratic integrand
                    val += screening * area / 3.0 * sum(
                        m[i] * m[j] for m in mids)
                A[dofs[i], dofs[j]] += val
    return A


def dense_mass(mesh, rho, dof_map, ndof):
    rho = np.broadcast_to(np.asarray(rho, dtype=float), (mesh.num_triangles,))
    M = np.zeros((ndof, ndof))
    mids = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
    for t, tri in enumerate(mesh.triangles):
        p = mesh.nodes[tri]
        area = _tri_area(p)
        dofs = dof_map[tri]
        for i in range(3):
            if dofs[i] < 0:
                continue
            for j in range(3):
                if dofs[j] < 0:
                    continue
                M[dofs[i], dofs[j]] += rho[t] * area / 3.0 * sum(
                    m[i] * m[j] for m in mids)
    return M


def load_gauss7(mesh, g):
    """Load vector with a degree-5 quadrature rule; oracle for the midpoint rule."""
    out = np.zeros(mesh.num_interior_dofs)
    for tri in mesh.triangles:
        p = mesh.nodes[tri]
        area = _tri_area(p)
        pts = _G7_BARY @ p
        gv = g(pts[:, 0], pts[:, 1])
        dofs = mesh.interior_dof_map[tri]
        for i in range(3):
            if dofs[i] >= 0:
                out[dofs[i]] += area * np.sum(_G7_W * gv * _G7_BARY[:, i])
    return out


def ball_cells(mesh, center, radius):
    """Brute-force point-in-disk test over all barycenters."""
    out = []
    for t in range(mesh.num_triangles):
        d = np.hypot(mesh.barycenters[t, 0] - center[0],
                     mesh.barycenters[t, 1] - center[1])
        if d <= radius:
            out.append(t)
    return np.array(out)


def dilate_cells(mesh, cells, dist):
    """Brute-force dilation: cells with a barycenter within dist of the set."""
    src = mesh.barycenters[np.asarray(cells)]
    out = []
    for t in range(mesh.num_triangles):
        d = np.min(np.linalg.norm(src - mesh.barycenters[t], axis=1))
        if d <= dist:
            out.append(t)
    return np.array(out)


def face_adjacency_pairs(mesh):
    """Triangle pairs sharing exactly two vertices (an edge); O(T^2) scan."""
    tris = [set(t) for t in mesh.triangles]
    pairs = []
    for i in range(len(tris)):
        for j in range(i + 1, len(tris)):
            if len(tris[i] & tris[j]) == 2:
                pairs.append((i, j))
    return pairs


def bfs_component(mesh, member_cells, start):
    """Connected component of `start` inside member_cells, by explicit BFS."""
    member = set(int(c) for c in member_cells)
    adj = {}
    for i, j in face_adjacency_pairs(mesh):
        if i in member and j in member:
            adj.setdefault(i, []).append(j)
            adj.setdefault(j, []).append(i)
    seen = {int(start)}
    queue = [int(start)]
    while queue:
        c = queue.pop()
        for nb in adj.get(c, []):
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return np.array(sorted(seen))
