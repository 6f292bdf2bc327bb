"""Tetrahedral box meshes, boundary extraction, the planar obstacle set and quadrature.

Built-in domains are axis-aligned boxes resting on the plane {x3 = 0}, split
into Kuhn tetrahedra (six per cube, all sharing the cell's main diagonal, so
subdivisions of neighbouring cells conform). Arbitrary meshes can be loaded
from the text format described in `read_mesh_file`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MeshError(Exception):
    """Invalid mesh topology or geometry."""


class ObstacleError(Exception):
    """Raised when the planar contact set is empty or inconsistent."""


# Vertex chains of the Kuhn subdivision: walk from the cell origin to the
# opposite corner, one axis per step, one tetrahedron per permutation.
KUHN_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))

# Outward-oriented faces of a positively oriented tet (v0, v1, v2, v3).
_TET_FACES = ((0, 2, 1), (0, 1, 3), (0, 3, 2), (1, 2, 3))

PLANE_TOL = 1e-12


@dataclass
class Mesh:
    """Immutable tetrahedral mesh with per-element P1 gradient operators.

    element_gradient_maps[e] is the 3x4 matrix G with (G @ f_nodal) the
    constant gradient of the P1 interpolant of a scalar field f on element e.
    boundary_area_vectors hold outward-oriented triangle area vectors.
    """

    nodes: np.ndarray                 # (N, 3)
    tets: np.ndarray                  # (M, 4) int
    boundary_tris: np.ndarray         # (B, 3) int, outward oriented
    boundary_area_vectors: np.ndarray  # (B, 3)
    element_volumes: np.ndarray       # (M,)
    element_gradient_maps: np.ndarray  # (M, 3, 4)
    analytic_volume: float | None = None
    box_origin: np.ndarray | None = None
    box_lengths: np.ndarray | None = None
    box_divisions: np.ndarray | None = None
    box_parity: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_nodes(self):
        return self.nodes.shape[0]

    @property
    def num_elements(self):
        return self.tets.shape[0]

    @property
    def volume(self):
        return float(self.element_volumes.sum())

    def boundary_node_indices(self):
        return np.unique(self.boundary_tris)

    def element_gradients(self, u):
        """Per-element gradient of a nodal field.

        For scalar u (N,), returns (M, 3). For vector u (N, 3), returns
        (M, 3, 3) with entry [e, i, j] = d u_i / d x_j on element e.
        """
        u = np.asarray(u, dtype=float)
        vals = u[self.tets]  # (M, 4) or (M, 4, 3)
        if vals.ndim == 2:
            return np.einsum("eja,ea->ej", self.element_gradient_maps, vals)
        return np.einsum("eja,eai->eij", self.element_gradient_maps, vals)

    def validate(self, rtol=1e-12):
        if np.any(self.element_volumes <= 0.0):
            raise MeshError("non-positive element volume")
        if self.analytic_volume is not None:
            rel = abs(self.volume - self.analytic_volume) / self.analytic_volume
            if rel > rtol:
                raise MeshError(f"volume defect {rel:.3e} exceeds {rtol:.1e}")
        # Boundary must close up: outward area vectors of a watertight surface sum to zero.
        closure = np.abs(self.boundary_area_vectors.sum(axis=0)).max()
        scale = np.linalg.norm(self.boundary_area_vectors, axis=1).sum()
        if closure > 1e-12 * max(scale, 1.0):
            raise MeshError(f"boundary does not close (residual {closure:.3e})")
        # P1 exactness: gradient of the coordinate field is the identity.
        for k in range(3):
            g = self.element_gradients(self.nodes[:, k])
            ident = np.zeros(3)
            ident[k] = 1.0
            if np.abs(g - ident).max() > 1e-12 * max(1.0, np.abs(self.nodes).max()):
                raise MeshError("coordinate field gradient is not the identity")
        return True


@dataclass
class ObstacleSet:
    """Nodes of the mesh boundary lying on the plane {x3 = 0}.

    The continuum contact set is replaced by this nodal set: on a P1 mesh every
    node carries positive discrete capacity and nodal values stand in for
    precise representatives, so the quasi-everywhere constraint becomes a
    per-node inequality. hull_vertices_2d are the extreme points of the
    (x1, x2) projection, ordered counter-clockwise.
    """

    node_indices: np.ndarray      # (K,) int
    hull_vertices_2d: np.ndarray  # (H, 2)

    @property
    def num_nodes(self):
        return self.node_indices.shape[0]


def _grad_maps(nodes, tets):
    p = nodes[tets]                      # (M, 4, 3)
    d = p[:, 1:, :] - p[:, :1, :]        # (M, 3, 3) rows are edge vectors
    # d[m] has rows p1-p0, p2-p0, p3-p0; signed volume is det(rows)/6
    vols = np.linalg.det(d) / 6.0
    dinv = np.linalg.inv(d)              # grad(lambda_m) is column m-1 of D^-1
    g = np.empty((tets.shape[0], 3, 4))
    g[:, :, 1:] = dinv
    g[:, :, 0] = -g[:, :, 1:].sum(axis=2)
    return vols, g


def _boundary_faces(tets):
    faces = {}
    for e, tet in enumerate(tets):
        for loc in _TET_FACES:
            tri = tuple(int(tet[i]) for i in loc)
            key = tuple(sorted(tri))
            if key in faces:
                faces[key] = None
            else:
                faces[key] = tri
    out = [tri for tri in faces.values() if tri is not None]
    return np.array(out, dtype=int)


def _finish_mesh(nodes, tets, analytic_volume=None, box=None):
    tets = np.asarray(tets, dtype=int)
    nodes = np.asarray(nodes, dtype=float)
    # Fix orientation so every signed volume is positive.
    p = nodes[tets]
    d = p[:, 1:, :] - p[:, :1, :]
    neg = np.linalg.det(d) < 0
    tets[neg] = tets[neg][:, [0, 1, 3, 2]]
    vols, grads = _grad_maps(nodes, tets)
    if np.any(vols <= 0):
        raise MeshError("degenerate element")
    btris = _boundary_faces(tets)
    pa, pb, pc = nodes[btris[:, 0]], nodes[btris[:, 1]], nodes[btris[:, 2]]
    areas = 0.5 * np.cross(pb - pa, pc - pa)
    mesh = Mesh(
        nodes=nodes,
        tets=tets,
        boundary_tris=btris,
        boundary_area_vectors=areas,
        element_volumes=vols,
        element_gradient_maps=grads,
        analytic_volume=analytic_volume,
    )
    if box is not None:
        mesh.box_origin = np.asarray(box[0], dtype=float)
        mesh.box_lengths = np.asarray(box[1], dtype=float)
        mesh.box_divisions = np.asarray(box[2], dtype=int)
    mesh.validate()
    return mesh


def build_box_mesh(divisions, lengths=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0),
                   parity_offset=(0, 0, 0)):
    """Axis-aligned box split into Kuhn tetrahedra, six per cell.

    The diagonal direction alternates with the cell parity per axis, which
    makes the triangulation invariant under reflection across every grid
    plane (the field extension machinery relies on this); neighbouring cells
    still conform because shared-face diagonals depend only on the tangential
    parities. parity_offset shifts the parity pattern, letting meshes of
    different extent align their cells.
    """
    nx, ny, nz = (int(v) for v in np.atleast_1d(divisions) * np.ones(3, dtype=int))
    if min(nx, ny, nz) < 1:
        raise ValueError("subdivision counts must be >= 1")
    lengths = np.asarray(lengths, dtype=float)
    origin = np.asarray(origin, dtype=float)
    parity = np.asarray(parity_offset, dtype=int) % 2
    grid = np.meshgrid(
        origin[0] + lengths[0] * np.arange(nx + 1) / nx,
        origin[1] + lengths[1] * np.arange(ny + 1) / ny,
        origin[2] + lengths[2] * np.arange(nz + 1) / nz,
        indexing="ij",
    )
    nodes = np.stack([g.ravel() for g in grid], axis=1)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                cell = np.array([i, j, k])
                flags = (cell + parity) % 2
                start = cell + flags
                dirs = 1 - 2 * flags
                for perm in KUHN_PERMS:
                    chain = [start.copy()]
                    for ax in perm:
                        nxt = chain[-1].copy()
                        nxt[ax] += dirs[ax]
                        chain.append(nxt)
                    tets.append([nid(*v) for v in chain])
    mesh = _finish_mesh(
        nodes,
        tets,
        analytic_volume=float(np.prod(lengths)),
        box=(origin, lengths, (nx, ny, nz)),
    )
    mesh.box_parity = parity
    return mesh


def build_unit_cube_mesh(n):
    """Unit cube [0,1]^3 split into n^3 cells of six tets each."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return build_box_mesh((n, n, n))


def convex_hull_2d(points, tol=1e-12):
    """Extreme points of a 2-D point set, counter-clockwise (monotone chain)."""
    pts = sorted({(float(p[0]), float(p[1])) for p in points})
    if len(pts) == 1:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def half(seq):
        out = []
        for p in seq:
            while len(out) > 1 and cross(out[-2], out[-1], p) <= tol:
                out.pop()
            out.append(p)
        return out

    lower = half(pts)
    upper = half(reversed(pts))
    return np.array(lower[:-1] + upper[:-1])


def point_in_hull_2d(point, hull, strict_margin=0.0):
    """True if a point lies inside a counter-clockwise convex polygon."""
    hull = np.asarray(hull, dtype=float)
    if hull.shape[0] < 3:
        return False
    p = np.asarray(point, dtype=float)
    nxt = np.roll(hull, -1, axis=0)
    edge = nxt - hull
    rel = p[None, :] - hull
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool(np.all(cross > strict_margin))


def extract_obstacle(mesh):
    """Boundary nodes on {x3 = 0} together with their planar convex hull."""
    bnodes = mesh.boundary_node_indices()
    on_plane = bnodes[np.abs(mesh.nodes[bnodes, 2]) <= PLANE_TOL]
    if on_plane.size == 0:
        raise ObstacleError("obstacle hypothesis violated: no boundary node on {x3 = 0}")
    hull = convex_hull_2d(mesh.nodes[on_plane, :2])
    return ObstacleSet(node_indices=on_plane, hull_vertices_2d=hull)


def boundary_region(mesh, name):
    """Indices of boundary triangles in a named region of a box mesh."""
    if name == "all":
        return np.arange(mesh.boundary_tris.shape[0])
    if mesh.box_origin is None:
        raise MeshError(f"named region {name!r} requires a box mesh")
    lo = mesh.box_origin
    hi = mesh.box_origin + mesh.box_lengths
    cent = mesh.nodes[mesh.boundary_tris].mean(axis=1)
    tol = 1e-12 * max(1.0, float(np.abs(mesh.nodes).max()))
    planes = {
        "bottom": np.abs(cent[:, 2] - lo[2]) <= tol,
        "top": np.abs(cent[:, 2] - hi[2]) <= tol,
        "xmin": np.abs(cent[:, 0] - lo[0]) <= tol,
        "xmax": np.abs(cent[:, 0] - hi[0]) <= tol,
        "ymin": np.abs(cent[:, 1] - lo[1]) <= tol,
        "ymax": np.abs(cent[:, 1] - hi[1]) <= tol,
    }
    if name == "sides":
        mask = ~(planes["bottom"] | planes["top"])
    elif name in planes:
        mask = planes[name]
    else:
        raise MeshError(f"unknown boundary region {name!r}")
    return np.nonzero(mask)[0]


def _resolve_region(mesh, region):
    if isinstance(region, str):
        return boundary_region(mesh, region)
    idx = np.asarray(region, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= mesh.boundary_tris.shape[0]):
        raise MeshError("region indices outside the boundary triangle list")
    return idx


def integrate_volume(mesh, integrand, kind="auto"):
    """Integral over the body, exact for P1 (centroid rule per tet).

    integrand may be per-element constant (length M) or nodal (length N);
    vector-valued fields are integrated componentwise.
    """
    f = np.asarray(integrand, dtype=float)
    n, m = mesh.num_nodes, mesh.num_elements
    if kind == "auto":
        if f.shape[0] == n and f.shape[0] != m:
            kind = "nodal"
        elif f.shape[0] == m and f.shape[0] != n:
            kind = "element"
        elif f.shape[0] == n:
            raise MeshError("ambiguous integrand length; pass kind explicitly")
        else:
            raise MeshError("integrand does not match mesh size")
    if kind == "nodal":
        if f.shape[0] != n:
            raise MeshError("nodal integrand has wrong length")
        centroid_vals = f[mesh.tets].mean(axis=1)
    elif kind == "element":
        if f.shape[0] != m:
            raise MeshError("element integrand has wrong length")
        centroid_vals = f
    else:
        raise ValueError(f"unknown kind {kind!r}")
    if centroid_vals.ndim == 1:
        return float(np.dot(mesh.element_volumes, centroid_vals))
    return np.tensordot(mesh.element_volumes, centroid_vals, axes=(0, 0))


def integrate_surface(mesh, integrand, region="all"):
    """Surface integral of a nodal field by the triangle centroid rule."""
    idx = _resolve_region(mesh, region)
    f = np.asarray(integrand, dtype=float)
    if f.shape[0] != mesh.num_nodes:
        raise MeshError("surface integrand must be nodal")
    tris = mesh.boundary_tris[idx]
    areas = np.linalg.norm(mesh.boundary_area_vectors[idx], axis=1)
    centroid_vals = f[tris].mean(axis=1)
    if centroid_vals.ndim == 1:
        return float(np.dot(areas, centroid_vals))
    return np.tensordot(areas, centroid_vals, axes=(0, 0))


def volume_mass_matrix(mesh):
    """Consistent P1 mass matrix, exact for products of P1 fields."""
    key = "vol_mass"
    if key not in mesh._cache:
        n = mesh.num_nodes
        mm = np.zeros((n, n))
        base = (np.ones((4, 4)) + np.eye(4)) / 20.0
        for tet, vol in zip(mesh.tets, mesh.element_volumes):
            mm[np.ix_(tet, tet)] += vol * base
        mesh._cache[key] = mm
    return mesh._cache[key]


def surface_mass_matrix(mesh, region="all"):
    """Consistent P1 surface mass matrix over a boundary region."""
    idx = _resolve_region(mesh, region)
    key = ("surf_mass", tuple(idx.tolist()))
    if key not in mesh._cache:
        n = mesh.num_nodes
        mm = np.zeros((n, n))
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        areas = np.linalg.norm(mesh.boundary_area_vectors[idx], axis=1)
        for tri, area in zip(mesh.boundary_tris[idx], areas):
            mm[np.ix_(tri, tri)] += area * base
        mesh._cache[key] = mm
    return mesh._cache[key]


def l2_norm(mesh, u):
    """L2 norm of a nodal field (exact for P1)."""
    u = np.asarray(u, dtype=float)
    mm = volume_mass_matrix(mesh)
    if u.ndim == 1:
        return float(np.sqrt(u @ mm @ u))
    return float(np.sqrt(sum(u[:, k] @ mm @ u[:, k] for k in range(u.shape[1]))))


def h1_norm(mesh, u):
    """Full H1 norm (L2 plus gradient seminorm) of a nodal field."""
    u = np.asarray(u, dtype=float)
    grads = mesh.element_gradients(u)
    semi2 = float(np.sum(mesh.element_volumes * (grads.reshape(grads.shape[0], -1) ** 2).sum(axis=1)))
    return float(np.sqrt(l2_norm(mesh, u) ** 2 + semi2))


def read_mesh_file(path):
    """Read the text mesh format: `nodes N` then rows, `tets M` then rows."""
    nodes, tets = None, None
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] == "nodes":
            count = int(head[1])
            nodes = np.array([[float(v) for v in lines[i + 1 + r].split()] for r in range(count)])
            i += 1 + count
        elif head[0] == "tets":
            count = int(head[1])
            tets = np.array([[int(v) for v in lines[i + 1 + r].split()] for r in range(count)], dtype=int)
            i += 1 + count
        else:
            raise MeshError(f"unexpected directive {head[0]!r} in mesh file")
    if nodes is None or tets is None:
        raise MeshError("mesh file must define both nodes and tets")
    return _finish_mesh(nodes, tets)


def write_mesh_file(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"nodes {mesh.num_nodes}\n")
        for p in mesh.nodes:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        fh.write(f"tets {mesh.num_elements}\n")
        for t in mesh.tets:
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]}\n")
