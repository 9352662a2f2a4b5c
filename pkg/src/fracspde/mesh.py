"""Triangulations of a rectangle with an extension band.

The solver operates on a rectangle of interest embedded in a larger
rectangle (the extension band pushes the artificial boundary away from the
region where predictions are made).  Meshes are plain triangle meshes; the
structured builder produces a criss-cross pattern (alternating diagonals)
so that no single diagonal direction is preferred.  Unstructured meshes can
be imported through the same text format.
"""

from __future__ import annotations

import numpy as np

from .sparse_core import SparseSpd, assemble_csc

__all__ = [
    "TriMesh",
    "build_rect_mesh",
    "projector",
    "gradients_p1",
    "save_mesh",
    "load_mesh",
    "read_locations_csv",
    "write_locations_csv",
]


class TriMesh:
    """A triangle mesh with a designated rectangle of interest.

    Parameters
    ----------
    vertices : (n, 2) float array
    triangles : (m, 3) int array, counter-clockwise vertex triples
    interest_rect : (x0, x1, y0, y1)
        The sub-rectangle where observations and predictions live.
    extension_width : float
        Width of the boundary band around the interest rectangle.

    Areas, centroids and the piecewise-constant hat-function gradients are
    computed once and cached; the mesh is immutable after construction.
    """

    __slots__ = (
        "vertices",
        "triangles",
        "interest_rect",
        "extension_width",
        "areas",
        "centroids",
        "grads",
        "_bins",
    )

    def __init__(self, vertices, triangles, interest_rect, extension_width=0.0):
        vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 2:
            raise ValueError("vertices must be an (n, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ValueError("triangles must be an (m, 3) array")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError("triangle vertex index out of range")
        self.vertices = vertices
        self.triangles = triangles
        self.interest_rect = tuple(float(c) for c in interest_rect)
        self.extension_width = float(extension_width)

        p0 = vertices[triangles[:, 0]]
        p1 = vertices[triangles[:, 1]]
        p2 = vertices[triangles[:, 2]]
        e1 = p1 - p0
        e2 = p2 - p0
        twice = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(twice <= 0.0):
            bad = int(np.argmax(twice <= 0.0))
            raise ValueError(
                f"triangle {bad} is degenerate or clockwise (signed area {twice[bad] / 2.0:g})"
            )
        self.areas = 0.5 * twice
        self.centroids = (p0 + p1 + p2) / 3.0

        # Gradients of the three hat functions on each triangle.  With
        # vertices a, b, c the gradient of the hat at a is perpendicular to
        # the opposite edge b->c, scaled by 1/(2 area).
        grads = np.empty((len(triangles), 3, 2))
        inv = 1.0 / twice
        grads[:, 0, 0] = (p1[:, 1] - p2[:, 1]) * inv
        grads[:, 0, 1] = (p2[:, 0] - p1[:, 0]) * inv
        grads[:, 1, 0] = (p2[:, 1] - p0[:, 1]) * inv
        grads[:, 1, 1] = (p0[:, 0] - p2[:, 0]) * inv
        grads[:, 2, 0] = (p0[:, 1] - p1[:, 1]) * inv
        grads[:, 2, 1] = (p1[:, 0] - p0[:, 0]) * inv
        self.grads = grads
        self._bins = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def extended_rect(self):
        """Interest rectangle grown by the extension width on every side."""
        x0, x1, y0, y1 = self.interest_rect
        w = self.extension_width
        return (x0 - w, x1 + w, y0 - w, y1 + w)

    # -- point location ------------------------------------------------

    def _bin_grid(self):
        """Uniform bins over the bounding box, each listing overlapping triangles."""
        if self._bins is not None:
            return self._bins
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        span = np.maximum(hi - lo, 1e-300)
        nb = max(1, int(np.sqrt(self.n_triangles)))
        cells = {}
        corners = self.vertices[self.triangles]  # (m, 3, 2)
        tlo = np.floor((corners.min(axis=1) - lo) / span * nb).astype(np.int64)
        thi = np.floor((corners.max(axis=1) - lo) / span * nb).astype(np.int64)
        np.clip(tlo, 0, nb - 1, out=tlo)
        np.clip(thi, 0, nb - 1, out=thi)
        for t in range(self.n_triangles):
            for bx in range(tlo[t, 0], thi[t, 0] + 1):
                for by in range(tlo[t, 1], thi[t, 1] + 1):
                    cells.setdefault((bx, by), []).append(t)
        self._bins = (lo, span, nb, cells)
        return self._bins

    def locate(self, x, y, tol=1e-10):
        """Return (triangle index, barycentric coords) for a point.

        Raises ValueError when the point lies outside every triangle.
        """
        lo, span, nb, cells = self._bin_grid()
        bx = min(nb - 1, max(0, int((x - lo[0]) / span[0] * nb)))
        by = min(nb - 1, max(0, int((y - lo[1]) / span[1] * nb)))
        best_t = -1
        best_lam = None
        best_viol = np.inf
        for t in cells.get((bx, by), ()):
            ia, ib, ic = self.triangles[t]
            a = self.vertices[ia]
            b = self.vertices[ib]
            c = self.vertices[ic]
            twice = 2.0 * self.areas[t]
            l0 = ((b[0] - x) * (c[1] - y) - (c[0] - x) * (b[1] - y)) / twice
            l1 = ((c[0] - x) * (a[1] - y) - (a[0] - x) * (c[1] - y)) / twice
            l2 = 1.0 - l0 - l1
            viol = -min(l0, l1, l2)
            if viol < best_viol:
                best_viol = viol
                best_t = t
                best_lam = (l0, l1, l2)
        if best_t < 0 or best_viol > tol:
            raise ValueError(f"location ({x:g}, {y:g}) is outside the mesh")
        lam = np.clip(best_lam, 0.0, None)
        return best_t, lam / lam.sum()


def build_rect_mesh(interest_rect, extension_width, target_edge_length):
    """Structured criss-cross triangulation of the extended rectangle.

    The extended rectangle is divided into a grid of cells roughly
    ``target_edge_length`` on a side; each cell is split along alternating
    diagonals (checkerboard pattern) into two counter-clockwise triangles.
    """
    if target_edge_length <= 0.0:
        raise ValueError("target_edge_length must be positive")
    if extension_width < 0.0:
        raise ValueError("extension_width must be non-negative")
    x0, x1, y0, y1 = (float(c) for c in interest_rect)
    if x1 <= x0 or y1 <= y0:
        raise ValueError("interest_rect must have positive width and height")
    ex0, ex1 = x0 - extension_width, x1 + extension_width
    ey0, ey1 = y0 - extension_width, y1 + extension_width

    nx = max(1, int(round((ex1 - ex0) / target_edge_length)))
    ny = max(1, int(round((ey1 - ey0) / target_edge_length)))
    xs = np.linspace(ex0, ex1, nx + 1)
    ys = np.linspace(ey0, ey1, ny + 1)
    xx, yy = np.meshgrid(xs, ys)  # shape (ny+1, nx+1), vertex id = iy*(nx+1)+ix
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    triangles = np.empty((2 * nx * ny, 3), dtype=np.int64)
    t = 0
    for iy in range(ny):
        for ix in range(nx):
            v00 = iy * (nx + 1) + ix
            v10 = v00 + 1
            v01 = v00 + (nx + 1)
            v11 = v01 + 1
            if (ix + iy) % 2 == 0:
                # diagonal v00 -- v11
                triangles[t] = (v00, v10, v11)
                triangles[t + 1] = (v00, v11, v01)
            else:
                # diagonal v10 -- v01
                triangles[t] = (v00, v10, v01)
                triangles[t + 1] = (v10, v11, v01)
            t += 2
    return TriMesh(vertices, triangles, interest_rect, extension_width)


def projector(mesh, locations):
    """Sparse matrix mapping vertex values to values at the given locations.

    Row i holds the barycentric coordinates of location i within its
    containing triangle, so rows sum to one and carry at most three
    nonzeros.  Locations outside the mesh raise ValueError.
    """
    locations = np.asarray(locations, dtype=np.float64)
    if locations.ndim != 2 or locations.shape[1] != 2:
        raise ValueError("locations must be an (m, 2) array")
    m = len(locations)
    rows = np.repeat(np.arange(m, dtype=np.int64), 3)
    cols = np.empty(3 * m, dtype=np.int64)
    vals = np.empty(3 * m)
    for i, (x, y) in enumerate(locations):
        t, lam = mesh.locate(x, y)
        cols[3 * i : 3 * i + 3] = mesh.triangles[t]
        vals[3 * i : 3 * i + 3] = lam
    return assemble_csc(rows, cols, vals, (m, mesh.n_vertices), symmetric=False)


def gradients_p1(mesh, t):
    """Constant gradients of the three hat functions on triangle ``t``."""
    if not 0 <= t < mesh.n_triangles:
        raise ValueError(f"triangle index {t} out of range")
    return mesh.grads[t].copy()


# -- plain-text I/O ----------------------------------------------------

def save_mesh(path, mesh):
    """Write a mesh in the plain-text interchange format.

    Line 1 is ``vertices N`` followed by N ``x y`` lines, then
    ``triangles M`` followed by M 0-based ``i j k`` lines.  Coordinates are
    written with enough digits to round-trip bit-exactly.
    """
    with open(path, "w") as fh:
        fh.write(f"vertices {mesh.n_vertices}\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g}\n")
        fh.write(f"triangles {mesh.n_triangles}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(path, interest_rect=None, extension_width=0.0):
    """Read a mesh written by :func:`save_mesh`.

    ``interest_rect`` defaults to the bounding box of the vertices (an
    imported mesh with no extension band).
    """
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "vertices":
            raise ValueError(f"{path}: expected 'vertices N' header")
        n = int(header[1])
        vertices = np.empty((n, 2))
        for i in range(n):
            parts = fh.readline().split()
            vertices[i] = (float(parts[0]), float(parts[1]))
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "triangles":
            raise ValueError(f"{path}: expected 'triangles M' header")
        m = int(header[1])
        triangles = np.empty((m, 3), dtype=np.int64)
        for i in range(m):
            parts = fh.readline().split()
            triangles[i] = (int(parts[0]), int(parts[1]), int(parts[2]))
    if interest_rect is None:
        lo = vertices.min(axis=0)
        hi = vertices.max(axis=0)
        interest_rect = (lo[0], hi[0], lo[1], hi[1])
        extension_width = 0.0
    return TriMesh(vertices, triangles, interest_rect, extension_width)


def read_locations_csv(path):
    """Read an ``x,y`` CSV (header required) into an (m, 2) array."""
    with open(path) as fh:
        header = [c.strip() for c in fh.readline().split(",")]
        if header[:2] != ["x", "y"]:
            raise ValueError(f"{path}: expected header 'x,y', got {','.join(header)!r}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            rows.append((float(parts[0]), float(parts[1])))
    return np.array(rows, dtype=np.float64).reshape(-1, 2)


def write_locations_csv(path, locations):
    with open(path, "w") as fh:
        fh.write("x,y\n")
        for x, y in np.asarray(locations, dtype=np.float64):
            fh.write(f"{x:.17g},{y:.17g}\n")
