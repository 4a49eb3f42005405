"""Silhouette-based spatial ray prior.

A triangle mesh is rasterised into a binary mask per camera. Rays whose
pixel is inside the mask keep the expression vector; every sample on any
other ray sees an all-zero expression vector.
"""
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

EXPRESSION_DIM = 50
NEAR_CLIP = 1e-4


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3)
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    def validate(self):
        """Check indices and drop zero-area triangles; returns ``self``."""
        if len(self.triangles) == 0:
            raise InvalidArgumentError("mesh has no triangles")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise InvalidArgumentError("triangle references a missing vertex")
        keep = self.areas() > 0
        if not keep.any():
            raise InvalidArgumentError("mesh has only degenerate triangles")
        self.triangles = self.triangles[keep]
        return self

    def areas(self):
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def to_json(self):
        return {"vertices": self.vertices.tolist(), "triangles": self.triangles.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(obj["vertices"], obj["triangles"])


@dataclass
class SilhouetteMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool).reshape(self.height, self.width)


def read_obj(path):
    """Read the ``v`` / ``f`` subset of Wavefront OBJ (triangles only)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if tok[0] == "v":
                verts.append([float(v) for v in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise InvalidArgumentError(f"{path}:{lineno}: only triangles are supported")
                faces.append([int(v.split("/")[0]) - 1 for v in tok[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3)).validate()


def write_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %r %r %r\n" % tuple(float(c) for c in v))
        for f in mesh.triangles:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def _clip_near(tri, near):
    """Sutherland-Hodgman clip of a camera-space triangle against z <= -near."""
    out = []
    for i in range(3):
        p, q = tri[i], tri[(i + 1) % 3]
        p_in, q_in = p[2] <= -near, q[2] <= -near
        if p_in:
            out.append(p)
        if p_in != q_in:
            s = (-near - p[2]) / (q[2] - p[2])
            out.append(p + s * (q - p))
    return out


def project(camera, points_cam):
    """Camera-space points (z < 0) to continuous pixel coordinates (x=col, y=row)."""
    z = -points_cam[..., 2]
    x = camera.cx + camera.fx * points_cam[..., 0] / z
    y = camera.cy - camera.fy * points_cam[..., 1] / z
    return np.stack([x, y], axis=-1)


def edge_function(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(ax, ay, bx, by):
    # with positive edge functions inside (y-down raster) a "top" edge is
    # horizontal and runs toward +x, a "left" edge runs toward -y
    return (ay == by and bx > ax) or (by < ay)


def fill_triangle(bits, v0, v1, v2):
    """Set pixels whose centres lie inside the 2-D triangle (top-left rule on edges)."""
    (ax, ay), (bx, by), (cx, cy) = v0, v1, v2
    area = edge_function(ax, ay, bx, by, cx, cy)
    if area == 0 or not np.isfinite(area):
        return
    if area < 0:
        (bx, by), (cx, cy) = (cx, cy), (bx, by)
    h, w = bits.shape
    xmin = max(int(np.floor(min(ax, bx, cx) - 0.5)), 0)
    xmax = min(int(np.ceil(max(ax, bx, cx) - 0.5)), w - 1)
    ymin = max(int(np.floor(min(ay, by, cy) - 0.5)), 0)
    ymax = min(int(np.ceil(max(ay, by, cy) - 0.5)), h - 1)
    if xmin > xmax or ymin > ymax:
        return
    px = np.arange(xmin, xmax + 1) + 0.5
    py = (np.arange(ymin, ymax + 1) + 0.5)[:, None]
    inside = np.ones((ymax - ymin + 1, xmax - xmin + 1), dtype=bool)
    for (ex, ey), (fx, fy) in (((ax, ay), (bx, by)), ((bx, by), (cx, cy)), ((cx, cy), (ax, ay))):
        e = edge_function(ex, ey, fx, fy, px, py)
        inside &= (e > 0) | ((e == 0) & _is_top_left(ex, ey, fx, fy))
    bits[ymin:ymax + 1, xmin:xmax + 1] |= inside


def rasterize_silhouette(mesh, camera, near=NEAR_CLIP):
    """Binary silhouette of ``mesh`` seen from ``camera`` (pixel-centre coverage)."""
    if len(mesh.triangles) == 0 or len(mesh.vertices) == 0:
        raise InvalidArgumentError("cannot rasterise an empty mesh")
    bits = np.zeros((camera.height, camera.width), dtype=bool)
    cam = camera.world_to_camera(mesh.vertices)
    tris = cam[mesh.triangles]
    for tri in tris:
        if np.all(tri[:, 2] <= -near):
            poly = list(tri)
        elif np.all(tri[:, 2] > -near):
            continue
        else:
            poly = _clip_near(tri, near)
        screen = project(camera, np.asarray(poly))
        for k in range(1, len(screen) - 1):
            fill_triangle(bits, screen[0], screen[k], screen[k + 1])
    return SilhouetteMask(camera.width, camera.height, bits)


def classify_ray(pixel, mask):
    row, col = pixel
    if not (0 <= row < mask.height and 0 <= col < mask.width):
        raise InvalidArgumentError(f"pixel {pixel} outside {mask.width}x{mask.height} mask")
    return bool(mask.bits[row, col])


def classify_rays(pixels, mask):
    pixels = np.asarray(pixels)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows.min(initial=0) < 0 or cols.min(initial=0) < 0
            or rows.max(initial=0) >= mask.height or cols.max(initial=0) >= mask.width):
        raise InvalidArgumentError("pixel outside the mask")
    return mask.bits[rows, cols]


def gate_expression(beta, indicator):
    """``indicator * beta``: the expression vector, or zeros for rays off the silhouette.

    Accepts one vector with a scalar indicator or an (N, D) batch with an (N,)
    indicator.
    """
    beta = np.asarray(beta)
    if not np.all(np.isfinite(beta)):
        raise InvalidArgumentError("expression vector must be finite")
    ind = np.asarray(indicator, dtype=bool)
    if beta.ndim == 1:
        return beta.copy() if ind.item() else np.zeros_like(beta)
    return np.where(ind[:, None], beta, np.zeros_like(beta))


def sample_mesh_points(mesh, n, rng):
    """Area-weighted uniform samples on the mesh surface, shape (n, 3)."""
    if n < 1:
        raise InvalidArgumentError("need at least one sample")
    areas = mesh.areas()
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u, v = rng.random(n), rng.random(n)
    su = np.sqrt(u)
    b0, b1 = 1.0 - su, su * (1.0 - v)
    b2 = su * v
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    return b0[:, None] * a + b1[:, None] * b + b2[:, None] * c


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    """Geodesic sphere with vertices on the given radius."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9),
             (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2),
             (3, 2, 6), (3, 6, 8), (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10),
             (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache, new_faces = {}, []

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(v, np.array(faces))


def enclosing_sphere_mesh(radius, center=(0.0, 0.0, 0.0), subdivisions=2):
    """Icosphere whose every face lies at least ``radius`` from ``center``."""
    unit = icosphere(1.0, subdivisions)
    a, b, c = (unit.vertices[unit.triangles[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    inradius = np.min(np.abs(np.sum(n * a, axis=1)))
    return icosphere(radius / inradius, subdivisions, center)
