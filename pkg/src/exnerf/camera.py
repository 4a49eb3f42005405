"""Pinhole cameras, ray generation and sample placement along rays.

Convention: right-handed camera frame looking down -z, +y up, pixel
centres at (col + 0.5, row + 0.5).
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image size must be positive")
        R = self.c2w[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise InvalidArgumentError("camera rotation is not orthonormal")

    @property
    def origin(self):
        return self.c2w[:3, 3].copy()

    def to_json(self):
        return {"width": int(self.width), "height": int(self.height),
                "fx": float(self.fx), "fy": float(self.fy),
                "cx": float(self.cx), "cy": float(self.cy),
                "c2w": [float(v) for v in self.c2w.reshape(-1)]}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(int(obj["width"]), int(obj["height"]), float(obj["fx"]),
                       float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
                       np.asarray(obj["c2w"], dtype=np.float64).reshape(4, 4))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed camera object: {exc}") from exc

    def world_to_camera(self, points):
        R, t = self.c2w[:3, :3], self.c2w[:3, 3]
        return (np.asarray(points, dtype=np.float64) - t) @ R


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, -forward, eye
    return c2w


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    pixel: tuple = (0, 0)
    target_color: np.ndarray = None
    in_silhouette: bool = False


@dataclass
class RayBatch:
    """Structure-of-arrays form of many rays (the form every renderer consumes)."""

    origins: np.ndarray          # (R, 3)
    directions: np.ndarray       # (R, 3)
    t_near: np.ndarray           # (R,)
    t_far: np.ndarray            # (R,)
    frames: np.ndarray = None    # (R,) int
    indicator: np.ndarray = None  # (R,) bool
    targets: np.ndarray = None   # (R, 3)
    pixels: np.ndarray = None    # (R, 2) row, col

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        pick = lambda a: None if a is None else a[idx]
        return RayBatch(self.origins[idx], self.directions[idx], self.t_near[idx],
                        self.t_far[idx], pick(self.frames), pick(self.indicator),
                        pick(self.targets), pick(self.pixels))

    def rays(self):
        for i in range(len(self)):
            yield Ray(self.origins[i], self.directions[i], float(self.t_near[i]),
                      float(self.t_far[i]),
                      None if self.pixels is None else tuple(int(v) for v in self.pixels[i]),
                      None if self.targets is None else self.targets[i],
                      bool(self.indicator[i]) if self.indicator is not None else False)


def all_pixels(camera):
    rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)


def ray_directions(camera, pixels):
    """Unit world-space directions through pixel centres; ``pixels`` is (N, 2) (row, col)."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2 or pixels.shape[1] != 2:
        raise InvalidArgumentError("pixels must be an (N, 2) array of (row, col)")
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows.min(initial=0) < 0 or cols.min(initial=0) < 0
            or rows.max(initial=0) >= camera.height or cols.max(initial=0) >= camera.width):
        raise InvalidArgumentError("pixel outside the image")
    d_cam = np.stack([(cols + 0.5 - camera.cx) / camera.fx,
                      -(rows + 0.5 - camera.cy) / camera.fy,
                      -np.ones(len(pixels))], axis=1)
    d = d_cam @ camera.c2w[:3, :3].T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_rays(camera, pixels=None, t_near=1.0, t_far=2.0):
    """Rays through the given pixels (all pixels, row-major, by default)."""
    if not 0 < t_near < t_far:
        raise InvalidArgumentError(f"need 0 < t_near < t_far, got {t_near}, {t_far}")
    pixels = all_pixels(camera) if pixels is None else np.asarray(pixels, dtype=np.int64)
    dirs = ray_directions(camera, pixels)
    n = len(pixels)
    return RayBatch(np.broadcast_to(camera.origin, (n, 3)).copy(), dirs,
                    np.full(n, float(t_near)), np.full(n, float(t_far)), pixels=pixels)


@dataclass
class SampleSet:
    t: np.ndarray          # (R, S) ascending per row
    positions: np.ndarray  # (R, S, 3)
    uniform_fallback: np.ndarray = None  # (R,) bool, set by importance sampling


def make_rng(seed, *stream):
    """Counter-based generator keyed by (seed, stream...), independent of call order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def stratified_t(t_near, t_far, n, jitter=False, rng=None):
    """One sample per equal-length bin of [t_near, t_far]; midpoints unless jittered."""
    if n < 2:
        raise InvalidArgumentError("need at least 2 samples per ray")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    u = rng.random((len(t_near), n)) if jitter else np.full((len(t_near), n), 0.5)
    frac = (np.arange(n)[None, :] + u) / n
    return t_near[:, None] + (t_far - t_near)[:, None] * frac


def positions(batch, t):
    return batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]


def stratified_samples(ray, n, jitter=False, rng=None):
    """Coarse samples for a single :class:`Ray` or a :class:`RayBatch`."""
    batch = _as_batch(ray)
    t = stratified_t(batch.t_near, batch.t_far, n, jitter, rng)
    return SampleSet(t, positions(batch, t))


def sample_pdf(bin_edges, weights, n, rng=None):
    """Inverse-CDF draws from piecewise-constant densities over bins.

    ``bin_edges`` is (R, B+1), ``weights`` (R, B). Deterministic evenly spaced
    quantiles are used when ``rng`` is None. Rows whose weights are all zero
    fall back to a uniform density and are flagged in the returned mask.
    """
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise InvalidArgumentError("importance weights must be non-negative")
    R, B = weights.shape
    total = weights.sum(axis=1, keepdims=True)
    fallback = total[:, 0] <= 0
    pdf = np.where(fallback[:, None], 1.0 / B, weights / np.where(total > 0, total, 1.0))
    cdf = np.concatenate([np.zeros((R, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (R, n)).copy()
    else:
        u = np.sort(rng.random((R, n)), axis=1)
    # index of the bin containing each quantile
    # one flat search: row r is shifted into [2r, 2r + 1]
    shift = 2.0 * np.arange(R)[:, None]
    flat = np.searchsorted((cdf + shift).reshape(-1), (u + shift).reshape(-1), side="right")
    idx = np.clip(flat.reshape(R, n) - 1 - (B + 1) * np.arange(R)[:, None], 0, B - 1)
    rows = np.arange(R)[:, None]
    c0, c1 = cdf[rows, idx], cdf[rows, idx + 1]
    e0, e1 = bin_edges[rows, idx], bin_edges[rows, idx + 1]
    span = c1 - c0
    frac = np.where(span > 0, (u - c0) / np.where(span > 0, span, 1.0), 0.5)
    return e0 + np.clip(frac, 0.0, 1.0) * (e1 - e0), fallback


def importance_samples(bin_edges, weights, n, rng=None):
    t, fallback = sample_pdf(bin_edges, weights, n, rng)
    return SampleSet(t, None, fallback)


def fine_t(coarse_t, coarse_weights, t_near, t_far, n, rng=None):
    """Sorted union of coarse samples with ``n`` importance samples.

    Bins are delimited by coarse-sample midpoints plus the ray bounds so the
    whole [t_near, t_far] interval stays reachable.
    """
    t_near = np.asarray(t_near, dtype=np.float64)[:, None]
    t_far = np.asarray(t_far, dtype=np.float64)[:, None]
    mids = 0.5 * (coarse_t[:, 1:] + coarse_t[:, :-1])
    edges = np.concatenate([t_near, mids, t_far], axis=1)
    new_t, fallback = sample_pdf(edges, coarse_weights, n, rng)
    return np.sort(np.concatenate([coarse_t, new_t], axis=1), axis=1), fallback


def _as_batch(ray):
    if isinstance(ray, RayBatch):
        return ray
    return RayBatch(np.asarray(ray.origin, dtype=np.float64)[None],
                    np.asarray(ray.direction, dtype=np.float64)[None],
                    np.array([ray.t_near]), np.array([ray.t_far]))
