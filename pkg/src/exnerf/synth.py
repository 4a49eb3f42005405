"""Analytic ground-truth scene: an expression-controlled head over a textured backdrop.

The head is a soft sphere whose "mouth" cap changes radius and color with
the first few expression components. Behind it sits an opaque half-space
with a soft checker texture that shifts slightly in every frame, so the
per-frame deformation has something to explain. Everything is rendered
with the same quadrature the learned field uses.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camera as cam
from .errors import InvalidArgumentError
from .field import composite_values
from .imageio import write_mask_png, write_rgb_png
from .prior import enclosing_sphere_mesh, rasterize_silhouette, write_obj

log = logging.getLogger(__name__)


def _default_geometry_gain():
    g = np.zeros(50)
    g[:2] = [0.035, -0.025]
    return g.tolist()


def _default_color_gain():
    M = np.zeros((3, 50))
    M[:, 0] = [-0.10, -0.20, -0.15]
    M[:, 2] = [0.25, -0.05, -0.05]
    M[:, 3] = [-0.05, 0.05, 0.25]
    return M.tolist()


@dataclass
class SceneConfig:
    head_center: tuple = (0.0, 0.0, 0.0)
    head_radius: float = 0.3
    head_color: tuple = (0.85, 0.62, 0.5)
    mouth_direction: tuple = (0.0, -0.35, 1.0)
    mouth_angle_deg: float = 40.0
    geometry_gain: list = field(default_factory=_default_geometry_gain)
    color_gain: list = field(default_factory=_default_color_gain)
    color_clamp: float = 0.3
    density_scale: float = 200.0     # k
    shell_width: float = 0.01        # epsilon of the soft surface
    plane_z: float = -0.8
    plane_density: float = 200.0
    checker_period: float = 1.0
    checker_colors: tuple = ((0.25, 0.35, 0.55), (0.55, 0.6, 0.4))
    checker_sharpness: float = 1.5
    jitter_amplitude: float = 0.03
    orbit_radius: float = 2.2
    orbit_elevation_deg: float = 8.0
    orbit_azimuth_deg: tuple = (-30.0, 30.0)
    frames: int = 60
    width: int = 64
    height: int = 64
    fov_deg: float = 30.0
    t_near: float = 1.4
    t_far: float = 4.6
    beta_range: float = 1.0
    signal_components: int = 4
    mesh_margin: float = 0.05
    val_stride: int = 8
    samples_per_ray: int = 512
    seed: int = 0

    def to_json(self):
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        for key in ("head_center", "head_color", "mouth_direction", "orbit_azimuth_deg"):
            if key in obj:
                obj[key] = tuple(obj[key])
        if "checker_colors" in obj:
            obj["checker_colors"] = tuple(tuple(c) for c in obj["checker_colors"])
        return cls(**obj)

    @property
    def max_head_radius(self):
        g = np.abs(np.asarray(self.geometry_gain))
        return self.head_radius + self.beta_range * g.sum()


def frame_jitter(config, frame):
    """In-plane texture offset of the backdrop for ``frame`` (zero for frame None)."""
    if frame is None:
        return np.zeros(2)
    rng = cam.make_rng(config.seed, 7919, int(frame))
    return config.jitter_amplitude * rng.uniform(-1.0, 1.0, size=2)


def _mouth_window(config, unit):
    axis = np.asarray(config.mouth_direction, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    cos_edge = np.cos(np.radians(config.mouth_angle_deg))
    c = unit @ axis
    s = np.clip((c - cos_edge) / (1.0 - cos_edge), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)     # 0 outside the cap, 1 at its centre


def head_radius(config, unit, beta):
    w = _mouth_window(config, unit)
    return config.head_radius + w * float(np.asarray(config.geometry_gain) @ beta)


def _checker(config, xy):
    u = 2.0 * np.pi * xy / config.checker_period
    s = np.clip(config.checker_sharpness * np.sin(u[..., 0]) * np.sin(u[..., 1]), -1.0, 1.0)
    c0, c1 = (np.asarray(c, dtype=np.float64) for c in config.checker_colors)
    return 0.5 * (c0 + c1) + 0.5 * s[..., None] * (c1 - c0)


def analytic_scene_eval(config, x, d, beta, frame=None):
    """Density (N,) and color (N, 3) of the ground-truth scene at points ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    beta = np.array(beta, dtype=np.float64)
    beta[config.signal_components:] = 0.0   # nuisance dimensions carry no signal
    rel = x - np.asarray(config.head_center)
    dist = np.linalg.norm(rel, axis=1)
    unit = rel / np.maximum(dist, 1e-12)[:, None]
    r = head_radius(config, unit, beta)
    head_sigma = config.density_scale / (1.0 + np.exp(-(r - dist) / config.shell_width))
    w = _mouth_window(config, unit)
    light = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
    shade = 0.65 + 0.35 * np.clip(unit @ light, 0.0, 1.0)
    mod = np.clip(np.asarray(config.color_gain) @ beta, -config.color_clamp, config.color_clamp)
    head_rgb = np.clip(shade[:, None] * np.asarray(config.head_color) + w[:, None] * mod, 0.0, 1.0)

    behind = x[:, 2] <= config.plane_z
    plane_sigma = np.where(behind, config.plane_density, 0.0)
    plane_rgb = _checker(config, x[:, :2] + frame_jitter(config, frame))

    sigma = head_sigma + plane_sigma
    frac = np.where(sigma > 0, head_sigma / np.where(sigma > 0, sigma, 1.0), 0.0)
    rgb = frac[:, None] * head_rgb + (1.0 - frac[:, None]) * plane_rgb
    # negligible tail of the soft head far away from it
    sigma = np.where(head_sigma + plane_sigma < 1e-6, 0.0, sigma)
    return sigma, rgb


def orbit_camera(config, azimuth_deg, elevation_deg=None):
    elev = np.radians(config.orbit_elevation_deg if elevation_deg is None else elevation_deg)
    az = np.radians(azimuth_deg)
    center = np.asarray(config.head_center, dtype=np.float64)
    eye = center + config.orbit_radius * np.array(
        [np.sin(az) * np.cos(elev), np.sin(elev), np.cos(az) * np.cos(elev)])
    f = 0.5 * config.width / np.tan(np.radians(config.fov_deg) / 2.0)
    return cam.Camera(config.width, config.height, f, f, config.width / 2.0, config.height / 2.0,
                      cam.look_at(eye, center))


def frame_cameras(config):
    az = np.linspace(config.orbit_azimuth_deg[0], config.orbit_azimuth_deg[1], config.frames)
    return [orbit_camera(config, a) for a in az]


def frame_betas(config):
    rng = cam.make_rng(config.seed, 104729)
    return rng.uniform(-config.beta_range, config.beta_range, size=(config.frames, 50))


def oracle_render(config, camera, beta, frame=None, samples_per_ray=None, chunk=2048):
    """Ground-truth image (H, W, 3) in [0, 1] via uniform-midpoint quadrature."""
    n = samples_per_ray or config.samples_per_ray
    batch = cam.generate_rays(camera, None, config.t_near, config.t_far)
    out = np.zeros((len(batch), 3))
    for start in range(0, len(batch), chunk):
        sub = batch.subset(slice(start, start + chunk))
        t = cam.stratified_t(sub.t_near, sub.t_far, n)
        x = cam.positions(sub, t).reshape(-1, 3)
        d = np.repeat(sub.directions, n, axis=0)
        sigma, rgb = analytic_scene_eval(config, x, d, beta, frame)
        color, *_ = composite_values(sigma.reshape(-1, n), rgb.reshape(-1, n, 3), t, sub.t_far)
        out[start:start + chunk] = color
    return out.reshape(camera.height, camera.width, 3)


def proxy_mesh(config):
    """Icosphere enclosing the head for every in-range expression, with margin."""
    radius = config.max_head_radius + config.mesh_margin * config.head_radius
    return enclosing_sphere_mesh(radius, config.head_center, subdivisions=2)


def split_labels(frames, stride=8, seed=None):
    """'train'/'val' per frame. Every ``stride``-th frame (index % stride == stride-1)
    is held out, which keeps frame 0 in training; a seed switches to a random split
    of the same size."""
    labels = np.array(["train"] * frames, dtype=object)
    n_val = frames // stride
    if seed is None:
        labels[stride - 1::stride] = "val"
    else:
        rng = cam.make_rng(seed, 1299709)
        labels[1 + rng.permutation(frames - 1)[:n_val]] = "val"
    return labels.tolist()


def generate_dataset(config, out_dir):
    """Render every frame and write images, masks, mesh and ``meta.json``."""
    if config.frames < 1:
        raise InvalidArgumentError("need at least one frame")
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    cams = frame_cameras(config)
    betas = frame_betas(config)
    mesh = proxy_mesh(config)
    labels = split_labels(config.frames, config.val_stride)
    frames = []
    for i, camera in enumerate(cams):
        img = oracle_render(config, camera, betas[i], i)
        mask = rasterize_silhouette(mesh, camera)
        img_name = f"images/frame_{i:04d}.png"
        mask_name = f"masks/frame_{i:04d}.png"
        write_rgb_png(os.path.join(out_dir, img_name), img)
        write_mask_png(os.path.join(out_dir, mask_name), mask.bits)
        frames.append({"index": i, "image": img_name, "mask": mask_name,
                       "camera": camera.to_json(), "beta": betas[i].tolist(), "split": labels[i]})
        log.info("rendered frame %d/%d", i + 1, config.frames)
    write_obj(mesh, os.path.join(out_dir, "mesh.obj"))
    meta = {"frames": frames, "t_near": config.t_near, "t_far": config.t_far,
            "mesh": "mesh.obj", "scene": config.to_json()}
    path = os.path.join(out_dir, "meta.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=1)
    return load_dataset(out_dir)


@dataclass
class Frame:
    index: int
    image: np.ndarray   # (H, W, 3) float in [0, 1]
    mask: np.ndarray    # (H, W) bool
    camera: cam.Camera
    beta: np.ndarray
    split: str


@dataclass
class OracleDataset:
    root: str
    frames: list
    mesh: object
    t_near: float
    t_far: float
    scene: SceneConfig

    @property
    def train_indices(self):
        return [f.index for f in self.frames if f.split == "train"]

    @property
    def val_indices(self):
        return [f.index for f in self.frames if f.split == "val"]


def load_dataset(root):
    from .imageio import read_mask_png, read_rgb_png
    from .prior import read_obj
    path = os.path.join(root, "meta.json")
    try:
        with open(path) as fh:
            meta = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc}") from exc
    frames = []
    for entry in meta["frames"]:
        frames.append(Frame(int(entry["index"]), read_rgb_png(os.path.join(root, entry["image"])),
                            read_mask_png(os.path.join(root, entry["mask"])),
                            cam.Camera.from_json(entry["camera"]),
                            np.asarray(entry["beta"], dtype=np.float64), entry["split"]))
    return OracleDataset(root, frames, read_obj(os.path.join(root, meta["mesh"])),
                         float(meta["t_near"]), float(meta["t_far"]),
                         SceneConfig.from_json(meta["scene"]))
