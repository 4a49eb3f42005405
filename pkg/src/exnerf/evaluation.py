"""Metrics, per-frame code fitting on held-out frames, reanimation and the
background-invariance ablation."""
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camera as cam
from .diffnet import Adam, Parameter, Tape
from .errors import InvalidArgumentError
from .field import Conditioning, render_image, render_samples
from .imageio import write_depth_png, write_rgb_png
from .prior import EXPRESSION_DIM, rasterize_silhouette
from .training import photometric_loss, scene_mesh

log = logging.getLogger(__name__)


def mse_psnr(pred, target):
    """``(MSE, PSNR)`` for unit peak; identical images give PSNR ``inf``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(f"image size mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    return mse, psnr_from_mse(mse)


def psnr_from_mse(mse):
    if mse < 0:
        raise InvalidArgumentError("MSE must be non-negative")
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def checksum(arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class FrameMetric:
    frame: int
    mse: float
    psnr: float
    initial_mse: float = None
    best_step: int = None


@dataclass
class MetricReport:
    entries: list = field(default_factory=list)
    protocol: dict = field(default_factory=dict)

    @property
    def mean_mse(self):
        return float(np.mean([e.mse for e in self.entries])) if self.entries else float("nan")

    @property
    def mean_psnr(self):
        # per-frame PSNR averaged; PSNR of the mean MSE is reported alongside
        return float(np.mean([e.psnr for e in self.entries])) if self.entries else float("nan")

    def to_json(self):
        return {"frames": [asdict(e) for e in self.entries], "mean_mse": self.mean_mse,
                "mean_psnr": self.mean_psnr, "psnr_of_mean_mse": psnr_from_mse(self.mean_mse)
                if self.entries else None, "protocol": self.protocol}


def _frozen_checksum(model, skip=None):
    # everything except the free omega row
    parts = []
    for p in model.parameters:
        if p is model.latents.deformation and skip is not None:
            parts.append(np.delete(p.value, skip, axis=0))
        else:
            parts.append(p.value)
    return checksum(parts)


def validate_frame(model, dataset, frame_index, steps=2000, batch_rays=32, lr=1e-2,
                   eval_every=250, seed=0, init_frame=0):
    """Fit only a deformation code to a held-out frame, every other parameter frozen.

    The free code starts from frame ``init_frame``'s code, the appearance code
    is frame ``init_frame``'s. The full-image MSE is measured at the start,
    every ``eval_every`` steps and at the end; the best iterate is reported,
    so the reported MSE never exceeds the starting one.
    Returns ``(FrameMetric, info)``; ``info`` carries checksums and the fitted code.
    """
    frame = dataset.frames[frame_index]
    if frame.split != "val":
        raise InvalidArgumentError(f"frame {frame_index} is a training frame; "
                                   "validation only runs on held-out frames")
    if steps < 0:
        raise InvalidArgumentError("steps must be non-negative")
    before = _frozen_checksum(model)
    saved_flags = [p.requires_grad for p in model.parameters]
    for p in model.parameters:
        p.requires_grad = False
    omega = Parameter("val.omega", model.latents.deformation.value[init_frame:init_frame + 1].copy())
    phi = model.latents.appearance.value[init_frame:init_frame + 1].copy()
    opt = Adam([omega], lr=lr)
    rays = cam.generate_rays(frame.camera, None, dataset.t_near, dataset.t_far)
    ind = frame.mask.reshape(-1)
    targets = frame.image.reshape(-1, 3)
    alpha = float(model.config.deform_bands)

    def full_mse():
        img, _, _ = render_image(model, frame.camera, omega.value, phi, frame.beta, frame.mask,
                                 dataset.t_near, dataset.t_far, alpha=alpha)
        return mse_psnr(img, frame.image)[0]

    grad_leak = 0.0
    try:
        initial = best = full_mse()
        best_step, best_code = 0, omega.value.copy()
        for step in range(1, steps + 1):
            rng = cam.make_rng(seed, 31337, frame_index, step)
            sel = np.sort(rng.integers(0, len(rays), size=batch_rays))
            sub = rays.subset(sel)
            tape = Tape()
            cond = Conditioning(omega, phi, np.zeros(batch_rays, dtype=np.int64),
                                np.broadcast_to(frame.beta, (batch_rays, EXPRESSION_DIM)),
                                ind[sel], alpha)
            # the coarse pass only places the fine samples, so it runs untracked
            t_coarse = cam.stratified_t(sub.t_near, sub.t_far, model.config.coarse_samples,
                                        True, rng)
            frozen = Conditioning(omega.value, phi, cond.code_index, cond.beta, cond.indicator,
                                  alpha)
            coarse = render_samples(model, Tape(grad=False), "coarse", sub, frozen, t_coarse)
            t_fine, _ = cam.fine_t(t_coarse, coarse.weights, sub.t_near, sub.t_far,
                                   model.config.fine_samples, rng)
            fine = render_samples(model, tape, "fine", sub, cond, t_fine)
            loss = photometric_loss(tape, fine.color, targets[sel].astype(model.dtype))
            tape.backward(loss)
            grad_leak = max(grad_leak, max(float(np.abs(p.grad).max()) for p in model.parameters))
            opt.step()
            if step % eval_every == 0 or step == steps:
                mse = full_mse()
                if mse < best:
                    best, best_step, best_code = mse, step, omega.value.copy()
    finally:
        for p, flag in zip(model.parameters, saved_flags):
            p.requires_grad = flag
    after = _frozen_checksum(model)
    metric = FrameMetric(frame_index, best, psnr_from_mse(best), initial, best_step)
    info = {"checksum_before": before, "checksum_after": after, "omega": best_code[0],
            "frozen_grad_max": grad_leak, "steps": steps}
    return metric, info


def evaluate(model, dataset, frames=None, steps=2000, **kwargs):
    """:func:`validate_frame` over the validation split; returns a :class:`MetricReport`."""
    frames = dataset.val_indices if frames is None else list(frames)
    report = MetricReport(protocol={"steps": steps, "free": ["deformation code"],
                                    "frozen": ["deform", "coarse", "fine", "appearance codes",
                                               "other deformation codes", "expression"],
                                    "init": "frame 0 codes", "selection": "best iterate"})
    sums = set()
    for i in frames:
        metric, info = validate_frame(model, dataset, i, steps=steps, **kwargs)
        report.entries.append(metric)
        sums.update([info["checksum_before"], info["checksum_after"]])
        log.info("frame %d: mse %.3e -> %.3e (psnr %.2f)", i, metric.initial_mse, metric.mse,
                 metric.psnr)
    report.protocol["frozen_checksums_unchanged"] = len(sums) <= 1
    return report


@dataclass
class DriveEntry:
    beta: np.ndarray
    camera: cam.Camera


class DriveSequence:
    """Ordered (expression, camera) pairs used to drive a trained model."""

    def __init__(self, entries):
        self.entries = []
        for e in entries:
            beta = np.asarray(e.beta, dtype=np.float64).reshape(-1)
            if beta.size != EXPRESSION_DIM:
                raise InvalidArgumentError(
                    f"expression vector has {beta.size} entries, expected {EXPRESSION_DIM}")
            if not np.all(np.isfinite(beta)):
                raise InvalidArgumentError("expression vector must be finite")
            self.entries.append(DriveEntry(beta, e.camera))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @classmethod
    def from_json(cls, obj):
        if not isinstance(obj, list):
            raise InvalidArgumentError("drive file must hold a JSON array")
        try:
            return cls([DriveEntry(np.asarray(o["beta"], dtype=np.float64),
                                   cam.Camera.from_json(o["camera"])) for o in obj])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidArgumentError):
                raise
            raise InvalidArgumentError(f"malformed drive entry: {exc}") from exc

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                obj = json.load(fh)
            except ValueError as exc:
                raise InvalidArgumentError(f"{path}: not valid JSON") from exc
        return cls.from_json(obj)

    def to_json(self):
        return [{"beta": e.beta.tolist(), "camera": e.camera.to_json()} for e in self.entries]


def out_of_range(beta, header):
    """Indices of components outside the range seen in training (empty if unknown)."""
    scene = header.get("scene", {})
    if "beta_min" not in scene:
        return []
    lo, hi = np.asarray(scene["beta_min"]), np.asarray(scene["beta_max"])
    return np.flatnonzero((beta < lo) | (beta > hi)).tolist()


def render_driven(model, header, beta, camera, mesh=None):
    """One reanimated frame with frame-0 codes; returns ``(image, depth, mask)``."""
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if beta.size != EXPRESSION_DIM:
        raise InvalidArgumentError(
            f"expression vector has {beta.size} entries, expected {EXPRESSION_DIM}")
    mesh = scene_mesh(header) if mesh is None else mesh
    mask = rasterize_silhouette(mesh, camera).bits
    scene = header["scene"]
    img, depth, _ = render_image(model, camera, model.latents.deformation.value[0],
                                 model.latents.appearance.value[0], beta, mask,
                                 scene["t_near"], scene["t_far"])
    return img, depth, mask


def reanimate(model, header, drive, out_dir):
    """Render every drive entry; writes ``frame_%04d.png`` and ``depth_%04d.png``.

    Returns a report listing the files and any extrapolated expressions.
    """
    os.makedirs(out_dir, exist_ok=True)
    mesh = scene_mesh(header)
    scene = header["scene"]
    report = {"frames": [], "extrapolation": False}
    for i, entry in enumerate(drive):
        img, depth, _ = render_driven(model, header, entry.beta, entry.camera, mesh)
        rgb_path = os.path.join(out_dir, f"frame_{i:04d}.png")
        depth_path = os.path.join(out_dir, f"depth_{i:04d}.png")
        write_rgb_png(rgb_path, img)
        write_depth_png(depth_path, depth, scene["t_near"], scene["t_far"])
        outside = out_of_range(entry.beta, header)
        if outside:
            log.warning("drive entry %d: expression outside the training range in %d "
                        "components", i, len(outside))
            report["extrapolation"] = True
        report["frames"].append({"index": i, "image": rgb_path, "depth": depth_path,
                                 "out_of_range_components": outside})
    return report


def ablate_background(with_prior, without_prior, camera, beta_a, beta_b, out_dir=None):
    """Outside-silhouette change between two expressions for each model.

    ``with_prior`` and ``without_prior`` are ``(model, header)`` pairs. Diff
    images are written to ``out_dir`` when given.
    """
    (m_on, h_on), (m_off, h_off) = with_prior, without_prior
    res_on, res_off = h_on["config"].get("resolution"), h_off["config"].get("resolution")
    if res_on and res_off and list(res_on) != list(res_off):
        raise InvalidArgumentError(f"resolution mismatch: {res_on} vs {res_off}")
    stats = {}
    for name, model, header in (("with_prior", m_on, h_on), ("without_prior", m_off, h_off)):
        img_a, _, mask = render_driven(model, header, beta_a, camera)
        img_b, _, _ = render_driven(model, header, beta_b, camera)
        diff = np.abs(img_a.astype(np.float64) - img_b.astype(np.float64))
        outside = ~mask
        stats[name] = {"outside_mean_abs_diff": float(diff[outside].mean()) if outside.any() else 0.0,
                       "outside_max_abs_diff": float(diff[outside].max()) if outside.any() else 0.0,
                       "inside_mean_abs_diff": float(diff[mask].mean()) if mask.any() else 0.0,
                       "outside_pixels": int(outside.sum())}
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            peak = max(float(diff.max()), 1e-12)
            path = os.path.join(out_dir, f"diff_{name}.png")
            write_rgb_png(path, diff / peak)
            stats[name]["diff_image"] = path
    return stats
