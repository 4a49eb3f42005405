"""Optimisation loop: photometric loss on both passes, face-region regulariser,
coarse-to-fine schedule, learning-rate decay and checkpoints."""
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import camera as cam
from .diffnet import Adam, Tape, exponential_lr, load_checkpoint, save_checkpoint
from .encoding import CtfSchedule, ctf_alpha
from .errors import InvalidArgumentError, TrainingDivergenceError, UnsupportedFormatError
from .field import FieldConfig, FieldModel, deform, render_rays
from .prior import TriangleMesh, sample_mesh_points

log = logging.getLogger(__name__)

FORMAT_VERSION = "EXNF0001"


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_rays: int = 128
    lr_start: float = 1e-3
    lr_end: float = 5e-4
    ctf_horizon: int = None       # default min(50000, iterations // 2)
    frr_weight: float = 1.0
    frr_samples: int = 1024
    seed: int = 0
    val_stride: int = 8
    val_split_seed: int = None
    resolution: tuple = None      # echoed from the dataset
    checkpoint_every: int = 2000
    log_every: int = 100
    field: FieldConfig = field(default_factory=FieldConfig)

    def __post_init__(self):
        if isinstance(self.field, dict):
            self.field = FieldConfig.from_json(self.field)
        if self.iterations <= 0:
            raise InvalidArgumentError("iterations must be positive")
        if self.frr_weight < 0:
            raise InvalidArgumentError("frr_weight must be non-negative")
        if self.batch_rays < 1:
            raise InvalidArgumentError("batch_rays must be positive")

    @property
    def horizon(self):
        if self.ctf_horizon:
            return int(self.ctf_horizon)
        return max(1, min(50000, self.iterations // 2))

    def schedule(self):
        return CtfSchedule(self.field.deform_bands, self.horizon)

    def to_json(self):
        d = asdict(self)
        d["field"] = self.field.to_json()
        if self.resolution is not None:
            d["resolution"] = list(self.resolution)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        if known.get("resolution") is not None:
            known["resolution"] = tuple(known["resolution"])
        return cls(**known)


def desk_field_config(**overrides):
    """Reduced network/sample sizes that train on one CPU core in under two hours."""
    base = dict(width=128, depth=4, skip_layer=2, color_width=64, deform_width=64,
                deform_depth=4, deform_skip=2, coarse_samples=32, fine_samples=32)
    base.update(overrides)
    return FieldConfig(**base)


class TrainingData:
    """All rays of the training frames, flattened, plus per-frame expression vectors."""

    def __init__(self, dataset, frame_indices=None):
        idx = dataset.train_indices if frame_indices is None else list(frame_indices)
        self.frame_count = len(dataset.frames)
        self.betas = np.stack([f.beta for f in dataset.frames])
        self.t_near, self.t_far = dataset.t_near, dataset.t_far
        self.mesh = dataset.mesh
        self.frames_used = np.asarray(sorted(idx), dtype=np.int64)
        origins, dirs, targets, frames, ind, pix = [], [], [], [], [], []
        for i in self.frames_used:
            f = dataset.frames[i]
            rays = cam.generate_rays(f.camera, None, dataset.t_near, dataset.t_far)
            origins.append(rays.origins)
            dirs.append(rays.directions)
            targets.append(f.image.reshape(-1, 3))
            frames.append(np.full(len(rays), i, dtype=np.int64))
            ind.append(f.mask.reshape(-1))
            pix.append(rays.pixels)
        self.rays = cam.RayBatch(np.concatenate(origins), np.concatenate(dirs),
                                 np.full(sum(map(len, origins)), dataset.t_near),
                                 np.full(sum(map(len, origins)), dataset.t_far),
                                 np.concatenate(frames), np.concatenate(ind),
                                 np.concatenate(targets), np.concatenate(pix))
        lo, hi = self.betas[self.frames_used].min(axis=0), self.betas[self.frames_used].max(axis=0)
        self.beta_bounds = (lo, hi)

    def sample(self, rng, n):
        sel = rng.integers(0, len(self.rays), size=n)
        sel = sel[np.argsort(self.rays.frames[sel], kind="stable")]
        return self.rays.subset(sel)


@dataclass
class TrainState:
    iteration: int
    model: FieldModel
    optimizer: Adam
    config: TrainConfig
    stats: dict = field(default_factory=dict)


def new_state(config, frames):
    model = FieldModel(config.field, frames, seed=config.seed)
    return TrainState(0, model, Adam(model.parameters, lr=config.lr_start), config)


def photometric_loss(tape, predicted, target):
    """Mean squared error over all pixel channels."""
    pv = predicted.value if hasattr(predicted, "value") else np.asarray(predicted)
    if np.shape(pv) != np.shape(target):
        raise InvalidArgumentError(f"prediction {np.shape(pv)} vs target {np.shape(target)}")
    return tape.mse(predicted, target)


def face_region_reg(model, tape, points, deformation_rows, point_rows, alpha, weight):
    """``weight`` times the mean of ||D(x; omega) - x|| over (point, frame) pairs."""
    delta = deform(model, tape, points, deformation_rows, point_rows, alpha)
    return tape.scale(tape.mean_row_norm(delta), weight)


def frr_assignment(frames_in_batch, n):
    """Pair ``n`` mesh samples with the batch's frames round-robin (sorted row ids)."""
    rows = np.unique(frames_in_batch)
    return np.sort(np.arange(n) % len(rows))


def train_step(state, data):
    cfg = state.config
    model = state.model
    it = state.iteration
    rng = cam.make_rng(cfg.seed, it)
    batch = data.sample(rng, cfg.batch_rays)
    alpha = ctf_alpha(it, cfg.schedule())
    tape = Tape()
    cond = model.conditioning(tape, batch.frames, data.betas[batch.frames], batch.indicator, alpha)
    outs = render_rays(model, tape, batch, cond, rng, jitter=True)
    target = batch.targets.astype(model.dtype)
    loss_c = photometric_loss(tape, outs["coarse"].color, target)
    loss_f = photometric_loss(tape, outs["fine"].color, target)
    total = tape.add(loss_c, loss_f)
    frr_value = 0.0
    if cfg.frr_weight > 0 and cfg.frr_samples > 0:
        pts = sample_mesh_points(data.mesh, cfg.frr_samples, rng)
        rows = frr_assignment(batch.frames, cfg.frr_samples)
        frr = face_region_reg(model, tape, pts, cond.deformation, rows, alpha, cfg.frr_weight)
        frr_value = float(frr.value)
        total = tape.add(total, frr)
    parts = {"coarse": float(loss_c.value), "fine": float(loss_f.value), "frr": frr_value}
    if not np.isfinite(total.value):
        raise TrainingDivergenceError(
            f"non-finite loss at iteration {it}",
            {"iteration": it, "frames": np.unique(batch.frames).tolist(), **parts})
    tape.backward(total)
    lr = exponential_lr(it, cfg.iterations, cfg.lr_start, cfg.lr_end)
    try:
        state.optimizer.step(lr)
    except TrainingDivergenceError as exc:
        exc.diagnostics.update({"iteration": it, **parts})
        raise
    state.iteration += 1
    state.stats = {"iteration": it, "photometric": parts["coarse"] + parts["fine"],
                   "photometric_fine": parts["fine"], "frr": frr_value, "lr": lr, "alpha": alpha}
    return state


def checkpoint_header(state, scene=None):
    return {"format": FORMAT_VERSION, "iteration": state.iteration,
            "optimizer_state": True, "adam_step": state.optimizer.step_count,
            "frames": state.model.latents.frames,
            "config": state.config.to_json(),
            "rng": {"seed": state.config.seed, "counter": state.iteration},
            "scene": scene or {}}


def scene_echo(data):
    lo, hi = data.beta_bounds
    return {"mesh": data.mesh.to_json(), "t_near": data.t_near, "t_far": data.t_far,
            "beta_min": lo.tolist(), "beta_max": hi.tolist()}


def checkpoint(state, path, scene=None):
    tensors = dict(state.model.state_tensors())
    tensors.update(state.optimizer.state_tensors())
    save_checkpoint(path, tensors, checkpoint_header(state, scene))


def restore(path):
    """Rebuild a :class:`TrainState` from a checkpoint; returns ``(state, header)``."""
    header, tensors = load_checkpoint(path)
    if header.get("format") != FORMAT_VERSION:
        raise UnsupportedFormatError(f"{path}: unsupported format {header.get('format')!r}")
    config = TrainConfig.from_json(header["config"])
    state = new_state(config, int(header["frames"]))
    state.model.load_state_tensors(tensors)
    if header.get("optimizer_state"):
        state.optimizer.load_state_tensors(tensors, header["adam_step"])
    state.iteration = int(header["iteration"])
    return state, header


def train(dataset, config, out_dir, state=None, progress=None):
    """Run (or resume) training; writes ``model.ckpt`` and ``metrics.jsonl`` to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    data = TrainingData(dataset)
    if config.resolution is None:
        f0 = dataset.frames[0]
        config.resolution = (f0.camera.width, f0.camera.height)
    if state is None:
        state = new_state(config, len(dataset.frames))
    scene = scene_echo(data)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    start = time.time()
    with open(metrics_path, "a") as metrics:
        while state.iteration < config.iterations:
            train_step(state, data)
            it = state.iteration
            if it % config.log_every == 0 or it == config.iterations:
                rec = dict(state.stats, elapsed=round(time.time() - start, 2))
                metrics.write(json.dumps(rec) + "\n")
                metrics.flush()
                log.info("it %d photometric %.5f frr %.5f lr %.2e alpha %.2f",
                         it, rec["photometric"], rec["frr"], rec["lr"], rec["alpha"])
                if progress:
                    progress(rec)
            if it % config.checkpoint_every == 0:
                checkpoint(state, ckpt_path, scene)
    checkpoint(state, ckpt_path, scene)
    return state


def load_model(path):
    """Checkpoint -> (FieldModel, header) for rendering and evaluation."""
    state, header = restore(path)
    return state.model, header


def scene_mesh(header):
    return TriangleMesh.from_json(header["scene"]["mesh"]).validate()
