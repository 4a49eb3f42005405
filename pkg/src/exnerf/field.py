"""Expression-conditioned deformable radiance field and its volume renderer.

Per sample point ``x`` on a ray of frame ``i``::

    x' = x + Delta(ctf_encode(x), omega_i)                 deformation
    h  = trunk(encode10(x'), gate(beta_i))                 density + feature
    sigma = softplus(h[0])
    c  = sigmoid(color_head(h[1:], encode4(d), phi_i))

The expression vector is gated per ray: rays whose pixel falls outside the
silhouette see zeros, so their samples cannot depend on it.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import camera as cam
from .diffnet import LatentTable, Mlp, MlpSpec, Tape, Var, _accumulate, value_of
from .encoding import EncodingSpec, ctf_weight, encode, positional_encode
from .errors import InvalidArgumentError
from .prior import gate_expression

DEPTH_EPS = 1e-10


@dataclass
class FieldConfig:
    pos_bands: int = 10
    dir_bands: int = 4
    deform_bands: int = 6
    width: int = 256
    depth: int = 8
    skip_layer: int = 5
    color_width: int = 128
    deform_width: int = 128
    deform_depth: int = 6
    deform_skip: int = 4
    deformation_dim: int = 128
    appearance_dim: int = 8
    expression_dim: int = 50
    coarse_samples: int = 64
    fine_samples: int = 64
    use_prior: bool = True
    density_bias: float = -4.0
    background: tuple = (0.0, 0.0, 0.0)

    def to_json(self):
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        if "background" in obj:
            obj["background"] = tuple(obj["background"])
        return cls(**obj)


@dataclass
class FieldInputs:
    """Conditioning for a single ray."""

    frame: int
    deformation_code: np.ndarray
    appearance_code: np.ndarray
    beta: np.ndarray
    indicator: bool
    alpha: float = 0.0

    def __post_init__(self):
        for name in ("deformation_code", "appearance_code", "beta"):
            if not np.all(np.isfinite(value_of(getattr(self, name)))):
                raise InvalidArgumentError(f"{name} must be finite")
        if self.alpha < 0:
            raise InvalidArgumentError("coarse-to-fine alpha must be non-negative")


@dataclass
class Conditioning:
    """Batched conditioning: code rows plus a per-ray row index.

    ``deformation``/``appearance`` are (K, dim) arrays or tape Vars,
    ``code_index`` (R,) picks each ray's row, ``beta`` is (R, 50) before
    gating and ``indicator`` (R,) the silhouette membership of each ray.
    """

    deformation: object
    appearance: object
    code_index: np.ndarray
    beta: object
    indicator: np.ndarray
    alpha: float = 0.0


@dataclass
class RadianceSample:
    color: np.ndarray
    density: np.ndarray


@dataclass
class RenderOutput:
    color: object            # (R, 3) Var or array
    depth: np.ndarray        # (R,)
    weights: np.ndarray      # (R, S)
    opacity: np.ndarray      # (R,)
    t: np.ndarray = None     # (R, S)

    @property
    def color_value(self):
        return value_of(self.color)


class CanonicalNet:
    """Trunk emitting raw density and a feature vector, plus a view/appearance color head."""

    def __init__(self, config, prefix, rng, dtype):
        pos_dim = EncodingSpec(config.pos_bands).output_dim
        dir_dim = EncodingSpec(config.dir_bands).output_dim
        skip = config.skip_layer if config.skip_layer and config.skip_layer < config.depth else None
        self.trunk = Mlp(MlpSpec(pos_dim + config.expression_dim, config.width, config.depth,
                                 1 + config.width, skip), f"{prefix}.trunk", rng, dtype)
        self.trunk.layers[-1][1].value[0] = config.density_bias
        self.color = Mlp(MlpSpec(config.width + dir_dim + config.appearance_dim, config.color_width,
                                 1, 3, final_activation="sigmoid"), f"{prefix}.color", rng, dtype)

    @property
    def parameters(self):
        return self.trunk.parameters + self.color.parameters

    def forward(self, tape, x_enc, beta_part, dir_part, appearance_part):
        width = self.trunk.spec.output_dim - 1
        out = self.trunk.forward(tape, [(x_enc, None), beta_part])
        sigma = tape.softplus(tape.columns(out, 0, 1))
        feature = tape.columns(out, 1, 1 + width)
        rgb = self.color.forward(tape, [(feature, None), dir_part, appearance_part])
        return sigma, rgb


class FieldModel:
    def __init__(self, config, frames, seed=0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        deform_in = EncodingSpec(config.deform_bands).output_dim + config.deformation_dim
        skip = config.deform_skip if config.deform_skip and config.deform_skip < config.deform_depth else None
        self.deform = Mlp(MlpSpec(deform_in, config.deform_width, config.deform_depth, 3, skip),
                          "deform", rng, dtype, zero_output=True)
        self.coarse = CanonicalNet(config, "coarse", rng, dtype)
        self.fine = CanonicalNet(config, "fine", rng, dtype)
        self.latents = LatentTable(frames, config.deformation_dim, config.appearance_dim, dtype)

    @property
    def parameters(self):
        return (self.coarse.parameters + self.fine.parameters + self.deform.parameters
                + self.latents.parameters)

    def parameter_groups(self):
        return {"coarse": self.coarse.parameters, "fine": self.fine.parameters,
                "deform": self.deform.parameters,
                "deformation_codes": [self.latents.deformation],
                "appearance_codes": [self.latents.appearance]}

    def net(self, which):
        if which not in ("coarse", "fine"):
            raise InvalidArgumentError(f"unknown network {which!r}")
        return self.coarse if which == "coarse" else self.fine

    def state_tensors(self):
        return {p.name: p.value for p in self.parameters}

    def load_state_tensors(self, tensors):
        for p in self.parameters:
            if p.name not in tensors:
                raise InvalidArgumentError(f"checkpoint is missing tensor {p.name!r}")
            src = np.asarray(tensors[p.name])
            if src.shape != p.value.shape:
                raise InvalidArgumentError(
                    f"tensor {p.name!r} has shape {src.shape}, expected {p.value.shape}")
            p.value[...] = src

    def astype(self, dtype):
        """Recast every parameter in place (used for double-precision checks)."""
        self.dtype = np.dtype(dtype)
        for p in self.parameters:
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self

    def ctf_weights(self, alpha):
        return np.array([ctf_weight(l, alpha) for l in range(self.config.deform_bands)])

    def conditioning(self, tape, frames, beta, indicator, alpha=0.0):
        """Conditioning that reads per-frame codes from the latent table."""
        frames = np.asarray(frames, dtype=np.int64)
        rows, code_index = np.unique(frames, return_inverse=True)
        omega, phi = self.latents.lookup(tape, rows)
        return Conditioning(omega, phi, code_index, beta, np.asarray(indicator, dtype=bool), alpha)


def deform(model, tape, x, deformation, point_code_index, alpha):
    """Offsets ``Delta`` for points ``x`` (P, 3); the deformed point is ``x + Delta``."""
    x_enc = positional_encode(np.asarray(x, dtype=model.dtype),
                              EncodingSpec(model.config.deform_bands), model.ctf_weights(alpha))
    return model.deform.forward(tape, [(x_enc, None), (deformation, point_code_index)])


def gated_beta(model, tape, beta, indicator):
    if not model.config.use_prior:
        return beta
    if isinstance(beta, Var):
        return tape.mul(beta, np.asarray(indicator, dtype=beta.value.dtype)[:, None])
    return gate_expression(beta, indicator)


def eval_points(model, tape, which, x, directions, cond, samples_per_ray):
    """Density (P, 1) and color (P, 3) at points ``x`` laid out ray-major."""
    R = len(cond.code_index)
    ray_idx = np.repeat(np.arange(R), samples_per_ray)
    point_code = np.repeat(cond.code_index, samples_per_ray)
    x = np.asarray(x, dtype=model.dtype).reshape(-1, 3)
    delta = deform(model, tape, x, cond.deformation, point_code, cond.alpha)
    x_def = tape.add(x, delta)
    x_enc = encode(tape, x_def, model.config.pos_bands)
    dir_enc = positional_encode(np.asarray(directions, dtype=model.dtype),
                                EncodingSpec(model.config.dir_bands))
    beta = gated_beta(model, tape, _as_dtype(cond.beta, model.dtype), cond.indicator)
    sigma, rgb = model.net(which).forward(tape, x_enc, (beta, ray_idx), (dir_enc, ray_idx),
                                          (cond.appearance, point_code))
    return sigma, rgb


def _as_dtype(x, dtype):
    if isinstance(x, Var):
        return x
    return np.asarray(x, dtype=dtype)


def field_eval(model, x_deformed, direction, appearance, beta_gated, which, tape):
    """Evaluate one canonical network at already-deformed points (no deformation, no gating)."""
    x_deformed = np.atleast_2d(x_deformed)
    n = x_deformed.shape[0] if not isinstance(x_deformed, Var) else x_deformed.value.shape[0]
    idx = np.zeros(n, dtype=np.int64)
    x_enc = encode(tape, x_deformed if isinstance(x_deformed, Var) else
                   np.asarray(x_deformed, dtype=model.dtype), model.config.pos_bands)
    dir_enc = positional_encode(np.atleast_2d(np.asarray(direction, dtype=model.dtype)),
                                EncodingSpec(model.config.dir_bands))
    beta = np.atleast_2d(value_of(beta_gated)).astype(model.dtype)
    app = np.atleast_2d(value_of(appearance)).astype(model.dtype)
    sigma, rgb = model.net(which).forward(tape, x_enc, (beta, idx), (dir_enc, idx), (app, idx))
    return RadianceSample(value_of(rgb), value_of(sigma)[:, 0])


# -- quadrature -------------------------------------------------------------


def intervals(t, t_far):
    t = np.asarray(t)
    last = np.asarray(t_far, dtype=t.dtype).reshape(-1, 1) - t[:, -1:]
    return np.concatenate([np.diff(t, axis=1), last], axis=1)


def composite_values(sigma, rgb, t, t_far, background=(0.0, 0.0, 0.0)):
    """Discrete volume rendering of (R, S) densities and (R, S, 3) colors.

    Returns color (R, 3), weights (R, S), transmittance (R, S) and depth (R,).
    """
    t = np.asarray(t)
    if np.any(np.diff(t, axis=1) < 0):
        raise InvalidArgumentError("samples along a ray must be sorted")
    delta = intervals(t, t_far).astype(sigma.dtype)
    tau = sigma * delta
    alpha = -np.expm1(-tau)
    trans = np.exp(-np.concatenate([np.zeros_like(tau[:, :1]), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    weights = trans * alpha
    acc = weights.sum(axis=1)
    bg = np.asarray(background, dtype=rgb.dtype)
    color = np.einsum("rs,rsc->rc", weights, rgb) + (1.0 - acc)[:, None] * bg
    depth = (weights * t).sum(axis=1) / np.maximum(acc, DEPTH_EPS)
    return color, weights, trans, depth, delta


def composite(tape, sigma, rgb, t, t_far, background=(0.0, 0.0, 0.0)):
    """Tape-tracked quadrature; gradients flow into ``sigma`` (R, S) and ``rgb`` (R, S, 3)."""
    vs, vc = value_of(sigma), value_of(rgb)
    color, weights, trans, depth, delta = composite_values(vs, vc, t, t_far, background)
    bg = np.asarray(background, dtype=vc.dtype)

    def backward(g):
        _accumulate(rgb, weights[..., None] * g[:, None, :])
        if isinstance(sigma, Var) and sigma.requires_grad:
            gc = np.einsum("rc,rsc->rs", g, vc - bg)            # g . (c_j - bg)
            wgc = weights * gc
            # sum_{j > k} w_j g.c~_j
            later = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1] - wgc
            t_next = trans * np.exp(-vs * delta)               # T_{k+1}
            _accumulate(sigma, delta * (t_next * gc - later))
    out = tape.record(color, [sigma, rgb], backward)
    return out, weights, depth


def render_samples(model, tape, which, batch, cond, t):
    """Render rays at fixed sample depths ``t`` (R, S) with one network."""
    R, S = t.shape
    x = cam.positions(batch, t)
    sigma, rgb = eval_points(model, tape, which, x, batch.directions, cond, S)
    sigma = tape.reshape(sigma, (R, S))
    rgb = tape.reshape(rgb, (R, S, 3))
    t_cast = t.astype(model.dtype)
    color, weights, depth = composite(tape, sigma, rgb, t_cast, batch.t_far.astype(model.dtype),
                                      model.config.background)
    return RenderOutput(color, depth, weights, weights.sum(axis=1), t)


def render_rays(model, tape, batch, cond, rng=None, jitter=False, passes=("coarse", "fine")):
    """Hierarchical render: stratified coarse pass, then the fine pass on the sorted union.

    Returns ``{"coarse": RenderOutput, "fine": RenderOutput}``; the fine color
    is the reported pixel value.
    """
    cfg = model.config
    t_coarse = cam.stratified_t(batch.t_near, batch.t_far, cfg.coarse_samples, jitter, rng)
    out = {"coarse": render_samples(model, tape, "coarse", batch, cond, t_coarse)}
    if "fine" in passes:
        t_fine, _ = cam.fine_t(t_coarse, out["coarse"].weights, batch.t_near, batch.t_far,
                               cfg.fine_samples, rng if jitter else None)
        out["fine"] = render_samples(model, tape, "fine", batch, cond, t_fine)
    return out


def render_ray(model, ray, t, inputs, which, tape):
    """Render a single :class:`~exnerf.camera.Ray` at given sample depths."""
    batch = cam._as_batch(ray)
    t = np.atleast_2d(np.asarray(t, dtype=np.float64))
    cond = Conditioning(np.atleast_2d(value_of(inputs.deformation_code)) if not isinstance(
                            inputs.deformation_code, Var) else inputs.deformation_code,
                        np.atleast_2d(value_of(inputs.appearance_code)) if not isinstance(
                            inputs.appearance_code, Var) else inputs.appearance_code,
                        np.zeros(1, dtype=np.int64),
                        np.atleast_2d(value_of(inputs.beta)) if not isinstance(
                            inputs.beta, Var) else inputs.beta,
                        np.array([bool(inputs.indicator)]), inputs.alpha)
    return render_samples(model, tape, which, batch, cond, t)


def render_image(model, camera, deformation_code, appearance_code, beta, indicator_mask,
                 t_near, t_far, chunk=1024, alpha=None):
    """Full-frame render (coarse -> importance -> fine) with no gradient tracking.

    Returns ``(image (H, W, 3), depth (H, W), opacity (H, W))``. Codes are
    single rows; ``indicator_mask`` is the (H, W) silhouette used for gating.
    """
    batch = cam.generate_rays(camera, None, t_near, t_far)
    n = len(batch)
    omega = np.atleast_2d(np.asarray(deformation_code, dtype=model.dtype))
    phi = np.atleast_2d(np.asarray(appearance_code, dtype=model.dtype))
    beta = np.asarray(beta, dtype=model.dtype).reshape(1, -1)
    if beta.shape[1] != model.config.expression_dim:
        raise InvalidArgumentError(
            f"expression vector has {beta.shape[1]} entries, expected {model.config.expression_dim}")
    ind = np.asarray(indicator_mask, dtype=bool).reshape(-1)
    alpha = float(model.config.deform_bands) if alpha is None else alpha
    color = np.zeros((n, 3), dtype=model.dtype)
    depth = np.zeros(n)
    opacity = np.zeros(n)
    start = 0
    while start < n:
        stop = min(start + chunk, n)
        sub = batch.subset(slice(start, stop))
        m = stop - start
        cond = Conditioning(omega, phi, np.zeros(m, dtype=np.int64),
                            np.broadcast_to(beta, (m, beta.shape[1])), ind[start:stop], alpha)
        try:
            out = render_rays(model, Tape(grad=False), sub, cond)["fine"]
        except MemoryError:
            if chunk == 1:
                raise
            chunk = max(1, chunk // 2)
            continue
        color[start:stop] = out.color_value
        depth[start:stop] = out.depth
        opacity[start:stop] = out.opacity
        start = stop
    h, w = camera.height, camera.width
    return color.reshape(h, w, 3), depth.reshape(h, w), opacity.reshape(h, w)
