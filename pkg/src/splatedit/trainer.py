"""Optimization loop: photometric reconstruction, score distillation and
feature distillation over a lifted scene.

The loop alternates two kinds of steps.  Reference steps render a reference
view and apply the reconstruction and feature-distillation losses; when the
view carries augmentable objects, the render uses a layout-augmented copy of
the scene so Gaussians enclosed by removed objects receive feature
supervision, and pixels whose target no longer matches the augmented layout
are excluded from the photometric term.  Interpolated steps render a camera
between reference poses and apply the score-distillation gradient from the
denoising backend.  Each step ends with one Adam update using per-class
learning rates, scales stepped in log space and opacities through a logit
so both stay in range without clipping gradients.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .editing import AugmentSpec, layout_augment
from .errors import InvalidArgumentError
from .geometry import interpolate_camera, quat_mul, quat_to_rot
from .lifting import LiftConfig, expand_scene, imagined_cameras, \
    init_scene_from_image
from .raster import RenderContext, UpstreamGrads, rasterize
from .scene import Camera, GaussianScene, PARAM_DTYPE, check_image
from .semantics import EmbeddingCodec, Selection, distill_loss

# forward-diffusion convention shared with the denoising backends: the
# surviving signal fraction falls linearly to zero at step 1000
DIFFUSION_T_MIN = 20
DIFFUSION_T_MAX = 980
PSNR_MSE_FLOOR = 1e-10
ALPHA_LOGIT_LIMIT = 15.0


def signal_fraction(t: int) -> float:
    t = int(t)
    if not DIFFUSION_T_MIN <= t <= DIFFUSION_T_MAX:
        raise InvalidArgumentError(
            f"diffusion step must be in [{DIFFUSION_T_MIN}, "
            f"{DIFFUSION_T_MAX}], got {t}")
    return 1.0 - t / 1000.0


def psnr(image: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images."""
    image = np.asarray(image, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise InvalidArgumentError(
            f"psnr shapes differ: {image.shape} vs {target.shape}")
    mse = float(np.mean((image - target) ** 2))
    return 10.0 * math.log10(1.0 / max(mse, PSNR_MSE_FLOOR))


@dataclass(frozen=True)
class TrainConfig:
    """Loss weights, optimizer settings and schedule shape for one run."""

    lambda_recon: float = 1.0
    lambda_sds: float = 0.01
    lambda_distill: float = 1.0
    cfg_scale: float = 5.0
    steps: int = 300
    prompt: str = ""
    lr_position: float = 1.6e-4  # multiplied by the scene extent
    lr_scale: float = 5e-3
    lr_quat: float = 1e-3
    lr_alpha: float = 5e-2
    lr_color: float = 2.5e-3
    lr_embed: float = 1e-2
    yaw_degrees: float = 15.0
    interp_samples: int = 3  # interpolated cameras per imagined view
    codec_dim: int = 16  # clamped to the number of region samples
    augment: AugmentSpec | None = None
    seed: int = 0

    def __post_init__(self):
        lams = (self.lambda_recon, self.lambda_sds, self.lambda_distill)
        for lam in lams:
            if not np.isfinite(lam) or lam < 0:
                raise InvalidArgumentError(
                    "loss weights must be finite and non-negative")
        if not any(lam > 0 for lam in lams):
            raise InvalidArgumentError("at least one loss weight must be > 0")
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 0:
            raise InvalidArgumentError("steps must be a non-negative integer")
        if self.cfg_scale <= 0:
            raise InvalidArgumentError("cfg_scale must be positive")
        for name in ("lr_position", "lr_scale", "lr_quat", "lr_alpha",
                     "lr_color", "lr_embed"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.yaw_degrees <= 0:
            raise InvalidArgumentError("yaw_degrees must be positive")
        if self.interp_samples < 0:
            raise InvalidArgumentError("interp_samples must be >= 0")
        if self.codec_dim < 1:
            raise InvalidArgumentError("codec_dim must be >= 1")


@dataclass
class ReferenceView:
    """One supervised view: target image plus region masks and codes.

    object_ids aligns with masks; an entry >= 0 names the scene object the
    region belongs to (making it augmentable), -1 marks regions with no
    object linkage such as background or views without a registry.
    """

    camera: Camera
    target: np.ndarray
    masks: list = field(default_factory=list)
    codes: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    object_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.target = np.asarray(self.target, dtype=np.float64)
        h, w = self.camera.height, self.camera.width
        if self.target.shape != (h, w, 3):
            raise InvalidArgumentError(
                f"target shape {self.target.shape} does not match "
                f"camera ({h}, {w})")
        self.codes = np.atleast_2d(np.asarray(self.codes, dtype=np.float64))
        if not self.object_ids:
            self.object_ids = [-1] * len(self.masks)
        if len(self.object_ids) != len(self.masks):
            raise InvalidArgumentError("object_ids must align with masks")


@dataclass
class TrainReport:
    """Per-step training record: loss breakdown, PSNR probe and wall time."""

    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_ndjson(self) -> str:
        lines = []
        for rec in self.records:
            lines.append(json.dumps({
                "step": rec["step"], "kind": rec["kind"],
                "view": rec["view"], "losses": rec["losses"],
                "psnr": rec["psnr"], "ms": rec["ms"],
            }))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_ndjson(cls, text: str) -> "TrainReport":
        records = [json.loads(line) for line in text.splitlines() if line]
        return cls(records=records)


def recon_loss(render_rgb, target, keep=None):
    """Sum of squared RGB differences and its pixel gradient.

    keep optionally masks pixels into the loss; excluded pixels contribute
    zero loss and zero gradient.
    """
    render_rgb = np.asarray(render_rgb, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if render_rgb.shape != target.shape:
        raise InvalidArgumentError(
            f"render {render_rgb.shape} vs target {target.shape}")
    diff = render_rgb - target
    if keep is not None:
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != render_rgb.shape[:2]:
            raise InvalidArgumentError("keep mask shape mismatch")
        diff = diff * keep[:, :, None]
    loss = float((diff ** 2).sum())
    return loss, 2.0 * diff


def sds_loss_grad(render_rgb, camera, prompt, priors, *, cfg_scale=5.0,
                  t_sample, rng):
    """Score-distillation pixel gradient w(t) * (predicted - injected noise).

    The render is diffused to t_sample with noise drawn from rng, the
    denoising backend predicts the noise back, and the gap weighted by
    w(t) = 1 - signal_fraction descends the render toward what the backend
    considers a clean image.  There is no scalar loss; the gradient is the
    contract.  Out-of-range render values are clipped before noising and
    the gradient passes through unchanged.
    """
    del camera  # pose conditioning is a backend concern
    x = np.clip(np.asarray(render_rgb, dtype=np.float64), 0.0, 1.0)
    if x.ndim != 3 or x.shape[2] != 3:
        raise InvalidArgumentError("render must be (H, W, 3)")
    ab = signal_fraction(t_sample)
    eps = rng.standard_normal(x.shape)
    noised = math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps
    predicted = priors.denoise(noised, int(t_sample), prompt, cfg_scale)
    return (1.0 - ab) * (np.asarray(predicted, dtype=np.float64) - eps)


class _Adam:
    """Adam with per-row masking: rows whose gradient is exactly zero this
    step keep their parameters and moments bit-identical."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = np.zeros(shape[0], dtype=np.int64)

    def step(self, param: np.ndarray, grad: np.ndarray) -> None:
        g = np.asarray(grad, dtype=np.float64)
        if g.ndim == 1:
            rows = g != 0.0
        else:
            rows = np.any(g != 0.0, axis=tuple(range(1, g.ndim)))
        if not rows.any():
            return
        self.t[rows] += 1
        gr = g[rows]
        self.m[rows] = self.beta1 * self.m[rows] + (1.0 - self.beta1) * gr
        self.v[rows] = self.beta2 * self.v[rows] + (1.0 - self.beta2) * gr * gr
        bc1 = 1.0 - self.beta1 ** self.t[rows]
        bc2 = 1.0 - self.beta2 ** self.t[rows]
        if g.ndim > 1:
            extra = (1,) * (g.ndim - 1)
            bc1 = bc1.reshape(-1, *extra)
            bc2 = bc2.reshape(-1, *extra)
        update = (self.m[rows] / bc1) / (np.sqrt(self.v[rows] / bc2)
                                         + self.eps)
        param[rows] -= self.lr * update


def _quat_left(r: np.ndarray) -> np.ndarray:
    """Matrix L with L @ q == quat_mul(r, q) for (w, x, y, z) quaternions."""
    w, x, y, z = np.asarray(r, dtype=np.float64)
    return np.array([
        [w, -x, -y, -z],
        [x, w, -z, y],
        [y, z, w, -x],
        [z, -y, x, w],
    ])


def pull_back_augmented_grads(aug_log, grads: dict) -> None:
    """Map view-space gradients onto base parameters through the per-object
    augmentation transforms, in place.

    Positions transform by the object rotation plus a mean coupling from the
    rotation pivot, which is the mean of the object's own positions;
    quaternions transform by the left multiplication matrix.  Translations
    have an identity Jacobian and dropped objects render nothing so their
    gradients are already zero.  The f32 renormalization inside the
    augmented copy is a unit-times-unit product and is ignored here.
    """
    for rec in aug_log:
        if rec["rotation"] is None:
            continue
        idx = rec["indices"]
        rot = quat_to_rot(rec["rotation"])
        g = grads["x"][idx]
        mean_g = g.mean(axis=0)
        grads["x"][idx] = g @ rot + (mean_g - mean_g @ rot)
        left = _quat_left(rec["rotation"])
        grads["q"][idx] = grads["q"][idx] @ left


class _MasterParams:
    """Float64 optimization state mirrored into the scene's f32 arrays."""

    def __init__(self, scene: GaussianScene):
        self.x = scene.x.astype(np.float64)
        self.log_scale = np.log(scene.scale.astype(np.float64))
        self.q = scene.q.astype(np.float64)
        a = np.clip(scene.alpha.astype(np.float64), 1e-7, 1.0 - 1e-7)
        self.alpha_logit = np.log(a / (1.0 - a))
        self.sh = scene.sh.astype(np.float64)
        self.embed = scene.embed.astype(np.float64)

    def natural_scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def natural_alpha(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.alpha_logit))

    def write_back(self, scene: GaussianScene) -> None:
        scene.x = self.x.astype(PARAM_DTYPE)
        scene.scale = self.natural_scale().astype(PARAM_DTYPE)
        scene.q = self.q.astype(PARAM_DTYPE)
        scene.alpha = self.natural_alpha().astype(PARAM_DTYPE)
        scene.sh = self.sh.astype(PARAM_DTYPE)
        scene.embed = self.embed.astype(PARAM_DTYPE)
        scene.bump()


class Trainer:
    """Steps a scene against a resolved schedule of reference and
    interpolated views."""

    def __init__(self, scene: GaussianScene, cfg: TrainConfig, priors,
                 references, interpolated):
        self.scene = scene
        self.cfg = cfg
        self.priors = priors
        self.references = list(references)
        self.interpolated = list(interpolated)
        if (cfg.lambda_recon > 0 or cfg.lambda_distill > 0) \
                and not self.references:
            raise InvalidArgumentError(
                "reference views are required when the reconstruction or "
                "distillation weight is positive")
        if cfg.lambda_sds > 0 and not self.interpolated:
            raise InvalidArgumentError(
                "interpolated cameras are required when the score "
                "distillation weight is positive")
        if cfg.lambda_distill > 0:
            for ref in self.references:
                if ref.codes.size and ref.codes.shape[1] != scene.embed_dim:
                    raise InvalidArgumentError(
                        f"code width {ref.codes.shape[1]} does not match "
                        f"scene embedding width {scene.embed_dim}")
        self.augment = cfg.augment if cfg.augment is not None else AugmentSpec(
            p_remove=0.3, translation_range=0.0, rotation_range=0.0,
            rng_seed=cfg.seed)
        self.augmentable_ids = sorted({
            oid for ref in self.references for oid in ref.object_ids
            if oid >= 0})
        active = scene.active_indices()
        if active.size:
            pos = scene.x[active].astype(np.float64)
            extent = float((pos.max(axis=0) - pos.min(axis=0)).max())
        else:
            extent = 0.0
        self.extent = max(extent, 1e-6)
        n = scene.n
        d = scene.embed_dim
        self._opt = {
            "x": _Adam((n, 3), cfg.lr_position * self.extent),
            "scale": _Adam((n, 3), cfg.lr_scale),
            "q": _Adam((n, 4), cfg.lr_quat),
            "alpha": _Adam((n,), cfg.lr_alpha),
            "sh": _Adam((n, scene.sh_coeffs), cfg.lr_color),
            "embed": _Adam((n, d), cfg.lr_embed),
        }
        self.masters = _MasterParams(scene)
        self._both_kinds = bool(self.references) and bool(self.interpolated)

    def _step_kind(self, step_index: int):
        """(kind, index into that kind's view list) for a step."""
        if self._both_kinds:
            kind = "reference" if step_index % 2 == 0 else "sds"
            slot = step_index // 2
        elif self.references:
            kind, slot = "reference", step_index
        else:
            kind, slot = "sds", step_index
        views = self.references if kind == "reference" else self.interpolated
        return kind, slot % len(views)

    def _view_prompt(self, interp_index: int) -> str:
        return f"{self.cfg.prompt}@view{interp_index}"

    def _zero_grads(self) -> dict:
        scene = self.scene
        return {
            "x": np.zeros((scene.n, 3)),
            "scale": np.zeros((scene.n, 3)),
            "q": np.zeros((scene.n, 4)),
            "alpha": np.zeros((scene.n,)),
            "sh": np.zeros((scene.n, scene.sh_coeffs)),
            "embed": np.zeros((scene.n, scene.embed_dim)),
        }

    def compute_grads(self, step_index: int):
        """Accumulated weighted natural-parameter gradients for one step.

        Returns (kind, view index, grads dict, losses dict).  Pure in the
        scene state: calling it twice for the same step gives identical
        results and never mutates parameters.
        """
        cfg = self.cfg
        kind, view_idx = self._step_kind(step_index)
        grads = self._zero_grads()
        losses = {"recon": 0.0, "sds": 0.0, "distill": 0.0}
        if kind == "reference":
            if cfg.lambda_recon == 0 and cfg.lambda_distill == 0:
                return kind, view_idx, grads, losses
            ref = self.references[view_idx]
            render_scene, aug_log = self.scene, []
            dropped, jittered = set(), set()
            if self.augmentable_ids and any(
                    oid >= 0 for oid in ref.object_ids):
                selections = [
                    Selection(indices=self.scene.object_indices(oid),
                              revision=self.scene.revision)
                    for oid in self.augmentable_ids]
                render_scene, aug_log = layout_augment(
                    self.scene, selections, self.augment, step=step_index,
                    with_log=True)
                for oid, rec in zip(self.augmentable_ids, aug_log):
                    if rec["dropped"]:
                        dropped.add(oid)
                    elif rec["rotation"] is not None:
                        jittered.add(oid)
            ctx = RenderContext(render_scene, ref.camera)
            out = ctx.forward()
            if cfg.lambda_recon > 0:
                keep = None
                moved = dropped | jittered
                if moved:
                    excluded = np.zeros(ref.target.shape[:2], dtype=bool)
                    for mask, oid in zip(ref.masks, ref.object_ids):
                        if oid in moved:
                            excluded |= np.asarray(mask, dtype=bool)
                    keep = ~excluded
                loss, g_img = recon_loss(out.rgb, ref.target, keep=keep)
                losses["recon"] = loss
                part = ctx.backward(
                    UpstreamGrads(rgb=cfg.lambda_recon * g_img))
                for name, arr in part.as_dict().items():
                    if name != "embed":
                        grads[name] += arr
            if cfg.lambda_distill > 0 and ref.codes.size:
                loss, g_feat = distill_loss(out.feature, ref.masks, ref.codes)
                losses["distill"] = loss
                part = ctx.backward(
                    UpstreamGrads(feature=cfg.lambda_distill * g_feat))
                grads["embed"] += part.embed
            if aug_log:
                pull_back_augmented_grads(aug_log, grads)
        else:
            if cfg.lambda_sds > 0:
                cam = self.interpolated[view_idx]
                rng = np.random.default_rng([cfg.seed, step_index])
                t_sample = int(rng.integers(DIFFUSION_T_MIN,
                                            DIFFUSION_T_MAX + 1))
                ctx = RenderContext(self.scene, cam)
                out = ctx.forward()
                g_img = sds_loss_grad(
                    out.rgb, cam, self._view_prompt(view_idx), self.priors,
                    cfg_scale=cfg.cfg_scale, t_sample=t_sample, rng=rng)
                losses["sds"] = float(np.mean(g_img ** 2))
                part = ctx.backward(UpstreamGrads(rgb=cfg.lambda_sds * g_img))
                for name, arr in part.as_dict().items():
                    if name != "embed":
                        grads[name] += arr
        return kind, view_idx, grads, losses

    def apply_grads(self, grads: dict) -> None:
        """One Adam update from natural-parameter gradients, then mirror
        the f64 state back into the scene."""
        m = self.masters
        g_log_scale = grads["scale"] * m.natural_scale()
        a = m.natural_alpha()
        g_logit = grads["alpha"] * a * (1.0 - a)
        self._opt["x"].step(m.x, grads["x"])
        self._opt["scale"].step(m.log_scale, g_log_scale)
        self._opt["q"].step(m.q, grads["q"])
        self._opt["alpha"].step(m.alpha_logit, g_logit)
        self._opt["sh"].step(m.sh, grads["sh"])
        self._opt["embed"].step(m.embed, grads["embed"])
        touched = np.any(grads["q"] != 0.0, axis=1)
        if touched.any():
            norms = np.linalg.norm(m.q[touched], axis=1, keepdims=True)
            m.q[touched] /= norms
        m.alpha_logit = np.clip(m.alpha_logit, -ALPHA_LOGIT_LIMIT,
                                ALPHA_LOGIT_LIMIT)
        m.write_back(self.scene)

    def train_step(self, step_index: int) -> dict:
        t0 = time.perf_counter()
        kind, view_idx, grads, losses = self.compute_grads(step_index)
        self.apply_grads(grads)
        value = None
        if self.references:
            probe = self.references[step_index % len(self.references)]
            out = rasterize(self.scene, probe.camera)
            value = psnr(np.clip(out.rgb, 0.0, 1.0), probe.target)
        ms = (time.perf_counter() - t0) * 1000.0
        return {"step": step_index, "kind": kind, "view": view_idx,
                "losses": losses, "psnr": value, "ms": ms}


def evaluate_reference_psnr(scene: GaussianScene, references) -> list:
    """PSNR of the plain scene at every reference view."""
    return [psnr(np.clip(rasterize(scene, ref.camera).rgb, 0.0, 1.0),
                 ref.target) for ref in references]


def _segment_regions(priors, image: np.ndarray):
    """(masks, full embeddings) for one image's segmented regions."""
    masks = priors.segment(image)
    embeddings = [priors.embed_image(image, mask) for mask in masks]
    return masks, embeddings


def _rows_for_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Scene rows lifted from a view mask, honoring the init pixel stride."""
    sub = np.asarray(mask, dtype=bool)[::stride, ::stride]
    return np.nonzero(sub.ravel())[0].astype(np.int64)


def optimize(image, camera: Camera, cfg: TrainConfig, priors, *,
             lift_cfg: LiftConfig | None = None):
    """Full pipeline: depth, lift, expand, fit codec, then train.

    Returns (scene, codec, TrainReport).  Reference views are the input
    camera plus two imagined orbits; their targets are the input image and
    the post-expansion renders.  Regions segmented at the input view are
    registered as scene objects (the largest region is treated as
    background and left out of layout augmentation).
    """
    img = check_image(image)
    lift_cfg = lift_cfg or LiftConfig()
    depth = priors.estimate_depth(img)
    scene = init_scene_from_image(img, depth, camera, lift_cfg, embed_dim=1)
    pivot_depth = float(np.median(depth))
    imagined = imagined_cameras(camera, pivot_depth, cfg.yaw_degrees)
    for cam in imagined:
        expand_scene(scene, cam, priors, lift_cfg)

    view_images = [img] + [
        np.clip(rasterize(scene, cam).rgb, 0.0, 1.0) for cam in imagined]
    view_cameras = [camera] + imagined
    view_masks, view_embeddings = [], []
    samples = []
    for view_img in view_images:
        masks, embeddings = _segment_regions(priors, view_img)
        view_masks.append(masks)
        view_embeddings.append(embeddings)
        samples.extend(embeddings)
    codec_dim = min(cfg.codec_dim, len(samples))
    codec = EmbeddingCodec.fit(np.asarray(samples), codec_dim)
    scene.set_embedding_dim(codec_dim)
    scene.set_codec(codec)

    # input-view regions become scene objects; all but the largest are
    # augmentable during training
    input_ids = []
    areas = [int(np.asarray(m).sum()) for m in view_masks[0]]
    background = int(np.argmax(areas)) if areas else -1
    for i, mask in enumerate(view_masks[0]):
        rows = _rows_for_mask(mask, lift_cfg.pixel_stride)
        oid = scene.register_object(rows, label=f"region{i}")
        input_ids.append(-1 if i == background else oid)

    references = []
    for v, (cam, view_img) in enumerate(zip(view_cameras, view_images)):
        embeddings = view_embeddings[v]
        codes = codec.encode(np.asarray(embeddings)) if embeddings \
            else np.zeros((0, codec_dim))
        references.append(ReferenceView(
            camera=cam, target=view_img, masks=view_masks[v], codes=codes,
            object_ids=input_ids if v == 0 else [-1] * len(view_masks[v])))

    interpolated = []
    fractions = [(k + 1) / (cfg.interp_samples + 1)
                 for k in range(cfg.interp_samples)]
    for cam in imagined:
        for frac in fractions:
            interpolated.append(interpolate_camera(camera, cam, frac))

    trainer = Trainer(scene, cfg, priors, references, interpolated)
    records = [trainer.train_step(step) for step in range(cfg.steps)]
    report = TrainReport(records=records)
    scene.aux["references"] = references
    scene.aux["interpolated"] = interpolated
    return scene, codec, report
