"""Compositional volume rendering of hand, object and background.

Hand and object rays are sampled independently, warped into their canonical
spaces (inverse LBS for the hand, the inverse similarity for the object), merged
by depth and composited together. The background is sampled beyond the
foreground sphere in inverse depth and closed by an opaque terminal sample.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, replace
from pathlib import Path

import imageio.v3 as iio
import numpy as np
import torch
from torch import nn

from holdfield.autodiff import probe_generator, register_probe
from holdfield.fields import (
    BACKGROUND_RADIUS,
    BackgroundField,
    CanonicalField,
    ConstantBackground,
    FieldArchitecture,
    TrainableField,
)
from holdfield.geometry import (
    DTYPE,
    Camera,
    Ray,
    RayBundle,
    ScaledRigid,
    as_tensor,
    cast_rays,
    inverse_apply,
    pixel_centers,
    sphere_intersect,
)
from holdfield.skeleton import HandState, Skeleton, inverse_lbs_masked, pose_hand

logger = logging.getLogger(__name__)

SAMPLES_PER_RAY = 64
BACKGROUND_SAMPLES = 16
SAMPLER_ROUNDS = 5
DENSE_SAMPLES = 4096
TERMINAL_OPTICAL_DEPTH = 20.0
HAND, OBJECT = 0, 1
SAMPLERS = ("error_bounded", "stratified")
AMODAL_MODES = ("occlusion", "independent")


# ---------------------------------------------------------------------------
# Density
# ---------------------------------------------------------------------------
def laplace_density(d: torch.Tensor, alpha1: torch.Tensor, alpha2: torch.Tensor) -> torch.Tensor:
    """``alpha1`` times the Laplace CDF of ``-d`` with scale ``alpha2``."""
    tail = 0.5 * torch.exp(torch.where(d >= 0, -d, d) / alpha2)
    return alpha1 * torch.where(d >= 0, tail, 1.0 - tail)


class DensityParams(nn.Module):
    """Positive ``alpha1``/``alpha2`` stored as logs; ``alpha1`` defaults to ``1/alpha2``."""

    def __init__(self, alpha2: float = 0.1, alpha1: float | None = None):
        super().__init__()
        alpha1 = 1.0 / alpha2 if alpha1 is None else alpha1
        if alpha1 <= 0 or alpha2 <= 0:
            raise ValueError(f"density parameters must be positive, got {alpha1}, {alpha2}")
        self.log_alpha1 = nn.Parameter(torch.tensor(math.log(alpha1), dtype=DTYPE))
        self.log_alpha2 = nn.Parameter(torch.tensor(math.log(alpha2), dtype=DTYPE))

    @property
    def alpha1(self) -> torch.Tensor:
        return torch.exp(self.log_alpha1)

    @property
    def alpha2(self) -> torch.Tensor:
        return torch.exp(self.log_alpha2)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        return laplace_density(d, self.alpha1, self.alpha2)


def sdf_to_density(d, dp: DensityParams) -> torch.Tensor:
    return dp(as_tensor(d))


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class FrameState:
    """Per-frame poses and codes; ``object`` carries ``{R_o, t_o, s}``."""

    hand: HandState | None
    object: ScaledRigid | None
    z_o: torch.Tensor | None = None
    z_b: torch.Tensor | None = None


@dataclass(eq=False)
class SceneModel:
    skeleton: Skeleton | None
    hand_field: CanonicalField | None
    object_field: CanonicalField | None
    background: BackgroundField | ConstantBackground
    density: DensityParams


@dataclass(frozen=True)
class RenderSettings:
    samples: int = SAMPLES_PER_RAY
    background_samples: int = BACKGROUND_SAMPLES
    sampler: str = "error_bounded"
    amodal: str = "occlusion"
    rounds: int = SAMPLER_ROUNDS
    radius: float = BACKGROUND_RADIUS
    chunk: int = 1024
    keep_samples: bool = False

    def __post_init__(self) -> None:
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.amodal not in AMODAL_MODES:
            raise ValueError(f"amodal must be one of {AMODAL_MODES}, got {self.amodal!r}")
        if self.samples < 2 or self.background_samples < 1:
            raise ValueError("need at least 2 foreground and 1 background sample per ray")


@dataclass(frozen=True, eq=False)
class RaySamples:
    """Merged foreground samples per ray, sorted by depth."""

    t: torch.Tensor
    sigma: torch.Tensor
    color: torch.Tensor
    delta: torch.Tensor
    tag: torch.Tensor
    tau: torch.Tensor


@dataclass(frozen=True, eq=False)
class RenderOutput:
    color: torch.Tensor
    color_fg: torch.Tensor
    mask_fg: torch.Tensor
    mask_hand: torch.Tensor
    mask_object: torch.Tensor
    classes: torch.Tensor
    depth: torch.Tensor
    dropped: int = 0
    samples: RaySamples | None = None

    def __len__(self) -> int:
        return self.color.shape[0]

    def detach(self) -> RenderOutput:
        return RenderOutput(
            *(getattr(self, k).detach() for k in _CHANNELS), dropped=self.dropped
        )


_CHANNELS = ("color", "color_fg", "mask_fg", "mask_hand", "mask_object", "classes", "depth")


def concat_outputs(outputs: list[RenderOutput]) -> RenderOutput:
    return RenderOutput(
        *(torch.cat([getattr(o, k) for o in outputs]) for k in _CHANNELS),
        dropped=sum(o.dropped for o in outputs),
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------
def stratified(near: torch.Tensor, far: torch.Tensor, n: int) -> torch.Tensor:
    """Midpoints of ``n`` equal strata of ``[near, far]`` per ray."""
    u = (torch.arange(n, dtype=DTYPE) + 0.5) / n
    return near[:, None] + u * (far - near)[:, None]


def cell_lengths(t: torch.Tensor, near: torch.Tensor, far: torch.Tensor) -> torch.Tensor:
    """Lengths of the cells around each sample, split at neighbour midpoints."""
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    edges = torch.cat([near[:, None], mids, far[:, None]], dim=-1)
    return edges[:, 1:] - edges[:, :-1]


def _inverse_cdf(bins: torch.Tensor, weights: torch.Tensor, n: int) -> torch.Tensor:
    weights = weights + 1e-12
    pdf = weights / weights.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf, -1)], -1)
    u = ((torch.arange(n, dtype=DTYPE) + 0.5) / n).expand(bins.shape[0], n).contiguous()
    inds = torch.searchsorted(cdf, u, right=True)
    below = torch.clamp(inds - 1, min=0)
    above = torch.clamp(inds, max=cdf.shape[-1] - 1)
    cdf_lo, cdf_hi = cdf.gather(1, below), cdf.gather(1, above)
    bin_lo, bin_hi = bins.gather(1, below), bins.gather(1, above)
    denom = torch.where(cdf_hi - cdf_lo < 1e-12, torch.ones_like(cdf_hi), cdf_hi - cdf_lo)
    return bin_lo + (u - cdf_lo) / denom * (bin_hi - bin_lo)


def _strictly_increasing(t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    ramp = torch.arange(t.shape[-1], dtype=DTYPE) * eps[:, None]
    return torch.cummax(t - ramp, dim=-1).values + ramp


@torch.no_grad()
def sample_ray(
    near,
    far,
    sigma_fn: Callable[[torch.Tensor], torch.Tensor],
    n: int = SAMPLES_PER_RAY,
    *,
    mode: str = "error_bounded",
    rounds: int = SAMPLER_ROUNDS,
) -> torch.Tensor:
    """``n`` strictly increasing depths per ray in ``[near, far]``.

    The error-bounded mode starts from ``n // 2`` stratified depths and spends the
    rest over ``rounds`` rounds, each placing depths by inverse CDF on the
    per-segment bound ``|sigma_{k+1} - sigma_k| * gap_k`` weighted by transmittance.
    Rays where that bound is zero everywhere fall back to plain strata.
    """
    near = as_tensor(near).reshape(-1)
    far = as_tensor(far).reshape(-1)
    if mode == "stratified":
        return stratified(near, far, n)
    if mode not in SAMPLERS:
        raise ValueError(f"unknown sampler {mode!r}")
    n0 = max(2, n // 2)
    t = stratified(near, far, n0)
    extra = n - n0
    plan = [extra // rounds] * rounds
    plan[-1] += extra - sum(plan)
    eps = 1e-9 * (far - near)
    informative = torch.zeros(near.shape[0], dtype=torch.bool)
    for count in plan:
        if count == 0:
            continue
        sigma = sigma_fn(t)
        gap = t[:, 1:] - t[:, :-1]
        bound = (sigma[:, 1:] - sigma[:, :-1]).abs() * gap
        optical = torch.cumsum(sigma[:, :-1] * gap, dim=-1) - sigma[:, :-1] * gap
        weights = bound * torch.exp(-optical)
        informative |= weights.sum(-1) > 1e-12
        fresh = _inverse_cdf(t, weights, count)
        t = _strictly_increasing(torch.sort(torch.cat([t, fresh], -1), dim=-1).values, eps)
    return torch.where(informative[:, None], t, stratified(near, far, n))


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------
def composite(sigma: torch.Tensor, delta: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Weights ``tau_i = T_i (1 - exp(-sigma_i delta_i))`` and the residual transmittance."""
    optical = sigma * delta
    accumulated = torch.cumsum(optical, dim=-1)
    transmittance = torch.exp(-(accumulated - optical))
    tau = transmittance * (1.0 - torch.exp(-optical))
    return tau, torch.exp(-accumulated[..., -1])


def merge_samples(
    t: list[torch.Tensor],
    sigma: list[torch.Tensor],
    color: list[torch.Tensor],
    delta: list[torch.Tensor],
    tags: list[int],
) -> tuple[torch.Tensor, ...]:
    """Concatenate per-entity samples and sort by depth; ties keep entity order."""
    tag = torch.cat([torch.full_like(ti, k, dtype=torch.long) for ti, k in zip(t, tags)], -1)
    t_all = torch.cat(t, -1)
    order = torch.sort(t_all, dim=-1, stable=True).indices
    return (
        t_all.gather(1, order),
        torch.cat(sigma, -1).gather(1, order),
        torch.cat(color, -2).gather(1, order[..., None].expand(-1, -1, 3)),
        torch.cat(delta, -1).gather(1, order),
        tag.gather(1, order),
    )


# ---------------------------------------------------------------------------
# Entities
# ---------------------------------------------------------------------------
@dataclass
class _Entity:
    tag: int
    field: CanonicalField
    warp: Callable[[torch.Tensor], tuple[torch.Tensor, torch.Tensor]]
    latent: torch.Tensor | None


def _entities(model: SceneModel, frame: FrameState) -> list[_Entity]:
    entities = []
    if model.hand_field is not None and frame.hand is not None:
        if model.skeleton is None:
            raise ValueError("hand rendering needs a skeleton")
        sk, hs = model.skeleton, frame.hand
        posed = pose_hand(sk, hs)
        entities.append(
            _Entity(HAND, model.hand_field, lambda p: inverse_lbs_masked(sk, hs, p, posed), None)
        )
    if model.object_field is not None and frame.object is not None:
        transform = frame.object

        def object_warp(p):
            return inverse_apply(transform, p), torch.ones(p.shape[0], dtype=torch.bool)

        entities.append(_Entity(OBJECT, model.object_field, object_warp, frame.z_o))
    return entities


def _entity_eval(entity: _Entity, density: DensityParams, points: torch.Tensor):
    shape = points.shape[:-1]
    x, valid = entity.warp(points.reshape(-1, 3))
    sample = entity.field(x, entity.latent)
    sigma = density(sample.d) * valid
    return sigma.reshape(shape), sample.c.reshape(*shape, 3), valid.reshape(shape)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------
def _background(model: SceneModel, frame: FrameState, bundle: RayBundle, start, settings):
    radius = settings.radius
    far = torch.full_like(start, 10.0 * radius)
    start = torch.clamp(start, min=1e-6)
    u = (torch.arange(settings.background_samples, dtype=DTYPE) + 0.5) / settings.background_samples
    t = 1.0 / ((1.0 / start)[:, None] * (1.0 - u) + (1.0 / far)[:, None] * u)
    t = torch.cat([t, far[:, None]], -1)
    points = bundle.origins[:, None, :] + t[..., None] * bundle.directions[:, None, :]
    views = bundle.directions[:, None, :].expand_as(points)
    out = model.background(points.reshape(-1, 3), views.reshape(-1, 3), frame.z_b)
    sigma = out.sigma.reshape(t.shape)
    color = out.c.reshape(*t.shape, 3)
    delta = cell_lengths(t[:, :-1], start, far)
    sigma = torch.cat([sigma[:, :-1], torch.full_like(start, TERMINAL_OPTICAL_DEPTH)[:, None]], -1)
    delta = torch.cat([delta, torch.ones_like(start)[:, None]], -1)
    tau, _ = composite(sigma, delta)
    return (tau[..., None] * color).sum(1), tau.sum(-1)


def render_rays(
    model: SceneModel, frame: FrameState, bundle: RayBundle, settings: RenderSettings
) -> RenderOutput:
    n_rays = len(bundle)
    t_enter, t_exit, hit = sphere_intersect(bundle.origins, bundle.directions, settings.radius)
    near = torch.where(hit, t_enter, torch.zeros_like(t_enter))
    far = torch.where(hit, t_exit, torch.ones_like(t_exit))
    hit_f = hit.to(DTYPE)[:, None]

    ts, sigmas, colors, deltas, tags = [], [], [], [], []
    dropped = 0
    for entity in _entities(model, frame):

        def sigma_fn(t, entity=entity):
            points = bundle.origins[:, None, :] + t[..., None] * bundle.directions[:, None, :]
            return _entity_eval(entity, model.density, points)[0] * hit_f

        t = sample_ray(
            near, far, sigma_fn, settings.samples, mode=settings.sampler, rounds=settings.rounds
        ).detach()
        points = bundle.origins[:, None, :] + t[..., None] * bundle.directions[:, None, :]
        sigma, color, valid = _entity_eval(entity, model.density, points)
        dropped += int((~valid & hit[:, None]).sum())
        ts.append(t)
        sigmas.append(sigma * hit_f)
        colors.append(color)
        deltas.append(cell_lengths(t, near, far))
        tags.append(entity.tag)
    if dropped:
        logger.info("dropped %d samples with singular skinning blends", dropped)

    zeros = torch.zeros(n_rays, dtype=DTYPE)
    if ts:
        t, sigma, color, delta, tag = merge_samples(ts, sigmas, colors, deltas, tags)
        tau, _ = composite(sigma, delta)
        color_fg = (tau[..., None] * color).sum(1)
        mask_fg = tau.sum(-1)
        is_hand, is_object = (tag == HAND).to(DTYPE), (tag == OBJECT).to(DTYPE)
        hand_occl, object_occl = (tau * is_hand).sum(-1), (tau * is_object).sum(-1)
        if settings.amodal == "independent":
            mask_hand = composite(sigma * is_hand, delta)[0].sum(-1)
            mask_object = composite(sigma * is_object, delta)[0].sum(-1)
        else:
            mask_hand, mask_object = hand_occl, object_occl
        depth = (tau * t).sum(-1) / torch.clamp(mask_fg, min=1e-10)
        samples = RaySamples(t, sigma, color, delta, tag, tau) if settings.keep_samples else None
    else:
        color_fg = torch.zeros(n_rays, 3, dtype=DTYPE)
        mask_fg = mask_hand = mask_object = hand_occl = object_occl = depth = zeros
        samples = None

    color_bg, opacity_bg = _background(model, frame, bundle, t_exit, settings)
    residual = 1.0 - mask_fg
    color_out = color_fg + residual[:, None] * color_bg
    classes = torch.stack([hand_occl, object_occl, residual * opacity_bg], dim=-1)
    return RenderOutput(
        color_out, color_fg, mask_fg, mask_hand, mask_object, classes, depth, dropped, samples
    )


def render_pixel(
    model: SceneModel, frame: FrameState, ray: Ray, settings: RenderSettings = RenderSettings()
) -> RenderOutput:
    return render_rays(model, frame, ray.bundle(), settings)


def render_bundle(
    model: SceneModel, frame: FrameState, bundle: RayBundle, settings: RenderSettings
) -> RenderOutput:
    """``render_rays`` in chunks of ``settings.chunk`` rays."""
    outputs = [
        render_rays(model, frame, bundle.subset(slice(s, s + settings.chunk)), settings)
        for s in range(0, len(bundle), settings.chunk)
    ]
    return concat_outputs(outputs)


def render_image(
    model: SceneModel,
    frame: FrameState,
    camera: Camera,
    settings: RenderSettings = RenderSettings(),
    pixels=None,
) -> RenderOutput:
    """Render ``pixels`` (default: every pixel centre, row-major)."""
    if pixels is None:
        pixels = pixel_centers(camera.width, camera.height)
    return render_bundle(model, frame, cast_rays(camera, pixels), settings)


def render_dense(
    model: SceneModel,
    frame: FrameState,
    camera: Camera,
    samples: int = DENSE_SAMPLES,
    pixels=None,
    settings: RenderSettings = RenderSettings(),
) -> RenderOutput:
    """Uniform dense quadrature; the reference the adaptive sampler is checked against."""
    dense = replace(settings, samples=samples, sampler="stratified", chunk=max(1, 2**17 // samples))
    with torch.no_grad():
        return render_image(model, frame, camera, dense, pixels)


# ---------------------------------------------------------------------------
# Image files
# ---------------------------------------------------------------------------
def to_image(values: torch.Tensor, width: int, height: int) -> np.ndarray:
    arr = values.detach().cpu().numpy()
    return arr.reshape(height, width, *arr.shape[1:])


def write_png(path: Path, rgb: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    iio.imwrite(path, np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8))
    return path


def read_png(path: Path) -> np.ndarray:
    return np.asarray(iio.imread(Path(path)), dtype=np.float64)[..., :3] / 255.0


def write_pfm(path: Path, values: np.ndarray) -> Path:
    """Little-endian PFM, rows stored bottom to top."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype="<f4")
    colour = values.ndim == 3 and values.shape[2] == 3
    height, width = values.shape[:2]
    header = f"{'PF' if colour else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(values[::-1]).tobytes())
    return path


def read_pfm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    lines = data.split(b"\n", 3)
    kind, dims, scale = lines[0], lines[1].split(), float(lines[2])
    width, height = int(dims[0]), int(dims[1])
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (height, width, 3) if kind == b"PF" else (height, width)
    return np.frombuffer(lines[3], dtype=dtype).reshape(shape)[::-1].astype(np.float64)


def write_render(directory: Path, out: RenderOutput, width: int, height: int) -> list[Path]:
    directory = Path(directory)
    written = [write_png(directory / "color.png", to_image(out.color, width, height))]
    for name in ("mask_fg", "mask_hand", "mask_object", "classes", "depth"):
        image = to_image(getattr(out, name), width, height)
        written.append(write_pfm(directory / f"{name}.pfm", image))
    return written


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------
@register_probe("rendering.density_wrt_d_and_alphas")
def _probe_density():
    g = probe_generator("rendering.density_wrt_d_and_alphas")
    d = (torch.rand(6, generator=g, dtype=DTYPE) * 0.4 - 0.2).requires_grad_(True)
    a1 = torch.tensor(8.0, dtype=DTYPE, requires_grad=True)
    a2 = torch.tensor(0.15, dtype=DTYPE, requires_grad=True)
    return laplace_density, (d, a1, a2)


@register_probe("rendering.composite_wrt_sigma")
def _probe_composite():
    g = probe_generator("rendering.composite_wrt_sigma")
    sigma = (2.0 * torch.rand(3, 8, generator=g, dtype=DTYPE)).requires_grad_(True)
    color = torch.rand(3, 8, 3, generator=g, dtype=DTYPE).requires_grad_(True)
    delta = 0.05 + 0.1 * torch.rand(3, 8, generator=g, dtype=DTYPE)

    def fn(sigma, color):
        tau, residual = composite(sigma, delta)
        return torch.cat([(tau[..., None] * color).sum(1).reshape(-1), residual])

    return fn, (sigma, color)


@register_probe("rendering.render_rays_wrt_object_pose_and_density")
def _probe_render():
    g = probe_generator("rendering.render_rays_wrt_object_pose_and_density")
    field = TrainableField(FieldArchitecture(width=8, hidden_layers=1, frequencies=2), seed=7)
    camera = Camera.look_at((0.0, 0.0, -4.0), (0.0, 0.0, 0.0), focal=20.0, width=8, height=8)
    bundle = cast_rays(camera, [[3.5, 4.2], [4.6, 3.9]])
    settings = RenderSettings(samples=12, background_samples=2, sampler="stratified")
    translation = (0.1 * torch.randn(3, generator=g, dtype=DTYPE)).requires_grad_(True)
    log_alpha2 = torch.tensor(math.log(0.3), dtype=DTYPE, requires_grad=True)
    alpha1 = torch.tensor(1.0 / 0.3, dtype=DTYPE)

    def fn(translation, log_alpha2):
        def density(d):
            return laplace_density(d, alpha1, torch.exp(log_alpha2))

        model = SceneModel(None, None, field, ConstantBackground(gradient=0.2), density)
        frame = FrameState(None, ScaledRigid(torch.eye(3, dtype=DTYPE), translation, 1.2))
        rendered = render_rays(model, frame, bundle, settings)
        return torch.cat([rendered.color.reshape(-1), rendered.mask_object])

    return fn, (translation, log_alpha2)
