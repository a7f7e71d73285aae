"""Canonical signed-distance and colour fields.

Analytic primitives stand in for ground truth and test oracles; ``TrainableField``
is the small MLP used for the hand and object; ``BackgroundField`` models
everything outside the foreground sphere through an inverted-sphere input.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from torch import nn

from holdfield.autodiff import probe_generator, register_probe
from holdfield.errors import InsideForeground
from holdfield.geometry import DTYPE, as_tensor

LATENT_DIM = 32
BACKGROUND_RADIUS = 3.0
CANONICAL_BOUND = 2.0
CHECKPOINT_MAGIC = b"HOLDF001"


@dataclass(frozen=True, eq=False)
class FieldSample:
    d: torch.Tensor
    c: torch.Tensor


class CanonicalField(Protocol):
    def sdf(self, x: torch.Tensor) -> torch.Tensor: ...

    def __call__(self, x: torch.Tensor, z: torch.Tensor | None = None) -> FieldSample: ...


# ---------------------------------------------------------------------------
# Analytic shapes
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Sphere:
    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        return torch.linalg.vector_norm(p - as_tensor(self.center), dim=-1) - self.radius


@dataclass(frozen=True)
class Box:
    half_extents: tuple[float, float, float] = (1.0, 1.0, 1.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        q = (p - as_tensor(self.center)).abs() - as_tensor(self.half_extents)
        outside = torch.linalg.vector_norm(torch.clamp(q, min=0.0), dim=-1)
        inside = torch.clamp(q.max(dim=-1).values, max=0.0)
        return outside + inside


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        a, b = as_tensor(self.a), as_tensor(self.b)
        ab = b - a
        denom = torch.clamp((ab * ab).sum(), min=1e-18)
        h = torch.clamp(((p - a) * ab).sum(-1) / denom, 0.0, 1.0)
        closest = a + h[..., None] * ab
        return torch.linalg.vector_norm(p - closest, dim=-1) - self.radius


@dataclass(frozen=True)
class Union:
    parts: tuple

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        return torch.stack([s.sdf(p) for s in self.parts], dim=-1).min(dim=-1).values


@dataclass(frozen=True)
class Empty:
    """No surface anywhere; distance is a large constant."""

    distance: float = 1e3

    def sdf(self, p: torch.Tensor) -> torch.Tensor:
        return torch.full(p.shape[:-1], self.distance, dtype=DTYPE)


Shape = Sphere | Box | Capsule | Union | Empty

_SHAPE_TYPES = {"sphere": Sphere, "box": Box, "capsule": Capsule, "union": Union, "empty": Empty}


def analytic_sdf(shape: Shape, p) -> torch.Tensor:
    return shape.sdf(as_tensor(p))


def shape_to_dict(shape: Shape) -> dict:
    kind = next(k for k, v in _SHAPE_TYPES.items() if isinstance(shape, v))
    if isinstance(shape, Union):
        return {"type": kind, "parts": [shape_to_dict(s) for s in shape.parts]}
    fields = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(shape).items()}
    return {"type": kind, **fields}


def shape_from_dict(raw: dict) -> Shape:
    kind = raw.get("type")
    if kind not in _SHAPE_TYPES:
        raise ValueError(f"unknown shape type: {kind!r}")
    if kind == "union":
        return Union(tuple(shape_from_dict(p) for p in raw["parts"]))
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items() if k != "type"}
    return _SHAPE_TYPES[kind](**kwargs)


class AnalyticField:
    """Analytic shape with a base colour and an optional sinusoidal texture."""

    def __init__(self, shape: Shape, color=(0.7, 0.7, 0.7), texture: float = 0.0):
        self.shape = shape
        self.color = as_tensor(color)
        self.texture = texture

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.shape.sdf(x)

    def colour(self, x: torch.Tensor) -> torch.Tensor:
        c = self.color.expand(*x.shape[:-1], 3)
        if self.texture:
            phase = torch.tensor([0.0, 2.1, 4.2], dtype=DTYPE)
            c = c + self.texture * torch.sin(6.0 * x + phase)
        return torch.clamp(c, 0.0, 1.0)

    def __call__(self, x: torch.Tensor, z: torch.Tensor | None = None) -> FieldSample:
        return FieldSample(self.sdf(x), self.colour(x))


# ---------------------------------------------------------------------------
# Trainable fields
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FieldArchitecture:
    hidden_layers: int = 4
    width: int = 64
    frequencies: int = 6
    latent_dim: int = 0
    sphere_radius: float = 0.5
    softplus_beta: float = 100.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> FieldArchitecture:
        return cls(**raw)


class PositionalEncoding(nn.Module):
    """Raw input followed by sin/cos at octave frequencies."""

    def __init__(self, in_dim: int, frequencies: int):
        super().__init__()
        self.in_dim = in_dim
        self.register_buffer("bands", 2.0 ** torch.arange(frequencies, dtype=DTYPE))

    @property
    def out_dim(self) -> int:
        return self.in_dim * (1 + 2 * self.bands.numel())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        scaled = (x[..., None, :] * self.bands[:, None]).flatten(-2)
        return torch.cat([x, torch.sin(scaled), torch.cos(scaled)], dim=-1)


def _broadcast_latent(z: torch.Tensor | None, x: torch.Tensor, dim: int) -> torch.Tensor:
    if dim == 0:
        return x.new_zeros(*x.shape[:-1], 0)
    if z is None:
        return x.new_zeros(*x.shape[:-1], dim)
    z = as_tensor(z)
    if z.shape[-1] != dim:
        raise ValueError(f"latent code must have length {dim}, got {z.shape[-1]}")
    return z.expand(*x.shape[:-1], dim)


class TrainableField(nn.Module):
    """MLP ``x -> (d, c)`` with a sphere prior in the distance head.

    The distance is ``|x| - r + head(h(x))``; the head starts near zero so the
    field is a sphere of radius ``r`` at initialisation. The latent only feeds
    the colour branch, so ``d`` never depends on it.
    """

    def __init__(self, arch: FieldArchitecture = FieldArchitecture(), seed: int = 0):
        super().__init__()
        self.arch = arch
        self.encoding = PositionalEncoding(3, arch.frequencies)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            dims = [self.encoding.out_dim] + [arch.width] * arch.hidden_layers
            self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims[:-1], dims[1:]))
            for index, lin in enumerate(self.layers):
                nn.init.constant_(lin.bias, 0.0)
                nn.init.normal_(lin.weight, 0.0, math.sqrt(2) / math.sqrt(lin.out_features))
                if index == 0:
                    nn.init.constant_(lin.weight[:, 3:], 0.0)
            self.sdf_head = nn.Linear(arch.width, 1)
            nn.init.normal_(self.sdf_head.weight, 0.0, 1e-4)
            nn.init.constant_(self.sdf_head.bias, 0.0)
            self.color_hidden = nn.Linear(arch.width + arch.latent_dim, arch.width)
            self.color_out = nn.Linear(arch.width, 3)
        self.activation = nn.Softplus(beta=arch.softplus_beta)
        self.double()

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoding(x)
        for lin in self.layers:
            h = self.activation(lin(h))
        return h

    def _distance(self, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
        radius = torch.sqrt((x * x).sum(-1) + 1e-12)
        return radius - self.arch.sphere_radius + self.sdf_head(h)[..., 0]

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self._distance(x, self.features(x))

    def forward(self, x: torch.Tensor, z: torch.Tensor | None = None) -> FieldSample:
        h = self.features(x)
        latent = _broadcast_latent(z, x, self.arch.latent_dim)
        colour = self.activation(self.color_hidden(torch.cat([h, latent], dim=-1)))
        return FieldSample(self._distance(x, h), torch.sigmoid(self.color_out(colour)))

    def sdf_and_gradient(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Distance and its spatial gradient, differentiable for the eikonal term."""
        if not x.requires_grad:
            x = x.detach().requires_grad_(True)
        d = self.sdf(x)
        (g,) = torch.autograd.grad(d.sum(), x, create_graph=True)
        return d, g


def eval_hand(field: CanonicalField, x) -> FieldSample:
    return field(as_tensor(x))


def eval_object(field: CanonicalField, x, z_o) -> FieldSample:
    return field(as_tensor(x), z_o)


# ---------------------------------------------------------------------------
# Background
# ---------------------------------------------------------------------------
def inverted_sphere(x, radius: float = BACKGROUND_RADIUS) -> tuple[torch.Tensor, torch.Tensor]:
    """``(x / |x|, radius / |x|)`` with the inverse depth clamped at 1e-6."""
    x = as_tensor(x)
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm < radius * (1.0 - 1e-9)).any()):
        raise InsideForeground(f"background queried inside the sphere of radius {radius}")
    inv = torch.clamp(radius / norm, min=1e-6, max=1.0)
    return x / norm, inv


@dataclass(frozen=True, eq=False)
class BackgroundSample:
    sigma: torch.Tensor
    c: torch.Tensor


class BackgroundField(nn.Module):
    """Density and colour outside the foreground sphere, conditioned on view and z_b."""

    def __init__(
        self,
        radius: float = BACKGROUND_RADIUS,
        width: int = 64,
        hidden_layers: int = 2,
        frequencies: int = 4,
        latent_dim: int = LATENT_DIM,
        seed: int = 0,
    ):
        super().__init__()
        self.radius = radius
        self.latent_dim = latent_dim
        self.position_encoding = PositionalEncoding(4, frequencies)
        self.view_encoding = PositionalEncoding(3, 2)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            dims = [self.position_encoding.out_dim] + [width] * hidden_layers
            self.layers = nn.ModuleList(nn.Linear(i, o) for i, o in zip(dims[:-1], dims[1:]))
            self.sigma_head = nn.Linear(width, 1)
            self.color_hidden = nn.Linear(width + self.view_encoding.out_dim + latent_dim, width)
            self.color_out = nn.Linear(width, 3)
        self.activation = nn.Softplus(beta=10.0)
        self.double()

    def forward(self, x: torch.Tensor, v: torch.Tensor, z: torch.Tensor | None = None):
        direction, inv = inverted_sphere(x, self.radius)
        h = self.position_encoding(torch.cat([direction, inv], dim=-1))
        for lin in self.layers:
            h = self.activation(lin(h))
        sigma = nn.functional.softplus(self.sigma_head(h)[..., 0])
        view = self.view_encoding(v.expand(*x.shape[:-1], 3))
        latent = _broadcast_latent(z, x, self.latent_dim)
        colour = self.activation(self.color_hidden(torch.cat([h, view, latent], dim=-1)))
        return BackgroundSample(sigma, torch.sigmoid(self.color_out(colour)))


def eval_background(field: BackgroundField, x, v, z_b) -> BackgroundSample:
    return field(as_tensor(x), as_tensor(v), z_b)


class ConstantBackground:
    """Opaque uniform backdrop; used by the scene generator and oracles."""

    def __init__(self, color=(0.1, 0.1, 0.15), sigma: float = 0.0, gradient: float = 0.0):
        self.radius = BACKGROUND_RADIUS
        self.color = as_tensor(color)
        self.sigma = sigma
        self.gradient = gradient

    def __call__(self, x: torch.Tensor, v: torch.Tensor, z: torch.Tensor | None = None):
        direction, _ = inverted_sphere(x, self.radius)
        c = self.color + self.gradient * direction[..., [1]]
        return BackgroundSample(
            torch.full(x.shape[:-1], self.sigma, dtype=DTYPE), torch.clamp(c, 0.0, 1.0)
        )


class LatentTable(nn.Module):
    """One latent code per frame."""

    def __init__(self, n_frames: int, dim: int = LATENT_DIM):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n_frames, dim, dtype=DTYPE))

    def forward(self, frame: int) -> torch.Tensor:
        return self.weight[frame]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
def save_checkpoint(path: Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    """Magic, u64 header length, JSON header, then little-endian float32 payload."""
    entries, blobs, offset = [], [], 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def load_checkpoint(path: Path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a holdfield checkpoint (bad magic)")
    (length,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + length])
    payload = np.frombuffer(data[16 + length :], dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        flat = payload[entry["offset"] : entry["offset"] + count]
        tensors[entry["name"]] = torch.from_numpy(flat.astype(np.float64).reshape(entry["shape"]))
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# Gradient probes
# ---------------------------------------------------------------------------
@register_probe("fields.trainable_sdf_wrt_x")
def _probe_trainable_x():
    field = TrainableField(FieldArchitecture(width=16, hidden_layers=2), seed=3)
    g = probe_generator("fields.trainable_sdf_wrt_x")
    x = (torch.rand(5, 3, generator=g, dtype=DTYPE) - 0.5).requires_grad_(True)
    return (lambda x: field(x).d), (x,)


@register_probe("fields.trainable_color_wrt_params")
def _probe_trainable_params():
    field = TrainableField(FieldArchitecture(width=8, hidden_layers=2, latent_dim=4), seed=4)
    g = probe_generator("fields.trainable_color_wrt_params")
    x = torch.rand(4, 3, generator=g, dtype=DTYPE) - 0.5
    z = torch.rand(4, generator=g, dtype=DTYPE).requires_grad_(True)
    w = field.color_out.weight.detach().clone().requires_grad_(True)

    def fn(w, z):
        out = torch.func.functional_call(field, {"color_out.weight": w}, (x, z))
        return out.c

    return fn, (w, z)


@register_probe("fields.background_wrt_x")
def _probe_background():
    field = BackgroundField(width=8, hidden_layers=1, latent_dim=2, seed=5)
    g = probe_generator("fields.background_wrt_x")
    x = (4.0 + torch.rand(3, 3, generator=g, dtype=DTYPE)).requires_grad_(True)
    v = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)

    def fn(x):
        out = field(x, v)
        return torch.cat([out.sigma, out.c.reshape(-1)])

    return fn, (x,)
