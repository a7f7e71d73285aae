"""Gradient engine.

torch.autograd records the tape; this module adds the pieces the optimisation
stages share: a flat named view over every trainable tensor, finite-loss checks,
Adam with global-norm clipping, a backtracking descent for the refinement stage,
seeded generator derivation and the registry of finite-difference probes.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np
import torch

from holdfield.errors import NonFiniteLoss
from holdfield.geometry import DTYPE

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = {
    "field": 5e-4,
    "latent": 5e-4,
    "density": 5e-4,
    "pose": 1e-3,
    "global": 1e-3,
}

STAGE_IDS = {"scene": 0, "align": 1, "pretrain": 2, "refine": 3, "final": 4, "eval": 5}


# ---------------------------------------------------------------------------
# Parameter sets
# ---------------------------------------------------------------------------
class ParamSet:
    """Ordered, named leaf tensors viewed as one contiguous vector.

    Each entry belongs to a group (``field``, ``latent``, ``pose``, ...) that selects
    its learning rate. Slices are contiguous in insertion order.
    """

    def __init__(self) -> None:
        self._tensors: dict[str, torch.Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, tensor: torch.Tensor, group: str) -> torch.Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._tensors[name] = tensor
        self._groups[name] = group
        return tensor

    def add_module(self, prefix: str, module: torch.nn.Module, group: str) -> None:
        for name, p in module.named_parameters():
            self.add(f"{prefix}.{name}", p, group)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    @property
    def names(self) -> list[str]:
        return list(self._tensors)

    @property
    def tensors(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def group(self, name: str) -> str:
        return self._groups[name]

    def names_in(self, group: str) -> list[str]:
        return [n for n, g in self._groups.items() if g == group]

    @property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, t in self._tensors.items():
            out[name] = slice(start, start + t.numel())
            start += t.numel()
        return out

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self._tensors.values())

    def flatten(self) -> torch.Tensor:
        if not self._tensors:
            return torch.zeros(0, dtype=DTYPE)
        return torch.cat([t.detach().reshape(-1).to(DTYPE) for t in self._tensors.values()])

    @torch.no_grad()
    def assign(self, flat: torch.Tensor) -> None:
        if flat.numel() != self.numel:
            raise ValueError(f"expected {self.numel} values, got {flat.numel()}")
        for name, sl in self.slices.items():
            t = self._tensors[name]
            t.copy_(flat[sl].reshape(t.shape).to(t.dtype))

    def digest(self, group: str | None = None) -> str:
        """SHA-256 over the raw bytes of every tensor (optionally one group)."""
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            if group is None or self._groups[name] == group:
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def check_finite(loss: torch.Tensor, step: int | None = None) -> torch.Tensor:
    if not bool(torch.isfinite(loss).all()):
        raise NonFiniteLoss(f"loss evaluated to {loss.detach().tolist()}", step=step)
    return loss


def flat_grad(loss: torch.Tensor, params: ParamSet) -> torch.Tensor:
    grads = torch.autograd.grad(loss, params.tensors, allow_unused=True)
    return torch.cat(
        [
            (torch.zeros_like(p) if g is None else g).reshape(-1).to(DTYPE)
            for p, g in zip(params.tensors, grads, strict=True)
        ]
    )


def grad(
    loss_fn: Callable[[], torch.Tensor], params: ParamSet, step: int | None = None
) -> torch.Tensor:
    """Gradient of ``loss_fn()`` aligned with ``params.slices``."""
    loss = check_finite(loss_fn(), step)
    if not loss.requires_grad:
        return torch.zeros(params.numel, dtype=DTYPE)
    return flat_grad(loss, params)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------
class Optimizer:
    """Adam over a :class:`ParamSet`, one torch param group per ParamSet group."""

    def __init__(
        self,
        params: ParamSet,
        learning_rates: dict[str, float] | None = None,
        clip_norm: float = 1.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.clip_norm = clip_norm
        lrs = {**DEFAULT_LEARNING_RATES, **(learning_rates or {})}
        groups = []
        for group in dict.fromkeys(params.group(n) for n in params):
            members = [params[n] for n in params.names_in(group)]
            groups.append({"params": members, "lr": lrs[group], "name": group})
        self._adam = torch.optim.Adam(groups, betas=betas, eps=eps)

    def step(self, grads: torch.Tensor) -> float:
        """Apply one update from a flat gradient; returns the pre-clip global norm."""
        for name, sl in self.params.slices.items():
            p = self.params[name]
            p.grad = grads[sl].reshape(p.shape).to(p.dtype).clone()
        norm = torch.nn.utils.clip_grad_norm_(self.params.tensors, self.clip_norm)
        self._adam.step()
        self._adam.zero_grad(set_to_none=True)
        return float(norm)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        for name in self.params:
            state = self._adam.state.get(self.params[name])
            if not state:
                continue
            out[f"adam.exp_avg.{name}"] = state["exp_avg"].detach().clone()
            out[f"adam.exp_avg_sq.{name}"] = state["exp_avg_sq"].detach().clone()
            out[f"adam.step.{name}"] = torch.as_tensor(state["step"], dtype=DTYPE).reshape(1)
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for name in self.params:
            key = f"adam.exp_avg.{name}"
            if key not in tensors:
                continue
            p = self.params[name]
            self._adam.state[p] = {
                "step": torch.tensor(float(tensors[f"adam.step.{name}"][0])),
                "exp_avg": tensors[key].reshape(p.shape).to(p.dtype).clone(),
                "exp_avg_sq": tensors[f"adam.exp_avg_sq.{name}"].reshape(p.shape).to(p.dtype),
            }


def step(optimizer: Optimizer, params: ParamSet, grads: torch.Tensor) -> ParamSet:
    if optimizer.params is not params:
        raise ValueError("optimizer was built for a different ParamSet")
    optimizer.step(grads)
    return params


# ---------------------------------------------------------------------------
# Backtracking descent
# ---------------------------------------------------------------------------
@dataclass
class DescentResult:
    iterations: int
    converged: bool
    energy: float
    history: list[dict] = field(default_factory=list)


def descend(
    energy_fn: Callable[[], tuple[torch.Tensor, dict[str, float]]],
    params: ParamSet,
    *,
    lr: float,
    max_iters: int,
    rel_tol: float = 1e-7,
    grad_tol: float = 1e-10,
    max_backtracks: int = 20,
    on_iteration: Callable[[dict], None] | None = None,
) -> DescentResult:
    """RMS-preconditioned gradient descent with a backtracking line search.

    A step is only accepted when it lowers the energy, so the energy sequence of
    accepted iterates is non-increasing.
    """
    second_moment = torch.zeros(params.numel, dtype=DTYPE)
    beta2 = 0.999
    step_size = lr
    history: list[dict] = []

    energy, terms = energy_fn()
    current = float(check_finite(energy))
    for it in range(1, max_iters + 1):
        if energy.requires_grad:
            g = flat_grad(energy, params)
        else:
            g = torch.zeros(params.numel, dtype=DTYPE)
        if float(torch.linalg.vector_norm(g)) < grad_tol:
            return DescentResult(it - 1, True, current, history)

        second_moment = beta2 * second_moment + (1.0 - beta2) * g * g
        direction = -g / (torch.sqrt(second_moment / (1.0 - beta2**it)) + 1e-8)
        origin = params.flatten()

        accepted = False
        for _ in range(max_backtracks):
            params.assign(origin + step_size * direction)
            with torch.no_grad():
                trial, trial_terms = energy_fn()
            if bool(torch.isfinite(trial)) and float(trial) < current:
                accepted = True
                break
            step_size *= 0.5

        record = {"iteration": it, "step_size": step_size, "accepted": accepted}
        if not accepted:
            params.assign(origin)
            record.update(terms)
            history.append(record)
            if on_iteration:
                on_iteration(record)
            logger.info("line search stalled after %d iterations", it)
            return DescentResult(it, True, current, history)

        previous, current = current, float(trial)
        record.update(trial_terms)
        history.append(record)
        if on_iteration:
            on_iteration(record)
        if previous - current <= rel_tol * max(1.0, abs(previous)):
            energy, terms = energy_fn()
            return DescentResult(it, True, current, history)
        step_size = min(step_size * 1.5, lr)
        energy, terms = energy_fn()

    return DescentResult(max_iters, False, current, history)


# ---------------------------------------------------------------------------
# Determinism
# ---------------------------------------------------------------------------
def derive_rng(seed: int, stage: str, step: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_IDS[stage], step])


def derive_seed(seed: int, stage: str, step: int = 0) -> int:
    return int(derive_rng(seed, stage, step).integers(0, 2**62))


def configure_determinism(threads: int = 1) -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, threads))


# ---------------------------------------------------------------------------
# Finite-difference probes
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Probe:
    name: str
    factory: Callable[[], tuple[Callable[..., torch.Tensor], tuple[torch.Tensor, ...]]]
    rtol: float = 1e-4
    atol: float = 1e-7
    eps: float = 1e-6


PROBES: dict[str, Probe] = {}


def register_probe(name: str, *, rtol: float = 1e-4, atol: float = 1e-7, eps: float = 1e-6):
    """Register a factory returning ``(fn, inputs)`` for the gradient suite."""

    def decorator(factory):
        PROBES[name] = Probe(name, factory, rtol, atol, eps)
        return factory

    return decorator


def check_probe(probe: Probe) -> bool:
    fn, inputs = probe.factory()
    return torch.autograd.gradcheck(
        fn, inputs, eps=probe.eps, atol=probe.atol, rtol=probe.rtol, raise_exception=True
    )


def probe_generator(name: str) -> torch.Generator:
    seed = int.from_bytes(hashlib.sha256(name.encode()).digest()[:6], "little")
    return torch.Generator().manual_seed(seed)
