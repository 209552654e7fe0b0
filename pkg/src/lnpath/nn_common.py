"""Small torch helpers shared by the three networks."""

from __future__ import annotations

import numpy as np
import torch


class TrainingError(RuntimeError):
    """Training aborted (NaN loss, empty data, ...)."""


class UntrainedModelError(RuntimeError):
    pass


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def init_module(module: torch.nn.Module, seed: int) -> None:
    """Seeded re-initialization of every conv/linear layer (uniform fan-in init)."""
    g = seeded_generator(seed)
    for m in module.modules():
        if isinstance(m, (torch.nn.Conv2d, torch.nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.copy_(torch.empty_like(m.weight).uniform_(-bound, bound, generator=g) * np.sqrt(6.0))
                if m.bias is not None:
                    m.bias.zero_()


def state_to_numpy(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_numpy_state(module: torch.nn.Module, state: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    if set(expected) != set(state):
        raise ValueError(f"parameter names differ: missing {sorted(set(expected) - set(state))}, "
                         f"unexpected {sorted(set(state) - set(expected))}")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(np.shape(state[k])):
            raise ValueError(f"parameter {k}: shape {np.shape(state[k])} != {tuple(v.shape)}")
    module.load_state_dict({k: torch.as_tensor(np.asarray(v)) for k, v in state.items()})


def image_tensor(images) -> torch.Tensor:
    """uint8 HxWx3 (or a batch of them) -> float NCHW in [-0.5, 0.5]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.array(arr, dtype=np.float32))
    return t.permute(0, 3, 1, 2) / 255.0 - 0.5


def check_finite(loss: torch.Tensor, where: str, parts: dict | None = None) -> None:
    if not torch.isfinite(loss):
        detail = ""
        if parts:
            detail = " (" + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in parts.items()) + ")"
        raise TrainingError(f"non-finite loss at {where}{detail}")


def gradient_check(module: torch.nn.Module, loss_fn, eps: float = 1e-6) -> dict:
    """Compare autograd gradients of ``loss_fn()`` with central finite differences.

    The module is switched to float64 in place. Returns the elementwise
    maximum relative error (denominator ``max(|a|, |n|, 1e-6)``) and the
    norm-wise relative error ``|a - n| / max(|a|, |n|)``.
    """
    module.double()
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    analytic = torch.cat([p.grad.detach().reshape(-1).clone() for p in params])
    numeric = torch.empty_like(analytic)
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                up = float(loss_fn())
                flat[i] = old - eps
                down = float(loss_fn())
                flat[i] = old
                numeric[k] = (up - down) / (2 * eps)
                k += 1
    diff = (analytic - numeric).abs()
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(diff, 1e-6))
    return {
        "n_params": int(analytic.numel()),
        "max_elementwise": float((diff / denom).max()),
        "normwise": float(diff.norm() / max(float(analytic.norm()), float(numeric.norm()), 1e-12)),
    }
