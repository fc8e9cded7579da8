"""Parameter groups and the Adam update.

Groups are the freeze/unfreeze unit of the whole package: a scene model
exposes exactly six of them (density, albedo, roughness, f0, envmap,
specular_mlp) and the fine-tuning protocol toggles their ``trainable``
flags.  Learning rates are carried per parameter because grid factor
tensors and MLP weights train at different rates inside one group.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class Param:
    name: str
    tensor: Tensor
    lr: float


@dataclass
class ParamGroup:
    name: str
    params: list[Param] = field(default_factory=list)
    trainable: bool = True

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        for p in self.params:
            p.tensor.requires_grad = self.trainable

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()


def check_unique_groups(groups: list[ParamGroup]) -> None:
    names = [g.name for g in groups]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate parameter group names: {names}")
    seen: set[int] = set()
    for g in groups:
        for p in g.params:
            if id(p.tensor) in seen:
                raise ValueError(
                    f"tensor {g.name}/{p.name} belongs to more than one group")
            seen.add(id(p.tensor))


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, lr_scale: float = 1.0):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scale = lr_scale
        self.step_count = 0
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def buffers_for(self, key: str, like: np.ndarray):
        if key not in self.moments:
            self.moments[key] = (np.zeros_like(like), np.zeros_like(like))
        m, v = self.moments[key]
        if m.shape != like.shape:
            raise ValueError(f"moment buffer shape mismatch for {key}")
        return m, v


def adam_step(groups: list[ParamGroup], state: AdamState) -> None:
    """One Adam update over every trainable group; frozen groups untouched.

    Gradients are read from each tensor's ``.grad`` buffer and left in
    place (callers zero them).  A missing buffer means the tensor did not
    participate in the loss and is skipped.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for group in groups:
        if not group.trainable:
            continue
        for p in group.params:
            g = p.tensor.grad
            if g is None:
                continue
            if g.shape != p.tensor.data.shape:
                raise ValueError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{group.name}/{p.name} shape {p.tensor.data.shape}")
            g = g.astype(p.tensor.data.dtype, copy=False)
            m, v = state.buffers_for(f"{group.name}/{p.name}", p.tensor.data)
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.tensor.data = p.tensor.data - (p.lr * state.lr_scale) * m_hat / (
                np.sqrt(v_hat) + state.eps)
