"""AdamW with decoupled weight decay and a linear learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterSet, Tensor


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_params(self) -> ParameterSet:
        """Moments and step counter packed for the checkpoint format."""
        out = ParameterSet({"step": Tensor([float(self.step)])})
        for k in self.m:
            out[f"m/{k}"] = Tensor(self.m[k])
            out[f"v/{k}"] = Tensor(self.v[k])
        return out

    def load_params(self, packed: ParameterSet) -> None:
        self.step = int(packed["step"].data[0])
        self.m = {k[2:]: packed[k].data.copy() for k in packed if k.startswith("m/")}
        self.v = {k[2:]: packed[k].data.copy() for k in packed if k.startswith("v/")}


def adamw_step(params: ParameterSet, state: OptimizerState, lr: float | None = None) -> None:
    """One in-place update: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    lr = state.lr if lr is None else lr
    bad = [k for k in params if params[k].grad is not None and not np.all(np.isfinite(params[k].grad))]
    if bad:
        raise NonFiniteGradient(f"non-finite gradient in {len(bad)} tensor(s): {', '.join(bad[:5])}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k in params:
        p = params[k]
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros(p.shape)
            state.v[k] = np.zeros(p.shape)
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p.data
        p.data -= lr * update


def linear_decay(step: int, total_steps: int, base_lr: float, warmup: int = 0) -> float:
    """Linear ramp over ``warmup`` steps, then linear decay to zero at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup:
        return base_lr * step / warmup
    return max(0.0, base_lr * (total_steps - step) / (total_steps - warmup))
