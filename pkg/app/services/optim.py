"""Learning-rate schedule, global gradient clipping and AdamW with decoupled weight decay."""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from app.errors import ContractError, TrainingDivergenceError
from app.models import TrainConfig


def lr_schedule(step: int, cfg: TrainConfig, total_steps: Optional[int] = None) -> float:
    """Linear decay from lr0 at step 0 to zero at total_steps, no warmup."""
    total = total_steps if total_steps is not None else cfg.total_steps
    if total is None or total < 1:
        raise ContractError("lr_schedule needs total_steps >= 1")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return cfg.lr0 * (1.0 - step / total)


def global_norm(grads: List[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_grad_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale every gradient in place so the global L2 norm is at most max_norm; returns the factor."""
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDivergenceError(f"non-finite gradient norm {norm}")
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        g *= factor
    return factor


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimizerState, lr: float, cfg: TrainConfig):
    """One AdamW update, in place: w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1 ** t
    bias2 = 1.0 - cfg.beta2 ** t
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + cfg.adam_eps) + cfg.weight_decay * w
        w -= lr * update
