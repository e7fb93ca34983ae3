"""Bias-corrected Adam with single-precision persistent state.

Moments are stored float32 (they travel inside checkpoints); each update is
computed in float64 and the results written back as float32, so a
save/load/resume cycle reproduces the exact same parameter bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_param(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param, dtype=np.float32),
                   v=np.zeros_like(param, dtype=np.float32))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> None:
    """One in-place Adam update of a float32 parameter tensor."""
    if param.shape != grad.shape:
        raise ValueError(f"grad shape {grad.shape} != param shape {param.shape}")
    state.step += 1
    t = state.step
    g = np.asarray(grad, dtype=np.float64)
    m = BETA1 * state.m.astype(np.float64) + (1.0 - BETA1) * g
    v = BETA2 * state.v.astype(np.float64) + (1.0 - BETA2) * g * g
    state.m = m.astype(np.float32)
    state.v = v.astype(np.float32)
    m_hat = m / (1.0 - BETA1 ** t)
    v_hat = v / (1.0 - BETA2 ** t)
    update = param.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + EPS)
    param[...] = update.astype(np.float32)
