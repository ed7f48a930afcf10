"""Adam optimizer over the per-voxel field parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import PARAM_NAMES


@dataclass
class AdamConfig:
    lr: float = 0.01
    lr_decay: float = 0.8
    lr_decay_every: int = 800
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment accumulators, shaped like the parameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})

    def remap(self, keep_idx: np.ndarray, n_children: int) -> None:
        """After densification: carry kept voxels' moments, zero the children."""
        for d in (self.m, self.v):
            for k, arr in d.items():
                tail = np.zeros((n_children * 8,) + arr.shape[1:], dtype=arr.dtype)
                d[k] = np.concatenate([arr[keep_idx], tail])


def learning_rate(cfg: AdamConfig, step: int) -> float:
    """Step-decayed rate: lr * decay^(step // every), exact at the boundaries."""
    return cfg.lr * cfg.lr_decay ** (step // cfg.lr_decay_every)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: AdamConfig) -> float:
    """One in-place Adam update over every parameter array; returns the lr used."""
    lr = learning_rate(cfg, state.step)
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    for k in params:
        g = grads[k]
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g
        m_hat = state.m[k] / bias1
        v_hat = state.v[k] / bias2
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return lr


def scene_params(vset) -> dict:
    """Live views of the optimizable arrays (updates mutate the voxel set)."""
    return {name: getattr(vset, name) for name in PARAM_NAMES}
