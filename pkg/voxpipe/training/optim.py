"""Adam と学習率スケジュール（cosine decay with restarts / reduce-on-plateau）"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from voxpipe.domain.config import OptimConfig
from voxpipe.domain.errors import ShapeMismatch
from voxpipe.engine.layers import Param

_log = logging.getLogger("voxpipe.optim")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-7
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Param], grads: Sequence[Optional[np.ndarray]]) -> None:
    """1ステップ更新（パラメータはその場で書き換える）。勾配 None の Param は g=0 として扱う"""
    if len(params) != len(grads):
        raise ShapeMismatch(f"params {len(params)} と grads {len(grads)} の数が不一致")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g in zip(params, grads):
        theta = p.tensor.data
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise ShapeMismatch(f"{p.name}: 勾配 {g.shape} とパラメータ {theta.shape} の形状が不一致")
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(theta)
            v = np.zeros_like(theta)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        np.subtract(theta, update.astype(theta.dtype, copy=False), out=theta)


class Adam:
    """Network.trainable() の Param をまとめて更新する薄いラッパ"""

    def __init__(self, params: List[Param], lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-7):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    @classmethod
    def from_config(cls, params: List[Param], cfg: OptimConfig, lr: float) -> "Adam":
        return cls(params, lr, cfg.beta1, cfg.beta2, cfg.eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params, [p.tensor.grad for p in self.params])


# =============================================================================
# スケジュール
# =============================================================================
@dataclass(frozen=True)
class CosineRestartSchedule:
    eta0: float = 1e-3
    first_cycle_steps: int = 1
    t_mul: float = 1.5
    m_mul: float = 1.0
    alpha_min: float = 1e-6

    def __post_init__(self):
        if self.t_mul < 1.0:
            raise ValueError("t_mul は 1 以上")
        if not self.alpha_min < self.eta0:
            raise ValueError("alpha_min は eta0 未満")
        if self.first_cycle_steps < 1:
            raise ValueError("first_cycle_steps は 1 以上")

    def cycle_of(self, global_step: int) -> Tuple[int, float, float]:
        """(cycle index, cycle 内オフセット, cycle 長)"""
        i, start, length = 0, 0.0, float(self.first_cycle_steps)
        while global_step >= start + length:
            start += length
            i += 1
            length = self.first_cycle_steps * self.t_mul**i
        return i, global_step - start, length


def cosine_restart_lr(sched: CosineRestartSchedule, global_step: int) -> float:
    if global_step < 0:
        raise ValueError(f"step は 0 以上: {global_step}")
    i, t, length = sched.cycle_of(global_step)
    peak = sched.eta0 * sched.m_mul**i
    return sched.alpha_min + (peak - sched.alpha_min) * 0.5 * (1.0 + math.cos(math.pi * t / length))


@dataclass
class PlateauState:
    lr: float
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    min_delta: float = 1e-4
    mode: str = "min"
    best: Optional[float] = None
    wait: int = 0

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor は (0,1)")
        if self.mode not in ("min", "max"):
            raise ValueError("mode は min / max")

    @classmethod
    def from_config(cls, cfg: OptimConfig, lr: float) -> "PlateauState":
        return cls(lr=lr, patience=cfg.patience, factor=cfg.factor, min_lr=cfg.min_lr, min_delta=cfg.min_delta, mode=cfg.plateau_mode)

    def improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "min":
            return metric < self.best - self.min_delta
        return metric > self.best + self.min_delta


def plateau_update(state: PlateauState, dev_metric: float) -> Tuple[float, bool]:
    """patience 回連続で改善しなければ lr ← max(lr·factor, min_lr)。lr は増えない"""
    if not math.isfinite(dev_metric):
        raise ValueError(f"監視値が有限ではありません: {dev_metric}")
    if state.improved(dev_metric):
        state.best = dev_metric
        state.wait = 0
        return state.lr, False
    state.wait += 1
    if state.wait < state.patience:
        return state.lr, False
    state.wait = 0
    new_lr = max(state.lr * state.factor, state.min_lr)
    reduced = new_lr < state.lr
    if reduced:
        _log.info("plateau: lr %.3g -> %.3g", state.lr, new_lr)
    state.lr = new_lr
    return state.lr, reduced
