"""
AdamW
重み減衰を勾配から切り離したAdam（減衰 → モーメント更新の順）
"""
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from config import Config
from core.tensor import Parameter, check_finite
from utils.errors import ConfigurationError, DimensionError
from utils.logger import logger


@dataclass
class AdamWState:
    """
    1パラメータ分のAdamW状態

    m, v はパラメータと同じ長さ。v は要素ごとに非負。
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = Config.LEARNING_RATE
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    eps: float = Config.ADAM_EPS
    weight_decay: float = Config.WEIGHT_DECAY

    @classmethod
    def for_param(cls, param: np.ndarray, **hyper) -> "AdamWState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), **hyper)


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> Tuple[np.ndarray, AdamWState]:
    """
    AdamWの1ステップ

    Args:
        param: パラメータ
        grad: 勾配（paramと同形状）
        state: 現在の状態

    Returns:
        (更新後のパラメータ, 更新後の状態)

    Raises:
        DimensionError: 長さ不一致
        NonFiniteError: 勾配に非有限値（ステップは中止され状態は変わらない）
    """
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(
            f"AdamWの形状が一致しません（param: {param.shape}、grad: {grad.shape}、m: {state.m.shape}）",
            axes=("param", "grad"),
        )
    if state.step < 0:
        raise ConfigurationError(f"stepは0以上である必要があります: {state.step}", key="step")
    check_finite(grad, "AdamWの勾配", step=state.step + 1)

    step = state.step + 1
    new_param = param * (1.0 - state.lr * state.weight_decay)
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_param = new_param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

    new_state = AdamWState(
        m=m.astype(param.dtype),
        v=v.astype(param.dtype),
        step=step,
        lr=state.lr,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
        weight_decay=state.weight_decay,
    )
    return new_param.astype(param.dtype), new_state


@dataclass
class AdamW:
    """
    名前付きパラメータ群に対するAdamW

    状態は名前をキーに保持し、チェックポイントへそのまま保存できる。
    """

    lr: float = Config.LEARNING_RATE
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    eps: float = Config.ADAM_EPS
    weight_decay: float = Config.WEIGHT_DECAY
    states: Dict[str, AdamWState] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"学習率は正である必要があります: {self.lr}", key="train.lr")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigurationError(f"betaは[0, 1)である必要があります: ({self.beta1}, {self.beta2})")
        if self.weight_decay < 0:
            raise ConfigurationError(
                f"weight_decayは0以上である必要があります: {self.weight_decay}", key="train.weight_decay"
            )

    def _state_for(self, name: str, param: Parameter) -> AdamWState:
        state = self.states.get(name)
        if state is None:
            state = AdamWState.for_param(
                param.values, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                eps=self.eps, weight_decay=self.weight_decay,
            )
            self.states[name] = state
        return state

    def step(self, params: Dict[str, Parameter]) -> None:
        """
        全パラメータを1ステップ更新

        勾配のどれか1つでも非有限なら、どのパラメータも更新しない。
        """
        for name, param in params.items():
            check_finite(param.grad, f"勾配 {name}")
        for name, param in params.items():
            param.values, self.states[name] = adamw_step(param.values, param.grad, self._state_for(name, param))

    @property
    def step_count(self) -> int:
        for state in self.states.values():
            return state.step
        return 0

    def restore(self, moments: Dict[str, Tuple[np.ndarray, np.ndarray]], step: int) -> None:
        """チェックポイントから状態を復元"""
        self.states = {
            name: AdamWState(
                m=m, v=v, step=step, lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                eps=self.eps, weight_decay=self.weight_decay,
            )
            for name, (m, v) in moments.items()
        }
        logger.info(f"AdamW状態を復元しました（パラメータ数: {len(self.states)}、step: {step}）")
