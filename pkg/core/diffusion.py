"""
拡散過程
ノイズスケジュール、前向きノイズ付加、ε予測損失、DDPM逆過程、Bias-aware Guided Sampling
"""
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Union

import numpy as np
from tqdm import tqdm

from config import Config
from core.layers import bilinear_resize, bilinear_resize_backward
from core.tensor import check_finite
from utils.errors import ConfigurationError, DimensionError, NonFiniteError
from utils.logger import logger

TimeStep = Union[int, np.ndarray]


# ==================== データ型 ====================

@dataclass(frozen=True)
class NoiseSchedule:
    """
    t = 1..T のノイズスケジュール（配列のインデックスは t−1）

    sigma2 は逆過程の分散 β̃_t（t=1 で 0）。
    """

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma2: np.ndarray

    def check_t(self, t: TimeStep) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if np.any(ts < 1) or np.any(ts > self.T):
            raise ConfigurationError(f"t は 1..{self.T} の範囲である必要があります: {t}", key="t")
        return ts

    def descriptor(self) -> dict:
        return {"kind": self.kind, "T": self.T}


@dataclass(frozen=True)
class GuidanceConfig:
    """BGSの設定（w ≥ 0、eps_num > 0、bias_space は hr / lr）"""

    w: float = Config.GUIDANCE_W
    eps_num: float = Config.GUIDANCE_EPS
    enabled: bool = True
    bias_space: str = "hr"

    def __post_init__(self):
        if self.w < 0:
            raise ConfigurationError(f"wは0以上である必要があります: {self.w}", key="guidance.w")
        if not self.eps_num > 0:
            raise ConfigurationError(f"eps_numは正である必要があります: {self.eps_num}", key="guidance.eps")
        if self.bias_space not in Config.BIAS_SPACES:
            raise ConfigurationError(f"未知のbias_spaceです: {self.bias_space}", key="guidance.bias_space")


@dataclass
class ConditionInput:
    """
    条件入力（すべてモデル値域）

    lr_up: HR次元へ双線形拡大したLR (b, 1, H, W)
    topo_norm: 正規化地形 (b または 1, 1, H, W)
    lr: 元のLR (b, 1, H/8, W/8)（bias_space=lr のときに使用）
    """

    lr_up: np.ndarray
    topo_norm: Optional[np.ndarray] = None
    use_topo: bool = True
    lr: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.lr_up.ndim != 4 or self.lr_up.shape[1] != 1:
            raise DimensionError(f"lr_upは (b, 1, H, W) である必要があります: {self.lr_up.shape}", axes=("lr_up",))
        if self.use_topo:
            if self.topo_norm is None:
                raise ConfigurationError("use_topo=True ですが地形が与えられていません", key="model.use_topo")
            if self.topo_norm.shape[2:] != self.lr_up.shape[2:]:
                raise DimensionError(
                    f"地形 {self.topo_norm.shape} とlr_up {self.lr_up.shape} の空間次元が一致しません",
                    axes=("topo_norm", "lr_up"),
                )

    @property
    def batch(self) -> int:
        return self.lr_up.shape[0]

    def channels(self) -> list:
        """U-Netに連結する条件チャネル（lr_up [, topo]）"""
        chans = [self.lr_up]
        if self.use_topo:
            topo = self.topo_norm
            if topo.shape[0] != self.batch:
                topo = np.broadcast_to(topo, (self.batch,) + topo.shape[1:])
            chans.append(topo.astype(self.lr_up.dtype))
        return chans

    def subset(self, index) -> "ConditionInput":
        topo = self.topo_norm
        if topo is not None and topo.shape[0] == self.batch:
            topo = topo[index]
        return ConditionInput(
            lr_up=self.lr_up[index],
            topo_norm=topo,
            use_topo=self.use_topo,
            lr=None if self.lr is None else self.lr[index],
        )


class NoisePredictor(Protocol):
    """ε_θ(y_t, cond, t)"""

    def forward(self, y_t: np.ndarray, cond: ConditionInput, t: TimeStep) -> np.ndarray: ...

    def backward(self, grad_out: np.ndarray) -> np.ndarray: ...


# ==================== スケジュール ====================

def _cosine_alpha_bar(T: int, s: float = 0.008) -> np.ndarray:
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + s) / (1 + s)) * math.pi / 2) ** 2
    return f / f[0]


def build_schedule(T: int, kind: str = "linear") -> NoiseSchedule:
    """
    ノイズスケジュールを構築

    linear: β を 1e-4·(1000/T) から 0.02·(1000/T) まで線形補間
    cosine: ᾱ_t = f(t)/f(0)、f(t) = cos²(((t/T + 0.008)/1.008)·π/2) から β を導出
    どちらも β は 0.999 でクランプし、ᾱ は β から累積積で作り直す。

    Raises:
        ConfigurationError: T < 2・未知のkind
    """
    if T < 2:
        raise ConfigurationError(f"Tは2以上である必要があります: {T}", key="diffusion.steps")
    if kind == "linear":
        scale = 1000.0 / T
        beta = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    elif kind == "cosine":
        ab = _cosine_alpha_bar(T)
        beta = 1.0 - ab[1:] / ab[:-1]
    else:
        raise ConfigurationError(f"未知のスケジュールです: {kind}", key="diffusion.schedule")
    beta = np.clip(beta, 1e-12, Config.MAX_BETA)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
    sigma2[0] = 0.0
    logger.info(f"ノイズスケジュールを構築しました（{kind}、T: {T}、ᾱ_T: {alpha_bar[-1]:.3e}）")
    return NoiseSchedule(T=T, kind=kind, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma2=sigma2)


def _per_sample(values: np.ndarray, ts: np.ndarray, batch: int) -> np.ndarray:
    """スケジュール値を (b, 1, 1, 1) に揃える（スカラーtは全サンプル共通）"""
    picked = values[ts - 1]
    if picked.size == 1:
        return np.full((batch, 1, 1, 1), picked[0])
    if picked.size != batch:
        raise DimensionError(f"tの個数 {picked.size} がバッチ {batch} と一致しません", axes=("t", "batch"))
    return picked.reshape(batch, 1, 1, 1)


# ==================== 前向き過程・損失 ====================

def q_sample(y0: np.ndarray, t: TimeStep, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """
    y_t = √ᾱ_t·y0 + √(1−ᾱ_t)·eps

    Raises:
        DimensionError: eps と y0 の形状不一致
        ConfigurationError: t が範囲外
    """
    if eps.shape != y0.shape:
        raise DimensionError(f"epsの形状 {eps.shape} がy0 {y0.shape} と一致しません", axes=("eps", "y0"))
    ts = schedule.check_t(t)
    ab = _per_sample(schedule.alpha_bar, ts, y0.shape[0])
    return (np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps).astype(y0.dtype)


def training_loss(
    model: NoisePredictor,
    y0: np.ndarray,
    cond: ConditionInput,
    t: TimeStep,
    eps: np.ndarray,
    schedule: NoiseSchedule,
    batch_id: Optional[int] = None
) -> float:
    """
    ε予測の平均二乗誤差を計算し、逆伝播でパラメータ勾配を加算する

    Returns:
        損失値

    Raises:
        NonFiniteError: 損失が非有限（t とバッチ番号を含む）
    """
    y_t = q_sample(y0, t, eps, schedule)
    pred = model.forward(y_t, cond, t)
    diff = pred - eps
    loss = float(np.mean(diff * diff, dtype=np.float64))
    if not math.isfinite(loss):
        raise NonFiniteError("損失が非有限です", t=np.atleast_1d(t).tolist(), batch=batch_id)
    model.backward((2.0 / diff.size) * diff)
    return loss


# ==================== 逆過程 ====================

def ddpm_step(
    y_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    z: Optional[np.ndarray],
    schedule: NoiseSchedule
) -> np.ndarray:
    """
    y_{t−1} = (1/√α_t)·(y_t − ((1−α_t)/√(1−ᾱ_t))·eps_hat) + √(σ²_t)·z
    """
    schedule.check_t(t)
    alpha = float(schedule.alpha[t - 1])
    alpha_bar = float(schedule.alpha_bar[t - 1])
    sigma = math.sqrt(float(schedule.sigma2[t - 1]))
    mean = (1.0 / math.sqrt(alpha)) * (y_t - ((1.0 - alpha) / math.sqrt(1.0 - alpha_bar)) * eps_hat)
    if z is not None and sigma > 0.0:
        mean = mean + sigma * z
    return mean.astype(y_t.dtype)


def bias_norm(y: np.ndarray, target: np.ndarray) -> np.ndarray:
    """サンプルごとの f = ‖y − target‖₂"""
    residual = np.asarray(y, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sqrt(np.sum(residual.reshape(residual.shape[0], -1) ** 2, axis=1))


def bias_gradient(y: np.ndarray, target: np.ndarray, eps_num: float = Config.GUIDANCE_EPS) -> np.ndarray:
    """
    ∇f = (y − target) / ‖y − target‖₂（サンプルごとの単位ベクトル）

    ‖y − target‖₂ ≤ eps_num のサンプルは 0。
    """
    residual = np.asarray(y, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    norms = bias_norm(y, target)
    unbiased = int(np.count_nonzero(norms <= eps_num))
    if unbiased:
        logger.debug(f"残差が eps_num 以下のサンプル {unbiased} 件はガイダンスを0にします")
    scale = np.where(norms > eps_num, 1.0 / np.maximum(norms, eps_num), 0.0)
    return residual * scale.reshape(-1, *([1] * (residual.ndim - 1)))


def guidance_vector(y_t: np.ndarray, cond: ConditionInput, g: GuidanceConfig) -> np.ndarray:
    """
    w·∇f（bias_space=hr: f = ‖y_t − lr_up‖₂、lr: f = ‖bilinear(y_t, LR) − lr‖₂）
    """
    if g.bias_space == "lr":
        if cond.lr is None:
            raise ConfigurationError("bias_space=lr にはLR条件が必要です", key="guidance.bias_space")
        h, w = cond.lr.shape[2:]
        down = bilinear_resize(y_t.astype(np.float64), h, w)
        unit = bias_gradient(down, cond.lr, g.eps_num)
        grad = bilinear_resize_backward(unit, y_t.shape[2], y_t.shape[3])
    else:
        grad = bias_gradient(y_t, cond.lr_up, g.eps_num)
    return g.w * grad


def bgs_step(
    y_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    z: Optional[np.ndarray],
    schedule: NoiseSchedule,
    cond: ConditionInput,
    g: GuidanceConfig
) -> np.ndarray:
    """
    Bias-aware Guided Sampling の1ステップ: ddpm_step(…) − w·∇f

    w = 0 のとき ddpm_step と一致する。
    """
    base = ddpm_step(y_t, eps_hat, t, z, schedule)
    return (base - guidance_vector(y_t, cond, g)).astype(y_t.dtype)


# ==================== サンプリング ====================

class _NoiseSource:
    """サンプラーの乱数（シード1つならバッチ共通、シード列ならサンプルごと）"""

    def __init__(self, seed: Union[int, Sequence[int]], batch: int):
        if isinstance(seed, (int, np.integer)):
            self.rngs = None
            self.rng = np.random.default_rng(int(seed))
        else:
            seeds = list(seed)
            if len(seeds) != batch:
                raise DimensionError(f"シード数 {len(seeds)} がバッチ {batch} と一致しません", axes=("seed", "batch"))
            self.rngs = [np.random.default_rng(int(s)) for s in seeds]

    def draw(self, shape) -> np.ndarray:
        if self.rngs is None:
            return self.rng.standard_normal(shape).astype(np.float32)
        return np.stack([r.standard_normal(shape[1:]) for r in self.rngs]).astype(np.float32)


def sample(
    model: NoisePredictor,
    cond: ConditionInput,
    schedule: NoiseSchedule,
    g: GuidanceConfig,
    seed: Union[int, Sequence[int]] = 0,
    deterministic_reverse: bool = False,
    progress: bool = False
) -> np.ndarray:
    """
    純ノイズ y_T ~ N(0, I) から t = T…1 の逆過程で y_0 を生成

    Args:
        model: ノイズ予測器
        cond: 条件入力（バッチ次元がサンプル数）
        schedule: ノイズスケジュール
        g: ガイダンス設定（enabled=False なら ddpm_step）
        seed: 乱数シード（int またはサンプルごとのシード列）
        deterministic_reverse: True なら確率項を加えない
        progress: tqdm の進捗表示

    Returns:
        y_0（モデル値域、(b, 1, H, W) float32）

    Raises:
        NonFiniteError: 途中の y が非有限（ステップ番号を含む）
    """
    shape = (cond.batch, 1) + tuple(cond.lr_up.shape[2:])
    noise = _NoiseSource(seed, cond.batch)
    y = noise.draw(shape)
    zeros = np.zeros(shape, dtype=np.float32)

    logger.info(
        f"サンプリングを開始します（バッチ: {cond.batch}、T: {schedule.T}、"
        f"BGS: {'on' if g.enabled else 'off'}、w: {g.w}）"
    )
    for t in tqdm(range(schedule.T, 0, -1), desc="sampling", disable=not progress, leave=False):
        eps_hat = model.forward(y, cond, t)
        z = noise.draw(shape) if (t > 1 and not deterministic_reverse) else zeros
        if g.enabled:
            y = bgs_step(y, eps_hat, t, z, schedule, cond, g)
        else:
            y = ddpm_step(y, eps_hat, t, z, schedule)
        check_finite(y, "サンプラーの状態", step=t)
    return y
