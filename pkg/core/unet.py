"""
条件付きU-Net（ノイズ予測器 ε_θ）
ノイズ付きHR + 拡大LR (+ 地形) をチャネル連結して入力し、時刻埋め込みを各残差ブロックへ加える
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from core.diffusion import ConditionInput, TimeStep
from core.layers import Conv2d, Downsample, GroupNorm, Linear, Module, SiLU, Upsample
from utils.errors import ConfigurationError, DimensionError
from utils.logger import logger

BLOCKS_PER_STAGE = 2


@dataclass(frozen=True)
class UNetConfig:
    """
    U-Netの構成

    in_channels は 3（ノイズ付きHR + lr_up + 地形）または 2（地形なし）。
    """

    base_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 128
    in_channels: int = 3
    groups: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError(f"depthは1以上である必要があります: {self.depth}", key="model.depth")
        if self.groups < 1 or self.base_channels % self.groups != 0:
            raise ConfigurationError(
                f"base_channels {self.base_channels} が groups {self.groups} で割り切れません", key="model.groups"
            )
        if self.base_channels % 2 != 0:
            raise ConfigurationError(
                f"base_channels は時刻埋め込みのため偶数である必要があります: {self.base_channels}",
                key="model.base_channels",
            )
        if self.in_channels not in (2, 3):
            raise ConfigurationError(f"in_channelsは2か3です: {self.in_channels}", key="model.use_topo")
        if self.time_embed_dim < 1:
            raise ConfigurationError(f"time_embed_dimは正である必要があります: {self.time_embed_dim}",
                                     key="model.time_embed_dim")

    @property
    def use_topo(self) -> bool:
        return self.in_channels == 3

    def stage_channels(self, stage: int) -> int:
        return self.base_channels * (2 ** stage)

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "depth": self.depth,
            "time_embed_dim": self.time_embed_dim,
            "in_channels": self.in_channels,
            "groups": self.groups,
        }


def time_embedding(t: TimeStep, dim: int) -> np.ndarray:
    """
    正弦波の時刻埋め込み

    e[2i] = sin(t·ω_i)、e[2i+1] = cos(t·ω_i)、ω_i = exp(−ln(10000)·i/(dim/2))

    Args:
        t: 時刻（int または int配列）
        dim: 埋め込み次元（偶数）

    Returns:
        スカラーtなら (dim,)、配列なら (len(t), dim)

    Raises:
        ConfigurationError: dim が奇数・t < 1
    """
    if dim < 2 or dim % 2 != 0:
        raise ConfigurationError(f"埋め込み次元は正の偶数である必要があります: {dim}", key="dim")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(ts < 1):
        raise ConfigurationError(f"t は1以上である必要があります: {t}", key="t")
    half = dim // 2
    omega = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    angles = ts[:, None] * omega[None, :]
    emb = np.empty((ts.size, dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(angles)
    emb[:, 1::2] = np.cos(angles)
    return emb[0] if np.ndim(t) == 0 else emb


class ResBlock(Module):
    """group_norm → SiLU → conv を2回、間に時刻埋め込みの射影を加算する残差ブロック"""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int, rng: np.random.Generator):
        super().__init__()
        self.norm1 = self.register_module("norm1", GroupNorm(in_channels, groups))
        self.act1 = SiLU()
        self.conv1 = self.register_module("conv1", Conv2d(in_channels, out_channels, 3, rng))
        self.time_act = SiLU()
        self.time = self.register_module("time", Linear(time_dim, out_channels, rng))
        self.norm2 = self.register_module("norm2", GroupNorm(out_channels, groups))
        self.act2 = SiLU()
        self.conv2 = self.register_module("conv2", Conv2d(out_channels, out_channels, 3, rng))
        self.skip = None
        if in_channels != out_channels:
            self.skip = self.register_module("skip", Conv2d(in_channels, out_channels, 1, rng))

    def forward(self, x: np.ndarray, temb: np.ndarray) -> np.ndarray:
        h = self.conv1.forward(self.act1.forward(self.norm1.forward(x)))
        h = h + self.time.forward(self.time_act.forward(temb))[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(self.norm2.forward(h)))
        residual = self.skip.forward(x) if self.skip is not None else x
        return h + residual

    def backward(self, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(入力勾配, 時刻埋め込み勾配)"""
        d_residual = self.skip.backward(grad_out) if self.skip is not None else grad_out
        d_h = self.norm2.backward(self.act2.backward(self.conv2.backward(grad_out)))
        d_temb = self.time_act.backward(self.time.backward(d_h.sum(axis=(2, 3))))
        d_x = self.norm1.backward(self.act1.backward(self.conv1.backward(d_h)))
        return d_x + d_residual, d_temb


class ConditionalUNet(Module):
    """
    条件付きU-Net

    入力conv → depth× [残差ブロック2つ + 2倍ダウンサンプル] → ボトルネック2ブロック
    → 対称なアップサンプル経路（スキップ連結）→ 出力conv（ゼロ初期化）

    パラメータ名は checkpoint が依存するため固定:
    ``time.0`` / ``time.1`` / ``input`` / ``down.{i}.block.{j}`` / ``down.{i}.downsample`` /
    ``mid.block.{j}`` / ``up.{i}.upsample`` / ``up.{i}.block.{j}`` / ``out.norm`` / ``out.conv``
    """

    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.base_channels
        g = config.groups
        td = config.time_embed_dim

        self.time0 = self.register_module("time.0", Linear(c, td, rng))
        self.time_act0 = SiLU()
        self.time1 = self.register_module("time.1", Linear(td, td, rng))
        self.time_act1 = SiLU()

        self.input = self.register_module("input", Conv2d(config.in_channels, c, 3, rng))

        self.down_blocks: List[List[ResBlock]] = []
        self.downsamples: List[Downsample] = []
        ch = c
        for i in range(config.depth):
            out_ch = config.stage_channels(i)
            blocks = []
            for j in range(BLOCKS_PER_STAGE):
                blocks.append(self.register_module(f"down.{i}.block.{j}", ResBlock(ch, out_ch, td, g, rng)))
                ch = out_ch
            self.down_blocks.append(blocks)
            self.downsamples.append(self.register_module(f"down.{i}.downsample", Downsample(ch, rng)))

        self.mid_blocks = [
            self.register_module(f"mid.block.{j}", ResBlock(ch, ch, td, g, rng)) for j in range(BLOCKS_PER_STAGE)
        ]

        # 上り経路は深い段から（インデックスは対応する下り段）
        self.upsamples: Dict[int, Upsample] = {}
        self.up_blocks: Dict[int, List[ResBlock]] = {}
        for i in reversed(range(config.depth)):
            skip_ch = config.stage_channels(i)
            self.upsamples[i] = self.register_module(f"up.{i}.upsample", Upsample(ch, rng))
            blocks = []
            for j in range(BLOCKS_PER_STAGE):
                blocks.append(self.register_module(f"up.{i}.block.{j}", ResBlock(ch + skip_ch, skip_ch, td, g, rng)))
                ch = skip_ch
            self.up_blocks[i] = blocks

        self.out_norm = self.register_module("out.norm", GroupNorm(ch, g))
        self.out_act = SiLU()
        self.out_conv = self.register_module("out.conv", Conv2d(ch, 1, 3, rng, zero_init=True))

        self._up_split: List[int] = []

    # ---------- 入力の組み立て ----------

    def _assemble_input(self, y_t: np.ndarray, cond: ConditionInput) -> np.ndarray:
        if cond.use_topo != self.config.use_topo:
            raise DimensionError(
                f"条件の地形使用 ({cond.use_topo}) がモデル構成 (in_channels={self.config.in_channels}) と一致しません",
                axes=("input.channel",),
            )
        x = np.concatenate([y_t] + cond.channels(), axis=1).astype(self.dtype, copy=False)
        if x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"[input] 連結後のチャネル数 {x.shape[1]} が in_channels {self.config.in_channels} と一致しません",
                axes=("input.channel",),
            )
        factor = 2 ** self.config.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise DimensionError(
                f"[down] 空間次元 {x.shape[2:]} が 2^depth={factor} で割り切れません",
                axes=("height", "width"),
            )
        return x

    def _time_features(self, t: TimeStep, batch: int) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if ts.size == 1:
            ts = np.full(batch, ts[0])
        elif ts.size != batch:
            raise DimensionError(f"[time] tの個数 {ts.size} がバッチ {batch} と一致しません", axes=("t", "batch"))
        emb = time_embedding(ts, self.config.base_channels).astype(self.dtype)
        h = self.time_act0.forward(self.time0.forward(emb))
        return self.time_act1.forward(self.time1.forward(h))

    # ---------- 順伝播・逆伝播 ----------

    def forward(self, y_t: np.ndarray, cond: ConditionInput, t: TimeStep) -> np.ndarray:
        """
        eps_hat = ε_θ(y_t, cond, t)

        Args:
            y_t: ノイズ付きHR (b, 1, H, W)
            cond: 条件入力
            t: 時刻（int またはサンプルごとの配列）

        Returns:
            y_t と同形状の予測ノイズ

        Raises:
            DimensionError: 形状不正（段名を含む）
        """
        x = self._assemble_input(y_t, cond)
        temb = self._time_features(t, x.shape[0])

        h = self.input.forward(x)
        skips = []
        for i, blocks in enumerate(self.down_blocks):
            for block in blocks:
                h = block.forward(h, temb)
                skips.append(h)
            h = self.downsamples[i].forward(h)

        for block in self.mid_blocks:
            h = block.forward(h, temb)

        self._up_split = []
        for i in reversed(range(self.config.depth)):
            h = self.upsamples[i].forward(h)
            for block in self.up_blocks[i]:
                self._up_split.append(h.shape[1])
                h = block.forward(np.concatenate([h, skips.pop()], axis=1), temb)

        out = self.out_conv.forward(self.out_act.forward(self.out_norm.forward(h)))
        return out.astype(y_t.dtype, copy=False)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """
        直前の forward に対する逆伝播（パラメータ勾配を加算）

        Returns:
            y_t に対する勾配
        """
        g = self.out_norm.backward(self.out_act.backward(self.out_conv.backward(grad_out.astype(self.dtype))))
        d_temb = None

        def add_temb(d):
            nonlocal d_temb
            d_temb = d if d_temb is None else d_temb + d

        skip_grads: List[np.ndarray] = []
        splits = list(self._up_split)
        for i in range(self.config.depth):
            for block in reversed(self.up_blocks[i]):
                g, d = block.backward(g)
                add_temb(d)
                h_ch = splits.pop()
                skip_grads.append(g[:, h_ch:])
                g = g[:, :h_ch]
            g = self.upsamples[i].backward(g)

        for block in reversed(self.mid_blocks):
            g, d = block.backward(g)
            add_temb(d)

        # skip_grads は浅い段の先頭ブロックから順に並ぶ
        for i in reversed(range(self.config.depth)):
            g = self.downsamples[i].backward(g)
            for j in reversed(range(BLOCKS_PER_STAGE)):
                g = g + skip_grads[i * BLOCKS_PER_STAGE + j]
                g, d = self.down_blocks[i][j].backward(g)
                add_temb(d)

        d_x = self.input.backward(g)
        d_h = self.time1.backward(self.time_act1.backward(d_temb))
        self.time0.backward(self.time_act0.backward(d_h))
        return d_x[:, :1]


def build_unet(config: UNetConfig, seed: int = 0) -> ConditionalUNet:
    model = ConditionalUNet(config, seed)
    logger.info(
        f"U-Netを構築しました（base: {config.base_channels}、depth: {config.depth}、"
        f"in_channels: {config.in_channels}、パラメータ数: {model.num_parameters()}）"
    )
    return model
