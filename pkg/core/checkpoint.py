"""
チェックポイント
"RSCK" + version + ヘッダー長 + UTF-8 JSONヘッダー + float32ペイロード（ディレクトリ順）
"""
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from core.diffusion import NoiseSchedule, build_schedule
from core.layers import Module
from core.preprocess import NormStats, TopoStats
from core.srcnn import SRCNN
from core.unet import ConditionalUNet, UNetConfig
from utils.errors import CheckpointError, DimensionError
from utils.logger import logger

CHECKPOINT_MAGIC = b"RSCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREFIX = struct.Struct("<4sII")
OPTIM_M = "optim.m."
OPTIM_V = "optim.v."

REQUIRED_KEYS = ("format_version", "model_kind", "norm_stats", "schedule", "step", "directory")


@dataclass
class Checkpoint:
    """学習済みモデル一式（パラメータ・正規化統計量・スケジュール記述・最適化状態）"""

    model_kind: str
    params: Dict[str, np.ndarray]
    norm_stats: NormStats
    schedule: Dict[str, Any]
    topo_stats: TopoStats = field(default_factory=TopoStats)
    unet_config: Optional[UNetConfig] = None
    optimizer: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None
    step: int = 0
    seed_lineage: Dict[str, int] = field(default_factory=dict)
    run_config: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(int(self.schedule["T"]), self.schedule["kind"])

    def build_model(self) -> Module:
        """パラメータを読み込んだモデルを構築"""
        if self.model_kind == "unet":
            if self.unet_config is None:
                raise CheckpointError("unet_config がありません")
            model: Module = ConditionalUNet(self.unet_config, seed=0)
        elif self.model_kind == "srcnn":
            model = SRCNN(seed=0)
        else:
            raise CheckpointError(f"未知のモデル種別です: {self.model_kind}")
        load_parameters(model, self.params)
        return model


def model_state(model: Module) -> Dict[str, np.ndarray]:
    """パラメータのスナップショット（float32、ディレクトリ順）"""
    return {name: p.values.astype(np.float32).copy() for name, p in model.named_parameters().items()}


def load_parameters(model: Module, params: Dict[str, np.ndarray]) -> None:
    """
    パラメータを上書き

    Raises:
        CheckpointError: 名前の過不足
        DimensionError: 形状不一致
    """
    named = model.named_parameters()
    missing = [n for n in named if n not in params]
    extra = [n for n in params if n not in named]
    if missing or extra:
        raise CheckpointError(f"パラメータ名が一致しません（不足: {missing[:5]}、余分: {extra[:5]}）")
    for name, param in named.items():
        values = params[name]
        if tuple(values.shape) != param.shape:
            raise DimensionError(
                f"パラメータ {name} の形状 {values.shape} がモデル {param.shape} と一致しません", axes=(name,)
            )
        param.values = np.array(values, dtype=param.values.dtype)
        param.zero_grad()


def save_checkpoint(ckpt: Checkpoint, path: Union[str, Path]) -> None:
    """チェックポイントを書き出す（同じ内容なら同じバイト列）"""
    arrays: Dict[str, np.ndarray] = dict(ckpt.params)
    if ckpt.optimizer:
        for name, (m, v) in ckpt.optimizer.items():
            arrays[OPTIM_M + name] = m
            arrays[OPTIM_V + name] = v
    directory = [{"name": name, "shape": list(np.shape(a))} for name, a in arrays.items()]
    header = {
        "format_version": ckpt.format_version,
        "model_kind": ckpt.model_kind,
        "unet_config": None if ckpt.unet_config is None else ckpt.unet_config.to_dict(),
        "norm_stats": {"gamma": ckpt.norm_stats.gamma, "vmax_gamma": ckpt.norm_stats.vmax_gamma},
        "topo_stats": {"mean": ckpt.topo_stats.mean, "std": ckpt.topo_stats.std},
        "schedule": dict(ckpt.schedule),
        "step": ckpt.step,
        "seed_lineage": dict(ckpt.seed_lineage),
        "run_config": dict(ckpt.run_config),
        "has_optimizer": bool(ckpt.optimizer),
        "directory": directory,
    }
    header_bytes = json.dumps(header, ensure_ascii=False, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for name in arrays:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes(order='C'))
    logger.info(f"チェックポイントを保存しました: {path}（step: {ckpt.step}、配列数: {len(arrays)}）")


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    チェックポイントを読み込む

    Raises:
        CheckpointError: マジック・バージョン不正、必須キー欠落、ペイロード不足
    """
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < CHECKPOINT_PREFIX.size:
        raise CheckpointError(f"チェックポイントが短すぎます: {path}")
    magic, version, header_len = CHECKPOINT_PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"マジックバイトが不正です（{magic!r}）: {path}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"未対応のバージョンです（{version}）: {path}")
    start = CHECKPOINT_PREFIX.size
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"ヘッダーを解析できません: {path}: {str(e)}") from e
    missing = [k for k in REQUIRED_KEYS if k not in header]
    if missing:
        raise CheckpointError(f"チェックポイントに必須キーがありません: {missing}")

    offset = start + header_len
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["directory"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(data):
            raise CheckpointError(f"ペイロードが不足しています（{entry['name']}）: {path}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset = end

    params = {n: a for n, a in arrays.items() if not n.startswith(("optim.m.", "optim.v."))}
    optimizer = None
    if header.get("has_optimizer"):
        optimizer = {n: (arrays[OPTIM_M + n], arrays[OPTIM_V + n]) for n in params if OPTIM_M + n in arrays}

    unet_config = header.get("unet_config")
    ckpt = Checkpoint(
        model_kind=header["model_kind"],
        params=params,
        norm_stats=NormStats(**header["norm_stats"]),
        schedule=header["schedule"],
        topo_stats=TopoStats(**header.get("topo_stats", {})),
        unet_config=None if unet_config is None else UNetConfig(**unet_config),
        optimizer=optimizer,
        step=int(header["step"]),
        seed_lineage=header.get("seed_lineage", {}),
        run_config=header.get("run_config", {}),
        format_version=int(header["format_version"]),
    )
    logger.info(f"チェックポイントを読み込みました: {path}（{ckpt.model_kind}、step: {ckpt.step}）")
    return ckpt
