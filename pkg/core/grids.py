"""
グリッドデータ
降水量・地形グリッド、ファイル形式、8倍の学習ペア作成、合成データ生成
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from config import Config
from core.layers import bilinear_resize
from utils.errors import (
    ConfigurationError,
    DimensionError,
    DimensionOverflowError,
    DomainError,
    FieldFormatError,
    TruncatedFieldError,
)
from utils.logger import logger

FIELD_MAGIC = b"PFLD"
FIELD_VERSION = 1
FIELD_HEADER = struct.Struct("<4sIII")
MAX_FIELD_PIXELS = 1 << 28

SPLITS = ("train", "eval")

# 合成データ生成の固定定数
SYNTH_BUMPS = 4
SYNTH_BLUR_PASSES = 3
SYNTH_STD = 1.2
SYNTH_TILT = 0.5


# ==================== データ型 ====================

@dataclass
class PrecipField:
    """降水量グリッド（mm/day、非負・有限、行優先）"""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DimensionError(f"PrecipFieldは2次元である必要があります: {self.values.shape}",
                                 axes=("height", "width"))
        if not np.all(np.isfinite(self.values)):
            raise DomainError("降水量に非有限値が含まれています")
        if np.any(self.values < 0):
            raise DomainError(f"降水量に負値が含まれています（最小値: {float(self.values.min())}）")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class TopoField:
    """標高グリッド（m、有限）"""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DimensionError(f"TopoFieldは2次元である必要があります: {self.values.shape}",
                                 axes=("height", "width"))
        if not np.all(np.isfinite(self.values)):
            raise DomainError("標高に非有限値が含まれています")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SamplePair:
    """HR (S×S)・LR (S/8×S/8)・地形 (S×S) の組"""

    hr: PrecipField
    lr: PrecipField
    topo: TopoField
    id: str

    def __post_init__(self):
        factor = Config.DOWNSCALE_FACTOR
        if (self.hr.height, self.hr.width) != (self.lr.height * factor, self.lr.width * factor):
            raise DimensionError(
                f"HR {self.hr.values.shape} がLR {self.lr.values.shape} の{factor}倍ではありません",
                axes=("hr", "lr"),
            )
        if self.topo.values.shape != self.hr.values.shape:
            raise DimensionError(
                f"地形 {self.topo.values.shape} がHR {self.hr.values.shape} と一致しません",
                axes=("topo", "hr"),
            )


@dataclass
class ManifestEntry:
    id: str
    split: str
    hr_path: str
    topo_path: str


@dataclass
class DatasetManifest:
    """
    データセット目録

    パスは目録ファイルのあるディレクトリからの相対パスで保存する。
    """

    entries: List[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    root: Path = Path(".")

    def split(self, name: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, relative: str) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    def load_pair(self, entry: ManifestEntry) -> SamplePair:
        hr = load_field(self.resolve(entry.hr_path))
        topo = load_field(self.resolve(entry.topo_path))
        return make_pair(PrecipField(hr), TopoField(topo), entry.id)


# ==================== フィールドファイル ====================

def save_field(field_or_values: Union[PrecipField, TopoField, np.ndarray], path: Path) -> None:
    """
    フィールドを保存（リトルエンディアン: "PFLD" + version + H + W + float32 ペイロード）

    Args:
        field_or_values: PrecipField / TopoField / 2次元配列
        path: 保存先
    """
    values = getattr(field_or_values, "values", field_or_values)
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise DimensionError(f"保存できるのは2次元グリッドのみです: {values.shape}", axes=("height", "width"))
    height, width = values.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(FIELD_HEADER.pack(FIELD_MAGIC, FIELD_VERSION, height, width))
        f.write(values.tobytes(order='C'))


def load_field(path: Path) -> np.ndarray:
    """
    フィールドを読み込む

    Returns:
        float32の2次元配列

    Raises:
        FieldFormatError: マジック・バージョン不正
        TruncatedFieldError: ヘッダー・ペイロード不足
        DimensionOverflowError: 次元が0または上限超過
    """
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < FIELD_HEADER.size:
        raise TruncatedFieldError(f"ヘッダーが不足しています（{len(data)}バイト）: {path}")
    magic, version, height, width = FIELD_HEADER.unpack_from(data)
    if magic != FIELD_MAGIC:
        raise FieldFormatError(f"マジックバイトが不正です（{magic!r}）: {path}")
    if version != FIELD_VERSION:
        raise FieldFormatError(f"未対応のバージョンです（{version}）: {path}")
    if height == 0 or width == 0 or height * width > MAX_FIELD_PIXELS:
        raise DimensionOverflowError(f"次元が不正です（{height}x{width}）: {path}")
    expected = FIELD_HEADER.size + 4 * height * width
    if len(data) < expected:
        raise TruncatedFieldError(f"ペイロードが不足しています（期待: {expected}、実際: {len(data)}）: {path}")
    values = np.frombuffer(data, dtype="<f4", count=height * width, offset=FIELD_HEADER.size)
    return values.reshape(height, width).astype(np.float32)


# ==================== 目録 ====================

def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    """``<id>\\t<split>\\t<hr-path>\\t<topo-path>`` の1行1エントリ（先頭にseedのコメント行）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# seed={manifest.seed}"]
    lines += [f"{e.id}\t{e.split}\t{e.hr_path}\t{e.topo_path}" for e in manifest.entries]
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write("\n".join(lines) + "\n")


def load_manifest(path: Path) -> DatasetManifest:
    """
    目録を読み込む

    Raises:
        ConfigurationError: 行の書式不正・未知のsplit
    """
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("seed="):
                    manifest.seed = int(line[1:].strip()[len("seed="):])
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ConfigurationError(f"{path}:{lineno} の列数が4ではありません: {line!r}")
            if parts[1] not in SPLITS:
                raise ConfigurationError(f"{path}:{lineno} のsplitが不正です: {parts[1]!r}")
            manifest.entries.append(ManifestEntry(*parts))

    from utils.validators import validate_manifest
    validate_manifest(manifest)
    return manifest


# ==================== ペア作成 ====================

def make_pair(hr: PrecipField, topo: TopoField, pair_id: str = "") -> SamplePair:
    """
    HRから8倍双線形ダウンサンプルでLRを作成

    Raises:
        ConfigurationError: HRの次元が8で割り切れない
        DimensionError: 地形とHRの次元が異なる
    """
    factor = Config.DOWNSCALE_FACTOR
    if hr.height % factor or hr.width % factor:
        raise ConfigurationError(
            f"HRの次元 {hr.values.shape} が{factor}で割り切れません", key="data.size"
        )
    if topo.values.shape != hr.values.shape:
        raise DimensionError(
            f"地形 {topo.values.shape} がHR {hr.values.shape} と一致しません", axes=("topo", "hr")
        )
    lr = bilinear_resize(hr.values, hr.height // factor, hr.width // factor)
    return SamplePair(hr=hr, lr=PrecipField(np.maximum(lr, 0.0)), topo=topo, id=pair_id)


# ==================== 合成データ ====================

def _box_blur_axis(values: np.ndarray, radius: int, axis: int) -> np.ndarray:
    pad = [(0, 0)] * values.ndim
    pad[axis] = (radius + 1, radius)
    padded = np.pad(values, pad, mode="edge")
    csum = np.cumsum(padded, axis=axis)
    n = values.shape[axis]
    upper = np.take(csum, np.arange(2 * radius + 1, 2 * radius + 1 + n), axis=axis)
    lower = np.take(csum, np.arange(0, n), axis=axis)
    return (upper - lower) / (2 * radius + 1)


def box_blur(values: np.ndarray, radius: int, passes: int = SYNTH_BLUR_PASSES) -> np.ndarray:
    """分離型ボックスブラー（端は複製パディング）"""
    out = values.astype(np.float64)
    if radius < 1:
        return out
    for _ in range(passes):
        out = _box_blur_axis(out, radius, axis=0)
        out = _box_blur_axis(out, radius, axis=1)
    return out


def synthetic_topography(rng: np.random.Generator, size: int) -> np.ndarray:
    """ガウス型の山を4つ重ねた標高（m）"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    topo = np.zeros((size, size), dtype=np.float64)
    for _ in range(SYNTH_BUMPS):
        cy, cx = rng.uniform(0, size, size=2)
        width = rng.uniform(size / 8, size / 3)
        height = rng.uniform(200.0, 1500.0)
        topo += height * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
    return topo


def synthetic_precipitation(rng: np.random.Generator, topo_norm: np.ndarray) -> np.ndarray:
    """
    地形相関のある裾の重い降水場

    g = 平滑化ノイズ（std 1.2）+ 0.5·正規化地形、降水 = max(exp(g) − 1, 0)
    """
    size = topo_norm.shape[0]
    noise = rng.standard_normal(topo_norm.shape)
    g = box_blur(noise, max(1, size // 8))
    g = (g - g.mean()) / max(float(g.std()), 1e-12) * SYNTH_STD
    g = g + SYNTH_TILT * topo_norm
    return np.maximum(np.exp(g) - 1.0, 0.0)


def gen_synthetic_dataset(
    seed: int,
    count: int,
    size: int,
    out_dir: Path,
    eval_count: Optional[int] = None
) -> DatasetManifest:
    """
    合成データセットを生成して目録とファイルを書き出す

    Args:
        seed: 乱数シード（同一シードでバイト単位で同一の出力）
        count: 学習サンプル数
        size: HRの一辺（8の倍数）
        out_dir: 出力ディレクトリ
        eval_count: 評価サンプル数（Noneの場合は count // 8、最低1）

    Returns:
        書き出した目録

    Raises:
        ConfigurationError: size が8で割り切れない・count < 1
    """
    if size < Config.DOWNSCALE_FACTOR or size % Config.DOWNSCALE_FACTOR:
        raise ConfigurationError(f"sizeは{Config.DOWNSCALE_FACTOR}の倍数である必要があります: {size}", key="data.size")
    if count < 1:
        raise ConfigurationError(f"countは1以上である必要があります: {count}", key="data.count")
    if eval_count is None:
        eval_count = max(1, count // 8)
    if eval_count < 0:
        raise ConfigurationError(f"eval_countは0以上である必要があります: {eval_count}", key="data.eval_count")

    out_dir = Path(out_dir)
    logger.info(f"合成データセットを生成します（seed: {seed}、学習: {count}、評価: {eval_count}、size: {size}）")

    rng = np.random.default_rng(seed)
    topo = synthetic_topography(rng, size)
    topo_norm = (topo - topo.mean()) / max(float(topo.std()), 1e-12)
    save_field(topo, out_dir / "topo.pfld")

    manifest = DatasetManifest(seed=seed, root=out_dir)
    total = count + eval_count
    for index in range(total):
        split = "train" if index < count else "eval"
        sample_id = f"s{index:05d}"
        precip = synthetic_precipitation(rng, topo_norm)
        rel = f"fields/{sample_id}.pfld"
        save_field(precip, out_dir / rel)
        manifest.entries.append(ManifestEntry(sample_id, split, rel, "topo.pfld"))

    save_manifest(manifest, out_dir / "manifest.tsv")
    logger.info(f"合成データセットの生成が完了しました: {out_dir / 'manifest.tsv'}")
    return manifest


# ==================== PGM ====================

def export_pgm(field_or_values: Union[PrecipField, TopoField, np.ndarray], path: Path, vmax: float) -> None:
    """
    8bitバイナリPGM (P5) を書き出す（画素 = round(255·min(v/vmax, 1))、四捨五入は切り上げ）

    Raises:
        ConfigurationError: vmax <= 0
        OSError: 書き込み失敗
    """
    if not vmax > 0:
        raise ConfigurationError(f"vmaxは正である必要があります: {vmax}", key="vmax")
    values = np.asarray(getattr(field_or_values, "values", field_or_values), dtype=np.float64)
    scaled = np.clip(values / vmax, 0.0, 1.0) * 255.0
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    height, width = pixels.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'wb') as f:
            f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
            f.write(pixels.tobytes(order='C'))
    except OSError as e:
        logger.error(f"PGMの書き込みに失敗しました: {path}: {str(e)}")
        raise


def pairs_by_id(manifest: DatasetManifest, split: str) -> Dict[str, SamplePair]:
    """splitの全ペアを読み込む（id順）"""
    return {e.id: manifest.load_pair(e) for e in sorted(manifest.split(split), key=lambda e: e.id)}
