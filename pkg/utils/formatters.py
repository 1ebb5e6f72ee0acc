"""
フォーマット変換ユーティリティ
損失ログ・結果表のCSV出力、Markdownレポート生成
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from utils.logger import logger

LOSS_LOG_COLUMNS = ["step", "loss", "lr"]
RESULTS_COLUMNS = ["method", "rmse", "corr", "bias", "n"]
# 結果表の任意列（画像ごとの相関の平均・LR整合残差・ガイダンス重み）
RESULTS_EXTRA_COLUMNS = ["mean_sample_corr", "lr_residual", "w"]


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # 同じ内容なら同じバイト列になるよう、書式と改行を固定
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n", na_rep="")


def write_loss_log(records: Sequence[Dict[str, float]], path: Path) -> pd.DataFrame:
    """
    損失ログ ``step,loss,lr`` を書き出す

    Args:
        records: {"step", "loss", "lr"} の辞書列
        path: 出力先

    Returns:
        書き出したDataFrame
    """
    df = pd.DataFrame(list(records), columns=LOSS_LOG_COLUMNS)
    if not df.empty:
        df["step"] = df["step"].astype(int)
    _write_csv(df, path)
    logger.info(f"損失ログを書き出しました: {path}（{len(df)}行）")
    return df


def read_loss_log(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def results_frame(rows: Sequence[Dict[str, object]]) -> pd.DataFrame:
    """
    結果表のDataFrameを作る

    基本列は ``method,rmse,corr,bias,n``。行に mean_sample_corr / lr_residual / w があれば末尾に追加する。
    """
    extra = [c for c in RESULTS_EXTRA_COLUMNS if any(c in row for row in rows)]
    df = pd.DataFrame(list(rows), columns=RESULTS_COLUMNS + extra)
    if not df.empty:
        df["n"] = df["n"].astype(int)
    return df


def write_results(rows: Sequence[Dict[str, object]], path: Path) -> pd.DataFrame:
    """結果表CSVを書き出す（corr が未定義の行は空欄）"""
    df = results_frame(rows)
    _write_csv(df, path)
    logger.info(f"結果表を書き出しました: {path}（{len(df)}行）")
    return df


def _cell(value: object) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "N/A"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def results_to_markdown(rows: Sequence[Dict[str, object]], title: Optional[str] = None) -> str:
    """
    結果表をMarkdown形式に変換

    Args:
        rows: 結果行
        title: 見出し（Noneの場合は省略）

    Returns:
        Markdown文字列
    """
    df = results_frame(rows)
    md: List[str] = []
    if title:
        md.append(f"## {title}\n\n")
    md.append("| " + " | ".join(df.columns) + " |\n")
    md.append("|" + "---|" * len(df.columns) + "\n")
    for record in df.to_dict(orient="records"):
        md.append("| " + " | ".join(_cell(record[c]) for c in df.columns) + " |\n")

    logger.info(f"{len(df)}行の結果表をMarkdown形式に変換しました")
    return ''.join(md)
