"""
履歴ログサービス
CSV形式で学習・サンプリング・評価の実行履歴を記録
"""
import csv
from datetime import datetime
from pathlib import Path
from typing import Optional


class HistoryLogger:
    """履歴ログクラス"""

    def __init__(self, log_dir: Path):
        """
        初期化

        Args:
            log_dir: ログディレクトリのパス
        """
        self.log_dir = Path(log_dir)
        self.log_dir.mkdir(parents=True, exist_ok=True)

        # 各履歴ファイルのパス
        self.train_history_file = self.log_dir / "train_history.csv"
        self.sample_history_file = self.log_dir / "sample_history.csv"
        self.evaluate_history_file = self.log_dir / "evaluate_history.csv"

        # CSVヘッダー初期化
        self._init_csv_files()

    def _init_csv_files(self):
        """CSVファイルにヘッダーを作成（ファイルが存在しない場合）"""
        headers = {
            self.train_history_file: ['timestamp', 'model_kind', 'steps', 'final_loss', 'seed', 'output_dir'],
            self.sample_history_file: ['timestamp', 'checkpoint', 'n_samples', 'guidance_w', 'seed'],
            self.evaluate_history_file: ['timestamp', 'method', 'rmse', 'corr', 'bias', 'n'],
        }
        for path, header in headers.items():
            if not path.exists():
                with open(path, 'w', encoding='utf-8', newline='') as f:
                    csv.writer(f).writerow(header)

    @staticmethod
    def _timestamp() -> str:
        return datetime.now().strftime('%Y-%m-%d %H:%M:%S')

    def _append(self, path: Path, row: list) -> None:
        with open(path, 'a', encoding='utf-8', newline='') as f:
            csv.writer(f).writerow([self._timestamp()] + row)

    def log_training(self, model_kind: str, steps: int, final_loss: float, seed: int, output_dir: str):
        """
        学習を記録

        Args:
            model_kind: unet / srcnn
            steps: 学習ステップ数
            final_loss: 最終損失
            seed: 乱数シード
            output_dir: 出力ディレクトリ
        """
        self._append(self.train_history_file, [model_kind, steps, f"{final_loss:.6g}", seed, output_dir])

    def log_sampling(self, checkpoint: str, n_samples: int, guidance_w: float, seed: int):
        """サンプリングを記録"""
        self._append(self.sample_history_file, [checkpoint, n_samples, guidance_w, seed])

    def log_evaluation(self, method: str, rmse: float, corr: Optional[float], bias: float, n: int):
        """評価結果の1行を記録（corr が未定義なら空欄）"""
        corr_text = "" if corr is None else f"{corr:.6g}"
        self._append(self.evaluate_history_file, [method, f"{rmse:.6g}", corr_text, f"{bias:.6g}", n])
