"""
降水ダウンスケーリング（条件付き拡散モデル）
コマンドラインのエントリーポイント

    python main.py gen-data --seed 7 --count 512 --size 32 --out data/
    python main.py train --config configs/desk_scale.cfg --set guidance.w=0
    python main.py sample --checkpoint runs/default/checkpoint.rsck
    python main.py evaluate --checkpoint none --baseline bilinear
    python main.py grad-check

終了コード: 0 成功、1 使い方の誤り、2 実行時エラー
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from config import Config, RunConfig
from core.checkpoint import load_checkpoint
from core.gradcheck import run_gradient_suite, training_loss_gradient_check, unet_gradient_check
from services.dataset_service import DatasetService
from services.evaluation_service import EvaluationRequest, EvaluationService
from services.sampling_service import SamplingService
from services.training_service import TrainingService
from utils.errors import ConfigurationError, UsageError
from utils.history_logger import HistoryLogger
from utils.logger import attach_run_log, detach_run_log, logger, set_console_level

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

# 層単位の勾配チェックの許容誤差（64bit）
LAYER_TOLERANCE = 1e-6
UNET_TOLERANCE = 1e-4
# training_loss の勾配（32bitの解析値を64bitの差分と比較）
TRAINING_LOSS_TOLERANCE = 1e-3


class CliParser(argparse.ArgumentParser):
    """argparse のエラーで終了せず UsageError を送出するパーサー"""

    def error(self, message):
        raise UsageError(message)


def _optional_path(value: str) -> Optional[Path]:
    return None if value.lower() == "none" else Path(value)


def _weights(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"カンマ区切りの数値で指定してください: {value!r}") from e


def build_parser() -> CliParser:
    parser = CliParser(prog="main.py", description="条件付き拡散モデルによる降水ダウンスケーリング")
    common = CliParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help=f"設定ファイル（key = value 形式、既定: {Config.DEFAULT_RUN_CONFIG.name}）")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="設定の上書き（複数指定可）")
    common.add_argument("--seed", type=int, default=None, help="乱数シード（seed キーを上書き）")
    common.add_argument("--quiet", action="store_true", help="コンソールには警告以上のみ出力")

    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    p = sub.add_parser("gen-data", parents=[common], help="合成データセットを生成")
    p.add_argument("--count", type=int, default=None, help="学習サンプル数")
    p.add_argument("--eval-count", type=int, default=None, help="評価サンプル数（既定: count/8）")
    p.add_argument("--size", type=int, default=None, help="HRの一辺（8の倍数）")
    p.add_argument("--out", type=Path, default=None, help="出力ディレクトリ（data.dir を上書き）")

    p = sub.add_parser("train", parents=[common], help="U-Net / SRCNN を学習")
    p.add_argument("--resume", type=Path, default=None, help="再開するチェックポイント")

    p = sub.add_parser("sample", parents=[common], help="評価splitの予測を生成")
    p.add_argument("--checkpoint", type=Path, required=True, help="U-Netのチェックポイント")
    p.add_argument("--limit", type=int, default=None, help="先頭から生成する件数")
    p.add_argument("--out", type=Path, default=None, help="出力ディレクトリ（output_dir を上書き）")

    p = sub.add_parser("evaluate", parents=[common], help="評価して結果表を出力")
    p.add_argument("--checkpoint", type=_optional_path, default=None,
                   help="U-Net / SRCNN のチェックポイント（none でモデルなし）")
    p.add_argument("--baseline", choices=["bilinear", "none"], default="bilinear", help="補間ベースライン")
    p.add_argument("--srcnn-checkpoint", type=Path, default=None, help="SRCNNのチェックポイント")
    p.add_argument("--no-topo-checkpoint", type=Path, default=None, help="地形なしU-Netのチェックポイント")
    p.add_argument("--ablation", action="store_true", help="BGS・地形の有無の組み合わせを評価")
    p.add_argument("--sweep-w", type=_weights, default=[], metavar="W1,W2,...", help="ガイダンス重みのスイープ")
    p.add_argument("--limit", type=int, default=None, help="先頭から評価する件数")
    p.add_argument("--out", type=Path, default=None, help="出力ディレクトリ（output_dir を上書き）")

    p = sub.add_parser("grad-check", parents=[common], help="解析的勾配を差分と比較")
    p.add_argument("--probes", type=int, default=32, help="チェックごとの比較座標数")
    p.add_argument("--skip-unet", action="store_true", help="U-Net全体のチェックを省略")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """
    設定ファイル → --set → 個別オプションの順に適用して検証

    Raises:
        ConfigurationError: 未知のキー・不正な値
    """
    if args.config is not None:
        config = RunConfig.from_file(args.config)
    elif Config.DEFAULT_RUN_CONFIG.exists():
        config = RunConfig.from_file(Config.DEFAULT_RUN_CONFIG)
    else:
        config = RunConfig()
    config.apply_overrides(args.overrides)
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "count", None) is not None:
        config.count = args.count
        if args.eval_count is None:
            config.eval_count = max(1, args.count // 8)
    if getattr(args, "eval_count", None) is not None:
        config.eval_count = args.eval_count
    if getattr(args, "size", None) is not None:
        config.size = args.size
    if getattr(args, "out", None) is not None:
        if args.command == "gen-data":
            config.data_dir = str(args.out)
        else:
            config.output_dir = str(args.out)
    return config.validate()


# ==================== サブコマンド ====================

def cmd_gen_data(args, config: RunConfig) -> int:
    DatasetService(config).generate()
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    history = HistoryLogger(Config.LOG_DIR)
    TrainingService(config, history=history).train(resume=args.resume)
    return EXIT_OK


def cmd_sample(args, config: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    sampler = SamplingService(ckpt, config)
    dataset = DatasetService(config)
    manifest = dataset.load_manifest()
    data = dataset.prepare_split(manifest, "eval", ckpt.norm_stats, ckpt.topo_stats).head(args.limit)
    preds = sampler.predict(data, sampler.guidance())
    sampler.write_outputs(data.ids, preds, config.output_path, write_pgm=config.write_pgm)
    HistoryLogger(Config.LOG_DIR).log_sampling(str(args.checkpoint), len(preds), config.guidance_w, config.seed)
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig) -> int:
    request = EvaluationRequest(
        checkpoint=args.checkpoint,
        baseline=None if args.baseline == "none" else args.baseline,
        srcnn_checkpoint=args.srcnn_checkpoint,
        no_topo_checkpoint=args.no_topo_checkpoint,
        ablation=args.ablation,
        sweep_w=args.sweep_w,
        limit=args.limit,
    )
    EvaluationService(config, history=HistoryLogger(Config.LOG_DIR)).run(request)
    return EXIT_OK


def cmd_grad_check(args, config: RunConfig) -> int:
    results = run_gradient_suite(seed=config.seed, probe_count=args.probes)
    failed = [name for name, err in results.items() if err > LAYER_TOLERANCE]
    if not args.skip_unet:
        unet = unet_gradient_check(seed=config.seed, probe_count=min(args.probes, 16))
        for name, err in unet.items():
            logger.info(f"  - {name}: {err:.3e}")
        failed += [name for name, err in unet.items() if err > UNET_TOLERANCE]
        if training_loss_gradient_check(seed=config.seed) > TRAINING_LOSS_TOLERANCE:
            failed.append("training_loss")
    if failed:
        logger.error(f"勾配チェックに失敗しました: {failed}")
        return EXIT_RUNTIME
    logger.info("勾配チェックに合格しました")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
}
# 出力ディレクトリに run.log を残すサブコマンド
RUN_LOG_COMMANDS = ("train", "sample", "evaluate")


def main(argv: Optional[List[str]] = None) -> int:
    """
    CLIを実行

    Returns:
        終了コード（0 成功、1 使い方の誤り、2 実行時エラー）
    """
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("サブコマンドを指定してください（gen-data / train / sample / evaluate / grad-check）")
        if args.quiet:
            set_console_level("WARNING")
        config = load_run_config(args)
        logger.debug(f"システム設定: {Config.get_summary()}")
    except (UsageError, ConfigurationError) as e:
        logger.error(f"使い方の誤り: {str(e)}")
        return EXIT_USAGE
    except OSError as e:
        logger.error(f"設定ファイルを読み込めません: {str(e)}")
        return EXIT_USAGE

    run_log = None
    try:
        if args.command in RUN_LOG_COMMANDS:
            run_log = attach_run_log(config.output_path)
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        logger.error(f"使い方の誤り: {str(e)}")
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} に失敗しました: {type(e).__name__}: {str(e)}")
        return EXIT_RUNTIME
    finally:
        detach_run_log(run_log)


if __name__ == "__main__":
    sys.exit(main())
