#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
コマンドラインのエントリーポイント
"""

import argparse
import sys
from typing import Optional, Sequence

from ..utils.errors import HarmonyError
from ..utils.logger import LogLevel, get_logger
from . import commands

APP_NAME = "LatentHarmonizer"
APP_VERSION = "1.0.0"

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_USAGE = 2


def _add_common_arguments(parser: argparse.ArgumentParser):
    """全コマンド共通のフラグ"""
    parser.add_argument("--config", help="実行設定ファイル (JSON)")
    parser.add_argument("--preset", choices=["toy", "full"], help="既定値のプリセット")
    parser.add_argument("--output-dir", help="出力ディレクトリ")
    parser.add_argument("--dataset-root", help="データセットのルート")
    parser.add_argument("--device", help="計算デバイス (cpu, cuda など)")
    parser.add_argument("--seed", type=int, help="乱数シード")
    parser.add_argument("--steps", type=int, help="学習コマンドでは学習ステップ数、推論コマンドでは推論ステップ数")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="任意の設定値を上書き (例: train.batch_size=8)")
    parser.add_argument("-v", "--verbose", action="store_true", help="デバッグログをコンソールにも出力")


def _add_model_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--codec", help="コーデックのチェックポイント")
    parser.add_argument("--denoiser", help="デノイザーのチェックポイント")
    parser.add_argument("--refiner", help="補正ネットワークのチェックポイント")


def _add_inference_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--resolution", type=int, help="推論解像度 (例: 512, 1024)")
    parser.add_argument("--no-refine", action="store_true", help="第2段階の補正を行わない")
    parser.add_argument("--no-blend", action="store_true", help="背景を合成画像で置き換えない")
    parser.add_argument("--parallelism", type=int, help="同時に処理する画像数")


def build_parser() -> argparse.ArgumentParser:
    """引数パーサーを構築"""
    parser = argparse.ArgumentParser(prog=APP_NAME, description="潜在拡散による画像調和化")
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="合成データセットを生成")
    _add_common_arguments(p)
    p.add_argument("--count", type=int, help="生成する合成画像の数")
    p.set_defaults(handler=commands.cmd_make_synthetic)

    p = sub.add_parser("train-codec", help="トイコーデックを学習")
    _add_common_arguments(p)
    p.set_defaults(handler=commands.cmd_train_codec)

    p = sub.add_parser("codec-distortion", help="入力解像度ごとのコーデック往復誤差")
    _add_common_arguments(p)
    _add_model_arguments(p)
    p.set_defaults(handler=commands.cmd_codec_distortion)

    p = sub.add_parser("train-harmony", help="第1段階の拡散モデルを学習")
    _add_common_arguments(p)
    _add_model_arguments(p)
    p.add_argument("--resume", action="store_true", help="出力ディレクトリの学習状態から再開")
    p.set_defaults(handler=commands.cmd_train_harmony)

    p = sub.add_parser("train-refine", help="第2段階の補正ネットワークを学習")
    _add_common_arguments(p)
    _add_model_arguments(p)
    _add_inference_arguments(p)
    p.add_argument("--tuples", help="生成済みの学習組ディレクトリ")
    p.set_defaults(handler=commands.cmd_train_refine)

    p = sub.add_parser("infer", help="画像ディレクトリを調和化")
    _add_common_arguments(p)
    _add_model_arguments(p)
    _add_inference_arguments(p)
    p.add_argument("input_dir", help="合成画像のディレクトリ")
    p.add_argument("--mask-dir", help="マスクのディレクトリ (既定: <input_dir>/masks)")
    p.set_defaults(handler=commands.cmd_infer)

    p = sub.add_parser("evaluate", help="テスト分割で評価")
    _add_common_arguments(p)
    _add_model_arguments(p)
    _add_inference_arguments(p)
    p.add_argument("--pred-dir", help="評価する予測画像のディレクトリ")
    p.add_argument("--baseline", choices=["composite"], help="合成画像そのものを予測として評価")
    p.add_argument("--seeds", type=int, help="推論を繰り返すシード数")
    p.add_argument("--round", action="store_true", help="評価前に画素値を整数へ丸める")
    p.set_defaults(handler=commands.cmd_evaluate)

    p = sub.add_parser("ablate", help="推論解像度 × 補正有無の比較表")
    _add_common_arguments(p)
    _add_model_arguments(p)
    _add_inference_arguments(p)
    p.set_defaults(handler=commands.cmd_ablate)

    p = sub.add_parser("report-grid", help="比較用の画像グリッドを出力")
    _add_common_arguments(p)
    p.add_argument("--composites", required=True, help="合成画像のディレクトリ")
    p.add_argument("--masks", help="マスクのディレクトリ")
    p.add_argument("--outputs", action="append", required=True, help="出力画像のディレクトリ（複数可）")
    p.add_argument("--gts", required=True, help="正解画像のディレクトリ")
    p.add_argument("--size", type=int, default=256, help="各セルの一辺")
    p.add_argument("--output", help="出力PNGのパス")
    p.set_defaults(handler=commands.cmd_report_grid)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """メインエントリーポイント（終了コードを返す）"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE

    logger = get_logger()
    if args.verbose:
        logger.set_console_level(LogLevel.DEBUG)
    logger.info(f"{APP_NAME} v{APP_VERSION}: {args.command}")

    try:
        return args.handler(args)
    except HarmonyError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("中断されました")
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.exception(f"予期しないエラーが発生しました: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
