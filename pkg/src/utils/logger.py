#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
ログシステム
"""

import csv
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Optional, Union


class LogLevel:
    """ログレベル定数"""
    DEBUG = logging.DEBUG
    INFO = logging.INFO
    WARNING = logging.WARNING
    ERROR = logging.ERROR
    CRITICAL = logging.CRITICAL


class AppLogger:
    """アプリケーションロガー"""

    def __init__(self, name: str = "LatentHarmonizer"):
        self.logger = logging.getLogger(name)
        self.logger.setLevel(logging.DEBUG)

        # 重複ハンドラーを防ぐ
        if not self.logger.handlers:
            self._setup_handlers()

    def _setup_handlers(self):
        """ハンドラーの設定"""
        # ファイルハンドラー
        log_dir = Path(os.getenv("LOG_DIRECTORY", "logs"))
        log_dir.mkdir(parents=True, exist_ok=True)

        log_file = log_dir / f"latent_harmonizer_{datetime.now().strftime('%Y%m%d')}.log"

        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)

        # コンソールハンドラー
        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.INFO)

        # フォーマッター
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )

        file_handler.setFormatter(formatter)
        console_handler.setFormatter(formatter)

        self.logger.addHandler(file_handler)
        self.logger.addHandler(console_handler)

    def set_console_level(self, level: int):
        """コンソール出力レベルを変更"""
        for handler in self.logger.handlers:
            if isinstance(handler, logging.StreamHandler) and not isinstance(handler, logging.FileHandler):
                handler.setLevel(level)

    def debug(self, message: str):
        """デバッグログ"""
        self.logger.debug(message)

    def info(self, message: str):
        """情報ログ"""
        self.logger.info(message)

    def warning(self, message: str):
        """警告ログ"""
        self.logger.warning(message)

    def error(self, message: str):
        """エラーログ"""
        self.logger.error(message)

    def critical(self, message: str):
        """重大エラーログ"""
        self.logger.critical(message)

    def exception(self, message: str):
        """例外ログ"""
        self.logger.exception(message)


class ScalarLogWriter:
    """スカラー値の追記型CSVログ"""

    def __init__(self, path: Union[str, Path], fieldnames: list[str]):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        self.path.parent.mkdir(parents=True, exist_ok=True)

        # 既存ファイルへの追記時はヘッダーを書かない
        if not self.path.exists() or self.path.stat().st_size == 0:
            with open(self.path, 'w', newline='', encoding='utf-8') as f:
                csv.DictWriter(f, fieldnames=self.fieldnames).writeheader()

    def write(self, row: dict):
        """1行追記"""
        with open(self.path, 'a', newline='', encoding='utf-8') as f:
            writer = csv.DictWriter(f, fieldnames=self.fieldnames, extrasaction='ignore')
            writer.writerow(row)

    def read(self) -> list[dict]:
        """全行を読み込み"""
        with open(self.path, newline='', encoding='utf-8') as f:
            return list(csv.DictReader(f))


# グローバルロガーインスタンス
app_logger: Optional[AppLogger] = None


def get_logger() -> AppLogger:
    """グローバルロガーを取得"""
    global app_logger
    if app_logger is None:
        app_logger = AppLogger()
    return app_logger
