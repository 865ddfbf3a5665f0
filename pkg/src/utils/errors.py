#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
例外クラス定義
"""

from typing import Any, Optional


class HarmonyError(Exception):
    """アプリケーション例外の基底クラス"""

    exit_code = 1


class ParameterError(HarmonyError, ValueError):
    """引数・形状・範囲の不正"""

    exit_code = 2


class ConfigError(HarmonyError):
    """設定ファイル・環境設定の不正"""

    exit_code = 2


class ValidationError(HarmonyError, ValueError):
    """データ値の不正（空マスク、非二値マスクなど）"""

    exit_code = 3


class DataLoadError(HarmonyError):
    """データセット読み込みエラー"""

    exit_code = 3

    def __init__(self, message: str, offenders: Optional[list[str]] = None):
        self.offenders = list(offenders or [])
        if self.offenders:
            listed = "\n".join(f"  - {item}" for item in self.offenders[:50])
            more = len(self.offenders) - 50
            if more > 0:
                listed += f"\n  ... 他 {more} 件"
            message = f"{message}\n{listed}"
        super().__init__(message)


class AggregationError(HarmonyError):
    """評価集計エラー"""

    exit_code = 3


class TrainingError(HarmonyError):
    """学習中の数値異常"""

    exit_code = 4

    def __init__(self, message: str, diagnostics: Optional[dict[str, Any]] = None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)
