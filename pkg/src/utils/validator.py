#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
設定検証ユーティリティ
"""

import os
from pathlib import Path
from typing import List, Optional, Tuple, Union

from .checkpoint import read_header
from .config import ConfigManager, RunConfig
from .errors import ConfigError


class RunConfigValidator:
    """実行設定の検証クラス"""

    def __init__(self, config_manager: ConfigManager, run_config: RunConfig, output_dir: Optional[Union[str, Path]] = None):
        self.config_manager = config_manager
        self.run_config = run_config
        self.output_dir = Path(output_dir or run_config.output_dir or config_manager.get_output_directory())

    def validate_dataset_root(self) -> Tuple[bool, str]:
        """データセットルートを検証"""
        root = self.run_config.data.dataset_root
        if not root:
            return False, "データセットルートが設定されていません (data.dataset_root または HARMONY_DATASET_ROOT)"
        if not Path(root).is_dir():
            return False, f"データセットルートが存在しません: {root}"
        return True, "データセットルートは正常です"

    def validate_checkpoint(self, path: Optional[str], label: str) -> Tuple[bool, str]:
        """チェックポイントを検証（ヘッダーの形式とバージョン）"""
        if not path:
            return False, f"{label}のチェックポイントが指定されていません"
        try:
            read_header(path)
        except ConfigError as e:
            return False, f"{label}: {e}"
        return True, f"{label}のチェックポイントは正常です"

    def validate_output_directory(self) -> Tuple[bool, str]:
        """出力ディレクトリを検証"""
        try:
            os.makedirs(self.output_dir, exist_ok=True)

            # 書き込み権限をテスト
            test_file = self.output_dir / "test_write.tmp"
            try:
                test_file.write_text("test")
                test_file.unlink()
                return True, "出力ディレクトリは正常です"
            except OSError:
                return False, f"出力ディレクトリに書き込み権限がありません: {self.output_dir}"

        except OSError as e:
            return False, f"出力ディレクトリの検証に失敗: {e}"

    def validate_all(
        self,
        require_dataset: bool = False,
        checkpoints: Tuple[str, ...] = (),
    ) -> Tuple[bool, List[str]]:
        """指定された項目をまとめて検証"""
        errors = []

        is_valid, config_errors = self.config_manager.validate_config()
        if not is_valid:
            errors.extend(config_errors)

        if require_dataset:
            ok, message = self.validate_dataset_root()
            if not ok:
                errors.append(message)

        for name in checkpoints:
            ok, message = self.validate_checkpoint(getattr(self.run_config.checkpoints, name), name)
            if not ok:
                errors.append(message)

        ok, message = self.validate_output_directory()
        if not ok:
            errors.append(f"出力ディレクトリ: {message}")

        return len(errors) == 0, errors

    def require(self, require_dataset: bool = False, checkpoints: Tuple[str, ...] = ()):
        """検証に失敗したら全項目を列挙してConfigErrorを送出"""
        ok, errors = self.validate_all(require_dataset, checkpoints)
        if not ok:
            raise ConfigError("設定の検証に失敗しました:\n  - " + "\n  - ".join(errors))
