#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
LatentHarmonizer - 潜在拡散による画像調和化
学習・推論・評価をサブコマンドで実行するコマンドラインアプリケーション
"""

import sys
from pathlib import Path

# プロジェクトルートをPythonパスに追加
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from src.cli.app import main


if __name__ == "__main__":
    sys.exit(main())
