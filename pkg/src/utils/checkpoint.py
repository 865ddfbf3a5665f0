#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
重みファイルの保存・読み込み

safetensors形式にメタデータヘッダー（形式名・バージョン・種別・構成）を付与する。
"""

import json
from pathlib import Path
from typing import Any, Optional, Union

import torch
from safetensors import safe_open
from safetensors.torch import save_file

from .errors import ConfigError

CHECKPOINT_FORMAT = "latent-harmonizer"
CHECKPOINT_VERSION = "1"


def save_weights(
    path: Union[str, Path],
    tensors: dict[str, torch.Tensor],
    kind: str,
    config: dict[str, Any],
    extra: Optional[dict[str, Any]] = None,
):
    """名前付きテンソル群をヘッダー付きで保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    metadata = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
    }
    for key, value in (extra or {}).items():
        metadata[key] = json.dumps(value)

    # 共有ストレージを持つテンソルはsafetensorsで保存できないため複製する
    payload = {name: t.detach().cpu().contiguous().clone() for name, t in tensors.items()}
    save_file(payload, str(path), metadata=metadata)


def read_header(path: Union[str, Path]) -> dict[str, Any]:
    """ヘッダーを読み込んで検証"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"チェックポイントが見つかりません: {path}")

    with safe_open(str(path), framework="pt") as f:
        metadata = f.metadata() or {}

    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"未対応のチェックポイント形式です: {path}")
    if metadata.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"チェックポイントのバージョンが一致しません: {metadata.get('format_version')} (期待値 {CHECKPOINT_VERSION})"
        )

    header = {
        "kind": metadata["kind"],
        "config": json.loads(metadata["config"]),
    }
    for key, value in metadata.items():
        if key not in ("format", "format_version", "kind", "config"):
            header[key] = json.loads(value)
    return header


def load_weights(path: Union[str, Path], kind: str) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    """テンソル群とヘッダーを読み込み"""
    header = read_header(path)
    if header["kind"] != kind:
        raise ConfigError(f"チェックポイント種別が異なります: {header['kind']} (期待値 {kind}): {path}")

    tensors = {}
    with safe_open(str(path), framework="pt") as f:
        for name in f.keys():
            tensors[name] = f.get_tensor(name)
    return tensors, header
