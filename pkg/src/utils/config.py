#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
設定管理

環境変数（.env）と、実験ごとの実行設定ファイル（JSON、バージョン付き）を扱う。
"""

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional, Union

from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from ..core.dataset import SyntheticConfig
from ..core.denoiser import DEFAULT_PRETRAINED_MODEL, DenoiserConfig
from ..core.latent_codec import CodecConfig
from ..core.refinement import RefinerConfig
from ..core.schedule_sampler import SamplerConfig, ScheduleConfig
from ..core.training import TrainConfig
from .errors import ConfigError

RUN_CONFIG_VERSION = 1
RUN_CONFIG_FILE = "run_config.json"

PROJECT_ROOT = Path(__file__).parent.parent.parent


class ConfigManager:
    """環境変数による設定管理クラス"""

    def __init__(self):
        # .envファイルを読み込み
        self._load_env_file()

        # デフォルト値
        self._defaults = {
            "OUTPUT_DIRECTORY": "outputs",
            "LOG_DIRECTORY": "logs",
            "HARMONY_DEVICE": "cpu",
            "HARMONY_PRETRAINED_MODEL": DEFAULT_PRETRAINED_MODEL,
        }

    def _load_env_file(self):
        """環境変数ファイルを読み込み"""
        env_file = PROJECT_ROOT / ".env"
        if env_file.exists():
            load_dotenv(env_file)
        else:
            # 見つからない場合は自動検索
            load_dotenv(find_dotenv(usecwd=True))

    def _resolve(self, path: str) -> str:
        if not os.path.isabs(path):
            return str(PROJECT_ROOT / path)
        return path

    def get_dataset_root(self) -> Optional[str]:
        """データセットルートの上書き値を取得"""
        return os.getenv("HARMONY_DATASET_ROOT")

    def get_output_directory(self) -> str:
        """出力ディレクトリを取得（相対パスはプロジェクトルート基準）"""
        return self._resolve(os.getenv("OUTPUT_DIRECTORY", self._defaults["OUTPUT_DIRECTORY"]))

    def get_log_directory(self) -> str:
        """ログディレクトリを取得"""
        return self._resolve(os.getenv("LOG_DIRECTORY", self._defaults["LOG_DIRECTORY"]))

    def get_device(self) -> str:
        """計算デバイスを取得"""
        return os.getenv("HARMONY_DEVICE", self._defaults["HARMONY_DEVICE"])

    def get_pretrained_model(self) -> str:
        """full プリセットで使う公開チェックポイントID"""
        return os.getenv("HARMONY_PRETRAINED_MODEL", self._defaults["HARMONY_PRETRAINED_MODEL"])

    def get_all_settings(self) -> dict:
        """すべての設定を辞書形式で取得"""
        return {
            'dataset_root': self.get_dataset_root(),
            'output_directory': self.get_output_directory(),
            'log_directory': self.get_log_directory(),
            'device': self.get_device(),
            'pretrained_model': self.get_pretrained_model(),
        }

    def validate_config(self) -> tuple[bool, list[str]]:
        """設定の妥当性を検証"""
        errors = []

        dataset_root = self.get_dataset_root()
        if dataset_root and not Path(dataset_root).is_dir():
            errors.append(f"HARMONY_DATASET_ROOT が存在しません: {dataset_root}")

        try:
            os.makedirs(self.get_output_directory(), exist_ok=True)
        except OSError as e:
            errors.append(f"出力ディレクトリの作成に失敗しました: {e}")

        return len(errors) == 0, errors


# ---------------------------------------------------------------------------
# 実行設定
# ---------------------------------------------------------------------------

class DataConfig(BaseModel):
    """データ設定"""

    model_config = ConfigDict(extra="forbid")

    dataset_root: Optional[str] = None
    max_train_samples: Optional[int] = Field(None, ge=1)
    max_test_samples: Optional[int] = Field(None, ge=1)
    synthetic_count: int = Field(2200, ge=1)
    synthetic_seed: int = 0
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)


class InferenceConfig(BaseModel):
    """推論設定"""

    model_config = ConfigDict(extra="forbid")

    inference_resolution: int = 1024
    output_resolution: int = 256
    blend_background: bool = True
    refine: bool = True
    parallelism: int = Field(1, ge=1)
    ablation_resolutions: list[int] = Field(default_factory=lambda: [512, 1024])


class EvaluationConfig(BaseModel):
    """評価設定"""

    model_config = ConfigDict(extra="forbid")

    round_to_uint8: bool = False
    num_seeds: int = Field(1, ge=1)
    baseline: Optional[Literal["composite"]] = None
    distortion_resolutions: list[int] = Field(default_factory=lambda: [256, 512])
    distortion_images: int = Field(50, ge=1)


class CheckpointPaths(BaseModel):
    """チェックポイントの場所"""

    model_config = ConfigDict(extra="forbid")

    codec: Optional[str] = None
    denoiser: Optional[str] = None
    refiner: Optional[str] = None
    refine_tuples: Optional[str] = None


class RunConfig(BaseModel):
    """実行設定（未知のキーは拒否）"""

    model_config = ConfigDict(extra="forbid")

    version: int = RUN_CONFIG_VERSION
    preset: Literal["toy", "full"] = "toy"
    device: str = "cpu"
    output_dir: Optional[str] = None
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    refine: RefinerConfig = Field(default_factory=RefinerConfig)
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    checkpoints: CheckpointPaths = Field(default_factory=CheckpointPaths)

    def dump(self, output_dir: Union[str, Path]) -> Path:
        """出力ディレクトリへ run_config.json を書き出し"""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        path = output_dir / RUN_CONFIG_FILE
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, ensure_ascii=False), encoding="utf-8")
        return path


def preset_defaults(preset: str, pretrained_model: str = DEFAULT_PRETRAINED_MODEL) -> dict[str, Any]:
    """プリセットの既定値"""
    if preset == "toy":
        return {
            "preset": "toy",
            "train": {
                "batch_size": 16,
                "lr_phase1": 1e-3,
                "phase1_steps": 1500,
                "lr_phase2": 1e-4,
                "phase2_steps": 500,
                "ema_decay": 0.999,
                "train_resolution": 64,
                "checkpoint_every": 500,
            },
            "refine": {"base_channels": 16, "train_steps": 2000, "batch_size": 8},
            "inference": {"inference_resolution": 128, "ablation_resolutions": [64, 128]},
        }
    if preset == "full":
        return {
            "preset": "full",
            "codec": {
                "block_out_channels": [128, 256, 512, 512],
                "layers_per_block": 2,
                "norm_num_groups": 32,
                "mid_block_attention": True,
                "image_size": 512,
                "pretrained": pretrained_model,
            },
            "denoiser": DenoiserConfig.full(pretrained_model).model_dump(),
        }
    raise ConfigError(f"未知のプリセットです: {preset}")


def _deep_merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _expand_dotted(overrides: dict[str, Any]) -> dict[str, Any]:
    """{"sampler.seed": 3} → {"sampler": {"seed": 3}}"""
    nested: dict[str, Any] = {}
    for dotted, value in overrides.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return nested


def read_config_file(path: Union[str, Path]) -> dict[str, Any]:
    """設定ファイル（JSON）を読み込み"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"設定ファイルが見つかりません: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"設定ファイルのJSONが不正です: {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"設定ファイルの最上位はオブジェクトである必要があります: {path}")

    version = data.get("version", RUN_CONFIG_VERSION)
    if version != RUN_CONFIG_VERSION:
        raise ConfigError(f"設定ファイルのバージョンが一致しません: {version} (期待値 {RUN_CONFIG_VERSION})")
    return data


def _tie_denoiser_steps(merged: dict[str, Any], explicit: dict[str, Any]) -> dict[str, Any]:
    """デノイザーが受け付けるタイムステップ範囲をスケジュールの T に合わせる"""
    schedule, denoiser = merged.get("schedule", {}), explicit.get("denoiser")
    if not isinstance(schedule, dict) or not isinstance(merged.get("denoiser", {}), dict):
        return merged
    steps = schedule.get("num_train_steps", ScheduleConfig().num_train_steps)
    pinned = denoiser.get("num_train_steps") if isinstance(denoiser, dict) else None
    if pinned is not None and pinned != steps:
        raise ConfigError(
            f"denoiser.num_train_steps ({pinned}) と schedule.num_train_steps ({steps}) が一致しません"
        )
    return _deep_merge(merged, {"denoiser": {"num_train_steps": steps}})


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[dict[str, Any]] = None,
    config_manager: Optional[ConfigManager] = None,
) -> RunConfig:
    """プリセット → 設定ファイル → フラグの順に適用（後勝ち）"""
    config_manager = config_manager or ConfigManager()
    file_values = read_config_file(path) if path else {}
    preset = preset or file_values.get("preset", "toy")

    merged = preset_defaults(preset, config_manager.get_pretrained_model())
    merged = _deep_merge(merged, {"device": config_manager.get_device()})
    merged = _deep_merge(merged, file_values)
    merged = _deep_merge(merged, {"preset": preset})
    # 環境変数のデータセットルートはファイルより優先
    env_root = config_manager.get_dataset_root()
    if env_root:
        merged = _deep_merge(merged, {"data": {"dataset_root": env_root}})
    explicit = _deep_merge(file_values, _expand_dotted(overrides or {}))
    merged = _deep_merge(merged, _expand_dotted(overrides or {}))
    merged = _tie_denoiser_steps(merged, explicit)

    try:
        return RunConfig(**merged)
    except PydanticValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"設定が不正です: {problems}") from e
