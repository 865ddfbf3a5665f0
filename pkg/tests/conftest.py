#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
共通フィクスチャ: 極小モデルと6サンプルのデータセット
"""

import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# プロジェクトルートをPythonパスに追加
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

os.environ.setdefault("LOG_DIRECTORY", tempfile.mkdtemp(prefix="harmonizer_logs_"))

from src.core.dataset import SyntheticConfig, apply_appearance_shift, generate_base_images  # noqa: E402
from src.core.denoiser import ConditionalDenoiser, DenoiserConfig  # noqa: E402
from src.core.latent_codec import CodecConfig, LatentCodec  # noqa: E402
from src.core.pipeline import HarmonizationModels  # noqa: E402
from src.core.schedule_sampler import build_schedule  # noqa: E402
from src.utils.image_io import save_mask, save_rgb  # noqa: E402

FIXTURE_SIZE = 32

# (幅, 高さ): 2サンプルずつ 0–5% / 5–15% / 15–100% に入る矩形
FIXTURE_RECTS = [(4, 5), (5, 8), (8, 10), (10, 12), (16, 16), (32, 16)]


def tiny_codec_config() -> CodecConfig:
    return CodecConfig(block_out_channels=[8, 8], latent_channels=4, norm_num_groups=4, image_size=16)


def tiny_denoiser_config() -> DenoiserConfig:
    return DenoiserConfig(
        block_out_channels=[16, 16],
        attention_levels=[False, True],
        layers_per_block=1,
        cross_attention_dim=16,
        attention_head_dim=4,
        norm_num_groups=8,
        context_length=2,
        sample_size=8,
    )


@pytest.fixture
def schedule():
    return build_schedule(1000, 0.00085, 0.012)


@pytest.fixture
def tiny_codec():
    return LatentCodec.build(tiny_codec_config()).freeze()


@pytest.fixture
def tiny_denoiser():
    return ConditionalDenoiser.build(tiny_denoiser_config(), seed=0).eval()


@pytest.fixture
def tiny_models(tiny_codec, tiny_denoiser, schedule):
    return HarmonizationModels(tiny_codec, tiny_denoiser, schedule).eval()


def write_fixture_dataset(root: Path) -> Path:
    """iHarmony4レイアウトで6サンプルを書き出す（奇数番目がテスト）"""
    subset_dir = root / "synthetic"
    for sub in ("composite_images", "masks", "real_images"):
        (subset_dir / sub).mkdir(parents=True, exist_ok=True)

    bases = generate_base_images(len(FIXTURE_RECTS), FIXTURE_SIZE, seed=7)
    config = SyntheticConfig()
    train, test = [], []
    for i, (width, height) in enumerate(FIXTURE_RECTS):
        mask = np.zeros((FIXTURE_SIZE, FIXTURE_SIZE), dtype=np.uint8)
        mask[:height, :width] = 1
        composite, _ = apply_appearance_shift(bases[i], mask, np.random.default_rng(i), config)

        real_id = f"f{i:03d}"
        save_rgb(bases[i], subset_dir / "real_images" / f"{real_id}.png")
        save_mask(mask, subset_dir / "masks" / f"{real_id}_1.png")
        save_rgb(composite, subset_dir / "composite_images" / f"{real_id}_1_1.png")
        (test if i % 2 else train).append(f"composite_images/{real_id}_1_1.png")

    (subset_dir / "synthetic_train.txt").write_text("\n".join(train) + "\n", encoding="utf-8")
    (subset_dir / "synthetic_test.txt").write_text("\n".join(test) + "\n", encoding="utf-8")
    return root


@pytest.fixture
def fixture_dataset(tmp_path) -> Path:
    return write_fixture_dataset(tmp_path / "dataset")
