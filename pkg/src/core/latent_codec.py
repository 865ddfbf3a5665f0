#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
KL正則化オートエンコーダー（潜在コーデック）

画像を 1/downsample_factor 解像度の潜在へ圧縮し、復元する。
"""

import math
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from diffusers import AutoencoderKL
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ..utils.checkpoint import load_weights, save_weights
from ..utils.errors import ParameterError, TrainingError
from ..utils.image_io import resize_image, tensor_to_pixels
from ..utils.logger import get_logger
from .metrics import mse
from .schedule_sampler import draw_noise, make_generator

# 公開チェックポイントのスケーリング定数
PRETRAINED_SCALING_FACTOR = 0.18215


class CodecConfig(BaseModel):
    """コーデック構成と学習設定"""

    model_config = ConfigDict(extra="forbid")

    block_out_channels: list[int] = Field(default_factory=lambda: [32, 64, 64, 64])
    latent_channels: int = 4
    layers_per_block: int = 1
    norm_num_groups: int = 16
    mid_block_attention: bool = False
    scaling_factor: float = PRETRAINED_SCALING_FACTOR
    pretrained: Optional[str] = None

    # 学習設定（トイコーデック用）
    image_size: int = 64
    kl_weight: float = 1e-6
    train_steps: int = Field(2000, ge=0)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = 2e-4
    seed: int = 0

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.block_out_channels) - 1)


def build_autoencoder(config: CodecConfig) -> AutoencoderKL:
    """構成からランダム初期化のオートエンコーダーを作成"""
    num_blocks = len(config.block_out_channels)
    return AutoencoderKL(
        in_channels=3,
        out_channels=3,
        down_block_types=("DownEncoderBlock2D",) * num_blocks,
        up_block_types=("UpDecoderBlock2D",) * num_blocks,
        block_out_channels=tuple(config.block_out_channels),
        layers_per_block=config.layers_per_block,
        latent_channels=config.latent_channels,
        norm_num_groups=config.norm_num_groups,
        sample_size=config.image_size,
        scaling_factor=config.scaling_factor,
        mid_block_add_attention=config.mid_block_attention,
    )


class LatentCodec:
    """画像 ⇔ 潜在 の変換器"""

    def __init__(self, vae: AutoencoderKL, scaling_factor: float, config: Optional[CodecConfig] = None):
        self.vae = vae
        self.scaling_factor = float(scaling_factor)
        self.config = config or CodecConfig()

    @classmethod
    def build(cls, config: CodecConfig) -> "LatentCodec":
        """ランダム初期化のコーデックを作成"""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            vae = build_autoencoder(config)
        return cls(vae, config.scaling_factor, config)

    @classmethod
    def from_pretrained(cls, model_id: str, subfolder: str = "vae") -> "LatentCodec":
        """公開チェックポイントのコーデック重みを読み込み"""
        vae = AutoencoderKL.from_pretrained(model_id, subfolder=subfolder)
        config = CodecConfig(
            block_out_channels=list(vae.config.block_out_channels),
            latent_channels=vae.config.latent_channels,
            layers_per_block=vae.config.layers_per_block,
            norm_num_groups=vae.config.norm_num_groups,
            mid_block_attention=True,
            scaling_factor=vae.config.scaling_factor,
            pretrained=model_id,
            image_size=vae.config.sample_size,
        )
        get_logger().info(f"事前学習済みコーデックを読み込みました: {model_id}")
        return cls(vae, vae.config.scaling_factor, config)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.vae.config.block_out_channels) - 1)

    @property
    def latent_channels(self) -> int:
        return int(self.vae.config.latent_channels)

    @property
    def device(self) -> torch.device:
        return next(self.vae.parameters()).device

    def to(self, device: Union[str, torch.device]) -> "LatentCodec":
        self.vae.to(device)
        return self

    def freeze(self) -> "LatentCodec":
        """重みを固定して推論モードにする"""
        self.vae.requires_grad_(False)
        self.vae.eval()
        return self

    def encode(self, image: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """画像 [-1, 1] を潜在へ変換（generator無しなら事後分布の平均）"""
        single = image.dim() == 3
        batch = image.unsqueeze(0) if single else image
        height, width = batch.shape[-2:]
        factor = self.downsample_factor
        if height % factor or width % factor:
            raise ParameterError(f"画像サイズ {height}x{width} はダウンサンプル係数 {factor} で割り切れません")

        posterior = self.vae.encode(batch.to(self.device)).latent_dist
        if generator is None:
            latent = posterior.mean
        else:
            eps = draw_noise(tuple(posterior.mean.shape), generator, posterior.mean.device, posterior.mean.dtype)
            latent = posterior.mean + posterior.std * eps
        latent = latent * self.scaling_factor
        return latent.squeeze(0) if single else latent

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """潜在を画像 [-1, 1] へ復元"""
        single = latent.dim() == 3
        batch = latent.unsqueeze(0) if single else latent
        if batch.shape[1] != self.latent_channels:
            raise ParameterError(f"潜在チャンネル数が一致しません: {batch.shape[1]} (期待値 {self.latent_channels})")

        image = self.vae.decode(batch.to(self.device) / self.scaling_factor).sample.clamp(-1.0, 1.0)
        return image.squeeze(0) if single else image

    def save(self, path: Union[str, Path]):
        """重みを保存"""
        config = self.config.model_copy(update={"scaling_factor": self.scaling_factor})
        save_weights(path, self.vae.state_dict(), kind="codec", config=config.model_dump())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "LatentCodec":
        """保存済み重みを読み込み"""
        tensors, header = load_weights(path, kind="codec")
        config = CodecConfig(**header["config"])
        vae = build_autoencoder(config)
        vae.load_state_dict(tensors)
        return cls(vae, config.scaling_factor, config)


def reconstruction_error(
    images: Sequence[torch.Tensor],
    codec: LatentCodec,
    resolution: int,
    eval_resolution: int = 256,
) -> float:
    """往復変換の平均MSE（0-255スケール、評価解像度で比較）"""
    if len(images) == 0:
        raise ParameterError("画像が空です")

    errors = []
    with torch.no_grad():
        for image in images:
            original = resize_image(image, resolution)
            restored = codec.decode(codec.encode(original)).cpu()
            errors.append(mse(
                tensor_to_pixels(resize_image(restored, eval_resolution)),
                tensor_to_pixels(resize_image(original, eval_resolution)),
            ))
    return float(np.mean(errors))


@torch.no_grad()
def estimate_scaling_factor(vae: AutoencoderKL, images: torch.Tensor, batch_size: int = 32) -> float:
    """学習画像の潜在標準偏差の逆数"""
    device = next(vae.parameters()).device
    latents = [
        vae.encode(images[i:i + batch_size].to(device)).latent_dist.mean.cpu()
        for i in range(0, len(images), batch_size)
    ]
    std = torch.cat(latents).double().std().item()
    if not math.isfinite(std) or std <= 0:
        raise TrainingError("潜在の標準偏差が不正です", {"std": std})
    return 1.0 / std


def train_codec(
    images: torch.Tensor,
    config: CodecConfig,
    device: Union[str, torch.device] = "cpu",
    step_callback: Optional[Callable[[int, float], None]] = None,
) -> LatentCodec:
    """再構成 + KL 目的でトイコーデックを学習"""
    logger = get_logger()
    if len(images) == 0:
        raise ParameterError("学習画像が空です")

    codec = LatentCodec.build(config).to(device)
    vae = codec.vae
    vae.train()
    generator = make_generator(config.seed)
    optimizer = torch.optim.Adam(vae.parameters(), lr=config.learning_rate)

    progress = tqdm(range(config.train_steps), desc="codec", disable=config.train_steps == 0)
    for step in progress:
        indices = torch.randint(0, len(images), (config.batch_size,), generator=generator)
        batch = images[indices].to(device)

        posterior = vae.encode(batch).latent_dist
        eps = draw_noise(tuple(posterior.mean.shape), generator, device, posterior.mean.dtype)
        recon = vae.decode(posterior.mean + posterior.std * eps).sample

        rec_loss = F.mse_loss(recon, batch)
        kl_loss = posterior.kl().mean()
        loss = rec_loss + config.kl_weight * kl_loss
        if not torch.isfinite(loss):
            diagnostics = {"step": step, "lr": config.learning_rate, "batch_ids": indices.tolist()}
            logger.error(f"コーデック学習で数値異常が発生しました: {diagnostics}")
            raise TrainingError("コーデック学習の損失がNaN/Infになりました", diagnostics)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step_callback is not None:
            step_callback(step, loss.item())
        progress.set_postfix(loss=f"{loss.item():.5f}")

    vae.eval()
    codec.scaling_factor = estimate_scaling_factor(vae, images)
    codec.config = config.model_copy(update={"scaling_factor": codec.scaling_factor})
    logger.info(f"コーデック学習完了: steps={config.train_steps}, scaling_factor={codec.scaling_factor:.5f}")
    return codec.freeze()
