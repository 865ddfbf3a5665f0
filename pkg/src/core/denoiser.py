#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
条件付きデノイザー

ノイズ付き潜在・潜在解像度のマスク・合成画像の潜在をチャンネル方向に連結し、
空テキスト埋め込みをクロスアテンションの文脈として ε を推定する。
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import torch
import torch.nn as nn
from diffusers import UNet2DConditionModel
from pydantic import BaseModel, ConfigDict, Field

from ..utils.checkpoint import load_weights, save_weights
from ..utils.errors import ParameterError
from ..utils.logger import get_logger

DEFAULT_PRETRAINED_MODEL = "runwayml/stable-diffusion-inpainting"


class DenoiserConfig(BaseModel):
    """デノイザー構成"""

    model_config = ConfigDict(extra="forbid")

    latent_channels: int = Field(4, ge=1)
    block_out_channels: list[int] = Field(default_factory=lambda: [64, 128])
    # 各解像度でクロスアテンションを使うか
    attention_levels: list[bool] = Field(default_factory=lambda: [False, True])
    layers_per_block: int = Field(1, ge=1)
    cross_attention_dim: int = 64
    attention_head_dim: int = 8
    norm_num_groups: int = 32
    context_length: int = Field(4, ge=1)
    sample_size: int = 8
    num_train_steps: int = 1000
    trainable_null_context: bool = True
    pretrained: Optional[str] = None

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 1

    @classmethod
    def full(cls, model_id: str = DEFAULT_PRETRAINED_MODEL) -> "DenoiserConfig":
        """公開インペインティングモデルと同じ構成"""
        return cls(
            block_out_channels=[320, 640, 1280, 1280],
            attention_levels=[True, True, True, False],
            layers_per_block=2,
            cross_attention_dim=768,
            attention_head_dim=8,
            norm_num_groups=32,
            context_length=77,
            sample_size=64,
            trainable_null_context=False,
            pretrained=model_id,
        )


def build_unet(config: DenoiserConfig) -> UNet2DConditionModel:
    """構成からUNetを作成"""
    if len(config.attention_levels) != len(config.block_out_channels):
        raise ParameterError("attention_levelsとblock_out_channelsの長さが一致しません")

    down = tuple("CrossAttnDownBlock2D" if a else "DownBlock2D" for a in config.attention_levels)
    up = tuple("CrossAttnUpBlock2D" if a else "UpBlock2D" for a in reversed(config.attention_levels))
    return UNet2DConditionModel(
        sample_size=config.sample_size,
        in_channels=config.in_channels,
        out_channels=config.latent_channels,
        down_block_types=down,
        up_block_types=up,
        block_out_channels=tuple(config.block_out_channels),
        layers_per_block=config.layers_per_block,
        cross_attention_dim=config.cross_attention_dim,
        attention_head_dim=config.attention_head_dim,
        norm_num_groups=config.norm_num_groups,
    )


@dataclass
class DenoiserCondition:
    """画像条件（マスクと合成画像の潜在）とテキスト条件"""

    mask_lowres: torch.Tensor
    composite_latent: torch.Tensor
    text_condition: Optional[torch.Tensor] = None

    def unconditional(self) -> "DenoiserCondition":
        """画像条件をゼロにした無条件側（テキストは空のまま）"""
        return DenoiserCondition(
            mask_lowres=torch.zeros_like(self.mask_lowres),
            composite_latent=torch.zeros_like(self.composite_latent),
            text_condition=self.text_condition,
        )


@dataclass
class DenoiserInput:
    """デノイザーへの完全な入力"""

    noisy_latent: torch.Tensor
    mask_lowres: torch.Tensor
    composite_latent: torch.Tensor
    timestep: Union[int, torch.Tensor]
    text_condition: Optional[torch.Tensor] = None

    @classmethod
    def from_condition(
        cls,
        noisy_latent: torch.Tensor,
        timestep: Union[int, torch.Tensor],
        condition: DenoiserCondition,
    ) -> "DenoiserInput":
        return cls(noisy_latent, condition.mask_lowres, condition.composite_latent, timestep, condition.text_condition)


def cfg_combine(eps_cond, eps_uncond, w: float):
    """分類器なしガイダンス: (1+w)·ε_c − w·ε_u"""
    if w < 0:
        raise ParameterError(f"ガイダンス係数は0以上である必要があります: {w}")
    if isinstance(eps_cond, torch.Tensor) or isinstance(eps_uncond, torch.Tensor):
        if not (isinstance(eps_cond, torch.Tensor) and isinstance(eps_uncond, torch.Tensor)) \
                or eps_cond.shape != eps_uncond.shape:
            raise ParameterError("条件付き・無条件の推定の形状が一致しません")
    # ε_c + w·(ε_c − ε_u) と同値。両者が等しいとき ε_c をそのまま返す
    return eps_cond + w * (eps_cond - eps_uncond)


def _batched(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.unsqueeze(0) if tensor.dim() == 3 else tensor


class ConditionalDenoiser(nn.Module):
    """ε推定UNet + 空テキスト文脈"""

    def __init__(
        self,
        config: DenoiserConfig,
        unet: Optional[UNet2DConditionModel] = None,
        null_context: Optional[torch.Tensor] = None,
    ):
        super().__init__()
        self.config = config
        self.unet = unet if unet is not None else build_unet(config)

        shape = (config.context_length, config.cross_attention_dim)
        if null_context is None:
            null_context = torch.randn(shape) * 0.02
        if tuple(null_context.shape) != shape:
            raise ParameterError(f"空テキスト埋め込みの形状が不正です: {tuple(null_context.shape)} (期待値 {shape})")

        if config.trainable_null_context:
            self.null_context = nn.Parameter(null_context.clone())
        else:
            self.register_buffer("null_context", null_context.clone())

    @classmethod
    def build(cls, config: DenoiserConfig, seed: int = 0) -> "ConditionalDenoiser":
        """ランダム初期化のデノイザーを作成"""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return cls(config)

    @classmethod
    def from_pretrained(cls, model_id: str = DEFAULT_PRETRAINED_MODEL) -> "ConditionalDenoiser":
        """公開インペインティングチェックポイントから読み込み"""
        unet = UNet2DConditionModel.from_pretrained(model_id, subfolder="unet")
        if unet.config.in_channels != 2 * unet.config.out_channels + 1:
            raise ParameterError(f"インペインティング用の入力チャンネル数ではありません: {unet.config.in_channels}")

        null_context = encode_empty_prompt(model_id)
        config = DenoiserConfig.full(model_id).model_copy(update={
            "latent_channels": unet.config.out_channels,
            "block_out_channels": list(unet.config.block_out_channels),
            "cross_attention_dim": unet.config.cross_attention_dim,
            "sample_size": unet.config.sample_size,
            "context_length": null_context.shape[0],
        })
        get_logger().info(f"事前学習済みデノイザーを読み込みました: {model_id}")
        return cls(config, unet=unet, null_context=null_context)

    @property
    def device(self) -> torch.device:
        return self.null_context.device

    def null_text_embedding(self) -> torch.Tensor:
        """空プロンプトの埋め込み (context_length, cross_attention_dim)"""
        return self.null_context

    def predict_noise(self, inputs: DenoiserInput) -> torch.Tensor:
        """ε を推定（出力はnoisy_latentと同じ形状）"""
        single = inputs.noisy_latent.dim() == 3
        noisy = _batched(inputs.noisy_latent)
        mask = _batched(inputs.mask_lowres)
        composite = _batched(inputs.composite_latent)

        spatial = {tuple(noisy.shape[-2:]), tuple(mask.shape[-2:]), tuple(composite.shape[-2:])}
        if len(spatial) != 1:
            raise ParameterError(f"入力の空間サイズが一致しません: {sorted(spatial)}")
        if not (noisy.shape[0] == mask.shape[0] == composite.shape[0]):
            raise ParameterError("入力のバッチサイズが一致しません")

        sample = torch.cat([noisy, mask.to(noisy.dtype), composite.to(noisy.dtype)], dim=1)
        if sample.shape[1] != self.config.in_channels:
            raise ParameterError(
                f"連結後のチャンネル数 {sample.shape[1]} が {self.config.in_channels} (2·latent_channels+1) と一致しません"
            )
        if noisy.shape[1] != self.config.latent_channels:
            raise ParameterError(f"潜在チャンネル数が一致しません: {noisy.shape[1]}")

        batch = sample.shape[0]
        timestep = inputs.timestep
        if isinstance(timestep, torch.Tensor) and timestep.dim() > 0:
            timesteps = timestep.to(sample.device).long()
        else:
            timesteps = torch.full((batch,), int(timestep), dtype=torch.long, device=sample.device)
        if int(timesteps.min()) < 0 or int(timesteps.max()) >= self.config.num_train_steps:
            raise ParameterError(f"タイムステップが範囲外です: [0, {self.config.num_train_steps})")

        context = inputs.text_condition if inputs.text_condition is not None else self.null_context
        if context.dim() == 2:
            context = context.unsqueeze(0).expand(batch, -1, -1)

        eps = self.unet(sample, timesteps, encoder_hidden_states=context.to(sample.dtype)).sample
        return eps.squeeze(0) if single else eps

    def forward(self, model_input: torch.Tensor, timestep: Union[int, torch.Tensor], condition: DenoiserCondition) -> torch.Tensor:
        return self.predict_noise(DenoiserInput.from_condition(model_input, timestep, condition))

    def save(self, path: Union[str, Path], extra: Optional[dict] = None):
        """重みを保存"""
        save_weights(path, self.state_dict(), kind="denoiser", config=self.config.model_dump(), extra=extra)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ConditionalDenoiser":
        """保存済み重みを読み込み"""
        tensors, header = load_weights(path, kind="denoiser")
        config = DenoiserConfig(**header["config"])
        model = cls(config, null_context=tensors["null_context"])
        model.load_state_dict(tensors)
        return model


def encode_empty_prompt(model_id: str = DEFAULT_PRETRAINED_MODEL) -> torch.Tensor:
    """テキストエンコーダーで空文字列を符号化"""
    from transformers import CLIPTextModel, CLIPTokenizer

    tokenizer = CLIPTokenizer.from_pretrained(model_id, subfolder="tokenizer")
    text_encoder = CLIPTextModel.from_pretrained(model_id, subfolder="text_encoder")
    tokens = tokenizer(
        "",
        padding="max_length",
        max_length=tokenizer.model_max_length,
        truncation=True,
        return_tensors="pt",
    )
    with torch.no_grad():
        hidden = text_encoder(tokens.input_ids)[0]
    return hidden[0]
