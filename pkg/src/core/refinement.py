#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
第2段階: 残差UNetによる256px補正

入力は Ĩ_h・I_c・M を連結した7チャンネル。ネットワークは残差を出力し、
I_h = clamp(Ĩ_h + residual) とする。最終畳み込みはゼロ初期化で、初期状態は恒等写像。
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from ..utils.checkpoint import load_weights, save_weights
from ..utils.errors import ParameterError, TrainingError
from ..utils.image_io import (
    check_binary_mask,
    load_image_tensor,
    load_mask_tensor,
    resize_image,
    resize_mask,
    save_mask,
    save_rgb,
    tensor_to_uint8,
)
from ..utils.logger import get_logger
from .dataset import HarmonySample, load_triplet
from .pipeline import HarmonizationModels, HarmonizationRequest, harmonize
from .schedule_sampler import SamplerConfig

REFINE_RESOLUTION = 256
REFINER_IN_CHANNELS = 7


class RefinerConfig(BaseModel):
    """補正ネットワーク構成と学習設定"""

    model_config = ConfigDict(extra="forbid")

    base_channels: int = Field(32, ge=1)
    channel_multipliers: list[int] = Field(default_factory=lambda: [1, 2, 4, 8])
    norm_num_groups: int = 8
    resolution: int = REFINE_RESOLUTION

    learning_rate: float = 1e-4
    train_steps: int = Field(2000, ge=0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    seeds_per_sample: int = Field(2, ge=1)


class ConvBlock(nn.Module):
    """Conv-GroupNorm-SiLU ×2 + 1x1ショートカット"""

    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.SiLU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.SiLU(),
        )
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x) + self.skip(x)


class RefinerUNet(nn.Module):
    """残差を出力するUNet（アテンションなし）"""

    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.config = config
        widths = [config.base_channels * m for m in config.channel_multipliers]
        groups = config.norm_num_groups

        self.in_conv = nn.Conv2d(REFINER_IN_CHANNELS, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        prev = widths[0]
        for width in widths:
            self.down_blocks.append(ConvBlock(prev, width, groups))
            prev = width
        self.pool = nn.AvgPool2d(2)
        self.middle = ConvBlock(prev, prev, groups)

        self.up_blocks = nn.ModuleList()
        for width in reversed(widths):
            self.up_blocks.append(ConvBlock(prev + width, width, groups))
            prev = width

        self.out_conv = nn.Conv2d(prev, 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def num_levels(self) -> int:
        return len(self.down_blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != REFINER_IN_CHANNELS:
            raise ParameterError(f"入力チャンネル数は {REFINER_IN_CHANNELS} である必要があります: {x.shape[1]}")
        factor = 2 ** self.num_levels
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise ParameterError(f"入力サイズは {factor} の倍数である必要があります: {tuple(x.shape[-2:])}")

        h = self.in_conv(x)
        skips = []
        for block in self.down_blocks:
            h = block(h)
            skips.append(h)
            h = self.pool(h)
        h = self.middle(h)
        for block in self.up_blocks:
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skips.pop()], dim=1))
        return self.out_conv(h)

    def save(self, path: Union[str, Path], extra: Optional[dict] = None):
        """重みを保存"""
        save_weights(path, self.state_dict(), kind="refiner", config=self.config.model_dump(), extra=extra)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RefinerUNet":
        """保存済み重みを読み込み"""
        tensors, header = load_weights(path, kind="refiner")
        model = cls(RefinerConfig(**header["config"]))
        model.load_state_dict(tensors)
        return model.eval()


@dataclass
class RefinerInput:
    """補正ネットワークへの入力 (256px)"""

    harmonized: torch.Tensor
    composite: torch.Tensor
    mask: torch.Tensor

    def concat(self) -> torch.Tensor:
        """(B, 7, H, W) に連結"""
        parts = [t.unsqueeze(0) if t.dim() == 3 else t for t in (self.harmonized, self.composite, self.mask)]
        spatial = {tuple(p.shape[-2:]) for p in parts}
        if len(spatial) != 1:
            raise ParameterError(f"入力の空間サイズが一致しません: {sorted(spatial)}")
        if parts[0].shape[1] != 3 or parts[1].shape[1] != 3 or parts[2].shape[1] != 1:
            raise ParameterError("入力のチャンネル構成が不正です (3 + 3 + 1)")
        return torch.cat([p.float() for p in parts], dim=1)


def refine(inputs: RefinerInput, refiner: RefinerUNet) -> torch.Tensor:
    """I_h = clamp(Ĩ_h + residual, [-1, 1])"""
    size = refiner.config.resolution
    if tuple(inputs.harmonized.shape[-2:]) != (size, size):
        raise ParameterError(f"補正は {size}px で行います: {tuple(inputs.harmonized.shape[-2:])}")
    check_binary_mask(inputs.mask)

    device = next(refiner.parameters()).device
    stacked = inputs.concat().to(device)
    with torch.no_grad():
        residual = refiner(stacked)
    base = stacked[:, :3]
    output = (base + residual).clamp(-1.0, 1.0)
    return output.squeeze(0).cpu() if inputs.harmonized.dim() == 3 else output.cpu()


@dataclass
class RefineTuple:
    """補正学習用の (Ĩ_h, I_c, M, gt) 組"""

    sample_id: str
    seed: int
    harmonized: torch.Tensor
    composite: torch.Tensor
    mask: torch.Tensor
    real: torch.Tensor


def generate_refine_tuples(
    samples: Sequence[HarmonySample],
    models: HarmonizationModels,
    sampler: SamplerConfig,
    inference_resolution: int,
    seeds_per_sample: int = 2,
    blend_background: bool = True,
    resolution: int = REFINE_RESOLUTION,
) -> list[RefineTuple]:
    """第1段階をサンプルごとに複数シードで実行して学習組を作る"""
    if len(samples) == 0:
        raise ParameterError("サンプルが空です")
    if seeds_per_sample < 1:
        raise ParameterError(f"seeds_per_sampleは1以上である必要があります: {seeds_per_sample}")

    tuples = []
    for i, sample in enumerate(tqdm(samples, desc="refine tuples")):
        triplet = load_triplet(sample)
        composite = resize_image(triplet.composite, resolution)
        mask = resize_mask(triplet.mask, resolution)
        real = resize_image(triplet.real, resolution)
        for k in range(seeds_per_sample):
            seed = sampler.seed + i * seeds_per_sample + k
            request = HarmonizationRequest(
                composite=triplet.composite,
                mask=triplet.mask,
                inference_resolution=inference_resolution,
                output_resolution=resolution,
                sampler=sampler.model_copy(update={"seed": seed}),
                blend_background=blend_background,
                source=str(sample.composite_path),
            )
            harmonized = harmonize(request, models)
            tuples.append(RefineTuple(sample.sample_id, seed, harmonized, composite, mask, real))

    get_logger().info(f"補正学習用の組を生成しました: {len(tuples)} 件 ({len(samples)} サンプル × {seeds_per_sample} シード)")
    return tuples


def save_refine_tuples(tuples: Sequence[RefineTuple], output_dir: Union[str, Path]) -> Path:
    """PNGディレクトリ + tuples.jsonl として保存"""
    output_dir = Path(output_dir)
    for sub in ("harmonized", "composite", "mask", "real"):
        (output_dir / sub).mkdir(parents=True, exist_ok=True)

    manifest = output_dir / "tuples.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for index, item in enumerate(tuples):
            name = f"{index:06d}.png"
            save_rgb(tensor_to_uint8(item.harmonized), output_dir / "harmonized" / name)
            save_rgb(tensor_to_uint8(item.composite), output_dir / "composite" / name)
            save_mask(item.mask[0].to(torch.uint8).numpy(), output_dir / "mask" / name)
            save_rgb(tensor_to_uint8(item.real), output_dir / "real" / name)
            f.write(json.dumps({"file": name, "sample_id": item.sample_id, "seed": item.seed}) + "\n")
    return manifest


def load_refine_tuples(directory: Union[str, Path]) -> list[RefineTuple]:
    """save_refine_tuples の出力を読み込み"""
    directory = Path(directory)
    manifest = directory / "tuples.jsonl"
    if not manifest.exists():
        raise ParameterError(f"補正学習用の組が見つかりません: {manifest}")

    tuples = []
    with open(manifest, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            name = record["file"]
            tuples.append(RefineTuple(
                sample_id=record["sample_id"],
                seed=int(record["seed"]),
                harmonized=load_image_tensor(directory / "harmonized" / name),
                composite=load_image_tensor(directory / "composite" / name),
                mask=load_mask_tensor(directory / "mask" / name),
                real=load_image_tensor(directory / "real" / name),
            ))
    return tuples


def train_refiner(
    tuples: Sequence[RefineTuple],
    config: RefinerConfig,
    device: Union[str, torch.device] = "cpu",
    step_callback: Optional[Callable[[int, float], None]] = None,
) -> RefinerUNet:
    """固定した第1段階出力に対してMSEで補正ネットワークを学習"""
    logger = get_logger()
    if len(tuples) == 0:
        raise ParameterError("補正学習用の組が空です")

    harmonized = torch.stack([t.harmonized for t in tuples])
    composite = torch.stack([t.composite for t in tuples])
    mask = torch.stack([t.mask for t in tuples])
    real = torch.stack([t.real for t in tuples])

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = RefinerUNet(config)
    model = model.to(device)
    model.train()
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    progress = tqdm(range(config.train_steps), desc="refiner", disable=config.train_steps == 0)
    for step in progress:
        indices = torch.randint(0, len(tuples), (config.batch_size,), generator=generator)
        stacked = torch.cat([harmonized[indices], composite[indices], mask[indices]], dim=1).to(device)
        target = real[indices].to(device)

        prediction = stacked[:, :3] + model(stacked)
        loss = F.mse_loss(prediction, target)
        if not torch.isfinite(loss):
            diagnostics = {"step": step, "lr": config.learning_rate, "batch_ids": indices.tolist()}
            logger.error(f"補正学習で数値異常が発生しました: {diagnostics}")
            raise TrainingError("補正学習の損失がNaN/Infになりました", diagnostics)

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if step_callback is not None:
            step_callback(step, loss.item())
        progress.set_postfix(loss=f"{loss.item():.5f}")

    logger.info(f"補正学習完了: steps={config.train_steps}, tuples={len(tuples)}")
    return model.eval()
