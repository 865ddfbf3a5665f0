#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
第1段階の拡散ファインチューニング

ε予測のMSE、区分定数の学習率、EMA重み、チェックポイントと再開。
コーデックは固定し、デノイザーの全パラメータを学習する。
"""

import copy
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import DataLoader
from tqdm import tqdm

from ..utils.checkpoint import load_weights, save_weights
from ..utils.errors import ConfigError, ParameterError, TrainingError
from ..utils.image_io import downsample_mask
from ..utils.logger import ScalarLogWriter, get_logger
from .dataset import AugmentConfig, HarmonyDataset, HarmonySample
from .denoiser import ConditionalDenoiser, DenoiserInput
from .latent_codec import LatentCodec
from .schedule_sampler import NoiseSchedule, add_noise, draw_noise, make_generator

RAW_WEIGHTS = "denoiser.safetensors"
EMA_WEIGHTS = "denoiser_ema.safetensors"
TRAINER_STATE = "trainer_state.pt"
TRAIN_LOG = "train_log.csv"


class TrainConfig(BaseModel):
    """拡散学習設定"""

    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(32, ge=1)
    lr_phase1: float = Field(1e-5, gt=0)
    phase1_steps: int = Field(150_000, ge=1)
    lr_phase2: float = Field(1e-6, gt=0)
    phase2_steps: int = Field(50_000, ge=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    ema_decay: float = Field(0.9999, gt=0.0, lt=1.0)
    train_resolution: int = 512
    seed: int = 0
    condition_dropout: float = Field(0.0, ge=0.0, le=1.0)
    num_workers: int = Field(0, ge=0)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(1000, ge=1)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    @property
    def total_steps(self) -> int:
        return self.phase1_steps + self.phase2_steps


def lr_schedule(step: int, config: TrainConfig) -> float:
    """区分定数の学習率"""
    if step < 0:
        raise ParameterError(f"ステップは0以上である必要があります: {step}")
    return config.lr_phase1 if step < config.phase1_steps else config.lr_phase2


@dataclass
class EmaState:
    """EMAの影の重み"""

    shadow: dict[str, torch.Tensor]
    decay: float
    num_updates: int = 0

    @classmethod
    def from_model(cls, model: nn.Module, decay: float) -> "EmaState":
        shadow = {name: t.detach().clone() for name, t in model.state_dict().items()}
        return cls(shadow=shadow, decay=decay)

    def copy_to(self, model: nn.Module):
        """影の重みをモデルへ書き込み"""
        model.load_state_dict(self.shadow)


@torch.no_grad()
def ema_update(ema: EmaState, current: Union[nn.Module, Mapping[str, torch.Tensor]]) -> EmaState:
    """shadow ← decay·shadow + (1−decay)·current"""
    if not 0.0 <= ema.decay <= 1.0:
        raise ParameterError(f"decayは [0, 1] の範囲である必要があります: {ema.decay}")
    weights = current.state_dict() if isinstance(current, nn.Module) else current
    if set(weights) != set(ema.shadow):
        raise ParameterError("EMAとモデルの重み名が一致しません")

    for name, value in weights.items():
        shadow = ema.shadow[name]
        if shadow.shape != value.shape:
            raise ParameterError(f"重み {name} の形状が一致しません: {tuple(shadow.shape)} vs {tuple(value.shape)}")
        if shadow.is_floating_point():
            shadow.lerp_(value.to(shadow.device, shadow.dtype), 1.0 - ema.decay)
        else:
            shadow.copy_(value)
    ema.num_updates += 1
    return ema


def diffusion_train_step(
    batch: Mapping[str, torch.Tensor],
    codec: LatentCodec,
    denoiser: ConditionalDenoiser,
    schedule: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    config: TrainConfig,
    generator: torch.Generator,
    step: int,
) -> float:
    """1ステップ: 正解画像の潜在にノイズを加え、ε推定のMSEで更新"""
    lr = lr_schedule(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr

    device = codec.device
    real = batch["real"].to(device)
    composite = batch["composite"].to(device)
    mask = batch["mask"].to(device)
    batch_size = real.shape[0]

    with torch.no_grad():
        clean_latent = codec.encode(real)
        composite_latent = codec.encode(composite)
        mask_lowres = downsample_mask(mask, clean_latent.shape[-2], clean_latent.shape[-1])

    timesteps = torch.randint(0, schedule.num_train_steps, (batch_size,), generator=generator)
    noise = draw_noise(tuple(clean_latent.shape), generator, device, clean_latent.dtype)
    noisy_latent = add_noise(clean_latent, noise, timesteps, schedule)

    if config.condition_dropout > 0:
        keep = (torch.rand(batch_size, generator=generator) >= config.condition_dropout).to(device)
        keep = keep.view(-1, 1, 1, 1).to(clean_latent.dtype)
        mask_lowres = mask_lowres * keep
        composite_latent = composite_latent * keep

    eps = denoiser.predict_noise(
        DenoiserInput(noisy_latent, mask_lowres, composite_latent, timesteps.to(device))
    )
    loss = F.mse_loss(eps, noise)
    if not torch.isfinite(loss):
        batch_ids = batch["index"].tolist() if isinstance(batch.get("index"), torch.Tensor) else batch.get("index")
        diagnostics = {"step": step, "lr": lr, "batch_ids": batch_ids, "loss": loss.item()}
        get_logger().error(f"拡散学習で数値異常が発生しました: {diagnostics}")
        raise TrainingError("拡散学習の損失がNaN/Infになりました", diagnostics)

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


def smoothed_loss_drop(losses: Sequence[float], window: int = 50) -> tuple[float, float]:
    """先頭と末尾の移動平均損失"""
    if len(losses) == 0:
        return math.nan, math.nan
    window = max(1, min(window, len(losses) // 2 or 1))
    values = np.asarray(losses, dtype=np.float64)
    return float(values[:window].mean()), float(values[-window:].mean())


@dataclass
class TrainSummary:
    """学習結果"""

    steps: int
    losses: list[float] = field(default_factory=list)
    initial_loss: float = math.nan
    final_loss: float = math.nan
    seconds: float = 0.0

    def as_dict(self) -> dict[str, Any]:
        return {
            "steps": self.steps,
            "initial_smoothed_loss": self.initial_loss,
            "final_smoothed_loss": self.final_loss,
            "seconds": round(self.seconds, 2),
        }


class HarmonyTrainer:
    """拡散学習ループ（EMA・チェックポイント・再開）"""

    def __init__(
        self,
        run_dir: Union[str, Path],
        codec: LatentCodec,
        denoiser: ConditionalDenoiser,
        schedule: NoiseSchedule,
        config: TrainConfig,
        device: Union[str, torch.device] = "cpu",
    ):
        self.logger = get_logger()
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.codec = codec.freeze().to(device)
        self.denoiser = denoiser.to(device)
        self.schedule = schedule
        self.config = config
        self.device = device

        self.optimizer = torch.optim.Adam(
            self.denoiser.parameters(), lr=lr_schedule(0, config), betas=tuple(config.adam_betas)
        )
        self.ema = EmaState.from_model(self.denoiser, config.ema_decay)
        self.generator = make_generator(config.seed)
        self.step = 0
        self.scalar_log = ScalarLogWriter(self.run_dir / TRAIN_LOG, ["step", "loss", "lr", "seconds"])

    def _epoch_batches(self, num_samples: int, epoch: int) -> list[list[int]]:
        order = torch.Generator().manual_seed(self.config.seed * 1_000_003 + epoch)
        permutation = torch.randperm(num_samples, generator=order).tolist()
        size = self.config.batch_size
        return [permutation[i:i + size] for i in range(0, num_samples, size)]

    def fit(self, samples: Sequence[HarmonySample], max_steps: Optional[int] = None) -> TrainSummary:
        """学習を実行（再開時は保存済みステップから続行）"""
        total = self.config.total_steps if max_steps is None else max_steps
        dataset = HarmonyDataset(
            samples, self.config.train_resolution, seed=self.config.seed, augment_config=self.config.augment
        )
        batches_per_epoch = math.ceil(len(dataset) / self.config.batch_size)
        summary = TrainSummary(steps=self.step)
        start = time.perf_counter()

        self.denoiser.train()
        progress = tqdm(total=total, initial=self.step, desc="harmony")
        while self.step < total:
            epoch, offset = divmod(self.step, batches_per_epoch)
            dataset.set_epoch(epoch)
            loader = DataLoader(
                dataset,
                batch_sampler=self._epoch_batches(len(dataset), epoch)[offset:],
                num_workers=self.config.num_workers,
            )
            for batch in loader:
                if self.step >= total:
                    break
                loss = diffusion_train_step(
                    batch, self.codec, self.denoiser, self.schedule,
                    self.optimizer, self.config, self.generator, self.step,
                )
                ema_update(self.ema, self.denoiser)
                summary.losses.append(loss)
                self.step += 1
                progress.update(1)
                progress.set_postfix(loss=f"{loss:.5f}")

                if self.step % self.config.log_every == 0 or self.step == total:
                    self.scalar_log.write({
                        "step": self.step,
                        "loss": loss,
                        "lr": lr_schedule(self.step - 1, self.config),
                        "seconds": round(time.perf_counter() - start, 2),
                    })
                if self.step % self.config.checkpoint_every == 0:
                    self.save_checkpoint()
        progress.close()

        self.save_checkpoint()
        summary.steps = self.step
        summary.initial_loss, summary.final_loss = smoothed_loss_drop(summary.losses)
        summary.seconds = time.perf_counter() - start
        self.logger.info(
            f"拡散学習完了: step={self.step}, loss {summary.initial_loss:.5f} → {summary.final_loss:.5f}"
        )
        return summary

    def ema_denoiser(self) -> ConditionalDenoiser:
        """EMA重みを載せたデノイザーのコピー"""
        model = copy.deepcopy(self.denoiser)
        self.ema.copy_to(model)
        return model.eval()

    def save_checkpoint(self):
        """生の重み・EMA重み・学習状態を保存"""
        extra = {"step": self.step}
        self.denoiser.save(self.run_dir / RAW_WEIGHTS, extra=extra)
        save_weights(
            self.run_dir / EMA_WEIGHTS,
            self.ema.shadow,
            kind="denoiser",
            config=self.denoiser.config.model_dump(),
            extra={**extra, "ema_decay": self.ema.decay, "ema_updates": self.ema.num_updates},
        )
        torch.save(
            {
                "step": self.step,
                "optimizer": self.optimizer.state_dict(),
                "generator": self.generator.get_state(),
                "ema_updates": self.ema.num_updates,
                "config": self.config.model_dump(),
            },
            self.run_dir / TRAINER_STATE,
        )
        self.logger.debug(f"チェックポイントを保存しました: {self.run_dir} (step={self.step})")

    def resume(self):
        """保存済みの状態から再開"""
        state_path = self.run_dir / TRAINER_STATE
        if not state_path.exists():
            raise ConfigError(f"学習状態が見つかりません: {state_path}")

        raw, _ = load_weights(self.run_dir / RAW_WEIGHTS, kind="denoiser")
        self.denoiser.load_state_dict(raw)
        shadow, _ = load_weights(self.run_dir / EMA_WEIGHTS, kind="denoiser")
        self.ema = EmaState(
            shadow={name: t.to(self.device) for name, t in shadow.items()},
            decay=self.config.ema_decay,
        )

        state = torch.load(state_path, map_location="cpu", weights_only=False)
        self.optimizer.load_state_dict(state["optimizer"])
        self.generator.set_state(state["generator"])
        self.ema.num_updates = int(state["ema_updates"])
        self.step = int(state["step"])
        self.logger.info(f"学習を再開します: {self.run_dir} (step={self.step})")
