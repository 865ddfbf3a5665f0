#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
拡散ノイズスケジュールとEuler ancestralサンプラー

サンプリングはシグマ空間 (x = z_t / sqrt(ᾱ_t)) で行う。デノイザーには
x / sqrt(σ² + 1) と整数タイムステップを渡し、ノイズ ε の推定値を受け取る。
"""

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator
from tqdm import tqdm

from ..utils.errors import ParameterError
from .denoiser import cfg_combine

# デノイザーハンドル: (モデル入力, タイムステップ, 条件) -> ε推定
NoisePredictor = Callable[[torch.Tensor, int, Any], torch.Tensor]


class ScheduleConfig(BaseModel):
    """ノイズスケジュール設定"""

    model_config = ConfigDict(extra="forbid")

    num_train_steps: int = Field(1000, ge=1)
    beta_start: float = 0.00085
    beta_end: float = 0.012


class SamplerConfig(BaseModel):
    """サンプラー設定"""

    model_config = ConfigDict(extra="forbid")

    num_inference_steps: int = Field(5, ge=1)
    seed: int = 0
    guidance_scale: float = Field(0.0, ge=0.0)


@dataclass(frozen=True)
class NoiseSchedule:
    """離散拡散スケジュール"""

    betas: np.ndarray
    alpha_bars: np.ndarray = field(repr=False)
    sigmas: np.ndarray = field(repr=False)

    def __post_init__(self):
        if not (len(self.betas) == len(self.alpha_bars) == len(self.sigmas)) or len(self.betas) == 0:
            raise ParameterError("スケジュール配列の長さが不正です")
        if len(self.alpha_bars) > 1 and not np.all(np.diff(self.alpha_bars) < 0):
            raise ParameterError("alpha_barsは狭義単調減少である必要があります")
        if not (self.sigmas[0] > 0 and np.all(np.diff(self.sigmas) > 0)):
            raise ParameterError("sigmasは正かつ狭義単調増加である必要があります")

    @property
    def num_train_steps(self) -> int:
        return len(self.betas)

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[-1])

    def sigma(self, t: int) -> float:
        """タイムステップ t のシグマ"""
        return float(self.sigmas[t])


def build_schedule(num_train_steps: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """scaled-linear規則でノイズスケジュールを構築"""
    if int(num_train_steps) != num_train_steps or num_train_steps < 1:
        raise ParameterError(f"num_train_stepsは1以上の整数である必要があります: {num_train_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ParameterError(f"0 < beta_start < beta_end < 1 を満たしていません: ({beta_start}, {beta_end})")

    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), int(num_train_steps), dtype=np.float64) ** 2
    alpha_bars = np.cumprod(1.0 - betas)
    sigmas = np.sqrt((1.0 - alpha_bars) / alpha_bars)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars, sigmas=sigmas)


def schedule_from_config(config: ScheduleConfig) -> NoiseSchedule:
    """設定からスケジュールを構築"""
    return build_schedule(config.num_train_steps, config.beta_start, config.beta_end)


def add_noise(
    clean_latent: torch.Tensor,
    noise: torch.Tensor,
    t: Union[int, torch.Tensor],
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """前向き過程 z_t = sqrt(ᾱ_t)·z_0 + sqrt(1−ᾱ_t)·ε"""
    if clean_latent.shape != noise.shape:
        raise ParameterError(f"形状が一致しません: {tuple(clean_latent.shape)} vs {tuple(noise.shape)}")

    num_steps = schedule.num_train_steps
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.shape[0] != clean_latent.shape[0]:
            raise ParameterError("タイムステップ数がバッチサイズと一致しません")
        if int(t.min()) < 0 or int(t.max()) >= num_steps:
            raise ParameterError(f"タイムステップが範囲外です: [0, {num_steps})")
        alpha_bars = torch.from_numpy(schedule.alpha_bars)[t.cpu().long()]
        shape = (-1,) + (1,) * (clean_latent.dim() - 1)
        signal = alpha_bars.sqrt().to(clean_latent.device, clean_latent.dtype).view(shape)
        noise_scale = (1.0 - alpha_bars).sqrt().to(clean_latent.device, clean_latent.dtype).view(shape)
        return signal * clean_latent + noise_scale * noise

    t = int(t)
    if not 0 <= t < num_steps:
        raise ParameterError(f"タイムステップが範囲外です: {t} (0 <= t < {num_steps})")
    alpha_bar = float(schedule.alpha_bars[t])
    return math.sqrt(alpha_bar) * clean_latent + math.sqrt(1.0 - alpha_bar) * noise


def select_timesteps(num_inference_steps: int, schedule: NoiseSchedule) -> np.ndarray:
    """[T−1, 0] の等間隔点を四捨五入（0から遠い方へ）して推論タイムステップを選択"""
    num_steps = schedule.num_train_steps
    if not 1 <= num_inference_steps <= num_steps:
        raise ParameterError(f"推論ステップ数は1以上{num_steps}以下である必要があります: {num_inference_steps}")

    points = np.linspace(num_steps - 1, 0, num_inference_steps, dtype=np.float64)
    # 値は非負なので floor(x + 0.5) が round-half-away-from-zero と一致する
    return np.floor(points + 0.5).astype(np.int64)


def euler_ancestral_step(
    x: Union[torch.Tensor, float],
    eps_pred: Union[torch.Tensor, float],
    sigma_from: float,
    sigma_to: float,
    rng_noise: Optional[Union[torch.Tensor, float]],
) -> Union[torch.Tensor, float]:
    """Euler ancestral 1ステップ更新"""
    if not sigma_from > sigma_to >= 0:
        raise ParameterError(f"sigma_from > sigma_to >= 0 を満たしていません: ({sigma_from}, {sigma_to})")

    denoised = x - sigma_from * eps_pred
    if sigma_to == 0:
        return denoised

    sigma_up = math.sqrt(sigma_to ** 2 * (sigma_from ** 2 - sigma_to ** 2) / sigma_from ** 2)
    sigma_down = math.sqrt(max(sigma_to ** 2 - sigma_up ** 2, 0.0))
    d = (x - denoised) / sigma_from
    return x + (sigma_down - sigma_from) * d + sigma_up * rng_noise


def make_generator(seed: int) -> torch.Generator:
    """シードから乱数ストリームを作成（CPU上で生成し、デバイス間で同一系列にする）"""
    return torch.Generator(device="cpu").manual_seed(int(seed))


def draw_noise(
    shape: tuple[int, ...],
    generator: torch.Generator,
    device: Union[str, torch.device] = "cpu",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """標準正規ノイズを生成"""
    return torch.randn(shape, generator=generator, dtype=dtype).to(device)


def sample(
    denoiser: NoisePredictor,
    init_noise: torch.Tensor,
    condition: Any,
    config: SamplerConfig,
    schedule: NoiseSchedule,
    *,
    generator: Optional[torch.Generator] = None,
    uncondition: Any = None,
    show_progress: bool = False,
) -> torch.Tensor:
    """Euler ancestralで潜在を生成

    乱数の消費順序: 呼び出し側が同じストリームから初期ノイズを先に取り、
    以降は σ_to > 0 の各ステップで1回ずつ祖先ノイズを取る。
    """
    if config.guidance_scale > 0 and uncondition is None:
        raise ParameterError("guidance_scale > 0 には無条件側の条件入力が必要です")
    if generator is None:
        generator = make_generator(config.seed)

    timesteps = select_timesteps(config.num_inference_steps, schedule)
    sigmas = [schedule.sigma(int(t)) for t in timesteps] + [0.0]

    x = init_noise * math.sqrt(sigmas[0] ** 2 + 1.0)
    steps = tqdm(range(len(timesteps)), desc="sampling", leave=False, disable=not show_progress)
    for i in steps:
        t = int(timesteps[i])
        sigma_from, sigma_to = sigmas[i], sigmas[i + 1]
        model_input = x / math.sqrt(sigma_from ** 2 + 1.0)

        eps = denoiser(model_input, t, condition)
        if config.guidance_scale > 0:
            eps_uncond = denoiser(model_input, t, uncondition)
            eps = cfg_combine(eps, eps_uncond, config.guidance_scale)

        noise = draw_noise(tuple(x.shape), generator, x.device, x.dtype) if sigma_to > 0 else None
        x = euler_ancestral_step(x, eps, sigma_from, sigma_to, noise)
    return x
