#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
第1段階: 潜在拡散による調和化

合成画像を推論解像度で符号化し、マスクを潜在解像度へ縮小してサンプリングし、
復号後に背景を合成画像で置き換えて出力解像度へ縮小する。
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import torch

from ..utils.errors import HarmonyError, ParameterError
from ..utils.image_io import (
    check_binary_mask,
    downsample_mask,
    load_image_tensor,
    load_mask_tensor,
    resize_image,
    resize_mask,
    save_rgb,
    tensor_to_uint8,
)
from ..utils.logger import get_logger
from .denoiser import ConditionalDenoiser, DenoiserCondition
from .latent_codec import LatentCodec
from .schedule_sampler import NoiseSchedule, SamplerConfig, draw_noise, make_generator, sample


@dataclass
class HarmonizationRequest:
    """調和化リクエスト（画像は [-1, 1] の (3, H, W)、マスクは {0, 1} の (1, H, W)）"""

    composite: torch.Tensor
    mask: torch.Tensor
    inference_resolution: int = 1024
    output_resolution: int = 256
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    blend_background: bool = True
    source: Optional[str] = None

    @classmethod
    def from_files(cls, composite_path: Union[str, Path], mask_path: Union[str, Path], **kwargs) -> "HarmonizationRequest":
        return cls(
            composite=load_image_tensor(composite_path),
            mask=load_mask_tensor(mask_path),
            source=str(composite_path),
            **kwargs,
        )


@dataclass
class HarmonizationModels:
    """推論に必要なモデル一式"""

    codec: LatentCodec
    denoiser: ConditionalDenoiser
    schedule: NoiseSchedule

    def eval(self) -> "HarmonizationModels":
        self.codec.freeze()
        self.denoiser.eval()
        return self


def _check_request(request: HarmonizationRequest, codec: LatentCodec):
    if request.composite.dim() != 3 or request.composite.shape[0] != 3:
        raise ParameterError(f"合成画像は (3, H, W) である必要があります: {tuple(request.composite.shape)}")
    if request.mask.dim() != 3 or request.mask.shape[0] != 1:
        raise ParameterError(f"マスクは (1, H, W) である必要があります: {tuple(request.mask.shape)}")
    if request.mask.shape[-2:] != request.composite.shape[-2:]:
        raise ParameterError("マスクと合成画像の空間サイズが一致しません")
    if request.inference_resolution % codec.downsample_factor:
        raise ParameterError(
            f"推論解像度 {request.inference_resolution} はダウンサンプル係数 {codec.downsample_factor} で割り切れません"
        )
    check_binary_mask(request.mask)


@torch.no_grad()
def harmonize(request: HarmonizationRequest, models: HarmonizationModels) -> torch.Tensor:
    """1枚を調和化して output_resolution の画像 Ĩ_h を返す"""
    _check_request(request, models.codec)
    codec, denoiser = models.codec, models.denoiser
    device = codec.device

    composite = resize_image(request.composite, request.inference_resolution)
    mask = resize_mask(request.mask, request.inference_resolution)

    composite_latent = codec.encode(composite.unsqueeze(0))
    _, channels, height, width = composite_latent.shape
    mask_lowres = downsample_mask(mask.unsqueeze(0), height, width).to(device)
    condition = DenoiserCondition(mask_lowres=mask_lowres, composite_latent=composite_latent)
    uncondition = condition.unconditional() if request.sampler.guidance_scale > 0 else None

    # 初期ノイズを先に取り、以降の祖先ノイズも同じストリームから取る
    generator = make_generator(request.sampler.seed)
    init_noise = draw_noise((1, channels, height, width), generator, device, composite_latent.dtype)
    latent = sample(
        denoiser,
        init_noise,
        condition,
        request.sampler,
        models.schedule,
        generator=generator,
        uncondition=uncondition,
    )

    harmonized = codec.decode(latent)[0].cpu().float()
    if request.blend_background:
        harmonized = torch.where(mask.bool(), harmonized, composite)
    return resize_image(harmonized, request.output_resolution)


def output_name(source: Optional[str], index: int) -> str:
    """出力ファイル名（同名の入力が重複しないよう index を前置）"""
    return f"{index:05d}_{Path(source).stem}.png" if source else f"{index:05d}.png"


def harmonize_batch(
    requests: Sequence[HarmonizationRequest],
    models: HarmonizationModels,
    parallelism: int = 1,
    base_seed: int = 0,
    output_dir: Optional[Union[str, Path]] = None,
) -> tuple[list[Optional[torch.Tensor]], list[dict[str, Any]]]:
    """複数リクエストを処理（順序保持、シードは base_seed + index）"""
    logger = get_logger()
    if len(requests) == 0:
        raise ParameterError("リクエストが空です")
    if parallelism < 1:
        raise ParameterError(f"並列数は1以上である必要があります: {parallelism}")
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)

    def run(index: int) -> tuple[Optional[torch.Tensor], dict[str, Any]]:
        request = requests[index]
        seed = base_seed + index
        seeded = replace(request, sampler=request.sampler.model_copy(update={"seed": seed}))
        record: dict[str, Any] = {
            "index": index,
            "input": request.source,
            "seed": seed,
            "inference_resolution": request.inference_resolution,
            "output_resolution": request.output_resolution,
            "blend_background": request.blend_background,
            "output": None,
        }
        start = time.perf_counter()
        try:
            image = harmonize(seeded, models)
            if output_dir is not None:
                path = output_dir / output_name(request.source, index)
                save_rgb(tensor_to_uint8(image), path)
                record["output"] = str(path)
            record["status"] = "ok"
        except (HarmonyError, RuntimeError) as e:
            logger.error(f"調和化に失敗しました (index={index}, input={request.source}): {e}")
            image = None
            record["status"] = "failed"
            record["error"] = str(e)
        record["seconds"] = round(time.perf_counter() - start, 4)
        return image, record

    with ThreadPoolExecutor(max_workers=parallelism) as executor:
        results = list(executor.map(run, range(len(requests))))

    images = [image for image, _ in results]
    manifest = [record for _, record in results]
    failed = sum(1 for record in manifest if record["status"] != "ok")
    logger.info(f"調和化完了: {len(requests) - failed}/{len(requests)} 件成功")
    return images, manifest


def write_manifest(records: Sequence[dict[str, Any]], path: Union[str, Path]):
    """マニフェストをJSON Linesで書き出し"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_manifest(path: Union[str, Path]) -> list[dict[str, Any]]:
    """マニフェストを読み込み"""
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
