#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
画像入出力とテンソル変換
"""

from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from .errors import DataLoadError, ParameterError

# 8bitマスクの二値化しきい値
MASK_THRESHOLD = 128

PathLike = Union[str, Path]


def load_rgb(path: PathLike) -> np.ndarray:
    """RGB画像をuint8配列 (H, W, 3) で読み込み"""
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"画像ファイルが見つかりません: {path}")
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)


def load_mask(path: PathLike) -> np.ndarray:
    """マスクを {0, 1} のuint8配列 (H, W) で読み込み"""
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"マスクファイルが見つかりません: {path}")
    with Image.open(path) as img:
        gray = np.array(img.convert("L"), dtype=np.uint8)
    return (gray >= MASK_THRESHOLD).astype(np.uint8)


def save_rgb(array: np.ndarray, path: PathLike):
    """uint8配列 (H, W, 3) をPNGで保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def save_mask(mask: np.ndarray, path: PathLike):
    """{0, 1} マスクを0/255のPNGで保存"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def rgb_to_tensor(array: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) → [-1, 1] の (3, H, W)"""
    tensor = torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float()
    return tensor / 127.5 - 1.0


def mask_to_tensor(mask: np.ndarray) -> torch.Tensor:
    """{0, 1} (H, W) → (1, H, W)"""
    return torch.from_numpy(np.ascontiguousarray(mask)).float().unsqueeze(0)


def tensor_to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1, 1] の (3, H, W) → uint8 (H, W, 3)"""
    scaled = ((image.detach().float().cpu().clamp(-1.0, 1.0) + 1.0) * 127.5).round()
    return scaled.permute(1, 2, 0).to(torch.uint8).numpy()


def tensor_to_pixels(image: torch.Tensor, round_to_uint8: bool = False) -> np.ndarray:
    """[-1, 1] の (3, H, W) → 0-255スケールのfloat64配列 (H, W, 3)"""
    pixels = (image.detach().cpu().double().clamp(-1.0, 1.0) + 1.0) * 127.5
    if round_to_uint8:
        pixels = pixels.round()
    return pixels.permute(1, 2, 0).numpy()


def check_binary_mask(mask: torch.Tensor):
    """マスクが {0, 1} のみで構成されているか検証"""
    if not torch.all((mask == 0) | (mask == 1)):
        raise ParameterError("マスクは0と1のみで構成されている必要があります")


def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    """画像を正方形サイズへバイキュービック補間でリサイズ"""
    if image.shape[-2:] == (size, size):
        return image.clone()
    resized = TF.resize(image, [size, size], interpolation=InterpolationMode.BICUBIC, antialias=True)
    return resized.clamp(-1.0, 1.0)


def resize_mask(mask: torch.Tensor, size: int) -> torch.Tensor:
    """マスクを正方形サイズへ最近傍補間でリサイズ"""
    if mask.shape[-2:] == (size, size):
        return mask.clone()
    return TF.resize(mask, [size, size], interpolation=InterpolationMode.NEAREST)


def downsample_mask(mask: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """マスクを潜在解像度へ最近傍補間で縮小"""
    squeeze = mask.dim() == 3
    batched = mask.unsqueeze(0) if squeeze else mask
    out = torch.nn.functional.interpolate(batched, size=(height, width), mode="nearest")
    return out.squeeze(0) if squeeze else out


def load_image_tensor(path: PathLike, size: Optional[int] = None) -> torch.Tensor:
    """画像をテンソルとして読み込み（必要ならリサイズ）"""
    tensor = rgb_to_tensor(load_rgb(path))
    if size is not None:
        tensor = resize_image(tensor, size)
    return tensor


def load_mask_tensor(path: PathLike, size: Optional[int] = None) -> torch.Tensor:
    """マスクをテンソルとして読み込み（必要ならリサイズ）"""
    tensor = mask_to_tensor(load_mask(path))
    if size is not None:
        tensor = resize_mask(tensor, size)
    return tensor


def list_images(directory: PathLike) -> list[Path]:
    """ディレクトリ内の画像ファイルを名前順で列挙"""
    directory = Path(directory)
    if not directory.is_dir():
        raise ParameterError(f"ディレクトリが見つかりません: {directory}")
    suffixes = {".png", ".jpg", ".jpeg"}
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in suffixes)
