#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
データセット: iHarmony4レイアウトの読み込み、分割、前景比率、合成データ生成、拡張
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field
from torch.utils.data import Dataset

from ..utils.errors import DataLoadError, ParameterError, ValidationError
from ..utils.image_io import (
    load_image_tensor,
    load_mask,
    load_mask_tensor,
    resize_image,
    resize_mask,
    save_mask,
    save_rgb,
)
from ..utils.logger import get_logger

OFFICIAL_SUBSETS = ("HCOCO", "HAdobe5k", "HFlickr", "Hday2night")
SYNTHETIC_SUBSET = "synthetic"
OFFICIAL_COUNTS = {"train": 65742, "test": 7404}

BUCKET_LABELS = ("0–5%", "5–15%", "15–100%")
BUCKET_BOUNDS = (0.05, 0.15)

REAL_SUFFIXES = (".jpg", ".png", ".jpeg")


@dataclass(frozen=True)
class HarmonySample:
    """合成画像・マスク・正解画像の三つ組"""

    composite_path: Path
    mask_path: Path
    real_path: Path
    subset: str
    foreground_ratio: float

    @property
    def sample_id(self) -> str:
        return f"{self.subset}/{Path(self.composite_path).stem}"

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("composite_path", "mask_path", "real_path"):
            data[key] = str(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "HarmonySample":
        return cls(
            composite_path=Path(data["composite_path"]),
            mask_path=Path(data["mask_path"]),
            real_path=Path(data["real_path"]),
            subset=data["subset"],
            foreground_ratio=float(data["foreground_ratio"]),
        )


@dataclass
class SplitManifest:
    """学習・テスト分割"""

    train: list[HarmonySample]
    test: list[HarmonySample]
    skipped: int = 0

    def __post_init__(self):
        overlap = {s.sample_id for s in self.train} & {s.sample_id for s in self.test}
        if overlap:
            raise ParameterError(f"学習とテストに重複があります: {sorted(overlap)[:5]}")

    def counts(self) -> dict[str, dict[str, int]]:
        """サブセット別件数"""
        result: dict[str, dict[str, int]] = {}
        for split, samples in (("train", self.train), ("test", self.test)):
            for s in samples:
                result.setdefault(s.subset, {"train": 0, "test": 0})[split] += 1
        return result

    def index(self) -> dict[str, HarmonySample]:
        """サンプルID → サンプル"""
        return {s.sample_id: s for s in self.train + self.test}

    def save(self, path: Union[str, Path]):
        """JSON Linesで保存"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for split, samples in (("train", self.train), ("test", self.test)):
                for s in samples:
                    f.write(json.dumps({"split": split, **s.to_dict()}) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SplitManifest":
        """JSON Linesから読み込み"""
        train, test = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                data = json.loads(line)
                (train if data.pop("split") == "train" else test).append(HarmonySample.from_dict(data))
        return cls(train=train, test=test)


def foreground_ratio(mask) -> float:
    """前景画素の割合"""
    mask = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("マスクは0と1のみで構成されている必要があります")
    on = int(np.count_nonzero(mask))
    if on == 0:
        raise ValidationError("前景のないマスクは無効です")
    spatial = mask.shape[-2:] if mask.ndim == 3 and mask.shape[0] == 1 else mask.shape[:2]
    return on / float(spatial[0] * spatial[1])


def bucket_of(ratio: float) -> str:
    """前景比率のバケット（下端を含む半開区間）"""
    if not 0.0 < ratio <= 1.0:
        raise ParameterError(f"前景比率は (0, 1] の範囲である必要があります: {ratio}")
    if ratio < BUCKET_BOUNDS[0]:
        return BUCKET_LABELS[0]
    if ratio < BUCKET_BOUNDS[1]:
        return BUCKET_LABELS[1]
    return BUCKET_LABELS[2]


def parse_composite_name(name: str) -> Optional[tuple[str, str]]:
    """合成画像名 <real>_<mask番号>_<合成番号> から (正解ID, マスクID) を取り出す"""
    parts = Path(name).stem.split("_")
    if len(parts) < 3 or not parts[-1].isdigit() or not parts[-2].isdigit():
        return None
    real_id = "_".join(parts[:-2])
    return real_id, f"{real_id}_{parts[-2]}"


def _find_real(directory: Path, real_id: str) -> Path:
    for suffix in REAL_SUFFIXES:
        candidate = directory / f"{real_id}{suffix}"
        if candidate.exists():
            return candidate
    return directory / f"{real_id}.jpg"


def _read_split_file(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def _discover_split_files(root: Path) -> dict[str, list[Path]]:
    found: dict[str, list[Path]] = {"train": [], "test": []}
    for subset in OFFICIAL_SUBSETS + (SYNTHETIC_SUBSET,):
        for split in ("train", "test"):
            candidate = root / subset / f"{subset}_{split}.txt"
            if candidate.exists():
                found[split].append(candidate)
    return found


def load_iharmony4(
    root_dir: Union[str, Path],
    split_files: Optional[dict[str, Sequence[Union[str, Path]]]] = None,
) -> SplitManifest:
    """iHarmony4レイアウトのデータセットを読み込み"""
    logger = get_logger()
    root = Path(root_dir)
    if not root.is_dir():
        raise DataLoadError(f"データセットのルートが見つかりません: {root}")

    if split_files is None:
        split_files = _discover_split_files(root)
    if not any(split_files.get(split) for split in ("train", "test")):
        raise DataLoadError(f"分割ファイルが見つかりません: {root}")

    splits: dict[str, list[HarmonySample]] = {"train": [], "test": []}
    offenders: list[str] = []
    skipped = 0

    for split in ("train", "test"):
        for split_file in split_files.get(split, []):
            split_file = Path(split_file)
            for entry in _read_split_file(split_file):
                entry_path = Path(entry)
                # 分割ファイルは <subset>/<subset>_<split>.txt に置かれる
                subset = split_file.parent.name
                if len(entry_path.parts) >= 3 and entry_path.parts[-3] in OFFICIAL_SUBSETS + (SYNTHETIC_SUBSET,):
                    subset = entry_path.parts[-3]
                subset_dir = root / subset

                parsed = parse_composite_name(entry_path.name)
                if parsed is None:
                    logger.warning(f"ファイル名の形式が不正なためスキップします: {entry}")
                    skipped += 1
                    continue
                real_id, mask_id = parsed

                composite_path = subset_dir / "composite_images" / entry_path.name
                mask_path = subset_dir / "masks" / f"{mask_id}.png"
                real_path = _find_real(subset_dir / "real_images", real_id)
                missing = [p for p in (composite_path, mask_path, real_path) if not p.exists()]
                if missing:
                    offenders.extend(f"{entry}: {p} がありません" for p in missing)
                    continue

                ratio = foreground_ratio(load_mask(mask_path))
                splits[split].append(HarmonySample(composite_path, mask_path, real_path, subset, ratio))

    if offenders:
        raise DataLoadError("データセットに欠損ファイルがあります", offenders)

    manifest = SplitManifest(train=splits["train"], test=splits["test"], skipped=skipped)
    present = set(manifest.counts())
    total = len(manifest.train) + len(manifest.test)
    if present == set(OFFICIAL_SUBSETS) and total == sum(OFFICIAL_COUNTS.values()):
        if len(manifest.train) != OFFICIAL_COUNTS["train"] or len(manifest.test) != OFFICIAL_COUNTS["test"]:
            raise DataLoadError(
                f"公式分割の件数が一致しません: train={len(manifest.train)}, test={len(manifest.test)}"
            )

    logger.info(
        f"データセットを読み込みました: train={len(manifest.train)}, test={len(manifest.test)}, skipped={skipped}"
    )
    return manifest


# ---------------------------------------------------------------------------
# 合成データ
# ---------------------------------------------------------------------------

class SyntheticConfig(BaseModel):
    """合成データ生成設定"""

    model_config = ConfigDict(extra="forbid")

    image_size: int = 64
    base_images: int = Field(64, ge=1)
    brightness: float = 0.3
    contrast: float = 0.3
    channel_gain: float = 0.2
    test_fraction: float = Field(0.1, ge=0.0, lt=1.0)
    # バケットごとの目標前景比率の範囲（境界から離しておく）
    ratio_ranges: list[tuple[float, float]] = Field(
        default_factory=lambda: [(0.015, 0.042), (0.065, 0.135), (0.2, 0.6)]
    )
    max_shape_tries: int = Field(20, ge=1)


def generate_base_images(count: int, size: int, seed: int) -> list[np.ndarray]:
    """手続き的な正解画像（グラデーション背景 + 図形 + 低周波ノイズ）を生成"""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    images = []
    for _ in range(count):
        start, end = rng.uniform(30, 225, size=(2, 3))
        angle = rng.uniform(0, 2 * math.pi)
        t = np.clip(0.5 + (xx - 0.5) * math.cos(angle) + (yy - 0.5) * math.sin(angle), 0, 1)[..., None]
        canvas = start * (1 - t) + end * t

        img = Image.fromarray(np.clip(canvas, 0, 255).astype(np.uint8))
        draw = ImageDraw.Draw(img)
        for _ in range(int(rng.integers(2, 6))):
            x0, y0 = rng.uniform(0, size, 2)
            w, h = rng.uniform(size * 0.1, size * 0.5, 2)
            color = tuple(int(c) for c in rng.integers(0, 256, 3))
            if rng.random() < 0.5:
                draw.rectangle([x0, y0, x0 + w, y0 + h], fill=color)
            else:
                draw.ellipse([x0, y0, x0 + w, y0 + h], fill=color)

        coarse = rng.normal(0, 12, size=(4, 4, 3))
        texture = np.array(
            [np.array(Image.fromarray(coarse[..., c].astype(np.float32)).resize((size, size), Image.BICUBIC))
             for c in range(3)]
        ).transpose(1, 2, 0)
        images.append(np.clip(np.asarray(img, dtype=np.float64) + texture, 0, 255).round().astype(np.uint8))
    return images


def _polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1))))


def _draw_shape(rng: np.random.Generator, size: int, area: float) -> tuple[np.ndarray, dict[str, Any]]:
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    if rng.random() < 0.5:
        aspect = float(rng.uniform(0.6, 1.6))
        a = min(math.sqrt(area * aspect / math.pi), size / 2)
        b = min(area / (math.pi * a), size / 2)
        cx = float(rng.uniform(a, size - a))
        cy = float(rng.uniform(b, size - b))
        draw.ellipse([cx - a, cy - b, cx + a, cy + b], fill=255)
        shape = {"shape": "ellipse", "center": [cx, cy], "axes": [a, b]}
    else:
        vertices = int(rng.integers(5, 10))
        angles = np.sort(rng.uniform(0, 2 * math.pi, vertices))
        radii = rng.uniform(0.6, 1.0, vertices)
        unit = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
        scale = math.sqrt(area / max(_polygon_area(unit), 1e-6))
        scale = min(scale, size / (2 * float(radii.max())))
        extent = scale * float(radii.max())
        center = rng.uniform(extent, size - extent, 2)
        points = unit * scale + center
        draw.polygon([tuple(p) for p in points.tolist()], fill=255)
        shape = {"shape": "polygon", "points": points.tolist()}
    return (np.asarray(canvas) >= 128).astype(np.uint8), shape


def _block_mask(rng: np.random.Generator, size: int, area: float) -> tuple[np.ndarray, dict[str, Any]]:
    pixels = min(max(int(round(area)), 1), size * size)
    side = min(math.ceil(math.sqrt(pixels)), size)
    flat = np.zeros(side * side, dtype=np.uint8)
    flat[:pixels] = 1
    x0, y0 = (int(v) for v in rng.integers(0, size - side + 1, 2))
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y0:y0 + side, x0:x0 + side] = flat.reshape(side, side)
    return mask, {"shape": "block", "origin": [x0, y0], "pixels": pixels}


def random_mask(
    rng: np.random.Generator,
    size: int,
    config: SyntheticConfig,
    bucket: Optional[int] = None,
) -> tuple[np.ndarray, dict[str, Any]]:
    """楕円またはランダム多角形の前景マスクを生成（実際の比率は目標バケットに収まる）"""
    if bucket is None:
        bucket = int(rng.integers(len(config.ratio_ranges)))
    low, high = config.ratio_ranges[bucket]
    target = float(rng.uniform(low, high))
    area = target * size * size

    for _ in range(config.max_shape_tries):
        mask, shape = _draw_shape(rng, size, area)
        if mask.sum() > 0 and bucket_of(foreground_ratio(mask)) == BUCKET_LABELS[bucket]:
            break
    else:
        # ラスタ化で範囲を外れた場合は画素数を合わせたブロック
        mask, shape = _block_mask(rng, size, area)
    return mask, {"bucket_target": BUCKET_LABELS[bucket], "target_ratio": target, **shape}


def apply_appearance_shift(
    real: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    config: SyntheticConfig,
) -> tuple[np.ndarray, dict[str, Any]]:
    """前景のみに明るさ・コントラスト・色ゲインの変化を加える"""
    brightness = float(rng.uniform(1 - config.brightness, 1 + config.brightness))
    contrast = float(rng.uniform(1 - config.contrast, 1 + config.contrast))
    gains = rng.uniform(1 - config.channel_gain, 1 + config.channel_gain, 3)

    region = mask.astype(bool)
    pixels = real.astype(np.float64)
    mean = pixels[region].mean()
    shifted = ((pixels - mean) * contrast + mean) * brightness * gains
    shifted = np.clip(shifted, 0, 255).round().astype(np.uint8)

    composite = real.copy()
    composite[region] = shifted[region]
    return composite, {"brightness": brightness, "contrast": contrast, "gains": gains.tolist()}


def make_synthetic_set(
    base_images: Sequence[np.ndarray],
    count: int,
    seed: int,
    output_root: Union[str, Path],
    config: Optional[SyntheticConfig] = None,
) -> SplitManifest:
    """合成データセットをiHarmony4と同じレイアウトで書き出す"""
    if len(base_images) == 0:
        raise ParameterError("ベース画像が空です")
    config = config or SyntheticConfig()
    root = Path(output_root) / SYNTHETIC_SUBSET
    for sub in ("composite_images", "masks", "real_images"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    num_test = int(round(count * config.test_fraction))
    test_ids = set(np.random.default_rng(seed).permutation(count)[:num_test].tolist())

    train, test = [], []
    with open(root / "generator_params.jsonl", "w", encoding="utf-8") as params_file:
        for i in range(count):
            rng = np.random.default_rng([seed, i])
            base_index = int(rng.integers(len(base_images)))
            real = np.asarray(base_images[base_index], dtype=np.uint8)
            mask, mask_params = random_mask(rng, real.shape[0], config, bucket=i % len(config.ratio_ranges))
            composite, shift_params = apply_appearance_shift(real, mask, rng, config)

            real_id = f"s{i:05d}"
            composite_path = root / "composite_images" / f"{real_id}_1_1.png"
            mask_path = root / "masks" / f"{real_id}_1.png"
            real_path = root / "real_images" / f"{real_id}.png"
            save_rgb(composite, composite_path)
            save_mask(mask, mask_path)
            save_rgb(real, real_path)

            sample = HarmonySample(composite_path, mask_path, real_path, SYNTHETIC_SUBSET, foreground_ratio(mask))
            (test if i in test_ids else train).append(sample)
            params_file.write(json.dumps({
                "sample_id": sample.sample_id,
                "seed": seed,
                "base_index": base_index,
                "foreground_ratio": sample.foreground_ratio,
                **mask_params,
                **shift_params,
            }) + "\n")

    for split, samples in (("train", train), ("test", test)):
        lines = [Path(s.composite_path).name for s in samples]
        (root / f"{SYNTHETIC_SUBSET}_{split}.txt").write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    get_logger().info(f"合成データを生成しました: {root} (train={len(train)}, test={len(test)})")
    return SplitManifest(train=train, test=test)


# ---------------------------------------------------------------------------
# 拡張
# ---------------------------------------------------------------------------

@dataclass
class HarmonyTriplet:
    """テンソル化した三つ組 (composite / real は [-1, 1]、mask は {0, 1})"""

    composite: torch.Tensor
    mask: torch.Tensor
    real: torch.Tensor

    def __post_init__(self):
        sizes = {tuple(self.composite.shape[-2:]), tuple(self.mask.shape[-2:]), tuple(self.real.shape[-2:])}
        if len(sizes) != 1:
            raise ValidationError(f"三つ組の空間サイズが一致しません: {sorted(sizes)}")


class AugmentConfig(BaseModel):
    """拡張設定"""

    model_config = ConfigDict(extra="forbid")

    scale: tuple[float, float] = (0.5, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    max_tries: int = 10


@dataclass(frozen=True)
class AugmentParams:
    """幾何変換パラメータ"""

    top: int
    left: int
    height: int
    width: int
    flip: bool


def load_triplet(sample: HarmonySample, size: Optional[int] = None) -> HarmonyTriplet:
    """サンプルをテンソルとして読み込み"""
    return HarmonyTriplet(
        composite=load_image_tensor(sample.composite_path, size),
        mask=load_mask_tensor(sample.mask_path, size),
        real=load_image_tensor(sample.real_path, size),
    )


def sample_crop_box(height: int, width: int, generator: torch.Generator, config: AugmentConfig) -> tuple[int, int, int, int]:
    """ランダムリサイズクロップの切り出し範囲"""
    area = height * width
    log_ratio = (math.log(config.ratio[0]), math.log(config.ratio[1]))
    for _ in range(10):
        target_area = area * float(torch.empty(1).uniform_(config.scale[0], config.scale[1], generator=generator))
        aspect = math.exp(float(torch.empty(1).uniform_(log_ratio[0], log_ratio[1], generator=generator)))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (1,), generator=generator))
            left = int(torch.randint(0, width - w + 1, (1,), generator=generator))
            return top, left, h, w
    side = min(height, width)
    return (height - side) // 2, (width - side) // 2, side, side


def apply_augment(triplet: HarmonyTriplet, params: AugmentParams, size: int) -> HarmonyTriplet:
    """三つ組に同一の幾何変換を適用"""

    def geometry(image: torch.Tensor, is_mask: bool) -> torch.Tensor:
        out = TF.crop(image, params.top, params.left, params.height, params.width)
        out = resize_mask(out, size) if is_mask else resize_image(out, size)
        return TF.hflip(out) if params.flip else out

    return HarmonyTriplet(
        composite=geometry(triplet.composite, False),
        mask=geometry(triplet.mask, True),
        real=geometry(triplet.real, False),
    )


def augment(triplet: HarmonyTriplet, seed: int, size: int, config: Optional[AugmentConfig] = None) -> tuple[HarmonyTriplet, AugmentParams]:
    """ランダムリサイズクロップ + 水平反転（前景が消える切り出しは再抽選）"""
    config = config or AugmentConfig()
    generator = torch.Generator().manual_seed(int(seed))
    height, width = triplet.mask.shape[-2:]

    for _ in range(config.max_tries):
        top, left, h, w = sample_crop_box(height, width, generator, config)
        flip = bool(torch.rand(1, generator=generator).item() < config.flip_prob)
        params = AugmentParams(top, left, h, w, flip)
        result = apply_augment(triplet, params, size)
        if result.mask.sum() > 0:
            return result, params

    side = min(height, width)
    params = AugmentParams((height - side) // 2, (width - side) // 2, side, side, False)
    return apply_augment(triplet, params, size), params


class HarmonyDataset(Dataset):
    """学習用データセット（エポックとインデックスから拡張シードを決める）"""

    def __init__(
        self,
        samples: Sequence[HarmonySample],
        resolution: int,
        seed: int = 0,
        augment_config: Optional[AugmentConfig] = None,
        use_augment: bool = True,
    ):
        if len(samples) == 0:
            raise ParameterError("サンプルが空です")
        self.samples = list(samples)
        self.resolution = resolution
        self.seed = seed
        self.augment_config = augment_config or AugmentConfig()
        self.use_augment = use_augment
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> dict[str, Any]:
        sample = self.samples[index]
        triplet = load_triplet(sample)
        if self.use_augment:
            item_seed = int(np.random.SeedSequence([self.seed, self.epoch, index]).generate_state(1)[0])
            triplet, _ = augment(triplet, item_seed, self.resolution, self.augment_config)
        else:
            triplet = HarmonyTriplet(
                composite=resize_image(triplet.composite, self.resolution),
                mask=resize_mask(triplet.mask, self.resolution),
                real=resize_image(triplet.real, self.resolution),
            )
        return {
            "composite": triplet.composite,
            "mask": triplet.mask,
            "real": triplet.real,
            "index": index,
        }
