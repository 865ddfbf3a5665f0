#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
評価指標（PSNR / MSE / fMSE）と集計
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import torch

from ..utils.errors import AggregationError, ParameterError, ValidationError
from ..utils.image_io import tensor_to_pixels
from .dataset import BUCKET_LABELS, HarmonySample, SplitManifest, bucket_of, foreground_ratio

PSNR_CAP = 100.0
PIXEL_MAX = 255.0

METRIC_NAMES = ("psnr", "mse", "fmse")


def _as_pixels(array) -> np.ndarray:
    return np.asarray(array, dtype=np.float64)


def _as_mask(mask, spatial: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 3:
        # (1, H, W) または (H, W, 1)
        mask = mask.squeeze(0) if mask.shape[0] == 1 else mask.squeeze(-1)
    if mask.shape != spatial:
        raise ParameterError(f"マスクの空間サイズが一致しません: {mask.shape} vs {spatial}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("マスクは0と1のみで構成されている必要があります")
    return mask.astype(bool)


def mse(pred, gt) -> float:
    """全画素・全チャンネルの平均二乗誤差"""
    pred, gt = _as_pixels(pred), _as_pixels(gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"画像の形状が一致しません: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def psnr_from_mse(value: float) -> float:
    """MSEからPSNR (dB) を計算（完全一致付近は上限で打ち切り）"""
    if value < PIXEL_MAX ** 2 * 1e-10:
        return PSNR_CAP
    return float(10.0 * math.log10(PIXEL_MAX ** 2 / value))


def psnr(pred, gt) -> float:
    """ピーク信号対雑音比 (dB)"""
    return psnr_from_mse(mse(pred, gt))


def fmse(pred, gt, mask) -> float:
    """前景領域のみの平均二乗誤差（分母にチャンネル数を含む）"""
    pred, gt = _as_pixels(pred), _as_pixels(gt)
    if pred.shape != gt.shape:
        raise ParameterError(f"画像の形状が一致しません: {pred.shape} vs {gt.shape}")
    region = _as_mask(mask, pred.shape[:2])
    count = int(region.sum())
    if count == 0:
        raise ValidationError("前景マスクが空のためfMSEは定義されません")

    channels = pred.shape[2] if pred.ndim == 3 else 1
    diff = (pred - gt)[region]
    return float(np.sum(diff ** 2) / (channels * count))


@dataclass
class EvalRecord:
    """1画像の評価結果"""

    sample_id: str
    psnr: float
    mse: float
    fmse: float
    foreground_ratio: float
    seed: int = 0


def score_images(
    sample_id: str,
    pred: torch.Tensor,
    gt: torch.Tensor,
    mask: torch.Tensor,
    seed: int = 0,
    round_to_uint8: bool = False,
) -> EvalRecord:
    """[-1, 1] テンソルの予測と正解を評価"""
    pred_px = tensor_to_pixels(pred, round_to_uint8)
    gt_px = tensor_to_pixels(gt, round_to_uint8)
    mask_np = mask.detach().cpu().numpy()
    value = mse(pred_px, gt_px)
    return EvalRecord(
        sample_id=sample_id,
        psnr=psnr_from_mse(value),
        mse=value,
        fmse=fmse(pred_px, gt_px, mask_np),
        foreground_ratio=foreground_ratio(mask_np),
        seed=seed,
    )


@dataclass
class GroupStats:
    """グループ平均"""

    count: int
    psnr: Optional[float] = None
    mse: Optional[float] = None
    fmse: Optional[float] = None

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    """集計レポート"""

    seeds: list[int]
    overall: GroupStats
    subsets: dict[str, GroupStats]
    buckets: dict[str, GroupStats]
    per_seed: dict[int, GroupStats] = field(default_factory=dict)
    # 指標名 -> (シード平均, 標本標準偏差)
    seed_stats: dict[str, tuple[float, float]] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)


def _group_means(records: list[EvalRecord]) -> GroupStats:
    if not records:
        return GroupStats(count=0)
    return GroupStats(
        count=len(records),
        psnr=float(np.mean([r.psnr for r in records])),
        mse=float(np.mean([r.mse for r in records])),
        fmse=float(np.mean([r.fmse for r in records])),
    )


def _average_over_seeds(groups: list[GroupStats]) -> GroupStats:
    present = [g for g in groups if g.count > 0]
    if not present:
        return GroupStats(count=0)
    return GroupStats(
        count=max(g.count for g in present),
        psnr=float(np.mean([g.psnr for g in present])),
        mse=float(np.mean([g.mse for g in present])),
        fmse=float(np.mean([g.fmse for g in present])),
    )


def aggregate(
    records: list[EvalRecord],
    manifest: Union[SplitManifest, Mapping[str, HarmonySample]],
    notes: Optional[dict[str, str]] = None,
) -> EvalReport:
    """サブセット別・前景比率バケット別・シード別に集計"""
    if not records:
        raise ParameterError("評価レコードが空です")

    index = manifest.index() if isinstance(manifest, SplitManifest) else dict(manifest)
    unknown = sorted({r.sample_id for r in records if r.sample_id not in index})
    if unknown:
        raise AggregationError(f"マニフェストに存在しないサンプルIDがあります: {', '.join(unknown[:10])}")

    seeds = sorted({r.seed for r in records})
    subset_names = sorted({index[r.sample_id].subset for r in records})

    per_seed_overall, per_seed_subsets, per_seed_buckets = {}, {}, {}
    for seed in seeds:
        seed_records = [r for r in records if r.seed == seed]
        per_seed_overall[seed] = _group_means(seed_records)
        per_seed_subsets[seed] = {
            name: _group_means([r for r in seed_records if index[r.sample_id].subset == name])
            for name in subset_names
        }
        per_seed_buckets[seed] = {
            label: _group_means([
                r for r in seed_records if bucket_of(index[r.sample_id].foreground_ratio) == label
            ])
            for label in BUCKET_LABELS
        }

    seed_stats = {}
    if len(seeds) > 1:
        for name in METRIC_NAMES:
            values = np.array([getattr(per_seed_overall[s], name) for s in seeds], dtype=np.float64)
            seed_stats[name] = (float(values.mean()), float(values.std(ddof=1)))

    return EvalReport(
        seeds=seeds,
        overall=_average_over_seeds(list(per_seed_overall.values())),
        subsets={
            name: _average_over_seeds([per_seed_subsets[s][name] for s in seeds]) for name in subset_names
        },
        buckets={
            label: _average_over_seeds([per_seed_buckets[s][label] for s in seeds]) for label in BUCKET_LABELS
        },
        per_seed=per_seed_overall,
        seed_stats=seed_stats,
        notes=dict(notes or {}),
    )


def format_mean_std(mean: float, std: float) -> str:
    """「平均 ± 標準偏差」形式（小数2桁）"""
    return f"{mean:.2f} ± {std:.2f}"


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.2f}"


def format_report(report: EvalReport, title: str = "Evaluation") -> str:
    """人間向けのテキスト表"""
    header = f"{'group':<14}{'count':>7}{'PSNR':>10}{'MSE':>10}{'fMSE':>10}"

    def row(name: str, stats: GroupStats) -> str:
        return f"{name:<14}{stats.count:>7}{_fmt(stats.psnr):>10}{_fmt(stats.mse):>10}{_fmt(stats.fmse):>10}"

    lines = [f"# {title}", "", "## Subsets", header]
    lines += [row(name, stats) for name, stats in report.subsets.items()]
    lines.append(row("Average", report.overall))
    lines += ["", "## Foreground ratio", header]
    lines += [row(label, stats) for label, stats in report.buckets.items()]

    if report.seed_stats:
        lines += ["", f"## Randomness ({len(report.seeds)} seeds)"]
        lines.append("  ".join(
            f"{name.upper() if name != 'fmse' else 'fMSE'}: {format_mean_std(*report.seed_stats[name])}"
            for name in METRIC_NAMES
        ))

    if report.notes:
        lines += ["", "## Notes"]
        lines += [f"{key}: {value}" for key, value in report.notes.items()]
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, output_dir: Union[str, Path], title: str = "Evaluation") -> tuple[Path, Path]:
    """テキスト表とCSVを書き出し"""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    text_path = output_dir / "report.txt"
    text_path.write_text(format_report(report, title), encoding="utf-8")

    csv_path = output_dir / "report.csv"
    fieldnames = ["section", "group", "count", "psnr", "mse", "fmse", "psnr_std", "mse_std", "fmse_std"]
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for name, stats in report.subsets.items():
            writer.writerow({"section": "subset", "group": name, **stats.as_row()})
        overall = {"section": "overall", "group": "Average", **report.overall.as_row()}
        for name, (_, std) in report.seed_stats.items():
            overall[f"{name}_std"] = std
        writer.writerow(overall)
        for label, stats in report.buckets.items():
            writer.writerow({"section": "bucket", "group": label, **stats.as_row()})
        for seed, stats in report.per_seed.items():
            writer.writerow({"section": "seed", "group": str(seed), **stats.as_row()})
    return text_path, csv_path


def write_records(records: Iterable[EvalRecord], path: Union[str, Path]):
    """評価レコードをJSON Linesで書き出し"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(asdict(record)) + "\n")


def read_records(path: Union[str, Path]) -> list[EvalRecord]:
    """JSON Linesの評価レコードを読み込み"""
    with open(path, encoding="utf-8") as f:
        return [EvalRecord(**json.loads(line)) for line in f if line.strip()]
