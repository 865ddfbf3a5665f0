import csv
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from src.core.dataset import BUCKET_LABELS, HarmonySample, SplitManifest, bucket_of
from src.core.metrics import (
    EvalRecord,
    aggregate,
    fmse,
    format_mean_std,
    format_report,
    mse,
    psnr,
    psnr_from_mse,
    read_records,
    score_images,
    write_records,
    write_report,
)
from src.utils.errors import AggregationError, ParameterError, ValidationError


def _brute_force(pred, gt, mask):
    height, width, channels = pred.shape
    total = 0.0
    fg_total = 0.0
    fg_count = 0
    for y in range(height):
        for x in range(width):
            inside = mask[y, x] == 1
            fg_count += int(inside)
            for c in range(channels):
                d = float(pred[y, x, c]) - float(gt[y, x, c])
                total += d * d
                if inside:
                    fg_total += d * d
    return total / (height * width * channels), fg_total / (channels * fg_count)


def test_metrics_match_brute_force_loops():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred = rng.uniform(0, 255, (64, 64, 3))
        gt = rng.uniform(0, 255, (64, 64, 3))
        mask = (rng.random((64, 64)) < 0.3).astype(np.uint8)
        mask[0, 0] = 1
        expected_mse, expected_fmse = _brute_force(pred, gt, mask)
        assert mse(pred, gt) == pytest.approx(expected_mse, rel=1e-9)
        assert fmse(pred, gt, mask) == pytest.approx(expected_fmse, rel=1e-9)
        assert psnr(pred, gt) == pytest.approx(10 * math.log10(255 ** 2 / expected_mse), rel=1e-9)


def test_mse_constant_offset():
    gt = np.full((4, 4, 3), 100.0)
    assert mse(gt, gt) == 0.0
    assert mse(gt + 10, gt) == pytest.approx(100.0)


def test_psnr_values_and_cap():
    assert psnr_from_mse(100.0) == pytest.approx(10 * math.log10(650.25))
    assert psnr_from_mse(255.0 ** 2) == pytest.approx(0.0)
    image = np.zeros((2, 2, 3))
    assert psnr(image, image) == 100.0


def test_psnr_is_strictly_decreasing_below_cap():
    values = [psnr_from_mse(m) for m in (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_fmse_cases():
    gt = np.zeros((4, 4, 3))
    full = np.ones((4, 4), dtype=np.uint8)
    pred = gt + np.arange(48, dtype=np.float64).reshape(4, 4, 3)
    assert fmse(pred, gt, full) == mse(pred, gt)

    half = np.zeros((4, 4), dtype=np.uint8)
    half[:2] = 1
    outside_only = gt.copy()
    outside_only[2:] = 50.0
    assert fmse(outside_only, gt, half) == 0.0

    inside = gt.copy()
    inside[:2] += 10.0
    assert fmse(inside, gt, half) == pytest.approx(100.0)
    assert mse(inside, gt) == pytest.approx(fmse(inside, gt, half) * 0.5, rel=1e-9)


def test_metric_errors():
    with pytest.raises(ParameterError):
        mse(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(ValidationError):
        fmse(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        fmse(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.full((2, 2), 0.5))
    with pytest.raises(ParameterError):
        fmse(np.zeros((2, 2, 3)), np.zeros((2, 2, 3)), np.ones((3, 3)))


def test_score_images_on_tensors():
    gt = torch.zeros(3, 8, 8)
    mask = torch.zeros(1, 8, 8)
    mask[:, :4] = 1
    record = score_images("synthetic/a_1_1", gt.clone(), gt, mask, seed=3)
    assert record.psnr == 100.0
    assert record.mse == 0.0
    assert record.foreground_ratio == 0.5
    assert record.seed == 3


@pytest.mark.parametrize("ratio,label", [
    (0.0001, BUCKET_LABELS[0]),
    (0.0499, BUCKET_LABELS[0]),
    (0.05, BUCKET_LABELS[1]),
    (0.1499, BUCKET_LABELS[1]),
    (0.15, BUCKET_LABELS[2]),
    (1.0, BUCKET_LABELS[2]),
])
def test_bucket_boundaries(ratio, label):
    assert bucket_of(ratio) == label


@pytest.mark.parametrize("ratio", [0.0, -0.1, 1.01])
def test_bucket_rejects_out_of_range(ratio):
    with pytest.raises(ParameterError):
        bucket_of(ratio)


def _sample(subset, stem, ratio):
    base = Path("/data") / subset
    return HarmonySample(
        base / "composite_images" / f"{stem}_1_1.jpg",
        base / "masks" / f"{stem}_1.png",
        base / "real_images" / f"{stem}.jpg",
        subset,
        ratio,
    )


def _record(sample, psnr_value, mse_value, fmse_value, seed=0):
    return EvalRecord(sample.sample_id, psnr_value, mse_value, fmse_value, sample.foreground_ratio, seed)


def test_aggregate_single_record():
    sample = _sample("HCOCO", "c1", 0.2)
    report = aggregate([_record(sample, 30.0, 50.0, 400.0)], SplitManifest([], [sample]))
    assert report.overall.count == 1
    assert (report.overall.psnr, report.overall.mse, report.overall.fmse) == (30.0, 50.0, 400.0)
    assert report.subsets["HCOCO"].psnr == 30.0
    assert report.buckets[BUCKET_LABELS[2]].count == 1
    assert report.seed_stats == {}


def test_aggregate_weights_overall_by_sample_count():
    a = _sample("HFlickr", "f1", 0.01)
    bs = [_sample("HCOCO", f"c{i}", 0.1) for i in range(3)]
    records = [_record(a, 20.0, 10.0, 100.0)] + [_record(b, 40.0, 30.0, 300.0) for b in bs]
    report = aggregate(records, SplitManifest([], [a] + bs))

    assert report.overall.psnr == pytest.approx((1 * 20.0 + 3 * 40.0) / 4, rel=1e-9)
    weighted = sum(s.count * s.mse for s in report.subsets.values()) / report.overall.count
    assert report.overall.mse == pytest.approx(weighted, rel=1e-9)
    assert sum(s.count for s in report.buckets.values()) == len(records)
    assert report.buckets[BUCKET_LABELS[0]].count == 1
    assert report.buckets[BUCKET_LABELS[1]].count == 3
    assert report.buckets[BUCKET_LABELS[2]].psnr is None


def test_aggregate_multi_seed_statistics():
    sample = _sample("HCOCO", "c1", 0.3)
    values = [37.64, 37.65, 37.66, 37.67, 37.68]
    records = [_record(sample, v, 1.0, 2.0, seed=i) for i, v in enumerate(values)]
    report = aggregate(records, {sample.sample_id: sample})

    mean, std = report.seed_stats["psnr"]
    assert mean == pytest.approx(37.66)
    assert std == pytest.approx(np.std(values, ddof=1))
    assert format_mean_std(mean, std) == "37.66 ± 0.02"
    assert report.seeds == [0, 1, 2, 3, 4]
    assert "Randomness (5 seeds)" in format_report(report)


def test_aggregate_errors():
    sample = _sample("HCOCO", "c1", 0.3)
    with pytest.raises(ParameterError):
        aggregate([], SplitManifest([], [sample]))
    with pytest.raises(AggregationError):
        aggregate([_record(_sample("HCOCO", "zzz", 0.3), 1, 1, 1)], SplitManifest([], [sample]))


def test_write_report_and_records(tmp_path):
    samples = [_sample("HCOCO", "c1", 0.02), _sample("HAdobe5k", "a1", 0.5)]
    records = [_record(samples[0], 30.0, 10.0, 200.0), _record(samples[1], 35.0, 5.0, 20.0)]
    report = aggregate(records, SplitManifest([], samples), notes={"rounding": "float"})

    text_path, csv_path = write_report(report, tmp_path / "eval")
    text = text_path.read_text(encoding="utf-8")
    assert "HAdobe5k" in text and "Average" in text and "rounding: float" in text

    with open(csv_path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    sections = [row["section"] for row in rows]
    assert sections.count("subset") == 2
    assert sections.count("overall") == 1
    assert sections.count("bucket") == len(BUCKET_LABELS)
    assert sections.count("seed") == 1

    write_records(records, tmp_path / "records.jsonl")
    assert read_records(tmp_path / "records.jsonl") == records
