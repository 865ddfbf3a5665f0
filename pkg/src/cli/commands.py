#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
サブコマンドの実装

各コマンドは解決済みの設定を出力ディレクトリへ run_config.json として書き出す。
"""

import argparse
import json
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch
from torchvision.utils import make_grid

from ..core.dataset import (
    HarmonySample,
    SplitManifest,
    generate_base_images,
    load_iharmony4,
    load_triplet,
    make_synthetic_set,
    parse_composite_name,
)
from ..core.denoiser import ConditionalDenoiser
from ..core.latent_codec import LatentCodec, reconstruction_error, train_codec
from ..core.metrics import (
    EvalRecord,
    GroupStats,
    aggregate,
    format_report,
    score_images,
    write_records,
    write_report,
)
from ..core.pipeline import HarmonizationModels, HarmonizationRequest, harmonize_batch, output_name, write_manifest
from ..core.refinement import (
    RefinerInput,
    RefinerUNet,
    generate_refine_tuples,
    load_refine_tuples,
    refine,
    save_refine_tuples,
    train_refiner,
)
from ..core.schedule_sampler import schedule_from_config
from ..core.training import HarmonyTrainer
from ..utils.config import ConfigManager, RunConfig, load_run_config
from ..utils.errors import ConfigError, DataLoadError, ParameterError, ValidationError
from ..utils.image_io import (
    list_images,
    load_image_tensor,
    load_mask_tensor,
    resize_image,
    resize_mask,
    save_rgb,
    tensor_to_uint8,
)
from ..utils.logger import ScalarLogWriter, get_logger
from ..utils.validator import RunConfigValidator

TRAINING_COMMANDS = {"train-codec": "codec.train_steps", "train-refine": "refine.train_steps"}
INFERENCE_COMMANDS = {"infer", "evaluate", "ablate", "train-refine", "codec-distortion"}


# ---------------------------------------------------------------------------
# 設定の解決
# ---------------------------------------------------------------------------

def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    overrides = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set は KEY=VALUE 形式で指定してください: {item}")
        key, raw = item.split("=", 1)
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def collect_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """フラグを設定キーへ対応付け（フラグが最優先）"""
    overrides = _parse_set(getattr(args, "set", []) or [])
    if getattr(args, "dataset_root", None):
        overrides["data.dataset_root"] = args.dataset_root
    if getattr(args, "device", None):
        overrides["device"] = args.device
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if getattr(args, "seed", None) is not None:
        for key in ("sampler.seed", "train.seed", "codec.seed", "refine.seed", "data.synthetic_seed"):
            overrides[key] = args.seed
    if getattr(args, "steps", None) is not None:
        if args.command in TRAINING_COMMANDS:
            overrides[TRAINING_COMMANDS[args.command]] = args.steps
        elif args.command in INFERENCE_COMMANDS:
            overrides["sampler.num_inference_steps"] = args.steps
    if getattr(args, "resolution", None) is not None:
        overrides["inference.inference_resolution"] = args.resolution
    if getattr(args, "no_refine", False):
        overrides["inference.refine"] = False
    if getattr(args, "no_blend", False):
        overrides["inference.blend_background"] = False
    if getattr(args, "parallelism", None) is not None:
        overrides["inference.parallelism"] = args.parallelism
    if getattr(args, "seeds", None) is not None:
        overrides["evaluation.num_seeds"] = args.seeds
    if getattr(args, "round", False):
        overrides["evaluation.round_to_uint8"] = True
    if getattr(args, "baseline", None):
        overrides["evaluation.baseline"] = args.baseline
    for name in ("codec", "denoiser", "refiner"):
        if getattr(args, name, None):
            overrides[f"checkpoints.{name}"] = getattr(args, name)
    if getattr(args, "tuples", None):
        overrides["checkpoints.refine_tuples"] = args.tuples
    return overrides


def prepare(
    args: argparse.Namespace,
    require_dataset: bool = False,
    checkpoints: Sequence[str] = (),
) -> tuple[RunConfig, Path]:
    """設定を解決・検証し、出力ディレクトリへ書き出す"""
    config_manager = ConfigManager()
    run_config = load_run_config(args.config, args.preset, collect_overrides(args), config_manager)
    output_dir = Path(run_config.output_dir or Path(config_manager.get_output_directory()) / args.command)

    # 事前学習済みモデルを使う場合はコーデックのチェックポイントは不要
    required = tuple(c for c in checkpoints if not (c == "codec" and run_config.codec.pretrained))
    RunConfigValidator(config_manager, run_config, output_dir).require(require_dataset, required)

    run_config = run_config.model_copy(update={"output_dir": str(output_dir)})
    run_config.dump(output_dir)
    return run_config, output_dir


# ---------------------------------------------------------------------------
# モデル・データの読み込み
# ---------------------------------------------------------------------------

def load_codec(run_config: RunConfig) -> LatentCodec:
    """コーデックを読み込み"""
    if run_config.checkpoints.codec:
        codec = LatentCodec.load(run_config.checkpoints.codec)
    elif run_config.codec.pretrained:
        codec = LatentCodec.from_pretrained(run_config.codec.pretrained)
    else:
        raise ConfigError("コーデックのチェックポイントが指定されていません (--codec)")
    return codec.to(run_config.device).freeze()


def load_denoiser(run_config: RunConfig, for_training: bool = False) -> ConditionalDenoiser:
    """デノイザーを読み込み（学習時はチェックポイントが無ければ新規作成）"""
    if run_config.checkpoints.denoiser:
        return ConditionalDenoiser.load(run_config.checkpoints.denoiser)
    if run_config.denoiser.pretrained:
        return ConditionalDenoiser.from_pretrained(run_config.denoiser.pretrained)
    if for_training:
        return ConditionalDenoiser.build(run_config.denoiser, seed=run_config.train.seed)
    raise ConfigError("デノイザーのチェックポイントが指定されていません (--denoiser)")


def check_denoiser_schedule(denoiser: ConditionalDenoiser, run_config: RunConfig):
    """デノイザーのタイムステップ範囲がスケジュールの T と一致するか確認"""
    if denoiser.config.num_train_steps != run_config.schedule.num_train_steps:
        raise ConfigError(
            f"デノイザーの学習ステップ数 {denoiser.config.num_train_steps} と"
            f"スケジュールの T={run_config.schedule.num_train_steps} が一致しません"
        )


def load_models(run_config: RunConfig) -> HarmonizationModels:
    """推論用モデル一式を読み込み"""
    codec = load_codec(run_config)
    denoiser = load_denoiser(run_config).to(run_config.device)
    check_denoiser_schedule(denoiser, run_config)
    if denoiser.config.latent_channels != codec.latent_channels:
        raise ConfigError(
            f"デノイザーとコーデックの潜在チャンネル数が一致しません: {denoiser.config.latent_channels} vs {codec.latent_channels}"
        )
    return HarmonizationModels(codec, denoiser, schedule_from_config(run_config.schedule)).eval()


def load_refiner(run_config: RunConfig) -> Optional[RefinerUNet]:
    """補正ネットワークを読み込み（無効時はNone）"""
    if not run_config.inference.refine:
        return None
    if not run_config.checkpoints.refiner:
        raise ConfigError("補正ネットワークのチェックポイントが指定されていません (--refiner または --no-refine)")
    refiner = RefinerUNet.load(run_config.checkpoints.refiner).to(run_config.device)
    if refiner.config.resolution != run_config.inference.output_resolution:
        raise ConfigError(
            f"補正解像度 {refiner.config.resolution} と出力解像度 {run_config.inference.output_resolution} が一致しません"
        )
    return refiner


def load_manifest(run_config: RunConfig) -> SplitManifest:
    """データセットを読み込み、上限件数を適用"""
    manifest = load_iharmony4(run_config.data.dataset_root)
    train, test = manifest.train, manifest.test
    if run_config.data.max_train_samples:
        train = train[:run_config.data.max_train_samples]
    if run_config.data.max_test_samples:
        test = test[:run_config.data.max_test_samples]
    return SplitManifest(train=train, test=test, skipped=manifest.skipped)


def unique_real_images(samples: Sequence[HarmonySample], size: Optional[int], limit: Optional[int] = None) -> list[torch.Tensor]:
    """重複を除いた正解画像を読み込み"""
    seen, images = set(), []
    for sample in samples:
        if sample.real_path in seen:
            continue
        seen.add(sample.real_path)
        images.append(load_image_tensor(sample.real_path, size))
        if limit is not None and len(images) >= limit:
            break
    if not images:
        raise DataLoadError("正解画像がありません")
    return images


def prediction_name(sample_id: str) -> str:
    """サンプルIDに対応する予測ファイル名"""
    return sample_id.replace("/", "__") + ".png"


# ---------------------------------------------------------------------------
# 推論の共通処理
# ---------------------------------------------------------------------------

def build_requests(samples: Sequence[HarmonySample], run_config: RunConfig, inference_resolution: Optional[int] = None) -> list[HarmonizationRequest]:
    return [
        HarmonizationRequest.from_files(
            sample.composite_path,
            sample.mask_path,
            inference_resolution=inference_resolution or run_config.inference.inference_resolution,
            output_resolution=run_config.inference.output_resolution,
            sampler=run_config.sampler,
            blend_background=run_config.inference.blend_background,
        )
        for sample in samples
    ]


def run_inference(
    requests: Sequence[HarmonizationRequest],
    models: HarmonizationModels,
    refiner: Optional[RefinerUNet],
    run_config: RunConfig,
    base_seed: int,
    stage1_dir: Optional[Path] = None,
) -> tuple[list[Optional[torch.Tensor]], list[dict[str, Any]]]:
    """第1段階 + 任意の第2段階"""
    images, manifest = harmonize_batch(
        requests, models, run_config.inference.parallelism, base_seed, output_dir=stage1_dir
    )
    if refiner is None:
        return images, manifest

    size = run_config.inference.output_resolution
    refined = []
    for request, image, record in zip(requests, images, manifest):
        if image is None:
            refined.append(None)
            continue
        inputs = RefinerInput(image, resize_image(request.composite, size), resize_mask(request.mask, size))
        refined.append(refine(inputs, refiner))
        record["refined"] = True
    return refined, manifest


def score_predictions(
    samples: Sequence[HarmonySample],
    predictions: Sequence[Optional[torch.Tensor]],
    run_config: RunConfig,
    seed: int,
    notes: dict[str, Any],
) -> list[EvalRecord]:
    """予測を出力解像度の正解と比較"""
    logger = get_logger()
    size = run_config.inference.output_resolution
    records = []
    for sample, prediction in zip(samples, predictions):
        if prediction is None:
            notes["failed"] = notes.get("failed", 0) + 1
            continue
        triplet = load_triplet(sample)
        try:
            records.append(score_images(
                sample.sample_id,
                resize_image(prediction, size),
                resize_image(triplet.real, size),
                resize_mask(triplet.mask, size),
                seed=seed,
                round_to_uint8=run_config.evaluation.round_to_uint8,
            ))
        except ValidationError as e:
            # 縮小で前景が消えたサンプル
            logger.warning(f"{sample.sample_id} を評価から除外します: {e}")
            notes["skipped_empty_mask"] = notes.get("skipped_empty_mask", 0) + 1
    return records


# ---------------------------------------------------------------------------
# コマンド
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args: argparse.Namespace) -> int:
    """合成データセットを生成"""
    run_config, output_dir = prepare(args)
    data = run_config.data
    count = args.count or data.synthetic_count
    root = Path(data.dataset_root) if data.dataset_root else output_dir / "dataset"

    base_images = generate_base_images(data.synthetic.base_images, data.synthetic.image_size, data.synthetic_seed)
    manifest = make_synthetic_set(base_images, count, data.synthetic_seed, root, data.synthetic)
    manifest.save(output_dir / "manifest.jsonl")
    get_logger().info(f"データセット: {root} (train={len(manifest.train)}, test={len(manifest.test)})")
    return 0


def cmd_train_codec(args: argparse.Namespace) -> int:
    """トイコーデックを学習"""
    run_config, output_dir = prepare(args, require_dataset=True)
    manifest = load_manifest(run_config)
    images = torch.stack(unique_real_images(manifest.train, run_config.codec.image_size))

    log = ScalarLogWriter(output_dir / "codec_log.csv", ["step", "loss"])
    codec = train_codec(
        images, run_config.codec, run_config.device,
        step_callback=lambda step, loss: log.write({"step": step, "loss": loss}) if step % 10 == 0 else None,
    )
    path = output_dir / "codec.safetensors"
    codec.save(path)
    get_logger().info(f"コーデックを保存しました: {path}")
    return 0


def cmd_codec_distortion(args: argparse.Namespace) -> int:
    """入力解像度ごとの往復誤差（低解像度ほど大きいことを確認）"""
    run_config, output_dir = prepare(args, require_dataset=True, checkpoints=("codec",))
    codec = load_codec(run_config)
    manifest = load_manifest(run_config)
    images = unique_real_images(manifest.test, None, run_config.evaluation.distortion_images)

    eval_resolution = run_config.inference.output_resolution
    results = {
        res: reconstruction_error(images, codec, res, eval_resolution)
        for res in sorted(run_config.evaluation.distortion_resolutions)
    }
    errors = list(results.values())
    monotone = all(a >= b for a, b in zip(errors, errors[1:]))

    lines = ["# Codec distortion", "", f"{'input':>8}{'MSE@' + str(eval_resolution):>14}"]
    lines += [f"{res:>8}{value:>14.3f}" for res, value in results.items()]
    lines += ["", f"lower input resolution distorts more: {'yes' if monotone else 'no'}", f"images: {len(images)}"]
    (output_dir / "distortion.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (output_dir / "distortion.json").write_text(json.dumps({
        "eval_resolution": eval_resolution,
        "mse": {str(k): v for k, v in results.items()},
        "monotone": monotone,
        "images": len(images),
    }, indent=2), encoding="utf-8")
    print("\n".join(lines))
    return 0


def cmd_train_harmony(args: argparse.Namespace) -> int:
    """第1段階の拡散モデルを学習"""
    run_config, output_dir = prepare(args, require_dataset=True, checkpoints=("codec",))
    manifest = load_manifest(run_config)
    if not manifest.train:
        raise DataLoadError("学習サンプルがありません")

    codec = load_codec(run_config)
    denoiser = load_denoiser(run_config, for_training=True)
    check_denoiser_schedule(denoiser, run_config)
    if denoiser.config.latent_channels != codec.latent_channels:
        raise ConfigError("デノイザーとコーデックの潜在チャンネル数が一致しません")

    trainer = HarmonyTrainer(
        output_dir, codec, denoiser, schedule_from_config(run_config.schedule), run_config.train, run_config.device
    )
    if args.resume:
        trainer.resume()
    summary = trainer.fit(manifest.train, max_steps=args.steps)
    (output_dir / "train_summary.json").write_text(json.dumps(summary.as_dict(), indent=2), encoding="utf-8")
    return 0


def cmd_train_refine(args: argparse.Namespace) -> int:
    """第2段階の補正ネットワークを学習（学習組が無ければ第1段階で生成）"""
    run_config, output_dir = prepare(args, require_dataset=True, checkpoints=("codec", "denoiser"))
    logger = get_logger()

    tuples_dir = run_config.checkpoints.refine_tuples
    if tuples_dir and Path(tuples_dir).exists():
        tuples = load_refine_tuples(tuples_dir)
        logger.info(f"既存の学習組を使用します: {tuples_dir} ({len(tuples)} 件)")
    else:
        manifest = load_manifest(run_config)
        models = load_models(run_config)
        tuples = generate_refine_tuples(
            manifest.train,
            models,
            run_config.sampler,
            run_config.inference.inference_resolution,
            seeds_per_sample=run_config.refine.seeds_per_sample,
            blend_background=run_config.inference.blend_background,
            resolution=run_config.refine.resolution,
        )
        save_refine_tuples(tuples, Path(tuples_dir) if tuples_dir else output_dir / "refine_tuples")

    log = ScalarLogWriter(output_dir / "refine_log.csv", ["step", "loss"])
    refiner = train_refiner(
        tuples, run_config.refine, run_config.device,
        step_callback=lambda step, loss: log.write({"step": step, "loss": loss}) if step % 10 == 0 else None,
    )
    path = output_dir / "refiner.safetensors"
    refiner.save(path)
    logger.info(f"補正ネットワークを保存しました: {path}")
    return 0


def _find_mask(composite: Path, mask_dir: Path) -> Path:
    direct = mask_dir / f"{composite.stem}.png"
    if direct.exists():
        return direct
    parsed = parse_composite_name(composite.name)
    if parsed is not None:
        return mask_dir / f"{parsed[1]}.png"
    return direct


def cmd_infer(args: argparse.Namespace) -> int:
    """画像ディレクトリを調和化し、PNGとマニフェストを書き出す"""
    run_config, output_dir = prepare(args, checkpoints=("codec", "denoiser"))
    input_dir = Path(args.input_dir)
    mask_dir = Path(args.mask_dir) if args.mask_dir else input_dir / "masks"

    composites = list_images(input_dir)
    if not composites:
        raise ParameterError(f"入力画像がありません: {input_dir}")
    masks = [_find_mask(path, mask_dir) for path in composites]
    missing = [str(m) for m in masks if not m.exists()]
    if missing:
        raise DataLoadError("マスクが見つかりません", missing)

    models = load_models(run_config)
    refiner = load_refiner(run_config)
    requests = [
        HarmonizationRequest(
            composite=load_image_tensor(c),
            mask=load_mask_tensor(m),
            inference_resolution=run_config.inference.inference_resolution,
            output_resolution=run_config.inference.output_resolution,
            sampler=run_config.sampler,
            blend_background=run_config.inference.blend_background,
            source=str(c),
        )
        for c, m in zip(composites, masks)
    ]
    stage1_dir = output_dir / "stage1" if refiner is not None else None
    images, manifest = run_inference(requests, models, refiner, run_config, run_config.sampler.seed, stage1_dir)

    images_dir = output_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    for index, (composite, image, record) in enumerate(zip(composites, images, manifest)):
        if image is None:
            continue
        if "output" in record and record["output"]:
            record["stage1_output"] = record["output"]
        path = images_dir / output_name(str(composite), index)
        save_rgb(tensor_to_uint8(image), path)
        record["output"] = str(path)
    write_manifest(manifest, output_dir / "manifest.jsonl")

    failed = sum(1 for record in manifest if record["status"] != "ok")
    return 0 if failed == 0 else DataLoadError.exit_code


def _load_predictions(pred_dir: Path, samples: Sequence[HarmonySample]) -> list[torch.Tensor]:
    predictions, missing = [], []
    for sample in samples:
        candidates = [pred_dir / prediction_name(sample.sample_id), pred_dir / f"{Path(sample.composite_path).stem}.png"]
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            missing.append(str(candidates[0]))
            continue
        predictions.append(load_image_tensor(found))
    if missing:
        raise DataLoadError("予測画像が見つかりません", missing)
    return predictions


def cmd_evaluate(args: argparse.Namespace) -> int:
    """テスト分割で評価し、サブセット別・前景比率別・シード別の表を書き出す"""
    baseline = args.baseline
    needs_models = not baseline and not args.pred_dir
    checkpoints = ("codec", "denoiser") if needs_models else ()
    run_config, output_dir = prepare(args, require_dataset=True, checkpoints=checkpoints)
    manifest = load_manifest(run_config)
    samples = manifest.test
    if not samples:
        raise DataLoadError("テストサンプルがありません")

    notes: dict[str, Any] = {"round_to_uint8": run_config.evaluation.round_to_uint8}
    records: list[EvalRecord] = []
    if baseline == "composite":
        notes["prediction"] = "composite"
        predictions = [load_image_tensor(s.composite_path) for s in samples]
        records = score_predictions(samples, predictions, run_config, 0, notes)
    elif args.pred_dir:
        notes["prediction"] = str(args.pred_dir)
        predictions = _load_predictions(Path(args.pred_dir), samples)
        records = score_predictions(samples, predictions, run_config, run_config.sampler.seed, notes)
    else:
        models = load_models(run_config)
        refiner = load_refiner(run_config)
        notes.update({
            "prediction": "model",
            "blend_background": run_config.inference.blend_background,
            "refine": refiner is not None,
            "inference_resolution": run_config.inference.inference_resolution,
            "num_inference_steps": run_config.sampler.num_inference_steps,
        })
        requests = build_requests(samples, run_config)
        for k in range(run_config.evaluation.num_seeds):
            seed = run_config.sampler.seed + k
            images, _ = run_inference(requests, models, refiner, run_config, seed * len(requests))
            if k == 0:
                pred_dir = output_dir / "predictions"
                pred_dir.mkdir(parents=True, exist_ok=True)
                for sample, image in zip(samples, images):
                    if image is not None:
                        save_rgb(tensor_to_uint8(image), pred_dir / prediction_name(sample.sample_id))
            records += score_predictions(samples, images, run_config, seed, notes)

    if not records:
        raise DataLoadError("評価できるサンプルがありません")
    report = aggregate(records, manifest, notes={k: str(v) for k, v in notes.items()})
    write_records(records, output_dir / "records.jsonl")
    write_report(report, output_dir)
    print(format_report(report))
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    """推論解像度 × 補正有無の4行表"""
    run_config, output_dir = prepare(args, require_dataset=True, checkpoints=("codec", "denoiser", "refiner"))
    manifest = load_manifest(run_config)
    samples = manifest.test
    if not samples:
        raise DataLoadError("テストサンプルがありません")

    models = load_models(run_config)
    refiner = load_refiner(run_config.model_copy(update={
        "inference": run_config.inference.model_copy(update={"refine": True})
    }))
    rows: dict[str, GroupStats] = {}
    for resolution in sorted(run_config.inference.ablation_resolutions):
        requests = build_requests(samples, run_config, resolution)
        stage1, _ = run_inference(requests, models, None, run_config, run_config.sampler.seed)
        size = run_config.inference.output_resolution
        refined = [
            refine(RefinerInput(image, resize_image(r.composite, size), resize_mask(r.mask, size)), refiner)
            if image is not None else None
            for r, image in zip(requests, stage1)
        ]
        for label, images in (("off", stage1), ("on", refined)):
            notes: dict[str, Any] = {}
            records = score_predictions(samples, images, run_config, run_config.sampler.seed, notes)
            rows[f"{resolution}px refine={label}"] = aggregate(records, manifest).overall

    resolutions = sorted(run_config.inference.ablation_resolutions)
    low, high = resolutions[0], resolutions[-1]
    checks = {
        "higher resolution lowers fMSE": rows[f"{high}px refine=off"].fmse <= rows[f"{low}px refine=off"].fmse,
        "refinement lowers fMSE": all(
            rows[f"{r}px refine=on"].fmse <= rows[f"{r}px refine=off"].fmse for r in resolutions
        ),
    }

    header = f"{'setting':<24}{'PSNR':>10}{'MSE':>10}{'fMSE':>10}"
    lines = ["# Ablation", f"blend_background: {run_config.inference.blend_background}", "", header]
    lines += [f"{name:<24}{s.psnr:>10.2f}{s.mse:>10.2f}{s.fmse:>10.2f}" for name, s in rows.items()]
    lines += [""] + [f"{name}: {'yes' if ok else 'no'}" for name, ok in checks.items()]
    (output_dir / "ablation.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    with open(output_dir / "ablation.csv", "w", encoding="utf-8") as f:
        f.write("setting,count,psnr,mse,fmse\n")
        for name, s in rows.items():
            f.write(f"{name},{s.count},{s.psnr},{s.mse},{s.fmse}\n")
    print("\n".join(lines))
    return 0


def _grid_cell(path: Path, size: int, is_mask: bool = False) -> torch.Tensor:
    if is_mask:
        mask = load_mask_tensor(path, size)
        return mask.expand(3, -1, -1).clone()
    return (load_image_tensor(path, size) + 1.0) / 2.0


def cmd_report_grid(args: argparse.Namespace) -> int:
    """行 = サンプル、列 = 合成 | マスク | 出力… | 正解 のグリッドPNG"""
    run_config, output_dir = prepare(args)
    columns = [list_images(args.composites)]
    if args.masks:
        columns.append(list_images(args.masks))
    columns += [list_images(d) for d in args.outputs]
    columns.append(list_images(args.gts))

    lengths = {len(c) for c in columns}
    if len(lengths) != 1 or 0 in lengths:
        raise ParameterError(f"ディレクトリ間で画像数が一致しません: {[len(c) for c in columns]}")

    mask_column = 1 if args.masks else None
    cells = []
    for row in range(len(columns[0])):
        for col, files in enumerate(columns):
            cells.append(_grid_cell(files[row], args.size, is_mask=col == mask_column))
    grid = make_grid(torch.stack(cells), nrow=len(columns), padding=2, pad_value=1.0)

    path = Path(args.output) if args.output else output_dir / "grid.png"
    pixels = (grid.clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).permute(1, 2, 0).numpy()
    save_rgb(np.ascontiguousarray(pixels), path)
    get_logger().info(f"グリッドを保存しました: {path} ({len(columns[0])}×{len(columns)})")
    return 0
