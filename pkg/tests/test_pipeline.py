from dataclasses import replace

import numpy as np
import pytest
import torch

from src.core.metrics import fmse, mse
from src.core.pipeline import (
    HarmonizationRequest,
    harmonize,
    harmonize_batch,
    output_name,
    read_manifest,
    write_manifest,
)
from src.core.schedule_sampler import SamplerConfig
from src.utils.errors import ParameterError
from src.utils.image_io import load_rgb, resize_image, tensor_to_pixels, tensor_to_uint8


def _request(seed=0, size=16, inference=16, output=16, mask=None, **kwargs):
    generator = torch.Generator().manual_seed(seed)
    composite = torch.rand(3, size, size, generator=generator) * 2 - 1
    if mask is None:
        mask = torch.zeros(1, size, size)
        mask[:, :, : size // 2] = 1
    return HarmonizationRequest(
        composite=composite,
        mask=mask,
        inference_resolution=inference,
        output_resolution=output,
        sampler=SamplerConfig(num_inference_steps=3, seed=seed),
        **kwargs,
    )


def test_harmonize_output_shape_and_range(tiny_models):
    out = harmonize(_request(inference=16, output=8), tiny_models)
    assert out.shape == (3, 8, 8)
    assert out.min() >= -1.0 and out.max() <= 1.0


def test_harmonize_is_deterministic_per_seed(tiny_models):
    request = _request()
    first = harmonize(request, tiny_models)
    second = harmonize(request, tiny_models)
    other = harmonize(replace(request, sampler=SamplerConfig(num_inference_steps=3, seed=1)), tiny_models)
    assert torch.equal(first, second)
    assert not torch.equal(first, other)


def test_background_is_preserved_bit_exactly(tiny_models):
    request = _request()
    out = harmonize(request, tiny_models)
    background = request.mask[0] == 0
    assert torch.equal(out[:, background], request.composite[:, background])

    pred = tensor_to_pixels(out)
    gt = tensor_to_pixels(request.composite)
    mask = request.mask[0].numpy()
    assert mse(pred, gt) == pytest.approx(fmse(pred, gt, mask) * 0.5, rel=1e-9)


def test_empty_mask_returns_resized_composite(tiny_models):
    request = _request(size=16, inference=16, output=8, mask=torch.zeros(1, 16, 16))
    out = harmonize(request, tiny_models)
    expected = resize_image(resize_image(request.composite, 16), 8)
    assert torch.equal(out, expected)


def test_without_blend_background_changes(tiny_models):
    request = _request(blend_background=False)
    out = harmonize(request, tiny_models)
    background = request.mask[0] == 0
    assert not torch.equal(out[:, background], request.composite[:, background])


def test_guidance_runs_with_unconditional_branch(tiny_models):
    request = _request()
    request.sampler = SamplerConfig(num_inference_steps=2, guidance_scale=1.5)
    assert harmonize(request, tiny_models).shape == (3, 16, 16)


def test_request_validation(tiny_models):
    soft = torch.full((1, 16, 16), 0.5)
    with pytest.raises(ParameterError) as excinfo:
        harmonize(_request(mask=soft), tiny_models)
    assert excinfo.value.exit_code == 2
    with pytest.raises(ParameterError):
        harmonize(_request(inference=15), tiny_models)
    with pytest.raises(ParameterError):
        harmonize(_request(mask=torch.ones(1, 8, 8)), tiny_models)


def test_harmonize_batch_seeds_and_order(tiny_models, tmp_path):
    requests = [_request(seed=i) for i in range(3)]
    for i, request in enumerate(requests):
        request.source = f"/in/img{i}.png"

    images, manifest = harmonize_batch(requests, tiny_models, parallelism=1, base_seed=10, output_dir=tmp_path)
    assert [r["seed"] for r in manifest] == [10, 11, 12]
    assert [r["status"] for r in manifest] == ["ok"] * 3
    assert (tmp_path / "00001_img1.png").exists()
    assert load_rgb(tmp_path / "00001_img1.png").shape == (16, 16, 3)

    parallel, _ = harmonize_batch(requests, tiny_models, parallelism=2, base_seed=10)
    for a, b in zip(images, parallel):
        assert torch.allclose(a, b, atol=1e-5)

    single = harmonize(replace(requests[1], sampler=SamplerConfig(num_inference_steps=3, seed=11)), tiny_models)
    assert torch.equal(single, images[1])


def test_harmonize_batch_records_failures(tiny_models):
    requests = [_request(), _request(mask=torch.full((1, 16, 16), 0.5))]
    images, manifest = harmonize_batch(requests, tiny_models)
    assert images[0] is not None and images[1] is None
    assert manifest[1]["status"] == "failed"
    assert "error" in manifest[1]


def test_harmonize_batch_errors(tiny_models):
    with pytest.raises(ParameterError):
        harmonize_batch([], tiny_models)
    with pytest.raises(ParameterError):
        harmonize_batch([_request()], tiny_models, parallelism=0)


def test_manifest_file_round_trip(tmp_path):
    records = [{"index": 0, "seed": 3, "status": "ok", "input": "a.png"}]
    write_manifest(records, tmp_path / "manifest.jsonl")
    assert read_manifest(tmp_path / "manifest.jsonl") == records


def test_duplicate_sources_get_separate_files(tiny_models, tmp_path):
    request = _request()
    request.source = "/in/a.png"
    other = _request()
    other.source = "/elsewhere/a.jpg"
    images, manifest = harmonize_batch([request, request, other], tiny_models, base_seed=0, output_dir=tmp_path)

    paths = [record["output"] for record in manifest]
    assert len(set(paths)) == 3
    assert not torch.equal(images[0], images[1])
    for image, path in zip(images, paths):
        assert np.array_equal(load_rgb(path), tensor_to_uint8(image))


def test_output_name():
    assert output_name("/in/a.png", 3) == "00003_a.png"
    assert output_name("/in/a.jpg", 4) == "00004_a.png"
    assert output_name(None, 7) == "00007.png"
