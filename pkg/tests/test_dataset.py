import numpy as np
import pytest
import torch

from src.core.dataset import (
    BUCKET_LABELS,
    AugmentConfig,
    HarmonyDataset,
    HarmonySample,
    HarmonyTriplet,
    SplitManifest,
    SyntheticConfig,
    apply_appearance_shift,
    augment,
    bucket_of,
    foreground_ratio,
    generate_base_images,
    load_iharmony4,
    make_synthetic_set,
    parse_composite_name,
    random_mask,
)
from src.utils.errors import DataLoadError, ParameterError, ValidationError


def test_load_fixture_dataset(fixture_dataset):
    manifest = load_iharmony4(fixture_dataset)
    assert len(manifest.train) == 3
    assert len(manifest.test) == 3
    assert manifest.skipped == 0
    assert manifest.counts() == {"synthetic": {"train": 3, "test": 3}}
    assert [s.sample_id for s in manifest.test] == ["synthetic/f001_1_1", "synthetic/f003_1_1", "synthetic/f005_1_1"]

    sample = manifest.train[0]
    assert sample.real_path.name == "f000.png"
    assert sample.mask_path.name == "f000_1.png"
    assert sample.foreground_ratio == pytest.approx(20 / 1024)


def test_fixture_buckets_partition_the_set(fixture_dataset):
    manifest = load_iharmony4(fixture_dataset)
    samples = manifest.train + manifest.test
    labels = [bucket_of(s.foreground_ratio) for s in samples]
    assert sorted(labels.count(label) for label in BUCKET_LABELS) == [2, 2, 2]


def test_missing_files_are_listed(fixture_dataset):
    (fixture_dataset / "synthetic" / "real_images" / "f002.png").unlink()
    with pytest.raises(DataLoadError) as excinfo:
        load_iharmony4(fixture_dataset)
    assert len(excinfo.value.offenders) == 1
    assert "f002_1_1.png" in excinfo.value.offenders[0]


def test_malformed_names_are_skipped(fixture_dataset):
    split_file = fixture_dataset / "synthetic" / "synthetic_train.txt"
    split_file.write_text(split_file.read_text(encoding="utf-8") + "composite_images/badname.png\n", encoding="utf-8")
    manifest = load_iharmony4(fixture_dataset)
    assert manifest.skipped == 1
    assert len(manifest.train) == 3


def test_missing_root_and_split_files(tmp_path):
    with pytest.raises(DataLoadError):
        load_iharmony4(tmp_path / "nowhere")
    with pytest.raises(DataLoadError):
        load_iharmony4(tmp_path)


def test_manifest_save_load_and_overlap(fixture_dataset, tmp_path):
    manifest = load_iharmony4(fixture_dataset)
    manifest.save(tmp_path / "manifest.jsonl")
    loaded = SplitManifest.load(tmp_path / "manifest.jsonl")
    assert loaded.train == manifest.train
    assert loaded.test == manifest.test

    with pytest.raises(ParameterError):
        SplitManifest(train=manifest.train, test=manifest.train[:1])


@pytest.mark.parametrize("name,expected", [
    ("c12_1_1.jpg", ("c12", "c12_1")),
    ("a_b_3_2.jpg", ("a_b", "a_b_3")),
    ("bad.jpg", None),
    ("x_1_y.jpg", None),
])
def test_parse_composite_name(name, expected):
    assert parse_composite_name(name) == expected


def test_foreground_ratio_and_errors():
    mask = np.zeros((10, 10), dtype=np.uint8)
    mask[:5, :2] = 1
    assert foreground_ratio(mask) == pytest.approx(0.1)
    assert foreground_ratio(torch.from_numpy(mask).float().unsqueeze(0)) == pytest.approx(0.1)
    with pytest.raises(ValidationError):
        foreground_ratio(np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        foreground_ratio(np.full((4, 4), 2))


def test_appearance_shift_only_touches_foreground():
    real = generate_base_images(1, 32, seed=1)[0]
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[8:24, 8:24] = 1
    composite, params = apply_appearance_shift(real, mask, np.random.default_rng(0), SyntheticConfig())
    assert np.array_equal(composite[mask == 0], real[mask == 0])
    assert not np.array_equal(composite[mask == 1], real[mask == 1])
    assert set(params) == {"brightness", "contrast", "gains"}


def test_random_mask_is_binary_and_nonempty():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mask, params = random_mask(rng, 64, SyntheticConfig())
        assert set(np.unique(mask)) <= {0, 1}
        assert mask.sum() > 0
        assert params["shape"] in ("ellipse", "polygon", "block")
        assert bucket_of(foreground_ratio(mask)) == params["bucket_target"]


def test_make_synthetic_set_layout_and_reload(tmp_path):
    bases = generate_base_images(4, 32, seed=0)
    manifest = make_synthetic_set(bases, 20, seed=3, output_root=tmp_path)
    assert len(manifest.train) + len(manifest.test) == 20
    assert len(manifest.test) == 2

    root = tmp_path / "synthetic"
    assert (root / "composite_images" / "s00000_1_1.png").exists()
    assert (root / "masks" / "s00000_1.png").exists()
    assert (root / "real_images" / "s00000.png").exists()
    assert len((root / "generator_params.jsonl").read_text(encoding="utf-8").splitlines()) == 20

    reloaded = load_iharmony4(tmp_path)
    assert [s.sample_id for s in reloaded.test] == [s.sample_id for s in manifest.test]
    for original, again in zip(manifest.train, reloaded.train):
        assert again.foreground_ratio == pytest.approx(original.foreground_ratio)


def test_synthetic_ratios_cover_all_buckets(tmp_path):
    bases = generate_base_images(4, 32, seed=0)
    manifest = make_synthetic_set(bases, 30, seed=5, output_root=tmp_path)
    samples = manifest.train + manifest.test
    assert {bucket_of(s.foreground_ratio) for s in samples} == set(BUCKET_LABELS)


@pytest.mark.parametrize("bucket", [0, 1, 2])
def test_random_mask_lands_in_requested_bucket(bucket):
    rng = np.random.default_rng(bucket)
    for size in (8, 16, 64):
        mask, params = random_mask(rng, size, SyntheticConfig(), bucket=bucket)
        assert params["bucket_target"] == BUCKET_LABELS[bucket]
        assert bucket_of(foreground_ratio(mask)) == BUCKET_LABELS[bucket]


def test_random_mask_single_try_stays_in_bucket():
    mask, params = random_mask(np.random.default_rng(0), 16, SyntheticConfig(ratio_ranges=[(0.02, 0.03)] * 3, max_shape_tries=1), bucket=0)
    assert bucket_of(foreground_ratio(mask)) == BUCKET_LABELS[0]


def test_make_synthetic_set_is_deterministic(tmp_path):
    bases = generate_base_images(3, 32, seed=0)
    make_synthetic_set(bases, 5, seed=9, output_root=tmp_path / "a")
    make_synthetic_set(bases, 5, seed=9, output_root=tmp_path / "b")
    for sub in ("composite_images/s00004_1_1.png", "masks/s00004_1.png"):
        assert (tmp_path / "a" / "synthetic" / sub).read_bytes() == (tmp_path / "b" / "synthetic" / sub).read_bytes()


def _triplet(size=32):
    image = torch.linspace(-1, 1, 3 * size * size).reshape(3, size, size)
    mask = torch.zeros(1, size, size)
    mask[:, size // 4: size // 2, size // 4: size // 2] = 1
    return HarmonyTriplet(composite=image.clone(), mask=mask, real=image.clone())


def test_triplet_rejects_mismatched_sizes():
    with pytest.raises(ValidationError):
        HarmonyTriplet(torch.zeros(3, 8, 8), torch.zeros(1, 4, 4), torch.zeros(3, 8, 8))


def test_augment_applies_identical_geometry():
    triplet = _triplet()
    for seed in range(10):
        out, params = augment(triplet, seed, 16)
        assert out.composite.shape == (3, 16, 16)
        assert torch.equal(out.composite, out.real)
        assert out.mask.sum() > 0
        assert torch.all((out.mask == 0) | (out.mask == 1))
        assert params.height <= 32 and params.width <= 32


def test_augment_is_deterministic_per_seed():
    triplet = _triplet()
    first, params_a = augment(triplet, 5, 16)
    second, params_b = augment(triplet, 5, 16)
    assert params_a == params_b
    assert torch.equal(first.mask, second.mask)


def test_augment_falls_back_to_center_crop():
    triplet = _triplet()
    triplet.mask.zero_()
    triplet.mask[..., 0, 0] = 1
    config = AugmentConfig(scale=(0.05, 0.05), flip_prob=0.0, max_tries=1)
    for seed in range(5):
        out, _ = augment(triplet, seed, 16, config)
        assert out.mask.sum() > 0


def test_harmony_dataset_items(fixture_dataset):
    manifest = load_iharmony4(fixture_dataset)
    dataset = HarmonyDataset(manifest.train, resolution=16, seed=1)
    item = dataset[0]
    assert item["composite"].shape == (3, 16, 16)
    assert item["mask"].shape == (1, 16, 16)
    assert item["index"] == 0

    again = dataset[0]
    assert torch.equal(item["composite"], again["composite"])

    plain = HarmonyDataset(manifest.train, resolution=16, use_augment=False)[1]
    assert plain["real"].shape == (3, 16, 16)

    with pytest.raises(ParameterError):
        HarmonyDataset([], resolution=16)


def test_harmony_sample_dict_round_trip(fixture_dataset):
    sample = load_iharmony4(fixture_dataset).train[0]
    assert HarmonySample.from_dict(sample.to_dict()) == sample
