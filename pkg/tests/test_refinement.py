import pytest
import torch

from src.core.dataset import load_iharmony4
from src.core.refinement import (
    RefineTuple,
    RefinerConfig,
    RefinerInput,
    RefinerUNet,
    generate_refine_tuples,
    load_refine_tuples,
    refine,
    save_refine_tuples,
    train_refiner,
)
from src.core.schedule_sampler import SamplerConfig
from src.utils.errors import ParameterError

SIZE = 16


def _config(**updates) -> RefinerConfig:
    base = RefinerConfig(base_channels=8, channel_multipliers=[1, 2], norm_num_groups=4, resolution=SIZE)
    return base.model_copy(update=updates)


def _inputs(seed=0, batch=None):
    generator = torch.Generator().manual_seed(seed)
    lead = () if batch is None else (batch,)
    harmonized = torch.rand(*lead, 3, SIZE, SIZE, generator=generator) * 2 - 1
    composite = torch.rand(*lead, 3, SIZE, SIZE, generator=generator) * 2 - 1
    mask = (torch.rand(*lead, 1, SIZE, SIZE, generator=generator) > 0.5).float()
    return RefinerInput(harmonized, composite, mask)


def test_zero_initialized_refiner_is_identity():
    refiner = RefinerUNet(_config()).eval()
    for seed in range(10):
        inputs = _inputs(seed)
        assert torch.equal(refine(inputs, refiner), inputs.harmonized)


def test_refine_accepts_batches():
    refiner = RefinerUNet(_config()).eval()
    inputs = _inputs(batch=2)
    assert refine(inputs, refiner).shape == (2, 3, SIZE, SIZE)


def test_refine_output_is_clamped():
    refiner = RefinerUNet(_config()).eval()
    with torch.no_grad():
        refiner.out_conv.bias.fill_(5.0)
    out = refine(_inputs(), refiner)
    assert torch.all(out == 1.0)


def test_refine_input_errors():
    refiner = RefinerUNet(_config()).eval()
    inputs = _inputs()
    with pytest.raises(ParameterError):
        refine(RefinerInput(inputs.harmonized[:, :8, :8], inputs.composite[:, :8, :8], inputs.mask[:, :8, :8]), refiner)
    with pytest.raises(ParameterError):
        refine(RefinerInput(inputs.harmonized, inputs.composite, inputs.mask * 0.5), refiner)
    with pytest.raises(ParameterError):
        RefinerInput(inputs.harmonized, inputs.composite[:1], inputs.mask).concat()
    with pytest.raises(ParameterError):
        refiner(torch.zeros(1, 6, SIZE, SIZE))
    with pytest.raises(ParameterError):
        refiner(torch.zeros(1, 7, 6, 6))


def test_save_and_load(tmp_path):
    refiner = RefinerUNet(_config())
    with torch.no_grad():
        refiner.out_conv.bias.fill_(0.1)
    refiner.save(tmp_path / "refiner.safetensors")
    loaded = RefinerUNet.load(tmp_path / "refiner.safetensors")
    inputs = _inputs()
    assert loaded.config == refiner.config
    assert torch.equal(refine(inputs, loaded), refine(inputs, refiner.eval()))


def _tuples(count=4, shift=0.0):
    tuples = []
    for i in range(count):
        inputs = _inputs(seed=i)
        real = (inputs.harmonized + shift).clamp(-1, 1)
        tuples.append(RefineTuple(f"synthetic/t{i}", i, inputs.harmonized, inputs.composite, inputs.mask, real))
    return tuples


def test_training_on_perfect_inputs_keeps_identity():
    tuples = _tuples()
    refiner = train_refiner(tuples, _config(train_steps=5, batch_size=2))
    for item in tuples:
        inputs = RefinerInput(item.harmonized, item.composite, item.mask)
        assert torch.equal(refine(inputs, refiner), item.harmonized)


def test_training_reduces_loss():
    losses = []
    train_refiner(
        _tuples(shift=0.1),
        _config(train_steps=40, batch_size=4, learning_rate=1e-3),
        step_callback=lambda step, loss: losses.append(loss),
    )
    assert len(losses) == 40
    assert sum(losses[-5:]) / 5 < sum(losses[:5]) / 5


def test_train_refiner_rejects_empty():
    with pytest.raises(ParameterError):
        train_refiner([], _config())


def test_generate_refine_tuples(fixture_dataset, tiny_models):
    samples = load_iharmony4(fixture_dataset).train
    sampler = SamplerConfig(num_inference_steps=2, seed=4)
    tuples = generate_refine_tuples(samples, tiny_models, sampler, 16, seeds_per_sample=2, resolution=SIZE)
    assert len(tuples) == 6
    assert [t.seed for t in tuples] == [4, 5, 6, 7, 8, 9]
    assert [t.sample_id for t in tuples[:2]] == [samples[0].sample_id] * 2
    assert tuples[0].harmonized.shape == (3, SIZE, SIZE)
    assert tuples[0].mask.shape == (1, SIZE, SIZE)

    again = generate_refine_tuples(samples[:1], tiny_models, sampler, 16, seeds_per_sample=2, resolution=SIZE)
    assert torch.equal(again[0].harmonized, tuples[0].harmonized)
    assert torch.equal(again[1].harmonized, tuples[1].harmonized)

    with pytest.raises(ParameterError):
        generate_refine_tuples([], tiny_models, sampler, 16)


def test_tuple_files_round_trip(tmp_path):
    tuples = _tuples(count=2)
    save_refine_tuples(tuples, tmp_path / "tuples")
    loaded = load_refine_tuples(tmp_path / "tuples")
    assert [(t.sample_id, t.seed) for t in loaded] == [(t.sample_id, t.seed) for t in tuples]
    assert torch.equal(loaded[0].mask, tuples[0].mask)
    assert torch.allclose(loaded[0].harmonized, tuples[0].harmonized, atol=1 / 127.5)

    with pytest.raises(ParameterError):
        load_refine_tuples(tmp_path / "missing")


def test_train_refiner_leaves_global_rng_alone():
    torch.manual_seed(11)
    state = torch.get_rng_state()
    first = train_refiner(_tuples(count=2), _config(train_steps=2, batch_size=2))
    assert torch.equal(torch.get_rng_state(), state)
    second = train_refiner(_tuples(count=2), _config(train_steps=2, batch_size=2))
    for name, tensor in first.state_dict().items():
        assert torch.equal(tensor, second.state_dict()[name]), name
