import numpy as np
import pytest
import torch

from corrseg.blocks import BlockConfig
from corrseg.generator import ConditionalGenerator, generation_loss
from corrseg.volumes import MODALITIES, Modality


def _small_config():
    return BlockConfig(base_filters=2, depth=2, dilation_rates=(1, 2))


def _available(rng, shape, exclude=Modality.T2, batch=1):
    return {
        m: torch.tensor(rng.normal(size=(batch, 1, *shape)), dtype=torch.float32)
        for m in MODALITIES
        if m is not exclude
    }


def test_generate_output_shape_full_scale():
    torch.manual_seed(0)
    gen = ConditionalGenerator(BlockConfig(base_filters=2, depth=3), (32, 32, 32))
    rng = np.random.default_rng(0)
    available = _available(rng, (32, 32, 32))
    with torch.no_grad():
        out = gen.generate(available, Modality.T2)
    assert out.shape == (1, 1, 32, 32, 32)
    assert torch.all(torch.isfinite(out))


def test_generate_rejects_bad_inputs():
    gen = ConditionalGenerator(_small_config(), (8, 8, 8))
    rng = np.random.default_rng(1)
    available = _available(rng, (8, 8, 8))
    with pytest.raises(ValueError):
        gen.generate({Modality.T1: available[Modality.T1]}, Modality.T2)
    with pytest.raises(ValueError):
        gen.generate(available, Modality.T1)  # T1 is among the available set
    with pytest.raises(ValueError):
        gen.generate(_available(rng, (4, 4, 4)), Modality.T2)


def test_generate_input_order_does_not_matter():
    torch.manual_seed(2)
    gen = ConditionalGenerator(_small_config(), (8, 8, 8))
    rng = np.random.default_rng(2)
    available = _available(rng, (8, 8, 8))
    reordered = dict(reversed(list(available.items())))
    with torch.no_grad():
        a = gen.generate(available, Modality.T2)
        b = gen.generate(reordered, Modality.T2)
    assert torch.equal(a, b)


def test_condition_index_changes_output():
    torch.manual_seed(3)
    gen = ConditionalGenerator(_small_config(), (8, 8, 8))
    rng = np.random.default_rng(3)
    volumes = [torch.tensor(rng.normal(size=(1, 1, 8, 8, 8)), dtype=torch.float32) for _ in range(3)]
    case_a = {Modality.T1C: volumes[0], Modality.FLAIR: volumes[1], Modality.T1: volumes[2]}
    case_b = {Modality.T1C: volumes[0], Modality.FLAIR: volumes[1], Modality.T2: volumes[2]}
    with torch.no_grad():
        out_a = gen.generate(case_a, Modality.T2)
        out_b = gen.generate(case_b, Modality.T1)
    assert (out_a - out_b).abs().max() > 0


def test_embedding_row_perturbation_changes_output():
    # isolate the condition pathway: same inputs, same weights, only the
    # selected embedding row is perturbed
    torch.manual_seed(4)
    gen = ConditionalGenerator(_small_config(), (8, 8, 8))
    rng = np.random.default_rng(4)
    available = _available(rng, (8, 8, 8))
    with torch.no_grad():
        before = gen.generate(available, Modality.T2)
        gen.embedding.table.weight[Modality.T2.condition_index] += 1.0
        after = gen.generate(available, Modality.T2)
    assert (before - after).abs().max() > 0


def test_generate_finite_at_depth_three():
    torch.manual_seed(5)
    gen = ConditionalGenerator(BlockConfig(base_filters=2, depth=3), (16, 16, 16))
    rng = np.random.default_rng(5)
    available = _available(rng, (16, 16, 16), batch=2)
    with torch.no_grad():
        out = gen.generate(available, Modality.T2)
    assert out.shape == (2, 1, 16, 16, 16)
    assert torch.all(torch.isfinite(out))


def test_generator_rejects_indivisible_shape():
    with pytest.raises(ValueError):
        ConditionalGenerator(BlockConfig(base_filters=2, depth=3), (10, 10, 10))


# -- generation loss -------------------------------------------------------------


def test_generation_loss_identical():
    x = torch.randn(1, 1, 4, 4, 4)
    assert float(generation_loss(x, x)) == 0.0


def test_generation_loss_constants():
    ones = torch.ones(1, 1, 4, 4, 4)
    zeros = torch.zeros(1, 1, 4, 4, 4)
    assert float(generation_loss(ones, zeros)) == pytest.approx(1.0)


def test_generation_loss_matches_scalar_sum():
    rng = np.random.default_rng(6)
    a = torch.tensor(rng.normal(size=(1, 1, 3, 3, 3)))
    b = torch.tensor(rng.normal(size=(1, 1, 3, 3, 3)))
    expected = sum(
        abs(float(a.reshape(-1)[i]) - float(b.reshape(-1)[i])) for i in range(a.numel())
    ) / a.numel()
    assert float(generation_loss(a, b)) == pytest.approx(expected, abs=1e-9)


def test_generation_loss_shape_mismatch():
    with pytest.raises(ValueError):
        generation_loss(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 2))
