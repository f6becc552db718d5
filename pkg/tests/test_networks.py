import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ihcbridge.networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    apply_generator,
    build_discriminator,
    build_generator,
    to_numpy,
    to_tensor,
)

SMALL_G = GeneratorSpec(width=8, res_blocks=1)
SMALL_D = DiscriminatorSpec(width=8)


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_generator_shape_and_range():
    g = build_generator(GeneratorSpec(), 0)
    x = torch.rand(2, 3, 64, 64)
    y = g(x).detach()
    assert y.shape == x.shape
    assert float(y.min()) >= 0.0 and float(y.max()) <= 1.0


def test_generator_deterministic_init():
    g1, g2 = build_generator(SMALL_G, 5), build_generator(SMALL_G, 5)
    assert params_equal(g1, g2)
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(g1(x), g2(x))
    assert not params_equal(g1, build_generator(SMALL_G, 6))


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    a = torch.rand(3)
    torch.manual_seed(0)
    build_generator(SMALL_G, 1)
    assert torch.equal(torch.rand(3), a)


def test_generator_distinguishes_inputs():
    g = build_generator(SMALL_G, 0)
    x1, x2 = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    assert float((g(x1) - g(x2)).detach().abs().max()) > 0


def test_generator_rejects_indivisible_size():
    g = build_generator(GeneratorSpec(width=8, levels=2), 0)
    with pytest.raises(ValueError):
        g(torch.rand(1, 3, 30, 30))


@pytest.mark.parametrize("kwargs", [{"width": 4}, {"levels": 0}, {"res_blocks": -1}])
def test_generator_spec_validation(kwargs):
    with pytest.raises(ValueError):
        GeneratorSpec(**kwargs)


@pytest.mark.parametrize("kwargs", [{"width": 4}, {"blocks": 0}])
def test_discriminator_spec_validation(kwargs):
    with pytest.raises(ValueError):
        DiscriminatorSpec(**kwargs)


@pytest.mark.parametrize("size,expected", [(64, 8), (32, 4)])
def test_discriminator_shape(size, expected):
    d = build_discriminator(DiscriminatorSpec(blocks=3), 0)
    assert d(torch.rand(2, 3, size, size)).shape == (2, 1, expected, expected)


def test_discriminator_deterministic():
    x = torch.rand(1, 3, 32, 32)
    assert torch.equal(build_discriminator(SMALL_D, 3)(x), build_discriminator(SMALL_D, 3)(x))


def test_discriminator_rejects_tiny_input():
    with pytest.raises(ValueError):
        build_discriminator(DiscriminatorSpec(blocks=3), 0)(torch.rand(1, 3, 4, 4))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 1.0, None]))
def test_outputs_bounded_and_finite(seed, fill):
    g = build_generator(SMALL_G, seed)
    d = build_discriminator(SMALL_D, seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(2, 3, 32, 32, generator=gen) if fill is None else torch.full((2, 3, 32, 32), fill)
    y = g(x).detach()
    assert torch.isfinite(y).all() and float(y.min()) >= 0 and float(y.max()) <= 1
    assert torch.isfinite(d(x)).all()


def test_eval_mode_is_deterministic():
    g = build_generator(SMALL_G, 0).eval()
    x = torch.rand(3, 3, 32, 32)
    assert torch.equal(g(x), g(x))


def test_numpy_helpers_round_trip():
    x = np.random.default_rng(0).uniform(size=(5, 16, 16, 3)).astype(np.float32)
    assert np.array_equal(to_numpy(to_tensor(x)), x)
    g = build_generator(SMALL_G, 0)
    out = apply_generator(g, x, batch_size=2)
    assert out.shape == x.shape
    assert np.allclose(out, to_numpy(g.eval()(to_tensor(x))), atol=1e-6)
