import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attndistill.core import (
    AttentionMap,
    check_domain_vector,
    check_image_batch,
    normalize_map,
    normalize_tensor,
    param_hash,
    seed_all,
)
from attndistill.models import GeneratorSpec, build_generator


def amap(values):
    return AttentionMap(torch.tensor(values, dtype=torch.float64)[None], 0, "layer", "teacher")


def test_minmax_all_zero_stays_zero():
    out = normalize_map(AttentionMap(torch.zeros(1, 4, 4), 0, "l"), "minmax")
    assert torch.equal(out.data, torch.zeros(1, 4, 4))


def test_minmax_affine_rescale():
    out = normalize_map(amap([[0, 2], [4, 8]]), "minmax").data[0]
    assert torch.allclose(out, torch.tensor([[0, 0.25], [0.5, 1.0]], dtype=torch.float64), atol=1e-7)


def test_l2_three_four_five():
    out = normalize_map(amap([[3, 4]]), "l2").data[0]
    assert torch.allclose(out, torch.tensor([[0.6, 0.8]], dtype=torch.float64), atol=1e-7)


def test_none_is_identity_and_metadata_kept():
    m = AttentionMap(torch.rand(2, 3, 3), 5, "res1", "student")
    out = normalize_map(m, "none")
    assert out.data is m.data
    assert (out.domain_index, out.layer_name, out.network_id) == (5, "res1", "student")


def test_unknown_mode():
    with pytest.raises(ValueError):
        normalize_tensor(torch.rand(1, 2, 2), "max")


nonneg_maps = arrays(np.float64, (2, 3, 4), elements=st.floats(0, 1e3, allow_nan=False))


@given(nonneg_maps, st.sampled_from(["minmax", "l2", "none"]))
def test_normalization_preserves_nonnegativity(a, mode):
    out = normalize_tensor(torch.from_numpy(a), mode)
    assert (out >= 0).all()


@settings(max_examples=50)
@given(nonneg_maps)
def test_minmax_idempotent_on_unit_range(a):
    t = torch.from_numpy(a)
    once = normalize_tensor(t, "minmax")
    spans = (once.flatten(1).max(1).values == 1) & (once.flatten(1).min(1).values == 0)
    twice = normalize_tensor(once, "minmax")
    assert torch.allclose(twice[spans], once[spans], atol=1e-7)


def test_seed_all_determinism():
    spec = GeneratorSpec.preset("student", 4, 32, 16)
    seed_all(0)
    a = torch.rand(3)
    seed_all(0)
    assert torch.equal(a, torch.rand(3))
    assert param_hash(build_generator(spec, 0)) == param_hash(build_generator(spec, 0))
    assert param_hash(build_generator(spec, 0)) != param_hash(build_generator(spec, 1))


def test_builders_do_not_depend_on_global_rng():
    spec = GeneratorSpec.preset("s_lite", 4, 32, 16)
    torch.manual_seed(123)
    a = param_hash(build_generator(spec, 9))
    torch.rand(100)
    assert param_hash(build_generator(spec, 9)) == a


def test_input_validation():
    check_image_batch(torch.zeros(2, 3, 32, 32))
    with pytest.raises(ValueError):
        check_image_batch(torch.full((1, 3, 32, 32), 1.5))
    with pytest.raises(ValueError):
        check_image_batch(torch.full((1, 3, 32, 32), float("nan")))
    check_domain_vector(torch.tensor([[0.0, 1.0]]))
    with pytest.raises(ValueError):
        check_domain_vector(torch.tensor([[0.5, 1.0]]))
    with pytest.raises(ValueError):
        check_domain_vector(torch.tensor([[1.0]]))
