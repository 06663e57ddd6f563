from fractions import Fraction

import pytest
import torch

from attndistill.core import param_hash
from attndistill.models import (
    LAST_RESBLOCK,
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    count_parameters,
    forward_generator,
)


@pytest.mark.parametrize(
    "kind, expected, tol",
    [("teacher", 8.4e6, 0.05), ("student", 1.2e6, 0.10), ("s_lite", 0.16e6, 0.10)],
)
def test_full_scale_parameter_counts(kind, expected, tol):
    g = build_generator(GeneratorSpec.preset(kind, 7, 128), 0)
    assert abs(count_parameters(g) - expected) <= tol * expected


def test_parameter_counts_are_monotone():
    counts = [count_parameters(build_generator(GeneratorSpec.preset(k, 5, 32, 32))) for k in
              ("teacher", "student", "s_lite")]
    assert counts[0] > counts[1] > counts[2]


def test_parameter_count_is_function_of_spec():
    spec = GeneratorSpec.preset("student", 3, 64)
    assert count_parameters(build_generator(spec, 0)) == count_parameters(build_generator(spec, 7))


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec(base_channels=6, scale=Fraction(1, 4))
    with pytest.raises(ValueError):
        GeneratorSpec(base_channels=8, scale=Fraction(1, 4))  # width 2 < 4
    with pytest.raises(ValueError):
        GeneratorSpec(n_resblocks=0)
    with pytest.raises(ValueError):
        GeneratorSpec(image_size=30)
    with pytest.raises(ValueError):
        DiscriminatorSpec(image_size=48, n_layers=5)
    assert GeneratorSpec(base_channels=16, scale=0.25).width == 4


def test_spec_round_trip():
    spec = GeneratorSpec.preset("s_lite", 4, 32, 16)
    assert GeneratorSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize("size, layers, domains", [(64, 6, 7), (32, 5, 4)])
def test_discriminator_heads(size, layers, domains):
    d = build_discriminator(DiscriminatorSpec(8, layers, domains, size), 0)
    adv, cls = d(torch.zeros(2, 3, size, size))
    assert adv.shape == (2, 1, size // 2**layers, size // 2**layers)
    assert cls.shape == (2, domains)


def test_discriminator_seeded():
    spec = DiscriminatorSpec(8, 5, 4, 32)
    assert param_hash(build_discriminator(spec, 3)) == param_hash(build_discriminator(spec, 3))


def test_generator_shapes_and_range(student_spec):
    g = build_generator(student_spec, 0)
    x = torch.rand(3, 3, 32, 32) * 2 - 1
    c = torch.tensor([[1.0, 0, 0, 1], [0, 1, 0, 0], [0, 0, 0, 0]])
    y, feats = forward_generator(g, x, c, [LAST_RESBLOCK])
    assert y.shape == x.shape
    assert y.abs().max() <= 1
    f = feats[LAST_RESBLOCK]
    assert f.layer_name == LAST_RESBLOCK
    assert f.data.shape == (3, 4 * student_spec.width, 8, 8)
    assert f.data.requires_grad


def test_capture_nothing(student_spec):
    g = build_generator(student_spec, 0)
    _, feats = g(torch.zeros(1, 3, 32, 32), torch.zeros(1, 4), [])
    assert feats == {}


def test_unknown_layer_lists_registry(student_spec):
    g = build_generator(student_spec, 0)
    with pytest.raises(KeyError, match="last_resblock_conv"):
        g(torch.zeros(1, 3, 32, 32), torch.zeros(1, 4), ["nope"])


def test_registry_contents(teacher_spec):
    g = build_generator(teacher_spec, 0)
    assert LAST_RESBLOCK in g.registry
    assert g.resolve(LAST_RESBLOCK) == "res6_conv"
    assert sum(n.startswith("res") and not n.endswith("_conv") for n in g.layer_names) == 6


def test_teacher_student_maps_share_spatial_dims(teacher_spec, student_spec):
    x, c = torch.zeros(2, 3, 32, 32), torch.zeros(2, 4)
    ft = build_generator(teacher_spec, 0)(x, c, [LAST_RESBLOCK])[1][LAST_RESBLOCK].data
    fs = build_generator(student_spec, 0)(x, c, [LAST_RESBLOCK])[1][LAST_RESBLOCK].data
    assert ft.shape[-2:] == fs.shape[-2:] == (8, 8)
    assert ft.shape[1] != fs.shape[1]


def test_batch_tiling_has_no_cross_talk(student_spec):
    g = build_generator(student_spec, 2)
    x = (torch.rand(1, 3, 32, 32) * 2 - 1).expand(4, -1, -1, -1)
    y, _ = g(x, torch.tensor([[1.0, 0, 1, 0]]).expand(4, -1))
    assert torch.allclose(y, y[:1].expand_as(y), atol=1e-6)


def test_label_is_used(student_spec):
    g = build_generator(student_spec, 2)
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    a, _ = g(x, torch.tensor([[1.0, 0, 0, 0]]))
    b, _ = g(x, torch.tensor([[0.0, 1, 0, 0]]))
    assert not torch.equal(a, b)


def test_wrong_domain_count(student_spec):
    g = build_generator(student_spec, 0)
    with pytest.raises(ValueError):
        g(torch.zeros(1, 3, 32, 32), torch.zeros(1, 5))
