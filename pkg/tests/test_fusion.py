# coding: utf-8
import json

import pytest
import torch

from bevprompt.errors import DimensionException, EmptyPromptException, SchemaException
from bevprompt.fusion import (PER_DETECTION, QUERY_IMAGE, QUERY_PROMPT, STACKED, DecodeHead,
                              FusionModule, ImageFeature, VectorPromptEncoder, decode_head, fuse,
                              fuse_concat, fuse_trace, load_fusion, module_from_fixture,
                              save_fusion, trace_errors, trace_to_json)
from bevprompt.geometry import Box2D
from bevprompt.grouping import builtin_grouping
from bevprompt.numerics import DTYPE, grad_check
from bevprompt.prompt import PromptEncoder

W, H = 640, 320


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE)


@pytest.fixture
def trace_fixture(fixture_path):
    with open(fixture_path('fuse_trace_d4.json')) as f:
        return json.load(f)


@pytest.fixture
def boxes():
    return [Box2D(10, 20, 200, 150, 'car', 0.9), Box2D(300, 40, 340, 160, 'pedestrian', 0.8)]


def test_trace_matches_hand_computed_fixture(trace_fixture):
    trace = fuse_trace(trace_fixture)
    errors = trace_errors(trace, trace_fixture['expected'])
    assert sorted(errors) == ['F', 'G', 'H', 'J']
    assert max(errors.values()) < 1e-12
    assert trace['J'].shape == (4, 4)
    assert sorted(trace_to_json(trace)) == ['F', 'G', 'H', 'I', 'J']


def test_fixture_weights_are_checked(trace_fixture):
    broken = dict(trace_fixture, weights=dict(trace_fixture['weights']))
    broken['weights'].pop('w_in')
    with pytest.raises(SchemaException):
        module_from_fixture(broken)
    broken['weights']['w_in'] = {'shape': [2, 2], 'data': [1.0, 0.0, 0.0, 1.0]}
    with pytest.raises(SchemaException):
        module_from_fixture(broken)


def test_output_shapes():
    tokens, image = rand(6, 8), ImageFeature(rand(12, 5, seed=1), (3, 4))
    fused = FusionModule(8, c_in=5, heads=2)(tokens, image)
    assert fused.J.shape == (12, 8)
    assert fused.H.shape == (6, 8)
    fused = FusionModule(8, c_in=5, step4_query_mode=QUERY_PROMPT)(tokens, image)
    assert fused.J.shape == (6, 8)


def test_fuse_rejects_bad_inputs():
    module = FusionModule(8, c_in=5)
    image = ImageFeature(rand(12, 5), (3, 4))
    with pytest.raises(EmptyPromptException):
        module(torch.zeros(0, 8, dtype=DTYPE), image)
    with pytest.raises(DimensionException):
        module(rand(3, 6), image)
    with pytest.raises(DimensionException):
        module(rand(3, 8), rand(12, 4))
    with pytest.raises(DimensionException):
        ImageFeature(rand(10, 5), (3, 4))


def test_residuals_off_changes_output():
    torch.manual_seed(1)
    with_res = FusionModule(8, c_in=5)
    without = FusionModule(8, c_in=5, residuals=False)
    without.load_state_dict(with_res.state_dict())
    tokens, image = rand(3, 8), rand(12, 5, seed=1)
    assert not torch.allclose(with_res(tokens, image).J, without(tokens, image).J)


def test_per_detection_fusion_keeps_each_pass():
    module = FusionModule(8, c_in=5)
    tokens, image = rand(6, 8), ImageFeature(rand(12, 5, seed=1), (3, 4))
    groups = [slice(0, 3), slice(3, 6)]
    fused = fuse(tokens, image, module, groups, PER_DETECTION)
    assert len(fused.J_groups) == 2
    alone = module(tokens[3:6], image)
    assert torch.allclose(fused.J_for(1), alone.J, atol=1e-14)
    assert torch.allclose(fused.J, (fused.J_groups[0] + fused.J_groups[1]) / 2, atol=1e-14)
    with pytest.raises(EmptyPromptException):
        fuse(tokens, image, module, [], PER_DETECTION)


def test_decode_head_shapes():
    module = FusionModule(8, c_in=5)
    fused = module(rand(6, 8), rand(12, 5, seed=1))
    out = decode_head(fused, [slice(0, 3), slice(3, 6)], DecodeHead(8, hidden=16))
    assert out.shape == (2, 5)
    assert decode_head(fused, [], DecodeHead(8)).shape == (0, 5)


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_prompt_to_regression_gradients(seed, boxes):
    torch.manual_seed(seed)
    encoder = PromptEncoder(16, seed=seed)
    module = FusionModule(16, c_in=6, heads=2, hidden=24)
    head = DecodeHead(16, hidden=12)
    image = ImageFeature(rand(8, 6, seed=seed + 10), (2, 4))
    grouping = builtin_grouping('functionality')
    target = rand(2, 5, seed=seed + 20)

    def loss():
        tokens, groups = encoder.encode_frame(boxes, grouping, W, H)
        out = decode_head(module(tokens, image), groups, head)
        return ((out - target) ** 2).sum()

    params = [encoder.C] + list(module.parameters()) + list(head.parameters())
    assert grad_check(loss, params, max_entries=6, seed=seed) < 1e-4


def test_weights_round_trip(tmp_path):
    module = FusionModule(8, c_in=5, heads=2, residuals=False)
    save_fusion(module, str(tmp_path / 'fusion'))
    loaded = load_fusion(str(tmp_path / 'fusion'))
    assert loaded.manifest() == module.manifest()
    for name, tensor in module.state_dict().items():
        assert torch.equal(loaded.state_dict()[name], tensor)


def test_weights_shape_mismatch(tmp_path):
    save_fusion(FusionModule(8, c_in=5), str(tmp_path / 'fusion'))
    manifest = tmp_path / 'fusion' / 'manifest.json'
    fields = json.loads(manifest.read_text())
    fields['c_in'] = 6
    manifest.write_text(json.dumps(fields))
    with pytest.raises(SchemaException):
        load_fusion(str(tmp_path / 'fusion'))


def test_fuse_concat():
    feat2d, I_raw = rand(12, 3), rand(12, 5, seed=1)
    w = rand(8, 4, seed=2)
    out = fuse_concat(feat2d, I_raw, w)
    assert torch.allclose(out, feat2d @ w[:3] + I_raw @ w[3:], atol=1e-14)
    with pytest.raises(DimensionException):
        fuse_concat(rand(10, 3), I_raw, w)


def test_fuse_concat_gradients():
    feat2d, I_raw, w = rand(6, 3), rand(6, 4, seed=1), rand(7, 5, seed=2)
    target = rand(6, 5, seed=3)

    def loss():
        return ((fuse_concat(feat2d, I_raw, w) - target) ** 2).sum()

    assert grad_check(loss, [feat2d, I_raw, w]) < 1e-4


@pytest.mark.parametrize('mode,query', [(STACKED, QUERY_IMAGE), (STACKED, QUERY_PROMPT),
                                        (PER_DETECTION, QUERY_IMAGE)])
def test_decode_follows_prompt_order(mode, query):
    boxes = [Box2D(10, 20, 200, 150, 'car', 0.9), Box2D(300, 40, 340, 160, 'pedestrian', 0.8),
             Box2D(400, 100, 520, 220, 'van', 0.7)]
    encoder = PromptEncoder(8, seed=3)
    module = FusionModule(8, c_in=5, heads=2, step4_query_mode=query)
    head = DecodeHead(8, hidden=12)
    image = ImageFeature(rand(8, 5, seed=4), (2, 4))
    grouping = builtin_grouping('functionality')

    tokens, groups = encoder.encode_frame(boxes, grouping, W, H)
    out = decode_head(fuse(tokens, image, module, groups, mode), groups, head)

    perm = [2, 0, 1]
    permuted = torch.cat([tokens[groups[p]] for p in perm], dim=0)
    permuted_groups = [slice(3 * i, 3 * i + 3) for i in range(len(perm))]
    out_permuted = decode_head(fuse(permuted, image, module, permuted_groups, mode),
                               permuted_groups, head)
    assert torch.allclose(out_permuted, out[perm], rtol=0, atol=1e-10)


def test_vector_prompts(boxes):
    image = ImageFeature(rand(8, 5), (2, 4))
    encoder = VectorPromptEncoder(5, 8)
    tokens, groups = encoder.encode_frame(boxes, builtin_grouping('functionality'), image, W, H)
    assert tokens.shape == (4, 8)
    assert groups == [slice(0, 2), slice(2, 4)]
    # the car center (105, 85) lies in the first cell
    assert torch.allclose(tokens[0], image.I[0] @ encoder.w_vec, atol=1e-14)
    assert image.cell_at(320, 100, W, H) == 2
