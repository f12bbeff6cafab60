# coding: utf-8
import io
import math

import pytest
import torch

from bevprompt.errors import DimensionException, EvaluationException, SchemaException
from bevprompt.numerics import (DTYPE, GradTape, as_tensor, dense, grad_check, layer_norm,
                                matmul, mlp_block, read_tensor, scaled_dot_attention,
                                softmax_rows, tensor_bytes, tensor_from_json, tensor_to_json,
                                write_tensor)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=DTYPE)


def test_matmul_shapes():
    a, b = rand(3, 4), rand(4, 2, seed=1)
    assert torch.allclose(matmul(a, b), a @ b, atol=0, rtol=0)
    with pytest.raises(DimensionException):
        matmul(a, rand(3, 2))
    with pytest.raises(DimensionException):
        matmul(rand(3), b)


def test_softmax_rows_sum_to_one():
    y = softmax_rows(rand(5, 7) * 50)
    assert torch.allclose(y.sum(dim=1), torch.ones(5, dtype=DTYPE), atol=1e-12)
    assert bool((y >= 0).all())


def test_layer_norm_known_row():
    x = as_tensor([[1.0, -1.0, 1.0, -1.0]])
    out = layer_norm(x, torch.ones(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), eps=0.44)
    expected = as_tensor([[5 / 6, -5 / 6, 5 / 6, -5 / 6]])
    assert float((out - expected).abs().max()) < 1e-15


def test_layer_norm_rejects_bad_input():
    with pytest.raises(DimensionException):
        layer_norm(rand(3, 1), torch.ones(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE))
    with pytest.raises(EvaluationException):
        layer_norm(rand(3, 4), torch.ones(4, dtype=DTYPE), torch.zeros(4, dtype=DTYPE), eps=0.0)


def test_attention_with_zero_queries_averages_values():
    q, kv = rand(2, 4), rand(5, 4, seed=1)
    eye = torch.eye(4, dtype=DTYPE)
    out = scaled_dot_attention(q, kv, kv, torch.zeros(4, 4, dtype=DTYPE), eye, eye, eye)
    assert torch.allclose(out, kv.mean(dim=0, keepdim=True).expand(2, 4), atol=1e-14)


def test_attention_heads_must_divide_width():
    x = rand(2, 6)
    w = rand(6, 6)
    with pytest.raises(DimensionException):
        scaled_dot_attention(x, x, x, w, w, w, w, heads=4)


@pytest.mark.parametrize('heads', [1, 2])
def test_attention_gradients(heads):
    q, k = rand(3, 4), rand(5, 4, seed=1)
    ws = [rand(4, 4, seed=s) * 0.5 for s in range(2, 6)]
    params = [q, k] + ws
    err = grad_check(lambda: (scaled_dot_attention(q, k, k, *ws, heads=heads) ** 2).sum(), params)
    assert err < 1e-6


def test_primitive_gradients_against_torch_gradcheck():
    x = rand(3, 4).requires_grad_(True)
    g = (rand(4, seed=1) + 2).requires_grad_(True)
    b = rand(4, seed=2).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x, g, b: layer_norm(x, g, b), (x, g, b))
    w1, b1 = rand(4, 6, seed=3).requires_grad_(True), rand(6, seed=4).requires_grad_(True)
    w2, b2 = rand(6, 4, seed=5).requires_grad_(True), rand(4, seed=6).requires_grad_(True)
    assert torch.autograd.gradcheck(mlp_block, (x, w1, b1, w2, b2))
    assert torch.autograd.gradcheck(lambda x, w, b: dense(x, w, b, relu=True), (x, w1, b1))
    assert torch.autograd.gradcheck(softmax_rows, (x,))


def test_layer_norm_grad_check():
    x, g, b = rand(4, 5), rand(5, seed=1) + 1.5, rand(5, seed=2)
    assert grad_check(lambda: (layer_norm(x, g, b) * rand(4, 5, seed=3)).sum(), [x, g, b]) < 1e-6


def test_tape_records_operations_and_zero_gradients():
    x, w, unused = rand(2, 3), rand(3, 3, seed=1), rand(3, seed=2)
    with GradTape() as tape:
        x, w, unused = tape.watch(x, w, unused)
        loss = softmax_rows(matmul(x, w)).sum()
    assert [name for name, _ in tape.operations] == ['matmul', 'softmax_rows']
    dx, dw, du = tape.gradient(loss, [x, w, unused])
    assert torch.equal(du, torch.zeros(3, dtype=DTYPE))
    # rows of a softmax always sum to one
    assert float(dx.abs().max()) < 1e-12
    assert float(dw.abs().max()) < 1e-12


def test_tensor_container_round_trip():
    t = rand(2, 3, 4)
    buf = io.BytesIO()
    write_tensor(buf, t)
    buf.seek(0)
    assert torch.equal(read_tensor(buf), t)
    assert tensor_bytes(t)[:4] == b'BPTN'


def test_tensor_container_rejects_garbage():
    with pytest.raises(SchemaException):
        read_tensor(io.BytesIO(b'NOPE'))
    truncated = io.BytesIO(tensor_bytes(rand(3))[:-8])
    with pytest.raises(SchemaException):
        read_tensor(truncated)


def test_tensor_json():
    t = rand(2, 2)
    assert torch.equal(tensor_from_json(tensor_to_json(t)), t)
    with pytest.raises(SchemaException):
        tensor_from_json({'shape': [2, 2], 'data': [1.0, 2.0]})
    with pytest.raises(SchemaException):
        tensor_from_json({'data': [1.0]})


def test_grad_check_detects_wrong_gradient():

    class Wrong(torch.autograd.Function):

        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, grad):
            x, = ctx.saved_tensors
            return grad * x

    x = rand(3) + 3.0
    assert grad_check(lambda: Wrong.apply(x).sum(), [x]) > 0.1
    assert math.isfinite(grad_check(lambda: (x ** 3).sum(), [x]))
