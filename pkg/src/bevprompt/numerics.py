# coding: utf-8
"""
Dense float64 tensor primitives with hand-written backward passes.

Every primitive is a `torch.autograd.Function`; the autograd graph built by
composing them is the gradient tape. `GradTape` adds the bookkeeping needed on
top of it: an ordered log of the primitives that ran, and gradients that are
exactly zero (instead of `None`) for tensors the loss does not depend on.
"""

import io
import logging
import math

import numpy as np
import torch

from bevprompt.errors import (DimensionException, EvaluationException,
                              SchemaException)

DTYPE = torch.float64
MAGIC = b'BPTN'

_active_tapes = []


def as_tensor(data, shape=None):
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if t.numel() != int(np.prod(shape)):
            raise DimensionException('as_tensor', tuple(t.shape), shape)
        t = t.reshape(shape)
    return t


def _record(name, *tensors):
    for tape in _active_tapes:
        tape.operations.append((name, tuple(tuple(t.shape) for t in tensors)))


class GradTape:
    """
    Context manager recording the primitives executed inside it.

    Usage::

        with GradTape() as tape:
            x = tape.watch(x)
            loss = layer_norm(x, g, b).sum()
        dx, dg = tape.gradient(loss, [x, g])
    """

    def __init__(self):
        self.operations = []

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    @staticmethod
    def watch(*tensors):
        watched = []
        for t in tensors:
            if not t.requires_grad:
                if t.is_leaf:
                    t.requires_grad_(True)
                else:
                    t = t.detach().requires_grad_(True)
            watched.append(t)
        return watched[0] if len(watched) == 1 else watched

    @staticmethod
    def gradient(loss, tensors, retain_graph=True):
        tensors = list(tensors)
        tracked = [i for i, t in enumerate(tensors) if t.requires_grad]
        grads = [torch.zeros_like(t) for t in tensors]
        if tracked:
            found = torch.autograd.grad(loss, [tensors[i] for i in tracked],
                                        retain_graph=retain_graph,
                                        allow_unused=True)
            for i, g in zip(tracked, found):
                if g is not None:
                    grads[i] = g
        return grads


def _check_matrix(op, *tensors):
    for t in tensors:
        if t.dim() != 2:
            raise DimensionException(op, *[tuple(s.shape) for s in tensors])


def _softmax(x):
    e = torch.exp(x - x.max(dim=1, keepdim=True)[0])
    return e / e.sum(dim=1, keepdim=True)


class _MatMul(torch.autograd.Function):

    @staticmethod
    def forward(ctx, a, b):
        ctx.save_for_backward(a, b)
        return a @ b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved_tensors
        return grad @ b.t(), a.t() @ grad


class _SoftmaxRows(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x):
        y = _softmax(x)
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, grad):
        y, = ctx.saved_tensors
        return y * (grad - (grad * y).sum(dim=1, keepdim=True))


class _LayerNorm(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, gain, bias, eps):
        centered = x - x.mean(dim=1, keepdim=True)
        inv_std = 1.0 / torch.sqrt((centered ** 2).mean(dim=1, keepdim=True) + eps)
        xhat = centered * inv_std
        ctx.save_for_backward(xhat, inv_std, gain)
        return xhat * gain + bias

    @staticmethod
    def backward(ctx, grad):
        xhat, inv_std, gain = ctx.saved_tensors
        dxhat = grad * gain
        dx = inv_std * (dxhat - dxhat.mean(dim=1, keepdim=True)
                        - xhat * (dxhat * xhat).mean(dim=1, keepdim=True))
        return dx, (grad * xhat).sum(dim=0), grad.sum(dim=0), None


class _ScaledDotAttention(torch.autograd.Function):

    @staticmethod
    def forward(ctx, q, k, v, wq, wk, wv, wo, heads):
        Q, K, V = q @ wq, k @ wk, v @ wv
        width = Q.shape[1] // heads
        scale = 1.0 / math.sqrt(width)

        probs, outs = [], []
        for h in range(heads):
            cols = slice(h * width, (h + 1) * width)
            P = _softmax((Q[:, cols] @ K[:, cols].t()) * scale)
            probs.append(P)
            outs.append(P @ V[:, cols])
        O = torch.cat(outs, dim=1)

        ctx.heads = heads
        ctx.save_for_backward(q, k, v, wq, wk, wv, wo, Q, K, V, O, *probs)
        return O @ wo

    @staticmethod
    def backward(ctx, grad):
        saved = ctx.saved_tensors
        q, k, v, wq, wk, wv, wo, Q, K, V, O = saved[:11]
        probs = saved[11:]
        width = Q.shape[1] // ctx.heads
        scale = 1.0 / math.sqrt(width)

        dO = grad @ wo.t()
        dQ, dK, dV = torch.zeros_like(Q), torch.zeros_like(K), torch.zeros_like(V)
        for h, P in enumerate(probs):
            cols = slice(h * width, (h + 1) * width)
            dOh = dO[:, cols]
            dV[:, cols] = P.t() @ dOh
            dP = dOh @ V[:, cols].t()
            dS = P * (dP - (dP * P).sum(dim=1, keepdim=True))
            dQ[:, cols] = (dS @ K[:, cols]) * scale
            dK[:, cols] = (dS.t() @ Q[:, cols]) * scale

        return (dQ @ wq.t(), dK @ wk.t(), dV @ wv.t(),
                q.t() @ dQ, k.t() @ dK, v.t() @ dV, O.t() @ grad, None)


class _MLPBlock(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, w1, b1, w2, b2):
        z = x @ w1 + b1
        a = torch.clamp(z, min=0.0)
        ctx.save_for_backward(x, w1, w2, z, a)
        return a @ w2 + b2

    @staticmethod
    def backward(ctx, grad):
        x, w1, w2, z, a = ctx.saved_tensors
        dz = (grad @ w2.t()) * (z > 0).to(grad.dtype)
        return (dz @ w1.t(), x.t() @ dz, dz.sum(dim=0),
                a.t() @ grad, grad.sum(dim=0))


class _Dense(torch.autograd.Function):

    @staticmethod
    def forward(ctx, x, w, b, relu):
        z = x @ w + b
        mask = (z > 0).to(z.dtype) if relu else torch.ones_like(z)
        ctx.save_for_backward(x, w, mask)
        return z * mask

    @staticmethod
    def backward(ctx, grad):
        x, w, mask = ctx.saved_tensors
        dz = grad * mask
        return dz @ w.t(), x.t() @ dz, dz.sum(dim=0), None


def matmul(a, b):
    """Matrix product of an (m, k) and a (k, n) tensor."""
    _check_matrix('matmul', a, b)
    if a.shape[1] != b.shape[0]:
        raise DimensionException('matmul', tuple(a.shape), tuple(b.shape))
    _record('matmul', a, b)
    return _MatMul.apply(a, b)


def softmax_rows(x):
    _check_matrix('softmax_rows', x)
    _record('softmax_rows', x)
    return _SoftmaxRows.apply(x)


def layer_norm(x, gain, bias, eps=1e-5):
    """
    Row-wise layer normalization.

    Args:
        x (torch.Tensor): (m, d) input, d >= 2.
        gain (torch.Tensor): (d,) scale.
        bias (torch.Tensor): (d,) shift.
        eps (float): variance floor, > 0.
    """
    _check_matrix('layer_norm', x)
    d = x.shape[1]
    if d < 2:
        raise DimensionException('layer_norm (d >= 2 required)', tuple(x.shape))
    if tuple(gain.shape) != (d,) or tuple(bias.shape) != (d,):
        raise DimensionException('layer_norm', tuple(x.shape),
                                 tuple(gain.shape), tuple(bias.shape))
    if not eps > 0:
        raise EvaluationException('layer_norm: eps must be positive, got {!r}'.format(eps))
    _record('layer_norm', x, gain, bias)
    return _LayerNorm.apply(x, gain, bias, float(eps))


def scaled_dot_attention(q, k, v, wq, wk, wv, wo, heads=1):
    """
    softmax((q Wq)(k Wk)^T / sqrt(d / heads)) (v Wv) Wo, split over `heads`
    column blocks.

    Args:
        q (torch.Tensor): (nq, d) queries.
        k (torch.Tensor): (nk, d) keys.
        v (torch.Tensor): (nk, d) values.
        wq, wk, wv, wo (torch.Tensor): (d, d) projections.
        heads (int): number of attention heads, must divide d.

    Returns:
        torch.Tensor: (nq, d) attended output.
    """
    _check_matrix('scaled_dot_attention', q, k, v, wq, wk, wv, wo)
    d = q.shape[1]
    if d == 0 or k.shape[1] != d or v.shape[1] != d or k.shape[0] != v.shape[0]:
        raise DimensionException('scaled_dot_attention', tuple(q.shape),
                                 tuple(k.shape), tuple(v.shape))
    for w in (wq, wk, wv, wo):
        if tuple(w.shape) != (d, d):
            raise DimensionException('scaled_dot_attention', tuple(q.shape), tuple(w.shape))
    if heads < 1 or d % heads != 0:
        raise DimensionException('scaled_dot_attention (heads must divide d)',
                                 tuple(q.shape), (heads,))
    _record('scaled_dot_attention', q, k, v)
    return _ScaledDotAttention.apply(q, k, v, wq, wk, wv, wo, int(heads))


def mlp_block(x, w1, b1, w2, b2):
    """Point-wise relu(x W1 + b1) W2 + b2."""
    _check_matrix('mlp_block', x, w1, w2)
    d, hidden = w1.shape
    if (x.shape[1] != d or tuple(b1.shape) != (hidden,)
            or tuple(w2.shape) != (hidden, d) or tuple(b2.shape) != (d,)):
        raise DimensionException('mlp_block', tuple(x.shape), tuple(w1.shape),
                                 tuple(b1.shape), tuple(w2.shape), tuple(b2.shape))
    _record('mlp_block', x, w1, w2)
    return _MLPBlock.apply(x, w1, b1, w2, b2)


def dense(x, w, b, relu=False):
    """Affine map x W + b with an optional ReLU."""
    _check_matrix('dense', x, w)
    if x.shape[1] != w.shape[0] or tuple(b.shape) != (w.shape[1],):
        raise DimensionException('dense', tuple(x.shape), tuple(w.shape), tuple(b.shape))
    _record('dense', x, w)
    return _Dense.apply(x, w, b, bool(relu))


def grad_check(f, params, h=1e-6, max_entries=None, seed=0):
    """
    Compare analytic gradients of a scalar loss with central differences.

    Args:
        f (callable): closure returning a scalar tensor computed from `params`.
        params (list(torch.Tensor)): float64 leaf tensors `f` depends on.
        h (float): finite-difference step.
        max_entries (int): if given, check at most this many randomly chosen
            entries per parameter.
        seed (int): seed for the entry subsampling.

    Returns:
        float: max over all checked entries of
            |analytic - numeric| / max(1, |numeric|).
    """
    params = list(params)
    for p in params:
        if p.is_leaf and not p.requires_grad:
            p.requires_grad_(True)

    loss = f()
    if not bool(torch.isfinite(loss).all()):
        raise EvaluationException('grad_check: non-finite loss {!r}'.format(loss))
    analytic = GradTape.gradient(loss, params, retain_graph=False)

    rng = np.random.RandomState(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and idx.size > max_entries:
                idx = np.sort(rng.choice(idx, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise EvaluationException('grad_check: non-finite loss while perturbing')
                numeric = (up - down) / (2.0 * h)
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    logging.debug('grad_check: max relative error %.3e', worst)
    return worst


def write_tensor(f, tensor):
    """Write one tensor container: magic, u32 rank, u64 dims, f64 data."""
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor)
                               else tensor, dtype='<f8')
    f.write(MAGIC)
    f.write(np.array([arr.ndim], dtype='<u4').tobytes())
    f.write(np.array(arr.shape, dtype='<u8').tobytes())
    f.write(arr.tobytes())


def read_tensor(f):
    magic = f.read(4)
    if magic != MAGIC:
        raise SchemaException('not a tensor container (magic {!r})'.format(magic))
    rank = int(np.frombuffer(f.read(4), dtype='<u4')[0])
    shape = tuple(int(s) for s in np.frombuffer(f.read(8 * rank), dtype='<u8'))
    count = int(np.prod(shape)) if rank else 1
    raw = f.read(8 * count)
    if len(raw) != 8 * count:
        raise SchemaException('truncated tensor container, expected {:d} values'.format(count))
    return torch.from_numpy(np.frombuffer(raw, dtype='<f8').copy()).reshape(shape)


def save_tensor(path, tensor):
    with open(path, 'wb') as f:
        write_tensor(f, tensor)


def load_tensor(path):
    with open(path, 'rb') as f:
        return read_tensor(f)


def tensor_bytes(tensor):
    buf = io.BytesIO()
    write_tensor(buf, tensor)
    return buf.getvalue()


def tensor_to_json(tensor):
    arr = tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else np.asarray(tensor)
    return {'shape': list(arr.shape), 'data': arr.reshape(-1).astype(np.float64).tolist()}


def tensor_from_json(obj):
    try:
        shape, data = obj['shape'], obj['data']
    except (KeyError, TypeError):
        raise SchemaException('tensor JSON needs "shape" and "data"')
    if any(int(s) <= 0 for s in shape):
        raise SchemaException('tensor dims must be positive, got {!r}'.format(shape))
    if len(data) != int(np.prod(shape)):
        raise SchemaException('tensor data length {:d} does not match shape {!r}'.format(
            len(data), shape))
    return as_tensor(data, shape)
