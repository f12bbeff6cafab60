# coding: utf-8

import torch
import torch.nn as nn

from bevprompt.numerics import (DTYPE, dense, layer_norm, mlp_block,
                                scaled_dot_attention)


def _init_weight(n_in, n_out):
    w = torch.empty(n_in, n_out, dtype=DTYPE)
    nn.init.xavier_uniform_(w)
    return nn.Parameter(w)


class Dense(nn.Module):
    """
    Affine layer x W + b on row-major (m, n_in) inputs.

    Args:
        n_in (int): input width
        n_out (int): output width
        relu (bool): apply a ReLU to the output
    """

    def __init__(self, n_in, n_out, relu=False):
        super(Dense, self).__init__()
        self.relu = relu
        self.weight = _init_weight(n_in, n_out)
        self.bias = nn.Parameter(torch.zeros(n_out, dtype=DTYPE))

    def forward(self, x):
        return dense(x, self.weight, self.bias, relu=self.relu)


class LayerNorm(nn.Module):

    def __init__(self, d, eps=1e-5):
        super(LayerNorm, self).__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


class Attention(nn.Module):
    """
    Scaled dot-product attention with square query/key/value/output
    projections.

    Args:
        d (int): token width
        heads (int): number of heads, must divide `d`
    """

    def __init__(self, d, heads=1):
        super(Attention, self).__init__()
        self.heads = heads
        self.wq = _init_weight(d, d)
        self.wk = _init_weight(d, d)
        self.wv = _init_weight(d, d)
        self.wo = _init_weight(d, d)

    def forward(self, q, kv):
        return scaled_dot_attention(q, kv, kv, self.wq, self.wk, self.wv, self.wo,
                                    heads=self.heads)


class PointwiseMLP(nn.Module):

    def __init__(self, d, hidden):
        super(PointwiseMLP, self).__init__()
        self.w1 = _init_weight(d, hidden)
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.w2 = _init_weight(hidden, d)
        self.b2 = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, x):
        return mlp_block(x, self.w1, self.b1, self.w2, self.b2)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)

