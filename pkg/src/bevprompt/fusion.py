# coding: utf-8
"""
Four-step attention fusion of prompt tokens E with image features I:

    F = Norm(SelfAttn(E) [+ E])
    G = Norm(CrossAttn(Q=F, K=V=I) [+ F])
    H = Norm(MLP(G) [+ G])
    J = Norm(CrossAttn(Q=I, K=V=H) [+ I])

Bracketed residuals follow the `residuals` flag. With step4_query_mode
'prompt' the last step queries with H instead (J = Norm(CrossAttn(Q=H, K=V=I)
[+ H]), T x d).
"""

import logging
import os

import torch
import torch.nn as nn

from bevprompt.data import read_json, write_json
from bevprompt.errors import (ConfigurationException, DimensionException,
                              EmptyPromptException, EvaluationException,
                              SchemaException)
from bevprompt.nn import Attention, Dense, LayerNorm, PointwiseMLP, _init_weight
from bevprompt.numerics import (DTYPE, load_tensor, matmul, save_tensor, tensor_from_json,
                                tensor_to_json)
from bevprompt.prompt import LABEL_NORMALIZED, PromptFeature, label_row

QUERY_IMAGE = 'image'
QUERY_PROMPT = 'prompt'

STACKED = 'stacked'
PER_DETECTION = 'per_detection'


class ImageFeature:
    """
    Flattened feature grid.

    Args:
        I (torch.Tensor): (S, C) features, rows in row-major grid order.
        grid (tuple): (rows, cols) with rows * cols == S.
    """

    def __init__(self, I, grid):
        if I.dim() != 2 or I.shape[0] != grid[0] * grid[1]:
            raise DimensionException('ImageFeature', tuple(I.shape), tuple(grid))
        self.I = I
        self.grid = (int(grid[0]), int(grid[1]))

    @property
    def channels(self):
        return self.I.shape[1]

    def unflatten(self):
        return self.I.reshape(self.grid[0], self.grid[1], -1)

    def cell_at(self, u, v, image_width, image_height):
        """Row index of the cell containing pixel (u, v)."""
        rows, cols = self.grid
        col = min(max(int(u * cols / image_width), 0), cols - 1)
        row = min(max(int(v * rows / image_height), 0), rows - 1)
        return row * cols + col


class FusedFeature:

    def __init__(self, J, H, F=None, G=None, I=None, J_groups=None):
        self.J = J
        self.H = H
        self.F = F
        self.G = G
        self.I = I
        self.J_groups = J_groups

    def J_for(self, group_index):
        if self.J_groups is not None:
            return self.J_groups[group_index]
        return self.J

    def trace(self):
        return {'I': self.I, 'F': self.F, 'G': self.G, 'H': self.H, 'J': self.J}


class FusionModule(nn.Module):
    """
    Fusion weights and the fusion forward pass.

    Args:
        d_model (int): token width.
        c_in (int): channels of the raw image features, projected to d_model.
        heads (int): attention heads of every attention step.
        hidden (int): width of the point-wise MLP, 4 * d_model by default.
        residuals (bool): add each step's input before normalizing.
        step4_query_mode (str): 'image' or 'prompt'.
        eps (float): layer norm variance floor.
    """

    def __init__(self, d_model=512, c_in=None, heads=1, hidden=None, residuals=True,
                 step4_query_mode=QUERY_IMAGE, eps=1e-5):
        super(FusionModule, self).__init__()
        if step4_query_mode not in (QUERY_IMAGE, QUERY_PROMPT):
            raise ConfigurationException('unknown step4_query_mode {!r}'.format(step4_query_mode))
        self.d_model = d_model
        self.c_in = c_in if c_in is not None else d_model
        self.heads = heads
        self.hidden = hidden if hidden is not None else 4 * d_model
        self.residuals = residuals
        self.step4_query_mode = step4_query_mode
        self.eps = eps

        self.w_in = _init_weight(self.c_in, d_model)
        self.self_attn = Attention(d_model, heads)
        self.cross_attn = Attention(d_model, heads)
        self.mlp = PointwiseMLP(d_model, self.hidden)
        self.out_attn = Attention(d_model, heads)
        self.norm1 = LayerNorm(d_model, eps)
        self.norm2 = LayerNorm(d_model, eps)
        self.norm3 = LayerNorm(d_model, eps)
        self.norm4 = LayerNorm(d_model, eps)

    def manifest(self):
        return {'d_model': self.d_model, 'c_in': self.c_in, 'heads': self.heads,
                'hidden': self.hidden, 'residuals': self.residuals,
                'step4_query_mode': self.step4_query_mode, 'eps': self.eps}

    def _add(self, out, x):
        return out + x if self.residuals else out

    def project(self, I_raw):
        if I_raw.dim() != 2 or I_raw.shape[1] != self.c_in:
            raise DimensionException('fuse (image channels)', tuple(I_raw.shape),
                                     (self.c_in, self.d_model))
        return matmul(I_raw, self.w_in)

    def forward(self, tokens, image):
        """
        Args:
            tokens (torch.Tensor): (T, d_model) stacked prompt tokens, T > 0.
            image (ImageFeature or torch.Tensor): raw (S, c_in) image features.

        Returns:
            FusedFeature: J (S x d, or T x d in 'prompt' query mode) and H (T x d)
                with the intermediate F, G and projected I attached.
        """
        if tokens.shape[0] == 0:
            raise EmptyPromptException('fuse needs at least one prompt token')
        if tokens.dim() != 2 or tokens.shape[1] != self.d_model:
            raise DimensionException('fuse (prompt tokens)', tuple(tokens.shape),
                                     (tokens.shape[0], self.d_model))
        I_raw = image.I if isinstance(image, ImageFeature) else image
        I = self.project(I_raw)

        F = self.norm1(self._add(self.self_attn(tokens, tokens), tokens))
        G = self.norm2(self._add(self.cross_attn(F, I), F))
        H = self.norm3(self._add(self.mlp(G), G))
        if self.step4_query_mode == QUERY_IMAGE:
            J = self.norm4(self._add(self.out_attn(I, H), I))
        else:
            J = self.norm4(self._add(self.out_attn(H, I), H))
        return FusedFeature(J, H, F=F, G=G, I=I)


def fuse(tokens, image, module, groups=None, mode=STACKED):
    """
    Fuse prompt tokens with image features.

    In 'stacked' mode all prompt groups attend to each other in one pass. In
    'per_detection' mode every group in `groups` is fused on its own; J is
    then the mean over the passes and each pass's J is kept for readout.
    """
    if mode == STACKED:
        return module(tokens, image)
    if mode != PER_DETECTION:
        raise ConfigurationException('unknown fusion mode {!r}'.format(mode))
    if not groups:
        raise EmptyPromptException('per-detection fusion needs at least one prompt group')
    parts = [module(tokens[g], image) for g in groups]
    J_groups = [p.J for p in parts]
    return FusedFeature(torch.stack(J_groups).mean(dim=0),
                        torch.cat([p.H for p in parts], dim=0),
                        F=torch.cat([p.F for p in parts], dim=0),
                        G=torch.cat([p.G for p in parts], dim=0),
                        I=parts[0].I, J_groups=J_groups)


def fuse_concat(feat2d, I_raw, w):
    """
    Channel-wise concatenation of 2D-detector feature maps with the raw image
    features, projected by `w` ((c + C_in) x d).
    """
    if feat2d.dim() != 2 or I_raw.dim() != 2 or feat2d.shape[0] != I_raw.shape[0]:
        raise DimensionException('fuse_concat', tuple(feat2d.shape), tuple(I_raw.shape))
    return matmul(torch.cat([feat2d, I_raw], dim=1), w)


class VectorPromptEncoder(nn.Module):
    """
    Feature-vector prompts: the raw image feature of the cell under the box
    center, projected to a token, followed by the label row.
    """

    def __init__(self, c_in, d_model, label_scale_mode=LABEL_NORMALIZED):
        super(VectorPromptEncoder, self).__init__()
        self.d_model = d_model
        self.label_scale_mode = label_scale_mode
        self.w_vec = _init_weight(c_in, d_model)

    def encode(self, box, grouping, image, image_width, image_height, index=0):
        label_index, n_classes = grouping.prompt_label(box.label)
        return encode_vector_prompt(box, label_index, n_classes, image, image_width,
                                    image_height, self.w_vec, self.label_scale_mode, index)

    def encode_frame(self, boxes, grouping, image, image_width, image_height):
        features = [self.encode(b, grouping, image, image_width, image_height, i)
                    for i, b in enumerate(boxes)]
        groups = [slice(2 * i, 2 * i + 2) for i in range(len(features))]
        if not features:
            return torch.zeros(0, self.d_model, dtype=DTYPE), groups
        return torch.cat([f.E for f in features], dim=0), groups


def encode_vector_prompt(box, label_index, n_classes, image, image_width, image_height,
                         w_vec, label_scale_mode=LABEL_NORMALIZED, index=0):
    u, v = box.center
    cell = image.cell_at(u, v, image_width, image_height)
    token = matmul(image.I[cell:cell + 1], w_vec)
    row = label_row(label_index, n_classes, w_vec.shape[1], label_scale_mode)
    return PromptFeature(torch.cat([token, row], dim=0), index)


class DecodeHead(nn.Module):
    """
    Per-detection regression: the mean of the detection's H rows, an
    attention readout of J queried by that mean, concatenated and passed
    through a two-layer MLP.

    Args:
        d_model (int): token width.
        hidden (int): width of the hidden layer.
        n_targets (int): regression outputs per detection.
        heads (int): heads of the readout attention.
    """

    def __init__(self, d_model, hidden=64, n_targets=5, heads=1):
        super(DecodeHead, self).__init__()
        self.n_targets = n_targets
        self.readout = Attention(d_model, heads)
        self.hidden = Dense(2 * d_model, hidden, relu=True)
        self.out = Dense(hidden, n_targets)

    def forward(self, rows, J):
        if rows.shape[0] == 0:
            raise EvaluationException('decode head received an empty token group')
        h = rows.mean(dim=0, keepdim=True)
        r = self.readout(h, J)
        return self.out(self.hidden(torch.cat([h, r], dim=1)))


def decode_head(fused, groups, head):
    """
    Regress every detection from its own token group.

    Args:
        fused (FusedFeature): fusion output.
        groups (list(slice)): rows of H belonging to each detection.
        head (DecodeHead or list(DecodeHead)): one head, or one head per group.

    Returns:
        torch.Tensor: (len(groups), n_targets)
    """
    if isinstance(head, (list, tuple, nn.ModuleList)):
        heads = head
    else:
        heads = [head] * len(groups)
    if not groups:
        return torch.zeros(0, heads[0].n_targets if heads else head.n_targets, dtype=DTYPE)
    rows = [heads[i](fused.H[g], fused.J_for(i)) for i, g in enumerate(groups)]
    return torch.cat(rows, dim=0)


def save_weights(module, path, manifest):
    """Write every state tensor as `<name>.bptn` plus `manifest.json` into `path`."""
    os.makedirs(path, exist_ok=True)
    for name, tensor in module.state_dict().items():
        save_tensor(os.path.join(path, name + '.bptn'), tensor)
    write_json(os.path.join(path, 'manifest.json'), manifest)
    logging.info('saved %d tensors to %s', len(module.state_dict()), path)


def load_weights(module, path):
    state = module.state_dict()
    loaded = {}
    for name, tensor in state.items():
        t = load_tensor(os.path.join(path, name + '.bptn'))
        if tuple(t.shape) != tuple(tensor.shape):
            raise SchemaException('checkpoint tensor {!r} has shape {!r}, expected {!r}'.format(
                name, tuple(t.shape), tuple(tensor.shape)))
        loaded[name] = t
    module.load_state_dict(loaded)
    return module


def read_manifest(path):
    return read_json(os.path.join(path, 'manifest.json'))


def save_fusion(module, path):
    save_weights(module, path, module.manifest())


def load_fusion(path):
    manifest = read_manifest(path)
    module = FusionModule(**manifest)
    return load_weights(module, path)


TRACE_STEPS = ('F', 'G', 'H', 'J')


def module_from_fixture(fixture):
    """FusionModule built from a trace fixture's config and explicit weights."""
    module = FusionModule(**fixture['config'])
    state = module.state_dict()
    weights = fixture['weights']
    missing = sorted(set(state) - set(weights))
    unknown = sorted(set(weights) - set(state))
    if missing or unknown:
        raise SchemaException('fixture weights: missing {!r}, unknown {!r}'.format(missing, unknown))
    loaded = {}
    for name, tensor in state.items():
        t = tensor_from_json(weights[name])
        if tuple(t.shape) != tuple(tensor.shape):
            raise SchemaException('fixture weight {!r} has shape {!r}, expected {!r}'.format(
                name, tuple(t.shape), tuple(tensor.shape)))
        loaded[name] = t
    module.load_state_dict(loaded)
    return module


def fuse_trace(fixture):
    """
    Run one fusion pass from a fixture and return the step tensors.

    Args:
        fixture (dict): 'config' (FusionModule arguments), 'weights' (state
            tensors as {'shape', 'data'}), 'E' prompt tokens, 'I_raw' raw image
            features and 'grid'.

    Returns:
        dict: 'I', 'F', 'G', 'H', 'J' as torch tensors.
    """
    module = module_from_fixture(fixture)
    image = ImageFeature(tensor_from_json(fixture['I_raw']), tuple(fixture['grid']))
    with torch.no_grad():
        fused = module(tensor_from_json(fixture['E']), image)
    return fused.trace()


def trace_errors(trace, expected):
    """Max absolute deviation per step from the expected tensors of a fixture."""
    errors = {}
    for step in TRACE_STEPS:
        if step not in expected:
            continue
        ref = tensor_from_json(expected[step])
        if tuple(ref.shape) != tuple(trace[step].shape):
            raise DimensionException('fuse_trace ' + step, tuple(trace[step].shape), tuple(ref.shape))
        errors[step] = float((trace[step] - ref).abs().max())
    return errors


def trace_to_json(trace):
    return {k: tensor_to_json(v) for k, v in trace.items()}
