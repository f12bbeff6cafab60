# coding: utf-8

import logging

import torch
import torch.nn as nn

from bevprompt.errors import ConfigurationException
from bevprompt.fusion import (PER_DETECTION, QUERY_IMAGE, QUERY_PROMPT, STACKED,
                              DecodeHead, FusionModule, VectorPromptEncoder,
                              decode_head, fuse, load_weights, read_manifest,
                              save_weights)
from bevprompt.grouping import K_WAY, ONE_WAY, load_grouping
from bevprompt.nn import _init_weight, count_parameters
from bevprompt.numerics import DTYPE, matmul
from bevprompt.prompt import (BOX, CENTER, CENTER_NOLABEL, LABEL_NORMALIZED,
                              LABEL_RAW, PromptEncoder)
from bevprompt.utils import Config

VECTOR = 'vector'
N_TARGETS = 5


class ModelConfig(Config):
    defaults = {
        'd_model': 16,
        'c_in': 16,
        'heads': 1,
        'hidden': None,
        'head_hidden': 64,
        'residuals': True,
        'step4_query_mode': QUERY_IMAGE,
        'fusion_mode': STACKED,
        'eps': 1e-5,
        'prompt_seed': 17,
        'label_scale_mode': LABEL_NORMALIZED,
        'learnable_b': False,
        'prompt_mode': BOX,
        'grouping': 'functionality',
        'arity': ONE_WAY,
        'multi_head': True,
    }

    def validate(self):
        if self.d_model < 2 or self.d_model % self.heads != 0:
            raise ConfigurationException('d_model must be >= 2 and divisible by heads')
        if self.c_in < 1:
            raise ConfigurationException('c_in must be positive')
        if self.step4_query_mode not in (QUERY_IMAGE, QUERY_PROMPT):
            raise ConfigurationException('unknown step4_query_mode {!r}'.format(self.step4_query_mode))
        if self.fusion_mode not in (STACKED, PER_DETECTION):
            raise ConfigurationException('unknown fusion_mode {!r}'.format(self.fusion_mode))
        if self.label_scale_mode not in (LABEL_NORMALIZED, LABEL_RAW):
            raise ConfigurationException('unknown label_scale_mode {!r}'.format(self.label_scale_mode))
        if self.prompt_mode not in (BOX, CENTER, CENTER_NOLABEL, VECTOR):
            raise ConfigurationException('unknown prompt_mode {!r}'.format(self.prompt_mode))
        if self.arity not in (ONE_WAY, K_WAY):
            raise ConfigurationException('unknown arity {!r}'.format(self.arity))


class BEVPromptModel(nn.Module):
    """
    Prompt encoder, fusion module and one decode head per superclass.

    Detections are routed to the head of their superclass; with
    `multi_head` off a single head serves every detection.
    """

    def __init__(self, cfg=None):
        super(BEVPromptModel, self).__init__()
        self.cfg = cfg if cfg is not None else ModelConfig()
        cfg = self.cfg
        self.grouping = load_grouping(cfg.grouping, cfg.arity)

        if cfg.prompt_mode == VECTOR:
            self.encoder = VectorPromptEncoder(cfg.c_in, cfg.d_model, cfg.label_scale_mode)
        else:
            self.encoder = PromptEncoder(cfg.d_model, cfg.prompt_seed, cfg.label_scale_mode,
                                         cfg.learnable_b)
        self.fusion = FusionModule(cfg.d_model, cfg.c_in, cfg.heads, cfg.hidden,
                                   cfg.residuals, cfg.step4_query_mode, cfg.eps)
        n_heads = self.grouping.num_heads if cfg.multi_head else 1
        self.heads = nn.ModuleList([DecodeHead(cfg.d_model, cfg.head_hidden, N_TARGETS, cfg.heads)
                                    for _ in range(n_heads)])
        logging.debug('BEVPromptModel: %d heads, %d parameters', n_heads, count_parameters(self))

    def route(self, boxes):
        if not self.cfg.multi_head:
            return [0] * len(boxes)
        return [self.grouping.head(b.label) for b in boxes]

    def encode(self, image, boxes, image_width, image_height):
        if self.cfg.prompt_mode == VECTOR:
            return self.encoder.encode_frame(boxes, self.grouping, image,
                                             image_width, image_height)
        return self.encoder.encode_frame(boxes, self.grouping, image_width, image_height,
                                         self.cfg.prompt_mode)

    def forward(self, image, boxes, image_width, image_height):
        """
        Args:
            image (ImageFeature): raw toy image features of the frame.
            boxes (list(Box2D)): prompts of the frame.

        Returns:
            torch.Tensor: (len(boxes), 5) regression outputs.
        """
        if not boxes:
            return torch.zeros(0, N_TARGETS, dtype=DTYPE)
        tokens, groups = self.encode(image, boxes, image_width, image_height)
        fused = fuse(tokens, image, self.fusion, groups, self.cfg.fusion_mode)
        return decode_head(fused, groups, [self.heads[h] for h in self.route(boxes)])


class PooledBaselineModel(nn.Module):
    """
    Prompt-free baseline: the same decode heads fed with the projected image
    features of the whole frame, so every detection of a head gets the same
    output.
    """

    def __init__(self, cfg=None):
        super(PooledBaselineModel, self).__init__()
        self.cfg = cfg if cfg is not None else ModelConfig()
        cfg = self.cfg
        self.grouping = load_grouping(cfg.grouping, cfg.arity)
        self.w_in = _init_weight(cfg.c_in, cfg.d_model)
        n_heads = self.grouping.num_heads if cfg.multi_head else 1
        self.heads = nn.ModuleList([DecodeHead(cfg.d_model, cfg.head_hidden, N_TARGETS, cfg.heads)
                                    for _ in range(n_heads)])

    def route(self, boxes):
        if not self.cfg.multi_head:
            return [0] * len(boxes)
        return [self.grouping.head(b.label) for b in boxes]

    def forward(self, image, boxes, image_width, image_height):
        if not boxes:
            return torch.zeros(0, N_TARGETS, dtype=DTYPE)
        I = matmul(image.I, self.w_in)
        return torch.cat([self.heads[h](I, I) for h in self.route(boxes)], dim=0)


PROMPTED = 'prompted'
BASELINE = 'baseline'

MODEL_KINDS = {PROMPTED: BEVPromptModel, BASELINE: PooledBaselineModel}


def build_model(cfg, kind=PROMPTED):
    if kind not in MODEL_KINDS:
        raise ConfigurationException('unknown model kind {!r}'.format(kind))
    return MODEL_KINDS[kind](cfg)


def save_checkpoint(model, path):
    kind = BASELINE if isinstance(model, PooledBaselineModel) else PROMPTED
    cfg = model.cfg
    manifest = {'kind': kind, 'model': cfg.to_dict(), 'd_model': cfg.d_model,
                'heads': cfg.heads, 'residuals': cfg.residuals,
                'step4_query_mode': cfg.step4_query_mode}
    save_weights(model, path, manifest)


def load_checkpoint(path):
    manifest = read_manifest(path)
    model = build_model(ModelConfig.from_dict(manifest['model']), manifest['kind'])
    return load_weights(model, path)
