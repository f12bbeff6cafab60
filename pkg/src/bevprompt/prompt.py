# coding: utf-8
"""
Feature prompts from 2D detections.

A detection {x, y, width, height, label} becomes a 3 x d matrix E: the
normalized top-left and bottom-right corners A (2 x 2) are lifted by a fixed
Gaussian matrix B (2 x d) and shifted by a learnable matrix C (2 x d), and a
third row repeats the class index.
"""

import logging
import numbers

import torch
import torch.nn as nn

from bevprompt.errors import ConfigurationException, LabelException
from bevprompt.numerics import DTYPE, as_tensor, matmul

LABEL_NORMALIZED = 'normalized'
LABEL_RAW = 'raw'

BOX = 'box'
CENTER = 'center'
CENTER_NOLABEL = 'center_nolabel'
PROMPT_MODES = (BOX, CENTER, CENTER_NOLABEL)


def normalize_box(box, image_width, image_height):
    """A = [[x_min / W, y_min / H], [x_max / W, y_max / H]]."""
    if image_width <= 0 or image_height <= 0:
        raise ConfigurationException('image size must be positive, got {!r}x{!r}'.format(
            image_width, image_height))
    return as_tensor([[box.x_min / image_width, box.y_min / image_height],
                      [box.x_max / image_width, box.y_max / image_height]])


def normalize_center(box, image_width, image_height):
    if image_width <= 0 or image_height <= 0:
        raise ConfigurationException('image size must be positive, got {!r}x{!r}'.format(
            image_width, image_height))
    cx, cy = box.center
    return as_tensor([[cx / image_width, cy / image_height]])


def label_row(label_index, n_classes, d_model, mode=LABEL_NORMALIZED):
    """The class index repeated d_model times, divided by `n_classes` in normalized mode."""
    if not isinstance(label_index, numbers.Integral) or label_index < 0 or label_index >= n_classes:
        raise LabelException('label index {!r} outside [0, {:d})'.format(label_index, n_classes))
    label_index = int(label_index)
    value = label_index / n_classes if mode == LABEL_NORMALIZED else float(label_index)
    return torch.full((1, d_model), value, dtype=DTYPE)


class PromptFeature:

    def __init__(self, E, index):
        self.E = E
        self.index = index

    @property
    def tokens(self):
        return self.E.shape[0]


class PromptEncoder(nn.Module):
    """
    Prompt weights B (fixed random features) and C (learnable shift).

    Args:
        d_model (int): token width.
        seed (int): seed of the Gaussian draw of B.
        label_scale_mode (str): 'normalized' divides the class index by the
            number of classes, 'raw' repeats the index itself.
        learnable_b (bool): register B as a parameter instead of a buffer.
    """

    def __init__(self, d_model=512, seed=17, label_scale_mode=LABEL_NORMALIZED,
                 learnable_b=False):
        super(PromptEncoder, self).__init__()
        if label_scale_mode not in (LABEL_NORMALIZED, LABEL_RAW):
            raise ConfigurationException('unknown label scale mode {!r}'.format(label_scale_mode))
        self.d_model = d_model
        self.seed = seed
        self.label_scale_mode = label_scale_mode
        self.learnable_b = learnable_b

        generator = torch.Generator().manual_seed(seed)
        B = torch.randn(2, d_model, generator=generator, dtype=DTYPE)
        if learnable_b:
            self.B = nn.Parameter(B)
        else:
            self.register_buffer('B', B)
        self.C = nn.Parameter(torch.zeros(2, d_model, dtype=DTYPE))

    def header(self):
        return {'seed': self.seed, 'd_model': self.d_model,
                'label_scale_mode': self.label_scale_mode, 'learnable_b': self.learnable_b}

    def label_row(self, label_index, n_classes):
        return label_row(label_index, n_classes, self.d_model, self.label_scale_mode)

    def encode_prompt(self, box, label_index, n_classes, image_width, image_height, index=0):
        """
        E = [A B + C; label row], shape 3 x d.

        Args:
            box (Box2D): clipped detection box.
            label_index (int): class index in [0, n_classes).
            n_classes (int): size of the label index space.
        """
        A = normalize_box(box, image_width, image_height)
        D = matmul(A, self.B) + self.C
        E = torch.cat([D, self.label_row(label_index, n_classes)], dim=0)
        return PromptFeature(E, index)

    def encode_center_prompt(self, box, label_index, n_classes, image_width, image_height,
                             with_label=True, index=0):
        """Center row (1 x d) plus, unless `with_label` is off, the label row."""
        A = normalize_center(box, image_width, image_height)
        D = matmul(A, self.B) + self.C[:1]
        if with_label:
            D = torch.cat([D, self.label_row(label_index, n_classes)], dim=0)
        return PromptFeature(D, index)

    def encode(self, box, grouping, image_width, image_height, mode=BOX, index=0):
        """Encode one detection, taking its label index from the grouping's head arity."""
        label_index, n_classes = grouping.prompt_label(box.label)
        if mode == BOX:
            return self.encode_prompt(box, label_index, n_classes, image_width, image_height, index)
        if mode == CENTER:
            return self.encode_center_prompt(box, label_index, n_classes, image_width,
                                             image_height, True, index)
        if mode == CENTER_NOLABEL:
            return self.encode_center_prompt(box, label_index, n_classes, image_width,
                                             image_height, False, index)
        raise ConfigurationException('unknown prompt mode {!r}'.format(mode))

    def encode_frame(self, boxes, grouping, image_width, image_height, mode=BOX):
        """
        Stack the prompts of one frame into a single token matrix.

        Returns:
            tuple: (T x d tokens, list of row slices, one per detection).
        """
        features = [self.encode(b, grouping, image_width, image_height, mode, i)
                    for i, b in enumerate(boxes)]
        groups, start = [], 0
        for f in features:
            groups.append(slice(start, start + f.tokens))
            start += f.tokens
        if not features:
            logging.debug('encode_frame: no prompts')
            return torch.zeros(0, self.d_model, dtype=DTYPE), groups
        return torch.cat([f.E for f in features], dim=0), groups
