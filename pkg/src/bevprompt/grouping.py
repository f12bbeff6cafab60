# coding: utf-8
"""
Class grouping and multi-head routing.

A grouping partitions the fine label vocabulary into superclasses; every
superclass is served by its own decode head whose classifier is either
1-way (predicts the superclass) or K-way (predicts the fine label).
"""

import logging

import numpy as np

from bevprompt.data import read_json, validate_json
from bevprompt.errors import ConfigurationException, LabelException
from bevprompt.matching import TP, match_greedy

FINE_CLASSES = ['truck', 'bus', 'car', 'van', 'bicyclist', 'tricyclist',
                'motorcyclist', 'barrowlist', 'pedestrian']

ONE_WAY = '1-way'
K_WAY = 'K-way'

VEHICLES = ['car', 'van', 'truck', 'bus']
CYCLISTS = ['bicyclist', 'tricyclist', 'motorcyclist', 'barrowlist']

BUILTIN_GROUPINGS = {
    'appearance': [
        ('large_vehicle', ['truck', 'bus']),
        ('small_vehicle', ['car', 'van']),
        ('cyclist', CYCLISTS),
        ('pedestrian', ['pedestrian']),
    ],
    'functionality': [
        ('vehicle', VEHICLES),
        ('cyclist', CYCLISTS),
        ('pedestrian', ['pedestrian']),
    ],
    'entirety': [
        ('object', FINE_CLASSES),
    ],
}


class Superclass:

    def __init__(self, name, members, arity=ONE_WAY):
        if arity not in (ONE_WAY, K_WAY):
            raise ConfigurationException('unknown head arity {!r}'.format(arity))
        if len(members) == 0:
            raise ConfigurationException('superclass {!r} has no members'.format(name))
        self.name = name
        self.members = list(members)
        self.arity = arity

    def to_dict(self):
        return {'name': self.name, 'members': list(self.members), 'arity': self.arity}


class ClassGrouping:
    """
    Total map from fine labels to (superclass, head index).

    Args:
        name (str): strategy name.
        superclasses (list(Superclass)): ordered superclasses; the position
            of a superclass is its head index.
        vocabulary (list(str)): fine labels. Defaults to the union of the
            superclass members in order of appearance.
    """

    def __init__(self, name, superclasses, vocabulary=None):
        self.name = name
        self.superclasses = list(superclasses)
        members = [m for s in self.superclasses for m in s.members]
        if len(set(members)) != len(members):
            raise ConfigurationException(
                'grouping {!r}: a fine label belongs to several superclasses'.format(name))
        self.vocabulary = list(vocabulary) if vocabulary is not None else members
        if set(self.vocabulary) != set(members):
            raise ConfigurationException(
                'grouping {!r} does not cover the vocabulary exactly'.format(name))

        self._routes = {}
        for head, s in enumerate(self.superclasses):
            for m in s.members:
                self._routes[m] = (s.name, head)

    @property
    def num_heads(self):
        return len(self.superclasses)

    @property
    def superclass_names(self):
        return [s.name for s in self.superclasses]

    def route(self, fine_label):
        try:
            return self._routes[fine_label]
        except KeyError:
            raise LabelException('unknown label {!r} for grouping {!r}'.format(
                fine_label, self.name))

    def superclass(self, fine_label):
        return self.route(fine_label)[0]

    def head(self, fine_label):
        return self.route(fine_label)[1]

    def fine_index(self, fine_label):
        try:
            return self.vocabulary.index(fine_label)
        except ValueError:
            raise LabelException('unknown label {!r}'.format(fine_label))

    def arity(self, fine_label):
        return self.superclasses[self.head(fine_label)].arity

    def prompt_label(self, fine_label):
        """
        Class index carried by a prompt and the size of its index space:
        the superclass index for 1-way heads, the fine index for K-way heads.
        """
        if self.arity(fine_label) == ONE_WAY:
            return self.head(fine_label), self.num_heads
        return self.fine_index(fine_label), len(self.vocabulary)

    def members(self, superclass):
        for s in self.superclasses:
            if s.name == superclass:
                return list(s.members)
        raise LabelException('unknown superclass {!r}'.format(superclass))

    def to_dict(self):
        return {'name': self.name,
                'superclasses': [s.to_dict() for s in self.superclasses]}

    def __eq__(self, other):
        return (isinstance(other, ClassGrouping) and self.to_dict() == other.to_dict()
                and self.vocabulary == other.vocabulary)

    def __repr__(self):
        return 'ClassGrouping({!r}, heads={:d})'.format(self.name, self.num_heads)


def builtin_grouping(name, arity=ONE_WAY):
    if name not in BUILTIN_GROUPINGS:
        raise ConfigurationException('unknown grouping {!r}, choose from {!r}'.format(
            name, sorted(BUILTIN_GROUPINGS)))
    superclasses = [Superclass(s, members, arity) for s, members in BUILTIN_GROUPINGS[name]]
    return ClassGrouping(name, superclasses, vocabulary=FINE_CLASSES)


def grouping_from_dict(obj):
    validate_json(obj, 'grouping')
    superclasses = [Superclass(s['name'], s['members'], s.get('arity', ONE_WAY))
                    for s in obj['superclasses']]
    return ClassGrouping(obj['name'], superclasses)


def load_grouping(name_or_path, arity=ONE_WAY):
    """Builtin grouping by name, or a grouping JSON file."""
    if name_or_path in BUILTIN_GROUPINGS:
        return builtin_grouping(name_or_path, arity)
    return grouping_from_dict(read_json(name_or_path))


def route(grouping, fine_label):
    return grouping.route(fine_label)


def evaluate_grouping_consistency(grouping, detections, ground_truth, iou_fn, threshold=0.5):
    """
    Superclass label agreement of matched detections.

    Detections are matched to ground truth frame by frame, class-agnostically
    and greedily in descending score order.

    Returns:
        dict: superclass of the ground truth -> fraction of its matched
            detections that carry the same superclass, or None when nothing
            of that superclass was matched.
    """
    agree = {s: 0 for s in grouping.superclass_names}
    total = {s: 0 for s in grouping.superclass_names}

    frames = sorted({d.frame for d in detections} | {g.frame for g in ground_truth})
    for frame in frames:
        dets = sorted([d for d in detections if d.frame == frame], key=lambda d: -d.score)
        gts = [g for g in ground_truth if g.frame == frame]
        flags, det_to_gt, _ = match_greedy(dets, gts, iou_fn, threshold)
        for i in np.flatnonzero(flags == TP):
            expected = grouping.superclass(gts[det_to_gt[i]].label)
            total[expected] += 1
            if grouping.superclass(dets[i].label) == expected:
                agree[expected] += 1

    result = {s: (agree[s] / total[s] if total[s] else None) for s in total}
    logging.debug('grouping consistency (%s): %s', grouping.name, result)
    return result
