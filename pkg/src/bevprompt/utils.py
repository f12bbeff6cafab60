# coding: utf-8

import copy
import hashlib
import json
import logging
import os

import numpy as np
import torch

from bevprompt.errors import ConfigurationException

SEED_ENV = 'BEVPROMPT_SEED'


def check_finite(*tensors):
    """Return False (and log the offending shape) if any tensor holds NaN/Inf."""
    for t in tensors:
        if isinstance(t, torch.Tensor):
            bad = not bool(torch.isfinite(t).all())
        else:
            bad = not bool(np.isfinite(np.asarray(t)).all())
        if bad:
            logging.warning('Found non-finite values: %s', tensor_meta_data(t))
            return False
    return True


def tensor_meta_data(tensor):
    if isinstance(tensor, torch.Tensor):
        dtype = str(tensor.dtype).replace('torch.', '')
        shape = tuple(tensor.shape)
    else:
        tensor = np.asarray(tensor)
        dtype = str(tensor.dtype)
        shape = tensor.shape
    return '{:s}{:s}'.format(dtype, str(shape))


def seed_override(seed):
    """`BEVPROMPT_SEED` wins over any configured seed."""
    env = os.environ.get(SEED_ENV)
    if env is None or env == '':
        return seed
    try:
        return int(env)
    except ValueError:
        raise ConfigurationException(
            '{:s} must be an integer, got {!r}'.format(SEED_ENV, env))


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def path_sha256(path):
    """Hash a file, or every file below a directory in sorted order."""
    if not os.path.isdir(path):
        return file_sha256(path)
    digest = hashlib.sha256()
    for root, dirs, files in os.walk(path):
        dirs.sort()
        for name in sorted(files):
            full = os.path.join(root, name)
            digest.update(os.path.relpath(full, path).encode('utf-8'))
            digest.update(file_sha256(full).encode('ascii'))
    return digest.hexdigest()


class Config:
    """
    Keyword configuration with full defaulting.

    Subclasses list every option with its default in `defaults`. Unknown keys
    are rejected, nested dict defaults are merged key by key.
    """
    defaults = {}

    def __init__(self, **kwargs):
        values = copy.deepcopy(self.defaults)
        for key, value in kwargs.items():
            if key not in values:
                raise ConfigurationException(
                    '{:s}: unknown option {!r}'.format(type(self).__name__, key))
            if isinstance(values[key], dict) and isinstance(value, dict):
                merged = dict(values[key])
                merged.update(value)
                value = merged
            values[key] = value
        self.__dict__['_values'] = values
        self.validate()

    def validate(self):
        pass

    def __getattr__(self, key):
        try:
            return self.__dict__['_values'][key]
        except KeyError:
            raise AttributeError(key)

    def __setattr__(self, key, value):
        raise AttributeError('{:s} is immutable'.format(type(self).__name__))

    def replace(self, **kwargs):
        values = self.to_dict()
        values.update(kwargs)
        return type(self)(**values)

    def to_dict(self):
        return copy.deepcopy(self._values)

    @classmethod
    def from_dict(cls, values):
        if values is None:
            return cls()
        if not isinstance(values, dict):
            raise ConfigurationException(
                '{:s} expects a JSON object'.format(cls.__name__))
        return cls(**values)

    def __eq__(self, other):
        return type(self) is type(other) and self._values == other._values

    def __repr__(self):
        return '{:s}({:s})'.format(type(self).__name__, json.dumps(self._values, sort_keys=True))
