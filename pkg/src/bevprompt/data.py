# coding: utf-8
"""
Reading and writing of calibrations, label/detection JSON-lines files and
JSON documents, validated against the schemas shipped in `schemas/`.
"""

import functools
import json
import logging
import os

import jsonschema

from bevprompt.errors import DataException, SchemaException
from bevprompt.geometry import Box2D, CameraCalib, Cuboid3D

SCHEMA_DIR = os.path.join(os.path.dirname(__file__), 'schemas')


@functools.lru_cache(maxsize=None)
def load_schema(name):
    path = os.path.join(SCHEMA_DIR, name + '.json')
    with open(path, 'r') as f:
        return json.load(f)


def validate_json(obj, schema_name, where=None):
    """
    Validate a JSON document.

    Raises:
        SchemaException: the document violates the schema; the message names
            the offending path.
    """
    schema = load_schema(schema_name)
    validator = jsonschema.Draft7Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(obj))
    if error is not None:
        path = '/'.join(str(p) for p in error.absolute_path) or '<root>'
        prefix = '{:s}: '.format(where) if where else ''
        raise SchemaException('{:s}{:s} schema violation at {:s}: {:s}'.format(
            prefix, schema_name, path, error.message))
    return obj


def read_json(path, schema_name=None):
    with open(path, 'r') as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaException('{:s}: invalid JSON ({:s})'.format(path, str(e)))
    if schema_name is not None:
        validate_json(obj, schema_name, where=path)
    return obj


def write_json(path, obj, schema_name=None):
    if schema_name is not None:
        validate_json(obj, schema_name, where=path)
    with open(path, 'w') as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write('\n')


def read_jsonl(path, schema_name=None):
    records = []
    with open(path, 'r') as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            where = '{:s}:{:d}'.format(path, lineno)
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaException('{:s}: invalid JSON ({:s})'.format(where, str(e)))
            if schema_name is not None:
                validate_json(obj, schema_name, where=where)
            records.append(obj)
    logging.debug('read %d records from %s', len(records), path)
    return records


def write_jsonl(path, records, schema_name=None):
    with open(path, 'w') as f:
        for obj in records:
            if schema_name is not None:
                validate_json(obj, schema_name, where=path)
            f.write(json.dumps(obj, sort_keys=True))
            f.write('\n')


def read_cuboids(path):
    return [Cuboid3D.from_dict(r) for r in read_jsonl(path, 'cuboid')]


def write_cuboids(path, cuboids):
    write_jsonl(path, [c.to_dict() for c in cuboids], 'cuboid')


def read_boxes(path):
    return [Box2D.from_dict(r) for r in read_jsonl(path, 'box2d')]


def write_boxes(path, boxes):
    write_jsonl(path, [b.to_dict() for b in boxes], 'box2d')


class CalibrationSet:
    """
    Calibrations by frame. A set built from a single calibration serves
    every frame.
    """

    def __init__(self, default=None, frames=None):
        if default is None and not frames:
            raise DataException('calibration set is empty')
        self.default = default
        self.frames = dict(frames or {})

    def __getitem__(self, frame):
        if frame in self.frames:
            return self.frames[frame]
        if self.default is None:
            raise DataException('no calibration for frame {!r}'.format(frame))
        return self.default

    def __len__(self):
        return len(self.frames) if self.frames else 1

    def to_dict(self):
        if self.default is not None and not self.frames:
            return self.default.to_dict()
        return {'frames': {str(k): v.to_dict() for k, v in sorted(self.frames.items())}}

    @classmethod
    def from_dict(cls, obj):
        if 'frames' in obj:
            return cls(frames={int(k): CameraCalib.from_dict(v) for k, v in obj['frames'].items()})
        return cls(default=CameraCalib.from_dict(obj))


def read_calibs(path):
    return CalibrationSet.from_dict(read_json(path, 'calib_file'))


def write_calibs(path, calibs):
    if isinstance(calibs, CameraCalib):
        calibs = CalibrationSet(default=calibs)
    write_json(path, calibs.to_dict(), 'calib_file')


def group_by_frame(items):
    frames = {}
    for item in items:
        frames.setdefault(item.frame, []).append(item)
    return frames
