# coding: utf-8
import math
import os

import numpy as np
import pytest
import torch

from bevprompt.geometry import Box2D, CameraCalib, Cuboid3D
from bevprompt.rotations import camera_rotation

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), 'fixtures')


@pytest.fixture(autouse=True)
def _seed_env(monkeypatch):
    monkeypatch.delenv('BEVPROMPT_SEED', raising=False)
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def fixture_path():
    def path(name):
        return os.path.join(FIXTURE_DIR, name)
    return path


def roadside_calib(height=7.0, pitch=math.radians(12.0), width=1536, image_height=864,
                   focal=1400.0):
    R = camera_rotation(pitch)
    center = np.array([0.0, 0.0, height])
    return CameraCalib(focal, focal, width / 2.0, image_height / 2.0, R, -R @ center,
                       width, image_height)


@pytest.fixture
def calib():
    return roadside_calib()


@pytest.fixture
def car():
    return Cuboid3D(30.0, -1.5, 0.75, 1.8, 1.5, 4.5, 0.2, 'car', score=0.9)


@pytest.fixture
def unit_box():
    return Box2D(0.0, 0.0, 10.0, 10.0, label='car')
