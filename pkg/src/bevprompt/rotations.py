# coding: utf-8

import numpy as np
import quaternion

# world axes (x forward along the road, y left, z up) expressed in the
# camera frame (x right, y down, z along the optical axis)
WORLD_TO_CAMERA_BASE = np.array([[0., -1., 0.],
                                 [0., 0., -1.],
                                 [1., 0., 0.]])


def normalize_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]."""
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    # angles already in range pass through untouched
    wrapped = np.where((theta > -np.pi) & (theta <= np.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def angle_diff(a, b):
    return normalize_angle(np.asarray(a) - np.asarray(b))


def rotation_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.],
                     [s, c, 0.],
                     [0., 0., 1.]])


def axis_rotation(axis, angle):
    """Rotation matrix for `angle` radians about a unit `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    q = quaternion.from_rotation_vector(axis / np.linalg.norm(axis) * angle)
    return quaternion.as_rotation_matrix(q)


def camera_rotation(pitch, heading=0.0, roll=0.0):
    """
    World-to-camera rotation of a camera looking along world `heading`,
    tilted down by `pitch` and rolled by `roll` about its optical axis.
    """
    tilt = axis_rotation([1., 0., 0.], pitch)
    spin = axis_rotation([0., 0., 1.], roll)
    return spin @ tilt @ WORLD_TO_CAMERA_BASE @ rotation_z(-heading)


def pitch_roll_noise(pitch_noise, roll_noise, randnums=None):
    """
    Small camera-frame rotation, pitch about the camera x axis and roll about
    the optical axis, each drawn uniformly in +-magnitude.

    randnums: 2 random numbers in [0, 1]. If `None`, they are drawn from numpy's
    global state.
    """
    if randnums is None:
        randnums = np.random.uniform(size=(2,))
    u_pitch, u_roll = randnums
    pitch = (2.0 * u_pitch - 1.0) * pitch_noise
    roll = (2.0 * u_roll - 1.0) * roll_noise

    q = (quaternion.from_rotation_vector([0., 0., roll])
         * quaternion.from_rotation_vector([pitch, 0., 0.]))
    return quaternion.as_rotation_matrix(q), pitch, roll


def rand_rotation_matrix(rng):
    """Uniformly distributed rotation from a normalised Gaussian quaternion."""
    comps = rng.normal(size=4)
    q = quaternion.from_float_array(comps / np.linalg.norm(comps))
    return quaternion.as_rotation_matrix(q)

