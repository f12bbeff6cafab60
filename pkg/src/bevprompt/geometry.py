# coding: utf-8
"""
Camera model, cuboids, projection and IoU.

Conventions: world frame is z-up with the ground plane at z = 0; yaw is
measured counterclockwise from +x on the BEV plane and kept in (-pi, pi].
Cuboid width `w` is lateral, height `h` vertical and length `l` along the
heading. The camera frame is x right, y down, z along the optical axis.
"""

import numpy as np

from bevprompt.errors import (BehindCameraException, DataException,
                              OffImageException)
from bevprompt.rotations import normalize_angle, pitch_roll_noise, rotation_z

MIN_DEPTH = 1e-6
MIN_AREA = 1e-12


class Cuboid3D:
    """
    Oriented 3D box of one object.

    Args:
        x, y, z (float): center in the world frame (m).
        w, h, l (float): width, height, length (m), all positive.
        yaw (float): heading on the BEV plane (rad).
        label (str): fine class name.
        score (float): confidence in [0, 1].
        frame (int): frame the object belongs to.
        occlusion, truncation (float): optional tags in [0, 1].
    """

    def __init__(self, x, y, z, w, h, l, yaw, label, score=1.0, frame=0,
                 occlusion=None, truncation=None):
        if not (w > 0 and h > 0 and l > 0):
            raise DataException(
                'cuboid sizes must be positive, got w={!r} h={!r} l={!r}'.format(w, h, l))
        self.x, self.y, self.z = float(x), float(y), float(z)
        self.w, self.h, self.l = float(w), float(h), float(l)
        self.yaw = normalize_angle(yaw)
        self.label = label
        self.score = float(score)
        self.frame = int(frame)
        self.occlusion = None if occlusion is None else float(occlusion)
        self.truncation = None if truncation is None else float(truncation)

    @property
    def center(self):
        return np.array([self.x, self.y, self.z])

    def replace(self, **kwargs):
        values = self.to_dict()
        values.update(kwargs)
        return Cuboid3D.from_dict(values)

    def to_dict(self):
        d = {'frame': self.frame, 'x': self.x, 'y': self.y, 'z': self.z,
             'w': self.w, 'h': self.h, 'l': self.l, 'yaw': self.yaw,
             'label': self.label, 'score': self.score}
        if self.occlusion is not None:
            d['occlusion'] = self.occlusion
        if self.truncation is not None:
            d['truncation'] = self.truncation
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d['x'], d['y'], d['z'], d['w'], d['h'], d['l'], d['yaw'],
                   d['label'], score=d.get('score', 1.0), frame=d.get('frame', 0),
                   occlusion=d.get('occlusion'), truncation=d.get('truncation'))

    def __repr__(self):
        return ('Cuboid3D(frame={:d}, label={!r}, xyz=({:.3f}, {:.3f}, {:.3f}), '
                'whl=({:.3f}, {:.3f}, {:.3f}), yaw={:.4f}, score={:.3f})').format(
            self.frame, self.label, self.x, self.y, self.z, self.w, self.h,
            self.l, self.yaw, self.score)


class Box2D:
    """Axis-aligned image box in corner form (pixels)."""

    def __init__(self, x_min, y_min, x_max, y_max, label=None, score=1.0, frame=0):
        if not (x_min < x_max and y_min < y_max):
            raise DataException('degenerate box ({!r}, {!r}, {!r}, {!r})'.format(
                x_min, y_min, x_max, y_max))
        self.x_min, self.y_min = float(x_min), float(y_min)
        self.x_max, self.y_max = float(x_max), float(y_max)
        self.label = label
        self.score = float(score)
        self.frame = int(frame)

    @classmethod
    def from_xywh(cls, x, y, width, height, label=None, score=1.0, frame=0):
        """Build from the {x, y, width, height} form, (x, y) the top-left corner."""
        return cls(x, y, x + width, y + height, label=label, score=score, frame=frame)

    def to_xywh(self):
        return self.x_min, self.y_min, self.width, self.height

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return 0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max)

    def corners(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])

    def is_inside(self, image_width, image_height):
        return (self.x_min >= 0 and self.y_min >= 0
                and self.x_max <= image_width and self.y_max <= image_height)

    def replace(self, **kwargs):
        values = self.to_dict()
        values.update(kwargs)
        return Box2D.from_dict(values)

    def to_dict(self):
        return {'frame': self.frame, 'x_min': self.x_min, 'y_min': self.y_min,
                'x_max': self.x_max, 'y_max': self.y_max, 'label': self.label,
                'score': self.score}

    @classmethod
    def from_dict(cls, d):
        return cls(d['x_min'], d['y_min'], d['x_max'], d['y_max'],
                   label=d.get('label'), score=d.get('score', 1.0),
                   frame=d.get('frame', 0))

    def __repr__(self):
        return 'Box2D(frame={:d}, label={!r}, [{:.2f}, {:.2f}, {:.2f}, {:.2f}], score={:.3f})'.format(
            self.frame, self.label, self.x_min, self.y_min, self.x_max, self.y_max, self.score)


class RotatedBoxBEV:
    """Footprint rectangle on the BEV plane; `l` runs along `yaw`."""

    def __init__(self, cx, cy, w, l, yaw):
        if not (w > 0 and l > 0):
            raise DataException('BEV box sizes must be positive, got w={!r} l={!r}'.format(w, l))
        self.cx, self.cy = float(cx), float(cy)
        self.w, self.l = float(w), float(l)
        self.yaw = float(yaw)

    @property
    def area(self):
        return self.w * self.l

    def key(self):
        return self.cx, self.cy, self.w, self.l, self.yaw

    def corners(self):
        """Four corners, counterclockwise, starting at (+l/2, +w/2)."""
        local = np.array([[0.5 * self.l, 0.5 * self.w],
                          [-0.5 * self.l, 0.5 * self.w],
                          [-0.5 * self.l, -0.5 * self.w],
                          [0.5 * self.l, -0.5 * self.w]])
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])


class CameraCalib:
    """
    Pinhole camera.

    Args:
        fx, fy, cx, cy (float): intrinsics in pixels.
        rotation (array): 3x3 world-to-camera rotation.
        translation (array): world-to-camera translation (m).
        image_width, image_height (int): image size in pixels.
    """

    def __init__(self, fx, fy, cx, cy, rotation, translation, image_width, image_height):
        self.fx, self.fy, self.cx, self.cy = float(fx), float(fy), float(cx), float(cy)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)
        self.image_width = int(image_width)
        self.image_height = int(image_height)
        self._validate()

    def _validate(self):
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DataException('calibration rotation is not a proper rotation matrix')
        if not (self.fx > 0 and self.fy > 0):
            raise DataException('focal lengths must be positive')
        if not (0 < self.cx < self.image_width and 0 < self.cy < self.image_height):
            raise DataException('principal point ({:.1f}, {:.1f}) outside the {:d}x{:d} image'.format(
                self.cx, self.cy, self.image_width, self.image_height))

    @property
    def camera_center(self):
        return -self.rotation.T @ self.translation

    def to_camera(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_dict(self):
        return {'fx': self.fx, 'fy': self.fy, 'cx': self.cx, 'cy': self.cy,
                'rotation': self.rotation.reshape(-1).tolist(),
                'translation': self.translation.tolist(),
                'image_width': self.image_width, 'image_height': self.image_height}

    @classmethod
    def from_dict(cls, d):
        return cls(d['fx'], d['fy'], d['cx'], d['cy'], d['rotation'], d['translation'],
                   d['image_width'], d['image_height'])

    def replace(self, **kwargs):
        values = self.to_dict()
        values.update(kwargs)
        return CameraCalib.from_dict(values)

    def __eq__(self, other):
        return isinstance(other, CameraCalib) and self.to_dict() == other.to_dict()


def cuboid_corners(c):
    """
    Eight world-frame corners of a cuboid, shape (8, 3).

    Bottom face first, counterclockwise seen from above starting at
    (+l/2, +w/2), then the top face in the same order.
    """
    lx, wy, hz = 0.5 * c.l, 0.5 * c.w, 0.5 * c.h
    local = np.array([[lx, wy, -hz], [-lx, wy, -hz], [-lx, -wy, -hz], [lx, -wy, -hz],
                      [lx, wy, hz], [-lx, wy, hz], [-lx, -wy, hz], [lx, -wy, hz]])
    return local @ rotation_z(c.yaw).T + c.center


def cuboid_to_bev(c):
    return RotatedBoxBEV(c.x, c.y, c.w, c.l, c.yaw)


def box_from_center(cx, cy, width, height, label=None, score=1.0, frame=0):
    """Box2D from the center/size form."""
    return Box2D(cx - 0.5 * width, cy - 0.5 * height, cx + 0.5 * width, cy + 0.5 * height,
                 label=label, score=score, frame=frame)


def project_point(calib, p):
    """
    Project a world point.

    Returns:
        tuple: (np.array([u, v]) pixel, camera-frame depth).
    """
    pc = calib.to_camera(p)
    if pc[2] <= MIN_DEPTH:
        raise BehindCameraException('point at depth {:.3e} is behind the camera'.format(pc[2]))
    u = calib.fx * pc[0] / pc[2] + calib.cx
    v = calib.fy * pc[1] / pc[2] + calib.cy
    return np.array([u, v]), float(pc[2])


def back_project(calib, pixel, depth):
    """World point seen at `pixel` with camera-frame depth `depth`."""
    ray = np.array([(pixel[0] - calib.cx) / calib.fx,
                    (pixel[1] - calib.cy) / calib.fy,
                    1.0])
    return calib.rotation.T @ (ray * depth - calib.translation)


def camera_depth(calib, p):
    return float(calib.to_camera(p)[2])


def project_cuboid(calib, c, clip=True):
    """
    Axis-aligned hull of the projected cuboid corners in front of the camera.

    Corners behind the camera are dropped. Label and score are copied from
    the cuboid.

    Raises:
        BehindCameraException: all corners are behind the camera.
        OffImageException: the clipped box is empty.
    """
    pc = calib.to_camera(cuboid_corners(c))
    visible = pc[:, 2] > MIN_DEPTH
    if not visible.any():
        raise BehindCameraException('cuboid {!r} is behind the camera'.format(c))
    pc = pc[visible]
    u = calib.fx * pc[:, 0] / pc[:, 2] + calib.cx
    v = calib.fy * pc[:, 1] / pc[:, 2] + calib.cy
    x_min, x_max, y_min, y_max = u.min(), u.max(), v.min(), v.max()
    if clip:
        x_min, x_max = max(x_min, 0.0), min(x_max, float(calib.image_width))
        y_min, y_max = max(y_min, 0.0), min(y_max, float(calib.image_height))
    if not (x_min < x_max and y_min < y_max):
        raise OffImageException('cuboid {!r} projects outside the image'.format(c))
    return Box2D(x_min, y_min, x_max, y_max, label=c.label, score=c.score, frame=c.frame)


def iou_aabb(a, b):
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def polygon_area(points):
    """Shoelace formula, counterclockwise polygons give positive area."""
    if points is None or len(points) < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def polygon_clip(subject, clip):
    """
    Sutherland-Hodgman clipping of `subject` by the convex polygon `clip`.

    Both polygons are (n, 2) arrays in counterclockwise order. Returns the
    intersection polygon or None when it is empty.
    """
    output = [p for p in subject]
    n = len(clip)
    for i in range(n):
        a, b = clip[i - 1], clip[i]
        edge = b - a
        inputs, output = output, []
        if not inputs:
            return None
        s = inputs[-1]
        s_side = edge[0] * (s[1] - a[1]) - edge[1] * (s[0] - a[0])
        for e in inputs:
            e_side = edge[0] * (e[1] - a[1]) - edge[1] * (e[0] - a[0])
            if e_side >= 0:
                if s_side < 0:
                    output.append(s + (e - s) * (s_side / (s_side - e_side)))
                output.append(e)
            elif s_side >= 0:
                output.append(s + (e - s) * (s_side / (s_side - e_side)))
            s, s_side = e, e_side
    if len(output) < 3:
        return None
    return np.array(output)


def iou_rotated(a, b):
    """IoU of two BEV rectangles; symmetric in its arguments bit for bit."""
    if b.key() < a.key():
        a, b = b, a
    inter = polygon_area(polygon_clip(a.corners(), b.corners()))
    if inter < MIN_AREA:
        return 0.0
    iou = inter / (a.area + b.area - inter)
    return min(max(iou, 0.0), 1.0)


def perturb_calib(calib, pitch_noise, roll_noise, seed):
    """
    Rotate the camera about its own center by small pitch/roll noise drawn
    uniformly in +-magnitude. Intrinsics are unchanged.
    """
    if pitch_noise < 0 or roll_noise < 0:
        raise DataException('noise magnitudes must be non-negative')
    if pitch_noise == 0 and roll_noise == 0:
        return calib.replace()
    rng = np.random.RandomState(seed)
    noise, _, _ = pitch_roll_noise(pitch_noise, roll_noise, rng.uniform(size=2))
    return calib.replace(rotation=(noise @ calib.rotation).reshape(-1).tolist(),
                         translation=(noise @ calib.translation).tolist())
