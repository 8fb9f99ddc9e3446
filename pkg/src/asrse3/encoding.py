"""Image encodings of partially chosen actions.

``f2`` crops the heightmap around the chosen cell, ``f3`` additionally
rotates the crop into the gripper frame, ``f4``/``f5`` voxelize the crop
region in the frame of the partial pose and return three orthographic
projections.  Heightmaps are indexed ``scene[x, y]``.

Rotation convention: the encodings sample the scene at ``R(theta) @ p`` for
each output offset ``p``, i.e. the scene content is rotated by ``-theta`` so
the candidate gripper axis always lies along the crop's first axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QUARTER_TURN = np.pi / 2


@dataclass(frozen=True)
class CropSpec:
    m: int = 5
    projection_mode: str = "single"

    def __post_init__(self):
        if self.m < 1 or self.m % 2 == 0:
            raise ValueError(f"crop side must be odd and positive, got {self.m}")
        if self.projection_mode not in ("single", "triple"):
            raise ValueError(f"unknown projection mode {self.projection_mode!r}")

    def check_grid(self, grid_w: int, grid_h: int):
        if self.m > min(grid_w, grid_h):
            raise ValueError(f"crop side {self.m} exceeds grid {grid_w}x{grid_h}")


def _offsets(m: int) -> np.ndarray:
    r = m // 2
    return np.arange(-r, r + 1)


def _rotation_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    # snap exact quarter turns so nearest-neighbour sampling is exact
    c, s = np.round(c, 12), np.round(s, 12)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rotation_y(phi: float) -> np.ndarray:
    c, s = np.round(np.cos(phi), 12), np.round(np.sin(phi), 12)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rotation_x(psi: float) -> np.ndarray:
    c, s = np.round(np.cos(psi), 12), np.round(np.sin(psi), 12)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _sample(scene: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    w, h = scene.shape
    xs, ys = np.broadcast_arrays(xs, ys)
    inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out = np.zeros(xs.shape, dtype=scene.dtype)
    out[inside] = scene[xs[inside], ys[inside]]
    return out


def f2(scene: np.ndarray, a_xy: tuple[int, int], m: int = 5) -> np.ndarray:
    """``m x m`` crop centred on ``a_xy``; cells outside the grid read as 0."""
    x, y = a_xy
    w, h = scene.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ValueError(f"crop centre {a_xy} outside {w}x{h} grid")
    off = _offsets(m)
    return _sample(scene, x + off[:, None], y + off[None, :])


def rotate(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate a square image by ``-theta`` about its centre (nearest neighbour)."""
    m = img.shape[0]
    off = _offsets(m)
    px, py = np.meshgrid(off, off, indexing="ij")
    c, s = np.round(np.cos(theta), 12), np.round(np.sin(theta), 12)
    sx = np.rint(c * px - s * py).astype(int) + m // 2
    sy = np.rint(s * px + c * py).astype(int) + m // 2
    return _sample(img, sx, sy)


def f3(scene: np.ndarray, a_xy: tuple[int, int], a_theta: float, m: int = 5) -> np.ndarray:
    """:func:`f2` followed by a rotation into the gripper frame."""
    return rotate(f2(scene, a_xy, m), a_theta)


def voxelize(
    scene: np.ndarray,
    a_xy: tuple[int, int],
    a_theta: float,
    a_z: int,
    m: int = 5,
    a_phi: float = 0.0,
    a_psi: float = 0.0,
) -> np.ndarray:
    """Binary ``m x m x m`` occupancy around a partial pose.

    Local voxel ``(i, j, k)`` sits at offset ``(i, j, k) - m//2`` from the pose
    ``(x, y, a_z)``; columns below the heightmap surface count as occupied.
    Tilts are applied as ZYX Euler rotations and resampled to the nearest voxel.
    """
    off = _offsets(m)
    pi, pj, pk = np.meshgrid(off, off, off, indexing="ij")
    local = np.stack([pi, pj, pk]).reshape(3, -1).astype(float)
    rot = _rotation_z(a_theta) @ _rotation_y(a_phi) @ _rotation_x(a_psi)
    world = rot @ local
    wx = np.rint(world[0]).astype(int) + a_xy[0]
    wy = np.rint(world[1]).astype(int) + a_xy[1]
    wz = np.rint(world[2]).astype(int) + a_z
    column = _sample(scene, wx, wy)
    occ = (wz >= 0) & (wz < column)
    return occ.reshape(m, m, m).astype(np.int64)


def project(occupancy: np.ndarray) -> np.ndarray:
    """Sums along the local z, y and x axes, stacked as ``3 x m x m``."""
    return np.stack([occupancy.sum(axis=2), occupancy.sum(axis=1), occupancy.sum(axis=0)])


def f4(scene: np.ndarray, a_xy: tuple[int, int], a_theta: float, a_z: int, m: int = 5) -> np.ndarray:
    return project(voxelize(scene, a_xy, a_theta, a_z, m))


def f5(scene: np.ndarray, a_xy: tuple[int, int], a_theta: float, a_z: int, a_phi: float, m: int = 5) -> np.ndarray:
    return project(voxelize(scene, a_xy, a_theta, a_z, m, a_phi=a_phi))


def in_hand_image(
    prev_scene: np.ndarray | None,
    pick_pose: tuple[tuple[int, int], float, int] | None,
    m: int = 5,
    triple: bool = False,
) -> np.ndarray:
    """In-hand map after an action.

    ``pick_pose`` is ``((x, y), theta, z)`` of the pick that just happened, or
    ``None`` after a place, in which case the image is all zero.  ``triple``
    selects the 3-projection form used when height is part of the action.
    """
    shape = (3, m, m) if triple else (m, m)
    if pick_pose is None or prev_scene is None:
        return np.zeros(shape, dtype=np.int64)
    xy, theta, z = pick_pose
    if triple:
        return f4(prev_scene, xy, theta, z, m)
    return f3(prev_scene, xy, theta, m)
