"""Poses, cameras, metric grids, and differentiable map samplers.

Frame conventions used throughout the package:

* World frame: right-handed, ``z`` up (gravity along ``-z``), units metres.
* SE(2) poses act on the world ``xy`` plane; angles are radians, wrapped to
  ``[-pi, pi)``, measured counter-clockwise from ``+x``.
* Camera (optical) frame: ``x`` right, ``y`` down, ``z`` forward along the
  optical axis. Pixel coordinates are ``(u, v)`` = (column, row), with integer
  coordinates at pixel centres; the image spans ``[-0.5, W-0.5) x [-0.5, H-0.5)``.
* Map grids are axis-aligned in their own SE(2) frame: index ``i`` runs along
  local ``+x``, ``j`` along local ``+y``; the grid origin pose places the
  *corner* of cell ``(0, 0)``, whose centre sits at ``((i+0.5)d, (j+0.5)d)``.

Samplers are written against torch so gradients flow to both map features and
query points; all other geometry is plain numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

_TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to ``[-pi, pi)``."""
    return (angle + math.pi) % _TWO_PI - math.pi


def rot2(angle: float) -> np.ndarray:
    """2x2 counter-clockwise rotation matrix."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class PoseSE2:
    """Rigid transform of the plane: ``p -> R(angle) @ p + t``.

    ``compose`` follows function composition: ``a.compose(b)`` applies ``b``
    first, then ``a``. The angle is normalized at construction.
    """

    angle: float
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64).reshape(2)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "angle", float(wrap_angle(float(self.angle))))

    @classmethod
    def identity(cls) -> "PoseSE2":
        return cls(0.0, np.zeros(2))

    @classmethod
    def from_xytheta(cls, x: float, y: float, angle: float) -> "PoseSE2":
        return cls(angle, np.array([x, y], dtype=np.float64))

    def apply(self, points):
        """Transform points of shape ``(..., 2)`` (numpy or torch)."""
        c, s = math.cos(self.angle), math.sin(self.angle)
        tx, ty = float(self.t[0]), float(self.t[1])
        x, y = points[..., 0], points[..., 1]
        xw = c * x - s * y + tx
        yw = s * x + c * y + ty
        if isinstance(points, torch.Tensor):
            return torch.stack([xw, yw], dim=-1)
        return np.stack([xw, yw], axis=-1)

    def compose(self, other: "PoseSE2") -> "PoseSE2":
        return PoseSE2(self.angle + other.angle, self.apply(other.t))

    def inverse(self) -> "PoseSE2":
        c, s = math.cos(self.angle), math.sin(self.angle)
        ti = np.array(
            [-(c * self.t[0] + s * self.t[1]), s * self.t[0] - c * self.t[1]]
        )
        return PoseSE2(-self.angle, ti)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix."""
        m = np.eye(3)
        m[:2, :2] = rot2(self.angle)
        m[:2, 2] = self.t
        return m

    def __repr__(self) -> str:  # keep short: poses appear in logs a lot
        return (
            f"PoseSE2(angle={self.angle:+.6f}, "
            f"t=[{self.t[0]:+.4f}, {self.t[1]:+.4f}])"
        )


def pose_difference(a: PoseSE2, b: PoseSE2) -> tuple[float, float]:
    """Translation (metres) and absolute rotation (radians) between two poses."""
    dt = float(np.linalg.norm(a.t - b.t))
    da = abs(float(wrap_angle(a.angle - b.angle)))
    return dt, da


_ORTHO_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform in 3-D: ``p -> R @ p + t`` (local to world).

    ``gravity_aligned=True`` asserts the world up axis is known in the local
    frame and lands exactly on one signed local axis: yaw-only body poses map
    up to local ``+z``, a level optical-frame camera maps it to ``-y`` (image
    down is world down). Tilted frames fail validation.
    """

    R: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity_aligned: bool = False

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.3e})")
        det = float(np.linalg.det(R))
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det:.12f} != 1")
        if self.gravity_aligned:
            up_local = R[2, :]  # world +z expressed in the local frame
            if np.abs(up_local).max() < 1.0 - _ORTHO_TOL:
                raise ValueError(
                    "gravity_aligned pose must map world up onto a local axis; "
                    f"got R^T e_z = {up_local}"
                )

    @classmethod
    def identity(cls, gravity_aligned: bool = True) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3), gravity_aligned)

    @classmethod
    def from_yaw(cls, angle: float, t=(0.0, 0.0, 0.0)) -> "PoseSE3":
        c, s = math.cos(angle), math.sin(angle)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(R, np.asarray(t, dtype=np.float64), gravity_aligned=True)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.R.T + self.t

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        aligned = self.gravity_aligned and other.gravity_aligned
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t, aligned)

    def inverse(self) -> "PoseSE3":
        return PoseSE3(self.R.T, -self.R.T @ self.t, self.gravity_aligned)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world pose in the optical-frame convention.

    ``pose`` maps optical-frame points to world points. ``size`` is ``(H, W)``
    in pixels. No lens distortion is modelled.
    """

    pose: PoseSE3
    fx: float
    fy: float
    cx: float
    cy: float
    size: tuple[int, int]

    def __post_init__(self):
        h, w = self.size
        if h <= 0 or w <= 0:
            raise ValueError(f"image size must be positive, got {self.size}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (-0.5 <= self.cx <= w - 0.5 and -0.5 <= self.cy <= h - 0.5):
            raise ValueError("principal point outside image bounds")
        object.__setattr__(self, "size", (int(h), int(w)))

    @classmethod
    def level(
        cls,
        position,
        heading: float,
        fx: float,
        fy: float,
        cx: float,
        cy: float,
        size: tuple[int, int],
    ) -> "Camera":
        """Camera at ``position`` looking horizontally along ``heading``.

        The optical axis is level with the ground plane, image down is world
        down, so the pose passes the gravity-alignment check.
        """
        c, s = math.cos(heading), math.sin(heading)
        # columns: optical x (right), y (down), z (forward) as world vectors
        R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
        pose = PoseSE3(R, np.asarray(position, dtype=np.float64), gravity_aligned=True)
        return cls(pose, fx, fy, cx, cy, size)

    @property
    def heading(self) -> float:
        """World heading of the optical axis projected on the ground plane."""
        fwd = self.R_world_forward
        return math.atan2(fwd[1], fwd[0])

    @property
    def R_world_forward(self) -> np.ndarray:
        return self.pose.R[:, 2]

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Project world points ``(..., 3)`` to pixels.

        Returns ``(pixels, depth)`` with ``pixels`` of shape ``(..., 2)`` and
        ``depth`` the optical-axis coordinate. Points at or behind the camera
        plane (``depth <= 0``) get NaN pixels as a behind-camera marker.
        """
        pts = np.asarray(points, dtype=np.float64)
        local = (pts - self.pose.t) @ self.pose.R
        depth = local[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * local[..., 0] / depth + self.cx
            v = self.fy * local[..., 1] / depth + self.cy
        pixels = np.stack([u, v], axis=-1)
        pixels[depth <= 0] = np.nan
        return pixels, depth

    def in_bounds(self, pixels: np.ndarray) -> np.ndarray:
        """True where a pixel lies inside the image rectangle."""
        h, w = self.size
        u, v = pixels[..., 0], pixels[..., 1]
        with np.errstate(invalid="ignore"):
            return (u >= -0.5) & (u < w - 0.5) & (v >= -0.5) & (v < h - 0.5)

    def pixel_rays(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-frame ray directions through pixels ``(..., 2)``."""
        u, v = pixels[..., 0], pixels[..., 1]
        d = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)],
            axis=-1,
        )
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.pose.R.T

    def pixel_grid(self) -> np.ndarray:
        """All pixel centres as an ``(H, W, 2)`` array of ``(u, v)``."""
        h, w = self.size
        v, u = np.mgrid[0:h, 0:w].astype(np.float64)
        return np.stack([u, v], axis=-1)


@dataclass(frozen=True, eq=False)
class MapGrid:
    """Axis-aligned metric grid: ``shape=(I, J)`` cells of ``cell_size`` metres.

    ``origin`` is the world SE(2) pose of the corner of cell ``(0, 0)``. Cell
    ``(i, j)`` covers ``[i*d, (i+1)*d) x [j*d, (j+1)*d)`` in the grid frame.
    """

    origin: PoseSE2
    cell_size: float
    shape: tuple[int, int]

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        i, j = self.shape
        if i <= 0 or j <= 0:
            raise ValueError(f"grid shape must be positive, got {self.shape}")
        object.__setattr__(self, "shape", (int(i), int(j)))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def num_cells(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        """Grid side lengths in metres, ``(I*d, J*d)``."""
        return self.shape[0] * self.cell_size, self.shape[1] * self.cell_size

    def cell_center(self, i, j) -> np.ndarray:
        """World coordinates of cell centres; ``i``/``j`` scalar or arrays."""
        i = np.asarray(i, dtype=np.float64)
        j = np.asarray(j, dtype=np.float64)
        local = np.stack(
            [(i + 0.5) * self.cell_size, (j + 0.5) * self.cell_size], axis=-1
        )
        return self.origin.apply(local)

    def cell_centers(self) -> np.ndarray:
        """All cell centres, shape ``(I*J, 2)``, row-major (i-major) order."""
        ii, jj = np.mgrid[0 : self.shape[0], 0 : self.shape[1]]
        return self.cell_center(ii, jj).reshape(-1, 2)

    def world_to_grid(self, points):
        """Continuous centre-based grid coords for ``(..., 2)`` world points.

        Returns ``(u, v)`` where ``u = i`` exactly at the centre of cell
        ``(i, j)``. Works on numpy arrays and torch tensors (differentiable).
        """
        inv = self.origin.inverse()
        local = inv.apply(points)
        u = local[..., 0] / self.cell_size - 0.5
        v = local[..., 1] / self.cell_size - 0.5
        return u, v

    def world_to_cell(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Integer cell indices containing the given world points."""
        local = self.origin.inverse().apply(np.asarray(points, dtype=np.float64))
        i = np.floor(local[..., 0] / self.cell_size).astype(np.int64)
        j = np.floor(local[..., 1] / self.cell_size).astype(np.int64)
        return i, j

    def contains_cell(self, i, j):
        return (i >= 0) & (i < self.shape[0]) & (j >= 0) & (j < self.shape[1])


class NeuralMap:
    """Feature map on a :class:`MapGrid`: ``features (I, J, F)`` + validity.

    Invalid cells always hold zero features; the constructor enforces this by
    masking, which keeps autograd graphs intact.
    """

    def __init__(self, grid: MapGrid, features: torch.Tensor, valid: torch.Tensor):
        i, j = grid.shape
        if features.ndim != 3 or features.shape[0] != i or features.shape[1] != j:
            raise ValueError(
                f"features shape {tuple(features.shape)} does not match grid {grid.shape}"
            )
        if tuple(valid.shape) != (i, j):
            raise ValueError(
                f"valid mask shape {tuple(valid.shape)} does not match grid {grid.shape}"
            )
        valid = valid.to(torch.bool)
        self.grid = grid
        self.valid = valid
        self.features = features * valid.unsqueeze(-1).to(features.dtype)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[2])

    def detach(self) -> "NeuralMap":
        return NeuralMap(self.grid, self.features.detach(), self.valid)


def _gather_2d(values: torch.Tensor, a_idx: torch.Tensor, b_idx: torch.Tensor):
    """values: (A, B, C); a_idx/b_idx: integer tensors (...,) -> (..., C)."""
    flat = values.reshape(-1, values.shape[-1])
    lin = a_idx * values.shape[1] + b_idx
    return flat[lin.reshape(-1)].reshape(*lin.shape, values.shape[-1])


def grid_sample_2d(values: torch.Tensor, a: torch.Tensor, b: torch.Tensor):
    """Bilinear sample of ``values (A, B, C)`` at fractional indices ``(a, b)``.

    Coordinates clamp to the array border (out-of-range queries return the
    edge value). Differentiable in both ``values`` and the coordinates.
    """
    na, nb = values.shape[0], values.shape[1]
    a = a.clamp(0.0, float(na - 1))
    b = b.clamp(0.0, float(nb - 1))
    a0 = a.floor().clamp(0, max(na - 2, 0)).long()
    b0 = b.floor().clamp(0, max(nb - 2, 0)).long()
    a1 = (a0 + 1).clamp(0, na - 1)
    b1 = (b0 + 1).clamp(0, nb - 1)
    fa = (a - a0.to(a.dtype)).unsqueeze(-1)
    fb = (b - b0.to(b.dtype)).unsqueeze(-1)
    v00 = _gather_2d(values, a0, b0)
    v01 = _gather_2d(values, a0, b1)
    v10 = _gather_2d(values, a1, b0)
    v11 = _gather_2d(values, a1, b1)
    return (
        v00 * (1 - fa) * (1 - fb)
        + v01 * (1 - fa) * fb
        + v10 * fa * (1 - fb)
        + v11 * fa * fb
    )


def sample_bilinear(nmap: NeuralMap, points: torch.Tensor) -> torch.Tensor:
    """Bilinearly interpolate map features at world points ``(..., 2)``.

    Outside the grid, coordinates clamp to the border cell centres, so the
    sample takes the boundary value. Invalid cells contribute zeros.
    """
    u, v = nmap.grid.world_to_grid(points)
    return grid_sample_2d(nmap.features, u, v)


def log_depth_coord(depths: torch.Tensor, plane_depths: np.ndarray) -> torch.Tensor:
    """Fractional plane index for metric depths on a log-spaced depth ladder."""
    d0 = float(plane_depths[0])
    if len(plane_depths) == 1:
        return torch.zeros_like(depths)
    ratio = float(plane_depths[1] / plane_depths[0])
    return torch.log(depths.clamp_min(1e-9) / d0) / math.log(ratio)


def sample_trilinear(volume, pixels: torch.Tensor, depths: torch.Tensor):
    """Interpolate a depth-score volume at input-image pixels and depths.

    ``volume`` needs attributes ``logits (H', W', P)`` (torch), ``plane_depths
    (P,)`` (log-spaced, metres) and ``stride`` (input pixels per logit pixel).
    Bilinear across the image, linear across the log-depth axis; coordinates
    clamp to the volume border.
    """
    stride = float(volume.stride)
    u = (pixels[..., 0] + 0.5) / stride - 0.5
    v = (pixels[..., 1] + 0.5) / stride - 0.5
    planes = grid_sample_2d(volume.logits, v, u)  # (..., P)
    p = volume.logits.shape[-1]
    w = log_depth_coord(depths, volume.plane_depths).clamp(0.0, float(p - 1))
    w0 = w.floor().clamp(0, max(p - 2, 0)).long()
    fw = (w - w0.to(w.dtype)).unsqueeze(-1)
    lo = torch.gather(planes, -1, w0.unsqueeze(-1))
    hi = torch.gather(planes, -1, (w0 + 1).clamp(max=p - 1).unsqueeze(-1))
    return (lo * (1 - fw) + hi * fw).squeeze(-1)


def warp_points(pose: PoseSE2, points):
    """Apply an SE(2) pose to ``(..., 2)`` points (numpy or torch)."""
    return pose.apply(points)


def grids_equal(a: MapGrid, b: MapGrid, tol: float = 1e-9) -> bool:
    """True when two grids describe the same cells (within tol)."""
    return (
        a.shape == b.shape
        and abs(a.cell_size - b.cell_size) <= tol
        and abs(wrap_angle(a.origin.angle - b.origin.angle)) <= tol
        and float(np.abs(a.origin.t - b.origin.t).max()) <= tol
    )


def frustum_polygon(camera: Camera, max_depth: float) -> np.ndarray:
    """Ground-plane triangle (3, 2) covered by the camera out to ``max_depth``."""
    h, w = camera.size
    half = (w - 0.5 - camera.cx) / camera.fx
    half2 = (camera.cx + 0.5) / camera.fx
    heading = camera.heading
    origin = camera.pose.t[:2]
    left = heading + math.atan(half2)
    right = heading - math.atan(half)
    pts = [
        origin,
        origin + max_depth * np.array([math.cos(left), math.sin(left)]),
        origin + max_depth * np.array([math.cos(right), math.sin(right)]),
    ]
    return np.stack(pts)
