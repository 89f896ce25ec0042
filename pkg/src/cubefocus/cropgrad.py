"""Differentiable extraction of 3-D video cubes.

Three routes out of a video volume:

* ``crop_cube_pixelgrad`` samples the cube by trilinear interpolation and
  backpropagates the loss to the cube center through the sampling weights.
* ``crop_enlarged_cube`` crops a lattice-aligned cube enlarged by the local
  encoder's cumulative stride; deliberately not differentiable.
* ``feature_center_interp`` re-samples the enlarged cube's feature map at
  fixed per-cell offsets shifted by ``center - stop_gradient(center)``, so
  the forward pass ignores the center value while the backward pass feeds
  the center a gradient taken from the deep features.

Coordinates follow array order: (x, y, z) indexes axes (0, 1, 2) of an
(X, Y, Z, C) volume, with z the temporal axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffengine import Array, Node, constant, parameter, stop_gradient


@dataclass(frozen=True)
class CubeSize:
    """Cube extents in pixels (h, w) and frames (t)."""

    h: int
    w: int
    t: int

    def __post_init__(self):
        if min(self.h, self.w, self.t) < 1:
            raise ValueError(f"cube size must be positive, got {self}")

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.h, self.w, self.t)


@dataclass(frozen=True)
class CubeSpec:
    """A cube's continuous center coordinates plus its fixed size."""

    center: tuple[float, float, float]
    size: CubeSize

    def validate_for(self, video_shape: tuple[int, ...]) -> None:
        """Reject cubes that are not fully inside the video."""
        for axis, (c, ext, sz) in enumerate(zip(self.center, video_shape, self.size.as_tuple())):
            if sz > ext:
                raise ValueError(f"cube size {sz} exceeds video extent {ext} on axis {axis}")
            lo, hi = sz / 2.0, ext - sz / 2.0
            if not lo <= c <= hi:
                raise ValueError(
                    f"cube center {c} outside valid range [{lo}, {hi}] on axis {axis}"
                )


def center_bounds(video_shape: tuple[int, ...], size: CubeSize) -> tuple[Array, Array]:
    """Per-axis (low, high) valid center range for cubes of ``size``."""
    ext = np.asarray(video_shape[:3], dtype=np.float64)
    half = np.asarray(size.as_tuple(), dtype=np.float64) / 2.0
    return half, ext - half


def cube_offsets(size: CubeSize) -> tuple[Array, Array, Array]:
    """Per-axis sampling offsets relative to the cube center.

    Index i of an axis of extent n samples at center + i - n/2, so a cube
    occupies [center - n/2, center + n/2) and stays inside the volume for
    every center in the valid range.
    """
    return tuple(np.arange(n, dtype=np.float64) - n / 2.0 for n in size.as_tuple())


# ------------------------------------------------------------ interpolation


def _axis_terms(coords: Array, extent: int):
    """Decompose clamped 1-D sample coordinates into corner terms.

    Returns a list of (indices, weights, dweights) triples; dweights is the
    derivative of the weight w.r.t. the unclamped coordinate (zero where
    clamping is active).
    """
    c = np.clip(coords, 0.0, extent - 1.0)
    live = ((coords > 0.0) & (coords < extent - 1.0)).astype(np.float64)
    if extent == 1:
        zeros = np.zeros_like(c)
        return [(np.zeros(len(c), dtype=np.intp), np.ones_like(c), zeros)]
    i0 = np.minimum(np.floor(c), extent - 2).astype(np.intp)
    f = c - i0
    return [(i0, 1.0 - f, -live), (i0 + 1, f, live)]


def sample_grid(volume: Node, shift: Node, offsets: tuple[Array, Array, Array]) -> Node:
    """Trilinear sampling of a separable coordinate grid, shifted as a whole.

    Sample coordinates on axis a are shift[a] + offsets[a]; the output has
    shape (len(ox), len(oy), len(oz), C). Each sampled value is the convex
    combination of its eight lattice neighbors. Gradients flow both into
    ``volume`` (scattered interpolation weights) and into ``shift`` (the
    summed coordinate sensitivity of every output voxel, which equals the
    sensitivity to moving the whole grid).
    """
    vol = volume.value
    if vol.ndim != 4:
        raise ValueError(f"sample_grid expects a 4-D volume, got shape {volume.shape}")
    if shift.value.shape != (3,):
        raise ValueError(f"sample_grid expects a 3-vector shift, got shape {shift.shape}")

    axes = [
        _axis_terms(shift.value[a] + offsets[a], vol.shape[a]) for a in range(3)
    ]
    shape_out = tuple(len(offsets[a]) for a in range(3))

    def corner(ix, iy, iz):
        return vol[np.ix_(ix, iy, iz)]

    out = np.zeros(shape_out + (vol.shape[3],))
    for ix, wx, _ in axes[0]:
        for iy, wy, _ in axes[1]:
            for iz, wz, _ in axes[2]:
                w = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                out += corner(ix, iy, iz) * w[..., None]

    def vjp_volume(g):
        gv = np.zeros(vol.shape)
        for ix, wx, _ in axes[0]:
            for iy, wy, _ in axes[1]:
                for iz, wz, _ in axes[2]:
                    w = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
                    np.add.at(
                        gv,
                        (
                            np.broadcast_to(ix[:, None, None], shape_out),
                            np.broadcast_to(iy[None, :, None], shape_out),
                            np.broadcast_to(iz[None, None, :], shape_out),
                        ),
                        g * w[..., None],
                    )
        return gv

    def vjp_shift(g):
        gs = np.zeros(3)
        for axis in range(3):
            acc = 0.0
            for i, (ix, wx, dx) in enumerate(axes[0]):
                for j, (iy, wy, dy) in enumerate(axes[1]):
                    for k, (iz, wz, dz) in enumerate(axes[2]):
                        fx = dx if axis == 0 else wx
                        fy = dy if axis == 1 else wy
                        fz = dz if axis == 2 else wz
                        w = fx[:, None, None] * fy[None, :, None] * fz[None, None, :]
                        acc += np.sum(corner(ix, iy, iz) * w[..., None] * g)
            gs[axis] = acc
        return gs

    return Node(out, ((volume, vjp_volume), (shift, vjp_shift)))


def trilinear_sample(video: Array, coords: tuple[float, float, float]) -> Array:
    """Value of a video at one continuous (x, y, z) point, per channel.

    Coordinates are clamped to [0, extent - 1]; integer coordinates return
    the exact stored voxel.
    """
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 4:
        raise ValueError(f"trilinear_sample expects a 4-D video, got shape {video.shape}")
    shift = constant(np.asarray(coords, dtype=np.float64))
    offsets = (np.zeros(1), np.zeros(1), np.zeros(1))
    return sample_grid(constant(video), shift, offsets).value[0, 0, 0]


# ------------------------------------------------------------- pixel route


def pixel_crop(video: Array, center: Node, size: CubeSize) -> Node:
    """Trilinearly sampled cube around a center node; differentiable in it."""
    video = np.asarray(video, dtype=np.float64)
    CubeSpec(tuple(np.clip(center.value, *center_bounds(video.shape, size))), size).validate_for(
        video.shape
    )
    return sample_grid(constant(video), center, cube_offsets(size))


def crop_cube_pixelgrad(video: Array, spec: CubeSpec) -> tuple[Node, Node]:
    """Cube node plus the center leaf it differentiates against.

    The cube's voxel (i, j, k) is sampled at center + fixed offset, so the
    per-voxel coordinate sensitivity and the center sensitivity coincide;
    backward accumulates dLoss/dVoxel times that shared sensitivity into
    the three center coordinates.
    """
    video = np.asarray(video, dtype=np.float64)
    spec.validate_for(video.shape)
    center = parameter(np.asarray(spec.center, dtype=np.float64))
    return sample_grid(constant(video), center, cube_offsets(spec.size)), center


def center_sensitivity(video: Array, spec: CubeSpec) -> Array:
    """d(cube)/d(center) via one whole-grid perturbation per axis.

    Returns an array of shape (3,) + cube shape. Used to cross-check the
    per-voxel backward route: both must produce identical center gradients.
    """
    video = np.asarray(video, dtype=np.float64)
    spec.validate_for(video.shape)
    cube, center = crop_cube_pixelgrad(video, spec)
    out = np.empty((3,) + cube.shape)
    for axis in range(3):
        # Differentiate each output voxel against a rigid shift of the grid
        # along one axis, using the sampling weights' derivative directly.
        offsets = cube_offsets(spec.size)
        axes = [_axis_terms(center.value[a] + offsets[a], video.shape[a]) for a in range(3)]
        acc = np.zeros(cube.shape)
        for ix, wx, dx in axes[0]:
            for iy, wy, dy in axes[1]:
                for iz, wz, dz in axes[2]:
                    fx = dx if axis == 0 else wx
                    fy = dy if axis == 1 else wy
                    fz = dz if axis == 2 else wz
                    w = fx[:, None, None] * fy[None, :, None] * fz[None, None, :]
                    acc += video[np.ix_(ix, iy, iz)] * w[..., None]
        out[axis] = acc
    return out


# ----------------------------------------------------------- feature route


def rounded_start(center: float, size: int, extent: int) -> int:
    """Nearest lattice start index for a crop of ``size`` centered at ``center``."""
    start = int(round(center - size / 2.0))
    return int(np.clip(start, 0, extent - size))


def enlarged_size(size: CubeSize, stride: tuple[int, int, int]) -> CubeSize:
    """Cube extents grown by the encoder's cumulative stride per axis.

    Single-frame cubes are not enlarged temporally: the feature route then
    interpolates only the spatial axes and keeps the nearest frame.
    """
    grow_t = 0 if size.t == 1 else stride[2]
    return CubeSize(size.h + stride[0], size.w + stride[1], size.t + grow_t)


def crop_enlarged_cube(video: Array, spec: CubeSpec, stride: tuple[int, int, int]) -> Array:
    """Lattice-aligned crop of the enlarged cube; no gradient to the spec.

    The center is rounded to the nearest valid lattice start first, which
    blocks the pixel-space gradient path by construction.
    """
    video = np.asarray(video, dtype=np.float64)
    spec.validate_for(video.shape)
    big = enlarged_size(spec.size, stride)
    for axis, (sz, ext) in enumerate(zip(big.as_tuple(), video.shape)):
        if sz > ext:
            raise ValueError(
                f"enlarged cube extent {sz} does not fit axis {axis}; "
                f"video must be at least {big.as_tuple()} in the first three axes"
            )
    starts = [
        rounded_start(c, sz, ext)
        for c, sz, ext in zip(spec.center, big.as_tuple(), video.shape)
    ]
    sx, sy, sz_ = starts
    return video[sx : sx + big.h, sy : sy + big.w, sz_ : sz_ + big.t, :]


@dataclass(frozen=True)
class FeatureOffsetGrid:
    """Fixed per-cell sampling coordinates into an enlarged feature map.

    Offsets depend only on the cell index and the two map shapes, never on
    the policy output. Axes where the enlarged map is one cell larger are
    interpolated; axes of equal extent pass through by direct indexing.
    """

    x: Array
    y: Array
    z: Array

    @staticmethod
    def _axis(target: int, enlarged: int, centered: bool) -> Array:
        if enlarged == target:
            return np.arange(target, dtype=np.float64)
        if enlarged == target + 1:
            shift = 0.5 if centered else 0.0
            return np.arange(target, dtype=np.float64) + shift
        raise ValueError(
            f"enlarged extent {enlarged} must equal target {target} or target + 1"
        )

    @classmethod
    def centered(cls, target_shape, enlarged_shape) -> "FeatureOffsetGrid":
        """Half-cell offsets: cell i samples at i + 0.5 on interpolated axes.

        Matches a symmetrically enlarged crop, whose inner cube's encoder
        windows sit exactly between adjacent enlarged-feature cells.
        """
        return cls(*(cls._axis(t, e, True) for t, e in zip(target_shape, enlarged_shape)))

    @classmethod
    def flush(cls, target_shape, enlarged_shape) -> "FeatureOffsetGrid":
        """Integer offsets: cell i samples cell i of the enlarged map exactly."""
        return cls(*(cls._axis(t, e, False) for t, e in zip(target_shape, enlarged_shape)))

    def as_tuple(self) -> tuple[Array, Array, Array]:
        return (self.x, self.y, self.z)

    def target_shape(self) -> tuple[int, int, int]:
        return (len(self.x), len(self.y), len(self.z))


def feature_center_interp(enlarged_features: Node, center: Node, offsets: FeatureOffsetGrid) -> Node:
    """Re-sample enlarged features at fixed offsets, gradient-coupled to ``center``.

    Sampling coordinates are center - stop_gradient(center) + offsets, so
    the forward value is exactly the interpolation at the offsets alone and
    does not depend on the center value; the backward pass sees the full
    coordinate dependence, so an infinitesimal center change acts directly
    on the feature map.
    """
    tgt = offsets.target_shape()
    got = enlarged_features.shape[:3]
    for axis, (t, e, off) in enumerate(zip(tgt, got, offsets.as_tuple())):
        want = t if (off == np.arange(t)).all() else t + 1
        if e != want:
            raise ValueError(
                f"enlarged feature extent {e} on axis {axis} does not match offsets "
                f"(target {t}, expected {want})"
            )
    delta = center - stop_gradient(center)
    return sample_grid(enlarged_features, delta, offsets.as_tuple())
