"""Pixel-grid fields, regions, signed distance and interpolation.

Conventions used throughout the package:

* arrays are indexed (row, col), shape (H, W) or (H, W, C);
* pixel (i, j) sits at continuous coordinates (i + 0.5, j + 0.5);
* vector fields have shape (H, W, 2) with component 0 along rows;
* the zero level of a signed distance lies halfway between inside and
  outside pixel centers, so {psi < 0} reproduces the mask exactly.
"""

import heapq
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


class DegenerateRegionError(ValueError):
    """Raised when a region is empty (or covers the whole grid)."""


@dataclass(frozen=True)
class Grid2D:
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("grid must be at least 1x1")

    @property
    def shape(self):
        return (self.height, self.width)

    @classmethod
    def of(cls, arr):
        return cls(width=arr.shape[1], height=arr.shape[0])


@dataclass
class RegionMask:
    grid: Grid2D
    inside: np.ndarray  # bool (H, W)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=bool)
        return cls(Grid2D.of(arr), arr)

    @property
    def area(self):
        return int(self.inside.sum())

    def copy(self):
        return RegionMask(self.grid, self.inside.copy())


@dataclass
class ScalarField:
    grid: Grid2D
    values: np.ndarray  # (H, W) or (H, W, C)
    mask: np.ndarray | None = None  # bool (H, W); None means full grid

    @classmethod
    def from_array(cls, arr, mask=None):
        arr = np.asarray(arr, dtype=float)
        return cls(Grid2D.of(arr), arr, mask)

    @property
    def channels(self):
        return 1 if self.values.ndim == 2 else self.values.shape[2]

    def copy(self):
        m = None if self.mask is None else self.mask.copy()
        return ScalarField(self.grid, self.values.copy(), m)


@dataclass
class VectorField:
    grid: Grid2D
    values: np.ndarray  # (H, W, 2)
    mask: np.ndarray | None = None

    @classmethod
    def from_array(cls, arr, mask=None):
        arr = np.asarray(arr, dtype=float)
        return cls(Grid2D.of(arr[..., 0]), arr, mask)

    def copy(self):
        m = None if self.mask is None else self.mask.copy()
        return VectorField(self.grid, self.values.copy(), m)


@dataclass
class LevelSet:
    grid: Grid2D
    psi: np.ndarray  # (H, W) signed distance, negative inside
    band_radius: float = 2.0

    @property
    def region(self):
        return RegionMask(self.grid, self.psi < 0)

    @property
    def narrowband(self):
        return np.abs(self.psi) <= self.band_radius

    def copy(self):
        return LevelSet(self.grid, self.psi.copy(), self.band_radius)


@dataclass
class ClosestPointMap:
    grid: Grid2D
    distance: np.ndarray  # (H, W), 0 on the region itself
    closest: np.ndarray  # (H, W, 2) int indices of the nearest region pixel
    band: np.ndarray  # bool, {0 < distance <= eps}


_NB4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_NB8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


def shift(arr, di, dj, fill=0):
    """Array shifted so out[i, j] = arr[i + di, j + dj], padded with fill."""
    out = np.full_like(arr, fill)
    H, W = arr.shape[:2]
    si0, si1 = max(di, 0), min(H + di, H)
    sj0, sj1 = max(dj, 0), min(W + dj, W)
    if si0 < si1 and sj0 < sj1:
        out[si0 - di:si1 - di, sj0 - dj:sj1 - dj] = arr[si0:si1, sj0:sj1]
    return out


def _fmm(source, domain, stop, want_labels=False):
    """First-order upwind eikonal distances from `source` over `domain`.

    Distances are between pixel centers. Pixels within a 5x5 window of a
    source pixel are seeded with their exact Euclidean distance; the rest
    is propagated with the standard two-neighbor update on a binary heap.
    Propagation stops once the front passes `stop`; unreached pixels keep
    +inf. With want_labels, the index of a (near-)closest source pixel is
    carried along the front.
    """
    H, W = source.shape
    dist = np.full((H, W), np.inf)
    labels = np.full((H, W, 2), -1, dtype=np.int32) if want_labels else None

    # exact seeding in the 5x5 neighborhood of the source set
    for di in range(-2, 3):
        for dj in range(-2, 3):
            if di == 0 and dj == 0:
                continue
            cand = domain & shift(source, di, dj, fill=False)
            d = float(np.hypot(di, dj))
            better = cand & (d < dist)
            if not better.any():
                continue
            dist[better] = d
            if want_labels:
                ii, jj = np.nonzero(better)
                labels[ii, jj, 0] = ii + di
                labels[ii, jj, 1] = jj + dj

    frozen = np.zeros((H, W), dtype=bool)
    heap = [(dist[i, j], i, j) for i, j in zip(*np.nonzero(np.isfinite(dist)))]
    heapq.heapify(heap)

    while heap:
        d, i, j = heapq.heappop(heap)
        if frozen[i, j] or d > dist[i, j]:
            continue  # stale heap entry
        frozen[i, j] = True
        if d > stop:
            continue
        for di, dj in _NB4:
            ni, nj = i + di, j + dj
            if not (0 <= ni < H and 0 <= nj < W):
                continue
            if frozen[ni, nj] or not domain[ni, nj]:
                continue
            a = np.inf  # best accepted row neighbor
            b = np.inf  # best accepted col neighbor
            if ni > 0 and frozen[ni - 1, nj]:
                a = dist[ni - 1, nj]
            if ni < H - 1 and frozen[ni + 1, nj]:
                a = min(a, dist[ni + 1, nj])
            if nj > 0 and frozen[ni, nj - 1]:
                b = dist[ni, nj - 1]
            if nj < W - 1 and frozen[ni, nj + 1]:
                b = min(b, dist[ni, nj + 1])
            lo, hi = (a, b) if a <= b else (b, a)
            if not np.isfinite(lo):
                continue
            if hi - lo >= 1.0 or not np.isfinite(hi):
                nd = lo + 1.0
            else:
                nd = 0.5 * (lo + hi + np.sqrt(2.0 - (hi - lo) ** 2))
            if nd < dist[ni, nj]:
                dist[ni, nj] = nd
                heapq.heappush(heap, (nd, ni, nj))
                if want_labels:
                    _relabel(labels, ni, nj, frozen, H, W)
    return dist, labels


def _relabel(labels, i, j, frozen, H, W):
    # adopt the label of whichever settled neighbor's source pixel is
    # closest to (i, j) by exact re-measurement
    best = np.inf
    for di, dj in _NB8:
        ni, nj = i + di, j + dj
        if not (0 <= ni < H and 0 <= nj < W) or not frozen[ni, nj]:
            continue
        si, sj = labels[ni, nj]
        if si < 0:
            continue
        d = (i - si) ** 2 + (j - sj) ** 2
        if d < best:
            best = d
            labels[i, j, 0] = si
            labels[i, j, 1] = sj


def signed_distance(mask, band_radius=6.0):
    """Signed distance to a region mask via fast marching.

    psi is negative inside, positive outside, with the zero crossing
    between inside and outside pixel centers; accurate within
    band_radius of the boundary and clamped to a plateau beyond it.
    """
    inside = mask.inside
    if not inside.any() or inside.all():
        raise DegenerateRegionError("region must be neither empty nor the full grid")
    stop = band_radius + 2.0
    d_out, _ = _fmm(inside, ~inside, stop)
    d_in, _ = _fmm(~inside, inside, stop)
    psi = np.where(inside, -(np.minimum(d_in, stop + 1.0) - 0.5),
                   np.minimum(d_out, stop + 1.0) - 0.5)
    return LevelSet(mask.grid, psi)


def closest_point_map(mask, eps):
    """Distance and nearest-region-pixel labels on the outer band {0 < d <= eps}.

    Distances share the fast-marching code path of signed_distance, so the
    two agree wherever both are defined.
    """
    inside = mask.inside
    if not inside.any():
        raise DegenerateRegionError("region is empty")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if inside.all():
        raise DegenerateRegionError("region covers the whole grid")
    d_raw, labels = _fmm(inside, ~inside, stop=eps + 1.5, want_labels=True)
    distance = np.where(inside, 0.0, d_raw - 0.5)
    distance[~inside & ~np.isfinite(d_raw)] = np.inf
    band = ~inside & (distance <= eps)
    labels[~band] = -1
    return ClosestPointMap(mask.grid, distance, labels, band)


def extend_to_narrowband(g, ls):
    """Extend a region field to the rest of the grid by nearest region pixel."""
    inside = ls.psi < 0
    _, (ri, rj) = ndimage.distance_transform_edt(~inside, return_indices=True)
    values = g.values[ri, rj]
    values[inside] = g.values[inside]
    return VectorField(g.grid, values)


def gaussian_smooth_on_region(f, sigma, mask):
    """Gaussian smoothing with the kernel renormalized over in-mask support.

    The kernel is truncated at 3 sigma. Constants on the mask are
    preserved exactly; sigma = 0 is the identity.
    """
    if sigma == 0:
        return f.copy()
    m = mask.inside.astype(float)
    den = ndimage.gaussian_filter(m, sigma, truncate=3.0, mode="constant")
    vals = f.values
    if vals.ndim == 2:
        num = ndimage.gaussian_filter(np.where(mask.inside, vals, 0.0),
                                      sigma, truncate=3.0, mode="constant")
        out = np.zeros_like(vals)
        out[mask.inside] = num[mask.inside] / den[mask.inside]
    else:
        out = np.zeros_like(vals)
        for c in range(vals.shape[2]):
            num = ndimage.gaussian_filter(
                np.where(mask.inside, vals[..., c], 0.0),
                sigma, truncate=3.0, mode="constant")
            out[mask.inside, c] = num[mask.inside] / den[mask.inside]
    return ScalarField(f.grid, out, mask.inside.copy())


def _nearest_inside(mask):
    _, idx = ndimage.distance_transform_edt(~mask, return_indices=True)
    return idx


def nearest_fill(f):
    """The field with off-mask pixels filled from the nearest on-mask pixel."""
    if f.mask is None:
        return f
    ri, rj = _nearest_inside(f.mask)
    values = f.values[ri, rj]
    values[f.mask] = f.values[f.mask]
    return ScalarField(f.grid, values)


def bilinear_sample(f, points):
    """Sample a field at continuous (row, col) points.

    Weights are renormalized over in-mask corner pixels; points whose four
    surrounding pixels all fall outside the mask take the nearest in-mask
    value. Out-of-grid points are clamped to the boundary.
    """
    H, W = f.grid.shape
    vals = f.values
    pts = np.asarray(points, dtype=float)
    u = np.clip(pts[..., 0] - 0.5, 0.0, H - 1.0)
    v = np.clip(pts[..., 1] - 0.5, 0.0, W - 1.0)
    i0 = np.clip(np.floor(u).astype(int), 0, max(H - 2, 0))
    j0 = np.clip(np.floor(v).astype(int), 0, max(W - 2, 0))
    i1 = np.minimum(i0 + 1, H - 1)
    j1 = np.minimum(j0 + 1, W - 1)
    fu = u - i0
    fv = v - j0
    w00 = (1 - fu) * (1 - fv)
    w01 = (1 - fu) * fv
    w10 = fu * (1 - fv)
    w11 = fu * fv
    if f.mask is not None:
        m = f.mask
        w00 = w00 * m[i0, j0]
        w01 = w01 * m[i0, j1]
        w10 = w10 * m[i1, j0]
        w11 = w11 * m[i1, j1]
    wsum = w00 + w01 + w10 + w11
    dead = wsum <= 0

    def gather(ch):
        acc = (w00 * ch[i0, j0] + w01 * ch[i0, j1]
               + w10 * ch[i1, j0] + w11 * ch[i1, j1])
        with np.errstate(invalid="ignore", divide="ignore"):
            out = acc / wsum
        return out

    if vals.ndim == 2:
        out = gather(vals)
    else:
        out = np.stack([gather(vals[..., c]) for c in range(vals.shape[2])],
                       axis=-1)
    if f.mask is not None and np.any(dead):
        idx = _nearest_inside(f.mask)
        pi = np.clip(np.round(pts[..., 0] - 0.5).astype(int), 0, H - 1)
        pj = np.clip(np.round(pts[..., 1] - 0.5).astype(int), 0, W - 1)
        ni, nj = idx[0][pi, pj], idx[1][pi, pj]
        if vals.ndim == 2:
            out = np.where(dead, vals[ni, nj], out)
        else:
            out = np.where(dead[..., None], vals[ni, nj], out)
    return out


def masked_jacobian(values, inside, isolated="zero"):
    """Per-pixel 2x2 Jacobian of a vector field on a mask.

    Central differences where both axis neighbors are in the mask,
    one-sided at the mask boundary. A pixel with neither neighbor gets a
    zero row, or the identity row when isolated="identity" (used for
    warp determinants, where a lone pixel should count as undeformed).
    """
    H, W = inside.shape
    J = np.zeros((H, W, 2, 2), dtype=float)
    for axis, (dm, dp) in enumerate((((-1, 0), (1, 0)), ((0, -1), (0, 1)))):
        has_m = shift(inside, *dm, fill=False)
        has_p = shift(inside, *dp, fill=False)
        for comp in range(2):
            val = values[..., comp]
            vm = shift(val, *dm)
            vp = shift(val, *dp)
            der = np.zeros((H, W))
            both = has_m & has_p
            der[both] = 0.5 * (vp[both] - vm[both])
            only_p = has_p & ~has_m
            der[only_p] = vp[only_p] - val[only_p]
            only_m = has_m & ~has_p
            der[only_m] = val[only_m] - vm[only_m]
            if isolated == "identity" and comp == axis:
                none = ~has_m & ~has_p
                der[none] = 1.0
            J[..., comp, axis] = der
    J[~inside] = 0.0
    return J


def masked_gradient(values, inside):
    """Masked central/one-sided gradient of a scalar field, (H, W, 2)."""
    vf = np.stack([values, np.zeros_like(values)], axis=-1)
    J = masked_jacobian(vf, inside)
    return J[..., 0, :]


def jacobian_det(phi_inv, mask):
    """Determinant of the backward-map Jacobian on the mask."""
    J = masked_jacobian(phi_inv.values, mask.inside, isolated="identity")
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    det[~mask.inside] = 0.0
    return ScalarField(mask.grid, det, mask.inside.copy())


def interior_mask(inside):
    """Pixels whose four neighbors are all in the mask."""
    out = inside.copy()
    for di, dj in _NB4:
        out &= shift(inside, di, dj, fill=False)
    return out


def pixel_centers(grid):
    """(H, W, 2) array of pixel center coordinates."""
    H, W = grid.shape
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([ii + 0.5, jj + 0.5], axis=-1)
