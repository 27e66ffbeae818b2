"""Dis-occlusion detection around the propagated region.

Each pixel of the outer band {0 < d <= eps} is scored by how much its
intensity looks like the object near its closest region point versus the
local background, weighted by a Gaussian prior in the band distance:

    p(x) = exp(-d(x)^2 / (2 sigma_d^2)) * exp(L_f) / (exp(L_f) + exp(L_b))

with L_f, L_b log Parzen densities built from disk windows around the
closest point. The appearance factor is a two-class posterior so p lands
in [0, 1] and the 0.5 threshold is meaningful. Detection smooths p over
the band and thresholds.

Intensities are quantized to the 256-level lattice; the Parzen kernel is
a per-channel Gaussian (bandwidth 10 levels) renormalized over the
lattice, so every sample contributes a proper pmf and densities sum to
one per channel by construction. Band pixels sharing a closest point
share their windows, so models are built once per closest point from
per-channel histograms; this matches the direct per-sample sum up to
float reordering.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import (RegionMask, ScalarField, closest_point_map,
                     gaussian_smooth_on_region)

_LEVELS = 256
_kernel_cache = {}


def _kernel(bandwidth):
    """Row-normalized 256x256 Gaussian table: K[s, v] = density at level v
    of a sample at level s."""
    key = float(bandwidth)
    if key not in _kernel_cache:
        s = np.arange(_LEVELS, dtype=float)
        K = np.exp(-((s[:, None] - s[None, :]) ** 2) / (2.0 * key * key))
        K /= K.sum(axis=1, keepdims=True)
        _kernel_cache[key] = K
    return _kernel_cache[key]


def _quantize(values):
    return np.clip(np.round(values), 0, _LEVELS - 1).astype(np.intp)


@dataclass
class ParzenModel:
    samples: np.ndarray  # (N, C) intensity vectors
    bandwidth: float = 10.0

    def log_density(self, values):
        """Joint log density at (M, C) or (C,) intensity vectors: channels
        independent, each a mean of per-sample lattice kernels."""
        K = _kernel(self.bandwidth)
        samp = np.atleast_2d(self.samples)
        vals = np.atleast_2d(values)
        out = np.zeros(vals.shape[0])
        sq = _quantize(samp)
        vq = _quantize(vals)
        for c in range(samp.shape[1]):
            dens = K[sq[:, c]][:, vq[:, c]].mean(axis=0)
            out += np.log(dens)
        return out if np.ndim(values) > 1 else float(out[0])


@dataclass(frozen=True)
class DisocclusionParams:
    eps: float = 30.0
    r: float | None = None  # window radius; None means 3 * eps
    sigma_d: float = 100.0
    beta_d: float = 0.5
    sigma: float = 5.0
    bandwidth: float = 10.0
    window: str = "disk"  # or "square"

    def __post_init__(self):
        if self.eps <= 0 or self.sigma_d <= 0 or self.bandwidth <= 0:
            raise ValueError("eps, sigma_d and bandwidth must be positive")
        if self.window not in ("disk", "square"):
            raise ValueError("window must be 'disk' or 'square'")

    @property
    def radius(self):
        return 3.0 * self.eps if self.r is None else self.r


def _window_mask(ii, jj, ci, cj, radius, window):
    if window == "disk":
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= radius * radius
    return (np.abs(ii - ci) <= radius) & (np.abs(jj - cj) <= radius)


def _hist_log_density(hist, n, K, q):
    """log of the histogram-weighted kernel mean at quantized levels q."""
    dens = (hist @ K)[q] / n
    return np.log(dens)


def likelihood_map(image, r_prime, params=DisocclusionParams()):
    """p on the band {0 < d_{R'} <= eps}; zero elsewhere.

    Background windows reach beyond the band (d > eps); if a window finds
    no background at all the background density falls back to uniform.
    """
    cpm = closest_point_map(r_prime, params.eps)
    band = cpm.band
    H, W = r_prime.grid.shape
    out = np.zeros((H, W))
    if not band.any():
        return ScalarField(r_prime.grid, out, band)

    vals = image.values if image.values.ndim == 3 else image.values[..., None]
    C = vals.shape[2]
    Q = _quantize(vals)
    K = _kernel(params.bandwidth)
    fg_ok = r_prime.inside
    bg_ok = ~r_prime.inside & (cpm.distance > params.eps)
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")

    bi, bj = np.nonzero(band)
    cls = cpm.closest[bi, bj]
    keys = cls[:, 0] * W + cls[:, 1]
    order = np.argsort(keys, kind="stable")
    log_f = np.zeros(len(bi))
    log_b = np.zeros(len(bi))
    uniform = C * np.log(1.0 / _LEVELS)
    start = 0
    while start < len(order):
        stop = start
        while stop < len(order) and keys[order[stop]] == keys[order[start]]:
            stop += 1
        grp = order[start:stop]
        ci, cj = cls[grp[0]]
        win = _window_mask(ii, jj, ci, cj, params.radius, params.window)
        fg = win & fg_ok
        bg = win & bg_ok
        qx = Q[bi[grp], bj[grp]]  # (G, C)
        lf = np.zeros(len(grp))
        lb = np.zeros(len(grp))
        nf = int(fg.sum())
        nb = int(bg.sum())
        for c in range(C):
            hist_f = np.bincount(Q[fg, c], minlength=_LEVELS).astype(float)
            lf += _hist_log_density(hist_f, nf, K, qx[:, c])
            if nb > 0:
                hist_b = np.bincount(Q[bg, c], minlength=_LEVELS).astype(float)
                lb += _hist_log_density(hist_b, nb, K, qx[:, c])
        if nb == 0:
            lb[:] = uniform
        post = 1.0 / (1.0 + np.exp(np.clip(lb - lf, -700, 700)))
        d = cpm.distance[bi[grp], bj[grp]]
        out[bi[grp], bj[grp]] = np.exp(-d * d / (2.0 * params.sigma_d ** 2)) * post
        start = stop
    return ScalarField(r_prime.grid, out, band)


def detect(image, r_prime, params=DisocclusionParams()):
    """D = band pixels whose band-smoothed likelihood exceeds beta_d.

    Smoothing pools within each connected piece of the band separately:
    an interior hole and the outer rim are disjoint evidence, and the
    truncated kernel must not average across the region body between
    them."""
    p = likelihood_map(image, r_prime, params)
    band = p.mask
    if params.sigma > 0 and band.any():
        labels, n = ndimage.label(band)
        smoothed = p.values.copy()
        for k in range(1, n + 1):
            piece = labels == k
            part = gaussian_smooth_on_region(
                ScalarField(r_prime.grid, p.values, piece), params.sigma,
                RegionMask(r_prime.grid, piece))
            smoothed[piece] = part.values[piece]
        p = ScalarField(r_prime.grid, smoothed, band)
    return RegionMask(r_prime.grid, band & (p.values > params.beta_d))
