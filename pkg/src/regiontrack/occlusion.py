"""Occlusion estimation conditioned on the current warp.

Given the warp, the energy separates per pixel, so the optimal occlusion
assignment is a pointwise residual threshold. The final estimate smooths
the residual first (region-renormalized kernel) for spatial regularity.
The threshold itself is data driven: an affine quantile of the smoothed
residual range, recomputed once per frame at convergence.
"""

from dataclasses import dataclass

import numpy as np

from .descent import Penalty, _channel_r2, rho
from .fields import RegionMask, ScalarField, gaussian_smooth_on_region


@dataclass
class OcclusionEstimate:
    warped_mask: RegionMask
    residual: ScalarField
    beta_o: float

    @classmethod
    def from_state(cls, state, image, beta_o, penalty=Penalty()):
        res = residual(state, image, penalty)
        mask = RegionMask(state.levelset.grid,
                          state.region.inside & (res.values > beta_o))
        return cls(mask, res, beta_o)


def residual(state, image, penalty=Penalty()):
    """Res(x) = rho(|I(x) - a_tau(x)|^2) on the region, zero outside."""
    r2 = _channel_r2(image.values, state.warped_radiance.values)
    vals = np.where(state.region.inside, rho(r2, penalty), 0.0)
    return ScalarField(state.levelset.grid, vals, state.region.inside.copy())


def beta_o_from_residual(res, factor=0.3):
    """Res_min + factor (Res_max - Res_min) over the residual's mask."""
    mask = res.mask if res.mask is not None else np.ones(res.values.shape, bool)
    if not mask.any():
        raise ValueError("residual field has an empty mask")
    vals = res.values[mask]
    lo, hi = float(vals.min()), float(vals.max())
    return lo + factor * (hi - lo)


def update_occlusion(state, image, beta_o, penalty=Penalty()):
    """{x in R_tau : Res(x) > beta_o}, the exact minimizer of the energy
    over occlusion masks with the warp held fixed (per-pixel separability:
    a pixel in pays beta_o * jac, a pixel out pays rho(r2) * jac)."""
    res = residual(state, image, penalty)
    return RegionMask(state.levelset.grid,
                      state.region.inside & (res.values > beta_o))


def final_occlusion(state, image, beta_o, sigma=5.0, penalty=Penalty()):
    """Threshold the region-smoothed residual; sigma = 0 reduces to the
    pointwise update."""
    res = residual(state, image, penalty)
    if sigma > 0:
        res = gaussian_smooth_on_region(res, sigma, state.region)
    return RegionMask(state.levelset.grid,
                      state.region.inside & (res.values > beta_o))
