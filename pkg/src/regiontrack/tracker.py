"""Frame-to-frame recursion: descend the warp with the occlusion estimate
in the loop, drop what went out of view, scan the outer band for what came
back, then blend the radiance.

The occlusion threshold is data driven and self-scaling per frame: the
affine quantile of the smoothed residual. During descent the callback
classifies with the threshold computed from the previously accepted state
(initially from the unwarped residual), so the threshold always lags the
classification by one update and cannot chase its own output. The final
estimate uses the converged residual's threshold.
"""

from dataclasses import dataclass, field

import numpy as np

from .descent import (DescentConfig, TrackingFailureError, descend,
                      init_state)
from .disocclusion import DisocclusionParams, detect
from .fields import RegionMask, ScalarField, gaussian_smooth_on_region
from .occlusion import (beta_o_from_residual, final_occlusion, residual,
                        update_occlusion)


@dataclass
class TrackerConfig:
    K_a: float = 0.8
    occlusion_sigma: float = 5.0
    beta_o_factor: float = 0.3
    disocclusion: DisocclusionParams = field(default_factory=DisocclusionParams)
    descent: DescentConfig = field(default_factory=DescentConfig)

    def __post_init__(self):
        if not (0.0 <= self.K_a <= 1.0):
            raise ValueError("K_a must lie in [0, 1]")
        if not (0.0 <= self.beta_o_factor <= 1.0):
            raise ValueError("beta_o_factor must lie in [0, 1]")


@dataclass
class TrackerState:
    frame_index: int
    region: RegionMask
    radiance: ScalarField
    last_occlusion: RegionMask
    last_disocclusion: RegionMask
    beta_o: float | None = None
    last_descent: object = None


def _empty_mask(grid):
    return RegionMask(grid, np.zeros(grid.shape, dtype=bool))


def init(image0, mask0):
    if mask0.area == 0:
        raise ValueError("initial mask is empty")
    vals = np.where(mask0.inside[..., None] if image0.values.ndim == 3
                    else mask0.inside, image0.values, 0.0)
    radiance = ScalarField(mask0.grid, vals, mask0.inside.copy())
    return TrackerState(0, mask0.copy(), radiance,
                        _empty_mask(mask0.grid), _empty_mask(mask0.grid))


def _smoothed_beta(state, image, sigma, penalty, factor=0.3):
    res = residual(state, image, penalty)
    if sigma > 0:
        res = gaussian_smooth_on_region(res, sigma, state.region)
    return beta_o_from_residual(res, factor)


class _FrozenBetaOcclusion:
    """Occlusion callback with the threshold held fixed for the whole descent.

    The threshold is estimated once from the residual under the previous
    warp, so it lags the state by one frame. Holding it fixed keeps the
    descent a coordinate minimization of a single functional: warp steps
    are accepted only on decrease, and the per-pixel occlusion update is
    the exact conditional minimizer, so the recorded energies cannot rise.
    """

    def __init__(self, image, beta, penalty):
        self.image = image
        self.beta = beta
        self.penalty = penalty

    def __call__(self, state):
        return update_occlusion(state, self.image, self.beta, self.penalty)


def update_radiance(a_prime, image, r_prime, d, K_a):
    """(1 - K_a) a' + K_a I on R', raw I on D."""
    av = a_prime.values
    iv = image.values
    rp = r_prime.inside
    dm = d.inside
    if av.ndim == 3:
        rp3, dm3 = rp[..., None], dm[..., None]
    else:
        rp3, dm3 = rp, dm
    out = np.where(rp3, (1.0 - K_a) * av + K_a * iv, 0.0)
    out = np.where(dm3, iv, out)
    return ScalarField(a_prime.grid, out, rp | dm)


def match(region, radiance, image, cfg=TrackerConfig()):
    """Single-pair warp + occlusion stage.

    Returns (descent result, final occlusion mask, converged threshold).
    """
    penalty = cfg.descent.penalty
    warp0 = init_state(region, radiance, sd_band=cfg.descent.sd_band)
    beta0 = _smoothed_beta(warp0, image, cfg.occlusion_sigma, penalty,
                           cfg.beta_o_factor)
    callback = _FrozenBetaOcclusion(image, beta0, penalty)
    result = descend(region, radiance, image, beta0, cfg.descent,
                     occlusion_update=callback)
    beta_conv = _smoothed_beta(result.state, image, cfg.occlusion_sigma,
                               penalty, cfg.beta_o_factor)
    occ = final_occlusion(result.state, image, beta_conv, cfg.occlusion_sigma,
                          penalty)
    return result, occ, beta_conv


def step(state, next_image, cfg=TrackerConfig()):
    """One recursion: warp+occlusion descent, dis-occlusion, radiance blend."""
    try:
        result, occ, beta_conv = match(state.region, state.radiance,
                                       next_image, cfg)
    except TrackingFailureError as err:
        raise TrackingFailureError(str(err), frame=state.frame_index + 1) from err

    final = result.state
    r_prime = RegionMask(final.region.grid, final.region.inside & ~occ.inside)
    if r_prime.area < 4:
        raise TrackingFailureError("co-visible region collapsed",
                                   frame=state.frame_index + 1)
    a_prime = ScalarField(final.region.grid, final.warped_radiance.values,
                          r_prime.inside.copy())
    d = detect(next_image, r_prime, cfg.disocclusion)
    region = RegionMask(final.region.grid, r_prime.inside | d.inside)
    radiance = update_radiance(a_prime, next_image, r_prime, d, cfg.K_a)
    return TrackerState(state.frame_index + 1, region, radiance, occ, d,
                        beta_o=beta_conv, last_descent=result)


def run(frames, mask0, cfg=TrackerConfig(), sinks=None):
    """Track across a frame sequence; returns the list of states.

    A tracking failure aborts, but states up to the failing frame are
    returned with the error attached as the list's `failure` attribute.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    states = [init(frames[0], mask0)]
    if sinks is not None:
        sinks.emit(states[0], frames[0])
    failure = None
    for t in range(1, len(frames)):
        try:
            states.append(step(states[-1], frames[t], cfg))
        except TrackingFailureError as err:
            failure = err
            break
        if sinks is not None:
            sinks.emit(states[-1], frames[t])
    out = _StateList(states)
    out.failure = failure
    return out


class _StateList(list):
    failure = None
