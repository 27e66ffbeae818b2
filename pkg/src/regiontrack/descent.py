"""Gradient descent on warps: energy, coupled level-set / backward-map
transport, the translation/deformation alternation, and a Horn-Schunck
baseline driving the same transport machinery.

The level set obeys d(psi)/dtau = G . grad(psi), i.e. the region moves
with velocity -G, so stepping "along -G" just means passing G here. The
backward map is transported by the same upwind scheme and newly uncovered
pixels are filled from their neighbors across the old zero crossing.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import (Grid2D, LevelSet, RegionMask, ScalarField, VectorField,
                     bilinear_sample, extend_to_narrowband, interior_mask,
                     jacobian_det, masked_gradient, nearest_fill,
                     pixel_centers, shift, signed_distance)
from .sobolev import (SobolevGradient, assemble_gradient, neumann_laplacian,
                      _degree)


class TrackingFailureError(RuntimeError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class CflViolationError(RuntimeError):
    """A newly uncovered pixel had no 8-neighbor in the old region."""


@dataclass(frozen=True)
class Penalty:
    kind: str = "quadratic"  # "quadratic" or "robust"
    eps: float = 0.01


def rho(r2, penalty=Penalty()):
    """Residual penalty applied to the squared channel norm."""
    if penalty.kind == "quadratic":
        return r2
    return np.sqrt(r2 + penalty.eps)


def rho_prime(r2, penalty=Penalty()):
    if penalty.kind == "quadratic":
        return np.ones_like(np.asarray(r2, dtype=float))
    return 1.0 / (2.0 * np.sqrt(r2 + penalty.eps))


@dataclass(frozen=True)
class DescentConfig:
    cfl_factor: float = 0.5
    translation_tol: float = 1e-3
    # Relative to the initial energy: progress below this fraction counts
    # as converged, and a deformation step predicting less is skipped.
    # After translation exhausts a warp the leftover is a mean-zero
    # sub-0.1 px residue whose deformation gain sits near 1e-3 of E0;
    # the default treats that as noise rather than structure.
    energy_rel_tol: float = 2e-3
    stall_window: int = 5
    max_iters: int = 2000
    reinit_every: int = 20
    penalty: Penalty = Penalty()
    grad_presmooth_sigma: float = 1.0
    solver_tol: float = 1e-8
    max_halvings: int = 8
    sd_band: float = 6.0  # signed-distance accuracy radius kept around the front

    def __post_init__(self):
        if not (0 < self.cfl_factor <= 1):
            raise ValueError("cfl_factor must lie in (0, 1]")
        if self.translation_tol <= 0 or self.energy_rel_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class BackwardWarp:
    grid: Grid2D
    coords: np.ndarray  # (H, W, 2) source position in template coordinates

    @property
    def values(self):
        return self.coords

    def copy(self):
        return BackwardWarp(self.grid, self.coords.copy())


@dataclass
class WarpState:
    levelset: LevelSet
    backward: BackwardWarp
    region: RegionMask
    warped_occlusion: RegionMask
    warped_radiance: ScalarField
    tau: float = 0.0

    def copy(self):
        return WarpState(self.levelset.copy(), self.backward.copy(),
                         self.region.copy(), self.warped_occlusion.copy(),
                         self.warped_radiance.copy(), self.tau)


@dataclass
class TraceRow:
    iter: int
    phase: str
    energy: float
    mean_grad_norm: float
    deform_grad_inf: float
    dt: float


@dataclass
class PhaseResult:
    state: WarpState
    steps: int
    reached_tol: bool
    stalled: bool
    mean_norm: float


@dataclass
class StepResult:
    state: WarpState
    accepted: bool
    gated: bool
    dt: float
    predicted: float
    gtilde_inf: float
    warm: np.ndarray | None


@dataclass
class DescentResult:
    state: WarpState
    converged: bool
    stop_reason: str
    translation_steps: int
    deformation_steps: int
    energies: list
    trace: list
    min_jacobian: float


def displacement(state):
    """Forward displacement x - phi^{-1}(x) on the region, (H, W, 2)."""
    d = pixel_centers(state.levelset.grid) - state.backward.coords
    d[~state.region.inside] = 0.0
    return d


def init_state(template_mask, template_a, sd_band=6.0):
    ls = signed_distance(template_mask, band_radius=sd_band)
    grid = template_mask.grid
    coords = pixel_centers(grid)
    a0 = np.where(template_mask.inside[..., None] if template_a.values.ndim == 3
                  else template_mask.inside, template_a.values, 0.0)
    return WarpState(
        levelset=ls,
        backward=BackwardWarp(grid, coords),
        region=template_mask.copy(),
        warped_occlusion=RegionMask(grid, np.zeros(grid.shape, dtype=bool)),
        warped_radiance=ScalarField(grid, a0, template_mask.inside.copy()),
        tau=0.0)


def _channel_r2(image_vals, a_vals):
    diff = image_vals - a_vals
    if diff.ndim == 3:
        return (diff * diff).sum(axis=2)
    return diff * diff


def energy(state, template_a, image, beta_o, penalty=Penalty()):
    """E = sum over co-visible region of rho(|I - a_tau|^2) jac + beta_o * sum
    over the occlusion of jac; areas measured in template coordinates."""
    inside = state.region.inside
    occ = state.warped_occlusion.inside & inside
    jac = jacobian_det(state.backward, state.region).values
    r2 = _channel_r2(image.values, state.warped_radiance.values)
    data = inside & ~occ
    e = float((rho(r2[data], penalty) * jac[data]).sum())
    e += beta_o * float(jac[occ].sum())
    return e


def f1_field(state, image, penalty=Penalty(), presmooth_sigma=1.0):
    """Data force f1 = 2 rho'(|I - a_tau|^2) sum_c (I_c - a_c) grad I_c.

    Zero on the occlusion estimate. The image gradient is taken on a
    lightly presmoothed copy; the residual factors use the raw image.
    The factor 2 comes from differentiating the squared channel norm and
    keeps the field dual to the energy differential.
    """
    inside = state.region.inside
    vals = image.values
    if presmooth_sigma > 0:
        sm = ndimage.gaussian_filter(
            vals, sigma=(presmooth_sigma, presmooth_sigma, 0)[:vals.ndim],
            truncate=3.0, mode="nearest")
    else:
        sm = vals
    if vals.ndim == 2:
        vals = vals[..., None]
        sm = sm[..., None]
    a = state.warped_radiance.values
    if a.ndim == 2:
        a = a[..., None]
    r2 = ((vals - a) ** 2).sum(axis=2)
    rp = rho_prime(r2, penalty)
    f = np.zeros(inside.shape + (2,))
    for c in range(vals.shape[2]):
        gi = np.gradient(sm[..., c])
        diff = vals[..., c] - a[..., c]
        f[..., 0] += diff * gi[0]
        f[..., 1] += diff * gi[1]
    f *= 2.0 * rp[..., None]
    live = inside & ~state.warped_occlusion.inside
    f[~live] = 0.0
    return VectorField(state.levelset.grid, f, inside.copy())


def cfl_timestep(G, cfl_factor=0.5):
    """dt = cfl_factor * 0.5 / max |G^j|; None signals a vanished gradient."""
    vals = G.values if hasattr(G, "values") else G
    gmax = float(np.abs(vals).max()) if vals.size else 0.0
    if gmax == 0.0:
        return None
    return cfl_factor * 0.5 / gmax


def _upwind_terms(arr, g, axis, valid=None):
    """g * one-sided difference of arr, forward where g >= 0, backward
    where g < 0. With a validity mask, a difference against an invalid
    neighbor is never used: the opposite one-sided difference stands in
    for it, and the term is zero only when both neighbors are invalid.
    Pinning the inflow rim to zero instead would freeze stale values
    there and let them advect through the whole region."""
    dp = (1, 0) if axis == 0 else (0, 1)
    dm = (-1, 0) if axis == 0 else (0, -1)
    fwd = shift(arr, *dp) - arr
    bwd = arr - shift(arr, *dm)
    if valid is None:
        return g * np.where(g >= 0, fwd, bwd)
    ok_f = shift(valid, *dp, fill=False)
    ok_b = shift(valid, *dm, fill=False)
    f_sel = np.where(ok_f, fwd, np.where(ok_b, bwd, 0.0))
    b_sel = np.where(ok_b, bwd, np.where(ok_f, fwd, 0.0))
    return g * np.where(g >= 0, f_sel, b_sel)


def _constant_motion(vals):
    """The constant vector when G is spatially uniform, else None.

    d(f)/dtau = g . grad(f) with constant g is solved exactly by
    f(x, tau + dt) = f(x + g dt, tau); following the characteristic
    instead of differencing avoids the upwind scheme's numerical
    diffusion, which otherwise accumulates over the many small steps
    of the translation phase and its polish.
    """
    g0 = vals[..., 0]
    g1 = vals[..., 1]
    if np.ptp(g0) == 0.0 and np.ptp(g1) == 0.0:
        return np.array([g0.flat[0], g1.flat[0]])
    return None


def upwind_advect_levelset(ls, G, dt, update_radius=3.0):
    """One upwind step of d(psi)/dtau = G . grad(psi) on the band."""
    vals = G.values if hasattr(G, "values") else G
    psi = ls.psi
    upd = np.abs(psi) <= update_radius
    new = psi.copy()
    g = _constant_motion(vals)
    if g is not None:
        # A shifted signed distance is valid everywhere its source was,
        # so the whole grid updates; offsets larger than the band then
        # carry the front's accurate halo along with it.
        src = pixel_centers(ls.grid) + dt * g
        shifted = bilinear_sample(ScalarField(ls.grid, psi), src)
        return LevelSet(ls.grid, shifted, ls.band_radius)
    inc = (_upwind_terms(psi, vals[..., 0], 0)
           + _upwind_terms(psi, vals[..., 1], 1))
    new[upd] = psi[upd] + dt * inc[upd]
    return LevelSet(ls.grid, new, ls.band_radius)


def transport_backward_map(bw, G, dt, region_old, region_new, ls_old):
    """Transport phi^{-1} with the upwind scheme on surviving pixels and
    fill newly uncovered pixels from 8-neighbors across the old front.

    Fill weights are the linearly interpolated distances from the new pixel
    to the old zero crossing toward each in-region neighbor; if every
    crossing distance degenerates to zero the plain neighbor mean is used.
    """
    vals = G.values if hasattr(G, "values") else G
    old = region_old.inside
    new = region_new.inside
    coords = bw.coords
    out = coords.copy()

    g = _constant_motion(vals)
    if g is not None:
        # Sample the displacement rather than the coordinates: near the
        # front the renormalized bilinear weights reduce to a one-sided
        # average, which biases a field with unit gradient by a large
        # fraction of a pixel but leaves the slowly varying displacement
        # essentially untouched.
        pts = pixel_centers(bw.grid)
        disp = np.where(old[..., None], coords - pts, 0.0)
        src = pts + dt * g
        u = bilinear_sample(ScalarField(bw.grid, disp, old), src)
        out[new] = src[new] + u[new]
        out[~new] = 0.0
        return BackwardWarp(bw.grid, out)

    surv = new & old
    for comp in range(2):
        arr = coords[..., comp]
        inc = (_upwind_terms(arr, vals[..., 0], 0, valid=old)
               + _upwind_terms(arr, vals[..., 1], 1, valid=old))
        out[surv, comp] = arr[surv] + dt * inc[surv]

    fresh = new & ~old
    if fresh.any():
        psi = ls_old.psi
        num = np.zeros(coords.shape)
        den = np.zeros(psi.shape)
        nb_count = np.zeros(psi.shape)
        nb_sum = np.zeros(coords.shape)
        for di, dj in ((-1, -1), (-1, 0), (-1, 1), (0, -1),
                       (0, 1), (1, -1), (1, 0), (1, 1)):
            nb_in = shift(old, di, dj, fill=False)
            psi_nb = shift(psi, di, dj)
            gap = psi - psi_nb
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(nb_in & (gap > 0),
                             np.hypot(di, dj) * psi / gap, 0.0)
            w = np.where(np.isfinite(w) & (w > 0), w, 0.0)
            cnb = np.stack([shift(coords[..., 0], di, dj),
                            shift(coords[..., 1], di, dj)], axis=-1)
            num += w[..., None] * cnb
            den += w
            nb_sum += np.where(nb_in[..., None], cnb, 0.0)
            nb_count += nb_in
        if np.any(fresh & (nb_count == 0)):
            raise CflViolationError(
                "uncovered pixel with no in-region neighbor; dt exceeds CFL")
        weighted = fresh & (den > 0)
        out[weighted] = num[weighted] / den[weighted][:, None]
        plain = fresh & (den == 0)
        out[plain] = nb_sum[plain] / nb_count[plain][:, None]
    out[~new] = 0.0
    return BackwardWarp(bw.grid, out)


def _resample_radiance(template_a, coords, region):
    vals = bilinear_sample(template_a, coords[region.inside])
    H, W = region.grid.shape
    if vals.ndim == 1:
        out = np.zeros((H, W))
    else:
        out = np.zeros((H, W, vals.shape[-1]))
    out[region.inside] = vals
    return ScalarField(region.grid, out, region.inside.copy())


class _Engine:
    """Shared mechanics for the descent phases: stepping, acceptance with
    halving, reinitialization cadence, trace bookkeeping."""

    def __init__(self, template_a, image, beta_o, cfg, occlusion_update=None):
        self.template_a = template_a
        # The radiance is resampled at backward-map positions every step;
        # near the rim those positions wander past the template mask, where
        # renormalized sampling clamps to edge values and the energy loses
        # its smooth dependence on the warp right where the shape signal
        # lives. Extending by nearest inside value keeps it differentiable.
        self.sample_a = nearest_fill(template_a)
        self.image = image
        self.beta_o = beta_o
        self.cfg = cfg
        self.callback = occlusion_update
        self.trace = []
        self.energies = []
        self.accepted = 0
        self.since_reinit = 0
        self.min_jac = np.inf
        self.warm = None

    def energy_of(self, state):
        return energy(state, self.template_a, self.image, self.beta_o,
                      self.cfg.penalty)

    def note_jacobian(self, state):
        jac = jacobian_det(state.backward, state.region).values
        interior = interior_mask(state.region.inside)
        if interior.any():
            self.min_jac = min(self.min_jac, float(jac[interior].min()))

    def apply_step(self, state, G_ext, dt):
        ls_new = upwind_advect_levelset(state.levelset, G_ext, dt)
        region_new = RegionMask(state.levelset.grid, ls_new.psi < 0)
        if region_new.area == 0:
            return None
        bw_new = transport_backward_map(state.backward, G_ext, dt,
                                        state.region, region_new,
                                        state.levelset)
        a_new = _resample_radiance(self.sample_a, bw_new.coords, region_new)
        occ_new = RegionMask(state.levelset.grid,
                             state.warped_occlusion.inside & region_new.inside)
        return WarpState(ls_new, bw_new, region_new, occ_new, a_new,
                         state.tau + dt)

    def try_step(self, state, e_old, G_ext, dt0, phase, mean_norm, gtilde_inf):
        """Halving acceptance: first dt in dt0 / 2^k that lowers the energy."""
        dt = dt0
        for _ in range(self.cfg.max_halvings + 1):
            cand = self.apply_step(state, G_ext, dt)
            if cand is not None:
                e_new = self.energy_of(cand)
                if e_new < e_old:
                    self.accept(cand, phase, mean_norm, gtilde_inf, dt)
                    return cand, dt
            dt *= 0.5
        return None, dt0

    def accept(self, state, phase, mean_norm, gtilde_inf, dt):
        if self.callback is not None:
            state.warped_occlusion = self.callback(state)
        e = self.energy_of(state)
        self.accepted += 1
        self.since_reinit += 1
        self.energies.append(e)
        self.trace.append(TraceRow(self.accepted, phase, e, mean_norm,
                                   gtilde_inf, dt))
        self.note_jacobian(state)
        if self.since_reinit >= self.cfg.reinit_every or self.needs_reinit(state):
            state.levelset = signed_distance(state.region,
                                             band_radius=self.cfg.sd_band)
            self.since_reinit = 0

    def needs_reinit(self, state):
        """True when |grad psi| on the narrowband signals transport damage:
        compression above 1.5 (the advected profile piling into the frozen
        far field) or flattening below 0.5. Both thresholds sit outside
        the structural range of fresh lattice signed distance (corner
        pixels dip to ~0.62, curved fronts reach ~1.05): tighter bounds
        refire within a step or two of every rebuild, and each rebuild
        quantizes away the sub-pixel front motion, eroding or outright
        freezing the region."""
        psi = state.levelset.psi
        gi, gj = np.gradient(psi)
        mag = np.hypot(gi, gj)
        band = state.levelset.narrowband
        if not band.any():
            return True
        m = mag[band]
        return bool(m.min() < 0.5 or m.max() > 1.5)

    def tiny(self, e_old, e_new):
        return (e_old - e_new) <= 1e-12 * max(1.0, abs(e_old))

    def translation(self, state, budget=None):
        """alpha -> infinity phase: G is the constant translation component.

        The phase explores a one-parameter family of rigid shifts, so every
        candidate is built by a single semi-Lagrangian application of the
        accumulated offset to a phase-entry snapshot. Stepping incrementally
        instead resamples the level set and backward map once per step, and
        the compounded bilinear smoothing drifts the front by a large
        fraction of a pixel over a long phase.
        """
        cfg = self.cfg
        budget = cfg.max_iters if budget is None else budget
        steps = 0
        stalled = False
        reached = False
        mean_norm = 0.0
        e = self.energy_of(state)
        tiny_run = 0
        snapshot = state.copy()
        shape = state.levelset.psi.shape + (2,)
        v = np.zeros(2)

        def shifted(offset):
            return self.apply_step(snapshot,
                                   np.broadcast_to(offset, shape), 1.0)

        while steps < budget and self.accepted < cfg.max_iters:
            f1 = f1_field(state, self.image, cfg.penalty,
                          cfg.grad_presmooth_sigma)
            jac = jacobian_det(state.backward, state.region)
            q = f1.values * jac.values[..., None]
            mean = q.sum(axis=(0, 1))
            mean_norm = float(np.hypot(mean[0], mean[1]))
            if mean_norm <= cfg.translation_tol:
                reached = True
                break
            dt = cfl_timestep(np.broadcast_to(mean, shape), cfg.cfl_factor)
            cand = None
            for _ in range(cfg.max_halvings + 1):
                v_cand = v + dt * mean
                trial = shifted(v_cand)
                if trial is not None and self.energy_of(trial) < e:
                    self.accept(trial, "translation", mean_norm, 0.0, dt)
                    cand = trial
                    v = v_cand
                    break
                dt *= 0.5
            if cand is None:
                stalled = True
                break
            e_new = self.energies[-1]
            tiny_run = tiny_run + 1 if self.tiny(e, e_new) else 0
            state = cand
            e = e_new
            steps += 1
            if tiny_run >= 2:
                stalled = True
                break
        # Derivative-free polish. The force above uses the lattice image
        # gradient, whose zero sits a fraction of a pixel from the discrete
        # energy optimum, so the loop stalls short with a large residual
        # force. A short pattern search on the energy itself closes the
        # gap while staying inside the same shift family.
        dirs = (np.array([1.0, 0.0]), np.array([-1.0, 0.0]),
                np.array([0.0, 1.0]), np.array([0.0, -1.0]))
        mags = (0.25, 0.125, 0.0625, 0.03125)
        for _ in range(3):
            if steps >= budget or self.accepted >= cfg.max_iters:
                break
            best = None
            best_e = e
            best_v = v
            best_m = 0.0
            for d in dirs:
                for m in mags:
                    trial = shifted(v + m * d)
                    if trial is None:
                        continue
                    e_new = self.energy_of(trial)
                    if e_new < best_e:
                        best, best_e, best_m = trial, e_new, m
                        best_v = v + m * d
            if best is None or self.tiny(e, best_e):
                break
            self.accept(best, "translation", mean_norm, 0.0, best_m)
            v = best_v
            state = best
            e = self.energies[-1]
            steps += 1
        return PhaseResult(state, steps, reached, stalled, mean_norm)

    def deformation(self, state, dt=None, gradient_scale=1.0,
                    min_predicted_decrease=0.0):
        """One CFL step along the mean-zero deformation component."""
        cfg = self.cfg
        f1 = f1_field(state, self.image, cfg.penalty, cfg.grad_presmooth_sigma)
        jac = jacobian_det(state.backward, state.region)
        grad = assemble_gradient(f1, jac, state.region, tol=cfg.solver_tol,
                                 warm=self.warm)
        gtilde = grad.deform.values * gradient_scale
        ginf = float(np.abs(gtilde).max())
        if ginf == 0.0:
            # vanished gradient: nothing to predict, counts as gated
            return StepResult(state, False, min_predicted_decrease > 0.0,
                              0.0, 0.0, 0.0, None)
        self.warm = grad.deform.values
        dt0 = cfl_timestep(gtilde, cfg.cfl_factor) if dt is None else dt
        inside = state.region.inside
        q = f1.values * jac.values[..., None]
        area = inside.sum()
        rhs = np.where(inside[..., None], q - q.sum(axis=(0, 1)) / area, 0.0)
        predicted = float((rhs * gtilde).sum()) * dt0
        if predicted < min_predicted_decrease:
            return StepResult(state, False, True, dt0, predicted, ginf, None)
        G_ext = extend_to_narrowband(VectorField(state.levelset.grid, gtilde,
                                                 inside), state.levelset)
        e = self.energy_of(state)
        mean_norm = float(np.hypot(*grad.mean))
        new_state, dt_used = self.try_step(state, e, G_ext.values, dt0,
                                           "deformation", mean_norm, ginf)
        if new_state is not None:
            return StepResult(new_state, True, False, dt_used, predicted,
                              ginf, grad.deform.values)
        # The rasterized region releases the boundary-flux payoff only when
        # the front sweeps past pixel centers, while the jacobian-weighted
        # residual under the front rises from the first sub-pixel of motion.
        # A single CFL step can then sit uphill even though the direction
        # descends. Chain a few sub-steps along the same field and judge the
        # chain's net change as one accepted step.
        chain = state
        for n in range(1, 9):
            cand = self.apply_step(chain, G_ext.values, dt0)
            if cand is None:
                break
            chain = cand
            e_new = self.energy_of(chain)
            if e_new < e:
                self.accept(chain, "deformation", mean_norm, ginf, n * dt0)
                return StepResult(chain, True, False, n * dt0, predicted,
                                  ginf, grad.deform.values)
        return StepResult(state, False, False, dt0, predicted, ginf,
                          grad.deform.values)


def translation_phase(state, template_a, image, beta_o, cfg=DescentConfig(),
                      occlusion_update=None):
    eng = _Engine(template_a, image, beta_o, cfg, occlusion_update)
    return eng.translation(state.copy())


def deformation_step(state, template_a, image, beta_o, cfg=DescentConfig(),
                     occlusion_update=None, dt=None, gradient_scale=1.0):
    eng = _Engine(template_a, image, beta_o, cfg, occlusion_update)
    return eng.deformation(state.copy(), dt=dt, gradient_scale=gradient_scale)


def descend(template_mask, template_a, image, beta_o, cfg=DescentConfig(),
            occlusion_update=None):
    """Alternate the translation phase with single deformation steps until
    the energy plateaus.

    A deformation step whose first-order predicted decrease falls below
    energy_rel_tol times the initial energy is treated as converged and
    skipped; this keeps pure-translation instances from burning steps on
    interpolation noise.
    """
    if template_mask.area < 4:
        raise TrackingFailureError("template region degenerate (< 4 px)")
    state = init_state(template_mask, template_a, sd_band=cfg.sd_band)
    eng = _Engine(template_a, image, beta_o, cfg, occlusion_update)
    e0 = eng.energy_of(state)
    eng.energies.append(e0)
    eng.note_jacobian(state)
    e_ref = max(abs(e0), 1e-9)
    gate = cfg.energy_rel_tol * e_ref
    deform_steps = 0
    trans_steps = 0
    stop = "max_iters"
    converged = False
    while eng.accepted < cfg.max_iters:
        pres = eng.translation(state)
        state = pres.state
        trans_steps += pres.steps
        if state.region.area < 4:
            raise TrackingFailureError("region collapsed during descent")
        sres = eng.deformation(state, min_predicted_decrease=gate)
        if sres.accepted:
            state = sres.state
            deform_steps += 1
            if state.region.area < 4:
                raise TrackingFailureError("region collapsed during descent")
        else:
            if pres.steps == 0:
                stop = "gated" if sres.gated else "stalled"
                converged = True
                break
        if _plateaued(eng.energies, cfg, e_ref):
            stop = "plateau"
            converged = True
            break
    return DescentResult(state, converged, stop, trans_steps, deform_steps,
                         eng.energies, eng.trace,
                         float(eng.min_jac) if np.isfinite(eng.min_jac) else 1.0)


def _plateaued(energies, cfg, e_ref):
    """Progress over the last stall_window accepted steps measured against
    the initial energy, matching the deformation gate's scale."""
    w = cfg.stall_window
    if len(energies) <= w:
        return False
    e_then, e_now = energies[-1 - w], energies[-1]
    return (e_then - e_now) <= cfg.energy_rel_tol * e_ref


def horn_schunck_step(state, image, gamma, tol=1e-8, max_iter=None):
    """Minimizer of the linearized brightness term plus gamma ||grad v||^2
    over the current region, zero-Neumann, by preconditioned CG.

    Returns the motion field v; driving the shared transport machinery
    with G = -v moves the region along v.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    inside = state.region.inside
    img = image.values
    a = state.warped_radiance.values
    if img.ndim == 2:
        img = img[..., None]
        a = a[..., None]
    H, W = inside.shape
    M = np.zeros((H, W, 2, 2))
    rhs = np.zeros((H, W, 2))
    for c in range(img.shape[2]):
        ga = masked_gradient(a[..., c], inside)
        diff = img[..., c] - a[..., c]
        M[..., 0, 0] += ga[..., 0] ** 2
        M[..., 0, 1] += ga[..., 0] * ga[..., 1]
        M[..., 1, 0] += ga[..., 0] * ga[..., 1]
        M[..., 1, 1] += ga[..., 1] ** 2
        rhs[..., 0] -= diff * ga[..., 0]
        rhs[..., 1] -= diff * ga[..., 1]
    rhs[~inside] = 0.0
    M[~inside] = 0.0
    deg = _degree(inside)
    diag = np.stack([M[..., 0, 0] + gamma * deg,
                     M[..., 1, 1] + gamma * deg], axis=-1)
    diag[diag <= 0] = 1.0

    def matvec(v):
        out = np.einsum("hwij,hwj->hwi", M, v)
        out[..., 0] += gamma * neumann_laplacian(v[..., 0], inside)
        out[..., 1] += gamma * neumann_laplacian(v[..., 1], inside)
        out[~inside] = 0.0
        return out

    bnorm = np.sqrt((rhs * rhs).sum())
    if bnorm == 0:
        return VectorField(state.levelset.grid, np.zeros((H, W, 2)),
                           inside.copy())
    if max_iter is None:
        max_iter = int(10 * np.sqrt(inside.sum()) + 500)
    x = np.zeros((H, W, 2))
    r = rhs.copy()
    z = np.where(inside[..., None], r / diag, 0.0)
    p = z.copy()
    rz = (r * z).sum()
    for _ in range(max_iter):
        res = np.sqrt((r * r).sum())
        if res <= tol * bnorm:
            break
        Ap = matvec(p)
        pAp = (p * Ap).sum()
        if pAp <= 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = np.where(inside[..., None], r / diag, 0.0)
        rz_new = (r * z).sum()
        p = z + (rz_new / rz) * p
        rz = rz_new
    x[~inside] = 0.0
    return VectorField(state.levelset.grid, x, inside.copy())


def horn_schunck_descend(template_mask, template_a, image, gamma,
                         cfg=DescentConfig(), max_steps=200):
    """Baseline tracker: iterate the Horn-Schunck field through the same
    transport machinery (G = -v) with the same halving acceptance. No
    occlusion term; stops on stall or vanishing motion."""
    state = init_state(template_mask, template_a, sd_band=cfg.sd_band)
    eng = _Engine(template_a, image, 0.0, cfg, None)
    e = eng.energy_of(state)
    eng.energies.append(e)
    eng.note_jacobian(state)
    tiny_run = 0
    for _ in range(max_steps):
        v = horn_schunck_step(state, image, gamma)
        vinf = float(np.abs(v.values).max())
        if vinf == 0.0:
            break
        G = VectorField(state.levelset.grid, -v.values, state.region.inside)
        G_ext = extend_to_narrowband(G, state.levelset)
        dt0 = cfl_timestep(G_ext, cfg.cfl_factor)
        new_state, _ = eng.try_step(state, e, G_ext.values, dt0,
                                    "horn_schunck", 0.0, vinf)
        if new_state is None:
            break
        e_new = eng.energies[-1]
        tiny_run = tiny_run + 1 if eng.tiny(e, e_new) else 0
        state = new_state
        e = e_new
        if tiny_run >= 2 or state.region.area < 4:
            break
    return DescentResult(state, True, "baseline", 0, len(eng.energies) - 1,
                         eng.energies, eng.trace,
                         float(eng.min_jac) if np.isfinite(eng.min_jac) else 1.0)
