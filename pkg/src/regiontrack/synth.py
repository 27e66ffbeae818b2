"""Seeded synthetic scenes with exact ground truth.

Textures are finite sums of oriented cosines evaluated analytically at
warped coordinates, so frames carry no resampling error and the true
warps, masks, occlusions and displacement fields are known in closed
form. Object motion is affine (drift + scale/rotation/shear), inverted
exactly; the local-wiggle pair adds a Gaussian bump inverted by fixed
point iteration (contractive for bump slope < 1).
"""

from dataclasses import dataclass, field

import numpy as np

from .fields import Grid2D, RegionMask, ScalarField, pixel_centers


@dataclass
class Texture:
    base: float
    freq: np.ndarray  # (K, 2) angular frequency vectors (row, col)
    phase: np.ndarray  # (K,)
    amp: np.ndarray  # (K,)

    def __call__(self, pts):
        vals = np.full(pts.shape[:-1], self.base)
        for k in range(len(self.amp)):
            vals = vals + self.amp[k] * np.cos(
                pts[..., 0] * self.freq[k, 0] + pts[..., 1] * self.freq[k, 1]
                + self.phase[k])
        return vals


def make_texture(seed, base=130.0, bands=((6, 14.0, 22.0, 11.0),)):
    """Texture with `n` components per (n, lambda_min, lambda_max, amp) band."""
    rng = np.random.default_rng(seed)
    freqs, phases, amps = [], [], []
    for n, lo, hi, amp in bands:
        for _ in range(n):
            lam = rng.uniform(lo, hi)
            theta = rng.uniform(0, 2 * np.pi)
            k = 2 * np.pi / lam
            freqs.append((k * np.sin(theta), k * np.cos(theta)))
            phases.append(rng.uniform(0, 2 * np.pi))
            amps.append(amp * rng.uniform(0.7, 1.3))
    return Texture(base, np.array(freqs), np.array(phases), np.array(amps))


@dataclass
class Blob:
    center: np.ndarray  # (row, col)
    r0: float
    wave3: float = 0.07
    wave2: float = 0.05
    phi3: float = 0.0
    phi2: float = 0.0

    def contains(self, pts):
        d = pts - self.center
        rad = np.hypot(d[..., 0], d[..., 1])
        theta = np.arctan2(d[..., 0], d[..., 1])
        r = self.r0 * (1.0 + self.wave3 * np.sin(3 * theta + self.phi3)
                       + self.wave2 * np.cos(2 * theta + self.phi2))
        return rad <= r


def _compose(grid, obj_mask, tex_at, bg_vals, stripe=None, stripe_value=240.0,
             noise=0.0, rng=None):
    vals = np.where(obj_mask, tex_at, bg_vals)
    if stripe is not None:
        vals = np.where(stripe, stripe_value, vals)
    if noise > 0:
        vals = vals + rng.normal(0.0, noise, size=vals.shape)
    return ScalarField(grid, np.clip(vals, 0.0, 255.0))


@dataclass
class SynthPair:
    grid: Grid2D
    frame0: ScalarField
    frame1: ScalarField
    mask0: RegionMask
    mask1: RegionMask  # truth visible region in frame1
    occlusion1: RegionMask  # truth occluded object part in frame1
    disocclusion1: RegionMask  # truth newly visible part in frame1
    displacement: np.ndarray | None  # true x - W^{-1}(x) on mask1


def _empty(grid):
    return RegionMask(grid, np.zeros(grid.shape, dtype=bool))


def _background(grid, seed, base=38.0, amp=7.0):
    tex = make_texture(seed + 101, base=base, bands=((4, 18.0, 30.0, amp),))
    return tex(pixel_centers(grid))


def pure_shift(seed=0, size=96, radius=30.0, shift=(5, 3), noise=0.0):
    """Integer rigid shift of a textured blob over a darker background."""
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = np.array([size / 2.0 - 2.0, size / 2.0 - 2.0])
    blob = Blob(c, radius, phi3=rng.uniform(0, 2 * np.pi),
                phi2=rng.uniform(0, 2 * np.pi))
    tex = make_texture(seed, base=135.0, bands=((7, 14.0, 22.0, 12.0),))
    bg = _background(grid, seed)
    s = np.array(shift, dtype=float)

    m0 = blob.contains(pts)
    m1 = blob.contains(pts - s)
    f0 = _compose(grid, m0, tex(pts), bg, noise=noise, rng=rng)
    f1 = _compose(grid, m1, tex(pts - s), bg, noise=noise, rng=rng)
    disp = np.where(m1[..., None], s, 0.0)
    return SynthPair(grid, f0, f1, RegionMask(grid, m0), RegionMask(grid, m1),
                     _empty(grid), _empty(grid), disp)


def shift_wiggle(seed=0, size=96, radius=30.0, shift=(5, 3), bump_amp=-5.0,
                 bump_sigma=8.0, noise=0.0):
    """Shift plus a localized dent at the blob boundary.

    Forward warp W(y) = y + s + A exp(-|y - b|^2 / (2 sig^2)) u with u the
    outward radial direction at b; inverted by fixed point iteration. The
    default dent (A < 0) pulls the boundary inward, leaving region pixels
    over background where the residual drives the deformation phase; an
    outward bulge would be newly exposed matter, which the region energy
    cannot see and the dis-occlusion stage exists to recover.
    """
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = np.array([size / 2.0 - 2.0, size / 2.0 - 2.0])
    blob = Blob(c, radius, phi3=rng.uniform(0, 2 * np.pi),
                phi2=rng.uniform(0, 2 * np.pi))
    tex = make_texture(seed, base=135.0,
                       bands=((7, 14.0, 22.0, 11.0), (5, 4.5, 6.5, 4.0)))
    bg = _background(grid, seed)
    s = np.array(shift, dtype=float)
    ang = rng.uniform(0, 2 * np.pi)
    u = np.array([np.sin(ang), np.cos(ang)])
    b = c + radius * 0.95 * u

    def bump(y):
        d = y - b
        w = np.exp(-(d[..., 0] ** 2 + d[..., 1] ** 2) / (2 * bump_sigma ** 2))
        return bump_amp * w[..., None] * u

    def w_inv(x):
        z = x - s
        for _ in range(30):
            z = x - s - bump(z)
        return z

    m0 = blob.contains(pts)
    back = w_inv(pts)
    m1 = blob.contains(back)
    f0 = _compose(grid, m0, tex(pts), bg, noise=noise, rng=rng)
    f1 = _compose(grid, m1, tex(back), bg, noise=noise, rng=rng)
    disp = np.where(m1[..., None], pts - back, 0.0)
    return SynthPair(grid, f0, f1, RegionMask(grid, m0), RegionMask(grid, m1),
                     _empty(grid), _empty(grid), disp)


def occlusion_pair(seed=0, size=192, half_width=60.0, cover_rows=60.0,
                   paint=0.0, tex_amp=3.0, noise=0.0):
    """Static rounded square; a flat paint covers its top rows in frame 1.

    The paint is a half plane, so only one smoothed residual ramp falls
    inside the region. Truth occlusion = object rows above the cut. The
    default texture contrast is mild: the covered pixels then share a
    residual plateau whose spread stays well inside the plateau height,
    so any cut through the upper residual range separates them cleanly.
    """
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = size / 2.0
    d = np.maximum(np.abs(pts[..., 0] - c), np.abs(pts[..., 1] - c))
    rr = np.hypot(pts[..., 0] - c, pts[..., 1] - c)
    m0 = (d <= half_width) & (rr <= half_width * 1.25)
    tex = make_texture(seed, base=145.0, bands=((5, 16.0, 26.0, tex_amp),))
    bg = _background(grid, seed)
    top = np.nonzero(m0.any(axis=1))[0].min()
    cut = top + cover_rows
    stripe = pts[..., 0] < cut
    f0 = _compose(grid, m0, tex(pts), bg, noise=noise, rng=rng)
    f1 = _compose(grid, m0, tex(pts), bg, stripe=stripe, stripe_value=paint,
                  noise=noise, rng=rng)
    occ = m0 & stripe
    vis = m0 & ~stripe
    disp = np.zeros(pts.shape)
    return SynthPair(grid, f0, f1, RegionMask(grid, m0),
                     RegionMask(grid, vis), RegionMask(grid, occ),
                     _empty(grid), disp)


def growth_pair(seed=0, size=128, radius=40.0, grow=10.0, noise=0.0):
    """Textured disk that gains an outer annulus; truth dis-occlusion is
    the annulus."""
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = np.array([size / 2.0, size / 2.0])
    rr = np.hypot(pts[..., 0] - c[0], pts[..., 1] - c[1])
    m0 = rr <= radius
    m1 = rr <= radius + grow
    tex = make_texture(seed, base=150.0, bands=((7, 12.0, 20.0, 13.0),))
    bg = _background(grid, seed)
    f0 = _compose(grid, m0, tex(pts), bg, noise=noise, rng=rng)
    f1 = _compose(grid, m1, tex(pts), bg, noise=noise, rng=rng)
    disp = np.zeros(pts.shape)
    return SynthPair(grid, f0, f1, RegionMask(grid, m0), RegionMask(grid, m1),
                     _empty(grid), RegionMask(grid, m1 & ~m0), disp)


def cavity_pair(seed=0, size=192, radius=60.0, bulb_radius=23.0,
                bulb_offset=25.0, throat_width=12.0, noise=0.0):
    """Static disk with a pocket that refills: frame 0 shows the disk with
    a bulb cavity joined to the boundary by a narrow throat, frame 1 the
    full disk. Truth dis-occlusion is the cavity.

    The pocket keeps every refilled pixel within bulb_radius of the
    surviving region while exposing only the throat mouth to background,
    so the smoothed likelihood ramp is confined to that short stretch of
    the cavity rim.
    """
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = np.array([size / 2.0, size / 2.0])
    rr = np.hypot(pts[..., 0] - c[0], pts[..., 1] - c[1])
    disk = rr <= radius
    bc = c + np.array([0.0, bulb_offset])
    bulb = np.hypot(pts[..., 0] - bc[0], pts[..., 1] - bc[1]) <= bulb_radius
    throat = (np.abs(pts[..., 0] - c[0]) <= throat_width / 2.0) \
        & (pts[..., 1] >= bc[1])
    cavity = (bulb | throat) & disk
    m0 = disk & ~cavity
    tex = make_texture(seed, base=150.0, bands=((7, 12.0, 20.0, 13.0),))
    bg = _background(grid, seed)
    f0 = _compose(grid, m0, tex(pts), bg, noise=noise, rng=rng)
    f1 = _compose(grid, disk, tex(pts), bg, noise=noise, rng=rng)
    disp = np.zeros(pts.shape)
    return SynthPair(grid, f0, f1, RegionMask(grid, m0),
                     RegionMask(grid, disk), _empty(grid),
                     RegionMask(grid, cavity), disp)


@dataclass
class SynthSequence:
    grid: Grid2D
    frames: list
    visible_masks: list  # truth region per frame (object minus occluder)
    object_masks: list  # full object per frame
    occlusions: list  # object & occluder per frame
    reexposed: list  # visible now, occluded in the previous frame
    stripe_masks: list = field(default_factory=list)


def sequence(seed=0, n_frames=20, size=256, radius=80.0, drift=(0.8, 1.1),
             stripe_width=18.0, stripe_speed=16.0, stripe_start=-40.0,
             stripe_value=8.0, noise=0.0):
    """Drifting, slowly deforming blob with a dark stripe sweeping across.

    The object warp is affine: drift plus gentle time-varying scale,
    rotation and shear around the blob center (1-2 px per frame at the
    boundary). The stripe is a vertical bar moving right at stripe_speed,
    painted over everything it covers. Sized so the fixed smoothing and
    band widths of the occlusion stages are small against the object: the
    smoothed residual threshold trims a boundary rind of order sigma each
    frame, a cost that scales with perimeter while the region scales with
    area. The stripe sits below the background range rather than above
    the texture: covered pixels then share a residual scale the relative
    occlusion threshold captures whole, and an occluder near the
    background mode keeps reading as background even after a few missed
    pixels blend into the radiance. The stripe stays narrower than the
    dis-occlusion band depth: when a covered swath plus its smoothing
    spill is removed whole, pixels re-exposed at its trailing edge must
    still lie within the band of the surviving side to be reclaimable.
    """
    grid = Grid2D(size, size)
    rng = np.random.default_rng(seed)
    pts = pixel_centers(grid)
    c = np.array([size / 2.0 + 6.0, size / 2.0 - 14.0])
    blob = Blob(c, radius, phi3=rng.uniform(0, 2 * np.pi),
                phi2=rng.uniform(0, 2 * np.pi))
    tex = make_texture(seed, base=150.0, bands=((8, 16.0, 26.0, 12.0),))
    bg = _background(grid, seed)
    v = np.array(drift, dtype=float)

    def affine(t):
        sc = 1.0 + 0.006 * np.sin(2 * np.pi * t / 17.0)
        th = 0.025 * np.sin(2 * np.pi * t / 23.0 + 0.7)
        sh = 0.012 * np.sin(2 * np.pi * t / 13.0 + 1.9)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        S = np.array([[1.0, sh], [0.0, 1.0]])
        return sc * (R @ S)

    frames, vis, objs, occs, reex, stripes = [], [], [], [], [], []
    prev_occ = None
    for t in range(n_frames):
        A = affine(t)
        Ainv = np.linalg.inv(A)
        shift_t = c + t * v
        back = (pts - shift_t) @ Ainv.T + c
        m_obj = blob.contains(back)
        left = stripe_start + t * stripe_speed
        stripe = (pts[..., 1] >= left) & (pts[..., 1] < left + stripe_width)
        frames.append(_compose(grid, m_obj, tex(back), bg, stripe=stripe,
                               stripe_value=stripe_value, noise=noise,
                               rng=rng))
        m_vis = m_obj & ~stripe
        m_occ = m_obj & stripe
        vis.append(RegionMask(grid, m_vis))
        objs.append(RegionMask(grid, m_obj))
        occs.append(RegionMask(grid, m_occ))
        stripes.append(RegionMask(grid, stripe))
        if prev_occ is None:
            reex.append(_empty(grid))
        else:
            reex.append(RegionMask(grid, m_vis & prev_occ))
        prev_occ = m_occ
    return SynthSequence(grid, frames, vis, objs, occs, reex, stripes)


_KINDS = {
    "shift": pure_shift,
    "wiggle": shift_wiggle,
    "occlusion": occlusion_pair,
    "growth": growth_pair,
    "cavity": cavity_pair,
    "sequence": sequence,
}


def generate(script):
    """Build a synthetic instance from a script dict: {"kind": ..., params}."""
    if "kind" not in script:
        raise ValueError("script needs a 'kind' entry")
    kind = script["kind"]
    if kind not in _KINDS:
        raise ValueError("unknown synthetic kind %r (have: %s)"
                         % (kind, ", ".join(sorted(_KINDS))))
    params = {k: v for k, v in script.items() if k != "kind"}
    try:
        return _KINDS[kind](**params)
    except TypeError as err:
        raise ValueError("bad parameters for %r: %s" % (kind, err)) from None
