"""Frame/mask I/O, rendering, evaluation and run configuration.

Frames must come from lossless rasters (lossy compression would corrupt
the residual statistics the occlusion threshold is computed from).
Channel values are scaled to [0, 255] floats regardless of bit depth.
"""

import csv
import glob
import os
from dataclasses import dataclass, fields as dc_fields, field

import numpy as np
from PIL import Image
from scipy import ndimage

from .descent import DescentConfig, Penalty
from .disocclusion import DisocclusionParams, likelihood_map
from .fields import RegionMask, ScalarField, gaussian_smooth_on_region
from .occlusion import residual
from .tracker import TrackerConfig, match

_LOSSLESS = {"PNG", "BMP", "TIFF", "PPM", "PGM", "PBM", "PNM"}
_FRAME_EXTS = (".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".pbm")


class DataError(ValueError):
    """Bad input data: missing files, format or dimension problems."""


def _open_raster(path):
    if not os.path.exists(path):
        raise DataError("no such file: %s" % path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as err:
        raise DataError("cannot read %s: %s" % (path, err)) from None
    if img.format and img.format.upper() not in _LOSSLESS:
        raise DataError("%s: %s is not a lossless raster format"
                        % (path, img.format))
    return img


def _frame_array(img, path):
    mode = img.mode
    if mode == "P":
        img = img.convert("RGB")
        mode = "RGB"
    if mode == "L":
        return np.asarray(img, dtype=float)
    if mode in ("I", "I;16", "I;16B", "I;16L"):
        arr = np.asarray(img, dtype=float)
        return arr * (255.0 / 65535.0)
    if mode == "RGB":
        return np.asarray(img, dtype=float)
    raise DataError("%s: unsupported image mode %s (need 8/16-bit gray or RGB)"
                    % (path, mode))


def list_frames(spec):
    """Resolve a directory, glob pattern, or explicit list to file paths."""
    if isinstance(spec, (list, tuple)):
        return list(spec)
    if os.path.isdir(spec):
        paths = [os.path.join(spec, f) for f in sorted(os.listdir(spec))
                 if f.lower().endswith(_FRAME_EXTS)]
    else:
        paths = sorted(glob.glob(spec))
    if not paths:
        raise DataError("no frames match %r" % (spec,))
    return paths


def load_frames(spec):
    paths = list_frames(spec)
    out = []
    shape = None
    for p in paths:
        arr = _frame_array(_open_raster(p), p)
        if shape is None:
            shape = arr.shape[:2]
        elif arr.shape[:2] != shape:
            raise DataError("%s: size %s does not match first frame %s"
                            % (p, arr.shape[:2], shape))
        out.append(ScalarField.from_array(arr))
    return out


def load_mask(path):
    img = _open_raster(path)
    if img.mode == "P":
        img = img.convert("L")
    if img.mode not in ("L", "1", "I", "I;16"):
        raise DataError("%s: mask must be single-channel" % path)
    arr = np.asarray(img)
    if img.mode == "1":
        inside = np.asarray(arr, dtype=bool)
    else:
        thresh = 128 * 257 if img.mode in ("I", "I;16") else 128
        inside = arr >= thresh
    return RegionMask.from_array(inside)


def save_mask(path, mask):
    arr = np.where(mask.inside, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_raster(path, values):
    """Write a float image in [0, 255] (gray or RGB) as 8-bit PNG."""
    arr = np.clip(np.round(values), 0, 255).astype(np.uint8)
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(path)


_BOUNDARY_COLOR = np.array([40.0, 255.0, 60.0])
_OCCLUSION_COLOR = np.array([230.0, 50.0, 40.0])
_DISOCCLUSION_COLOR = np.array([60.0, 110.0, 235.0])


def render_overlay(image, mask, occlusion=None, disocclusion=None):
    """Region boundary in green, occlusion tinted red, dis-occlusion blue."""
    vals = image.values
    rgb = np.stack([vals] * 3, axis=-1) if vals.ndim == 2 else vals.copy()
    rgb = rgb.astype(float)

    def tint(m, color):
        rgb[m] = 0.45 * rgb[m] + 0.55 * color

    if occlusion is not None:
        tint(occlusion.inside, _OCCLUSION_COLOR)
    if disocclusion is not None:
        tint(disocclusion.inside, _DISOCCLUSION_COLOR)
    eroded = ndimage.binary_erosion(mask.inside, border_value=0)
    rgb[mask.inside & ~eroded] = _BOUNDARY_COLOR
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def _hsv_to_rgb(h, s, v):
    """Vectorized HSV -> RGB, all components in [0, 1]."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - f * s)
    t = v * (1.0 - (1.0 - f) * s)
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def render_flow(disp):
    """Hue encodes direction, saturation magnitude (per-image max); zero
    motion renders white."""
    vals = disp.values if hasattr(disp, "values") else disp
    mag = np.hypot(vals[..., 0], vals[..., 1])
    if not np.all(np.isfinite(vals)):
        raise ValueError("displacement field must be finite")
    top = mag.max()
    sat = mag / top if top > 0 else np.zeros_like(mag)
    hue = (np.arctan2(vals[..., 0], vals[..., 1]) / (2.0 * np.pi)) % 1.0
    rgb = _hsv_to_rgb(hue, sat, np.ones_like(sat))
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def f_measure(pred, truth):
    """Precision, recall, F of a predicted mask against ground truth."""
    tp = int((pred.inside & truth.inside).sum())
    np_ = pred.area
    nt = truth.area
    p = tp / np_ if np_ > 0 else 0.0
    r = tp / nt if nt > 0 else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (frame, P, R, F)

    def add(self, frame, p, r, f):
        self.rows.append((frame, p, r, f))

    @property
    def mean_f(self):
        return float(np.mean([r[3] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_precision(self):
        return float(np.mean([r[1] for r in self.rows])) if self.rows else 0.0

    @property
    def mean_recall(self):
        return float(np.mean([r[2] for r in self.rows])) if self.rows else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "precision", "recall", "f_measure"])
            for row in self.rows:
                w.writerow(["%d" % row[0]] + ["%.6f" % x for x in row[1:]])
            w.writerow(["mean", "%.6f" % self.mean_precision,
                        "%.6f" % self.mean_recall, "%.6f" % self.mean_f])


def write_energy_csv(path, traces):
    """Energy trace CSV with the fixed column set; traces is a list of row
    lists (one per frame), concatenated."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "phase", "energy", "mean_grad_norm",
                    "deform_grad_inf", "dt"])
        for rows in traces:
            for t in rows:
                w.writerow([t.iter, t.phase, "%.10g" % t.energy,
                            "%.10g" % t.mean_grad_norm,
                            "%.10g" % t.deform_grad_inf, "%.10g" % t.dt])


def pr_sweep(kind, frame0, mask0, frame1, truth, cfg=TrackerConfig(),
             n_samples=25):
    """PR curve of the occlusion (beta_o) or dis-occlusion (beta_d)
    threshold on a frame pair, sweeping over the observed valid range.

    The match stage runs once at its own data-driven threshold; the sweep
    then re-thresholds the converged smoothed residual (beta_o) or the
    band likelihood (beta_d). Returns rows of (threshold, P, R).
    """
    a0 = ScalarField(frame0.grid, frame0.values, mask0.inside.copy())
    result, occ, _ = match(mask0, a0, frame1, cfg)
    state = result.state
    if kind == "beta_o":
        res = residual(state, frame1, cfg.descent.penalty)
        if cfg.occlusion_sigma > 0:
            res = gaussian_smooth_on_region(res, cfg.occlusion_sigma,
                                            state.region)
        vals = res.values[state.region.inside]
        support = state.region.inside
        scores = res.values
    elif kind == "beta_d":
        r_prime = RegionMask(state.region.grid,
                             state.region.inside & ~occ.inside)
        p = likelihood_map(frame1, r_prime, cfg.disocclusion)
        band = p.mask
        if cfg.disocclusion.sigma > 0 and band.any():
            p = gaussian_smooth_on_region(p, cfg.disocclusion.sigma,
                                          RegionMask(r_prime.grid, band))
        vals = p.values[band]
        support = band
        scores = p.values
    else:
        raise ValueError("kind must be 'beta_o' or 'beta_d'")
    lo, hi = float(vals.min()), float(vals.max())
    rows = []
    for thresh in np.linspace(lo, hi, n_samples):
        pred = RegionMask(truth.grid, support & (scores > thresh))
        p_, r_, _ = f_measure(pred, truth)
        rows.append((float(thresh), p_, r_))
    return rows


def write_pr_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in rows:
            w.writerow(["%.8g" % t, "%.6f" % p, "%.6f" % r])


@dataclass
class RunConfig:
    """Everything a batch run needs; defaults match the reference values."""
    frames: str = ""
    mask: str = ""
    out: str = "out"
    truth: str = ""
    sigma: float = 5.0  # residual / likelihood smoothing
    sigma_d: float = 100.0  # dis-occlusion distance weight
    eps: float = 30.0  # dis-occlusion band thickness
    r: float = -1.0  # Parzen window radius; -1 means 3 * eps
    beta_d: float = 0.5
    K_a: float = 0.8
    beta_o_factor: float = 0.3
    window: str = "disk"
    penalty: str = "quadratic"
    eps_rho: float = 0.01
    cfl_factor: float = 0.5
    translation_tol: float = 1e-3
    energy_rel_tol: float = 2e-3
    stall_window: int = 5
    max_iters: int = 2000
    reinit_every: int = 20
    grad_presmooth_sigma: float = 1.0

    def tracker_config(self):
        dis = DisocclusionParams(
            eps=self.eps, r=None if self.r < 0 else self.r,
            sigma_d=self.sigma_d, beta_d=self.beta_d, sigma=self.sigma,
            window=self.window)
        desc = DescentConfig(
            cfl_factor=self.cfl_factor, translation_tol=self.translation_tol,
            energy_rel_tol=self.energy_rel_tol, stall_window=self.stall_window,
            max_iters=self.max_iters, reinit_every=self.reinit_every,
            penalty=Penalty(self.penalty, self.eps_rho),
            grad_presmooth_sigma=self.grad_presmooth_sigma)
        return TrackerConfig(K_a=self.K_a, occlusion_sigma=self.sigma,
                             beta_o_factor=self.beta_o_factor,
                             disocclusion=dis, descent=desc)


def parse_config(text):
    """key=value lines with # comments into a RunConfig."""
    cfg = RunConfig()
    types = {f.name: f.type for f in dc_fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError("config line %d: expected key=value, got %r"
                            % (lineno, raw.strip()))
        key, val = (s.strip() for s in line.split("=", 1))
        if not hasattr(cfg, key):
            raise DataError("config line %d: unknown key %r" % (lineno, key))
        t = types[key]
        try:
            if t in ("int", int):
                setattr(cfg, key, int(val))
            elif t in ("float", float):
                setattr(cfg, key, float(val))
            else:
                setattr(cfg, key, val)
        except ValueError:
            raise DataError("config line %d: bad value %r for %s"
                            % (lineno, val, key)) from None
    return cfg


def serialize_config(cfg):
    lines = []
    for f in dc_fields(RunConfig):
        lines.append("%s=%s" % (f.name, getattr(cfg, f.name)))
    return "\n".join(lines) + "\n"


def load_config(path):
    if not os.path.exists(path):
        raise DataError("no such config file: %s" % path)
    with open(path) as fh:
        return parse_config(fh.read())
