"""Command line interface.

Subcommands: track, match, disocclude, eval, sweep, synth, flowviz.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Parameters may come from a key=value config file (# comments allowed);
flags override the file, which overrides the built-in defaults.
"""

import argparse
import json
import os
import sys
from dataclasses import fields as dc_fields

import numpy as np

from . import io_utils, synth
from .descent import (CflViolationError, TrackingFailureError, displacement)
from .disocclusion import detect, likelihood_map
from .fields import DegenerateRegionError, RegionMask, ScalarField, VectorField
from .io_utils import DataError, RunConfig
from .sobolev import SolverFailureError
from .tracker import match, run


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


_PARAM_HELP = {
    "sigma": "Gaussian smoothing of the residual and the band likelihood",
    "sigma_d": "distance weight of the dis-occlusion prior",
    "eps": "dis-occlusion band thickness in pixels",
    "r": "Parzen window radius (-1 means 3*eps)",
    "beta_d": "dis-occlusion likelihood threshold",
    "K_a": "radiance filter gain in [0,1]",
    "beta_o_factor": "occlusion threshold quantile factor",
    "window": "Parzen window shape: disk or square",
    "penalty": "residual penalty: quadratic or robust",
    "eps_rho": "robust penalty epsilon",
    "cfl_factor": "fraction of the CFL-stable time step",
    "translation_tol": "stop threshold on the mean gradient norm",
    "energy_rel_tol": "relative energy tolerance for stalls and gating",
    "stall_window": "iterations over which a plateau is measured",
    "max_iters": "cap on accepted descent steps",
    "reinit_every": "accepted steps between level set reinitializations",
    "grad_presmooth_sigma": "presmoothing of image gradients in the force",
}


def _add_param_flags(p):
    for f in dc_fields(RunConfig):
        if f.name in ("frames", "mask", "out", "truth"):
            continue
        kind = f.type if isinstance(f.type, type) else {"int": int,
                                                        "float": float,
                                                        "str": str}[f.type]
        p.add_argument("--" + f.name, type=kind, default=None,
                       help="%s (default %s)" % (_PARAM_HELP.get(f.name, ""),
                                                 f.default))
    p.add_argument("--config", default=None,
                   help="key=value config file; flags override it")


def _build_config(args):
    cfg = io_utils.load_config(args.config) if args.config else RunConfig()
    for f in dc_fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    return cfg


def _parser():
    p = _Parser(prog="regiontrack",
                description="Region-based shape and radiance tracking "
                            "with occlusion handling.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("track", parents=[], help="track through a sequence")
    t.add_argument("--frames", required=True,
                   help="frame directory or glob pattern")
    t.add_argument("--mask", required=True, help="initial region mask")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--truth", default=None,
                   help="ground-truth mask directory or glob for eval.csv")
    _add_param_flags(t)

    m = sub.add_parser("match", help="single-pair warp + occlusion stage")
    m.add_argument("--frame0", required=True)
    m.add_argument("--frame1", required=True)
    m.add_argument("--mask", required=True)
    m.add_argument("--out", required=True)
    _add_param_flags(m)

    d = sub.add_parser("disocclude", help="single-pair dis-occlusion stage")
    d.add_argument("--frame1", required=True)
    d.add_argument("--rprime", required=True,
                   help="co-visible region mask in frame1 coordinates")
    d.add_argument("--out", required=True)
    _add_param_flags(d)

    e = sub.add_parser("eval", help="F-measure between mask directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", default=None, help="optional eval.csv path")

    s = sub.add_parser("sweep", help="PR curve over a threshold range")
    s.add_argument("--kind", choices=("beta_o", "beta_d"), required=True)
    s.add_argument("--frame0", required=True)
    s.add_argument("--frame1", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--truth", required=True,
                   help="truth occlusion (beta_o) or dis-occlusion (beta_d)")
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--samples", type=int, default=25)
    _add_param_flags(s)

    g = sub.add_parser("synth", help="generate a synthetic sequence")
    g.add_argument("--script", default=None, help="JSON script file")
    g.add_argument("--kind", default=None,
                   help="shift | wiggle | occlusion | growth | sequence")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    fv = sub.add_parser("flowviz", help="render a displacement field")
    fv.add_argument("--disp", default=None,
                    help=".npy displacement field (H, W, 2)")
    fv.add_argument("--frame0", default=None)
    fv.add_argument("--frame1", default=None)
    fv.add_argument("--mask", default=None)
    fv.add_argument("--out", required=True, help="output PNG path")
    _add_param_flags(fv)
    return p


def _load_pair(args):
    f0 = io_utils.load_frames([args.frame0])[0]
    f1 = io_utils.load_frames([args.frame1])[0]
    if f0.grid != f1.grid:
        raise DataError("frame sizes differ: %s vs %s"
                        % (f0.grid.shape, f1.grid.shape))
    return f0, f1


def _check_grid(mask, frame, what):
    if mask.grid != frame.grid:
        raise DataError("%s size %s does not match frames %s"
                        % (what, mask.grid.shape, frame.grid.shape))


def _cmd_track(args):
    cfg = _build_config(args)
    frames = io_utils.load_frames(args.frames)
    mask0 = io_utils.load_mask(args.mask)
    _check_grid(mask0, frames[0], "initial mask")
    os.makedirs(args.out, exist_ok=True)
    tcfg = cfg.tracker_config()
    states = run(frames, mask0, tcfg)
    traces = []
    for st in states:
        i = st.frame_index
        io_utils.save_mask(os.path.join(args.out, "mask_%04d.png" % i),
                           st.region)
        io_utils.save_mask(os.path.join(args.out, "occlusion_%04d.png" % i),
                           st.last_occlusion)
        io_utils.save_mask(os.path.join(args.out, "disocclusion_%04d.png" % i),
                           st.last_disocclusion)
        overlay = io_utils.render_overlay(frames[i], st.region,
                                          st.last_occlusion,
                                          st.last_disocclusion)
        io_utils.save_raster(os.path.join(args.out, "overlay_%04d.png" % i),
                             overlay)
        if st.last_descent is not None:
            traces.append(st.last_descent.trace)
    io_utils.write_energy_csv(os.path.join(args.out, "energy.csv"), traces)
    if args.truth:
        truth_paths = io_utils.list_frames(args.truth)
        report = io_utils.EvalReport()
        for st in states:
            if st.frame_index < len(truth_paths):
                truth = io_utils.load_mask(truth_paths[st.frame_index])
                p, r, f = io_utils.f_measure(st.region, truth)
                report.add(st.frame_index, p, r, f)
        report.write_csv(os.path.join(args.out, "eval.csv"))
        print("mean F over %d frames: %.4f" % (len(report.rows),
                                               report.mean_f))
    if states.failure is not None:
        raise states.failure
    print("tracked %d frames -> %s" % (len(states), args.out))
    return 0


def _cmd_match(args):
    cfg = _build_config(args)
    f0, f1 = _load_pair(args)
    mask0 = io_utils.load_mask(args.mask)
    _check_grid(mask0, f0, "mask")
    os.makedirs(args.out, exist_ok=True)
    a0 = ScalarField(f0.grid, f0.values, mask0.inside.copy())
    result, occ, beta = match(mask0, a0, f1, cfg.tracker_config())
    st = result.state
    io_utils.save_mask(os.path.join(args.out, "warped_mask.png"), st.region)
    io_utils.save_mask(os.path.join(args.out, "occlusion.png"), occ)
    io_utils.save_raster(os.path.join(args.out, "overlay.png"),
                         io_utils.render_overlay(f1, st.region, occ))
    disp = displacement(st)
    np.save(os.path.join(args.out, "displacement.npy"), disp)
    io_utils.save_raster(os.path.join(args.out, "flow.png"),
                         io_utils.render_flow(disp))
    io_utils.write_energy_csv(os.path.join(args.out, "energy.csv"),
                              [result.trace])
    print("match: %s after %d accepted steps, beta_o=%.4g, energy %.6g"
          % (result.stop_reason, result.translation_steps
             + result.deformation_steps, beta, result.energies[-1]))
    return 0


def _cmd_disocclude(args):
    cfg = _build_config(args)
    f1 = io_utils.load_frames([args.frame1])[0]
    rprime = io_utils.load_mask(args.rprime)
    _check_grid(rprime, f1, "region mask")
    os.makedirs(args.out, exist_ok=True)
    params = cfg.tracker_config().disocclusion
    p = likelihood_map(f1, rprime, params)
    d = detect(f1, rprime, params)
    io_utils.save_raster(os.path.join(args.out, "likelihood.png"),
                         p.values * 255.0)
    io_utils.save_mask(os.path.join(args.out, "disocclusion.png"), d)
    print("dis-occlusion: %d px detected on a %d px band"
          % (d.area, int(p.mask.sum())))
    return 0


def _cmd_eval(args):
    pred_paths = io_utils.list_frames(args.pred)
    truth_paths = io_utils.list_frames(args.truth)
    if len(pred_paths) != len(truth_paths):
        raise DataError("mask counts differ: %d predicted vs %d truth"
                        % (len(pred_paths), len(truth_paths)))
    report = io_utils.EvalReport()
    for i, (pp, tp) in enumerate(zip(pred_paths, truth_paths)):
        p, r, f = io_utils.f_measure(io_utils.load_mask(pp),
                                     io_utils.load_mask(tp))
        report.add(i, p, r, f)
    if args.out:
        report.write_csv(args.out)
    print("frames: %d  mean P: %.4f  mean R: %.4f  mean F: %.4f"
          % (len(report.rows), report.mean_precision, report.mean_recall,
             report.mean_f))
    return 0


def _cmd_sweep(args):
    cfg = _build_config(args)
    f0, f1 = _load_pair(args)
    mask0 = io_utils.load_mask(args.mask)
    truth = io_utils.load_mask(args.truth)
    _check_grid(mask0, f0, "mask")
    rows = io_utils.pr_sweep(args.kind, f0, mask0, f1, truth,
                             cfg.tracker_config(), n_samples=args.samples)
    io_utils.write_pr_csv(args.out, rows)
    mid = [r for i, r in enumerate(rows)
           if 0.25 * (len(rows) - 1) <= i <= 0.75 * (len(rows) - 1)]
    print("sweep %s: %d samples, middle-50%% min P %.3f min R %.3f"
          % (args.kind, len(rows), min(r[1] for r in mid),
             min(r[2] for r in mid)))
    return 0


def _save_mask_dir(out, sub, masks):
    d = os.path.join(out, sub)
    os.makedirs(d, exist_ok=True)
    for i, m in enumerate(masks):
        io_utils.save_mask(os.path.join(d, "%s_%04d.png" % (sub.rstrip("s"), i)), m)


def _cmd_synth(args):
    if args.script:
        if not os.path.exists(args.script):
            raise DataError("no such script: %s" % args.script)
        with open(args.script) as fh:
            try:
                script = json.load(fh)
            except json.JSONDecodeError as err:
                raise DataError("bad JSON in %s: %s" % (args.script, err)) \
                    from None
    elif args.kind:
        script = {"kind": args.kind, "seed": args.seed}
    else:
        raise DataError("need --script or --kind")
    try:
        res = synth.generate(script)
    except ValueError as err:
        raise DataError(str(err)) from None
    os.makedirs(args.out, exist_ok=True)
    fdir = os.path.join(args.out, "frames")
    os.makedirs(fdir, exist_ok=True)
    if isinstance(res, synth.SynthSequence):
        for i, fr in enumerate(res.frames):
            io_utils.save_raster(os.path.join(fdir, "frame_%04d.png" % i),
                                 fr.values)
        _save_mask_dir(args.out, "masks", res.visible_masks)
        _save_mask_dir(args.out, "objects", res.object_masks)
        _save_mask_dir(args.out, "occlusions", res.occlusions)
        _save_mask_dir(args.out, "reexposed", res.reexposed)
        n = len(res.frames)
    else:
        io_utils.save_raster(os.path.join(fdir, "frame_0000.png"),
                             res.frame0.values)
        io_utils.save_raster(os.path.join(fdir, "frame_0001.png"),
                             res.frame1.values)
        _save_mask_dir(args.out, "masks", [res.mask0, res.mask1])
        _save_mask_dir(args.out, "occlusions", [res.occlusion1])
        _save_mask_dir(args.out, "disocclusions", [res.disocclusion1])
        if res.displacement is not None:
            np.save(os.path.join(args.out, "displacement.npy"),
                    res.displacement)
        n = 2
    print("wrote %d frames to %s" % (n, args.out))
    return 0


def _cmd_flowviz(args):
    if args.disp:
        if not os.path.exists(args.disp):
            raise DataError("no such file: %s" % args.disp)
        arr = np.load(args.disp)
        if arr.ndim != 3 or arr.shape[2] != 2:
            raise DataError("displacement must have shape (H, W, 2)")
        disp = VectorField.from_array(arr)
    elif args.frame0 and args.frame1 and args.mask:
        cfg = _build_config(args)
        f0, f1 = _load_pair(args)
        mask0 = io_utils.load_mask(args.mask)
        _check_grid(mask0, f0, "mask")
        a0 = ScalarField(f0.grid, f0.values, mask0.inside.copy())
        result, _, _ = match(mask0, a0, f1, cfg.tracker_config())
        disp = VectorField(f0.grid, displacement(result.state))
    else:
        raise DataError("need --disp, or --frame0/--frame1/--mask")
    io_utils.save_raster(args.out, io_utils.render_flow(disp))
    print("wrote %s" % args.out)
    return 0


_COMMANDS = {
    "track": _cmd_track,
    "match": _cmd_match,
    "disocclude": _cmd_disocclude,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "synth": _cmd_synth,
    "flowviz": _cmd_flowviz,
}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print("error: %s" % err, file=sys.stderr)
        return 1
    except SystemExit as err:  # --help lands here with code 0
        return 0 if err.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except (DataError, DegenerateRegionError, ValueError) as err:
        print("data error: %s" % err, file=sys.stderr)
        return 2
    except OSError as err:
        print("i/o error: %s" % err, file=sys.stderr)
        return 2
    except TrackingFailureError as err:
        where = "" if err.frame is None else " at frame %d" % err.frame
        print("tracking failure%s: %s" % (where, err), file=sys.stderr)
        return 3
    except (SolverFailureError, CflViolationError) as err:
        print("numerical failure: %s" % err, file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
