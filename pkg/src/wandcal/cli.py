"""Command-line interface: calibrate, simulate, reconstruct, evaluate."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import bundle, io, synth
from .errors import CalibrationError, InsufficientDataError, ParseError
from .multi_calib import MultiConfig, calibrate
from .optim import LmConfig
from .pair_calib import PairConfig

log = logging.getLogger("wandcal")

EXIT_OK = 0

PANELS = [
    ("a", "focal", "focal length k1 (mm)"),
    ("b", "u0", "principal point u0 (px)"),
    ("c", "v0", "principal point v0 (px)"),
    ("d", "E_r", "rotation error E_r (deg)"),
    ("e", "E_t", "translation error E_t"),
    ("f", "E_RMS", "RMS reprojection error (px)"),
]
SWEEP_LABEL = {"noise": "noise sigma (px)", "focal": "true focal length (mm)",
               "principal": "true principal point u0 (px), v0 = u0 - 80"}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> MultiConfig:
    lm = LmConfig(jacobian=args.jacobian, max_iterations=args.max_iterations)
    pair = PairConfig(min_frames=args.min_frames, distance_lm=lm, bundle_lm=lm,
                      pixel_pitch=args.pixel_pitch, outlier_threshold=args.threshold, jacobian=args.jacobian)
    return MultiConfig(reference=args.reference, pair=pair, global_lm=lm, outlier_threshold=args.threshold)


def cmd_calibrate(args) -> int:
    metas, wand, table = io.load_observations(args.obs)
    table.check_bounds(metas)
    cfg = _config(args)
    result = calibrate(table, wand, metas, cfg)
    echo = {"reference": args.reference, "min_frames": args.min_frames, "pixel_pitch": args.pixel_pitch,
            "threshold": args.threshold, "jacobian": args.jacobian, "max_iterations": args.max_iterations}
    io.write_json(args.out, io.result_to_dict(result, metas, echo))
    _print_summary(result)
    return EXIT_OK


def _print_summary(result):
    print(f"{'camera':>6} {'E_RMS px':>10} {'rodrigues':>32} {'t mm':>36}  path")
    for c in result.camera_ids:
        p = result.poses[c]
        r = " ".join(f"{v:9.5f}" for v in p.r)
        t = " ".join(f"{v:11.3f}" for v in p.t)
        path = "-".join(str(v) for v in result.tree.paths[c])
        print(f"{c:>6} {result.e_rms.get(c, float('nan')):>10.4f} {r:>32} {t:>36}  {path}")
    print(f"frames used: {len(result.frames_used)}, rejected: {len(result.frames_rejected)}"
          + (f" {list(map(int, result.frames_rejected))}" if len(result.frames_rejected) else ""))
    print(f"D_RMS: {result.d_rms:.4f} mm")


def cmd_simulate(args) -> int:
    if args.sweep:
        return _simulate_sweep(args)
    if args.rig == "reference":
        rig = synth.reference_rig(args.cameras, focal=args.focal, nominal_focal=args.nominal_focal)
        volume = ((-350.0, -350.0, 700.0), (350.0, 350.0, 1000.0))
    else:
        rig = synth.room_rig(args.cameras, args.lens)
        volume = ((-1500.0,) * 3, (1500.0,) * 3)
    min_cams = None if args.cameras == 2 and args.min_cameras is None else (args.min_cameras or 2)
    scenario = synth.SimScenario(rig, synth.REFERENCE_WAND, volume, args.frames, args.noise_px, args.seed, min_cams)
    table, truth = synth.generate(scenario)
    io.save_observations(args.out, rig.metas, synth.REFERENCE_WAND, table)
    if args.truth:
        io.write_json(args.truth, io.calibration_to_dict(0, rig.metas, rig.intrinsics, rig.poses,
                                                         {"source": "simulation", "seed": args.seed,
                                                          "noise_px": args.noise_px}))
    print(f"wrote {len(table)} frames for {len(rig.camera_ids)} cameras to {args.out}")
    return EXIT_OK


def _simulate_sweep(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cams = (2, 3) if args.cameras is None else (args.cameras,)
    rows = synth.run_sweep(args.sweep, args.repeats, cams, args.seed, args.frames, jobs=args.jobs)
    agg = synth.aggregate_sweep(rows)
    _write_csv(out / f"sweep_{args.sweep}.csv", agg)
    _write_csv(out / f"sweep_{args.sweep}_raw.csv", rows)
    for name in _plot_sweep(agg, args.sweep, out):
        print(f"wrote {name}")
    failed = sum(1 for r in rows if r["error"])
    print(f"wrote {out / f'sweep_{args.sweep}.csv'} ({len(agg)} rows, {failed} failed runs)")
    return EXIT_OK


def _write_csv(path, rows):
    fields = []
    for row in rows:
        fields += [k for k in row if k not in fields]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (format(v, ".10g") if isinstance(v, float) else v) for k, v in row.items()})


def _plot_sweep(agg, kind, out: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "wandcal"
    names = []
    for tag, key, label in PANELS:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        series = sorted({(r["cameras"], r["camera"]) for r in agg if r["camera"] >= 0})
        for n, cam in series:
            pts = [(r["value"], r[key]) for r in agg if r["cameras"] == n and r["camera"] == cam]
            xs, ys = zip(*sorted(pts))
            if not np.any(np.isfinite(ys)):
                continue
            ax.plot(xs, ys, marker="o", ms=3, label=f"{n}cams cam{cam}")
        ax.set_xlabel(SWEEP_LABEL[kind])
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        name = out / f"sweep_{kind}_{tag}_{key}.svg"
        fig.savefig(name, format="svg", metadata={"Date": None})
        plt.close(fig)
        names.append(name)
    return names


def cmd_reconstruct(args) -> int:
    reference, cal_metas, intrinsics, poses, _ = io.load_calibration(args.calib)
    metas, wand, table = io.load_observations(args.obs)
    missing = sorted(set(table.camera_ids) - set(intrinsics))
    if missing:
        raise ParseError(f"cameras {missing} are not in the calibration file", stage="reconstruct")
    seen = np.count_nonzero(table.visible[:, :, [0, 2]].all(axis=2), axis=1)
    for fid in table.frame_ids[seen < 2]:
        log.warning("frame %d: wand endpoints seen by fewer than two cameras, skipped", fid)
    usable = table.select_frames(seen >= 2)
    if len(usable) == 0:
        raise InsufficientDataError("no frame is seen by two cameras", stage="reconstruct")
    P = bundle.triangulate_table(intrinsics, poses, usable)
    lengths = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
    value = synth.d_rms(wand, P[:, 0], P[:, 2])
    doc = {
        "schema_version": io.SCHEMA_VERSION,
        "reference": reference,
        "points": [{"frame": int(f), "A_mm": P[i, 0].tolist(), "B_mm": P[i, 1].tolist(),
                    "C_mm": P[i, 2].tolist(), "length_mm": float(lengths[i])}
                   for i, f in enumerate(usable.frame_ids)],
        "skipped_frames": [int(f) for f in table.frame_ids[seen < 2]],
        "d_rms_mm": value,
        "d_rms_relative": value / wand.L,
    }
    io.write_json(args.out, doc)
    print(f"reconstructed {len(usable)} frames; D_RMS = {value:.4f} mm ({100 * value / wand.L:.3f} % of L)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, _, intrinsics, poses, diag = io.load_calibration(args.calib)
    ref, metas, t_intr, t_poses, _ = io.load_calibration(args.truth)
    missing = sorted(set(t_intr) - set(intrinsics))
    if missing:
        raise ParseError(f"cameras {missing} are missing from the calibration", stage="evaluate")
    rig = synth.Rig(metas, t_intr, t_poses)
    e_rms = {int(k): v for k, v in diag.get("e_rms_px", {}).items()}
    report = synth.compare(rig, intrinsics, poses, e_rms, diag.get("d_rms_mm"))
    doc = report.as_dict()
    if args.out:
        io.write_json(args.out, doc)
    print(f"{'camera':>6} {'E_r deg':>12} {'E_t':>12} {'E_RMS px':>10} {'|dk1| mm':>10} {'|du0|':>8} {'|dv0|':>8}")
    for c in sorted(t_intr):
        ie = report.intrinsic_errors.get(c, {})
        print(f"{c:>6} {report.rotation_error.get(c, float('nan')):>12.3e} "
              f"{report.translation_error.get(c, float('nan')):>12.3e} {e_rms.get(c, float('nan')):>10.4f} "
              f"{ie.get('k1', float('nan')):>10.2e} {ie.get('u0', float('nan')):>8.3f} {ie.get('v0', float('nan')):>8.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ParseError(message, stage="arguments")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wandcal", description="Calibrate cameras from a three-marker wand.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", help="calibrate a rig from an observation file")
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", type=int, default=0)
    p.add_argument("--min-frames", type=int, default=30)
    p.add_argument("--pixel-pitch", choices=("vertical", "all", "none"), default="vertical")
    p.add_argument("--threshold", type=float, default=0.01, help="relative wand-length outlier threshold")
    p.add_argument("--jacobian", choices=("analytic", "numeric"), default="analytic")
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--config")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="write synthetic observations or run a parameter sweep")
    p.add_argument("--cameras", type=int, choices=(2, 3, 4, 5, 6), default=None)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--noise-px", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rig", choices=("reference", "room"), default="reference")
    p.add_argument("--lens", choices=tuple(synth.LENSES), default="fisheye")
    p.add_argument("--focal", type=float, default=2.0, help="true focal length (reference rig)")
    p.add_argument("--nominal-focal", type=float, default=1.8, help="datasheet focal length (reference rig)")
    p.add_argument("--min-cameras", type=int)
    p.add_argument("--out", default="observations.json")
    p.add_argument("--truth", help="also write the ground truth as a calibration file")
    p.add_argument("--sweep", choices=tuple(synth.SWEEPS))
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out-dir", default="sweep")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--config")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="triangulate wand placements with a calibration")
    p.add_argument("--calib", required=True)
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="compare a calibration with ground truth")
    p.add_argument("--calib", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--config")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _apply_config(parser, argv, args):
    """Re-parse with keys from --config as defaults so explicit flags still win."""
    doc = io.read_json(args.config)
    if not isinstance(doc, dict):
        raise ParseError("config file must hold a JSON object", stage="arguments")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(k for k in (key.replace("-", "_") for key in doc) if k not in known)
    if unknown:
        raise ParseError(f"unknown config keys: {unknown}", stage="arguments")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in doc.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            args = _apply_config(parser, argv, args)
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "simulate" and args.cameras is None and not args.sweep:
            args.cameras = 2
        return args.func(args)
    except CalibrationError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
