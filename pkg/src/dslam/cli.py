"""Command line entry points: simulate, run, eval, ablate.

Exit codes
----------
0  success
2  configuration or parse error
3  I/O error (missing files, unreadable sequence directories)
4  pipeline failure (the last-good trajectory is still written)
5  trajectory association failure

Only the declared payload of each command goes to standard output
(simulate: the manifest path; eval: metric=value lines; ablate: the CSV
table). Logs and error messages go to standard error.

The environment variable DSLAM_THREADS caps internal linear-algebra
parallelism; 0 or unset leaves the libraries at their defaults. It is
applied before the numeric libraries load, which is why the heavyweight
imports in this module happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from pathlib import Path

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PIPELINE = 4
EXIT_ASSOCIATION = 5

ABLATION_ROWS = ("a", "b", "c", "d", "e")


def _apply_thread_cap():
    raw = os.environ.get("DSLAM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def _err(msg):
    print(f"dslam: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    from .config import (RunManifest, load_json, pipeline_from_dict,
                         scene_from_dict, scene_to_dict)
    from .sim import export, generate

    doc = load_json(args.config) if args.config else {}
    spec = scene_from_dict(doc)
    if args.seed is not None:
        doc = dict(doc)
        doc["seed"] = args.seed
        spec = scene_from_dict(doc)
    pipe_doc = load_json(args.pipeline_config) if args.pipeline_config else {}
    pipeline_cfg = pipeline_from_dict(pipe_doc)

    out = Path(args.out)
    try:
        gt, provider = generate(spec)
        export(gt, out, provider=provider, pipeline_cfg=pipeline_cfg)
    except OSError as exc:
        raise _IoFailure(str(exc)) from exc

    # Artifact paths are relative to the manifest so the directory digest
    # is identical wherever the sequence lands.
    manifest = RunManifest(
        scene=scene_to_dict(spec),
        pipeline=pipeline_cfg.to_dict(),
        seed=int(spec.seed),
        artifacts={
            "sequence": ".",
            "ground_truth_trajectory": "gt_traj.tum",
            "ground_truth_depth": "gt_depth",
        },
    )
    path = manifest.write(out / "manifest.json")
    print(path)
    return 0


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def _pipeline_config_for_sequence(provider, args):
    """Meta-aware defaults: the exported flow tables replay only for the
    sampling parameters they were generated with, so those come from the
    sequence's own metadata unless explicitly overridden."""
    from .config import load_json, pipeline_from_dict

    doc = {}
    sampling = getattr(provider, "meta", {}).get("sampling", {})
    for src, dst in (("seed", "seed"),
                     ("patches_per_frame", "patches_per_frame"),
                     ("s_d", "s_d"), ("border_px", "border_px")):
        if src in sampling:
            doc[dst] = sampling[src]
    if args.config:
        doc.update(load_json(args.config))
    cfg = pipeline_from_dict(doc)
    if args.no_mask:
        cfg.use_mask = False
    if args.no_prior:
        cfg.use_prior = False
    if args.fixed_weight is not None:
        cfg.use_uncertainty = False
        cfg.fixed_weight = float(args.fixed_weight)
    return cfg.validate()


def _write_run_outputs(pipe, traj, out_path, cfg_hash):
    from .provider import write_raster

    traj.write(out_path, comment=f"config {cfg_hash}")
    diag_path = out_path.with_suffix(out_path.suffix + ".diag.txt")
    lines = [d.report_line() for d in pipe.diagnostics]
    diag_path.write_text("\n".join(lines) + "\n" if lines else "")
    depth_dir = Path(str(out_path) + ".depth")
    depth_dir.mkdir(parents=True, exist_ok=True)
    for fid, raster in pipe.aligned_depths.items():
        write_raster(depth_dir / f"{fid}.dpr", raster, "depth")


def cmd_run(args):
    from .config import config_hash
    from .errors import PipelineError
    from .pipeline import Pipeline
    from .provider import FileProvider

    provider = FileProvider(args.seq)
    cfg = _pipeline_config_for_sequence(provider, args)
    cfg_hash = config_hash(cfg.to_dict())
    out_path = Path(args.out)
    if out_path.parent and not out_path.parent.exists():
        out_path.parent.mkdir(parents=True, exist_ok=True)

    pipe = Pipeline(provider, cfg)
    code = 0
    try:
        traj = pipe.run()
    except PipelineError as exc:
        _err(f"pipeline failed: {exc}")
        traj = exc.trajectory
        code = EXIT_PIPELINE

    _write_run_outputs(pipe, traj, out_path, cfg_hash)
    for d in pipe.diagnostics:
        print(d.scale_line(), file=sys.stderr)

    if args.plot:
        _plot_run(traj, Path(args.seq), out_path)
    return code


def _plot_run(traj, seq_dir, out_path):
    import numpy as np

    from . import plots, tum
    from .evaluation import associate

    gt_path = seq_dir / "gt_traj.tum"
    est_xyz = traj.positions()
    if gt_path.is_file():
        stamps, gt_pos, _ = tum.read_tum(gt_path)
        ei, gi = associate(np.asarray(traj.timestamps()), stamps)
        est_xyz = est_xyz[ei]
        gt_xyz = gt_pos[gi]
    else:
        gt_xyz = est_xyz
    plots.trajectory_overlay(est_xyz, gt_xyz,
                             out_path.with_suffix(".png"),
                             title=out_path.stem)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_matched(est_path, gt_path):
    import numpy as np

    from . import tum
    from .evaluation import associate

    est_stamps, est_pos, est_quat = tum.read_tum(est_path)
    gt_stamps, gt_pos, gt_quat = tum.read_tum(gt_path)
    ei, gi = associate(est_stamps, gt_stamps)
    return ((est_pos[ei], est_quat[ei]), (gt_pos[gi], gt_quat[gi]))


def _eval_trajectory(args):
    from . import tum
    from .errors import AssociationError
    from .evaluation import align_positions, ate_rmse, rpe

    (est_pos, est_quat), (gt_pos, gt_quat) = _load_matched(args.est, args.gt)
    lines = []
    try:
        if args.mode == "ate":
            aligned = align_positions(est_pos, gt_pos, args.align)
            lines.append(("ate_rmse", ate_rmse(aligned, gt_pos)))
        else:
            est_poses = tum.poses_world_to_cam_from_tum(est_pos, est_quat)
            gt_poses = tum.poses_world_to_cam_from_tum(gt_pos, gt_quat)
            rte, rre = rpe(est_poses, gt_poses, mode=args.align)
            lines.append(("rte", rte))
            lines.append(("rre", rre))
    except ValueError as exc:
        raise AssociationError(str(exc)) from exc
    return lines, (est_pos, gt_pos)


def _eval_depth(args):
    import numpy as np

    from .errors import AssociationError
    from .evaluation import depth_metrics
    from .provider import read_raster

    est_dir, gt_dir = Path(args.est), Path(args.gt)
    if not est_dir.is_dir() or not gt_dir.is_dir():
        raise _IoFailure("depth mode expects two raster directories")
    pred_all, gt_all = [], []
    common = 0
    for est_file in sorted(est_dir.glob("*.dpr")):
        gt_file = gt_dir / est_file.name
        if not gt_file.is_file():
            continue
        common += 1
        pred, _ = read_raster(est_file, "depth")
        gt, _ = read_raster(gt_file, "depth")
        pred_all.append(pred.ravel())
        gt_all.append(gt.ravel())
    if not common:
        raise AssociationError("no overlapping depth raster frames")
    pred = np.concatenate(pred_all)
    gt = np.concatenate(gt_all)
    abs_rel, delta, n_valid = depth_metrics(pred, gt,
                                            median_scale=args.median_scale)
    return [("abs_rel", abs_rel), ("delta_125", delta)], (pred, gt)


def cmd_eval(args):
    if args.mode == "depth":
        lines, (pred, gt) = _eval_depth(args)
    else:
        lines, (est_pos, gt_pos) = _eval_trajectory(args)
    for key, value in lines:
        print(f"{key}={value:.9f}")
    if args.plot:
        from . import plots
        if args.mode == "depth":
            import numpy as np

            valid = (pred > 0) & (gt > 0)
            plots.depth_error_hist(pred[valid] / gt[valid], args.plot)
        else:
            from .evaluation import align_positions

            plots.trajectory_overlay(
                align_positions(est_pos, gt_pos, args.align), gt_pos,
                args.plot, title=f"{args.mode} ({args.align})")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def _ablation_config(base_cfg, row):
    import dataclasses

    cfg = dataclasses.replace(base_cfg)
    cfg.use_mask = row in ("c", "d", "e")
    cfg.use_prior = row in ("b", "d", "e")
    cfg.use_uncertainty = row in ("b", "e")
    if row == "d":
        cfg.fixed_weight = 1.0
    return cfg.validate()


def _ablate_one(provider_factory, cfg, gt_path):
    """One pipeline run and its (ate, rte, rre); NaNs on failure."""
    import numpy as np

    from . import tum
    from .errors import DslamError
    from .evaluation import align_positions, associate, ate_rmse, rpe
    from .pipeline import Pipeline

    nan = (math.nan, math.nan, math.nan)
    try:
        pipe = Pipeline(provider_factory(), cfg)
        traj = pipe.run()
        gt_stamps, gt_pos, gt_quat = tum.read_tum(gt_path)
        ei, gi = associate(np.asarray(traj.timestamps()), gt_stamps)
        est_pos = traj.positions()[ei]
        aligned = align_positions(est_pos, gt_pos[gi], "sim3")
        ate = ate_rmse(aligned, gt_pos[gi])
        est_poses = [traj.poses()[i] for i in ei]
        gt_poses = tum.poses_world_to_cam_from_tum(gt_pos[gi], gt_quat[gi])
        rte, rre = rpe(est_poses, gt_poses, mode="sim3")
        return float(ate), float(rte), float(rre)
    except DslamError as exc:
        _err(f"ablation run failed: {exc}")
        return nan


def _ablate_providers(seq_dir, seeds):
    """Per-seed provider factories.

    Without a seed list the exported sequence is replayed as-is. With one,
    the scene is regenerated from the manifest per seed, which only works
    for simulated sequences.
    """
    from .config import read_manifest, scene_from_dict
    from .provider import FileProvider
    from .sim import SyntheticProvider, generate

    if not seeds:
        return [lambda: FileProvider(seq_dir)]
    manifest_path = Path(seq_dir) / "manifest.json"
    if not manifest_path.is_file():
        raise _IoFailure(
            "--seeds needs a simulated sequence with manifest.json")
    manifest = read_manifest(manifest_path)
    factories = []
    for seed in seeds:
        doc = dict(manifest.scene)
        doc["seed"] = int(seed)
        spec = scene_from_dict(doc)
        factories.append(
            lambda s=spec: SyntheticProvider(generate(s)[0]))
    return factories


def cmd_ablate(args):
    import numpy as np

    from . import plots

    seq_dir = Path(args.seq)
    if not seq_dir.is_dir():
        raise _IoFailure(f"sequence directory {seq_dir} does not exist")
    gt_path = seq_dir / "gt_traj.tum"
    if not gt_path.is_file():
        raise _IoFailure(f"{gt_path} is required for ablation scoring")

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else []
    factories = _ablate_providers(seq_dir, seeds)

    class _Args:
        config = args.config
        no_mask = no_prior = False
        fixed_weight = None

    from .provider import FileProvider
    probe = FileProvider(seq_dir)
    base_cfg = _pipeline_config_for_sequence(probe, _Args)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    any_success = False
    for row in ABLATION_ROWS:
        cfg = _ablation_config(base_cfg, row)
        runs = [_ablate_one(f, cfg, gt_path) for f in factories]
        arr = np.array(runs, dtype=float)
        finite = np.isfinite(arr).all(axis=1)
        if finite.any():
            ate, rte, rre = np.median(arr[finite], axis=0)
            any_success = True
        else:
            ate = rte = rre = math.nan
        rows.append((row, {"ate_rmse": ate, "rte": rte, "rre": rre}))

    csv_lines = ["config,ate_rmse,rte,rre"]
    for label, m in rows:
        csv_lines.append(
            f"{label},{m['ate_rmse']:.9g},{m['rte']:.9g},{m['rre']:.9g}")
    csv_text = "\n".join(csv_lines) + "\n"
    (out_dir / "ablation.csv").write_text(csv_text)
    plots.ablation_bars(rows, out_dir / "ablation_ate.png")
    sys.stdout.write(csv_text)
    return 0 if any_success else EXIT_PIPELINE


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------

class _IoFailure(Exception):
    pass


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dslam",
        description="Sliding-window bundle adjustment for dynamic scenes "
                    "with dense depth priors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic sequence")
    p.add_argument("--config", help="scene config JSON")
    p.add_argument("--pipeline-config",
                   help="pipeline config JSON baked into the exported flows")
    p.add_argument("--out", required=True, help="output sequence directory")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("run", help="run the pipeline on a sequence directory")
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output trajectory (.tum)")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--no-mask", action="store_true",
                   help="sample patches without the motion mask")
    p.add_argument("--no-prior", action="store_true",
                   help="disable the depth prior term")
    p.add_argument("--fixed-weight", type=float,
                   help="use this constant prior weight instead of the "
                        "uncertainty schedule")
    p.add_argument("--plot", action="store_true",
                   help="write a trajectory figure next to the output")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("eval", help="score a trajectory or depth estimate")
    p.add_argument("--est", required=True, help="estimate (.tum or raster dir)")
    p.add_argument("--gt", required=True, help="reference (.tum or raster dir)")
    p.add_argument("--mode", choices=("ate", "rpe", "depth"), default="ate")
    p.add_argument("--align", choices=("sim3", "se3"), default="sim3")
    p.add_argument("--median-scale", action="store_true",
                   help="depth mode: apply per-sequence median scale")
    p.add_argument("--plot", help="write a figure to this path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="run the five-way ablation grid")
    p.add_argument("--seq", required=True, help="sequence directory")
    p.add_argument("--out", required=True, help="output report directory")
    p.add_argument("--config", help="base pipeline config JSON")
    p.add_argument("--seeds",
                   help="comma-separated scene seeds (simulated sequences)")
    p.set_defaults(handler=cmd_ablate)

    return parser


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (AssociationError, ConfigError, DslamError,
                         ProviderLookupError, RasterFormatError,
                         TrajectoryParseError)

    try:
        return args.handler(args)
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except TrajectoryParseError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except AssociationError as exc:
        _err(str(exc))
        return EXIT_ASSOCIATION
    except (ProviderLookupError, RasterFormatError, _IoFailure) as exc:
        _err(str(exc))
        return EXIT_IO
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    except DslamError as exc:
        _err(str(exc))
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
