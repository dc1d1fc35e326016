"""Command-line interface: gen, onboard, estimate, eval, sweep-templates.

Exit codes: 0 success, 2 no pose found, 3 bad input, 4 I/O error. A JSON
config file (--config) mirrors PipelineConfig; explicit flags override it.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import pipeline, stage3, synth
from .errors import CorrposeError, FormatError, NoPoseError
from .geometry import project

EXIT_OK = 0
EXIT_NO_POSE = 2
EXIT_BAD_INPUT = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_BAD_INPUT)


def _load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig.from_file(args.config) if args.config \
        else pipeline.PipelineConfig()
    overrides = {}
    if getattr(args, "top_k", None) is not None:
        overrides["top_k"] = args.top_k
    if getattr(args, "level", None) is not None:
        overrides["template_level"] = args.level
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "noise_sigma", None) is not None:
        from dataclasses import replace
        cfg = replace(cfg, feature=replace(cfg.feature, noise_sigma=args.noise_sigma))
    if overrides:
        from dataclasses import replace
        cfg = replace(cfg, **overrides)
    return cfg


def cmd_gen(args):
    cfg = _load_config(args)
    suite = pipeline.SuiteConfig(
        n_scenes=args.scenes, seed=args.seed if args.seed is not None else 12345,
        mesh_seed=args.mesh_seed, noise_sigma=args.noise_sigma or 0.05)
    mesh = synth.make_blob_mesh(seed=suite.mesh_seed, diameter=suite.diameter)
    poses = synth.sample_viewpoints(cfg.template_level,
                                    cfg.template_radius_factor * mesh.diameter,
                                    target=mesh.centroid)
    scenes = pipeline.generate_suite(mesh, poses, cfg, suite)
    pipeline.write_suite(scenes, mesh, cfg, suite, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_onboard(args):
    cfg = _load_config(args)
    mesh = synth.load_obj(args.mesh)
    tset = pipeline.onboard(mesh, cfg)
    pipeline.write_store(tset, mesh, args.out)
    print(f"onboarded {len(tset)} templates to {args.out}")
    return EXIT_OK


def _wireframe_overlay(obs, mesh, pose, k):
    h, w = obs.mask.shape
    if obs.rgb is not None:
        canvas = obs.rgb.copy()
    else:
        canvas = np.stack([obs.mask.astype(np.uint8) * 160] * 3, axis=-1)
    try:
        px = project(k, pose, mesh.vertices)
    except CorrposeError:
        return canvas
    edges = set()
    for tri in mesh.triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges.add((min(a, b), max(a, b)))
    for a, b in edges:
        x0, y0 = px[a]
        x1, y1 = px[b]
        steps = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
        ts = np.linspace(0.0, 1.0, steps)
        xs = np.round(x0 + ts * (x1 - x0)).astype(int)
        ys = np.round(y0 + ts * (y1 - y0)).astype(int)
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        canvas[ys[ok], xs[ok]] = (0, 255, 0)
    return canvas


def cmd_estimate(args):
    tset, mesh = pipeline.load_store(args.store)
    cfg = pipeline.PipelineConfig.from_file(args.config) if args.config else tset.config
    if args.top_k is not None:
        from dataclasses import replace
        cfg = replace(cfg, top_k=args.top_k)
    import os
    obs_tpl = synth.load_template(os.path.join(args.scene, "obs"))
    seg_path = os.path.join(args.scene, "seg.pgm")
    seg = synth.load_pgm_mask(seg_path) if os.path.exists(seg_path) else obs_tpl.mask
    gt_path = os.path.join(args.scene, "gt.json")
    noise_seed = 0
    if os.path.exists(gt_path):
        with open(gt_path) as f:
            noise_seed = json.load(f).get("noise", {}).get("seed", 0)
    obs = pipeline.Observation(mask=seg, xyz=obs_tpl.xyz, feature_seed=noise_seed)
    est, diag = pipeline.estimate(obs, tset, cfg, keep_maps=True)
    result = est.to_json()
    result["diagnostics"] = {
        "template": diag.template_index,
        "template_score": diag.template_score,
        "affine": diag.affine.to_json() if diag.affine else None,
        "stage2_fallback": diag.stage2_fallback,
        "n_coarse_pairs": diag.n_coarse_pairs,
        "n_pnp_pairs": diag.n_pnp_pairs,
        "timings_ms": diag.timings_ms,
    }
    if os.path.exists(gt_path):
        from . import metrics
        with open(gt_path) as f:
            gt_pose = synth.Pose.from_json(json.load(f)["pose"])
        result["diagnostics"]["rot_err_deg"] = metrics.rotation_error_deg(est.pose, gt_pose)
        result["diagnostics"]["trans_err_m"] = metrics.translation_error(est.pose, gt_pose)
    text = json.dumps(pipeline._json_safe(result), sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    if args.dump_flow:
        stage3.flow_to_ppm(diag.position_map, args.dump_flow)
    if args.dump_overlay:
        stage3.save_ppm(_wireframe_overlay(obs_tpl, mesh, est.pose, tset.intrinsics),
                        args.dump_overlay)
    return EXIT_OK


def cmd_eval(args):
    scenes, mesh, cfg, _ = pipeline.load_suite(args.suite)
    tset, _ = pipeline.load_store(args.store)
    if args.config:
        cfg = pipeline.PipelineConfig.from_file(args.config)
    records, agg = pipeline.evaluate_suite(scenes, tset, cfg, mesh,
                                           workers=args.workers)
    rec_path, agg_path = pipeline.write_report(records, agg, args.out)
    print(f"wrote {rec_path} and {agg_path}")
    return EXIT_OK


def cmd_sweep(args):
    scenes, mesh, cfg, _ = pipeline.load_suite(args.suite)
    tset, _ = pipeline.load_store(args.store)
    if args.config:
        cfg = pipeline.PipelineConfig.from_file(args.config)
    counts = [int(c) for c in args.counts.split(",")]
    sweep = pipeline.sweep_template_counts(scenes, tset, cfg, mesh, counts,
                                           workers=args.workers)
    with open(args.out, "w") as f:
        json.dump(pipeline._json_safe(sweep), f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="corrpose",
                     description="template-based 6D pose estimation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic object + scene suite")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mesh-seed", type=int, default=3)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--level", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("onboard", help="render + featurize a template store")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_onboard)

    p = sub.add_parser("estimate", help="estimate the pose of one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--config")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--out")
    p.add_argument("--dump-flow", metavar="PPM")
    p.add_argument("--dump-overlay", metavar="PPM")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="evaluate a suite against a store")
    p.add_argument("--suite", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-templates", help="AR vs template count")
    p.add_argument("--suite", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--counts", default="2,6,42,162")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_BAD_INPUT
    try:
        return args.func(args)
    except NoPoseError as exc:
        print(f"no pose: {exc}", file=sys.stderr)
        return EXIT_NO_POSE
    except (FormatError, CorrposeError, ValueError, json.JSONDecodeError) as exc:
        print(f"bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
