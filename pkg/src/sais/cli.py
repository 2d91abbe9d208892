"""Command-line pipeline: corpus -> samples -> model -> evaluation and transfer.

Every numeric option can also come from a JSON file passed with ``--config``;
flags given on the command line take precedence over the file.

Exit codes: 0 success, 2 missing or invalid input, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("sais")

EXIT_INPUT = 2
EXIT_DIVERGED = 3


class InputError(Exception):
    pass


# -- helpers -------------------------------------------------------------------


def _threads(n: int | None):
    if n is None:
        env = os.environ.get("SAIS_THREADS")
        if env is None:
            return
        try:
            n = int(env)
        except ValueError:
            raise InputError(f"SAIS_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InputError("--threads must be at least 1")
    import numba
    import torch

    torch.set_num_threads(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _range_arg(text: str) -> tuple[str, tuple[float, float]]:
    try:
        name, values = text.split("=", 1)
        lo, hi = (float(v) for v in values.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=LO,HI, got {text!r}") from None
    return name, (lo, hi)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _need(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _write_json(path: Path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_corpus(corpus_dir: Path):
    from .lie import AffineTransform, RigidTransform
    from .mesh import load_mesh
    from .shapes import read_manifest

    manifest = read_manifest(_need(corpus_dir / "manifest.json", "corpus manifest"))
    shapes = []
    for entry in manifest["shapes"]:
        mesh = load_mesh(_need(corpus_dir / entry["file"], "mesh"))
        pose = RigidTransform.from_matrix(AffineTransform.from_json(entry["pose"]).matrix)
        grasps = {k: RigidTransform.from_matrix(AffineTransform.from_json(g).matrix)
                  for k, g in entry.get("grasps", {}).items()}
        shapes.append({"name": entry["name"], "family": entry["family"], "params": entry["params"],
                       "mesh": mesh, "pose": pose, "grasps": grasps})
    return manifest, shapes


# -- commands ------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    from .lie import RigidTransform
    from .mesh import save_mesh
    from .shapes import ShapeFamilySpec, generate_family, perturb_pose, place, write_manifest

    spec = ShapeFamilySpec(args.family, dict(args.range or []), args.seed)
    shapes = generate_family(spec, args.count, resolution=args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, shape in enumerate(shapes):
        if k >= args.keep_first and (args.yaw_range > 0 or args.translation_range > 0):
            _, pose = perturb_pose(shape.mesh, math.radians(args.yaw_range), args.translation_range,
                                   args.seed * 1000 + k)
            shape = place(shape, pose)
        else:
            shape = place(shape, RigidTransform())
        name = f"{shape.name}.obj"
        save_mesh(shape.mesh, out / name)
        entries.append(shape.to_json(name))
    write_manifest(out / "manifest.json", entries,
                   {"family": args.family, "count": args.count, "seed": args.seed,
                    "yaw_range_deg": args.yaw_range, "translation_range": args.translation_range})
    print(f"wrote {len(entries)} shapes to {out}")
    return 0


def _demo_frame(anchor: dict, demo: str):
    from .lie import RigidTransform, translation

    if demo == "world":
        return RigidTransform()
    if demo == "center":
        lo, hi = anchor["mesh"].bounds()
        return translation((lo + hi) / 2)
    if demo not in anchor["grasps"]:
        raise InputError(f"anchor shape has no grasp annotation {demo!r}")
    return anchor["grasps"][demo]


def cmd_gen_data(args) -> int:
    from .lie import RigidTransform, invert
    from .sampling import sample_training_set, sphere_filter

    manifest, shapes = _load_corpus(Path(args.corpus))
    if not 0 <= args.anchor < len(shapes):
        raise InputError(f"anchor index {args.anchor} out of range")
    demo = _demo_frame(shapes[args.anchor], args.demo)
    to_demo = invert(demo)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    r = args.keep_radius
    bounds = None if r is None else (-np.full(3, r), np.full(3, r))
    files = []
    for k, shape in enumerate(shapes):
        samples = sample_training_set(shape["mesh"].transformed(to_demo), args.n_surface, args.n_free,
                                      args.variance, fine_variance=args.fine_variance, bounds=bounds,
                                      seed=args.seed * 1000 + k, shape_index=k)
        if r is not None:
            samples = sphere_filter(samples, RigidTransform(), r)
        name = f"{shape['name']}.sdf"
        samples.save(out / name, {"shape": shape["name"], "frame": "demonstration", "seed": args.seed})
        files.append(name)
    _write_json(out / "data.json", {
        "corpus": str(Path(args.corpus).resolve()), "anchor_index": args.anchor, "demo": args.demo,
        "world_to_demo": demo.to_json("world->demonstration"), "files": files,
        "names": [s["name"] for s in shapes], "seed": args.seed,
        "poses": [s["pose"].to_json("canonical->world") for s in shapes],
    })
    print(f"wrote {len(files)} sample sets to {out}")
    return 0


def _train_config(args):
    from .encoding import EncodingConfig
    from .network import NetworkConfig
    from .training import TrainConfig

    net = NetworkConfig(code_dim=args.code_dim, width=args.width, hidden_layers=args.hidden_layers,
                        hyper_width=args.hyper_width, predicted_layers=args.predicted_layers,
                        encoding=EncodingConfig(args.num_bands), init_radius=args.init_radius)
    return TrainConfig(iterations=args.iterations, batch_size=args.batch_size, learning_rate=args.lr,
                       pose_lr_factor=args.pose_lr_factor, network=net, schedule_start=args.schedule_start,
                       schedule_end=args.schedule_end, sphere_radius=args.sphere_radius,
                       anchor_index=args.anchor, freeze_pose_codes=args.freeze_pose_codes,
                       freeze_scale_codes=args.freeze_scale_codes, seed=args.seed, dtype=args.dtype,
                       log_every=args.log_every)


def _load_data(data_dir: Path):
    from .lie import AffineTransform, RigidTransform
    from .sampling import SdfSampleSet

    meta = json.loads(_need(data_dir / "data.json", "data manifest").read_text())
    corpus = [SdfSampleSet.load(_need(data_dir / f, "sample archive")) for f in meta["files"]]
    demo = RigidTransform.from_matrix(AffineTransform.from_json(meta["world_to_demo"]).matrix)
    return meta, corpus, demo


def expected_alignments(meta: dict, anchor: int):
    """Ground-truth ``H`` per shape from the recorded corpus poses."""
    from .lie import AffineTransform, invert

    demo = AffineTransform.from_json(meta["world_to_demo"])
    poses = [AffineTransform.from_json(p) for p in meta["poses"]]
    return [invert(demo) @ poses[anchor] @ invert(p) @ demo for p in poses]


def cmd_train(args) -> int:
    from .evaluation import pose_error
    from .lie import RigidTransform, strip_scale
    from .training import train

    meta, corpus, demo = _load_data(Path(args.data))
    config = _train_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    def progress(it, value, loss):
        log.info("iter %d loss %.6g", it, value)

    bundle = train(corpus, demo, config, progress)
    bundle.save(out)
    stem = out.with_suffix("")
    with open(f"{stem}.loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for it, v in enumerate(bundle.loss_history):
            w.writerow([it, repr(float(v))])
    truths = expected_alignments(meta, args.anchor)
    rows = []
    for k, sid in enumerate(bundle.shape_ids):
        h = bundle.field_transform(k)
        row = {"shape": meta["names"][sid], "H": h.matrix.reshape(-1).tolist(),
               "residual": float(bundle.residuals[k])}
        # rigid part of H against the recorded perturbation
        dt, dr = pose_error(strip_scale(h), RigidTransform.from_matrix(truths[sid].matrix))
        row.update({"translation_error": dt, "rotation_error_deg": dr})
        rows.append(row)
    _write_json(Path(f"{stem}.alignment.json"),
                {"seed": args.seed, "config": {"iterations": config.iterations, "sphere_radius": config.sphere_radius,
                                               "pose_lr_factor": config.pose_lr_factor},
                 "excluded": [meta["names"][k] for k in bundle.excluded],
                 "final_loss": float(bundle.loss_history[-1]) if len(bundle.loss_history) else None,
                 "shapes": rows})
    final = bundle.loss_history[-1] if len(bundle.loss_history) else float("nan")
    print(f"trained {len(bundle.shape_ids)} shapes; final loss {final:.6g}; checkpoint {out}")
    return 0


def cmd_align_eval(args) -> int:
    from .evaluation import ChamferReport, chamfer, crop_to_sphere, emit_reports, reconstruct_shape
    from .lie import invert
    from .training import load_bundle

    bundle = load_bundle(_need(args.checkpoint, "checkpoint"))
    meta = json.loads(_need(Path(args.data) / "data.json", "data manifest").read_text())
    _, shapes = _load_corpus(Path(meta["corpus"]))
    r = bundle.model.sphere_radius
    to_demo = invert(bundle.world_to_demo)
    anchor_pose = shapes[meta["anchor_index"]]["pose"]
    names, rec, per = [], [], []
    for k, sid in enumerate(bundle.shape_ids):
        shape = shapes[sid]
        rng = np.random.default_rng([args.seed, sid])
        # ground truth: the shape in the anchor's pose, expressed in the demonstration frame
        canonical = shape["mesh"].transformed(to_demo @ anchor_pose @ invert(shape["pose"]))
        truth = crop_to_sphere(canonical.sample_surface(args.points, rng), r)
        moved = crop_to_sphere(shape["mesh"].transformed(to_demo).sample_surface(args.points, rng), r)
        mesh = reconstruct_shape(bundle.model, bundle.codes[k], bundle.betas[k], bundle.scales[k],
                                 args.grid_res, frame="alignment")
        names.append(shape["name"])
        rec.append(chamfer(mesh.sample_surface(args.points, rng), truth))
        per.append(chamfer(moved, truth))
    report = ChamferReport(names, rec, per)
    emit_reports(args.out, alignment=report, meta={"seed": args.seed, "checkpoint": str(args.checkpoint)})
    s = report.summary()
    print(f"chamfer reconstructed {s['reconstructed_mean']:.3e} perturbed {s['perturbed_mean']:.3e}")
    return 0


def _reference(text: str):
    from .lie import AffineTransform, RigidTransform

    p = Path(text)
    if p.exists():
        return RigidTransform.from_matrix(AffineTransform.from_json(json.loads(p.read_text())).matrix)
    vals = _floats(text)
    if len(vals) == 3:
        from .lie import translation

        return translation(vals)
    if len(vals) != 16:
        raise InputError("--reference needs 3 or 16 numbers or a transform JSON file")
    return RigidTransform.from_matrix(np.asarray(vals).reshape(4, 4))


def _transfer_config(args):
    from .network import LossWeights
    from .transfer import TransferConfig

    return TransferConfig(n_candidates=args.candidates, yaw_step=math.radians(args.yaw_step),
                          iterations=args.fit_iterations, refine_top=args.refine_top,
                          refine_iterations=args.refine_iterations, learning_rate=args.lr,
                          lr_final_factor=args.lr_final_factor, weights=LossWeights(translation=args.translation_weight),
                          threshold=args.threshold, threshold_k=args.threshold_k, n_uniform=args.n_uniform,
                          max_samples=args.max_samples, min_coverage=args.min_coverage, seed=args.seed)


def cmd_transfer(args) -> int:
    from .mesh import read_point_cloud
    from .training import load_bundle
    from .transfer import transfer_grasp

    bundle = load_bundle(_need(args.checkpoint, "checkpoint"))
    cloud = read_point_cloud(_need(args.cloud, "point cloud"))
    if len(cloud) == 0:
        raise InputError(f"point cloud is empty: {args.cloud}")
    axis = None if args.axis_point is None else np.asarray(args.axis_point)
    if axis is not None and len(axis) != 3:
        raise InputError("--axis-point needs three numbers")
    result = transfer_grasp(bundle.model, cloud, _reference(args.reference), _transfer_config(args), axis)
    payload = {"seed": args.seed, **result.to_json(),
               "naive": bundle.training_grasps()[bundle.anchor_index].matrix.reshape(-1).tolist()}
    if args.out:
        _write_json(Path(args.out), payload)
    print(json.dumps({"accepted": len(result.solutions), "threshold": result.threshold,
                      "best_residual": result.best.fit.residual if result.best else None}))
    return 0


def _calibrate(model, corpus_dir: Path, grasp: str, config, points: int, seed: int):
    from .lie import RigidTransform, invert
    from .transfer import calibrate_threshold

    _, shapes = _load_corpus(corpus_dir)
    to_align = invert(model.align_to_grasp)
    clouds, frames = [], []
    for k, shape in enumerate(shapes):
        if grasp not in shape["grasps"]:
            raise InputError(f"calibration shape {shape['name']} has no {grasp!r} annotation")
        clouds.append(shape["mesh"].sample_surface(points, np.random.default_rng([seed, 1, k])))
        frames.append(RigidTransform.from_matrix((shape["grasps"][grasp] @ to_align).matrix))
    return calibrate_threshold(model, clouds, frames, config)


def cmd_eval(args) -> int:
    from .evaluation import PoseErrorReport, emit_reports, pose_error
    from .experiments import top_ring
    from .lie import rotation_about_z, translation
    from .training import load_bundle
    from .transfer import naive_transfer, nocs_transfer, transfer_grasp

    bundle = load_bundle(_need(args.checkpoint, "checkpoint"))
    _, shapes = _load_corpus(Path(args.corpus))
    meta = json.loads(_need(Path(args.data) / "data.json", "data manifest").read_text())
    _, train_shapes = _load_corpus(Path(meta["corpus"]))
    anchor = train_shapes[meta["anchor_index"]]
    demo_grasp = bundle.training_grasps()[bundle.anchor_index]
    config = _transfer_config(args)
    if args.calibration_corpus:
        res = _calibrate(bundle.model, Path(args.calibration_corpus), args.grasp, config, args.points, args.seed)
        print(f"calibrated on {len(res)} shapes; threshold {bundle.model.threshold(config.threshold_k):.4g}")
    rng = np.random.default_rng(args.seed)
    anchor_cloud = anchor["mesh"].sample_surface(args.points, rng)
    # the demonstration offset from the top ring, relative to the ring radius and object height
    centre, radius, height = top_ring(anchor_cloud)
    offset = (demo_grasp.translation - centre) / [radius, radius, height]
    report = PoseErrorReport()
    for shape in shapes:
        if args.grasp not in shape["grasps"]:
            raise InputError(f"shape {shape['name']} has no {args.grasp!r} annotation")
        lo, hi = shape["mesh"].bounds()
        center = (lo + hi) / 2
        for eps in args.yaws:
            turn = rotation_about_z(math.radians(eps), [center[0], center[1], 0.0])
            truth = turn @ shape["grasps"][args.grasp]
            cloud = shape["mesh"].transformed(turn).sample_surface(args.points, np.random.default_rng(
                [args.seed, int(eps)]))
            c, rr, h = top_ring(cloud)
            result = transfer_grasp(bundle.model, cloud, translation(c + offset * [rr, rr, h]), config, c)
            if result.best is not None:
                report.add("learned", eps, shape["name"], *pose_error(result.best.grasp, truth))
            else:
                report.add("learned", eps, shape["name"], math.inf, math.inf)
            report.add("naive", eps, shape["name"], *pose_error(naive_transfer(demo_grasp), truth))
            # the baseline sees the object in its canonical pose and a yaw error of eps
            nocs = nocs_transfer(anchor_cloud, shape["mesh"].sample_surface(args.points, rng), demo_grasp,
                                 math.radians(eps))
            report.add("nocs", eps, shape["name"], *pose_error(nocs, shape["grasps"][args.grasp]))
    emit_reports(args.out, poses=report, tolerance=args.tolerance,
                 meta={"seed": args.seed, "checkpoint": str(args.checkpoint),
                       "threshold": bundle.model.threshold(config.threshold_k)})
    for row in report.precision(args.tolerance):
        if row["cases"]:
            print(f"{row['method']:8s} {row['perturbation_deg']:5.1f} deg  success {row['success_rate']:.2f}")
    return 0


def cmd_export_mesh(args) -> int:
    from .evaluation import reconstruct_shape
    from .mesh import save_mesh
    from .training import load_bundle

    bundle = load_bundle(_need(args.checkpoint, "checkpoint"))
    if not 0 <= args.shape < len(bundle.codes):
        raise InputError(f"shape index {args.shape} out of range (model has {len(bundle.codes)})")
    k = args.shape
    mesh = reconstruct_shape(bundle.model, bundle.codes[k], bundle.betas[k], bundle.scales[k], args.grid_res,
                             frame=args.frame)
    save_mesh(mesh, args.out)
    print(f"wrote {len(mesh.triangles)} triangles to {args.out}")
    return 0


# -- parser --------------------------------------------------------------------


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="JSON file with option values")
    p.add_argument("--seed", type=int, default=0, help="global random seed")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap (default: $SAIS_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _add_train_options(p):
    p.add_argument("--iterations", type=int, default=20000)
    p.add_argument("--batch-size", type=int, default=512, help="samples per shape per step")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--pose-lr-factor", type=float, default=1.0)
    p.add_argument("--schedule-start", type=float, default=0.0, help="coarse-to-fine ramp start (fraction)")
    p.add_argument("--schedule-end", type=float, default=0.3, help="coarse-to-fine ramp end (fraction)")
    p.add_argument("--sphere-radius", type=float, default=0.15)
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--freeze-pose-codes", action="store_true")
    p.add_argument("--freeze-scale-codes", action="store_true")
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument("--code-dim", type=int, default=128)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--hidden-layers", type=int, default=5)
    p.add_argument("--hyper-width", type=int, default=256)
    p.add_argument("--predicted-layers", type=int, default=None)
    p.add_argument("--num-bands", type=int, default=6)
    p.add_argument("--init-radius", type=float, default=0.1)
    p.add_argument("--log-every", type=int, default=1000)


def _add_transfer_options(p):
    p.add_argument("--candidates", type=int, default=24)
    p.add_argument("--yaw-step", type=float, default=15.0, help="degrees between candidates")
    p.add_argument("--fit-iterations", type=int, default=150, help="coarse iterations per candidate")
    p.add_argument("--refine-top", type=int, default=3, help="best coarse fits restarted from their fitted frames")
    p.add_argument("--refine-iterations", type=int, default=300)
    p.add_argument("--lr", type=float, default=4e-3)
    p.add_argument("--lr-final-factor", type=float, default=0.02, help="cosine decay floor of the step size")
    p.add_argument("--translation-weight", type=float, default=1e3, help="prior weight on fitted translation")
    p.add_argument("--min-coverage", type=float, default=0.5,
                   help="minimum fraction of the calibrated surface coverage")
    p.add_argument("--threshold", type=float, default=None, help="residual acceptance threshold")
    p.add_argument("--threshold-k", type=float, default=2.0, help="threshold = mean + k*std")
    p.add_argument("--n-uniform", type=int, default=20000)
    p.add_argument("--max-samples", type=int, default=2048)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sais", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate procedural meshes and a manifest")
    _common(p)
    p.add_argument("--family", required=True, choices=["cylinder", "cuboid", "mug", "bowl"])
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--range", action="append", type=_range_arg, metavar="NAME=LO,HI",
                   help="parameter range override (repeatable)")
    p.add_argument("--yaw-range", type=float, default=0.0, help="random yaw perturbation, degrees")
    p.add_argument("--translation-range", type=float, default=0.0)
    p.add_argument("--keep-first", type=int, default=1, help="leading shapes left unperturbed")
    p.add_argument("--resolution", type=int, default=80)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("gen-data", help="sample signed distances in the demonstration frame")
    _common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--anchor", type=int, default=0)
    p.add_argument("--demo", default="center", help="'world', 'center' or an anchor grasp name")
    p.add_argument("--n-surface", type=int, default=20000)
    p.add_argument("--n-free", type=int, default=4000)
    p.add_argument("--variance", type=float, default=0.0375)
    p.add_argument("--fine-variance", type=float, default=None)
    p.add_argument("--keep-radius", type=float, default=None,
                   help="drop samples farther than this from the demonstration origin")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a local-surface model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("align-eval", help="Chamfer of aligned reconstructions vs perturbed shapes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--points", type=int, default=10000)
    p.set_defaults(func=cmd_align_eval)

    p = sub.add_parser("transfer", help="transfer the demonstrated grasp to a point cloud")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True, help="PLY point cloud in the world frame")
    p.add_argument("--reference", required=True,
                   help="reference candidate frame: 3 or 16 comma-separated numbers, or a JSON file")
    p.add_argument("--axis-point", type=_floats, default=None, help="x,y,z on the vertical rotation axis")
    p.add_argument("--out", default=None, help="JSON result path")
    _add_transfer_options(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("eval", help="grasp precision against baselines over yaw perturbations")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="training data directory of the checkpoint")
    p.add_argument("--corpus", required=True, help="held-out corpus with grasp annotations")
    p.add_argument("--grasp", default="handle")
    p.add_argument("--yaws", type=_floats, default=[0.0, 10.0, 20.0, 30.0, 40.0])
    p.add_argument("--tolerance", type=float, default=0.05)
    p.add_argument("--points", type=int, default=10000)
    p.add_argument("--calibration-corpus", default=None,
                   help="held-out annotated corpus used to calibrate the acceptance threshold first")
    p.add_argument("--out", required=True, help="report directory")
    _add_transfer_options(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mesh", help="reconstruct one trained shape as OBJ")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape", type=int, default=0)
    p.add_argument("--grid-res", type=int, default=64)
    p.add_argument("--frame", choices=["demo", "alignment"], default="demo")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mesh)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    path = Path(args.config)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(values, dict):
        raise InputError(f"{path}: expected a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InputError(f"{path}: unknown option(s) {', '.join(unknown)}")
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    from .mesh import MeshError
    from .training import TrainingDiverged

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _threads(args.threads)
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, FileNotFoundError, MeshError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
