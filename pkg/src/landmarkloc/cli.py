"""Command-line entry points for the pipeline.

Subcommands: ``synth`` (scene generation, optionally with a query set),
``build-map`` (reconstruction JSON to map container), ``train-recognizer``
(centroid model from a map), ``localize`` (queries against map + weights),
``eval`` (results against ground truth), ``stats`` (map size accounting).

Exit codes: 0 on success, 1 on runtime errors (message on stderr), 2 on
argument errors (argparse usage text).
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
from dataclasses import replace

import numpy as np

from .builder import BuilderConfig, build_map
from .errors import LandmarkLocError
from .evaluation import DEFAULT_THRESHOLDS, evaluate, map_stats
from .geometry import CameraIntrinsics, Pose, RansacParams
from .localizer import LocalizationResult, LocalizerParams, progressive_localize
from .mapio import load_map, load_reconstruction, save_map, save_reconstruction
from .mapmodel import Keypoint2D
from .recognition import load_weights, save_weights, train_centroid_recognizer
from .synth import (
    QueryNoise,
    SceneSpec,
    generate_scene,
    render_query,
    sample_query_poses,
)

QUERY_FILE_VERSION = 1


# ---------------------------------------------------------------------------
# query-file round trip (descriptors as base64 little-endian float32)
# ---------------------------------------------------------------------------

def _b64(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(
        np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _unb64(text: str, dtype: str, shape: tuple) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"))
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def _pose_to_dict(pose: Pose) -> dict:
    return {"rotation": pose.rotation.tolist(),
            "translation": pose.translation.tolist()}


def _pose_from_dict(d: dict) -> Pose:
    return Pose(rotation=np.asarray(d["rotation"], dtype=np.float64),
                translation=np.asarray(d["translation"], dtype=np.float64))


def write_query_file(path, intrinsics: CameraIntrinsics, renders,
                     descriptor_dim: int):
    queries = []
    for render in renders:
        kps = render.keypoints
        n = len(kps)
        uv = np.array([[kp.u, kp.v] for kp in kps], dtype=np.float64)
        uv = uv.reshape(n, 2)
        scores = np.array([kp.score for kp in kps], dtype=np.float32)
        desc = (np.stack([kp.descriptor for kp in kps])
                if n else np.zeros((0, descriptor_dim), dtype=np.float32))
        queries.append({
            "pose": _pose_to_dict(render.pose),
            "num_keypoints": n,
            "num_visible": render.num_visible,
            "insufficient_visibility": render.insufficient_visibility,
            "uv": _b64(uv, "<f8"),
            "scores": _b64(scores, "<f4"),
            "descriptors": _b64(desc, "<f4"),
        })
    doc = {
        "version": QUERY_FILE_VERSION,
        "descriptor_dim": descriptor_dim,
        "intrinsics": {
            "fx": intrinsics.fx, "fy": intrinsics.fy,
            "cx": intrinsics.cx, "cy": intrinsics.cy,
            "width": intrinsics.width, "height": intrinsics.height,
        },
        "queries": queries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def read_query_file(path):
    """Returns (intrinsics, descriptor_dim, list of (keypoints, gt pose))."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != QUERY_FILE_VERSION:
        raise LandmarkLocError(
            f"unsupported query file version {doc.get('version')!r}")
    dim = int(doc["descriptor_dim"])
    intr = CameraIntrinsics(
        fx=float(doc["intrinsics"]["fx"]), fy=float(doc["intrinsics"]["fy"]),
        cx=float(doc["intrinsics"]["cx"]), cy=float(doc["intrinsics"]["cy"]),
        width=int(doc["intrinsics"]["width"]),
        height=int(doc["intrinsics"]["height"]))
    out = []
    for q in doc["queries"]:
        n = int(q["num_keypoints"])
        uv = _unb64(q["uv"], "<f8", (n, 2))
        scores = _unb64(q["scores"], "<f4", (n,))
        desc = _unb64(q["descriptors"], "<f4", (n, dim))
        kps = [Keypoint2D(u=float(uv[i, 0]), v=float(uv[i, 1]),
                          descriptor=desc[i], score=float(scores[i]))
               for i in range(n)]
        out.append((kps, _pose_from_dict(q["pose"])))
    return intr, dim, out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    spec = SceneSpec(
        num_clusters=args.clusters,
        points_per_cluster=args.points_per_cluster,
        cluster_spread_m=args.cluster_spread,
        scene_extent_m=args.extent,
        num_ref_frames=args.frames,
        descriptor_dim=args.descriptor_dim,
        descriptor_noise_sigma=args.descriptor_noise,
        outlier_keypoint_fraction=args.outlier_fraction,
        descriptor_cluster_spread=args.descriptor_cluster_spread,
        observation_dropout=args.observation_dropout,
        seed=args.seed,
    )
    recon, gt = generate_scene(spec)
    save_reconstruction(recon, args.output)
    print(json.dumps({"points": len(recon.points),
                      "frames": len(recon.frames),
                      "output": str(args.output)}))
    if args.queries > 0:
        if not args.queries_output:
            raise LandmarkLocError("--queries requires --queries-output")
        noise = QueryNoise(descriptor_sigma=args.query_descriptor_noise,
                           outlier_fraction=args.query_outlier_fraction,
                           pixel_noise_px=args.query_pixel_noise)
        poses = sample_query_poses(spec, gt, args.queries, args.query_seed)
        renders = [render_query(recon, pose, noise,
                                seed=args.query_seed + 1 + i,
                                min_visible=args.min_visible)
                   for i, pose in enumerate(poses)]
        write_query_file(args.queries_output, spec.intrinsics, renders,
                         spec.descriptor_dim)
        print(json.dumps({"queries": len(renders),
                          "output": str(args.queries_output)}))
    return 0


def _cmd_build_map(args) -> int:
    recon = load_reconstruction(args.reconstruction)
    config = BuilderConfig(
        lambda_l=args.lambda_l,
        lambda_n=args.lambda_n,
        lambda_v=args.lambda_v,
        lambda_o=args.lambda_o,
        up_axis=args.up_axis,
        enable_pruning=not args.no_prune,
        seed=args.seed,
    )
    scene_map = build_map(recon, config)
    save_map(scene_map, args.output)
    print(json.dumps(map_stats(recon, scene_map)))
    return 0


def _cmd_train_recognizer(args) -> int:
    scene_map = load_map(args.map)
    model = train_centroid_recognizer(scene_map,
                                      temperature=args.temperature,
                                      null_bias=args.null_bias)
    save_weights(model, args.output)
    print(json.dumps({"kind": "centroid",
                      "landmarks": model.centroids.shape[0],
                      "descriptor_dim": model.descriptor_dim,
                      "output": str(args.output)}))
    return 0


def _cmd_localize(args) -> int:
    scene_map = load_map(args.map)
    model = load_weights(args.weights)
    intr, dim, queries = read_query_file(args.queries)
    if dim != scene_map.descriptor_dim:
        raise LandmarkLocError(
            f"query descriptor dim {dim} does not match map "
            f"{scene_map.descriptor_dim}")
    base = LocalizerParams(
        lambda_s=args.lambda_s,
        lambda_i=args.lambda_i,
        lambda_c=args.lambda_c,
        ratio_test=args.ratio_test,
        refine=not args.no_refine,
        refine_window_px=args.refine_window,
        ransac=RansacParams(max_iters=args.ransac_iters,
                            inlier_px_threshold=args.ransac_threshold,
                            confidence=args.ransac_confidence,
                            seed=args.seed),
    )
    with open(args.output, "w", encoding="utf-8") as fh:
        for i, (kps, _gt) in enumerate(queries):
            params = replace(base,
                             ransac=replace(base.ransac, seed=args.seed + i))
            result = progressive_localize(kps, model, scene_map, intr,
                                          params)
            fh.write(json.dumps({"index": i, **result.to_dict()}) + "\n")
    print(json.dumps({"queries": len(queries), "output": str(args.output)}))
    return 0


def _parse_threshold(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(
            "threshold must be 'pos_cm,rot_deg'")
    return float(parts[0]), float(parts[1])


def _cmd_eval(args) -> int:
    results = []
    with open(args.results, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                results.append(json.loads(line))
    results.sort(key=lambda d: d["index"])
    parsed = [LocalizationResult.from_dict(d) for d in results]
    _intr, _dim, queries = read_query_file(args.queries)
    gts = [gt for _kps, gt in queries]
    thresholds = args.threshold if args.threshold else list(DEFAULT_THRESHOLDS)
    report = evaluate(parsed, gts, thresholds=thresholds)
    text = json.dumps(report.to_dict(), indent=2)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def _cmd_stats(args) -> int:
    scene_map = load_map(args.map)
    if args.reconstruction:
        record = map_stats(load_reconstruction(args.reconstruction),
                           scene_map)
    else:
        from .mapio import serialize_map
        record = {
            "num_points_after": len(scene_map.points),
            "num_vrfs": len(scene_map.landmarks),
            "serialized_bytes": len(serialize_map(scene_map)),
        }
    print(json.dumps(record, indent=2))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landmarkloc",
        description="Landmark-based visual localization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene "
                       "(and optionally a query set)")
    p.add_argument("-o", "--output", required=True,
                   help="reconstruction JSON path")
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--points-per-cluster", type=int, default=50)
    p.add_argument("--cluster-spread", type=float, default=0.03,
                   help="in-plane point spread per cluster, meters")
    p.add_argument("--extent", type=float, default=2.0,
                   help="scene extent, meters")
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--descriptor-dim", type=int, default=32)
    p.add_argument("--descriptor-noise", type=float, default=0.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--descriptor-cluster-spread", type=float, default=0.03)
    p.add_argument("--observation-dropout", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=0,
                   help="also render this many query images")
    p.add_argument("--queries-output", default=None)
    p.add_argument("--query-descriptor-noise", type=float, default=0.05)
    p.add_argument("--query-outlier-fraction", type=float, default=0.2)
    p.add_argument("--query-pixel-noise", type=float, default=1.0)
    p.add_argument("--query-seed", type=int, default=1000)
    p.add_argument("--min-visible", type=int, default=64,
                   help="visibility floor before a query is flagged")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("build-map", help="build a landmark map from a "
                       "reconstruction JSON")
    p.add_argument("reconstruction", help="reconstruction JSON path")
    p.add_argument("-o", "--output", required=True, help="map container path")
    p.add_argument("--lambda-l", type=int, default=16,
                   help="number of landmarks (default 16)")
    p.add_argument("--lambda-n", type=int, default=20,
                   help="neighborhood size for stability filtering "
                   "(default 20)")
    p.add_argument("--lambda-v", type=float, default=0.2,
                   help="neighborhood variance ceiling (default 0.2)")
    p.add_argument("--lambda-o", type=float, default=25.0,
                   help="pruning conflict radius in pixels (default 25)")
    p.add_argument("--up-axis", type=int, default=2, choices=(0, 1, 2))
    p.add_argument("--no-prune", action="store_true",
                   help="skip observation-redundancy pruning")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_build_map)

    p = sub.add_parser("train-recognizer", help="fit the centroid "
                       "recognizer from a map")
    p.add_argument("map", help="map container path")
    p.add_argument("-o", "--output", required=True,
                   help="weights container path")
    p.add_argument("--temperature", type=float, default=0.07)
    p.add_argument("--null-bias", type=float, default=0.5)
    p.set_defaults(func=_cmd_train_recognizer)

    p = sub.add_parser("localize", help="localize queries against a map")
    p.add_argument("map", help="map container path")
    p.add_argument("weights", help="weights container path")
    p.add_argument("queries", help="query file path")
    p.add_argument("-o", "--output", required=True,
                   help="results JSON-lines path")
    p.add_argument("--lambda-s", type=float, default=0.9,
                   help="outlier confidence threshold (default 0.9)")
    p.add_argument("--lambda-i", type=int, default=64,
                   help="inlier acceptance count (default 64)")
    p.add_argument("--lambda-c", type=int, default=20,
                   help="max candidate landmarks (default 20)")
    p.add_argument("--ratio-test", type=float, default=0.9)
    p.add_argument("--no-refine", action="store_true",
                   help="skip covisibility refinement")
    p.add_argument("--refine-window", type=float, default=12.0)
    p.add_argument("--ransac-iters", type=int, default=2048)
    p.add_argument("--ransac-threshold", type=float, default=8.0)
    p.add_argument("--ransac-confidence", type=float, default=0.9999)
    p.add_argument("--seed", type=int, default=0,
                   help="base RANSAC seed; query i uses seed + i")
    p.set_defaults(func=_cmd_localize)

    p = sub.add_parser("eval", help="score localization results")
    p.add_argument("results", help="results JSON-lines path")
    p.add_argument("queries", help="query file with ground-truth poses")
    p.add_argument("-o", "--output", default=None, help="report JSON path")
    p.add_argument("--threshold", type=_parse_threshold, action="append",
                   help="success threshold 'pos_cm,rot_deg'; repeatable "
                   "(default: 5,5 and 25,2)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="print map statistics")
    p.add_argument("map", help="map container path")
    p.add_argument("--reconstruction", default=None,
                   help="original reconstruction JSON for before/after "
                   "counts")
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except LandmarkLocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
