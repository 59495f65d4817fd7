"""Command-line entry points for reproducible benchmark runs.

Subcommands: `estimate` runs one estimator over a dataset and writes one
line per query, `evaluate` scores an estimates file against ground truth,
`curves` emits a precision/ratio CSV, and `synth` generates synthetic
scenes.  Progress goes to stderr; machine output goes to files or stdout.

Exit codes: 0 success, 1 usage, 2 I/O or format error, 3 evaluation
mismatch.  Per-query estimation failures are encoded in the output status
column and never abort a run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import SceneManifest, SyntheticSceneConfig, list_scenes, load_scene, synth_scene, synth_write
from .errors import FormatError, MfposeError
from .evaluation import (
    EvaluationRecord,
    Thresholds,
    VirtualGrid,
    aggregate_report,
    pose_acceptable,
    precision_curve,
    score_query,
    vcre_acceptable,
)
from .geometry import Pose, quaternion_from_rotation, rotation_from_quaternion
from .pipelines import (
    ESTIMATOR_NAMES,
    EstimateStatus,
    EstimatorConfig,
    PoseEstimate,
    run_estimator,
)

DEFAULT_SEED = 0
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISMATCH = 3


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def derive_seed(global_seed: int, scene_id: str, query_id: str) -> int:
    """Stable per-query seed, identical across machines and thread counts."""
    digest = hashlib.blake2s(
        f"{global_seed}/{scene_id}/{query_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") >> 1


def _thread_count() -> int:
    cap = os.environ.get("MFP_THREADS", "")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            raise FormatError("MFP_THREADS", f"not an integer: {cap!r}")
    return os.cpu_count() or 1


@dataclass(frozen=True)
class RunConfig:
    dataset: Path
    scenes: list[str]
    estimator: str
    seed: int
    out: Path
    estimator_config: EstimatorConfig


# --------------------------------------------------------------------------
# Estimates file format
# --------------------------------------------------------------------------


def format_estimate_line(scene_id: str, query_id: str, estimate: PoseEstimate) -> str:
    if estimate.status is not EstimateStatus.OK:
        return f"{scene_id} {query_id} {estimate.status.value}"
    q = quaternion_from_rotation(estimate.pose.rotation)
    t = estimate.pose.translation
    confidence = "-" if estimate.confidence is None else repr(float(estimate.confidence))
    fields = [scene_id, query_id, "ok"] + [repr(float(v)) for v in (*q, *t)] + [confidence]
    return " ".join(fields)


def parse_estimates(path) -> list[tuple[str, str, PoseEstimate]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(path, f"cannot read file: {exc}") from exc
    out = []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) < 3:
            raise FormatError(path, "expected `scene query status ...`", number)
        scene_id, query_id, status_text = fields[:3]
        try:
            status = EstimateStatus(status_text)
        except ValueError as exc:
            raise FormatError(path, f"unknown status {status_text!r}", number) from exc
        if status is not EstimateStatus.OK:
            if len(fields) != 3:
                raise FormatError(path, f"{status_text} lines must have 3 fields", number)
            out.append((scene_id, query_id, PoseEstimate(status)))
            continue
        if len(fields) not in (10, 11):
            raise FormatError(path, f"ok lines need 10 or 11 fields, got {len(fields)}", number)
        try:
            values = [float(v) for v in fields[3:10]]
        except ValueError as exc:
            raise FormatError(path, f"non-numeric pose field: {exc}", number) from exc
        confidence = None
        if len(fields) == 11 and fields[10] != "-":
            try:
                confidence = float(fields[10])
            except ValueError as exc:
                raise FormatError(path, f"non-numeric confidence: {exc}", number) from exc
        try:
            pose = Pose(rotation_from_quaternion(np.array(values[:4])), np.array(values[4:]))
        except MfposeError as exc:
            raise FormatError(path, str(exc), number) from exc
        out.append((scene_id, query_id, PoseEstimate(EstimateStatus.OK, pose, confidence)))
    return out


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _select_scenes(dataset: Path, scene_filter: str) -> list[str]:
    available = list_scenes(dataset)
    if scene_filter in ("", "all"):
        return available
    wanted = [s for s in scene_filter.split(",") if s]
    missing = sorted(set(wanted) - set(available))
    if missing:
        raise FormatError(dataset, f"scenes not found: {', '.join(missing)}")
    return sorted(wanted)


def cmd_estimate(run: RunConfig) -> int:
    scenes = [load_scene(run.dataset, scene_id) for scene_id in _select_scenes(run.dataset, ",".join(run.scenes))]
    jobs = []
    for manifest in scenes:
        depth_ref = manifest.load_depth(manifest.reference)
        k_ref = manifest.intrinsics[manifest.reference]
        for query in manifest.queries:
            jobs.append((manifest, depth_ref, k_ref, query))

    def solve_one(job):
        manifest, depth_ref, k_ref, query = job
        correspondences = manifest.load_matches(query)
        depth_query = manifest.load_depth(query)
        cfg = replace(
            run.estimator_config, rng_seed=derive_seed(run.seed, manifest.scene_id, query)
        )
        estimate = run_estimator(
            run.estimator,
            correspondences,
            depth_ref,
            depth_query,
            k_ref,
            manifest.intrinsics[query],
            cfg,
        )
        return format_estimate_line(manifest.scene_id, query, estimate)

    workers = _thread_count()
    _log(f"estimating {len(jobs)} queries from {len(scenes)} scenes with {workers} thread(s)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lines = list(pool.map(solve_one, jobs))  # map preserves canonical job order
    else:
        lines = [solve_one(job) for job in jobs]

    run.out.parent.mkdir(parents=True, exist_ok=True)
    run.out.write_text("\n".join(lines) + ("\n" if lines else ""))
    _log(f"wrote {len(lines)} estimates to {run.out}")
    return EXIT_OK


def _records_from_estimates(
    estimates_path: Path, dataset: Path, grid: VirtualGrid
) -> list[EvaluationRecord]:
    estimates = parse_estimates(estimates_path)
    manifests: dict[str, SceneManifest] = {}
    unmatched = []
    records = []
    for scene_id, query_id, estimate in estimates:
        if scene_id not in manifests:
            try:
                manifests[scene_id] = load_scene(dataset, scene_id)
            except FormatError:
                unmatched.append(f"{scene_id}/{query_id}")
                continue
        manifest = manifests[scene_id]
        if query_id not in manifest.queries or not manifest.has_ground_truth:
            unmatched.append(f"{scene_id}/{query_id}")
            continue
        records.append(
            score_query(
                scene_id,
                query_id,
                estimate,
                manifest.poses[query_id],
                manifest.intrinsics[query_id],
                grid,
            )
        )
    if unmatched:
        raise FormatError(
            estimates_path, "queries without ground truth: " + ", ".join(sorted(unmatched))
        )
    return records


def cmd_evaluate(args) -> int:
    grid = VirtualGrid()
    thresholds = Thresholds(
        vcre_fractions=tuple(args.threshold_vcre),
        pose_translation_m=args.threshold_pose_m,
        pose_rotation_deg=args.threshold_pose_deg,
    )
    try:
        records = _records_from_estimates(Path(args.estimates), Path(args.dataset), grid)
    except FormatError as exc:
        if "without ground truth" in str(exc):
            _log(str(exc))
            return EXIT_MISMATCH
        raise
    report = aggregate_report(
        records,
        thresholds,
        grid,
        meta={"estimator": args.estimator_name, "seed": args.seed, "estimates": str(args.estimates)},
    )
    for name, rate in report["summary"]["acceptance"].items():
        print(f"acceptance {name}: {rate:.6f}")
    if args.out_json:
        Path(args.out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out_json).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        _log(f"wrote report to {args.out_json}")
    if args.out_csv:
        path = Path(args.out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(
                ["scene_id", "queries", "ok", "median_rotation_error_deg",
                 "median_translation_error_m", "median_vcre_px"]
            )
            for row in report["per_scene"]:
                writer.writerow(
                    [row["scene_id"], row["queries"], row["ok"],
                     row["median_rotation_error_deg"], row["median_translation_error_m"],
                     row["median_vcre_px"]]
                )
        _log(f"wrote per-scene CSV to {args.out_csv}")
    return EXIT_OK


def cmd_curves(args) -> int:
    grid = VirtualGrid()
    thresholds = Thresholds()
    try:
        records = _records_from_estimates(Path(args.estimates), Path(args.dataset), grid)
    except FormatError as exc:
        if "without ground truth" in str(exc):
            _log(str(exc))
            return EXIT_MISMATCH
        raise
    if args.acceptance == "pose":
        acceptable = lambda r: pose_acceptable(r, thresholds)
    else:
        fraction = float(args.acceptance.split("-", 1)[1])
        acceptable = lambda r: vcre_acceptable(r, fraction)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["confidence_threshold", "estimate_ratio", "precision"])
        if records:
            points = sorted(
                precision_curve(records, acceptable), key=lambda p: -p.estimate_ratio
            )
            for point in points:
                writer.writerow(
                    [point.confidence_threshold, point.estimate_ratio,
                     "" if point.precision is None else point.precision]
                )
    _log(f"wrote curve to {path}")
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        options = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise FormatError(args.config, f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(args.config, f"invalid JSON: {exc}") from exc
    num_scenes = int(options.pop("num_scenes", 1))
    prefix = str(options.pop("scene_prefix", "scene"))
    seed = int(options.pop("rng_seed", DEFAULT_SEED))
    for key in ("depth_range_m", "baseline_range_m"):
        if key in options:
            options[key] = tuple(options[key])
    root = Path(args.out)
    total_queries = 0
    for index in range(num_scenes):
        scene_id = f"{prefix}{index:04d}"
        config = SyntheticSceneConfig(rng_seed=derive_seed(seed, scene_id, "gen"), **options)
        scene = synth_scene(config)
        synth_write(scene, root, scene_id)
        total_queries += len(scene.queries)
        counts = [len(q.correspondences) for q in scene.queries]
        _log(f"{scene_id}: {len(scene.queries)} queries, matches per query {counts}")
    _log(f"generated {num_scenes} scenes / {total_queries} queries under {root}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfpose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="run an estimator over a dataset")
    est.add_argument("--dataset", required=True)
    est.add_argument("--scenes", default="all", help="comma-separated scene ids or 'all'")
    est.add_argument("--estimator", default="essmat-dscale", choices=ESTIMATOR_NAMES)
    est.add_argument("--seed", type=int, default=DEFAULT_SEED)
    est.add_argument("--out", required=True)
    est.add_argument("--max-iterations", type=int, default=EstimatorConfig.max_iterations)
    est.add_argument("--ransac-confidence", type=float, default=EstimatorConfig.confidence)
    est.add_argument("--min-inliers", type=int, default=EstimatorConfig.min_inliers)
    est.add_argument("--sampson-threshold", type=float, default=None,
                     help="normalized units; default 4/geometric-mean focal")
    est.add_argument("--pnp-threshold-px", type=float, default=EstimatorConfig.pnp_threshold_px)
    est.add_argument("--procrustes-threshold-m", type=float,
                     default=EstimatorConfig.procrustes_threshold_m)
    est.add_argument("--scale-tolerance", type=float,
                     default=EstimatorConfig.scale_relative_tolerance)
    est.add_argument("--config", default=None, help="JSON file of option overrides")

    ev = sub.add_parser("evaluate", help="score an estimates file against ground truth")
    ev.add_argument("--estimates", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--threshold-vcre", type=float, nargs="+", default=[0.05, 0.10],
                    help="fractions of the image diagonal")
    ev.add_argument("--threshold-pose-m", type=float, default=0.25)
    ev.add_argument("--threshold-pose-deg", type=float, default=5.0)
    ev.add_argument("--estimator-name", default="unknown", help="recorded in report meta")
    ev.add_argument("--seed", type=int, default=DEFAULT_SEED, help="recorded in report meta")
    ev.add_argument("--out-json", default=None)
    ev.add_argument("--out-csv", default=None)

    cv = sub.add_parser("curves", help="emit a precision/ratio CSV")
    cv.add_argument("--estimates", required=True)
    cv.add_argument("--dataset", required=True)
    cv.add_argument("--acceptance", default="vcre-0.10",
                    choices=["vcre-0.05", "vcre-0.10", "pose"])
    cv.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="generate synthetic scenes with ground truth")
    sy.add_argument("--config", required=True, help="JSON generator configuration")
    sy.add_argument("--out", required=True, help="dataset root to create")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            _apply_config_file_with_cli_priority(args, argv)
            run = RunConfig(
                dataset=Path(args.dataset),
                scenes=[s for s in args.scenes.split(",") if s] if args.scenes != "all" else [],
                estimator=args.estimator,
                seed=args.seed,
                out=Path(args.out),
                estimator_config=EstimatorConfig(
                    max_iterations=args.max_iterations,
                    confidence=args.ransac_confidence,
                    min_inliers=args.min_inliers,
                    sampson_threshold=args.sampson_threshold,
                    pnp_threshold_px=args.pnp_threshold_px,
                    procrustes_threshold_m=args.procrustes_threshold_m,
                    scale_relative_tolerance=args.scale_tolerance,
                ),
            )
            return cmd_estimate(run)
        if args.command == "evaluate":
            return cmd_evaluate(args)
        if args.command == "curves":
            return cmd_curves(args)
        if args.command == "synth":
            return cmd_synth(args)
        parser.error(f"unknown command {args.command!r}")
    except (MfposeError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    return EXIT_OK


def _apply_config_file_with_cli_priority(args, argv) -> None:
    """Config-file values override defaults but not explicitly passed flags."""
    if getattr(args, "config", None) is None:
        return
    given = argv if argv is not None else sys.argv[1:]
    explicit = {token.split("=", 1)[0] for token in given if token.startswith("--")}
    try:
        overrides = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise FormatError(args.config, f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(args.config, f"invalid JSON: {exc}") from exc
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        flag = "--" + key.replace("_", "-")
        if not hasattr(args, attr):
            raise FormatError(args.config, f"unknown option {key!r}")
        if flag in explicit:
            continue
        setattr(args, attr, value)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
