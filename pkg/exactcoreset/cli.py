import argparse
import logging
import sys
from pathlib import Path
from typing import Any, List, Mapping, Sequence

from tqdm import tqdm

from exactcoreset import __version__
from exactcoreset.coreset import NUM_CLUSTERS
from exactcoreset.dataset import (
    POINT_FORMATS,
    SyntheticLoop,
    load_points,
    read_pose,
    write_trajectory,
)
from exactcoreset.downsample import sample_pair
from exactcoreset.evalbench import (
    NOISE_LEVELS,
    POINT_BUDGETS,
    TARGET_SIZES,
    bench_configurations,
    bench_extraction,
    displacement_error_sweep,
    kld_table,
    make_pair_problem,
    validate_random,
)
from exactcoreset.optimizer import (
    OptimizerConfig,
    ate,
    build_factor_graph,
    detect_overlaps,
    optimize,
)
from exactcoreset.quadratic import FLAT_DIM, MIN_ROWS, quadratic_of, reconstruct
from exactcoreset.registration import Pose, RegistrationConfig, estimate_covariances
from exactcoreset.utils import ExactCoresetError, Timer, save_json, threads_from_env

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"


def int_list(text: str) -> List[int]:
    return [int(value) for value in text.split(",") if value]


def float_list(text: str) -> List[float]:
    return [float(value) for value in text.split(",") if value]


def run_config(args: argparse.Namespace) -> Mapping[str, Any]:
    """The parsed arguments as they are echoed into every report."""
    config = {key: value for key, value in vars(args).items() if key != "func"}
    config["version"] = __version__
    return config


def cmd_validate(args) -> int:
    report = validate_random(
        args.trials, args.n, args.m, args.seed, args.k, args.nullspace, args.threads
    )
    report.config = {**report.config, "run": run_config(args)}
    if args.out:
        report.save(args.out)
    print(f"max error {report.summary['max_error']:.3e}: {'pass' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def cmd_downsample(args) -> int:
    registration = RegistrationConfig(
        k_neighbors=args.k_neighbors, max_correspondence_distance=args.max_distance
    )
    target = estimate_covariances(
        load_points(args.target), args.k_neighbors, registration.covariance_epsilon, args.threads
    )
    source = estimate_covariances(
        load_points(args.source), args.k_neighbors, registration.covariance_epsilon, args.threads
    )
    pose_i = read_pose(args.pose_i) if args.pose_i else Pose.identity()
    pose_j = read_pose(args.pose_j) if args.pose_j else Pose.identity()

    timer = Timer()
    factor, system = sample_pair(
        target,
        source,
        pose_i,
        pose_j,
        args.m,
        args.seed,
        (0, 1),
        args.k,
        registration,
        timer=timer,
        threads=args.threads,
    )
    error = quadratic_of(system).relative_error(reconstruct(system, factor.selection))
    summary = {
        "run": run_config(args),
        "rows": len(factor.selection),
        "source_rows": factor.selection.n_source_rows,
        "points": len(factor.point_ids),
        "axis_counts": factor.axis_counts().tolist(),
        "relative_error": error,
    }
    if args.out:
        save_json(args.out / "factor.json", factor.state_dict(), logger)
        save_json(args.out / "summary.json", summary, logger)
        save_json(args.out / "timing.json", timer.state_dict(), logger)
    print(
        f"{len(factor.selection)} of {factor.selection.n_source_rows} rows "
        f"({len(factor.point_ids)} points), reconstruction error {error:.3e}"
    )
    return 0


def cmd_bench(args) -> int:
    report = bench_extraction(args.n, args.m, args.trials, args.seed, args.k, args.nullspace)
    report.config = {**report.config, "run": run_config(args)}
    reports = [report]
    if args.configurations:
        configurations = bench_configurations(args.n, min(args.m), args.trials, args.seed, args.k)
        configurations.config = {**configurations.config, "run": run_config(args)}
        reports.append(configurations)
    if args.out:
        for report in reports:
            report.save(args.out)
    return 0 if all(report.passed for report in reports) else 1


def cmd_kld(args) -> int:
    pair = make_pair_problem(args.num_points, args.seed, threads=args.threads)
    report = kld_table(pair, args.points, args.m, args.trials, args.seed, args.k)
    report.config = {**report.config, "run": run_config(args)}
    if args.out:
        report.save(args.out)
    for name, row in report.summary.items():
        print(f"{name:>14}: {row['mean']:.3f} +- {row['std']:.3f} ({row['degenerate']} degenerate)")
    return 0 if report.passed else 1


def cmd_displace(args) -> int:
    pair = make_pair_problem(args.num_points, args.seed, threads=args.threads)
    report = displacement_error_sweep(pair, args.m, args.noise, args.trials, args.seed, args.k)
    report.config = {**report.config, "run": run_config(args)}
    if args.out:
        report.save(args.out)
    for name, row in report.summary.items():
        print(f"{name:>20}: {row['mean']:.3e} +- {row['std']:.3e}")
    return 0 if report.passed else 1


def cmd_optimize(args) -> int:
    registration = RegistrationConfig(
        k_neighbors=args.k_neighbors,
        max_correspondence_distance=args.max_distance,
        refresh_whitener=args.refresh_whitener,
    )
    loop = SyntheticLoop(
        args.frames, args.points_per_frame, point_noise=args.point_noise, seed=args.seed
    )
    logger.info("Estimating covariances")
    clouds, ground_truth = [], []
    for index in tqdm(range(len(loop))):
        points, pose = loop[index]
        clouds.append(
            estimate_covariances(
                points, args.k_neighbors, registration.covariance_epsilon, args.threads
            )
        )
        ground_truth.append(pose)
    initial = loop.initial_poses(args.rotation_noise, args.translation_noise)

    overlaps = detect_overlaps(clouds, initial, args.min_overlap, args.max_distance, args.threads)
    target_size = None if args.full else args.m
    graph = build_factor_graph(
        clouds, initial, overlaps, target_size, args.seed, args.k, registration, threads=args.threads
    )
    config = OptimizerConfig(max_iterations=args.max_iterations, threads=args.threads)
    result = optimize(graph, config)

    rmse, std = ate(result.poses, ground_truth)
    initial_rmse, _ = ate(initial, ground_truth)
    report = {
        "run": run_config(args),
        "overlaps": [list(pair) for pair in overlaps],
        "ate": {"rmse": rmse, "std": std, "initial_rmse": initial_rmse},
        "memory_bytes": graph.nbytes,
        **result.state_dict(),
    }
    print(
        f"ATE {initial_rmse:.4f} -> {rmse:.4f} m, {result.row_evaluations} rows evaluated, "
        f"{graph.nbytes} bytes of factors"
    )
    if args.out:
        save_json(args.out / "optimize.json", report, logger)
        write_trajectory(args.out / "trajectory.txt", result.poses)
        write_trajectory(args.out / "ground_truth.txt", ground_truth)
        write_trajectory(args.out / "initial.txt", initial)
        with open(args.out / "costs.csv", "w") as file:
            file.write("iteration,cost\n")
            file.writelines(f"{k},{cost!r}\n" for k, cost in enumerate(result.costs))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exactcoreset",
        description="Exact coresets of point cloud registration residuals.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master random seed.")
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker count (defaults to $EXACTCORESET_THREADS or 1).",
    )
    common.add_argument("--out", type=Path, default=None, help="path to the output directory.")
    common.add_argument("--k", type=int, default=NUM_CLUSTERS, help="number of clusters K.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    validate = subparsers.add_parser(
        "validate", parents=[common], help="check exactness on random residual systems."
    )
    validate.add_argument("--trials", type=int, default=100)
    validate.add_argument("--n", type=int, default=30000, help="residual rows per trial.")
    validate.add_argument("--m", type=int, default=29, help="target size M.")
    validate.add_argument("--nullspace", choices=("lu", "svd"), default="lu")
    validate.set_defaults(func=cmd_validate)

    downsample = subparsers.add_parser(
        "downsample", parents=[common], help="exactly downsample a pair of point clouds."
    )
    downsample.add_argument("target", type=Path, help="path to the target cloud (any format Open3D reads, e.g. .xyz, .ply, .pcd).")
    downsample.add_argument("source", type=Path, help="path to the source cloud.")
    downsample.add_argument("--pose-i", type=Path, default=None, help="pose JSON of the target.")
    downsample.add_argument("--pose-j", type=Path, default=None, help="pose JSON of the source.")
    downsample.add_argument("--m", type=int, default=29)
    downsample.add_argument("--k-neighbors", type=int, default=10)
    downsample.add_argument("--max-distance", type=float, default=1.0)
    downsample.set_defaults(func=cmd_downsample)

    bench = subparsers.add_parser("bench", parents=[common], help="time the extraction.")
    bench.add_argument("--m", type=int_list, default=list(TARGET_SIZES))
    bench.add_argument("--n", type=int, default=30000)
    bench.add_argument("--trials", type=int, default=10)
    bench.add_argument("--nullspace", choices=("lu", "svd"), default="lu")
    bench.add_argument(
        "--configurations",
        action="store_true",
        help="also compare the 43-dim/SVD, 28-dim/SVD and 28-dim/LU extractions.",
    )
    bench.set_defaults(func=cmd_bench)

    kld = subparsers.add_parser("kld", parents=[common], help="normalized KLD table.")
    kld.add_argument("--points", type=int_list, default=list(POINT_BUDGETS))
    kld.add_argument("--m", type=int_list, default=[29, 64, 256, 1024])
    kld.add_argument("--trials", type=int, default=100)
    kld.add_argument("--num-points", type=int, default=10000, help="points per frame.")
    kld.set_defaults(func=cmd_kld)

    displace = subparsers.add_parser(
        "displace", parents=[common], help="displacement errors under rotation noise."
    )
    displace.add_argument("--m", type=int_list, default=[29])
    displace.add_argument("--noise", type=float_list, default=list(NOISE_LEVELS), help="degrees.")
    displace.add_argument("--trials", type=int, default=20)
    displace.add_argument("--num-points", type=int, default=10000, help="points per frame.")
    displace.set_defaults(func=cmd_displace)

    optimize_parser = subparsers.add_parser(
        "optimize", parents=[common], help="multi-frame registration on a synthetic loop."
    )
    optimize_parser.add_argument("--frames", type=int, default=20)
    optimize_parser.add_argument("--points-per-frame", type=int, default=2000)
    optimize_parser.add_argument("--m", type=int, default=29)
    optimize_parser.add_argument("--full", action="store_true", help="use every residual.")
    optimize_parser.add_argument("--rotation-noise", type=float, default=1.0, help="degrees.")
    optimize_parser.add_argument("--translation-noise", type=float, default=0.05, help="meters.")
    optimize_parser.add_argument("--point-noise", type=float, default=0.0, help="meters.")
    optimize_parser.add_argument("--min-overlap", type=float, default=0.3)
    optimize_parser.add_argument("--max-distance", type=float, default=1.0)
    optimize_parser.add_argument("--k-neighbors", type=int, default=10)
    optimize_parser.add_argument("--max-iterations", type=int, default=100)
    optimize_parser.add_argument("--refresh-whitener", action="store_true")
    optimize_parser.set_defaults(func=cmd_optimize)
    return parser


def check_args(parser: argparse.ArgumentParser, args: argparse.Namespace):
    sizes = args.m if isinstance(getattr(args, "m", None), list) else [getattr(args, "m", MIN_ROWS)]
    if any(size < MIN_ROWS for size in sizes):
        parser.error(f"--m must be >= {MIN_ROWS}, got {sizes}")
    if args.k < FLAT_DIM + 2:
        parser.error(f"--k must be >= {FLAT_DIM + 2}, got {args.k}")
    if getattr(args, "n", MIN_ROWS) < MIN_ROWS:
        parser.error(f"--n must be >= {MIN_ROWS}, got {args.n}")
    if getattr(args, "trials", 1) < 1:
        parser.error(f"--trials must be >= 1, got {args.trials}")
    if getattr(args, "frames", 2) < 2:
        parser.error(f"--frames must be >= 2, got {args.frames}")
    if args.threads is not None and args.threads < 1:
        parser.error(f"--threads must be >= 1, got {args.threads}")
    for cloud in (getattr(args, "target", None), getattr(args, "source", None)):
        if cloud is not None and cloud.suffix.lower() not in POINT_FORMATS:
            parser.error(f"{cloud}: unsupported point cloud format, expected one of {POINT_FORMATS}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    check_args(parser, args)
    args.threads = threads_from_env(args.threads)

    logging.basicConfig(level=logging.INFO)
    handler = None
    if args.out:
        args.out.mkdir(exist_ok=True, parents=True)
        handler = logging.FileHandler(args.out / "exactcoreset.log")
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt="%m/%d/%Y %I:%M:%S"))
        logging.getLogger().addHandler(handler)

    try:
        return args.func(args)
    except ExactCoresetError as error:
        logger.error(f"{type(error).__name__}: {error}")
        return 1
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
