"""
micro: command-line entry point for the experiments

    micro <group> <verb> [flags]

Results go to the files named by --out (CSV/JSON), logs and progress bars to
stderr, and every run leaves a run.json beside its output.
"""
import functools
import json
import logging
import os
import shutil
import sys
from datetime import datetime

import click
import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from pydantic import ValidationError as PydanticValidationError

from microbench.config import build, get_settings, make_rng
from microbench.data_loader import load_trajectory, load_transitions, save_trajectory, save_transitions, write_csv
from microbench.errors import MicrobenchError
from microbench.figures import emit_figure_data
from microbench.geometry import CameraIntrinsics
from microbench.imaging import load_pgm, save_pgm
from microbench.locomotion import (
    MbrlConfig,
    TrainConfig,
    collect_rollout,
    distribution_summary,
    fig4_sweep,
    kmeans_filter,
    random_policy,
    run_mbrl,
)
from microbench.micronet import (
    CONVENTIONS,
    MacConvention,
    build_microbotnet,
    compare_with_reference,
    convention_ledger,
    count_macs,
    forward,
    load_weights,
    random_weights,
    save_weights,
    softmax,
    tradeoff_table,
)
from microbench.odometry import NoiseSpec, VoConfig, noise_sweep, noisy_frames, run_vo, trajectory_error
from microbench.scenes import (
    IMAGE_DIRS,
    SceneSpec,
    bundled_scene,
    export_kitti,
    generate_scene,
    load_kitti,
    mine_pairs,
    tracked_pairs,
)
from microbench.slipd import SlipdModel, load_model, save_model, slipd_train

logger = logging.getLogger("micro")

MAX_TRAINING_PAIRS = 20000


class RunConfig(BaseModel):
    """Resolved invocation, echoed to run.json"""

    model_config = ConfigDict(frozen=True)

    command: str
    flags: dict
    seed: int
    jobs: int
    progress: bool
    output: str

    @property
    def rng(self):
        return make_rng(self.seed)


def parse_list(text, cast=float):
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise click.BadParameter(f"not a comma-separated list: {text}") from e


def parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as e:
        raise click.BadParameter(f"expected WxH, got {text}") from e
    return w, h


def noise_option(sigma, walk_limit):
    if sigma is not None and walk_limit is not None:
        raise click.UsageError("--sigma and --walk-limit are mutually exclusive")
    if sigma is not None:
        return build(NoiseSpec, kind="static", level=sigma)
    if walk_limit is not None:
        return build(NoiseSpec, kind="walk", level=walk_limit)
    return NoiseSpec()


def summary_paths(path, detectors):
    """One ratio summary per detector family; extra families get a _<detector> suffix"""
    stem, ext = os.path.splitext(path)
    return {d: path if i == 0 else f"{stem}_{d}{ext}" for i, d in enumerate(detectors)}


def load_sequence(source):
    """(name, frames, ground truth, intrinsics) of a KITTI directory or the bundled scene"""
    if source == "bundled":
        scene = bundled_scene()
        return "bundled", scene.frames, scene.gt, scene.intrinsics
    seq = load_kitti(source)
    return os.path.basename(os.path.normpath(source)), seq.frames(), seq.trajectory(), seq.intrinsics


def write_json(payload, path=None):
    text = json.dumps(payload, indent=2, sort_keys=True)
    click.echo(text)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")


def write_run_json(run, directory):
    os.makedirs(directory, exist_ok=True)
    payload = {
        **run.model_dump(),
        "settings": get_settings().model_dump(),
        "timestamp": datetime.now().isoformat(timespec="seconds"),
    }
    with open(os.path.join(directory, "run.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)


def experiment(group, name, out_is_dir=False):
    """
    Register a verb with the shared --seed/--jobs/--quiet/--log-level flags

    The wrapped function receives a RunConfig and its own options; run.json is
    written to the output directory (or the directory of the output file).
    """
    def decorate(fn):
        @group.command(name)
        @click.option("--seed", type=int, default=None, help="Master seed (default: MICRO_SEED).")
        @click.option("--jobs", type=int, default=None, help="Parallel workers for sweeps.")
        @click.option("--quiet", is_flag=True, help="Hide progress bars.")
        @click.option("--log-level", default=None, help="Logging level (default: MICRO_LOG_LEVEL).")
        @click.pass_context
        @functools.wraps(fn)
        def command(ctx, seed, jobs, quiet, log_level, **options):
            settings = get_settings()
            logging.getLogger().setLevel((log_level or settings.log_level).upper())
            out = options.get("out")
            if out is None:
                directory = settings.out_dir
            else:
                directory = out if out_is_dir else (os.path.dirname(out) or ".")
            run = RunConfig(
                command=f"{ctx.parent.info_name} {ctx.info_name}",
                flags=dict(options),
                seed=settings.seed if seed is None else seed,
                jobs=settings.jobs if jobs is None else jobs,
                progress=not quiet,
                output=str(out or directory),
            )
            logger.info("Running %s (seed %d)", run.command, run.seed)
            fn(run, **options)
            write_run_json(run, directory)
        return command
    return decorate


@click.group()
def cli():
    """Reproducible experiments: visual odometry, MicroBotNet accounting and MBRL"""


@cli.group()
def scene():
    """Synthetic sequences in the KITTI layout"""


@cli.group()
def noise():
    """Sensor-noise injection"""


@cli.group()
def vo():
    """Visual odometry runs, evaluation and noise sweeps"""


@cli.group()
def slipd():
    """SLIPD detector training"""


@cli.group()
def net():
    """MicroBotNet accounting and inference"""


@cli.group()
def loco():
    """Model-based RL on the simulated quadrotor"""


@experiment(scene, "gen", out_is_dir=True)
@click.option("--frames", type=int, default=100, show_default=True)
@click.option("--points", type=int, default=5000, show_default=True)
@click.option("--size", default="256x256", show_default=True, help="Image size WxH.")
@click.option("--look", type=float, default=0.0, show_default=True, help="Camera yaw from the travel direction, degrees.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def scene_gen(run, frames, points, size, look, out):
    """Render a synthetic sequence with exact ground truth"""
    width, height = parse_size(size)
    spec = build(SceneSpec, n_frames=frames, n_points=points, width=width, height=height, look=look,
                 intrinsics=CameraIntrinsics(fx=100.0, fy=100.0, cx=width / 2, cy=height / 2))
    export_kitti(generate_scene(spec, run.rng, jobs=run.jobs), out)


@experiment(noise, "inject", out_is_dir=True)
@click.option("--in", "source", required=True, type=click.Path(file_okay=False))
@click.option("--sigma", type=float, default=None, help="Static noise standard deviation.")
@click.option("--walk-limit", type=float, default=None, help="Random-walk noise limit.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
def noise_inject(run, source, sigma, walk_limit, out):
    """Copy a sequence with per-frame Gaussian noise added"""
    spec = noise_option(sigma, walk_limit)
    seq = load_kitti(source)
    image_dir = os.path.join(out, IMAGE_DIRS[0])
    os.makedirs(image_dir, exist_ok=True)
    rows = []
    for k, (frame, used) in enumerate(noisy_frames(seq.frames(), spec, run.rng)):
        save_pgm(frame, os.path.join(image_dir, f"{k:06d}.pgm"))
        rows.append({"frame": k, "sigma": used})
    for name in ("poses.txt", "calib.txt"):
        shutil.copyfile(os.path.join(source, name), os.path.join(out, name))
    write_csv(pd.DataFrame(rows, columns=["frame", "sigma"]), os.path.join(out, "noise.csv"), run.seed)


def _vo_config(detector, slipd_model, dynamic, redetect, spec):
    model = None
    if detector == "slipd":
        if not slipd_model:
            raise click.UsageError("--detector slipd needs --slipd-model")
        model = load_model(slipd_model)
    return build(VoConfig, detector=detector, dynamic=dynamic, redetect=redetect, noise=spec, slipd=model)


@experiment(vo, "run")
@click.option("--seq", required=True, help="KITTI-style directory or 'bundled'.")
@click.option("--detector", type=click.Choice(["fast", "slipd"]), default="fast", show_default=True)
@click.option("--slipd-model", type=click.Path(dir_okay=False), default=None)
@click.option("--dynamic", is_flag=True, help="Enable Dynamic Thresholding.")
@click.option("--redetect", is_flag=True, help="Re-detect until the count is in range.")
@click.option("--sigma", type=float, default=None)
@click.option("--walk-limit", type=float, default=None)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def vo_run(run, seq, detector, slipd_model, dynamic, redetect, sigma, walk_limit, out):
    """Estimate a trajectory and write it as frame,x,y,z"""
    cfg = _vo_config(detector, slipd_model, dynamic, redetect, noise_option(sigma, walk_limit))
    _, frames, gt, K = load_sequence(seq)
    result = run_vo(frames, cfg, gt, K, run.rng, progress=run.progress)
    save_trajectory(result.trajectory, out, run.seed)
    write_json({
        "mse": trajectory_error(result.trajectory, gt, "mse"),
        "mee": trajectory_error(result.trajectory, gt, "mee"),
        "degenerate_frames": result.degenerate_frames,
        "frames": len(frames),
    })


@experiment(vo, "eval")
@click.option("--est", required=True, type=click.Path(dir_okay=False))
@click.option("--gt", required=True, type=click.Path(dir_okay=False))
@click.option("--metric", type=click.Choice(["mse", "mee"]), default="mse", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def vo_eval(run, est, gt, metric, out):
    """Trajectory error between an estimate and ground truth"""
    value = trajectory_error(load_trajectory(est), load_trajectory(gt), metric)
    write_json({"metric": metric, "value": value}, out)


@experiment(vo, "sweep")
@click.option("--scene", "source", default="bundled", show_default=True, help="KITTI-style directory or 'bundled'.")
@click.option("--sigmas", default=None, help="Static noise levels, e.g. 5,20,40.")
@click.option("--walk-limits", default=None, help="Walk noise limits, e.g. 15,30,45.")
@click.option("--seeds", type=int, default=10, show_default=True)
@click.option("--detectors", default="fast", show_default=True, help="fast, slipd or fast,slipd.")
@click.option("--slipd-model", type=click.Path(dir_okay=False), default=None)
@click.option("--summary", type=click.Path(dir_okay=False), default=None,
              help="Also write the ratio table of the first detector; others go to <name>_<detector>.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def vo_sweep(run, source, sigmas, walk_limits, seeds, detectors, slipd_model, summary, out):
    """Fixed versus dynamic threshold over a noise grid"""
    if (sigmas is None) == (walk_limits is None):
        raise click.UsageError("give exactly one of --sigmas and --walk-limits")
    kind, levels = ("static", sigmas) if sigmas is not None else ("walk", walk_limits)
    noises = [build(NoiseSpec, kind=kind, level=v) for v in parse_list(levels)]
    names = tuple(parse_list(detectors, str))
    unknown = set(names) - {"fast", "slipd"}
    if unknown:
        raise click.BadParameter(f"unknown detectors {sorted(unknown)}", param_hint="--detectors")
    model = None
    if "slipd" in names:
        if not slipd_model:
            raise click.UsageError("sweeping slipd needs --slipd-model")
        model = load_model(slipd_model)
    name, frames, gt, K = load_sequence(source)
    rows = noise_sweep(frames, gt, K, noises, names, seeds=seeds, master_seed=run.seed, slipd_model=model,
                       sequence=name, jobs=run.jobs, progress=run.progress)
    write_csv(rows, out, run.seed, list(rows.columns))
    if summary:
        for detector, path in summary_paths(summary, names).items():
            emit_figure_data(rows, "fig5" if kind == "static" else "fig6", path, run.seed, detector)


@experiment(slipd, "train")
@click.option("--scene", "source", default="bundled", show_default=True, help="KITTI-style directory or 'bundled'.")
@click.option("--block", type=int, default=5, show_default=True)
@click.option("--k", "target_k", type=int, default=8, show_default=True)
@click.option("--lambda", "lam", type=float, default=1e-3, show_default=True)
@click.option("--steps", type=int, default=1000, show_default=True)
@click.option("--pairs", type=int, default=MAX_TRAINING_PAIRS, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def slipd_train_cmd(run, source, block, target_k, lam, steps, pairs, out):
    """Train a sparse linear detector on corresponding patches"""
    cfg = build(SlipdModel, block=block, target_k=target_k, lam=lam)
    rng = run.rng
    if source == "bundled":
        scene_data = bundled_scene()
        training = mine_pairs(scene_data.correspondences, scene_data.frames, block, pairs, rng)
    else:
        training = tracked_pairs(load_kitti(source).frames(), block, pairs, rng)
    model = slipd_train(training, cfg, steps, rng, progress=run.progress)
    save_model(model, out)
    logger.info("Final loss %.6f over %d pairs", model.train_losses[-1], len(training))


def _network(alpha, classes, convention):
    return build_microbotnet(alpha, classes, MacConvention.named(convention))


@experiment(net, "macs")
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--convention", type=click.Choice(CONVENTIONS), default="default", show_default=True)
@click.option("--json", "json_path", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def net_macs(run, alpha, classes, convention, json_path, out):
    """Per-layer MAC and parameter report with the reference discrepancy ledger"""
    report = count_macs(_network(alpha, classes, convention))
    comparison = compare_with_reference(report)
    if comparison:
        logger.info("reference MACs %d (%+.2f%%), params %d (%+.2f%%)",
                    comparison["reference_macs"], 100 * comparison["macs_relative"],
                    comparison["reference_params"], 100 * comparison["params_relative"])
    payload = report.to_dict()
    payload["convention"] = convention
    payload["reference"] = comparison
    payload["ledger"] = convention_ledger(alpha, classes)
    write_json(payload, json_path or out)


@experiment(net, "tradeoff")
@click.option("--alphas", default="0.25,0.32,1.0", show_default=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def net_tradeoff(run, alphas, classes, out):
    """MAC and parameter totals across width multipliers"""
    write_csv(tradeoff_table(parse_list(alphas), classes), out, run.seed)


@experiment(net, "init")
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def net_init(run, alpha, classes, out):
    """Write a randomly initialized weight bundle"""
    spec = build_microbotnet(alpha, classes)
    save_weights(random_weights(spec, run.rng), out)


def _load_image(path):
    if path.endswith(".npy"):
        return np.load(path)
    img = load_pgm(path).normalized()
    return np.repeat(img[:, :, None], 3, axis=2)


@experiment(net, "infer")
@click.option("--alpha", type=float, default=1.0, show_default=True)
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--weights", required=True, type=click.Path(dir_okay=False))
@click.option("--image", required=True, type=click.Path(dir_okay=False), help="32x32x3 .npy or 32x32 PGM.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def net_infer(run, alpha, classes, weights, image, out):
    """Class probabilities for one image"""
    spec = build_microbotnet(alpha, classes)
    logits = forward(spec, load_weights(spec, weights), _load_image(image))
    probs = softmax(logits)
    write_json({"logits": logits.tolist(), "probabilities": probs.tolist(), "top1": int(np.argmax(probs))}, out)


@experiment(loco, "collect")
@click.option("--steps", type=int, default=4000, show_default=True)
@click.option("--episode-length", type=int, default=100, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def loco_collect(run, steps, episode_length, out):
    """Random-policy transitions from the simulator"""
    save_transitions(collect_rollout(random_policy, steps, run.rng, episode_length=episode_length), out, run.seed)


@experiment(loco, "filter")
@click.option("--in", "source", required=True, type=click.Path(dir_okay=False))
@click.option("--k", type=int, required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def loco_filter(run, source, k, out):
    """Keep the k transitions nearest the k-means centroids"""
    dataset = load_transitions(source)
    filtered = kmeans_filter(dataset, k, run.rng)
    save_transitions(filtered, out, run.seed)
    before = distribution_summary(dataset)["mean_nn_distance"].iloc[0]
    after = distribution_summary(filtered)["mean_nn_distance"].iloc[0]
    logger.info("mean nearest-neighbour distance %.4f -> %.4f", before, after)


@experiment(loco, "fig4")
@click.option("--data", required=True, type=click.Path(dir_okay=False))
@click.option("--sizes", required=True, help="Subset sizes, e.g. 500,1000,2000.")
@click.option("--models", type=int, default=25, show_default=True)
@click.option("--val", "val_path", type=click.Path(dir_okay=False), default=None,
              help="Validation transitions (default: 800 fresh random-policy steps).")
@click.option("--epochs", type=int, default=100, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def loco_fig4(run, data, sizes, models, val_path, epochs, out):
    """Validation error of filtered, random and full training sets"""
    master = load_transitions(data)
    if val_path:
        val = load_transitions(val_path)
    else:
        val = collect_rollout(random_policy, 800, run.rng, episode_length=100)
    table = fig4_sweep(master, val, parse_list(sizes, int), models=models, seed=run.seed, jobs=run.jobs,
                       cfg=build(TrainConfig, epochs=epochs), progress=run.progress)
    emit_figure_data(table, "fig4", out, run.seed)


@experiment(loco, "mbrl", out_is_dir=True)
@click.option("--iters", type=int, default=5, show_default=True)
@click.option("--filter-k", type=int, default=500, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
def loco_mbrl(run, iters, filter_k, out):
    """Run the train / act / aggregate / filter loop"""
    result = run_mbrl(iters, filter_k, MbrlConfig(), seed=run.seed, progress=run.progress)
    os.makedirs(out, exist_ok=True)
    columns = ["iteration", "val_mse", "mean_reward", "size_before", "size_after", "reduction", "kmeans_iterations"]
    metrics = pd.DataFrame([{c: m[c] for c in columns} for m in result.metrics], columns=columns)
    metrics["random_reward"] = result.random_reward
    write_csv(metrics, os.path.join(out, "metrics.csv"), run.seed)
    traces = pd.DataFrame(
        [{"iteration": m["iteration"], "step": i, "objective": v}
         for m in result.metrics for i, v in enumerate(m["objective_trace"])],
        columns=["iteration", "step", "objective"])
    write_csv(traces, os.path.join(out, "kmeans_objective.csv"), run.seed)
    save_transitions(result.dataset, os.path.join(out, "dataset.csv"), run.seed)


def run(argv=None):
    """
    Execute one invocation

    Returns:
        int: 0 on success, 1 on usage errors, 2 on runtime errors
    """
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        result = cli.main(args=argv, prog_name="micro", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (MicrobenchError, PydanticValidationError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return 2
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(run())
