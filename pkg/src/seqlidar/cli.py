"""Command-line entry point: ``seqlidar {config,synth,train,sample,edit,eval}``.

Every command reads a :class:`~seqlidar.config.RunConfig` (``--config``,
defaults otherwise), applies ``--set section.key=value`` overrides and
writes the effective configuration next to its outputs.  The dataset root
defaults to ``$SEQLIDAR_DATA`` when set.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from seqlidar.bundle import ConditionBundle
from seqlidar.codec import EquirectImage, SensorConfig, save_image, unproject, write_ply
from seqlidar.config import RunConfig, SamplerSection
from seqlidar.diffusion import SamplerConfig, sample
from seqlidar.edit import EditScript, apply_edits
from seqlidar.errors import ConfigurationError, IngestionError, SeqLidarError
from seqlidar.metrics import EvalConfig, bev_histogram, evaluate_run, format_report, write_pgm
from seqlidar.net import NetConfig, SequenceNoisePredictor
from seqlidar.scene import read_manifest, read_sample, simulate_sequence, synth_world, write_manifest, write_sample
from seqlidar.train import TrainingData, latest_checkpoint, load_model, read_manifest as read_ckpt_manifest, train

log = logging.getLogger("seqlidar")
DATA_ENV = "SEQLIDAR_DATA"
CONFIG_NAME = "config.ini"


def sample_seeds(seed, count):
    """Per-sequence world seeds derived from a master seed."""
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def _sample_dirs(root):
    root = Path(root)
    if (root / "manifest.txt").exists():
        return [root / str(s) for s in read_manifest(root)]
    if (root / "frame_0.l4dt").exists() or (root / "sketch_0.l4dt").exists():
        return [root]
    raise IngestionError(f"{root}: neither a dataset root (manifest.txt) nor a sample directory")


def cmd_synth(config, out_dir, count=None, seed=None):
    """Synthesize ``count`` sequences under ``out_dir`` and write the manifest."""
    count = config.data.count if count is None else count
    seed = config.data.seed if seed is None else seed
    config = replace(config, data=replace(config.data, count=count, seed=seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = sample_seeds(seed, count)
    for s in seeds:
        world = synth_world(s, config.world)
        write_sample(out, simulate_sequence(world, config.data.frames, config.sensor), config.sensor)
    write_manifest(out, seeds)
    config.save(out / CONFIG_NAME)
    return out


def cmd_train(config, data_dir, out_dir, resume=True, max_wall=None, callback=None):
    """Train a model on ``data_dir``; checkpoints and ``train.log`` go to ``out_dir``."""
    samples = [read_sample(d) for d in _sample_dirs(data_dir)]
    shape = samples[0].sketches.shape
    if shape[2:] != (config.sensor.H, config.sensor.W):
        raise ConfigurationError(
            f"dataset frames are {shape[2]}x{shape[3]} but the config says {config.sensor.H}x{config.sensor.W}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / CONFIG_NAME)
    model = SequenceNoisePredictor(config.model, seed=config.train.seed)
    extra = {"sensor": asdict(config.sensor), "frames": int(shape[0]), "sampler": asdict(config.sampler)}
    return train(model, TrainingData(samples), config.train, out, resume=resume, extra_manifest=extra,
                 max_wall=max_wall, callback=callback)


def _checkpoint_dir(path):
    path = Path(path)
    for candidate in (path, path / "checkpoints"):
        if (candidate / "latest.txt").exists():
            return latest_checkpoint(candidate)
    if (path / "manifest.json").exists():
        return path
    raise IngestionError(f"{path}: no checkpoint found")


def write_generated(out_root, seed_name, frames, sensor):
    """Write generated frames as L4DT images, PLY clouds and BEV previews."""
    d = Path(out_root) / str(seed_name)
    d.mkdir(parents=True, exist_ok=True)
    for k, channels in enumerate(frames):
        img = EquirectImage.from_channels(channels)
        save_image(d / f"frame_{k}.l4dt", img, d / f"mask_{k}.l4dt")
        cloud = unproject(img, sensor)
        write_ply(d / f"cloud_{k}.ply", cloud)
        write_pgm(d / f"bev_{k}.pgm", bev_histogram(cloud))
    return d


def cmd_sample(checkpoint, conditions_dir, out_dir, seed=0, steps=None, ema=True):
    """Generate one sequence per condition bundle found in ``conditions_dir``."""
    ckpt = _checkpoint_dir(checkpoint)
    manifest = read_ckpt_manifest(ckpt)
    sensor = SensorConfig(**manifest["sensor"]) if "sensor" in manifest else SensorConfig()
    model = load_model(ckpt, ema=ema)
    dirs = _sample_dirs(conditions_dir)
    samples = [read_sample(d) for d in dirs]
    for s in samples:
        if s.sketches.shape[2:] != (sensor.H, sensor.W):
            raise ConfigurationError(
                f"checkpoint topology {model.cfg} trained for {sensor.H}x{sensor.W} frames; "
                f"conditions in seq {s.seed} are {s.sketches.shape[2]}x{s.sketches.shape[3]}")
    cond = ConditionBundle.stack([s.bundle() for s in samples])
    run_config = _run_config(ckpt, manifest, sensor)
    steps = steps or run_config.sampler.steps
    frames = sample(model, cond, SamplerConfig(steps=steps, seed=seed))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s, d, seq in zip(samples, dirs, frames):
        write_generated(out, d.name, seq, sensor)
    write_manifest(out, [d.name for d in dirs])
    (out / "sample.txt").write_text(f"checkpoint={ckpt}\nseed={seed}\nsteps={steps}\nema={ema}\n")
    run_config.override([f"sampler.steps={steps}", f"sampler.seed={seed}"]).save(out / CONFIG_NAME)
    return out


def _run_config(ckpt, manifest, sensor):
    """The configuration a checkpoint was trained with (rebuilt from its manifest if the run file is gone)."""
    run_file = Path(ckpt).parent.parent / CONFIG_NAME
    if run_file.exists():
        return RunConfig.load(run_file)
    sampler = SamplerSection(**manifest["sampler"]) if "sampler" in manifest else SamplerSection()
    return RunConfig(sensor=sensor, model=NetConfig(**manifest["model"]), sampler=sampler)


def cmd_edit(sample_dir, script_file, out_dir, config=None):
    config = config or RunConfig()
    return apply_edits(sample_dir, EditScript.load(script_file), out_dir, config.sensor)


def cmd_eval(gen_dir, ref_dir, out_file, config=None):
    sensor = (config or RunConfig()).sensor
    return evaluate_run(gen_dir, ref_dir, EvalConfig(sensor=sensor), out_file)


def _load_config(args):
    config = RunConfig.load(args.config) if args.config else RunConfig()
    return config.override(args.set or [])


def build_parser():
    parser = argparse.ArgumentParser(prog="seqlidar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file (key = value sections)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")

    default_data = os.environ.get(DATA_ENV)

    p = sub.add_parser("config", help="write the effective configuration")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth", help="synthesize a dataset")
    common(p)
    p.add_argument("--out", default=default_data, required=default_data is None)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train the noise predictor")
    common(p)
    p.add_argument("--data", default=default_data, required=default_data is None)
    p.add_argument("--out", required=True)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.add_argument("--max-wall", type=float, help="stop after this many seconds")

    p = sub.add_parser("sample", help="generate sequences for condition bundles")
    p.add_argument("--checkpoint", required=True, help="run directory or checkpoint directory")
    p.add_argument("--conditions", default=default_data, required=default_data is None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--raw", action="store_true", help="use live weights instead of the EMA")

    p = sub.add_parser("edit", help="apply an edit script to one sample's conditions")
    common(p)
    p.add_argument("--sample", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare generated and reference datasets")
    common(p)
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", default=default_data, required=default_data is None)
    p.add_argument("--out", required=True, help="metrics.txt path")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "config":
            _load_config(args).save(args.out)
        elif args.command == "synth":
            out = cmd_synth(_load_config(args), args.out, args.count, args.seed)
            print(f"wrote dataset to {out}")
        elif args.command == "train":
            every = lambda step, loss, smooth: log.info("step %d loss %.5f smooth %.5f", step, loss, smooth)  # noqa: E731
            result = cmd_train(_load_config(args), args.data, args.out, resume=not args.fresh,
                               max_wall=args.max_wall, callback=every)
            print(f"trained to step {result.step}; checkpoint {result.checkpoint}")
        elif args.command == "sample":
            out = cmd_sample(args.checkpoint, args.conditions, args.out, args.seed, args.steps, ema=not args.raw)
            print(f"wrote samples to {out}")
        elif args.command == "edit":
            frames = cmd_edit(args.sample, args.script, args.out, _load_config(args))
            print(f"re-rendered frames {frames}")
        elif args.command == "eval":
            metrics = cmd_eval(args.gen, args.ref, args.out, _load_config(args))
            print(format_report(metrics), end="")
    except SeqLidarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
