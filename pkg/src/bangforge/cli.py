"""Command-line entry point for reproducible named experiments.

One command per process; logs are line-delimited JSON on stderr, results go
only to files under --out.  Every run writes a manifest.json sufficient to
re-run it bit-identically (given the same dataset files).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attacks, harness, synthdata
from .bang import BangConfig
from .checkpoint import (
    CheckpointError,
    load_checkpoint_file,
    save_checkpoint_file,
)
from .datasets import DatasetError, LabeledDataset, load_cifar10_bin, load_mnist_idx
from .presets import PRESETS, get_preset
from .reports import read_manifest, stderr_logger, write_csv, write_manifest

DATA_DIR_ENV = "BANGFORGE_DATA_DIR"


class UsageError(Exception):
    pass


class ConfigError(Exception):
    pass


class IoError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--data-dir", default=None,
                     help=f"dataset directory (default ${DATA_DIR_ENV})")
    sub.add_argument("--threads", type=int, default=1,
                     help="worker processes for embarrassingly parallel stages")
    sub.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bangforge",
                     description="balanced-gradient training and robustness evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a preset or manifest")
    _add_common(t)
    t.add_argument("--preset", choices=sorted(PRESETS), default=None)
    t.add_argument("--config", default=None, help="config or manifest JSON to re-run")
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--epsilon", type=float, default=None)
    t.add_argument("--incorrect-scale", type=float, default=None)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)

    a = sub.add_parser("attack", help="run an adversarial campaign on a checkpoint")
    _add_common(a)
    a.add_argument("--model", required=True, help="checkpoint file")
    a.add_argument("--method", choices=["fgs", "hc1"], required=True)
    a.add_argument("--max-images", type=int, default=1000)
    a.add_argument("--max-steps", type=int, default=255)

    n = sub.add_parser("noise-sweep", help="Gaussian-noise robustness over checkpoints")
    _add_common(n)
    n.add_argument("--run-a", required=True, help="train output dir (model A)")
    n.add_argument("--run-b", required=True, help="train output dir (model B)")
    n.add_argument("--stds", default=None, help="comma-separated noise stds")
    n.add_argument("--trials", type=int, default=None)
    n.add_argument("--per-class", type=int, default=None)

    g = sub.add_parser("grid-sweep", help="train one model per (beta, epsilon) cell")
    _add_common(g)
    g.add_argument("--preset", choices=sorted(PRESETS), required=True)
    g.add_argument("--grid", required=True, help='"b0:b1:db,e0:e1:de" inclusive')
    g.add_argument("--iterations", type=int, default=None)
    g.add_argument("--max-images", type=int, default=300,
                   help="test images per cell for the attack evaluations")

    r = sub.add_parser("report", help="summarize a run directory")
    r.add_argument("--run", required=True)

    s = sub.add_parser("synth-data", help="materialize synthetic datasets in the real formats")
    s.add_argument("--dataset", choices=["mnist", "cifar10"], required=True)
    s.add_argument("--train", type=int, default=12000)
    s.add_argument("--test", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data-dir", default=None)
    return parser


def _data_dir(args) -> Path:
    raw = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if not raw:
        raise ConfigError(f"no dataset directory: pass --data-dir or set ${DATA_DIR_ENV}")
    return Path(raw)


def _open(path: Path):
    if not path.exists():
        raise IoError(f"missing dataset file: {path}")
    return open(path, "rb")


def load_split(dataset_id: str, split: str, data_dir: Path) -> LabeledDataset:
    try:
        if dataset_id == "mnist":
            stem = "train" if split == "train" else "t10k"
            with _open(data_dir / f"{stem}-images-idx3-ubyte") as fi, \
                    _open(data_dir / f"{stem}-labels-idx1-ubyte") as fl:
                return load_mnist_idx(fi, fl, split)
        if dataset_id == "cifar10":
            if split == "train":
                paths = sorted(data_dir.glob("data_batch_*.bin"))
                if not paths:
                    raise IoError(f"missing dataset files: {data_dir}/data_batch_*.bin")
            else:
                paths = [data_dir / "test_batch.bin"]
                if not paths[0].exists():
                    raise IoError(f"missing dataset file: {paths[0]}")
            streams = [open(p, "rb") for p in paths]
            try:
                return load_cifar10_bin(streams, split)
            finally:
                for sstream in streams:
                    sstream.close()
        raise ConfigError(f"unknown dataset id {dataset_id!r}")
    except DatasetError as exc:
        raise ConfigError(f"malformed dataset file: {exc}") from exc


def _apply_overrides(run: harness.TrainRun, args) -> harness.TrainRun:
    bang = run.bang
    try:
        if args.beta is not None or args.epsilon is not None \
                or args.incorrect_scale is not None:
            bang = BangConfig(
                beta=args.beta if args.beta is not None else bang.beta,
                epsilon=args.epsilon if args.epsilon is not None else bang.epsilon,
                layer_beta=bang.layer_beta, layer_epsilon=bang.layer_epsilon,
                incorrect_scale=(args.incorrect_scale
                                 if args.incorrect_scale is not None
                                 else bang.incorrect_scale),
                zero_norm_tolerance=bang.zero_norm_tolerance,
                norm_source=bang.norm_source,
            )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    run = replace(run, bang=bang)
    if args.iterations is not None:
        run = replace(run, iterations=args.iterations)
    if args.batch_size is not None:
        run = replace(run, batch_size=args.batch_size)
    if args.seed is not None:
        run = replace(run, seed=args.seed)
    return run


def _train_config(args) -> tuple[harness.TrainRun, int | None, str | None]:
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise IoError(f"missing config file: {path}")
        blob = json.loads(path.read_text())
        cfg = blob.get("config", blob)
        try:
            run = harness.TrainRun.from_dict(cfg["run"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config file: {exc}") from exc
        return _apply_overrides(run, args), cfg.get("train_images"), cfg.get("preset")
    if not args.preset:
        raise UsageError("train needs --preset or --config")
    preset = get_preset(args.preset)
    run = preset.to_run(args.seed if args.seed is not None else 0)
    return _apply_overrides(run, args), preset.train_images, preset.name


def cmd_train(args) -> int:
    run, train_cap, preset_name = _train_config(args)
    log = stderr_logger()
    dataset = load_split(run.dataset_id, "train", _data_dir(args))
    if train_cap:
        dataset = dataset.subset(range(min(train_cap, len(dataset))))
    try:
        checkpoints = harness.train(run, dataset, log=log)
    except harness.DivergedLoss as exc:
        raise ConfigError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for ckpt in checkpoints:
        save_checkpoint_file(ckpt, ckpt_dir / f"ckpt_{ckpt.iteration:07d}.ckpt")
    save_checkpoint_file(checkpoints[-1], out / "final.ckpt")
    write_manifest(out / "manifest.json", "train",
                   {"preset": preset_name, "run": run.to_dict(),
                    "train_images": train_cap})
    log({"event": "done", "checkpoints": len(checkpoints)})
    return 0


def _load_model(path_str: str):
    path = Path(path_str)
    if not path.exists():
        raise IoError(f"missing checkpoint: {path}")
    try:
        ckpt = load_checkpoint_file(path)
    except CheckpointError as exc:
        raise ConfigError(f"unusable checkpoint {path}: {exc}") from exc
    return ckpt, hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_attack(args) -> int:
    ckpt, model_sha = _load_model(args.model)
    net = harness.network_from_checkpoint(ckpt)
    dataset_id = ckpt.meta["run"]["dataset_id"]
    test = load_split(dataset_id, "test", _data_dir(args))
    ids = np.arange(min(args.max_images, len(test)))
    report = attacks.attack_dataset(net, test, args.method, image_ids=ids,
                                    max_steps=args.max_steps)
    out = Path(args.out)
    write_csv(out / "attack_report.csv", attacks.CSV_COLUMNS, report.to_rows())
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "attack_summary.json", "w") as sink:
        json.dump(report.summary(), sink, sort_keys=True, indent=2)
        sink.write("\n")
    write_manifest(out / "manifest.json", "attack",
                   {"model_sha256": model_sha, "method": args.method,
                    "dataset_id": dataset_id, "max_images": args.max_images,
                    "max_steps": args.max_steps})
    stderr_logger()({"event": "done", **{k: v for k, v in report.summary().items()
                                         if k in ("attempts", "successes", "blank_count")}})
    return 0


def _load_run_dir(path_str: str):
    run_dir = Path(path_str)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise IoError(f"not a run directory (no manifest): {run_dir}")
    manifest = read_manifest(manifest_path)
    ckpt_paths = sorted((run_dir / "checkpoints").glob("ckpt_*.ckpt"))
    if not ckpt_paths:
        raise IoError(f"no checkpoints under {run_dir}/checkpoints")
    ckpts = [load_checkpoint_file(p) for p in ckpt_paths]
    return manifest, [c for c in ckpts if c.iteration > 0]


def cmd_noise_sweep(args) -> int:
    manifest_a, ckpts_a = _load_run_dir(args.run_a)
    manifest_b, ckpts_b = _load_run_dir(args.run_b)
    id_a = manifest_a["config"]["run"]["dataset_id"]
    id_b = manifest_b["config"]["run"]["dataset_id"]
    if id_a != id_b:
        raise ConfigError(f"runs use different datasets: {id_a} vs {id_b}")
    preset_name = manifest_a["config"].get("preset")
    preset = PRESETS.get(preset_name) if preset_name else None
    stds = ([float(s) for s in args.stds.split(",")] if args.stds
            else list(preset.noise_stds if preset else (10.0, 50.0, 100.0)))
    trials = args.trials or (preset.noise_trials if preset else 200)
    per_class = args.per_class or (preset.per_class if preset else 20)
    seed = args.seed if args.seed is not None else 0

    test = load_split(id_a, "test", _data_dir(args))
    subset = harness.select_stable_subset([ckpts_a, ckpts_b], test, per_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = {}
    for arg_path, ckpts in ((args.run_a, ckpts_a), (args.run_b, ckpts_b)):
        label = Path(arg_path).name
        labels[label] = arg_path
        report = harness.noise_sweep(ckpts, test, subset.ids, stds, trials, seed)
        write_csv(out / f"noise_{label}.csv", harness.NOISE_CSV_COLUMNS,
                  report.to_rows())
    with open(out / "stable_subset.json", "w") as sink:
        json.dump({"ids": [int(i) for i in subset.ids],
                   "shortfall": {str(k): v for k, v in subset.shortfall.items()},
                   "per_class": per_class}, sink, sort_keys=True, indent=2)
        sink.write("\n")
    write_manifest(out / "manifest.json", "noise-sweep",
                   {"runs": labels, "stds": stds, "trials": trials,
                    "per_class": per_class, "seed": seed, "dataset_id": id_a})
    return 0


def _parse_grid(spec: str):
    try:
        beta_part, eps_part = spec.split(",")
        axes = []
        for part in (beta_part, eps_part):
            start, stop, step = (float(x) for x in part.split(":"))
            count = int(round((stop - start) / step)) + 1 if step else 1
            if count < 1:
                raise ValueError(part)
            axes.append([round(start + i * step, 10) for i in range(count)])
        return axes[0], axes[1]
    except (ValueError, IndexError) as exc:
        raise ConfigError(f'bad --grid {spec!r}; want "b0:b1:db,e0:e1:de"') from exc


def cmd_grid_sweep(args) -> int:
    preset = get_preset(args.preset)
    betas, epsilons = _parse_grid(args.grid)
    run = preset.to_run(args.seed if args.seed is not None else 0)
    if args.iterations is not None:
        run = replace(run, iterations=args.iterations)
    data_dir = _data_dir(args)
    train_ds = load_split(run.dataset_id, "train", data_dir)
    if preset.train_images:
        train_ds = train_ds.subset(range(min(preset.train_images, len(train_ds))))
    test_ds = load_split(run.dataset_id, "test", data_dir)
    report = harness.grid_sweep(run, train_ds, test_ds, betas, epsilons,
                                eval_images=args.max_images, threads=args.threads)
    out = Path(args.out)
    write_csv(out / "grid_report.csv", harness.GRID_CSV_COLUMNS, report.rows)
    write_manifest(out / "manifest.json", "grid-sweep",
                   {"preset": preset.name, "run": run.to_dict(),
                    "betas": betas, "epsilons": epsilons,
                    "eval_images": args.max_images})
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise IoError(f"no manifest under {run_dir}")
    manifest = read_manifest(manifest_path)
    print(f"command: {manifest['command']}   run id: {manifest['run_id']}")
    summary = run_dir / "attack_summary.json"
    if summary.exists():
        data = json.loads(summary.read_text())
        rate = data["success_rate"]
        print(f"{data['method']}: {data['successes']}/{data['attempts']} succeeded"
              f" (rate {rate if rate is not None else 'n/a'};"
              f" blank {data['blank_count']}, exhausted {data['exhausted_count']})")
        if data["pass_mean"] is not None:
            print(f"  pass {data['pass_mean']:.4f} +- {data['pass_std']:.4f};"
                  f" linf {data['linf_mean']:.2f} +- {data['linf_std']:.2f}")
    for csv_path in sorted(run_dir.glob("*.csv")):
        with open(csv_path) as source:
            lines = source.read().strip().splitlines()
        print(f"{csv_path.name}: {len(lines) - 1} rows")
    return 0


def cmd_synth_data(args) -> int:
    raw = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if not raw:
        raise ConfigError(f"no dataset directory: pass --data-dir or set ${DATA_DIR_ENV}")
    if args.dataset == "mnist":
        names = synthdata.write_synth_mnist(raw, args.train, args.test, args.seed)
    else:
        names = synthdata.write_synth_cifar10(raw, args.train, args.test, args.seed)
    stderr_logger()({"event": "synth-data", "dataset": args.dataset,
                     "files": names})
    return 0


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "noise-sweep": cmd_noise_sweep,
    "grid-sweep": cmd_grid_sweep,
    "report": cmd_report,
    "synth-data": cmd_synth_data,
}


def dispatch(argv) -> int:
    log = stderr_logger()
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log({"error": "usage", "message": str(exc)})
        return 2
    except ConfigError as exc:
        log({"error": "config", "message": str(exc)})
        return 3
    except IoError as exc:
        log({"error": "io", "message": str(exc)})
        return 4
    except KeyError as exc:
        log({"error": "config", "message": str(exc)})
        return 3


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
