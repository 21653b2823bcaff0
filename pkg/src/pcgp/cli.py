#!/usr/bin/env python3
"""CLI for generating data, training, evaluating and predicting."""

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcgp import common as rc
from pcgp import datagen, deepnet, export, trainer
from pcgp.config import TrainConfig, load_config
from pcgp.datagen import Dataset

CHECKPOINT_NAME = "checkpoint.pcgpnet"
CONFIG_NAME = "config.txt"


@dataclass(frozen=True)
class RunConfig:
    config: TrainConfig
    dataset: Path | None = None
    checkpoint: Path | None = None
    out: Path | None = None


def _require_file(path: str | Path | None, what: str) -> Path | None:
    if path is None:
        return None
    path = Path(path)
    if not path.is_file():
        rc.die(f"{what} not found: {path}")
    return path


def _output_dir(path: str | Path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_path(args: argparse.Namespace) -> Path | None:
    """An explicit --config wins; otherwise reuse the one stored beside the checkpoint."""
    if args.config:
        return _require_file(args.config, "Config file")
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint:
        stored = Path(checkpoint).parent / CONFIG_NAME
        if stored.is_file():
            rc.debug(f"Using stored config {stored}")
            return stored
    return None


def _grid_overrides(ds: Dataset) -> dict:
    return {"nx": ds.nx, "ny": ds.ny}


def partition(ds: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Consecutive train / validation / test slices; the test slice may be short."""
    needed = cfg.train_count + cfg.val_count
    if len(ds) <= needed:
        raise rc.InputError(
            f"dataset holds {len(ds)} records; train_count + val_count = {needed} leaves no test records"
        )
    test_count = min(cfg.test_count, len(ds) - needed)
    train_ds, val_ds, test_ds = datagen.split_dataset(ds, [cfg.train_count, cfg.val_count, test_count])
    return train_ds, val_ds, test_ds


def _load_run(args: argparse.Namespace, overrides: dict | None = None) -> tuple[RunConfig, Dataset]:
    dataset_path = _require_file(args.dataset, "Dataset")
    ds = datagen.load_dataset(dataset_path)
    changes = _grid_overrides(ds) | (overrides or {})
    cfg = load_config(_config_path(args), changes)
    run = RunConfig(
        config=cfg,
        dataset=dataset_path,
        checkpoint=_require_file(getattr(args, "checkpoint", None), "Checkpoint"),
        out=Path(args.out) if args.out else None,
    )
    return run, ds


def cmd_generate(args: argparse.Namespace) -> None:
    cfg = load_config(
        _require_file(args.config, "Config file") if args.config else None,
        {"nx": args.nx, "ny": args.ny, "kl_length": args.l, "kl_modes": args.kl, "seed": args.seed},
    )
    count = args.count if args.count is not None else cfg.train_count + cfg.val_count + cfg.test_count
    ds = datagen.generate_dataset(cfg.nx, cfg.ny, cfg.kl_length, cfg.kl_modes, count, cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datagen.save_dataset(ds, out)
    mass = datagen.retained_mass(datagen.build_kl_basis(cfg.nx, cfg.ny, cfg.kl_length, cfg.kl_modes))
    rc.info(f"Wrote {count} records on a {cfg.ny}x{cfg.nx} grid to {out}")
    rc.info(f"KL truncation {cfg.kl_modes} keeps {mass:.4f} of the eigenvalue mass")


def cmd_train(args: argparse.Namespace) -> None:
    run, ds = _load_run(args, {"epochs": args.epochs, "beta": args.beta, "gamma": args.gamma, "seed": args.seed})
    cfg = run.config
    train_ds, val_ds, _ = partition(ds, cfg)
    out = _output_dir(run.out)
    rc.info(f"Training on {len(train_ds)} records, validating on {len(val_ds)} (beta={cfg.beta:g}, gamma={cfg.gamma:g})")
    checkpoint, history = trainer.train(train_ds, val_ds, cfg)
    deepnet.save_network(checkpoint.params, out / CHECKPOINT_NAME)
    trainer.write_history_csv(history, out / "history.csv")
    (out / CONFIG_NAME).write_text(cfg.to_text())
    export.write_report(
        out / "train_summary.txt",
        {"best_epoch": checkpoint.epoch, "best_val_mse": checkpoint.val_mse, "epochs": cfg.epochs},
    )
    rc.info(f"Best epoch {checkpoint.epoch}, val MSE {checkpoint.val_mse:.6g}")


def _selected(ds: Dataset, cfg: TrainConfig, which: str) -> tuple[Dataset, Dataset]:
    train_ds, val_ds, test_ds = partition(ds, cfg)
    return train_ds, {"train": train_ds, "val": val_ds, "test": test_ds}[which]


def cmd_eval(args: argparse.Namespace) -> None:
    run, ds = _load_run(args)
    cfg = run.config
    params = deepnet.load_network(run.checkpoint)
    train_ds, target = _selected(ds, cfg, args.split)
    metrics = trainer.evaluate(trainer.Checkpoint(params, 0, 0.0), train_ds, target, cfg)
    out = _output_dir(run.out)
    report = {"split": args.split} | metrics.report()
    export.write_report(out / "metrics.txt", report)

    scaling = {}
    shape = (target.ny, target.nx)
    for k in range(min(args.instances, len(target))):
        fields = {
            "prediction": metrics.predictions[k].reshape(shape),
            "truth": metrics.truth[k].reshape(shape),
            "difference": metrics.errors[k].reshape(shape),
        }
        for name, values in fields.items():
            stem = f"instance{k}_{name}"
            export.write_csv_grid(out / f"{stem}.csv", values)
            scaling[f"{stem}.pgm"] = export.write_pgm(out / f"{stem}.pgm", values)
    if scaling:
        export.write_scaling_sidecar(out / "scaling.csv", scaling)

    for n, probe in enumerate(metrics.probes):
        edges, pred_counts, ref_counts = export.histogram(
            metrics.predictions[:, probe.index], metrics.truth[:, probe.index], cfg.hist_bins
        )
        export.write_histogram_csv(out / f"probe{n}_histogram.csv", edges, pred_counts, ref_counts)

    rc.info(f"{args.split} MSE {metrics.test_mse:.6g} (ensemble-mean baseline {metrics.baseline_mse:.6g})")
    for n, probe in enumerate(metrics.probes):
        rc.info(
            f"probe {n} ({probe.x:g}, {probe.y:g}): predicted {probe.pred_mean:.4f} +/- {probe.pred_std:.4f}, "
            f"reference {probe.ref_mean:.4f} +/- {probe.ref_std:.4f}"
        )


def cmd_predict(args: argparse.Namespace) -> None:
    run, ds = _load_run(args)
    cfg = run.config
    params = deepnet.load_network(run.checkpoint)
    train_ds, target = _selected(ds, cfg, args.split)
    if args.field:
        field = export.read_csv_grid(_require_file(args.field, "Field CSV"))
        if field.shape != (ds.ny, ds.nx):
            raise rc.InputError(f"field has shape {field.shape}, expected {(ds.ny, ds.nx)}")
        diffusivity = field.ravel()
    else:
        if not 0 <= args.record < len(target):
            raise rc.InputError(f"record {args.record} outside the {args.split} split of {len(target)} records")
        diffusivity = target.records[args.record].D.flat()
    if not np.all(diffusivity > 0):
        raise rc.InputError("diffusivity must be strictly positive")

    prediction = trainer.predict_fields(params, train_ds, diffusivity[None, :], cfg)[0]
    out = Path(run.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export.write_csv_grid(out, prediction.reshape(ds.ny, ds.nx))
    rc.info(f"Wrote predicted field to {out}")
    if args.variance:
        variance = trainer.predict_variance(params, train_ds, diffusivity, cfg)
        export.write_csv_grid(args.variance, variance.reshape(ds.ny, ds.nx))
        rc.info(f"Wrote posterior variance to {args.variance}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcgp")
    parser.add_argument("--verbose", action="store_true", help="Print per-batch debug output")
    sub = parser.add_subparsers(dest="action", required=True)

    generate = sub.add_parser("generate", help="Sample diffusivities and solve for u")
    generate.add_argument("--config")
    generate.add_argument("--nx", type=int)
    generate.add_argument("--ny", type=int)
    generate.add_argument("--l", type=float, help="GRF correlation length")
    generate.add_argument("--kl", type=int, help="KL truncation")
    generate.add_argument("--count", type=int)
    generate.add_argument("--seed", type=int)
    generate.add_argument("--out", required=True)

    train = sub.add_parser("train", help="Train the hybrid model")
    train.add_argument("--dataset", required=True)
    train.add_argument("--config")
    train.add_argument("--epochs", type=int)
    train.add_argument("--beta", type=float)
    train.add_argument("--gamma", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--out", required=True)

    evaluate = sub.add_parser("eval", help="Score a checkpoint and export plot data")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--config")
    evaluate.add_argument("--split", choices=("train", "val", "test"), default="test")
    evaluate.add_argument("--instances", type=int, default=4)
    evaluate.add_argument("--out", required=True)

    predict = sub.add_parser("predict", help="Predict u for one diffusivity field")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--dataset", required=True)
    predict.add_argument("--config")
    source = predict.add_mutually_exclusive_group(required=True)
    source.add_argument("--field", help="CSV grid of D values")
    source.add_argument("--record", type=int, help="Record index within --split")
    predict.add_argument("--split", choices=("train", "val", "test"), default="test")
    predict.add_argument("--variance", help="Also write the posterior variance field here")
    predict.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    rc.VERBOSE = args.verbose
    try:
        match args.action:
            case "generate":
                cmd_generate(args)
            case "train":
                cmd_train(args)
            case "eval":
                cmd_eval(args)
            case "predict":
                cmd_predict(args)
    except rc.UsageError as exc:
        parser.error(str(exc))
    except (rc.PcgpError, OSError) as exc:
        rc.die(str(exc))


if __name__ == "__main__":
    main()
