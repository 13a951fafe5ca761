"""``spiopt`` command line: train once, select, fine-tune, evaluate, run the studies."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config
from .data import DatasetError, load_mnist, synthetic_dataset
from .encoder import NoiseModel, read_pgm, simulate_acquisition
from .nn.serialize import atomic_write
from .pipeline import Checkpoint, PipelineError, SensingModel, TrainingError, finetune_decoder, select_for_rate, train_joint

EXIT_CONFIG = 2
EXIT_DATASET = 3


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1, **fields):
        super().__init__(message)
        self.code, self.status, self.fields = code, status, fields


# ----------------------------------------------------------------- arguments


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="stage-one epochs for train, fine-tune epochs elsewhere")
    p.add_argument("--dataset-dir")
    p.add_argument("--synthetic", action="store_true", help="use the built-in synthetic dataset")
    p.add_argument("--test-subset", type=int, help="number of test images (0 = all)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spiopt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="stage one: learn, rank and binarize the pattern bank")
    _common(p)

    p = sub.add_parser("select", help="print K and the selected pattern indices for a rate")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--out", help="write selected binary patterns as PGM files here")

    p = sub.add_parser("finetune", help="fine-tune a decoder on the top-ranked patterns")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rate", type=float, required=True)

    p = sub.add_parser("eval", help="evaluate a fine-tuned model (or fine-tune one first)")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--model")
    p.add_argument("--rate", type=float)

    p = sub.add_parser("sweep", help="learned vs random vs Hadamard over a rate grid")
    _common(p)
    p.add_argument("--ckpt", help="reuse this stage-one checkpoint instead of training one")
    p.add_argument("--rate", type=float, action="append", help="rate to evaluate (repeatable)")

    p = sub.add_parser("bandstudy", help="accuracy of rank bands of 20 from a 100-pattern bank")
    _common(p)

    p = sub.add_parser("lambdastudy", help="effect of the stage-one rate")
    _common(p)
    p.add_argument("--rate", type=float, action="append", help="target rate (repeatable)")

    p = sub.add_parser("simulate", help="simulated acquisition through the selected binary patterns")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--model", help="fine-tuned model; decodes the simulated readings")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=None, help="Gaussian noise level relative to reading std")
    p.add_argument("--image", help="PGM file or test:<index>")
    return parser


# -------------------------------------------------------------------- helpers


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    cfg = cfg.with_overrides(seed=getattr(args, "seed", None), dataset_dir=getattr(args, "dataset_dir", None), test_subset=getattr(args, "test_subset", None))
    if getattr(args, "synthetic", False):
        cfg = cfg.with_overrides(synthetic=True)
    return cfg


def _datasets(cfg: RunConfig):
    if cfg.synthetic:
        n = cfg.synthetic_count
        return synthetic_dataset(cfg.seed, n, "train"), synthetic_dataset(cfg.seed + 1, max(1, n // 4), "test")
    try:
        train = load_mnist(cfg.dataset_dir, "train")
        test = load_mnist(cfg.dataset_dir, "test")
    except FileNotFoundError as exc:
        raise CliError("missing_dataset", str(exc), EXIT_DATASET, dir=cfg.dataset_dir) from None
    except DatasetError as exc:
        raise CliError("bad_dataset", str(exc), EXIT_DATASET, dir=cfg.dataset_dir) from None
    return train.subset(cfg.train_subset or None), test.subset(cfg.test_subset or None)


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or cfg.out)


def _guard(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliError("exists", f"{path} exists (use --force to overwrite)", path=str(path))


def _load_ckpt(path) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CliError("missing_checkpoint", f"no checkpoint at {path}", path=str(path)) from None


def _print(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def _run_manifest(cfg: RunConfig) -> dict:
    return {"run_config": cfg.resolved()}


# ------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _run_config(args).with_overrides(epochs=args.epochs)
    train, _ = _datasets(cfg)
    out = _out_dir(args, cfg)
    if (out / "manifest.json").exists() and not args.force:
        raise CliError("exists", f"{out} already holds a checkpoint (use --force to overwrite)", path=str(out))
    ckpt = train_joint(cfg.train_config(), train)
    ckpt.save(out, force=args.force, extra=_run_manifest(cfg))
    from .plotting import plot_patterns

    plot_patterns(ckpt.ranked_bank().patterns, out / "top_patterns.png", scores=ckpt.scores[ckpt.ranking.permutation])
    _print({"command": "train", "out": str(out), "patterns": ckpt.count, "final_loss": ckpt.history[-1] if ckpt.history else None})
    return 0


def cmd_select(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    sel = select_for_rate(ckpt, args.rate)
    print(f"K={sel.k}")
    print("indices=" + ",".join(str(i) for i in sel.indices))
    if args.out:
        from .encoder import export_pgm_stack

        export_pgm_stack(ckpt.binary.rows(sel.indices), args.out)
    return 0


def cmd_finetune(args) -> int:
    cfg = _run_config(args)
    train, _ = _datasets(cfg)
    ckpt = _load_ckpt(args.ckpt)
    out = _out_dir(args, cfg)
    if (out / "manifest.json").exists() and not args.force:
        raise CliError("exists", f"{out} already holds a model (use --force to overwrite)", path=str(out))
    sel = select_for_rate(ckpt, args.rate)
    model = finetune_decoder(ckpt, sel, train, args.epochs)
    model.save(out, force=args.force, extra={"rate": sel.rate, "K": sel.k, "checkpoint": str(args.ckpt), "checkpoint_config_hash": ckpt.config.hash()})
    _print({"command": "finetune", "out": str(out), "rate": sel.rate, "K": sel.k})
    return 0


def _model_from_args(args, train) -> SensingModel:
    if args.model:
        try:
            return SensingModel.load(args.model)
        except FileNotFoundError:
            raise CliError("missing_model", f"no model at {args.model}", path=str(args.model)) from None
    if not args.ckpt or args.rate is None:
        raise CliError("usage", "give --model, or --ckpt with --rate")
    ckpt = _load_ckpt(args.ckpt)
    return finetune_decoder(ckpt, select_for_rate(ckpt, args.rate), train, args.epochs)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    train, test = _datasets(cfg)
    model = _model_from_args(args, train)
    metric, table = ev.evaluate(model, test)
    record = {"command": "eval", "task": model.task, "K": model.k, "metric": metric, "n_test": len(test)}
    if table is not None:
        record["per_class"] = [None if np.isnan(v) else float(v) for v in table]
    _print(record)
    if args.out:
        atomic_write(Path(args.out) / "eval.json", (json.dumps(record, sort_keys=True, indent=2) + "\n").encode())
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    train, test = _datasets(cfg)
    out = _out_dir(args, cfg)
    _guard(out / "sweep.csv", args.force)
    ckpt = _load_ckpt(args.ckpt) if args.ckpt else train_joint(cfg.train_config(), train)
    rates = tuple(args.rate) if args.rate else cfg.rates
    reports = ev.sweep_rates(ckpt, train, test, cfg.strategies, rates, args.epochs, workers=cfg.workers)
    ev.write_sweep(reports, out)
    from .plotting import plot_sweep

    plot_sweep(reports, out / "sweep.png", f"{cfg.task}, stage-one M={ckpt.count}")
    for rep in reports:
        _print({"strategy": rep.strategy, "rates": list(rep.rates), "metrics": list(rep.metrics)})
    return 0


def cmd_bandstudy(args) -> int:
    cfg = _run_config(args).with_overrides(epochs=args.epochs)
    train, test = _datasets(cfg)
    out = _out_dir(args, cfg)
    _guard(out / "band_study.csv", args.force)
    report = ev.weight_band_study(cfg.train_config(), train, test, workers=cfg.workers)
    atomic_write(out / "band_study.csv", report.to_csv().encode())
    from .plotting import plot_bands

    plot_bands(report, out / "band_study.png")
    _print({"command": "bandstudy", "gap": report.gap(), "inversions": report.inversions(), "rows": [[r.label, r.accuracy] for r in report.rows]})
    return 0


def cmd_lambdastudy(args) -> int:
    cfg = _run_config(args).with_overrides(epochs=args.epochs)
    train, test = _datasets(cfg)
    out = _out_dir(args, cfg)
    _guard(out / "lambda_study.csv", args.force)
    rates = tuple(args.rate) if args.rate else cfg.rates
    reports = ev.first_stage_rate_study(cfg.train_config(), train, test, cfg.lambdas, rates, workers=cfg.workers)
    ev.write_sweep(reports, out, "lambda_study")
    from .plotting import plot_sweep

    plot_sweep(reports, out / "lambda_study.png", "stage-one rate study")
    for rep in reports:
        _print({"lambda": rep.lam, "rates": list(rep.rates), "metrics": list(rep.metrics)})
    return 0


def _image(spec: str, test) -> np.ndarray:
    if spec.startswith("test:"):
        i = int(spec[5:])
        if not 0 <= i < len(test):
            raise CliError("bad_image", f"test index {i} outside 0..{len(test) - 1}")
        return np.asarray(test.images[i])
    path = Path(spec)
    if not path.exists():
        raise CliError("bad_image", f"no image at {path}", path=str(path))
    return read_pgm(path)


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    sigma = cfg.noise_sigma if args.noise is None else args.noise
    noise = NoiseModel.gaussian(sigma) if sigma > 0 else NoiseModel()
    train, test = _datasets(cfg)
    if args.model:
        model = SensingModel.load(args.model)
    elif args.ckpt:
        model = _model_from_args(args, train)
    else:
        raise CliError("usage", "give --model or --ckpt")
    images = _image(args.image, test)[None] if args.image else np.asarray(test.images)
    readings = simulate_acquisition(model.bank, images, noise, cfg.seed, model.std)
    out = model.infer(readings)
    record = {"command": "simulate", "K": model.k, "sigma": sigma, "n": len(images)}
    if model.task == "classify":
        record["predictions"] = out.argmax(axis=1).tolist() if args.image else None
        if not args.image:
            record["accuracy"] = ev.accuracy(out, test.labels)
            record["noiseless_accuracy"] = ev.accuracy(model.predict(images), test.labels)
    else:
        record["psnr"] = ev.mean_psnr(images, out)
    record["readings_equal_eval_path"] = bool(np.array_equal(readings, model.readings(images)))
    _print(record)
    if args.out:
        atomic_write(Path(args.out) / "readings.txt", "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in readings).encode())
    return 0


COMMANDS = {
    "train": cmd_train,
    "select": cmd_select,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "bandstudy": cmd_bandstudy,
    "lambdastudy": cmd_lambdastudy,
    "simulate": cmd_simulate,
}


def _fail(code: str, message: str, status: int, **fields) -> int:
    extra = "".join(f" {k}={json.dumps(v)}" for k, v in fields.items())
    print(f"error code={code}{extra} message={json.dumps(message)}", file=sys.stderr)
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.status, **exc.fields)
    except ConfigError as exc:
        return _fail("bad_config", str(exc), EXIT_CONFIG, **({"key": exc.key} if exc.key else {}))
    except (PipelineError, TrainingError, DatasetError, FileExistsError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
