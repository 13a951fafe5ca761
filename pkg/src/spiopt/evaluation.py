"""Metrics, rate sweeps against the random and Hadamard baselines, and the two studies."""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PIXELS, Dataset
from .decoders import CLASSIFY, RECONSTRUCT
from .encoder import hadamard_bank, random_bank
from .nn.serialize import atomic_write
from .pipeline import (
    Checkpoint,
    SensingModel,
    TrainConfig,
    finetune_decoder,
    pattern_count_for_rate,
    random_selection,
    select_for_rate,
    train_baseline,
    train_joint,
    weight_band_selection,
)

PSNR_CAP = 100.0
LEARNED = "learned-weighted"
RANDOM = "random"
HADAMARD = "hadamard"
STRATEGIES = (LEARNED, RANDOM, HADAMARD)
DEFAULT_RATES = (0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.5, 1.0)
DEFAULT_LAMBDAS = (0.1, 0.2, 0.3, 0.5, 1.0)
BAND_STARTS = (0, 20, 40, 60, 80)
BAND_SIZE = 20
BAND_PATTERNS = 100
SWEEP_COLUMNS = ("task", "strategy", "lambda", "rate", "K", "metric", "n_test", "seed")


class EvaluationError(ValueError):
    pass


class Psnr(float):
    """PSNR in dB; ``identical`` is set when the images match exactly (value capped)."""

    identical: bool

    def __new__(cls, value: float, identical: bool = False):
        obj = super().__new__(cls, value)
        obj.identical = identical
        return obj


def psnr(reference, reconstruction) -> Psnr:
    """``10 log10(1 / MSE)`` with peak 1; identical inputs give 100 dB, flagged."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(reconstruction, dtype=np.float64)
    if a.shape != b.shape:
        raise EvaluationError(f"psnr: shape {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        # squared error can underflow for distinct inputs; only flag true equality
        return Psnr(PSNR_CAP, bool(np.array_equal(a, b)))
    return Psnr(min(PSNR_CAP, 10.0 * math.log10(1.0 / mse)))


def mean_psnr(references, reconstructions) -> float:
    """Average of per-image PSNR over a stack."""
    refs = np.asarray(references, dtype=np.float64)
    recs = np.asarray(reconstructions, dtype=np.float64)
    if refs.shape != recs.shape:
        raise EvaluationError(f"psnr: shape {refs.shape} vs {recs.shape}")
    return float(np.mean([psnr(a, b) for a, b in zip(refs, recs)]))


def _labels_of(predictions) -> np.ndarray:
    p = np.asarray(predictions)
    return p.argmax(axis=1) if p.ndim == 2 else p.astype(np.int64)


def accuracy(predictions, labels) -> float:
    """Fraction correct. ``predictions`` holds class ids or a probability matrix."""
    pred = _labels_of(predictions)
    labels = np.asarray(labels, dtype=np.int64)
    if pred.shape != labels.shape:
        raise EvaluationError(f"accuracy: {pred.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        raise EvaluationError("accuracy of an empty set")
    return float(np.mean(pred == labels))


def per_class_accuracy(predictions, labels, classes: int = 10) -> np.ndarray:
    """Accuracy within each true class; NaN for classes absent from ``labels``."""
    pred = _labels_of(predictions)
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full(classes, np.nan)
    for c in range(classes):
        hit = labels == c
        if hit.any():
            out[c] = np.mean(pred[hit] == c)
    return out


def evaluate(model: SensingModel, test: Dataset) -> tuple[float, np.ndarray | None]:
    """Mean PSNR (imaging) or accuracy plus per-class table (classification)."""
    out = model.predict(test.images)
    if model.task == RECONSTRUCT:
        return mean_psnr(test.images, out), None
    return accuracy(out, test.labels), per_class_accuracy(out, test.labels, model.classes)


# -------------------------------------------------------------------- reports


@dataclass
class EvalReport:
    task: str
    strategy: str
    rates: tuple
    metrics: tuple
    ks: tuple
    n_test: int
    seed: int
    lam: float = 1.0
    per_class: dict = field(default_factory=dict)
    runtime: float = 0.0

    def __post_init__(self):
        if len(self.rates) != len(self.metrics) or len(self.rates) != len(self.ks):
            raise EvaluationError("rates, metrics and K counts differ")
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise EvaluationError("rate grid must be strictly increasing")
        if self.task == CLASSIFY and any(not 0.0 <= m <= 1.0 for m in self.metrics):
            raise EvaluationError("accuracy outside [0, 1]")
        if self.task == RECONSTRUCT and any(not math.isfinite(m) for m in self.metrics):
            raise EvaluationError("non-finite PSNR")

    def metric_at(self, rate: float) -> float:
        for r, m in zip(self.rates, self.metrics):
            if math.isclose(r, rate):
                return m
        raise KeyError(rate)

    def plot_data(self) -> str:
        return "".join(f"{r!r} {m!r}\n" for r, m in zip(self.rates, self.metrics))

    def per_class_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rate", "class", "accuracy"])
        for r in self.rates:
            for c, v in enumerate(self.per_class.get(r, ())):
                w.writerow([repr(r), c, repr(float(v))])
        return buf.getvalue()


def sweep_csv(reports) -> str:
    """One row per strategy x rate; no timings, so identical runs give identical bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for rep in reports:
        for r, k, m in zip(rep.rates, rep.ks, rep.metrics):
            w.writerow([rep.task, rep.strategy, repr(rep.lam), repr(r), k, repr(float(m)), rep.n_test, rep.seed])
    return buf.getvalue()


def write_sweep(reports, directory, stem: str = "sweep") -> list[Path]:
    """CSV plus one two-column plot-data file per curve."""
    directory = Path(directory)
    written = [atomic_write(directory / f"{stem}.csv", sweep_csv(reports).encode())]
    for rep in reports:
        tag = rep.strategy if rep.lam == 1.0 else f"{rep.strategy}_lambda{rep.lam:g}"
        written.append(atomic_write(directory / f"{stem}_{tag}.dat", rep.plot_data().encode()))
        if rep.task == CLASSIFY and rep.per_class:
            written.append(atomic_write(directory / f"{stem}_{tag}_per_class.csv", rep.per_class_csv().encode()))
    return written


# --------------------------------------------------------------------- sweeps


def _workers(requested: int | None) -> int:
    cap = os.environ.get("SPIOPT_THREADS")
    n = requested if requested is not None else 1
    if cap:
        n = min(n, max(1, int(cap))) if requested is not None else max(1, int(cap))
    return max(1, n)


def _cell(args):
    strategy, rate, ckpt, train, test, epochs, total = args
    config = ckpt.config
    if strategy == LEARNED:
        model = finetune_decoder(ckpt, select_for_rate(ckpt, rate, total), train, epochs)
    else:
        k = pattern_count_for_rate(rate, PIXELS)
        bank = hadamard_bank(k) if strategy == HADAMARD else random_bank(config.seed, k)
        model = train_baseline(bank, train, config, config.epochs + epochs, strategy)
    metric, table = evaluate(model, test)
    return model.k, metric, table


def _run_cells(cells, workers: int):
    if workers <= 1 or len(cells) <= 1:
        return [_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        return list(pool.map(_cell, cells))


def sweep_rates(
    ckpt: Checkpoint,
    train: Dataset,
    test: Dataset,
    strategies=STRATEGIES,
    rates=DEFAULT_RATES,
    fine_tune_epochs: int | None = None,
    workers: int | None = None,
    absolute: bool = False,
) -> list[EvalReport]:
    """Evaluate each strategy at each rate with the same decoder and epoch budget.

    The learned curve reuses the one stage-one checkpoint; baselines train a
    decoder from scratch for stage-one plus fine-tune epochs. With
    ``absolute`` the learned K is ``floor(rate * 784)`` rather than
    ``floor(rate * M)``.
    """
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise EvaluationError(f"unknown strategies {sorted(unknown)}")
    rates = tuple(sorted(float(r) for r in rates))
    if not rates or rates[0] <= 0 or rates[-1] > 1:
        raise EvaluationError("rates must lie in (0, 1]")
    config = ckpt.config
    epochs = config.fine_tune_epochs if fine_tune_epochs is None else fine_tune_epochs
    total = PIXELS if absolute else None
    order = [s for s in STRATEGIES if s in strategies]
    cells = [(s, r, ckpt, train, test, epochs, total) for s in order for r in rates]
    start = time.perf_counter()
    results = _run_cells(cells, _workers(workers))
    elapsed = time.perf_counter() - start
    lam = config.pattern_count / PIXELS
    reports = []
    for s in order:
        rows = [(c[1], res) for c, res in zip(cells, results) if c[0] == s]
        reports.append(
            EvalReport(
                task=config.task,
                strategy=s,
                rates=tuple(r for r, _ in rows),
                metrics=tuple(float(res[1]) for _, res in rows),
                ks=tuple(res[0] for _, res in rows),
                n_test=len(test),
                seed=config.seed,
                lam=lam if s == LEARNED else 1.0,
                per_class={r: res[2] for r, res in rows if res[2] is not None},
                runtime=elapsed,
            )
        )
    return reports


def first_stage_rate_study(config: TrainConfig, train: Dataset, test: Dataset, lambdas=DEFAULT_LAMBDAS, rates=DEFAULT_RATES, workers: int | None = None) -> list[EvalReport]:
    """One stage-one run per lambda, each evaluated at the absolute rates it can serve."""
    reports = []
    for lam in sorted(lambdas):
        ckpt = train_joint(replace(config, stage_one_rate=lam, patterns=0), train)
        usable = [r for r in rates if pattern_count_for_rate(r, PIXELS) <= ckpt.count]
        if not usable:
            continue
        (rep,) = sweep_rates(ckpt, train, test, (LEARNED,), usable, workers=workers, absolute=True)
        rep.lam = lam
        reports.append(rep)
    return reports


# ----------------------------------------------------------------- band study


@dataclass(frozen=True)
class BandRow:
    label: str
    band_start: int | None
    rate: float
    accuracy: float


@dataclass
class BandReport:
    rows: list
    n_test: int
    seed: int

    def bands(self) -> list[BandRow]:
        return [r for r in self.rows if r.band_start is not None]

    def gap(self) -> float:
        """Top band accuracy minus bottom band accuracy."""
        b = self.bands()
        return b[0].accuracy - b[-1].accuracy

    def inversions(self) -> int:
        """Adjacent band pairs where the lower-ranked band scores higher."""
        acc = [r.accuracy for r in self.bands()]
        return sum(1 for a, b in zip(acc, acc[1:]) if b > a)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["band_start", "rate", "accuracy"])
        for r in self.rows:
            w.writerow(["random" if r.band_start is None else r.band_start, repr(r.rate), repr(r.accuracy)])
        return buf.getvalue()


def _band_cell(args):
    ckpt, selection, train, test, epochs = args
    model = finetune_decoder(ckpt, selection, train, epochs)
    return evaluate(model, test)[0]


def weight_band_study(config: TrainConfig, train: Dataset, test: Dataset, ckpt: Checkpoint | None = None, band_starts=BAND_STARTS, workers: int | None = None) -> BandReport:
    """Fine-tune on rank bands of 20 from a 100-pattern stage one, plus a random 20."""
    if ckpt is None:
        ckpt = train_joint(replace(config, task=CLASSIFY, patterns=BAND_PATTERNS), train)
    selections = [weight_band_selection(ckpt, s, BAND_SIZE) for s in band_starts]
    selections.append(random_selection(ckpt, BAND_SIZE, ckpt.config.seed))
    cells = [(ckpt, sel, train, test, ckpt.config.fine_tune_epochs) for sel in selections]
    n = _workers(workers)
    if n <= 1:
        accs = [_band_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=min(n, len(cells))) as pool:
            accs = list(pool.map(_band_cell, cells))
    rows = [BandRow(sel.label, start, sel.rate, float(a)) for sel, start, a in zip(selections, [*band_starts, None], accs)]
    return BandReport(rows, len(test), ckpt.config.seed)
