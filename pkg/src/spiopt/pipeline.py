"""Train once at a high rate, then serve any lower rate by prefix selection.

Stage one jointly optimizes a gray pattern bank, the excitation head and a
decoder. Afterwards the head is reduced to one static score per pattern, the
bank is dithered to binary and ranked, and every later rate only fine-tunes a
decoder on the top-ranked binary patterns.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import platform
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, nn
from .data import PIXELS, Dataset
from .decoders import CLASSIFY, RECONSTRUCT, build_decoder
from .dither import binarize_bank
from .encoder import BINARY, GRAY, PatternBank, measure
from .nn import ParameterSet, Tensor, serialize
from .weighting import ExcitationHead, PatternRanking, apply_weights, excite, extract_static_scores, rank, squeeze

log = logging.getLogger(__name__)

STD_FLOOR = 1e-6
CONTAINER = "model.spiopt"
MANIFEST = "manifest.json"


class PipelineError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    task: str = CLASSIFY
    stage_one_rate: float = 1.0
    patterns: int = 0  # explicit M; overrides stage_one_rate when > 0
    epochs: int = 10
    fine_tune_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    pattern_learning_rate: float = 0.0  # 0 -> learning_rate
    schedule: str = "constant"  # or "cosine"
    first_layer: str = "reinit"  # or "columns"
    seed: int = 0
    reduction_ratio: int = 16
    channels: int = 32
    hidden: int = 256

    def __post_init__(self):
        if self.task not in (CLASSIFY, RECONSTRUCT):
            raise PipelineError(f"task must be {CLASSIFY!r} or {RECONSTRUCT!r}, got {self.task!r}")
        if not 0 < self.stage_one_rate <= 1:
            raise PipelineError("stage_one_rate must lie in (0, 1]")
        if self.pattern_count < 1:
            raise PipelineError("stage one needs at least one pattern")
        for name in ("batch_size", "reduction_ratio", "channels", "hidden"):
            if getattr(self, name) < 1:
                raise PipelineError(f"{name} must be positive")
        if self.epochs < 0 or self.fine_tune_epochs < 0:
            raise PipelineError("epoch counts must be non-negative")
        if not self.learning_rate > 0:
            raise PipelineError("learning_rate must be > 0")

    @property
    def pattern_count(self) -> int:
        return self.patterns if self.patterns > 0 else pattern_count_for_rate(self.stage_one_rate, PIXELS)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


def pattern_count_for_rate(rate: float, total: int) -> int:
    """``max(1, floor(rate * total))``, tolerant of binary rounding (0.3 * 10 -> 3)."""
    return max(1, math.floor(rate * total + 1e-9))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for one purpose, derived from the run seed."""
    spawn = tuple(zlib.crc32(str(k).encode()) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=spawn))


# --------------------------------------------------------------- normalization


@dataclass(frozen=True)
class PixelStats:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, flat: np.ndarray) -> "PixelStats":
        flat = np.asarray(flat, dtype=np.float64)
        mean = flat.mean(axis=0)
        centered = flat - mean
        return cls(mean, centered.T @ centered / len(flat))


def measurement_stats(patterns: np.ndarray, pix: PixelStats) -> tuple[np.ndarray, np.ndarray]:
    """Per-pattern mean and std of the readings over the training set.

    Uses ``mean = P mu`` and ``var = diag(P S P^T)``, exact for the empirical
    pixel mean ``mu`` and covariance ``S``.
    """
    mean = patterns @ pix.mean
    var = np.einsum("ij,ij->i", patterns @ pix.cov, patterns)
    return mean, np.sqrt(np.maximum(var, 0.0)) + STD_FLOOR


def standardize(y: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return (y - mean) / std


# ------------------------------------------------------------------- training


def _targets(task: str, data: Dataset) -> np.ndarray:
    if task == CLASSIFY:
        if data.labels is None:
            raise PipelineError("classification needs labelled data")
        return data.labels
    return data.images


def fit(params: ParameterSet, step_loss, n: int, epochs: int, batch_size: int, learning_rate: float, rng: np.random.Generator, after_step=None, overrides=None, schedule: str = "constant") -> list[float]:
    """Mini-batch Adam loop. ``step_loss(idx)`` builds the loss for a batch.

    With ``schedule="cosine"`` every learning rate decays per epoch along a
    half cosine from its base value towards zero.
    """
    history = []
    base_overrides = dict(overrides or {})
    for epoch in range(epochs):
        factor = 0.5 * (1.0 + math.cos(math.pi * epoch / epochs)) if schedule == "cosine" else 1.0
        lr = learning_rate * factor
        overrides = {k: v * factor for k, v in base_overrides.items()}
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start : start + batch_size]
            loss = step_loss(idx)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}")
            nn.backward(loss, params.tensors())
            nn.adam_step(params, lr, overrides)
            if after_step is not None:
                after_step()
            total += value * len(idx)
        history.append(total / n)
        log.info("epoch %d loss %.6f", epoch, history[-1])
    return history


class JointModel:
    """Gray encoder + excitation head + decoder sharing one parameter set."""

    def __init__(self, config: TrainConfig, classes: int = 10):
        rng = derive_rng(config.seed, "init")
        m = config.pattern_count
        self.config = config
        self.params = ParameterSet()
        self.patterns = self.params.add("encoder.patterns", rng.uniform(0.0, 1.0, size=(m, PIXELS)))
        self.head = ExcitationHead(self.params, m, config.reduction_ratio, rng)
        self.decoder = build_decoder(config.task, self.params, m, rng, classes=classes, channels=config.channels, hidden=config.hidden)

    def forward(self, x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> Tensor:
        y = nn.dense(Tensor(x), self.patterns)
        yn = nn.mul(nn.add(y, Tensor(-mean)), Tensor(1.0 / std))
        w = excite(self.head, squeeze(yn))
        return self.decoder(apply_weights(yn, w))

    def clamp(self) -> None:
        np.clip(self.patterns.data, 0.0, 1.0, out=self.patterns.data)


def train_joint(config: TrainConfig, train: Dataset) -> "Checkpoint":
    if len(train) == 0:
        raise PipelineError("training set is empty")
    classes = train.num_classes if config.task == CLASSIFY else 10
    model = JointModel(config, classes)
    x_all = train.flat
    targets = _targets(config.task, train)
    pix = PixelStats.of(x_all)

    def step_loss(idx):
        mean, std = measurement_stats(model.patterns.data, pix)
        return model.decoder.loss(model.forward(x_all[idx], mean, std), targets[idx])

    overrides = {"encoder.patterns": config.pattern_learning_rate} if config.pattern_learning_rate > 0 else None
    history = fit(model.params, step_loss, len(train), config.epochs, config.batch_size, config.learning_rate, derive_rng(config.seed, "shuffle"), model.clamp, overrides, config.schedule)

    gray = PatternBank(model.patterns.data.copy(), GRAY, "learned")
    gmean, gstd = measurement_stats(gray.patterns, pix)
    scores = extract_static_scores(model.head, standardize(measure(gray, x_all), gmean, gstd))
    binary = binarize_bank(gray)
    bmean, bstd = measurement_stats(binary.patterns, pix)
    head_arrays = {k[len("head.") :]: t.data.copy() for k, t in model.params.items() if k.startswith("head.")}
    dec_arrays = {k[len("decoder.") :]: t.data.copy() for k, t in model.params.items() if k.startswith("decoder.")}
    return Checkpoint(
        config=config,
        gray=gray,
        binary=binary,
        ranking=rank(scores),
        head=head_arrays,
        decoder=dec_arrays,
        norm={"gray_mean": gmean, "gray_std": gstd, "binary_mean": bmean, "binary_std": bstd},
        history=history,
        classes=classes,
    )


# ----------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    gray: PatternBank
    binary: PatternBank  # original pattern order; see ranked_bank()
    ranking: PatternRanking
    head: dict
    decoder: dict
    norm: dict
    history: list
    classes: int = 10

    @property
    def count(self) -> int:
        return self.gray.count

    @property
    def scores(self) -> np.ndarray:
        return self.ranking.scores

    def ranked_bank(self) -> PatternBank:
        return PatternBank(self.binary.patterns[self.ranking.permutation], BINARY, "learned-binarized")

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "encoder.gray": self.gray.patterns,
            "encoder.binary": self.binary.patterns,
            "scores": self.ranking.scores,
            "ranking": self.ranking.permutation.astype(np.float64),
        }
        out.update({f"head.{k}": v for k, v in self.head.items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.items()})
        out.update({f"norm.{k}": v for k, v in self.norm.items()})
        out["log.loss"] = np.asarray(self.history, dtype=np.float64)
        return out

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(self.history):
            w.writerow([i, repr(float(v))])
        return buf.getvalue()

    def save(self, directory, force: bool = False, extra: dict | None = None) -> Path:
        """Write container, sidecar CSVs and manifest; ``extra`` is merged into the manifest."""
        directory = Path(directory)
        if (directory / MANIFEST).exists() and not force:
            raise FileExistsError(f"{directory} already holds a checkpoint (use force to overwrite)")
        files = {
            CONTAINER: serialize.dumps(self.arrays()),
            "ranking.csv": self.ranking.to_csv().encode(),
            "training_log.csv": self.history_csv().encode(),
        }
        for name, data in files.items():
            serialize.atomic_write(directory / name, data)
        manifest = {
            "format": "spiopt-checkpoint/1",
            "config": asdict(self.config),
            "config_hash": self.config.hash(),
            "seed": self.config.seed,
            "classes": self.classes,
            "versions": _versions(),
            "files": {k: hashlib.sha256(v).hexdigest() for k, v in sorted(files.items())},
        }
        manifest.update(extra or {})
        _write_manifest(directory, manifest)
        return directory

    @classmethod
    def load(cls, directory) -> "Checkpoint":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        if manifest.get("format") != "spiopt-checkpoint/1":
            raise PipelineError(f"{directory} does not hold a stage-one checkpoint")
        arrays = serialize.load(directory / CONTAINER)

        def group(prefix):
            return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

        scores = arrays["scores"]
        perm = arrays["ranking"].astype(np.int64)
        return cls(
            config=TrainConfig.from_dict(manifest["config"]),
            gray=PatternBank(arrays["encoder.gray"], GRAY, "learned"),
            binary=PatternBank(arrays["encoder.binary"], BINARY, "learned-binarized"),
            ranking=PatternRanking(perm, scores),
            head=group("head."),
            decoder=group("decoder."),
            norm=group("norm."),
            history=[float(v) for v in arrays["log.loss"]],
            classes=int(manifest.get("classes", 10)),
        )


def _write_manifest(directory: Path, manifest: dict) -> None:
    serialize.atomic_write(directory / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _versions() -> dict:
    return {"spiopt": __version__, "numpy": np.__version__, "python": platform.python_version()}


# ------------------------------------------------------------------ selection


@dataclass(frozen=True)
class RateSelection:
    rate: float
    k: int
    indices: np.ndarray
    scale: np.ndarray
    label: str = "top"


def select_for_rate(ckpt: Checkpoint, rate: float, total: int | None = None) -> RateSelection:
    """Top-K ranked patterns with ``K = max(1, floor(rate * total))``.

    ``total`` defaults to the bank size M. Pass the pixel count to read
    ``rate`` as an absolute sampling rate on a bank trained below rate 1.
    """
    if not 0 < rate <= 1:
        raise PipelineError(f"rate must lie in (0, 1], got {rate}")
    k = pattern_count_for_rate(rate, ckpt.count if total is None else total)
    if k > ckpt.count:
        raise PipelineError(f"rate {rate} needs {k} patterns but the checkpoint has {ckpt.count}")
    idx = ckpt.ranking.permutation[:k].copy()
    return RateSelection(float(rate), k, idx, ckpt.scores[idx].copy())


def weight_band_selection(ckpt: Checkpoint, band_start: int, size: int = 20) -> RateSelection:
    """Patterns ranked ``band_start .. band_start + size - 1`` (0-based)."""
    if band_start < 0 or band_start + size > ckpt.count:
        raise PipelineError(f"band [{band_start}, {band_start + size}) outside {ckpt.count} patterns")
    idx = ckpt.ranking.permutation[band_start : band_start + size].copy()
    return RateSelection(size / PIXELS, size, idx, ckpt.scores[idx].copy(), f"band{band_start + 1}")


def random_selection(ckpt: Checkpoint, size: int = 20, seed: int = 0) -> RateSelection:
    """``size`` patterns drawn without regard to rank (the control band)."""
    idx = derive_rng(seed, "random-band").choice(ckpt.count, size=size, replace=False)
    return RateSelection(size / PIXELS, size, idx, ckpt.scores[idx].copy(), "random")


# ------------------------------------------------------------------ inference


@dataclass
class SensingModel:
    """Frozen binary encoder, fixed normalization and channel scale, trained decoder."""

    task: str
    bank: PatternBank
    mean: np.ndarray
    std: np.ndarray
    scale: np.ndarray
    decoder: dict
    classes: int = 10
    channels: int = 32
    hidden: int = 256
    history: list = field(default_factory=list)
    label: str = ""

    @property
    def k(self) -> int:
        return self.bank.count

    def readings(self, images) -> np.ndarray:
        return measure(self.bank, images)

    def features(self, readings) -> np.ndarray:
        return standardize(np.atleast_2d(readings), self.mean, self.std) * self.scale

    def network(self):
        params = ParameterSet()
        net = build_decoder(self.task, params, self.k, np.random.default_rng(0), classes=self.classes, channels=self.channels, hidden=self.hidden)
        params.load_arrays({f"decoder.{k}": v for k, v in self.decoder.items()})
        return net

    def infer(self, readings, batch_size: int = 500) -> np.ndarray:
        """Reconstructed images or class probabilities for raw readings."""
        feats = self.features(readings)
        net = self.network()
        outs = []
        for start in range(0, len(feats), batch_size):
            out = net(feats[start : start + batch_size])
            outs.append(out.data if self.task == RECONSTRUCT else nn.softmax(out).data)
        return np.concatenate(outs)

    def predict(self, images) -> np.ndarray:
        return self.infer(self.readings(images))

    def save(self, directory, force: bool = False, extra: dict | None = None) -> Path:
        directory = Path(directory)
        if (directory / MANIFEST).exists() and not force:
            raise FileExistsError(f"{directory} already holds a model (use force to overwrite)")
        arrays = {"bank": self.bank.patterns, "mean": self.mean, "std": self.std, "scale": self.scale}
        arrays.update({f"decoder.{k}": v for k, v in self.decoder.items()})
        arrays["log.loss"] = np.asarray(self.history, dtype=np.float64)
        blob = serialize.dumps(arrays)
        serialize.atomic_write(directory / CONTAINER, blob)
        manifest = {
            "format": "spiopt-sensing/1",
            "task": self.task,
            "label": self.label,
            "classes": self.classes,
            "channels": self.channels,
            "hidden": self.hidden,
            "provenance": self.bank.provenance,
            "versions": _versions(),
            "files": {CONTAINER: hashlib.sha256(blob).hexdigest()},
        }
        manifest.update(extra or {})
        _write_manifest(directory, manifest)
        return directory

    @classmethod
    def load(cls, directory) -> "SensingModel":
        directory = Path(directory)
        manifest = json.loads((directory / MANIFEST).read_text())
        if manifest.get("format") != "spiopt-sensing/1":
            raise PipelineError(f"{directory} does not hold a fine-tuned model")
        a = serialize.load(directory / CONTAINER)
        return cls(
            task=manifest["task"],
            bank=PatternBank(a["bank"], BINARY, manifest.get("provenance", "")),
            mean=a["mean"],
            std=a["std"],
            scale=a["scale"],
            decoder={k[len("decoder.") :]: v for k, v in a.items() if k.startswith("decoder.")},
            classes=manifest["classes"],
            channels=manifest["channels"],
            hidden=manifest["hidden"],
            history=[float(v) for v in a["log.loss"]],
            label=manifest.get("label", ""),
        )


def _train_decoder(model: SensingModel, train: Dataset, epochs: int, config: TrainConfig, rng_key, warm: dict | None, skip: tuple[str, ...], columns=None) -> SensingModel:
    params = ParameterSet()
    net = build_decoder(model.task, params, model.k, derive_rng(config.seed, "decoder-init", *rng_key), classes=model.classes, channels=config.channels, hidden=config.hidden)
    if warm:
        params.load_arrays({f"decoder.{k}": v for k, v in warm.items() if k not in skip}, strict=False)
        if columns is not None:
            params[f"decoder.{skip[0]}"].data = warm[skip[0]][:, columns].copy()
            params[f"decoder.{skip[1]}"].data = warm[skip[1]].copy()
    feats = model.features(model.readings(train.flat))
    targets = _targets(model.task, train)

    def step_loss(idx):
        return net.loss(net(feats[idx]), targets[idx])

    history = fit(params, step_loss, len(train), epochs, config.batch_size, config.learning_rate, derive_rng(config.seed, "decoder-shuffle", *rng_key), schedule=config.schedule)
    model.decoder = {k[len("decoder.") :]: t.data.copy() for k, t in params.items()}
    model.history = history
    return model


def finetune_decoder(ckpt: Checkpoint, selection: RateSelection, train: Dataset, epochs: int | None = None) -> SensingModel:
    """Decoder-only training on the selected binary patterns.

    The encoder and channel scale are frozen (they are not parameters here);
    the first decoder layer is rebuilt for width K and every deeper layer
    starts from the stage-one weights.
    """
    idx = np.asarray(selection.indices, dtype=np.int64)
    if idx.size != selection.k or idx.size == 0 or idx.min() < 0 or idx.max() >= ckpt.count or len(set(idx.tolist())) != idx.size:
        raise PipelineError("selection does not index this checkpoint's patterns")
    if not np.array_equal(selection.scale, ckpt.scores[idx]):
        raise PipelineError("selection scale does not match this checkpoint's scores")
    config = ckpt.config
    epochs = config.fine_tune_epochs if epochs is None else epochs
    model = SensingModel(
        task=config.task,
        bank=ckpt.binary.rows(idx),
        mean=ckpt.norm["binary_mean"][idx],
        std=ckpt.norm["binary_std"][idx],
        scale=selection.scale.copy(),
        decoder={},
        classes=ckpt.classes,
        channels=config.channels,
        hidden=config.hidden,
        label=f"learned-weighted:{selection.label}",
    )
    skip = build_first_layer(config.task)
    columns = idx if config.first_layer == "columns" else None
    return _train_decoder(model, train, epochs, config, ("finetune", selection.label, selection.k), ckpt.decoder, skip, columns)


def build_first_layer(task: str) -> tuple[str, ...]:
    return ("fc.weight", "fc.bias") if task == RECONSTRUCT else ("fc1.weight", "fc1.bias")


def train_baseline(bank: PatternBank, train: Dataset, config: TrainConfig, epochs: int, label: str = "") -> SensingModel:
    """Decoder trained from scratch on a fixed (random or Hadamard) bank."""
    pix = PixelStats.of(train.flat)
    mean, std = measurement_stats(bank.patterns, pix)
    classes = train.num_classes if config.task == CLASSIFY else 10
    model = SensingModel(config.task, bank, mean, std, np.ones(bank.count), {}, classes, config.channels, config.hidden, label=label or bank.provenance)
    return _train_decoder(model, train, epochs, config, ("baseline", bank.provenance, bank.count), None, ())


def with_config(ckpt: Checkpoint, **changes) -> Checkpoint:
    return replace(ckpt, config=replace(ckpt.config, **changes))
