"""
Three-stage training, cross-validation and inference.

Stage 1 trains DenNet on the projection loss. Stage 2 freezes DenNet and
trains RecNet and AdvNet on the frequency and image losses. Stage 3 trains
everything on every enabled loss. Within a batch the discriminator takes
one step on the detached candidate, then the generator side takes one step
on the GradNorm-weighted sum of the active losses.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import RunConfig, build_config, config_hash
from .datagen import Dataset, SamplePair, derive_seed
from .errors import ConfigError, DatasetError, GeometryError, TrainingDivergedError
from .layers import Adam, ParamGroup
from .losses import (
    TASKS,
    GradNormBalancer,
    discriminator_loss,
    generator_adversarial_loss,
    loss_frequency,
    loss_projection,
    mse,
)
from .metrics import MetricsRow, evaluate, format_value, summarize, write_rows
from .networks import AdvNet, DenNet, Network, RecNet
from .projection import FilteredBackprojection, Sinogram, reconstruct
from .storage import load_into, read_manifest, save_checkpoint, write_tnsr, save_json
from .tensor import ComputationTape, Tensor, backward, gradients, no_grad
from .wavelet import SubbandSet, analyze

logger = logging.getLogger("triplet.trainer")

NETWORKS = ("dennet", "recnet", "advnet")
LOG_COLUMNS = ("step", "stage", "l_p", "l_f", "l_i_mse", "l_g_adv", "l_d_adv", "w_p", "w_f", "w_i")
FOLD_COLUMNS = ("fold", "n_samples", "psnr", "ssim", "rrmse", "median_psnr",
                "input_psnr", "input_ssim", "input_rrmse", "input_median_psnr")


# ============================================================================
# Schedules
# ============================================================================

@dataclass(frozen=True)
class StageSchedule:
    """One training stage: its losses, trainable networks and Adam settings."""

    stage: int
    epochs: int
    lr: float
    losses: Tuple[str, ...]
    trainable: Tuple[str, ...]

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.lr <= 0:
            raise ConfigError(f"stage {self.stage}: epochs must be >= 0 and lr positive")
        if not self.losses or set(self.losses) - set(TASKS):
            raise ConfigError(f"stage {self.stage}: invalid losses {self.losses}")
        if set(self.trainable) - set(NETWORKS):
            raise ConfigError(f"stage {self.stage}: invalid networks {self.trainable}")


def build_schedules(config: RunConfig) -> List[StageSchedule]:
    """
    Stage list for a run. The image pipeline has no DenNet, so it starts
    at stage 2 and never trains on the projection loss.
    """
    enabled = config.losses.enabled
    stages = config.stages
    sinogram = config.networks.pipeline == "sinogram"
    schedules = []
    if sinogram and "projection" in enabled:
        schedules.append(StageSchedule(1, stages.stage1.epochs, stages.stage1.lr, ("projection",), ("dennet",)))
    second = tuple(t for t in ("frequency", "image") if t in enabled)
    schedules.append(StageSchedule(2, stages.stage2.epochs, stages.stage2.lr, second, ("recnet", "advnet")))
    third_nets = NETWORKS if sinogram else ("recnet", "advnet")
    schedules.append(StageSchedule(3, stages.stage3.epochs, stages.stage3.lr, tuple(enabled), third_nets))
    return schedules


# ============================================================================
# Model
# ============================================================================

@dataclass
class Batch:
    s_low: Tensor
    s_std: Tensor
    i_low: Tensor
    i_std: Tensor
    ids: List[str]

    @classmethod
    def stack(cls, samples: Sequence[SamplePair]) -> "Batch":
        def gather(values):
            return Tensor(np.stack([np.asarray(v, np.float32) for v in values])[:, None])
        return cls(
            gather([s.s_low.data for s in samples]),
            gather([s.s_std.data for s in samples]),
            gather([s.i_low for s in samples]),
            gather([s.i_std for s in samples]),
            [s.sample_id for s in samples],
        )


@dataclass
class GeneratorOutput:
    s_den: Optional[Tensor]
    image_in: Tensor
    i_hat: Tensor
    f_hat: SubbandSet


class TripletModel:
    """DenNet -> FBP -> RecNet, plus AdvNet; DenNet is absent in the image pipeline."""

    def __init__(self, config: RunConfig, seed: Optional[int] = None) -> None:
        seed = config.seed if seed is None else seed
        nets = config.networks
        self.config = config
        self.pipeline = nets.pipeline
        self.geometry = config.patch_geometry()
        self.dennet: Optional[DenNet] = None
        if self.pipeline == "sinogram":
            d = nets.dennet
            self.dennet = DenNet(d.channels, d.pattern, d.heads, d.window, d.mlp_ratio,
                                 d.circular_padding, d.dropout, derive_seed(seed, 11))
        r = nets.recnet
        self.recnet = RecNet(r.base_channels, r.levels, r.resampling, r.max_block_width, r.dropout,
                             derive_seed(seed, 12))
        a = nets.advnet
        self.advnet = AdvNet(a.widths, a.strides, a.slope, derive_seed(seed, 13))
        self.fbp = FilteredBackprojection(self.geometry, config.geometry.filter)

    @property
    def networks(self) -> Dict[str, Network]:
        nets = {"recnet": self.recnet, "advnet": self.advnet}
        if self.dennet is not None:
            nets = {"dennet": self.dennet, **nets}
        return nets

    @property
    def groups(self) -> Dict[str, ParamGroup]:
        return {name: net.params for name, net in self.networks.items()}

    def digests(self) -> Dict[str, str]:
        return {name: group.digest() for name, group in self.groups.items()}

    def eval(self) -> "TripletModel":
        for net in self.networks.values():
            net.eval()
        return self

    def generator(self, s_low: Tensor, i_low: Tensor) -> GeneratorOutput:
        if self.dennet is not None:
            s_den, _ = self.dennet(s_low)
            image_in = self.fbp(s_den)
        else:
            s_den, image_in = None, i_low
        i_hat, f_hat = self.recnet(image_in)
        return GeneratorOutput(s_den, image_in, i_hat, f_hat)

    def shared_layer(self, schedule: StageSchedule) -> Tensor:
        """
        Layer whose gradient norms GradNorm compares.

        RecNet's last encoder conv by default. When the projection loss trains
        DenNet alongside the image-side losses (stage 3 of the sinogram
        pipeline) it has no gradient in RecNet, so DenNet's residual head,
        which every active loss reaches, is used instead.
        """
        if self.dennet is not None and "projection" in schedule.losses and "dennet" in schedule.trainable:
            return self.dennet.shared_layer
        return self.recnet.shared_layer

    def save(self, directory: Path) -> Path:
        return save_checkpoint(directory, self.groups, self.config.to_dict(), config_hash(self.config))

    @classmethod
    def load(cls, directory: Path) -> "TripletModel":
        manifest = read_manifest(directory)
        document = dict(manifest["config"])
        config = build_config(document, document.get("preset"))
        model = cls(config)
        load_into(directory, model.groups)
        return model


# ============================================================================
# Training log
# ============================================================================

class TrainingLog:
    """Per-step CSV with the LOG_COLUMNS schema; rows are flushed as written."""

    def __init__(self, path: Optional[Path] = None) -> None:
        self.path = Path(path) if path else None
        self.rows: List[Dict[str, object]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(LOG_COLUMNS)

    def append(self, row: Dict[str, object]) -> None:
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow([_cell(row.get(c)) for c in LOG_COLUMNS])


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format_value(value) if not math.isfinite(value) else f"{value:.8g}"
    return str(value)


# ============================================================================
# Stages
# ============================================================================

@dataclass
class StageResult:
    schedule: StageSchedule
    rows: List[Dict[str, object]] = field(default_factory=list)
    seconds: float = 0.0

    def series(self, column: str) -> List[float]:
        return [float(r[column]) for r in self.rows if r.get(column) is not None]


def _dump_diagnostics(out_dir: Optional[Path], schedule: StageSchedule, step: int,
                      batch: Batch, values: Dict[str, float]) -> Optional[Path]:
    if out_dir is None:
        return None
    folder = Path(out_dir) / "diagnostics" / f"stage{schedule.stage}_step{step}"
    for name in ("s_low", "s_std", "i_low", "i_std"):
        write_tnsr(folder / f"{name}.tnsr", getattr(batch, name).data)
    save_json(folder / "losses.json", {"samples": batch.ids,
                                       "losses": {k: (v if math.isfinite(v) else str(v)) for k, v in values.items()}})
    return folder


def _set_trainable(model: TripletModel, schedule: StageSchedule) -> List[ParamGroup]:
    trainable = []
    for name, net in model.networks.items():
        if name in schedule.trainable:
            net.params.unfreeze()
            net.train()
            trainable.append(net.params)
        else:
            net.params.freeze()
            net.eval()
    return trainable


def run_stage(
    model: TripletModel,
    schedule: StageSchedule,
    samples: Sequence[SamplePair],
    seed: int,
    log: Optional[TrainingLog] = None,
    out_dir: Optional[Path] = None,
    step_offset: int = 0,
    max_steps: Optional[int] = None,
) -> StageResult:
    """
    Train one stage over `samples`.

    Raises:
        TrainingDivergedError: on a non-finite loss, after writing the batch
            to <out_dir>/diagnostics/stage<k>_step<n>/
        DatasetError: when there is nothing to train on
    """
    if not samples:
        raise DatasetError(f"stage {schedule.stage}: no training samples")
    config = model.config
    trainable = _set_trainable(model, schedule)
    Adam.reset(trainable)
    optimizer = Adam(schedule.lr)
    balancer = GradNormBalancer(schedule.losses, config.losses.gradnorm_alpha, config.losses.gradnorm_lr)
    generator_groups = [g for g in trainable if g.name != "advnet"]
    train_adv = "advnet" in schedule.trainable and "image" in schedule.losses
    rng = np.random.default_rng(seed)
    batch_size = config.stages.batch_size
    result = StageResult(schedule)
    logger.info("Stage %d started: %d epochs, lr %g, losses %s, training %s",
                schedule.stage, schedule.epochs, schedule.lr, ",".join(schedule.losses),
                ",".join(schedule.trainable))
    started = time.time()

    step = step_offset
    for epoch in range(schedule.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(order), batch_size):
            if max_steps is not None and step - step_offset >= max_steps:
                break
            step += 1
            batch = Batch.stack([samples[i] for i in order[start:start + batch_size]])
            row = _train_step(model, schedule, batch, optimizer, balancer, generator_groups,
                              train_adv, step, out_dir)
            result.rows.append(row)
            if log is not None:
                log.append(row)
        logger.debug("Stage %d epoch %d done (step %d)", schedule.stage, epoch + 1, step)

    for group in trainable:
        group.zero_grad()
    result.seconds = time.time() - started
    logger.info("Stage %d finished in %.1fs (%d steps)", schedule.stage, result.seconds, len(result.rows))
    return result


def _train_step(model, schedule, batch, optimizer, balancer, generator_groups, train_adv, step, out_dir):
    config = model.config
    row: Dict[str, object] = {"step": step, "stage": schedule.stage}
    values: Dict[str, float] = {}

    if schedule.losses == ("projection",):
        with ComputationTape() as tape:
            s_den, _ = model.dennet(batch.s_low)
            l_p = loss_projection(s_den, batch.s_std)
        values["l_p"] = l_p.item()
        _check_finite(values, schedule, step, batch, out_dir)
        backward(l_p, tape, leaves=[p for g in generator_groups for p in g])
        optimizer.step(generator_groups)
        for g in generator_groups:
            g.zero_grad()
        row.update(l_p=values["l_p"], w_p=1.0)
        return row

    with ComputationTape() as tape:
        out = model.generator(batch.s_low, batch.i_low)

        if train_adv:
            adv_params = list(model.advnet.params)
            with ComputationTape() as d_tape:
                p_real = model.advnet(batch.i_low, batch.i_std)
                p_fake = model.advnet(batch.i_low, out.i_hat.detach())
                l_d = discriminator_loss(p_real, p_fake)
            values["l_d_adv"] = l_d.item()
            _check_finite(values, schedule, step, batch, out_dir)
            backward(l_d, d_tape, leaves=adv_params)
            optimizer.step([model.advnet.params])
            model.advnet.params.zero_grad()

        losses: Dict[str, Tensor] = {}
        if "projection" in schedule.losses:
            losses["projection"] = loss_projection(out.s_den, batch.s_std)
            values["l_p"] = losses["projection"].item()
        if "frequency" in schedule.losses:
            f_std = SubbandSet(1, analyze(batch.i_std.data))
            losses["frequency"] = loss_frequency(out.f_hat, f_std, config.losses.frequency_alpha)
            values["l_f"] = losses["frequency"].item()
        if "image" in schedule.losses:
            l_i_mse = mse(out.i_hat, batch.i_std)
            l_g_adv = generator_adversarial_loss(model.advnet(batch.i_low, out.i_hat))
            losses["image"] = l_i_mse + l_g_adv * config.losses.adversarial_weight
            values["l_i_mse"] = l_i_mse.item()
            values["l_g_adv"] = l_g_adv.item()
        _check_finite(values, schedule, step, batch, out_dir)
        total = balancer.combine(losses)

    weights_used = {t: balancer.weight(t) for t in schedule.losses}
    norms = {}
    if len(losses) > 1:
        shared = model.shared_layer(schedule)
        for task, loss in losses.items():
            (g,) = gradients(loss, tape, [shared])
            norms[task] = float(np.sqrt(np.sum(np.square(g, dtype=np.float64))))

    backward(total, tape, leaves=[p for g in generator_groups for p in g])
    optimizer.step(generator_groups)
    for g in generator_groups:
        g.zero_grad()
    if len(losses) > 1:
        balancer.update({t: losses[t].item() for t in losses}, norms)

    row.update(values)
    row.update(
        w_p=weights_used.get("projection"),
        w_f=weights_used.get("frequency"),
        w_i=weights_used.get("image"),
    )
    return row


def _check_finite(values: Dict[str, float], schedule: StageSchedule, step: int,
                  batch: Batch, out_dir: Optional[Path]) -> None:
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if not bad:
        return
    folder = _dump_diagnostics(out_dir, schedule, step, batch, values)
    logger.error("Stage %d step %d diverged: %s (batch dumped to %s)", schedule.stage, step, bad, folder)
    raise TrainingDivergedError(f"stage {schedule.stage} step {step}: non-finite loss {bad}")


# ============================================================================
# Evaluation and cross-validation
# ============================================================================

def predict(model: TripletModel, samples: Sequence[SamplePair], batch_size: int = 4) -> List[np.ndarray]:
    """RecNet outputs [N, N, Z] for each sample, networks in eval mode."""
    model.eval()
    outputs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = Batch.stack(samples[start:start + batch_size])
            out = model.generator(batch.s_low, batch.i_low)
            outputs.extend(out.i_hat.data[:, 0])
    return outputs


def evaluate_samples(model: TripletModel, samples: Sequence[SamplePair],
                     batch_size: int = 4) -> Tuple[List[MetricsRow], List[MetricsRow]]:
    """(model rows, LPET input rows), both scored against i_std."""
    predictions = predict(model, samples, batch_size)
    rows = [evaluate(p, s.i_std, s.sample_id) for p, s in zip(predictions, samples)]
    baseline = [evaluate(s.i_low, s.i_std, s.sample_id) for s in samples]
    return rows, baseline


def fold_splits(dataset: Dataset, seed: int) -> List[Tuple[str, List[str], List[str]]]:
    """(label, train phantom ids, test phantom ids) per fold; one fold means 80/20."""
    folds = dataset.manifest["folds"]
    labels = sorted(set(folds.values()))
    if len(labels) == 1:
        ids = sorted(folds)
        if len(ids) < 2:
            raise DatasetError("an 80/20 split needs at least two phantoms")
        order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
        n_test = max(1, int(round(0.2 * len(ids))))
        return [("0", order[n_test:], order[:n_test])]
    splits = []
    for label in labels:
        test = sorted(p for p, f in folds.items() if f == label)
        train = sorted(p for p, f in folds.items() if f != label)
        if not test or not train:
            raise DatasetError(f"fold {label} has no data")
        splits.append((str(label), train, test))
    return splits


@dataclass
class TrainingReport:
    fold_metrics: List[Dict[str, object]]
    sample_rows: List[MetricsRow]
    input_rows: List[MetricsRow]
    checkpoints: List[Path]
    stage_results: Dict[str, List[StageResult]]


def train_full(config: RunConfig, dataset: Dataset, out_dir: Path,
               max_steps: Optional[int] = None) -> TrainingReport:
    """
    Train stages 1 -> 2 -> 3 on every fold, evaluate on the held-out fold
    and write training_log.csv, metrics.csv and samples.csv under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset.geometry != config.patch_geometry():
        raise GeometryError(f"dataset geometry {dataset.geometry} differs from config {config.patch_geometry()}")
    schedules = build_schedules(config)
    log = TrainingLog(out_dir / "training_log.csv")
    fold_metrics, sample_rows, input_rows, checkpoints = [], [], [], []
    stage_results: Dict[str, List[StageResult]] = {}

    for label, train_ids, test_ids in fold_splits(dataset, config.seed):
        train, test = dataset.select(train_ids), dataset.select(test_ids)
        if not train or not test:
            raise DatasetError(f"fold {label}: missing samples")
        logger.info("Fold %s: %d train / %d test samples", label, len(train), len(test))
        fold_seed = derive_seed(config.seed, 100 + int(label))
        model = TripletModel(config, fold_seed)
        results = []
        step = 0
        for schedule in schedules:
            result = run_stage(model, schedule, train, derive_seed(fold_seed, schedule.stage), log,
                               out_dir, step, max_steps)
            step += len(result.rows)
            results.append(result)
        stage_results[label] = results
        checkpoints.append(model.save(out_dir / "checkpoints" / f"fold{label}"))

        rows, baseline = evaluate_samples(model, test, config.stages.batch_size)
        sample_rows.extend(rows)
        input_rows.extend(baseline)
        ours, theirs = summarize(rows), summarize(baseline)
        fold_metrics.append({
            "fold": label, "n_samples": len(rows),
            "psnr": ours["psnr"], "ssim": ours["ssim"], "rrmse": ours["rrmse"], "median_psnr": ours["median_psnr"],
            "input_psnr": theirs["psnr"], "input_ssim": theirs["ssim"], "input_rrmse": theirs["rrmse"],
            "input_median_psnr": theirs["median_psnr"],
        })
        logger.info("Fold %s: PSNR %.2f dB (input %.2f dB), SSIM %.4f, rRMSE %.4f",
                    label, ours["psnr"], theirs["psnr"], ours["ssim"], ours["rrmse"])

    _write_fold_metrics(out_dir / "metrics.csv", fold_metrics)
    write_rows(out_dir / "samples.csv", sample_rows)
    write_rows(out_dir / "samples_input.csv", input_rows)
    return TrainingReport(fold_metrics, sample_rows, input_rows, checkpoints, stage_results)


def _write_fold_metrics(path: Path, folds: List[Dict[str, object]]) -> None:
    numeric = [c for c in FOLD_COLUMNS if c not in ("fold",)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(FOLD_COLUMNS)
        for entry in folds:
            writer.writerow([entry["fold"]] + [_cell(entry[c]) if c != "n_samples" else entry[c] for c in numeric])
        for label, reducer in (("mean", np.mean), ("std", np.std)):
            cells = [label]
            for c in numeric:
                values = [float(e[c]) for e in folds if math.isfinite(float(e[c]))]
                cells.append(_cell(float(reducer(values))) if values else "nan")
            writer.writerow(cells)


# ============================================================================
# Inference
# ============================================================================

@dataclass
class InferenceResult:
    s_den: np.ndarray
    i_hat: np.ndarray
    i_input: np.ndarray


def infer(s_low: Union[Sinogram, Sequence[Sinogram]], checkpoint: Union[Path, str, TripletModel]) -> Union[InferenceResult, List[InferenceResult]]:
    """
    One forward pass: DenNet -> FBP -> RecNet (image pipeline: classical
    reconstruction -> RecNet). Parameters are never modified.

    Raises:
        GeometryError: when a sinogram's geometry differs from the one the
            checkpoint was trained with
    """
    model = checkpoint if isinstance(checkpoint, TripletModel) else TripletModel.load(Path(checkpoint))
    single = isinstance(s_low, Sinogram)
    sinos = [s_low] if single else list(s_low)
    for sino in sinos:
        if sino.geometry != model.geometry:
            raise GeometryError(f"sinogram geometry {sino.geometry} differs from checkpoint geometry {model.geometry}")
    data = model.config.data
    model.eval()
    results = []
    with no_grad():
        batch = Tensor(np.stack([s.data for s in sinos])[:, None])
        if model.dennet is not None:
            s_den, _ = model.dennet(batch)
            image_in = model.fbp(s_den)
        else:
            s_den = batch
            image_in = Tensor(np.stack([
                reconstruct(s, data.reconstructor, model.config.geometry.filter,
                            data.osem_iterations, data.osem_subsets) for s in sinos])[:, None])
        i_hat, _ = model.recnet(image_in)
    for k in range(len(sinos)):
        results.append(InferenceResult(s_den.data[k, 0].copy(), i_hat.data[k, 0].copy(), image_in.data[k, 0].copy()))
    return results[0] if single else results
