"""Splitting, AdamW, training/fine-tuning loops, evaluation and reporting."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugmentConfig, augment_array
from .errors import ConfigError, NumericError, VolumeFormatError
from .models import Model, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .nn.layers import BatchNorm3d
from .nn.functional import sigmoid
from .objectives import (
    ConfusionMatrix,
    LossParams,
    MetricReport,
    bce_loss,
    confusion,
    focal_loss,
    metric_report,
    mse_loss,
    threshold_decisions,
)
from .preprocess import PreprocessConfig, preprocess_pipeline
from .synthgen import calcium_burden_target
from .volume_io import DatasetManifest, read_mask, read_volume

log = logging.getLogger(__name__)

LOSSES = ("bce", "focal")
FINE_TUNE_POLICIES = ("scratch", "full_ft", "frozen_backbone")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 500
    loss: str = "focal"
    loss_params: LossParams = field(default_factory=LossParams)
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    fine_tune_policy: str = "scratch"
    pretrain_checkpoint: Optional[str] = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # re-estimate BN population statistics from the training set after fitting
    recalibrate_bn: bool = True

    def validate(self, prefix="train"):
        if not self.learning_rate > 0:
            raise ConfigError(f"{prefix}.learning_rate", "must be > 0")
        if not self.weight_decay > 0:
            raise ConfigError(f"{prefix}.weight_decay", "must be > 0")
        if int(self.batch_size) < 1:
            raise ConfigError(f"{prefix}.batch_size", "must be >= 1")
        if not 1 <= int(self.max_epochs) <= 500:
            raise ConfigError(f"{prefix}.max_epochs", "must lie in [1, 500]")
        if self.loss not in LOSSES:
            raise ConfigError(f"{prefix}.loss", f"must be one of {LOSSES}")
        if self.fine_tune_policy not in FINE_TUNE_POLICIES:
            raise ConfigError(f"{prefix}.fine_tune_policy", f"must be one of {FINE_TUNE_POLICIES}")
        if not self.seeds:
            raise ConfigError(f"{prefix}.seeds", "need at least one seed")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError(f"{prefix}.adam_beta1", "betas must lie in [0, 1)")
        if not self.adam_eps > 0:
            raise ConfigError(f"{prefix}.adam_eps", "must be > 0")
        self.loss_params.validate(f"{prefix}.loss_params")
        self.augment.validate(f"{prefix}.augment")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        lp = LossParams.from_dict(d.pop("loss_params", {}))
        aug = AugmentConfig.from_dict(d.pop("augment", {}))
        return cls(loss_params=lp, augment=aug, **d)


@dataclass
class SplitConfig:
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self, prefix="split"):
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"{prefix}.train_fraction", "must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# -- splitting ---------------------------------------------------------------

def stratified_split(manifest: DatasetManifest, config: SplitConfig):
    """Per class, ``round(n_c * fraction)`` patients go to train (seeded)."""
    config.validate()
    labels = manifest.labels
    rng = np.random.default_rng(config.seed)
    train_ids = set()
    for c in (0, 1):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise VolumeFormatError(f"class {c} has {idx.size} patient(s); need >= 2 to split", field="label")
        n_train = int(math.floor(idx.size * config.train_fraction + 0.5))
        n_train = min(max(n_train, 1), idx.size - 1)
        chosen = rng.permutation(idx)[:n_train]
        train_ids.update(manifest.records[i].patient_id for i in chosen)
    train = [r for r in manifest.records if r.patient_id in train_ids]
    test = [r for r in manifest.records if r.patient_id not in train_ids]
    return DatasetManifest(train, manifest.root), DatasetManifest(test, manifest.root)


# -- optimizer ---------------------------------------------------------------

@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0


def init_adamw(parameters) -> AdamWState:
    return AdamWState([np.zeros_like(p.value) for p in parameters],
                      [np.zeros_like(p.value) for p in parameters])


def adamw_step(parameters, step_count, state: AdamWState, config: TrainConfig):
    """One decoupled-weight-decay Adam update; ``step_count`` starts at 1."""
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    bc1 = 1.0 - b1 ** step_count
    bc2 = 1.0 - b2 ** step_count
    for p, m, v in zip(parameters, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.value -= (lr * update + lr * wd * p.value).astype(p.value.dtype, copy=False)
    state.step = step_count


class AdamW:
    def __init__(self, parameters, config: TrainConfig):
        self.parameters = list(parameters)
        self.config = config
        self.state = init_adamw(self.parameters)

    def step(self):
        adamw_step(self.parameters, self.state.step + 1, self.state, self.config)


# -- data --------------------------------------------------------------------

@dataclass
class ArrayDataset:
    """Preprocessed inputs ``X`` of shape (N, 1, D, H, W) and targets ``y``."""

    X: np.ndarray
    y: np.ndarray
    ids: list
    spacing: tuple = (5.0, 5.0, 5.0)

    def __len__(self):
        return len(self.ids)

    def subset(self, idx):
        idx = np.asarray(idx)
        return ArrayDataset(self.X[idx], self.y[idx], [self.ids[i] for i in idx], self.spacing)


def _prepare_record(manifest, record, config: PreprocessConfig, use_masks: bool):
    vol = read_volume(manifest.resolve(record.volume_path))
    if vol.unit == "normalized":
        if tuple(vol.shape) != tuple(config.target_shape):
            raise VolumeFormatError(
                f"{record.patient_id}: preprocessed volume shape {vol.shape} != "
                f"target {tuple(config.target_shape)}", field="shape",
            )
        return vol.voxels.astype(np.float32)
    masks = None
    if use_masks:
        if not record.mask_paths:
            raise VolumeFormatError(f"{record.patient_id}: mask crop requested but no masks listed",
                                    field="heart_mask")
        masks = [read_mask(manifest.resolve(p)) for p in record.mask_paths]
    return preprocess_pipeline(vol, config, masks).voxels.astype(np.float32)


def load_dataset(manifest: DatasetManifest, config: PreprocessConfig, use_masks=False,
                 targets=None, jobs: int = 1) -> ArrayDataset:
    """Read (and preprocess HU volumes of) every record, in manifest order."""
    def one(rec):
        return _prepare_record(manifest, rec, config, use_masks)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            grids = list(ex.map(one, manifest.records))
    else:
        grids = [one(r) for r in manifest.records]
    X = np.stack(grids)[:, None]
    y = manifest.labels.astype(np.float64) if targets is None else np.asarray(targets, dtype=np.float64)
    t = float(config.target_spacing_mm)
    return ArrayDataset(X, y, manifest.patient_ids, (t, t, t))


def pretext_targets(manifest: DatasetManifest, threshold_hu: float = 130.0):
    """Calcium-burden targets from the raw HU volumes."""
    targets = []
    for r in manifest.records:
        vol = read_volume(manifest.resolve(r.volume_path))
        if vol.unit != "HU":
            raise VolumeFormatError(f"{r.patient_id}: pretext targets need HU volumes", field="unit")
        targets.append(calcium_burden_target(vol, threshold_hu))
    return np.array(targets)


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    loss_trace: list
    train_confusion: Optional[ConfusionMatrix] = None
    train_report: Optional[MetricReport] = None


def iterate_batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def make_batch(data: ArrayDataset, idx, rng, augment: AugmentConfig, training: bool):
    xb = data.X[idx].copy()
    # augmentation only ever touches training batches
    if training and augment.enabled:
        for i in range(xb.shape[0]):
            xb[i, 0] = augment_array(xb[i, 0], data.spacing, rng, augment)
    return xb


def _objective(kind, outputs, targets, config: TrainConfig):
    """Loss and gradient w.r.t. the raw model outputs."""
    z = outputs.reshape(-1).astype(np.float64)
    if kind == "mse":
        return mse_loss(z, targets)
    p = sigmoid(z)
    if config.loss == "focal":
        loss, dp = focal_loss(p, targets, config.loss_params)
    else:
        loss, dp = bce_loss(p, targets, config.loss_params.prob_clamp_eps)
    return loss, dp * p * (1.0 - p)


def _fit(model: Model, data: ArrayDataset, config: TrainConfig, rng, kind: str, epochs=None,
         on_epoch=None):
    frozen = config.fine_tune_policy == "frozen_backbone"
    params = model.head_parameters() if frozen else model.parameters()
    opt = AdamW(params, config)
    trace = []
    n_epochs = int(config.max_epochs if epochs is None else epochs)
    for epoch in range(n_epochs):
        total, count = 0.0, 0
        for idx in iterate_batches(len(data), config.batch_size, rng):
            xb = make_batch(data, idx, rng, config.augment, training=True)
            if frozen:
                # backbone stays in eval mode: no BN statistic updates either
                model.eval()
            else:
                model.train()
            out = model.forward(xb)
            loss, grad = _objective(kind, out, data.y[idx], config)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch + 1}", field="loss")
            model.zero_grad()
            model.backward(grad.reshape(-1, 1).astype(out.dtype), head_only=frozen)
            opt.step()
            total += loss * len(idx)
            count += len(idx)
        trace.append(total / count)
        log.debug("epoch %d loss %.6f", epoch + 1, trace[-1])
        if on_epoch is not None and on_epoch(epoch + 1, trace[-1]):
            break
    model.eval()
    return trace


def recalibrate_batchnorm(model: Model, X, batch_size: int = 8):
    """Replace BN running statistics by their average over ``X``.

    One forward pass in train mode without gradients, in fixed order and
    without augmentation; each layer's mean and unbiased variance are
    averaged over the batches, weighted by batch size. Running statistics
    only matter in eval mode, so this leaves the learned weights untouched
    but removes the lag of the exponential moving average behind them.
    """
    norms = [m for _, m in model.named_modules() if isinstance(m, BatchNorm3d)]
    if not norms:
        return model
    momenta = [m.momentum for m in norms]
    n = X.shape[0]
    # fold a trailing batch of one into the previous batch (BN needs >= 2 samples)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] < 2:
        starts.pop()
    bounds = list(zip(starts, starts[1:] + [n]))
    try:
        model.train()
        seen = 0
        for lo, hi in bounds:
            seen += hi - lo
            for m in norms:
                m.momentum = (hi - lo) / seen
            model.forward(X[lo:hi])
    finally:
        for m, mom in zip(norms, momenta):
            m.momentum = mom
        model.eval()
    return model


def train(model: Model, data, config: TrainConfig, seed: int = 0, preprocess: PreprocessConfig = None,
          epochs=None, on_epoch=None) -> TrainResult:
    """Train a classifier; returns the per-epoch loss trace and train metrics.

    ``data`` is an :class:`ArrayDataset` or a manifest (loaded with
    ``preprocess``). Deterministic given ``seed``. ``on_epoch(epoch, loss)``
    runs after every epoch; returning True ends training there.
    """
    config.validate()
    if isinstance(data, DatasetManifest):
        data = load_dataset(data, preprocess or PreprocessConfig())
    _check_shape(model, data)
    rng = np.random.default_rng(seed)
    trace = _fit(model, data, config, rng, "classify", epochs, on_epoch)
    if config.recalibrate_bn and config.fine_tune_policy != "frozen_backbone":
        recalibrate_batchnorm(model, data.X, config.batch_size)
    probs = predict_proba(model, data.X, config.batch_size)
    cm = confusion(threshold_decisions(probs), data.y.astype(int))
    try:
        rep = metric_report(cm)
    except ValueError:
        rep = None
    return TrainResult(trace, cm, rep)


def pretrain_pretext(model: Model, data: ArrayDataset, config: TrainConfig, seed: int = 0,
                     epochs=None, on_epoch=None) -> TrainResult:
    """Regression pretraining with MSE on calcium-burden targets."""
    config.validate()
    if model.config.head != "regressor_scalar":
        raise ConfigError("model.head", "pretext pretraining needs head=regressor_scalar")
    _check_shape(model, data)
    rng = np.random.default_rng(seed)
    trace = _fit(model, data, config, rng, "mse", epochs, on_epoch)
    if config.recalibrate_bn and config.fine_tune_policy != "frozen_backbone":
        recalibrate_batchnorm(model, data.X, config.batch_size)
    return TrainResult(trace)


def _check_shape(model, data):
    if tuple(data.X.shape[1:]) != (1,) + tuple(model.config.input_shape):
        raise VolumeFormatError(
            f"data grid {data.X.shape[1:]} does not match model input {(1,) + tuple(model.config.input_shape)}",
            field="shape",
        )


def predict_outputs(model: Model, X, batch_size=8):
    model.eval()
    outs = [model.forward(X[i:i + batch_size]) for i in range(0, X.shape[0], batch_size)]
    return np.concatenate(outs).reshape(-1).astype(np.float64)


def predict_proba(model: Model, X, batch_size=8):
    return sigmoid(predict_outputs(model, X, batch_size))


def evaluate(model: Model, data: ArrayDataset, threshold: float = 0.5, batch_size: int = 8):
    """Eval-mode forward, sigmoid, threshold; returns ``(MetricReport, ConfusionMatrix)``."""
    probs = predict_proba(model, data.X, batch_size)
    cm = confusion(threshold_decisions(probs, threshold), data.y.astype(int))
    return metric_report(cm), cm


def mean_intensity_baseline(train: ArrayDataset, test: ArrayDataset):
    """Best single threshold (either direction) on mean voxel intensity.

    Fitted on ``train`` by maximizing balanced accuracy, scored on ``test``.
    """
    def means(d):
        return d.X.reshape(len(d), -1).mean(axis=1)

    m_tr, y_tr = means(train), train.y.astype(int)
    best = (-1.0, 0.0, 1)
    for t in np.unique(m_tr):
        for sign in (1, -1):
            dec = (sign * m_tr >= sign * t).astype(int)
            ba = metric_report(confusion(dec, y_tr)).balanced_accuracy
            if ba > best[0]:
                best = (ba, t, sign)
    _, t, sign = best
    dec = (sign * means(test) >= sign * t).astype(int)
    return metric_report(confusion(dec, test.y.astype(int)))


# -- experiments -------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    test_report: MetricReport
    test_confusion: ConfusionMatrix
    train_confusion: ConfusionMatrix
    loss_trace: list

    def to_dict(self):
        return {
            "seed": self.seed,
            "test_report": self.test_report.to_dict(),
            "test_confusion": self.test_confusion.to_dict(),
            "train_confusion": self.train_confusion.to_dict(),
            "loss_trace": list(self.loss_trace),
        }


def mean_sd(values):
    """Mean and sample (n - 1) standard deviation; SD is 0 for one value."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd


@dataclass
class RunReport:
    strategy: str
    model: str
    seeds: list
    per_seed: list

    @property
    def ba_values(self):
        return [r.test_report.balanced_accuracy for r in self.per_seed]

    @property
    def ba_mean(self):
        return mean_sd(self.ba_values)[0]

    @property
    def ba_sd(self):
        return mean_sd(self.ba_values)[1]

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "model": self.model,
            "seeds": list(self.seeds),
            "ba_mean": self.ba_mean,
            "ba_sd": self.ba_sd,
            "per_seed": [r.to_dict() for r in self.per_seed],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def loss_trace_csv(trace):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    for i, v in enumerate(trace, start=1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


@dataclass
class Strategy:
    """One row of the comparison table."""

    name: str
    use_masks: bool = False
    pretrain: bool = False
    fine_tune_policy: str = "full_ft"


STANDARD_STRATEGIES = (
    Strategy("scratch", use_masks=False, pretrain=False, fine_tune_policy="scratch"),
    Strategy("pretext-FT", use_masks=False, pretrain=True),
    Strategy("pretext-FT+mask-crop", use_masks=True, pretrain=True),
)

MODEL_NAMES = {"mini_densenet": "MiniDenseNet", "mini_resnet": "MiniResNet"}


def run_seed(model_config: ModelConfig, train_data, test_data, config: TrainConfig, seed: int,
             pretrain_checkpoint=None, epochs=None) -> SeedResult:
    model = build_model(model_config, seed)
    if pretrain_checkpoint is not None:
        load_checkpoint(model, pretrain_checkpoint, policy="backbone_only")
    res = train(model, train_data, config, seed=seed, epochs=epochs)
    rep, cm = evaluate(model, test_data, batch_size=config.batch_size)
    return SeedResult(seed, rep, cm, res.train_confusion, res.loss_trace)


def run_experiment_matrix(manifest: DatasetManifest, strategies, seeds, model_config: ModelConfig,
                          train_config: TrainConfig, preprocess: PreprocessConfig,
                          split: SplitConfig, pretrain_checkpoint=None, jobs: int = 1):
    """Train and evaluate every strategy x seed on one fixed split.

    Strategies with ``pretrain`` need ``pretrain_checkpoint`` (a pretext
    regression checkpoint loaded backbone-only). Seeds run in parallel
    threads when ``jobs > 1``; results are gathered in seed order.
    """
    train_m, test_m = stratified_split(manifest, split)
    reports = []
    for strat in strategies:
        if strat.pretrain and pretrain_checkpoint is None:
            raise ConfigError("train.pretrain_checkpoint", f"strategy {strat.name!r} needs a pretext checkpoint")
        tr = load_dataset(train_m, preprocess, use_masks=strat.use_masks, jobs=jobs)
        te = load_dataset(test_m, preprocess, use_masks=strat.use_masks, jobs=jobs)
        cfg = TrainConfig.from_dict(train_config.to_dict())
        cfg.fine_tune_policy = strat.fine_tune_policy
        ckpt = pretrain_checkpoint if strat.pretrain else None

        def one(seed):
            return run_seed(model_config, tr, te, cfg, int(seed), ckpt)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as ex:
                per_seed = list(ex.map(one, seeds))
        else:
            per_seed = [one(s) for s in seeds]
        reports.append(RunReport(strat.name, MODEL_NAMES.get(model_config.variant, model_config.variant),
                                 list(seeds), per_seed))
    return reports


def comparison_rows(reports):
    rows = []
    for r in reports:
        mean, sd = mean_sd(r.ba_values)
        rows.append({
            "model": r.model,
            "training_strategy": r.strategy,
            "test_ba_mean": mean,
            "test_ba_sd": sd,
            "test_ba_pct": f"{100 * mean:.1f} ± {100 * sd:.1f}",
        })
    return rows


def comparison_csv(reports):
    buf = io.StringIO()
    cols = ["model", "training_strategy", "test_ba_mean", "test_ba_sd", "test_ba_pct"]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in comparison_rows(reports):
        w.writerow({**row, "test_ba_mean": f"{row['test_ba_mean']:.6f}", "test_ba_sd": f"{row['test_ba_sd']:.6f}"})
    return buf.getvalue()


def comparison_text(reports):
    rows = comparison_rows(reports)
    header = ("Model", "Training Strategy", "Test BA (%)")
    body = [(r["model"], r["training_strategy"], r["test_ba_pct"]) for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(header)]
    line = "  ".join("-" * w for w in widths)

    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    n = len(reports[0].seeds) if reports else 0
    out = [f"Test balanced accuracy, mean ± SD over {n} run(s)", line, fmt(header), line]
    out += [fmt(b) for b in body]
    out.append(line)
    return "\n".join(out) + "\n"


def write_run_outputs(report: RunReport, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_report.json").write_text(report.to_json())
    for r in report.per_seed:
        (out_dir / f"loss_trace_seed{r.seed}.csv").write_text(loss_trace_csv(r.loss_trace))


def save_trained(model, path, task):
    return save_checkpoint(model, path, task=task)
