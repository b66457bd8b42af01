import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from tqdm import tqdm

from models.schemas import EpochRecord, ModelConfig, Task, TrainConfig, TrainReport
from services.evaluator import accuracy, mae, predict_argmax, predict_raw
from services.features import Dataset, FeatureScaler, fit_scaler
from services.transformer import ModelParams, ProcessTransformer, init_params
from utils.errors import DivergedLoss, EmptyDataset, NonFiniteGradient
from utils.rng import DROPOUT_STREAM, SHUFFLE_STREAM, philox_rng
from utils.tensor import Tape, Tensor, backward, cross_entropy, log_cosh

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def adam_step(params: ModelParams, grads: Optional[Mapping[str, np.ndarray]], state: AdamState,
              config: TrainConfig):
    """One Adam update of every parameter, in place.

    ``grads`` maps parameter names to gradients; when None the ``grad`` of each
    parameter is used. A missing gradient counts as zero. Gradients are
    zeroed afterwards.
    """
    if grads is None:
        grads = {p.name: p.grad for p in params if p.grad is not None}
    # nothing is touched unless every gradient is finite
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}", parameter=name)

    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.data)
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)

    for g in grads.values():
        if isinstance(g, np.ndarray) and g.flags.writeable:
            g[...] = 0.0
    params.zero_grad()


def class_weights(targets: np.ndarray, num_classes: int) -> np.ndarray:
    """Inverse class frequency, mean 1 over the classes present; absent classes get 1."""
    counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=num_classes).astype(np.float64)
    weights = np.ones(num_classes)
    present = counts > 0
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights


def split_train_validation(n_samples: int, validation_fraction: float) -> Tuple[np.ndarray, np.ndarray]:
    """Indices of the training part and of the trailing validation part."""
    n_val = max(1, math.floor(validation_fraction * n_samples))
    if n_samples < 2 or n_val >= n_samples:
        raise EmptyDataset(
            f"{n_samples} samples cannot be split into non-empty training and validation parts"
        )
    order = np.arange(n_samples)
    return order[: n_samples - n_val], order[n_samples - n_val:]


def fit_training_scaler(dataset: Dataset, validation_fraction: float) -> FeatureScaler:
    """Scaler fitted on the samples that will be trained on, leaving the validation tail out."""
    train_idx, _ = split_train_validation(len(dataset), validation_fraction)
    return fit_scaler(dataset.subset(train_idx).samples)


def iter_batches(indices: np.ndarray, batch_size: int,
                 rng: Optional[np.random.Generator] = None) -> List[np.ndarray]:
    if rng is not None:
        indices = indices[rng.permutation(len(indices))]
    return [indices[i:i + batch_size] for i in range(0, len(indices), batch_size)]


class _TaskData:
    """Model inputs and training targets of one task, precomputed for the whole dataset."""

    def __init__(self, dataset: Dataset, task: Task, scaler: Optional[FeatureScaler]):
        arrays = dataset.arrays
        self.task = task
        self.ids = arrays.ids
        if task.is_regression:
            self.fv = scaler.scale_fv(arrays.fv)
            self.raw_target = arrays.regression_target(task)
            self.target = scaler.scale_target(task, self.raw_target)
        else:
            self.fv = None
            self.raw_target = arrays.target_activity
            self.target = arrays.target_activity

    def fv_at(self, idx: np.ndarray) -> Optional[np.ndarray]:
        return None if self.fv is None else self.fv[idx]


class Trainer:
    """Mini-batch Adam over a ProcessTransformer with best-validation-epoch selection."""

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 scaler: Optional[FeatureScaler] = None, params: Optional[ModelParams] = None):
        self.model_config = model_config
        self.config = train_config
        self.scaler = scaler
        initial = params if params is not None else init_params(model_config)
        self.model = ProcessTransformer(model_config, initial.copy())
        self.task = model_config.task
        self.weights: Optional[np.ndarray] = None

    # losses

    def _loss(self, out: Tensor, targets: np.ndarray, normalizer: Optional[float] = None) -> Tensor:
        if self.task.is_regression:
            return log_cosh(out, targets, normalizer)
        return cross_entropy(out, targets, self.weights, normalizer)

    def _normalizer(self, targets: np.ndarray) -> float:
        if self.task.is_regression or self.weights is None:
            return float(len(targets))
        return float(self.weights[targets].sum())

    # gradients

    def _chunk_gradient(self, data: _TaskData, idx: np.ndarray, normalizer: float,
                        epoch: int, step: int, chunk: int) -> Tuple[float, Dict[str, np.ndarray]]:
        leaves = self.model.params.leaves()
        rng = philox_rng(self.config.seed, DROPOUT_STREAM, epoch, step, chunk)
        with Tape():
            out = self.model.forward(data.ids[idx], data.fv_at(idx), training=True, rng=rng, params=leaves)
            loss = self._loss(out, data.target[idx], normalizer)
            backward(loss)
        grads = {
            name: t.grad if t.grad is not None else np.zeros_like(t.data)
            for name, t in leaves.items()
        }
        return loss.item(), grads

    def batch_gradient(self, data: _TaskData, batch: np.ndarray, epoch: int, step: int,
                       pool: Optional[ThreadPoolExecutor] = None) -> Tuple[float, Dict[str, np.ndarray]]:
        """Loss and gradient of one batch, summed over fixed micro-batches in order."""
        normalizer = self._normalizer(data.target[batch])
        size = self.config.micro_batch_size
        chunks = [batch[i:i + size] for i in range(0, len(batch), size)]

        def work(ci: int):
            return self._chunk_gradient(data, chunks[ci], normalizer, epoch, step, ci)

        results = list(pool.map(work, range(len(chunks)))) if pool else [work(ci) for ci in range(len(chunks))]
        loss = 0.0
        total = {name: np.zeros_like(p.data) for name, p in self.model.params.items()}
        for chunk_loss, grads in results:
            loss += chunk_loss
            for name, g in grads.items():
                total[name] += g
        return loss, total

    # validation

    def validate(self, data: _TaskData, idx: np.ndarray) -> Tuple[float, float]:
        """Validation loss and metric: accuracy for next_activity, MAE in days otherwise."""
        raw = predict_raw(self.model, data.ids[idx], data.fv_at(idx), threads=self.config.threads)
        loss = self._loss(Tensor(raw), data.target[idx]).item()
        if self.task.is_regression:
            days = self.scaler.unscale_target(self.task, raw)
            return loss, mae(days, data.raw_target[idx])
        return loss, accuracy(predict_argmax(raw), data.target[idx])

    def _improved(self, metric: float, best: Optional[float]) -> bool:
        if best is None:
            return True
        return metric < best if self.task.is_regression else metric > best

    def fit(self, dataset: Dataset) -> Tuple[ModelParams, TrainReport]:
        cfg = self.config
        if len(dataset) == 0:
            raise EmptyDataset("no training samples")
        train_idx, val_idx = split_train_validation(len(dataset), cfg.validation_fraction)
        if self.task.is_regression and self.scaler is None:
            self.scaler = fit_training_scaler(dataset, cfg.validation_fraction)
        data = _TaskData(dataset, self.task, self.scaler)
        if not self.task.is_regression and cfg.class_weighting:
            self.weights = class_weights(data.target[train_idx], self.model_config.num_classes)

        metric_name = "mae" if self.task.is_regression else "accuracy"
        report = TrainReport(task=self.task, metric_name=metric_name)
        logger.info(
            f"Training {self.task.value}: {len(train_idx)} train / {len(val_idx)} validation samples, "
            f"{cfg.epochs} epochs, batch {cfg.batch_size}, {cfg.threads} thread(s)"
        )

        state = AdamState.for_params(self.model.params)
        best_params = self.model.params.copy()
        best_metric: Optional[float] = None
        last_finite: Optional[int] = None

        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            for epoch in range(1, cfg.epochs + 1):
                started = time.perf_counter()
                rng = philox_rng(cfg.seed, SHUFFLE_STREAM, epoch) if cfg.shuffle_each_epoch else None
                batches = iter_batches(train_idx, cfg.batch_size, rng)

                losses = []
                progress = tqdm(batches, desc=f"epoch {epoch}/{cfg.epochs}", leave=False,
                                disable=not cfg.show_progress)
                for step, batch in enumerate(progress):
                    loss, grads = self.batch_gradient(data, batch, epoch, step, pool)
                    adam_step(self.model.params, grads, state, cfg)
                    losses.append(loss)
                    logger.debug(f"epoch {epoch} step {step}: loss {loss:.6f}")

                train_loss = float(np.mean(losses))
                val_loss, val_metric = self.validate(data, val_idx)
                seconds = time.perf_counter() - started
                if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                    raise DivergedLoss(
                        f"loss became non-finite in epoch {epoch} (train {train_loss}, validation {val_loss})",
                        last_finite_epoch=last_finite,
                    )
                last_finite = epoch

                report.epochs.append(EpochRecord(
                    epoch=epoch, train_loss=train_loss, val_loss=val_loss, val_metric=val_metric, seconds=seconds,
                ))
                if self._improved(val_metric, best_metric):
                    best_metric = val_metric
                    best_params = self.model.params.copy()
                    report.best_epoch = epoch
                logger.info(
                    f"Epoch {epoch}: train_loss={train_loss:.4f} val_loss={val_loss:.4f} "
                    f"val_{metric_name}={val_metric:.4f} ({seconds:.1f}s)"
                )

        if report.best_epoch is not None:
            logger.info(f"✅ Best validation {metric_name} {best_metric:.4f} at epoch {report.best_epoch}")
        return best_params, report


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          scaler: Optional[FeatureScaler] = None,
          params: Optional[ModelParams] = None) -> Tuple[ModelParams, TrainReport]:
    return Trainer(model_config, train_config, scaler, params).fit(dataset)
