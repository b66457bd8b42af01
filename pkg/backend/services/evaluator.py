import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from sklearn.metrics import accuracy_score, mean_absolute_error, precision_recall_fscore_support

from models.schemas import EvalReport, PrefixGroupResult, Task
from services.event_log import PAD_ID, ActivityVocabulary
from services.features import Dataset, FeatureScaler
from utils.errors import EmptyInput, EmptyTestSet, ShapeMismatch

logger = logging.getLogger(__name__)

INFERENCE_CHUNK = 256


def _paired(predictions, targets, name: str) -> Tuple[np.ndarray, np.ndarray]:
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    if predictions.size == 0 or targets.size == 0:
        raise EmptyInput(f"{name} of zero samples is undefined")
    if predictions.shape != targets.shape:
        raise ShapeMismatch(f"{name}: {predictions.shape} predictions vs {targets.shape} targets")
    return predictions, targets


def accuracy(predictions: Sequence[int], targets: Sequence[int]) -> float:
    predictions, targets = _paired(predictions, targets, "accuracy")
    return float(accuracy_score(targets, predictions))


def per_class_f_scores(predictions: Sequence[int], targets: Sequence[int],
                       num_classes: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """F1 and support of every class; undefined precision or recall counts as 0."""
    predictions, targets = _paired(predictions, targets, "f_score")
    labels = np.arange(num_classes) if num_classes is not None else np.union1d(predictions, targets)
    _, _, f, support = precision_recall_fscore_support(
        targets, predictions, labels=labels, average=None, zero_division=0
    )
    return f, support


def weighted_f_score(predictions: Sequence[int], targets: Sequence[int],
                     num_classes: Optional[int] = None) -> float:
    """Per-class F1 averaged with the class supports of ``targets`` as weights."""
    predictions, targets = _paired(predictions, targets, "f_score")
    labels = np.arange(num_classes) if num_classes is not None else None
    _, _, f, _ = precision_recall_fscore_support(
        targets, predictions, labels=labels, average="weighted", zero_division=0
    )
    return float(f)


def mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    predictions, targets = _paired(predictions, targets, "mae")
    return float(mean_absolute_error(targets, predictions))


# inference

def predict_raw(model, ids: np.ndarray, fv: Optional[np.ndarray] = None, threads: int = 1,
                chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Model outputs for many samples, computed chunk by chunk in inference mode."""
    starts = list(range(0, len(ids), chunk))

    def run(start: int) -> np.ndarray:
        part_fv = None if fv is None else fv[start:start + chunk]
        return model.predict(ids[start:start + chunk], part_fv)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def predict_argmax(logits: np.ndarray) -> np.ndarray:
    """Predicted activity ids; PAD is never predicted."""
    logits = np.atleast_2d(logits)
    return logits[:, PAD_ID + 1:].argmax(axis=1) + PAD_ID + 1


def next_activity_probabilities(logits: np.ndarray) -> np.ndarray:
    """Softmax over every class except PAD, which gets probability 0."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    probs = np.zeros_like(logits)
    probs[:, PAD_ID + 1:] = softmax(logits[:, PAD_ID + 1:], axis=1)
    return probs


def top_k_activities(probs: np.ndarray, vocab: ActivityVocabulary, k: int = 5) -> List[Dict]:
    """The k most likely activities of one sample, ties broken by id."""
    order = np.argsort(-probs, kind="stable")
    ranked = [i for i in order if i != PAD_ID][:k]
    return [{"activity": vocab.decode(int(i)), "id": int(i), "probability": float(probs[i])} for i in ranked]


# per-prefix evaluation

def _group_metrics(task: Task, predictions: np.ndarray, targets: np.ndarray, num_classes: int) -> Dict[str, float]:
    if task.is_regression:
        return {"mae": mae(predictions, targets)}
    return {
        "accuracy": accuracy(predictions, targets),
        "f_score": weighted_f_score(predictions, targets, num_classes),
    }


def evaluate_per_prefix(model, dataset: Dataset, scaler: Optional[FeatureScaler] = None,
                        threads: int = 1) -> EvalReport:
    """Metrics for every prefix length k, their unweighted mean, and the pooled value.

    Time predictions are unscaled back to days before scoring.
    """
    if len(dataset) == 0:
        raise EmptyTestSet("no test samples to evaluate")
    task: Task = model.config.task
    arrays = dataset.arrays

    if task.is_regression:
        if scaler is None:
            raise ValueError(f"evaluating {task.value} needs the feature scaler")
        raw = predict_raw(model, arrays.ids, scaler.scale_fv(arrays.fv), threads)
        predictions = scaler.unscale_target(task, raw)
        targets = arrays.regression_target(task)
    else:
        predictions = predict_argmax(predict_raw(model, arrays.ids, None, threads))
        targets = arrays.target_activity

    num_classes = model.config.num_classes
    per_k: Dict[int, PrefixGroupResult] = {}
    for k in np.unique(arrays.prefix_len):
        in_group = arrays.prefix_len == k
        per_k[int(k)] = PrefixGroupResult(
            count=int(in_group.sum()),
            metrics=_group_metrics(task, predictions[in_group], targets[in_group], num_classes),
        )

    names = list(next(iter(per_k.values())).metrics)
    averaged = {n: float(np.mean([g.metrics[n] for g in per_k.values()])) for n in names}
    overall = _group_metrics(task, predictions, targets, num_classes)
    headline = "mae" if task.is_regression else "accuracy"
    logger.info(
        f"✅ Evaluated {len(dataset)} samples over {len(per_k)} prefix lengths: "
        + ", ".join(f"{n} averaged {averaged[n]:.4f} / pooled {overall[n]:.4f}" for n in names)
    )
    return EvalReport(task=task, headline=headline, per_k=per_k, averaged=averaged, overall=overall)
