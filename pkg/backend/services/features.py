import logging
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from models.schemas import Task
from services.event_log import PAD_ID, SECONDS_PER_DAY, ActivityVocabulary, EventLog, Trace
from utils.errors import EmptyDataset, TraceTooLong, TraceTooShort

logger = logging.getLogger(__name__)

Days = float


@dataclass(frozen=True)
class PrefixSample:
    encoded_prefix: Tuple[int, ...]
    prefix_len: int
    fv: Tuple[Days, Days, Days]
    target_activity: int
    target_next_delta: Days
    target_remaining: Days
    case_id: str


class SampleArrays(NamedTuple):
    ids: np.ndarray          # [N, max_len] int64
    prefix_len: np.ndarray   # [N]
    fv: np.ndarray           # [N, 3]
    target_activity: np.ndarray
    target_next_delta: np.ndarray
    target_remaining: np.ndarray

    def regression_target(self, task: Task) -> np.ndarray:
        if task is Task.NEXT_TIME:
            return self.target_next_delta
        if task is Task.REMAINING_TIME:
            return self.target_remaining
        raise ValueError(f"{task.value} has no regression target")


@dataclass
class Dataset:
    samples: List[PrefixSample]
    vocab_size: int  # V; encoded ids range over 0..V+1
    max_len: int

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def arrays(self) -> SampleArrays:
        n = len(self.samples)
        ids = np.zeros((n, self.max_len), dtype=np.int64)
        for i, s in enumerate(self.samples):
            ids[i] = s.encoded_prefix
        return SampleArrays(
            ids=ids,
            prefix_len=np.array([s.prefix_len for s in self.samples], dtype=np.int64),
            fv=np.array([s.fv for s in self.samples], dtype=np.float64).reshape(n, 3),
            target_activity=np.array([s.target_activity for s in self.samples], dtype=np.int64),
            target_next_delta=np.array([s.target_next_delta for s in self.samples], dtype=np.float64),
            target_remaining=np.array([s.target_remaining for s in self.samples], dtype=np.float64),
        )

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.vocab_size, self.max_len)


def _fv_from_timestamps(timestamps: Sequence[int]) -> Tuple[Days, Days, Days]:
    n = len(timestamps)
    last = timestamps[-1]
    fv_t1 = 0.0 if n == 1 else (last - timestamps[-2]) / SECONDS_PER_DAY
    fv_t2 = 0.0 if n <= 2 else (last - timestamps[-3]) / SECONDS_PER_DAY
    fv_t3 = 0.0 if n == 1 else (last - timestamps[0]) / SECONDS_PER_DAY
    return fv_t1, fv_t2, fv_t3


def temporal_features(prefix: Trace) -> Tuple[Days, Days, Days]:
    """Gap to the previous event, gap spanning the last two events, and time since case start."""
    return _fv_from_timestamps(prefix.timestamps)


def generate_prefix_samples(trace: Trace, vocab: ActivityVocabulary, max_len: int) -> List[PrefixSample]:
    n = len(trace)
    if n < 2:
        raise TraceTooShort(f"trace {trace.case_id!r} has a single event and no next event to predict")
    if n > max_len:
        raise TraceTooLong(f"trace {trace.case_id!r} has {n} events, more than max_len={max_len}")

    ids = vocab.encode_many(trace.activities)
    stamps = trace.timestamps
    end = stamps[-1]
    samples = []
    for k in range(1, n):
        encoded = tuple(ids[:k]) + (PAD_ID,) * (max_len - k)
        samples.append(PrefixSample(
            encoded_prefix=encoded,
            prefix_len=k,
            fv=_fv_from_timestamps(stamps[:k]),
            target_activity=ids[k],
            target_next_delta=(stamps[k] - stamps[k - 1]) / SECONDS_PER_DAY,
            target_remaining=(end - stamps[k - 1]) / SECONDS_PER_DAY,
            case_id=trace.case_id,
        ))
    return samples


class BuildStats(NamedTuple):
    skipped_short: int
    skipped_long: int


def build_dataset(log: EventLog, vocab: ActivityVocabulary, max_len: int,
                  skip_long: bool = False) -> Tuple[Dataset, BuildStats]:
    """All k-prefix samples of a log, in trace order.

    Single-event traces are counted and skipped. Traces longer than max_len
    raise unless skip_long is set, in which case they are counted too.
    """
    samples: List[PrefixSample] = []
    short = long = 0
    for trace in log.traces:
        try:
            samples.extend(generate_prefix_samples(trace, vocab, max_len))
        except TraceTooShort:
            short += 1
        except TraceTooLong:
            if not skip_long:
                raise
            long += 1
    if short:
        logger.info(f"Skipped {short} single-event traces of {log.source_name}")
    if long:
        logger.warning(f"⚠️ Skipped {long} traces of {log.source_name} longer than max_len={max_len}")
    return Dataset(samples, len(vocab), max_len), BuildStats(short, long)


class FeatureScaler:
    """Standardises (fv_t1, fv_t2, fv_t3, next_delta, remaining).

    Population statistics; constant columns keep a unit scale.
    """

    COLUMNS = ("fv_t1", "fv_t2", "fv_t3", "next_delta", "remaining")
    _TARGET_COLUMN = {Task.NEXT_TIME: 3, Task.REMAINING_TIME: 4}

    def __init__(self, scaler: StandardScaler):
        self._scaler = scaler

    @property
    def mean(self) -> np.ndarray:
        return self._scaler.mean_

    @property
    def std(self) -> np.ndarray:
        return self._scaler.scale_

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return self._scaler.transform(np.asarray(rows, dtype=np.float64).reshape(-1, len(self.COLUMNS)))

    def inverse_transform(self, rows: np.ndarray) -> np.ndarray:
        return self._scaler.inverse_transform(np.asarray(rows, dtype=np.float64).reshape(-1, len(self.COLUMNS)))

    def scale_fv(self, fv: np.ndarray) -> np.ndarray:
        return (np.asarray(fv, dtype=np.float64) - self.mean[:3]) / self.std[:3]

    def scale_target(self, task: Task, values: np.ndarray) -> np.ndarray:
        col = self._TARGET_COLUMN[task]
        return (np.asarray(values, dtype=np.float64) - self.mean[col]) / self.std[col]

    def unscale_target(self, task: Task, values: np.ndarray) -> np.ndarray:
        col = self._TARGET_COLUMN[task]
        return np.asarray(values, dtype=np.float64) * self.std[col] + self.mean[col]

    def to_dict(self) -> Dict[str, List[float]]:
        return {"columns": list(self.COLUMNS), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, payload: Dict) -> "FeatureScaler":
        mean = np.asarray(payload["mean"], dtype=np.float64)
        std = np.asarray(payload["std"], dtype=np.float64)
        scaler = StandardScaler()
        scaler.mean_ = mean
        scaler.scale_ = std
        scaler.var_ = std ** 2
        scaler.n_features_in_ = len(mean)
        scaler.n_samples_seen_ = 0
        return cls(scaler)


def _sample_rows(samples: Sequence[PrefixSample]) -> np.ndarray:
    return np.array(
        [[*s.fv, s.target_next_delta, s.target_remaining] for s in samples],
        dtype=np.float64,
    ).reshape(-1, len(FeatureScaler.COLUMNS))


def fit_scaler(train_samples: Sequence[PrefixSample]) -> FeatureScaler:
    if not train_samples:
        raise EmptyDataset("cannot fit a scaler on zero samples")
    scaler = StandardScaler().fit(_sample_rows(train_samples))
    logger.debug(f"Scaler mean={scaler.mean_.tolist()} std={scaler.scale_.tolist()}")
    return FeatureScaler(scaler)


def apply_scaler(scaler: FeatureScaler, sample: PrefixSample) -> PrefixSample:
    """Scaled view of a sample: fv and both regression targets standardised."""
    row = scaler.transform(_sample_rows([sample]))[0]
    return replace(sample, fv=tuple(row[:3]), target_next_delta=row[3], target_remaining=row[4])


def unscale_sample(scaler: FeatureScaler, sample: PrefixSample) -> PrefixSample:
    row = scaler.inverse_transform(_sample_rows([sample]))[0]
    return replace(sample, fv=tuple(row[:3]), target_next_delta=row[3], target_remaining=row[4])


SAMPLE_COLUMNS = ["case_id", "k", "prefix", "fv_t1", "fv_t2", "fv_t3",
                  "target_activity", "target_next_delta", "target_remaining"]


def dump_samples_csv(samples: Sequence[PrefixSample], path: Union[str, Path]):
    """One row per sample; the encoded prefix is written with its padding."""
    frame = pd.DataFrame(
        [
            [s.case_id, s.prefix_len, " ".join(map(str, s.encoded_prefix)), *s.fv,
             s.target_activity, s.target_next_delta, s.target_remaining]
            for s in samples
        ],
        columns=SAMPLE_COLUMNS,
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def load_samples_csv(path: Union[str, Path], vocab_size: int, max_len: Optional[int] = None) -> Dataset:
    frame = pd.read_csv(path, dtype={"case_id": str, "prefix": str}, keep_default_na=False,
                        float_precision="round_trip")
    samples = []
    for row in frame.itertuples(index=False):
        encoded = tuple(int(i) for i in row.prefix.split())
        samples.append(PrefixSample(
            encoded_prefix=encoded,
            prefix_len=int(row.k),
            fv=(float(row.fv_t1), float(row.fv_t2), float(row.fv_t3)),
            target_activity=int(row.target_activity),
            target_next_delta=float(row.target_next_delta),
            target_remaining=float(row.target_remaining),
            case_id=row.case_id,
        ))
    if max_len is None:
        max_len = len(samples[0].encoded_prefix) if samples else 0
    return Dataset(samples, vocab_size, max_len)
