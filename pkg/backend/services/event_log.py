import io
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from models.schemas import ColumnMapping, DatasetSummary
from utils.errors import BadTimestamp, DegenerateSplit, EmptyLog, EventLogError, MissingColumn

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400.0
PAD_ID = 0
PAD_LABEL = "<PAD>"
UNK_LABEL = "<UNK>"

CsvSource = Union[str, Path, BinaryIO]


@dataclass(frozen=True)
class Event:
    activity: str
    case_id: str
    timestamp: int  # seconds since the Unix epoch, UTC
    extra_attributes: Tuple[Tuple[str, str], ...] = ()


@dataclass(frozen=True)
class Trace:
    case_id: str
    events: Tuple[Event, ...]

    def __post_init__(self):
        if not self.events:
            raise EventLogError(f"trace {self.case_id!r} has no events")
        previous = None
        for event in self.events:
            if event.case_id != self.case_id:
                raise EventLogError(f"event of case {event.case_id!r} inside trace {self.case_id!r}")
            if previous is not None and event.timestamp < previous:
                raise EventLogError(f"trace {self.case_id!r} is not ordered by time")
            previous = event.timestamp

    def __len__(self) -> int:
        return len(self.events)

    @property
    def activities(self) -> List[str]:
        return [e.activity for e in self.events]

    @property
    def timestamps(self) -> List[int]:
        return [e.timestamp for e in self.events]

    @property
    def start(self) -> int:
        return self.events[0].timestamp

    @property
    def end(self) -> int:
        return self.events[-1].timestamp

    @property
    def duration_days(self) -> float:
        return (self.end - self.start) / SECONDS_PER_DAY

    def prefix(self, k: int) -> "Trace":
        """hd^k: the first k events."""
        return Trace(self.case_id, self.events[:k])


@dataclass(frozen=True)
class EventLog:
    traces: Tuple[Trace, ...]
    source_name: str = "<memory>"

    def __post_init__(self):
        seen = set()
        for trace in self.traces:
            if trace.case_id in seen:
                raise EventLogError(f"case id {trace.case_id!r} appears in more than one trace")
            seen.add(trace.case_id)

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self):
        return iter(self.traces)

    @property
    def num_events(self) -> int:
        return sum(len(t) for t in self.traces)

    @property
    def activities(self) -> set:
        return {e.activity for t in self.traces for e in t.events}

    @property
    def max_trace_length(self) -> int:
        return max((len(t) for t in self.traces), default=0)


class ActivityVocabulary:
    """Maps activity labels to ids 1..V; 0 is PAD and V+1 is UNK."""

    def __init__(self, labels: Iterable[str]):
        self.labels: Tuple[str, ...] = tuple(sorted(set(labels)))
        self._ids: Dict[str, int] = {label: i + 1 for i, label in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, ActivityVocabulary) and self.labels == other.labels

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    @property
    def unk_id(self) -> int:
        return len(self.labels) + 1

    @property
    def num_classes(self) -> int:
        return len(self.labels) + 2

    def encode(self, label: str) -> int:
        return self._ids.get(label, self.unk_id)

    def encode_many(self, labels: Sequence[str]) -> List[int]:
        return [self.encode(label) for label in labels]

    def decode(self, activity_id: int) -> str:
        if activity_id == PAD_ID:
            return PAD_LABEL
        if activity_id == self.unk_id:
            return UNK_LABEL
        if 1 <= activity_id <= len(self.labels):
            return self.labels[activity_id - 1]
        raise KeyError(f"activity id {activity_id} outside vocabulary of {len(self.labels)}")

    def as_mapping(self) -> Dict[str, int]:
        return {PAD_LABEL: PAD_ID, **self._ids, UNK_LABEL: self.unk_id}


def _line_of(row_index: int) -> int:
    # header is line 1
    return row_index + 2


def _read_bytes(source: CsvSource) -> bytes:
    if isinstance(source, (str, Path)):
        return Path(source).read_bytes()
    return source.read()


def _decode_error_line(raw: bytes) -> Optional[int]:
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as e:
        return raw.count(b"\n", 0, e.start) + 1
    return None


def _parser_error_line(error: pd.errors.ParserError) -> Optional[int]:
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def _parse_timestamps(values: pd.Series, mapping: ColumnMapping, source_name: str) -> np.ndarray:
    fmt = mapping.timestamp_format
    try:
        parsed = pd.to_datetime(values, format=fmt, utc=True, errors="coerce")
    except (ValueError, TypeError) as e:
        raise BadTimestamp(f"timestamp format {fmt!r} rejected: {e}", source=source_name, line=_line_of(0))

    bad = np.flatnonzero(parsed.isna().to_numpy())
    if len(bad):
        row = int(bad[0])
        raise BadTimestamp(
            f"cannot parse timestamp {values.iloc[row]!r} with format {fmt!r}",
            source=source_name,
            line=_line_of(row),
        )
    epoch = pd.Timestamp(0, tz="UTC")
    return ((parsed - epoch) // pd.Timedelta(seconds=1)).to_numpy(dtype=np.int64)


def parse_csv(source: CsvSource, mapping: Optional[ColumnMapping] = None,
              source_name: Optional[str] = None) -> EventLog:
    """Read a UTF-8 CSV event log into time-ordered traces.

    Traces keep the order in which their case first appears in the file;
    events inside a trace are sorted by timestamp with file order breaking ties.
    """
    mapping = mapping or ColumnMapping()
    if source_name is None:
        source_name = str(source) if isinstance(source, (str, Path)) else getattr(source, "name", "<stream>")

    raw = _read_bytes(source)
    try:
        frame = pd.read_csv(io.BytesIO(raw), dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise EmptyLog("EmptyLog: the file contains no header and no rows", source=source_name)
    except UnicodeDecodeError as e:
        raise EventLogError(f"not valid UTF-8: {e.reason}", source=source_name, line=_decode_error_line(raw))
    except pd.errors.ParserError as e:
        raise EventLogError(f"malformed CSV row: {e}", source=source_name, line=_parser_error_line(e))

    required = [mapping.case_column, mapping.activity_column, mapping.timestamp_column]
    for column in required:
        if column not in frame.columns:
            raise MissingColumn(
                f"column {column!r} not found (header has {list(frame.columns)})",
                source=source_name,
                line=1,
            )
    if frame.empty:
        raise EmptyLog("EmptyLog: the file has a header but no rows", source=source_name)

    empty_activity = np.flatnonzero((frame[mapping.activity_column].str.len() == 0).to_numpy())
    if len(empty_activity):
        raise EventLogError("empty activity label", source=source_name, line=_line_of(int(empty_activity[0])))

    seconds = _parse_timestamps(frame[mapping.timestamp_column], mapping, source_name)
    extra_columns = [c for c in frame.columns if c not in required]

    case_rank, _ = pd.factorize(frame[mapping.case_column], sort=False)
    order = np.lexsort((np.arange(len(frame)), seconds, case_rank))

    cases = frame[mapping.case_column].to_numpy()
    activities = frame[mapping.activity_column].to_numpy()
    extras = frame[extra_columns].to_numpy() if extra_columns else None

    traces: List[Trace] = []
    current: List[Event] = []
    for row in order:
        case_id = cases[row]
        if current and current[0].case_id != case_id:
            traces.append(Trace(current[0].case_id, tuple(current)))
            current = []
        attributes = tuple(zip(extra_columns, extras[row])) if extras is not None else ()
        current.append(Event(activities[row], case_id, int(seconds[row]), attributes))
    traces.append(Trace(current[0].case_id, tuple(current)))

    log = EventLog(tuple(traces), source_name)
    logger.info(f"Parsed {source_name}: {len(frame)} events in {len(log)} traces")
    return log


def write_csv(log: EventLog, sink: Union[str, Path, BinaryIO], mapping: Optional[ColumnMapping] = None):
    """Inverse of parse_csv (timestamps written at second resolution)."""
    mapping = mapping or ColumnMapping()
    rows = []
    for trace in log.traces:
        for event in trace.events:
            row = {
                mapping.case_column: event.case_id,
                mapping.activity_column: event.activity,
                mapping.timestamp_column: event.timestamp,
            }
            row.update(dict(event.extra_attributes))
            rows.append(row)
    frame = pd.DataFrame(rows)
    stamps = pd.to_datetime(frame[mapping.timestamp_column], unit="s", utc=True)
    fmt = "%Y-%m-%dT%H:%M:%SZ" if mapping.timestamp_format == "ISO8601" else mapping.timestamp_format
    frame[mapping.timestamp_column] = stamps.dt.strftime(fmt)
    frame.to_csv(sink, index=False, encoding="utf-8", lineterminator="\n")


def chronological_split(log: EventLog, train_fraction: float) -> Tuple[EventLog, EventLog]:
    """Order traces by start time and cut after ceil(fraction * |L|) traces."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(log) == 0:
        raise EmptyLog("EmptyLog: cannot split an empty log", source=log.source_name)

    ordered = sorted(log.traces, key=lambda t: (t.start, t.case_id))
    # tolerance keeps float noise in fraction * n from bumping an exact product up
    n_train = math.ceil(train_fraction * len(ordered) - 1e-9)
    if n_train <= 0 or n_train >= len(ordered):
        raise DegenerateSplit(
            f"split of {len(ordered)} traces at {train_fraction} leaves one side empty",
            source=log.source_name,
        )
    train = EventLog(tuple(ordered[:n_train]), f"{log.source_name}[train]")
    test = EventLog(tuple(ordered[n_train:]), f"{log.source_name}[test]")
    logger.info(f"Chronological split: {len(train)} train / {len(test)} test traces")
    return train, test


def build_vocabulary(train: EventLog) -> ActivityVocabulary:
    if len(train) == 0:
        raise EmptyLog("EmptyLog: cannot build a vocabulary from an empty log", source=train.source_name)
    vocab = ActivityVocabulary(train.activities)
    logger.debug(f"Vocabulary of {len(vocab)} activities: {vocab.labels}")
    return vocab


def log_statistics(log: EventLog) -> DatasetSummary:
    lengths = np.array([len(t) for t in log.traces], dtype=np.float64)
    durations = np.array([t.duration_days for t in log.traces], dtype=np.float64)
    return DatasetSummary(
        source_name=log.source_name,
        cases=len(log),
        events=log.num_events,
        activities=len(log.activities),
        max_case_length=int(lengths.max()) if len(lengths) else 0,
        avg_case_length=float(lengths.mean()) if len(lengths) else 0.0,
        max_duration_days=float(durations.max()) if len(durations) else 0.0,
        avg_duration_days=float(durations.mean()) if len(durations) else 0.0,
    )


def timestamps_to_seconds(values: Sequence[str], mapping: Optional[ColumnMapping] = None,
                          source_name: str = "<input>") -> List[int]:
    """Parse loose timestamp strings the way ``parse_csv`` parses a column."""
    seconds = _parse_timestamps(pd.Series(list(values), dtype=str), mapping or ColumnMapping(), source_name)
    return [int(s) for s in seconds]
