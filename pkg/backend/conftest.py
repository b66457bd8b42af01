import sys
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from models.schemas import ModelConfig  # noqa: E402
from services.event_log import Event, EventLog, Trace  # noqa: E402

HEADER = ("case:concept:name", "concept:name", "time:timestamp")
BASE = pd.Timestamp("2024-01-01T00:00:00Z")

Row = Tuple[str, str, str]


def make_trace(case_id: str, steps: Sequence[Tuple[str, float]]) -> Trace:
    """A trace from (activity, offset in days) pairs."""
    return Trace(case_id, tuple(Event(a, case_id, int(round(d * 86400))) for a, d in steps))


def make_log(traces: Iterable[Trace], name: str = "fixture") -> EventLog:
    return EventLog(tuple(traces), name)


def iso(days: float) -> str:
    return (BASE + pd.Timedelta(days=days)).strftime("%Y-%m-%dT%H:%M:%SZ")


def process_rows(variants: Sequence[Sequence[str]], n_cases: int, pick=lambda i: 0,
                 gap_days: float = 1.0, start_every_days: float = 0.5) -> List[Row]:
    """Rows of a synthetic log; case i follows variants[pick(i)] with evenly spaced events."""
    rows = []
    for i in range(n_cases):
        case = f"case{i:04d}"
        start = i * start_every_days
        for j, activity in enumerate(variants[pick(i)]):
            rows.append((case, activity, iso(start + j * gap_days)))
    return rows


def write_rows(path: Path, rows: Sequence[Row], header: Sequence[str] = HEADER) -> Path:
    pd.DataFrame(list(rows), columns=list(header)).to_csv(path, index=False, lineterminator="\n")
    return path


@pytest.fixture
def toy_rows() -> List[Row]:
    # three cases: lengths 3, 2 and 4, the second one out of order in the file
    return [
        ("c1", "A", iso(0)), ("c1", "B", iso(2)), ("c1", "C", iso(5)),
        ("c2", "B", iso(1.5)), ("c2", "A", iso(1)),
        ("c3", "A", iso(3)), ("c3", "B", iso(3.5)), ("c3", "C", iso(4)), ("c3", "D", iso(6)),
    ]


@pytest.fixture
def toy_csv(tmp_path, toy_rows) -> Path:
    return write_rows(tmp_path / "toy.csv", toy_rows)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(vocab_size=5, max_len=6, embed_dim=8, num_heads=2, ff_hidden=12,
                       dense_units=(6, 7), dropout_rate=0.0, seed=7)
