#!/usr/bin/env python3
"""
LOBSTER Ingestion

Streaming parse of LOBSTER message/orderbook CSV pairs, classification of
rows into the four market event types, tie handling, tick renormalisation,
and the canonical event and normalised-volume CSV files.
"""

import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .error_handler import DomainError, Flag, FlagRecorder, InputError
from .hawkes_engine import EventHistory
from .lob_model import BookSnapshot, StateVariable, discretise_imbalance, queue_imbalance

logger = logging.getLogger(__name__)

NANOS_PER_SECOND = 1_000_000_000
TIE_SPACING_SECONDS = 1e-9 * 0.01
MESSAGE_COLUMNS = ['time', 'label', 'order_id', 'size', 'price', 'direction']
EVENT_COLUMNS = ['time_ns', 'tie_rank', 'event_type', 'x1', 'x2', 'imbalance', 'mid']

# (label, direction) -> event type; direction -1 is the ask side, +1 the bid side
LABEL_EVENT_MAP = {
    (1, -1): 3, (1, 1): 4,
    (2, -1): 4, (2, 1): 3,
    (3, -1): 4, (3, 1): 3,
    (4, -1): 2, (4, 1): 1,
    (5, -1): 2, (5, 1): 1,
}
EXECUTION_TYPES = (1, 2)
PRICE_MOVE_TYPES = (3, 4)
DROPPED_LABELS = {6: 'cross_trade', 7: 'trading_halt'}

_SECONDS_PATTERN = re.compile(r'^\s*(\d+)(?:\.(\d{1,9}))?\s*$')


@dataclass(frozen=True)
class RawMessage:
    """One message-file row. Prices in 1e-4 currency units, time in integer nanoseconds."""
    time_ns: int
    label: int
    order_id: int
    size: float
    price: int
    direction: int

    def __post_init__(self):
        if self.label not in range(1, 8):
            raise InputError(f"unknown LOBSTER label {self.label}")
        if self.label <= 5 and self.price <= 0:
            raise InputError(f"label {self.label} requires a positive price, got {self.price}")
        if self.direction not in (-1, 1):
            raise InputError(f"direction must be -1 or +1, got {self.direction}")
        if self.size < 0:
            raise InputError(f"size must be non-negative, got {self.size}")

    @property
    def time(self) -> float:
        return self.time_ns / NANOS_PER_SECOND


@dataclass(frozen=True)
class MalformedRow:
    line_number: int
    source: str
    reason: str


@dataclass(frozen=True)
class JoinedRecord:
    """A message with the order book row written right after it."""
    line_number: int
    message: RawMessage
    ask_prices: Tuple[int, ...]
    ask_sizes: Tuple[float, ...]
    bid_prices: Tuple[int, ...]
    bid_sizes: Tuple[float, ...]

    @property
    def mid(self) -> float:
        return (self.ask_prices[0] + self.bid_prices[0]) / 2.0

    def snapshot(self, tick_size: int = 100) -> BookSnapshot:
        return BookSnapshot(self.ask_prices[0], self.bid_prices[0], self.ask_sizes, self.bid_sizes, tick_size)


@dataclass
class ParsedPair:
    records: List[JoinedRecord]
    malformed: List[MalformedRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def seconds_to_ns(value: str) -> Optional[int]:
    """Decimal seconds-after-midnight to integer nanoseconds, without float rounding."""
    match = _SECONDS_PATTERN.match(value)
    if not match:
        return None
    whole, frac = match.group(1), (match.group(2) or '')
    return int(whole) * NANOS_PER_SECOND + int(frac.ljust(9, '0'))


def _read_chunks(path: Path, chunk_size: int) -> Iterator[pd.DataFrame]:
    try:
        reader = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, chunksize=chunk_size)
        for chunk in reader:
            yield chunk
    except pd.errors.EmptyDataError:
        return


def _count_rows(chunks: Iterator[pd.DataFrame]) -> int:
    return sum(len(c) for c in chunks)


def _numeric(frame: pd.DataFrame) -> pd.DataFrame:
    return frame.apply(pd.to_numeric, errors='coerce')


def iter_joined(message_path: Union[str, Path],
                orderbook_path: Union[str, Path],
                depth: int,
                strict: bool = False,
                malformed: Optional[List[MalformedRow]] = None,
                chunk_size: int = 100_000) -> Iterator[JoinedRecord]:
    """Stream row-aligned message/orderbook pairs.

    Unparseable rows are skipped and appended to `malformed` (strict mode
    raises instead); unequal row counts raise InputError naming both counts.
    """
    message_path, orderbook_path = Path(message_path), Path(orderbook_path)
    for path in (message_path, orderbook_path):
        if not path.is_file():
            raise InputError(f"file not found: {path}", path=str(path))
    if depth < 1:
        raise InputError(f"depth must be >= 1, got {depth}")

    messages = _read_chunks(message_path, chunk_size)
    books = _read_chunks(orderbook_path, chunk_size)
    offset = 0
    while True:
        msg_chunk = next(messages, None)
        book_chunk = next(books, None)
        if msg_chunk is None and book_chunk is None:
            return
        msg_rows = offset + (len(msg_chunk) if msg_chunk is not None else 0)
        book_rows = offset + (len(book_chunk) if book_chunk is not None else 0)
        if msg_chunk is None or book_chunk is None or len(msg_chunk) != len(book_chunk):
            msg_rows += _count_rows(messages)
            book_rows += _count_rows(books)
            raise InputError(
                f"row-count mismatch: {message_path} has {msg_rows} rows, {orderbook_path} has {book_rows}",
                message_rows=msg_rows, orderbook_rows=book_rows
            )
        if msg_chunk.shape[1] < len(MESSAGE_COLUMNS):
            raise InputError(f"{message_path} has {msg_chunk.shape[1]} columns, expected {len(MESSAGE_COLUMNS)}")
        if book_chunk.shape[1] < 4 * depth:
            raise InputError(f"{orderbook_path} has {book_chunk.shape[1]} columns, depth {depth} needs {4 * depth}")

        yield from _join_chunk(msg_chunk, book_chunk, depth, offset, strict, malformed)
        offset += len(msg_chunk)


def _join_chunk(msg_chunk: pd.DataFrame, book_chunk: pd.DataFrame, depth: int, offset: int,
                strict: bool, malformed: Optional[List[MalformedRow]]) -> Iterator[JoinedRecord]:
    times = msg_chunk.iloc[:, 0].map(seconds_to_ns)
    fields = _numeric(msg_chunk.iloc[:, 1:6])
    book = _numeric(book_chunk.iloc[:, :4 * depth]).to_numpy(dtype=float)

    for row in range(len(msg_chunk)):
        line = offset + row + 1
        values = fields.iloc[row].to_numpy(dtype=float)
        levels = book[row]
        reason = None
        if times.iloc[row] is None:
            reason = f"unparseable time {msg_chunk.iloc[row, 0]!r}"
        elif np.any(np.isnan(values)):
            reason = "non-numeric message field"
        elif np.any(np.isnan(levels)):
            reason = "non-numeric order book field"
        if reason is None:
            try:
                message = RawMessage(int(times.iloc[row]), int(values[0]), int(values[1]),
                                     float(values[2]), int(values[3]), int(values[4]))
            except InputError as e:
                reason = e.message
        if reason is not None:
            if strict:
                raise InputError(f"line {line}: {reason}", line_number=line)
            if malformed is not None:
                malformed.append(MalformedRow(line, 'message/orderbook', reason))
            continue

        yield JoinedRecord(
            line_number=line,
            message=message,
            ask_prices=tuple(int(p) for p in levels[0::4]),
            ask_sizes=tuple(float(v) for v in levels[1::4]),
            bid_prices=tuple(int(p) for p in levels[2::4]),
            bid_sizes=tuple(float(v) for v in levels[3::4])
        )


def parse_pair(message_path: Union[str, Path],
               orderbook_path: Union[str, Path],
               depth: int,
               strict: bool = False,
               recorder: Optional[FlagRecorder] = None) -> ParsedPair:
    """Parse a LOBSTER pair into joined records, reporting malformed lines."""
    malformed: List[MalformedRow] = []
    records = list(iter_joined(message_path, orderbook_path, depth, strict, malformed))
    if malformed and recorder is not None:
        recorder.flag('ingest', 'malformed_rows', f"{len(malformed)} malformed rows skipped",
                      lines=[m.line_number for m in malformed[:20]])
    logger.info(f"📄 Parsed {len(records)} rows from {message_path} ({len(malformed)} malformed)")
    return ParsedPair(records, malformed)


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifiedEvent:
    """A market event with the state and book right after it."""
    time_ns: int
    event_type: int
    state: StateVariable
    book: BookSnapshot
    mid: float
    mid_before: float
    imbalance: float
    line_number: int = 0
    tie_rank: int = 0

    @property
    def time(self) -> float:
        return self.time_ns / NANOS_PER_SECOND + self.tie_rank * TIE_SPACING_SECONDS


@dataclass
class ClassificationResult:
    events: List[ClassifiedEvent]
    dropped: Dict[str, int]
    flags: List[Flag] = field(default_factory=list)


def _sign(value: float) -> int:
    return int(np.sign(value))


def classify(records: Sequence[JoinedRecord],
             tick_size: int = 100,
             depth: int = 2,
             K: int = 3,
             mid_change_filter: bool = True,
             recorder: Optional[FlagRecorder] = None) -> ClassificationResult:
    """Map LOBSTER rows to event types 1-4 and attach the state variable.

    Label 4/5 rows are market orders; label 1/2/3 rows are price-move events,
    kept only when the mid-price changed at that row unless the filter is off.
    Cross trades and halts are dropped.
    """
    if records and len(records[0].ask_sizes) < depth:
        raise InputError(f"imbalance depth {depth} exceeds the {len(records[0].ask_sizes)} parsed levels")
    local = FlagRecorder()
    dropped: Dict[str, int] = {}
    events: List[ClassifiedEvent] = []
    prev_mid: Optional[float] = None

    def drop(reason: str) -> None:
        dropped[reason] = dropped.get(reason, 0) + 1

    for record in records:
        message = record.message
        try:
            book = record.snapshot(tick_size)
            book.validate()
            imbalance = queue_imbalance(book, depth)
        except DomainError:
            drop('invalid_book')
            continue

        mid = record.mid
        change = 0.0 if prev_mid is None else mid - prev_mid
        before = mid if prev_mid is None else prev_mid
        prev_mid = mid

        if message.label in DROPPED_LABELS:
            drop(DROPPED_LABELS[message.label])
            continue
        event_type = LABEL_EVENT_MAP[(message.label, message.direction)]
        if mid_change_filter and event_type in PRICE_MOVE_TYPES and change == 0:
            drop('unchanged_mid')
            continue

        state = StateVariable(_sign(change), discretise_imbalance(imbalance, K), K)
        events.append(ClassifiedEvent(
            time_ns=message.time_ns,
            event_type=event_type,
            state=state,
            book=book,
            mid=mid,
            mid_before=before,
            imbalance=imbalance,
            line_number=record.line_number
        ))

    for reason, count in dropped.items():
        if reason != 'unchanged_mid':
            local.flag('ingest', f'dropped_{reason}', f"{count} rows dropped ({reason})", count=count)
    logger.info(f"🔎 Classified {len(events)} events; dropped {sum(dropped.values())} rows {dropped}")
    if recorder is not None:
        recorder.extend(local.flag_history)
    return ClassificationResult(events, dropped, list(local.flag_history))


def _with_move(event: ClassifiedEvent, reference_mid: float, **changes: Any) -> ClassifiedEvent:
    state = StateVariable(_sign(event.mid - reference_mid), event.state.x2, event.state.K)
    return replace(event, state=state, mid_before=reference_mid, **changes)


def _collapse_run(run: List[ClassifiedEvent]) -> List[ClassifiedEvent]:
    """Merge a same-nanosecond run into its executions, or one net price move."""
    reference = run[0].mid_before
    if not any(e.event_type in EXECUTION_TYPES for e in run):
        net = run[-1].mid - reference
        if net == 0:
            return []
        return [_with_move(run[-1], reference, event_type=3 if net < 0 else 4)]

    # one event per execution type, carrying the book up to the next execution type
    starts: List[int] = []
    seen = set()
    for pos, event in enumerate(run):
        if event.event_type in EXECUTION_TYPES and event.event_type not in seen:
            seen.add(event.event_type)
            starts.append(pos)
    merged = []
    for k, start in enumerate(starts):
        stop = starts[k + 1] if k + 1 < len(starts) else len(run)
        last = run[stop - 1]
        merged.append(_with_move(last, reference, event_type=run[start].event_type))
        reference = last.mid
    return merged


def dedup_and_order(events: Sequence[ClassifiedEvent],
                    recorder: Optional[FlagRecorder] = None) -> List[ClassifiedEvent]:
    """Collapse equal-timestamp runs and space out residual ties below the nanosecond."""
    times = [e.time_ns for e in events]
    if any(b < a for a, b in zip(times, times[1:])):
        raise InputError("events must be ordered by time")

    result: List[ClassifiedEvent] = []
    ties = 0
    merged_rows = 0
    pos = 0
    while pos < len(events):
        end = pos + 1
        while end < len(events) and events[end].time_ns == events[pos].time_ns:
            end += 1
        run = list(events[pos:end])
        if len(run) == 1:
            result.append(run[0])
        else:
            collapsed = _collapse_run(run)
            merged_rows += len(run) - len(collapsed)
            ties += max(len(collapsed) - 1, 0)
            result.extend(replace(e, tie_rank=k) for k, e in enumerate(collapsed))
        pos = end

    if recorder is not None:
        if merged_rows:
            recorder.flag('ingest', 'merged_ties', f"{merged_rows} same-nanosecond rows merged", rows=merged_rows)
        if ties:
            recorder.flag('ingest', 'tie_spacing',
                          f"{ties} residual ties spaced by {TIE_SPACING_SECONDS:g}s", ties=ties)
    return result


def _merge_levels(volumes: Tuple[float, ...], multiple: int, depth: int) -> Tuple[float, ...]:
    raw = np.asarray(volumes[:depth * multiple], dtype=float)
    return tuple(raw.reshape(depth, multiple).sum(axis=1).tolist())


def renormalise_tick(events: Sequence[ClassifiedEvent],
                     multiple: int,
                     depth: int = 2,
                     K: int = 3) -> List[ClassifiedEvent]:
    """Coarsen the tick to multiple * tick: price moves count only in steps of multiple half-ticks.

    Price-move events are re-emitted when the cumulated mid change not yet
    emitted reaches multiple * tick / 2, whose whole steps are then consumed
    and the remainder carried. Adjacent queues are merged in groups of
    `multiple` before the imbalance is recomputed.
    """
    if multiple < 1 or int(multiple) != multiple:
        raise InputError(f"tick multiple must be a positive integer, got {multiple}")
    if multiple == 1 or not events:
        return list(events)
    if events[0].book.depth < depth * multiple:
        raise InputError(f"renormalising by {multiple} needs {depth * multiple} book levels, "
                         f"got {events[0].book.depth}")

    threshold = multiple * events[0].book.tick_size / 2.0
    result: List[ClassifiedEvent] = []
    last_mid = events[0].mid_before
    anchor = last_mid
    cumulative = 0.0

    for event in events:
        cumulative += event.mid - last_mid
        last_mid = event.mid
        fired = abs(cumulative) >= threshold
        x1 = _sign(cumulative) if fired else 0
        if event.event_type in PRICE_MOVE_TYPES and not fired:
            continue

        book = BookSnapshot(
            event.book.best_ask_price, event.book.best_bid_price,
            _merge_levels(event.book.ask_volumes, multiple, depth),
            _merge_levels(event.book.bid_volumes, multiple, depth),
            event.book.tick_size
        )
        imbalance = queue_imbalance(book, depth)
        event_type = event.event_type
        if event_type in PRICE_MOVE_TYPES:
            event_type = 3 if cumulative < 0 else 4
        result.append(replace(
            event,
            event_type=event_type,
            state=StateVariable(x1, discretise_imbalance(imbalance, K), K),
            book=book,
            imbalance=imbalance,
            mid_before=anchor
        ))
        if fired:
            cumulative -= _sign(cumulative) * threshold * math.floor(abs(cumulative) / threshold)
            anchor = event.mid - cumulative
    return result


# ---------------------------------------------------------------------------
# Canonical outputs
# ---------------------------------------------------------------------------

def events_to_frame(events: Sequence[ClassifiedEvent]) -> pd.DataFrame:
    return pd.DataFrame({
        'time_ns': np.array([e.time_ns for e in events], dtype=np.int64),
        'tie_rank': np.array([e.tie_rank for e in events], dtype=np.int64),
        'event_type': np.array([e.event_type for e in events], dtype=np.int64),
        'x1': np.array([e.state.x1 for e in events], dtype=np.int64),
        'x2': np.array([e.state.x2 for e in events], dtype=np.int64),
        'imbalance': np.array([e.imbalance for e in events], dtype=float),
        'mid': np.array([e.mid for e in events], dtype=float),
    }, columns=EVENT_COLUMNS)


def history_from_frame(frame: pd.DataFrame, K: int) -> Tuple[EventHistory, float]:
    """History with times in seconds relative to the first event, plus the horizon (last event time)."""
    if frame.empty:
        raise InputError("no events")
    time_ns = frame['time_ns'].to_numpy(dtype=np.int64)
    ranks = frame['tie_rank'].to_numpy(dtype=np.int64)
    times = (time_ns - time_ns[0]) / NANOS_PER_SECOND + ranks * TIE_SPACING_SECONDS
    states = [
        StateVariable(int(x1), int(x2), K).index
        for x1, x2 in zip(frame['x1'].to_numpy(), frame['x2'].to_numpy())
    ]
    history = EventHistory(times, frame['event_type'].to_numpy(dtype=np.int64), states, states[0])
    return history, float(times[-1])


def to_history(events: Sequence[ClassifiedEvent], K: int) -> Tuple[EventHistory, float]:
    """Calibration-ready history; the initial state is taken as the first event's state."""
    return history_from_frame(events_to_frame(events), K)


def volume_matrix(events: Sequence[ClassifiedEvent], depth: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalised (Va1, Vb1, ...) rows and the flat state of each event."""
    volumes = np.array([e.book.normalised_volumes(depth) for e in events]).reshape(-1, 2 * depth)
    states = np.array([e.state.index for e in events], dtype=np.int64)
    return volumes, states


def _write_frame(frame: pd.DataFrame, path: Union[str, Path], header: Optional[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='') as f:
        for key, value in (header or {}).items():
            f.write(f"# {key}: {value}\n")
        frame.to_csv(f, index=False, float_format='%.17g')
    return path


def write_events_csv(events: Sequence[ClassifiedEvent], path: Union[str, Path],
                     header: Optional[Dict[str, Any]] = None) -> Path:
    return _write_frame(events_to_frame(events), path, header)


def write_volumes_csv(events: Sequence[ClassifiedEvent], depth: int, path: Union[str, Path],
                      header: Optional[Dict[str, Any]] = None) -> Path:
    volumes, states = volume_matrix(events, depth)
    columns = [f"{side}{level}" for level in range(1, depth + 1) for side in ('va', 'vb')]
    frame = pd.DataFrame(volumes, columns=columns)
    frame.insert(0, 'state', states)
    frame.insert(0, 'tie_rank', np.array([e.tie_rank for e in events], dtype=np.int64))
    frame.insert(0, 'time_ns', np.array([e.time_ns for e in events], dtype=np.int64))
    return _write_frame(frame, path, header)


def read_header_block(path: Union[str, Path]) -> Dict[str, str]:
    """Leading '# key: value' lines of a CSV output."""
    header: Dict[str, str] = {}
    with open(path, 'r') as f:
        for line in f:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].partition(':')
            header[key.strip()] = value.strip()
    return header


def _read_frame(path: Union[str, Path], required: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}", path=str(path))
    try:
        frame = pd.read_csv(path, comment='#', float_precision='round_trip')
    except pd.errors.EmptyDataError:
        raise InputError(f"{path} is empty", path=str(path)) from None
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise InputError(f"{path} misses columns {missing}", path=str(path))
    return frame


def read_events_csv(path: Union[str, Path]) -> pd.DataFrame:
    """Canonical event CSV as a DataFrame (header block skipped)."""
    return _read_frame(path, EVENT_COLUMNS)


def read_volumes_csv(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    frame = _read_frame(path, ['time_ns', 'tie_rank', 'state'])
    volume_columns = [c for c in frame.columns if c.startswith(('va', 'vb'))]
    return frame[volume_columns].to_numpy(dtype=float), frame['state'].to_numpy(dtype=np.int64)


def write_history_csv(history: EventHistory, K: int, path: Union[str, Path],
                      header: Optional[Dict[str, Any]] = None) -> Path:
    """Event CSV for a simulated history; times are written as nanoseconds from 0."""
    time_ns = np.round(history.times * NANOS_PER_SECOND).astype(np.int64)
    if np.any(np.diff(time_ns) <= 0):
        raise InputError("simulated events closer than one nanosecond cannot be written as integer nanoseconds")
    states = [StateVariable.from_index(int(x), K) for x in history.states]
    frame = pd.DataFrame({
        'time_ns': time_ns,
        'tie_rank': np.zeros(len(history), dtype=np.int64),
        'event_type': history.events.astype(np.int64),
        'x1': np.array([s.x1 for s in states], dtype=np.int64),
        'x2': np.array([s.x2 for s in states], dtype=np.int64),
        'imbalance': np.full(len(history), np.nan),
        'mid': np.full(len(history), np.nan),
    }, columns=EVENT_COLUMNS)
    return _write_frame(frame, path, header)
