#!/usr/bin/env python3
"""
Tests for LOBSTER ingestion.
"""

import pytest
import numpy as np
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from lob_impact.error_handler import FlagRecorder, InputError
from lob_impact.lob_model import StateVariable
from lob_impact.lobster_ingest import (
    LABEL_EVENT_MAP,
    JoinedRecord,
    RawMessage,
    classify,
    dedup_and_order,
    events_to_frame,
    history_from_frame,
    parse_pair,
    read_events_csv,
    read_header_block,
    read_volumes_csv,
    renormalise_tick,
    seconds_to_ns,
    to_history,
    volume_matrix,
    write_events_csv,
    write_volumes_csv,
)

DATA = Path(__file__).parent / 'data'

GOLDEN_TYPES = [2, 3, 2, 2, 4, 1, 3, 2, 2, 2]
GOLDEN_STATES = [(1, 1), (-1, 1), (0, 1), (1, 1), (1, -1), (-1, -1), (-1, 0), (0, 1), (0, 1), (0, 1)]
GOLDEN_TIMES_NS = [
    35400092452000, 35400092533000, 35400092768000, 35400113748000, 35400113776000,
    35400121175000, 35400121258000, 35400123294000, 35400123334000, 35400125010000,
]


def record(line, time_ns, label, direction, asks, bids, price=10000, size=10):
    """Joined record with (price, size) levels per side."""
    return JoinedRecord(
        line_number=line,
        message=RawMessage(time_ns, label, line, size, price, direction),
        ask_prices=tuple(p for p, _ in asks),
        ask_sizes=tuple(float(v) for _, v in asks),
        bid_prices=tuple(p for p, _ in bids),
        bid_sizes=tuple(float(v) for _, v in bids),
    )


def golden_events(**kwargs):
    parsed = parse_pair(DATA / 'golden_messages.csv', DATA / 'golden_orderbook.csv', depth=2)
    result = classify(parsed.records, tick_size=100, depth=2, K=3, **kwargs)
    return dedup_and_order(result.events), result


class TestParsePair:
    """Test cases for the streaming message/orderbook join."""

    def test_sample_pair(self):
        """Test the ten-row sample joins into ten records with matching times."""
        parsed = parse_pair(DATA / 'sample_messages.csv', DATA / 'sample_orderbook.csv', depth=2)

        assert len(parsed) == 10
        assert parsed.malformed == []
        assert [r.message.time_ns for r in parsed.records] == GOLDEN_TIMES_NS
        first = parsed.records[0]
        assert first.message.label == 4
        assert first.message.direction == -1
        assert first.ask_prices == (460700, 460800)
        assert first.bid_sizes == (900.0, 9502.0)

    def test_empty_files(self, tmp_path):
        """Test empty files give an empty result."""
        (tmp_path / 'm.csv').write_text('')
        (tmp_path / 'o.csv').write_text('')

        parsed = parse_pair(tmp_path / 'm.csv', tmp_path / 'o.csv', depth=2)

        assert len(parsed) == 0

    def test_row_count_mismatch(self, tmp_path):
        """Test mismatched files raise an error naming both counts."""
        lines = (DATA / 'sample_messages.csv').read_text().splitlines()
        (tmp_path / 'm.csv').write_text('\n'.join(lines[:7]) + '\n')

        with pytest.raises(InputError) as excinfo:
            parse_pair(tmp_path / 'm.csv', DATA / 'sample_orderbook.csv', depth=2)

        assert '7' in str(excinfo.value)
        assert '10' in str(excinfo.value)
        assert excinfo.value.details == {'message_rows': 7, 'orderbook_rows': 10}

    def test_malformed_rows_reported(self, tmp_path):
        """Test unparseable rows are skipped and reported with line numbers."""
        lines = (DATA / 'sample_messages.csv').read_text().splitlines()
        lines[2] = 'not-a-time,4,1,100,460700,-1'
        lines[5] = '35400.121175,9,1,100,460700,1'
        (tmp_path / 'm.csv').write_text('\n'.join(lines) + '\n')
        recorder = FlagRecorder()

        parsed = parse_pair(tmp_path / 'm.csv', DATA / 'sample_orderbook.csv', depth=2, recorder=recorder)

        assert len(parsed) == 8
        assert [m.line_number for m in parsed.malformed] == [3, 6]
        assert 'malformed_rows' in recorder.codes()

    def test_strict_mode(self, tmp_path):
        """Test strict mode fails on the first malformed row."""
        lines = (DATA / 'sample_messages.csv').read_text().splitlines()
        lines[4] = '35400.113776,1,1005,100,-5,1'
        (tmp_path / 'm.csv').write_text('\n'.join(lines) + '\n')

        with pytest.raises(InputError, match='line 5'):
            parse_pair(tmp_path / 'm.csv', DATA / 'sample_orderbook.csv', depth=2, strict=True)

    def test_missing_file(self, tmp_path):
        """Test a missing file is an input error naming the path."""
        with pytest.raises(InputError, match='missing.csv'):
            parse_pair(tmp_path / 'missing.csv', DATA / 'sample_orderbook.csv', depth=2)

    def test_insufficient_depth(self):
        """Test requesting more levels than the file holds."""
        with pytest.raises(InputError, match='depth 3'):
            parse_pair(DATA / 'sample_messages.csv', DATA / 'sample_orderbook.csv', depth=3)

    def test_seconds_to_ns_exact(self):
        """Test decimal seconds convert without float rounding."""
        assert seconds_to_ns('35400.092452') == 35400092452000
        assert seconds_to_ns('34200.000000001') == 34200000000001
        assert seconds_to_ns('34200') == 34200 * 10 ** 9
        assert seconds_to_ns('1e4') is None


class TestClassify:
    """Test cases for label classification and state computation."""

    def test_label_map(self):
        """Test the label/direction mapping to event types."""
        assert LABEL_EVENT_MAP[(4, -1)] == 2
        assert LABEL_EVENT_MAP[(4, 1)] == 1
        assert LABEL_EVENT_MAP[(5, -1)] == 2
        assert LABEL_EVENT_MAP[(1, -1)] == 3
        assert LABEL_EVENT_MAP[(1, 1)] == 4
        assert LABEL_EVENT_MAP[(3, 1)] == 3
        assert LABEL_EVENT_MAP[(3, -1)] == 4

    def test_golden_sample(self):
        """Test the golden sample classifies to the tabulated types and states."""
        events, result = golden_events()

        assert [e.event_type for e in events] == GOLDEN_TYPES
        assert [(e.state.x1, e.state.x2) for e in events] == GOLDEN_STATES
        assert [e.time_ns for e in events] == GOLDEN_TIMES_NS
        assert result.dropped == {'cross_trade': 4, 'unchanged_mid': 1}

    def test_states_match_book_rows(self):
        """Test every state is recomputable from its own book row."""
        events, _ = golden_events()

        for event in events:
            bids = sum(event.book.bid_volumes[:2])
            asks = sum(event.book.ask_volumes[:2])
            assert event.imbalance == pytest.approx((bids - asks) / (bids + asks))
            assert np.sign(event.mid - event.mid_before) == event.state.x1

    def test_execution_on_ask(self):
        """Test a label-4 ask row becomes a buy market order."""
        records = [record(1, 100, 4, -1, [(10100, 50)], [(10000, 50)])]

        result = classify(records, tick_size=100, depth=1)

        assert result.events[0].event_type == 2
        assert result.events[0].state == StateVariable(0, 0)

    def test_unchanged_mid_dropped(self):
        """Test a label-1 bid row that leaves the mid in place is dropped."""
        records = [
            record(1, 100, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 200, 1, 1, [(10100, 50)], [(10000, 60)]),
        ]

        result = classify(records, tick_size=100, depth=1)

        assert [e.event_type for e in result.events] == [1]
        assert result.dropped == {'unchanged_mid': 1}

    def test_pure_table_mode_keeps_unchanged_mid(self):
        """Test the mid-change filter can be switched off."""
        records = [
            record(1, 100, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 200, 1, 1, [(10100, 50)], [(10000, 60)]),
        ]

        result = classify(records, tick_size=100, depth=1, mid_change_filter=False)

        assert [e.event_type for e in result.events] == [1, 4]
        assert result.events[1].state.x1 == 0

    def test_cancel_on_bid_moving_mid_down(self):
        """Test a label-3 bid row that lowers the mid becomes a type-3 event."""
        records = [
            record(1, 100, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 200, 3, 1, [(10100, 50)], [(9900, 40)]),
        ]

        result = classify(records, tick_size=100, depth=1)

        assert result.events[1].event_type == 3
        assert result.events[1].state.x1 == -1

    def test_halts_and_cross_trades_dropped(self):
        """Test labels 6 and 7 are dropped and counted."""
        recorder = FlagRecorder()
        records = [
            record(1, 100, 6, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 200, 7, 1, [(10100, 50)], [(10000, 50)], price=-1),
            record(3, 300, 4, 1, [(10100, 50)], [(10000, 40)]),
        ]

        result = classify(records, tick_size=100, depth=1, recorder=recorder)

        assert len(result.events) == 1
        assert result.dropped == {'cross_trade': 1, 'trading_halt': 1}
        assert {'dropped_cross_trade', 'dropped_trading_halt'} <= set(recorder.codes())

    def test_invalid_book_dropped(self):
        """Test a row with an empty best level is dropped."""
        records = [record(1, 100, 4, 1, [(10100, 0)], [(10000, 50)])]

        result = classify(records, tick_size=100, depth=1)

        assert result.events == []
        assert result.dropped == {'invalid_book': 1}


class TestDedupAndOrder:
    """Test cases for equal-timestamp handling."""

    def test_distinct_times_identity(self):
        """Test strictly increasing times pass through unchanged."""
        events, _ = golden_events()

        assert dedup_and_order(events) == events

    def test_execution_absorbs_price_move(self):
        """Test an execution and a price move in the same nanosecond merge into the execution."""
        records = [
            record(1, 0, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 500, 4, 1, [(10100, 50)], [(10000, 20)]),
            record(3, 500, 3, 1, [(10100, 50)], [(9900, 40)]),
        ]
        events = classify(records, tick_size=100, depth=1).events

        merged = dedup_and_order(events)

        assert len(merged) == 2
        assert merged[1].event_type == 1
        assert merged[1].mid == 10000.0
        assert merged[1].state == StateVariable(-1, 0)
        assert merged[1].book.bid_volumes == (40.0,)

    def test_three_way_price_move_tie(self):
        """Test three same-nanosecond price moves merge with their cumulative state."""
        records = [
            record(1, 0, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 700, 1, -1, [(10090, 5)], [(10000, 50)]),
            record(3, 700, 1, -1, [(10080, 5)], [(10000, 50)]),
            record(4, 700, 1, -1, [(10070, 5)], [(10000, 50)]),
        ]
        events = classify(records, tick_size=10, depth=1).events

        merged = dedup_and_order(events)

        assert [e.event_type for e in merged] == [1, 3]
        assert merged[1].mid == 10035.0
        assert merged[1].mid_before == 10050.0
        assert merged[1].state.x1 == -1

    def test_net_zero_run_dropped(self):
        """Test a same-nanosecond run that returns the mid to its start is dropped."""
        records = [
            record(1, 0, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 700, 1, -1, [(10090, 5)], [(10000, 50)]),
            record(3, 700, 3, -1, [(10100, 50)], [(10000, 50)]),
        ]
        events = classify(records, tick_size=10, depth=1).events

        merged = dedup_and_order(events)

        assert [e.event_type for e in merged] == [1]

    def test_residual_ties_spaced(self):
        """Test two executions of different type in one nanosecond get tie ranks."""
        recorder = FlagRecorder()
        records = [
            record(1, 0, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 900, 4, 1, [(10100, 50)], [(10000, 30)]),
            record(3, 900, 4, -1, [(10100, 20)], [(10000, 30)]),
        ]
        events = classify(records, tick_size=100, depth=1).events

        merged = dedup_and_order(events, recorder)
        history, _ = to_history(merged, K=3)

        assert [(e.event_type, e.tie_rank) for e in merged] == [(1, 0), (1, 0), (2, 1)]
        assert np.all(np.diff(history.times) > 0)
        assert history.times[2] - history.times[1] == pytest.approx(1e-11, rel=1e-3)
        assert 'tie_spacing' in recorder.codes()

    def test_unordered_input_rejected(self):
        """Test decreasing times are an input error."""
        records = [
            record(1, 500, 4, 1, [(10100, 50)], [(10000, 50)]),
            record(2, 100, 4, 1, [(10100, 50)], [(10000, 40)]),
        ]
        events = classify(records, tick_size=100, depth=1).events

        with pytest.raises(InputError):
            dedup_and_order(events)


class TestRenormaliseTick:
    """Test cases for tick coarsening."""

    def decline(self):
        """Two-level books; each row after the first lowers the mid by half a tick."""
        return [
            record(1, 1, 4, 1, [(10100, 50), (10200, 30)], [(10000, 50), (9900, 20)]),
            record(2, 2, 3, 1, [(10100, 50), (10200, 30)], [(9900, 20), (9800, 10)]),
            record(3, 3, 1, -1, [(10000, 5), (10100, 50)], [(9900, 20), (9800, 10)]),
            record(4, 4, 3, 1, [(10000, 5), (10100, 50)], [(9800, 10), (9700, 10)]),
            record(5, 5, 1, -1, [(9900, 5), (10000, 5)], [(9800, 10), (9700, 10)]),
        ]

    def test_identity_for_unit_multiple(self):
        """Test m = 1 leaves the events unchanged."""
        events = classify(self.decline(), tick_size=100, depth=1).events

        assert renormalise_tick(events, 1, depth=1) == events

    def test_monotone_decline(self):
        """Test a four half-tick decline emits two coarse price moves for m = 2."""
        events = classify(self.decline(), tick_size=100, depth=1).events
        assert [e.event_type for e in events] == [1, 3, 3, 3, 3]

        coarse = renormalise_tick(events, 2, depth=1)

        assert [e.event_type for e in coarse] == [1, 3, 3]
        assert [e.state.x1 for e in coarse] == [0, -1, -1]
        assert [e.time_ns for e in coarse] == [1, 3, 5]

    def test_alternating_moves_cancel(self):
        """Test alternating half-tick moves never reach the coarse tick."""
        records = [
            record(1, 1, 4, 1, [(10100, 50), (10200, 30)], [(10000, 50), (9900, 20)]),
            record(2, 2, 1, 1, [(10100, 50), (10200, 30)], [(10050, 5), (10000, 50)]),
            record(3, 3, 3, 1, [(10100, 50), (10200, 30)], [(10000, 50), (9900, 20)]),
            record(4, 4, 1, 1, [(10100, 50), (10200, 30)], [(10050, 5), (10000, 50)]),
            record(5, 5, 3, 1, [(10100, 50), (10200, 30)], [(10000, 50), (9900, 20)]),
        ]
        events = classify(records, tick_size=50, depth=1).events
        assert [e.event_type for e in events] == [1, 4, 3, 4, 3]

        coarse = renormalise_tick(events, 2, depth=1)

        assert [e.event_type for e in coarse] == [1]

    def test_remainder_carried(self):
        """Test the part of a move beyond the coarse tick counts towards the next one."""
        records = [
            record(1, 1, 4, 1, [(10100, 50), (10200, 30)], [(10000, 50), (9900, 20)]),
            record(2, 2, 3, 1, [(10100, 50), (10200, 30)], [(9700, 10), (9600, 10)]),
            record(3, 3, 1, -1, [(10000, 5), (10100, 50)], [(9700, 10), (9600, 10)]),
        ]
        events = classify(records, tick_size=100, depth=1).events
        assert [e.mid for e in events] == [10050, 9900, 9850]

        coarse = renormalise_tick(events, 2, depth=1)

        assert [e.event_type for e in coarse] == [1, 3, 3]
        assert [e.state.x1 for e in coarse] == [0, -1, -1]

    def test_merged_queue_imbalance(self):
        """Test adjacent queues are summed before the imbalance is recomputed."""
        events = classify(self.decline(), tick_size=100, depth=1).events

        coarse = renormalise_tick(events, 2, depth=1)

        first = coarse[0]
        assert first.book.ask_volumes == (80.0,)
        assert first.book.bid_volumes == (70.0,)
        assert first.imbalance == pytest.approx((70 - 80) / 150)

    def test_not_enough_levels(self):
        """Test coarsening needs n * m parsed levels."""
        events = classify(self.decline(), tick_size=100, depth=1).events

        with pytest.raises(InputError):
            renormalise_tick(events, 3, depth=1)

    def test_invalid_multiple(self):
        """Test non-positive multiples are rejected."""
        with pytest.raises(InputError):
            renormalise_tick([], 0)


class TestCanonicalFiles:
    """Test cases for event and volume CSV files."""

    def test_history_from_golden(self):
        """Test the golden events give a history relative to the first event."""
        events, _ = golden_events()

        history, horizon = to_history(events, K=3)

        assert len(history) == 10
        assert history.times[0] == 0.0
        assert horizon == pytest.approx(0.032558)
        assert list(history.events) == GOLDEN_TYPES
        assert list(history.states) == [StateVariable(x1, x2).index for x1, x2 in GOLDEN_STATES]

    def test_event_csv_round_trip(self, tmp_path):
        """Test written and re-read events give an identical history."""
        events, _ = golden_events()
        header = {'tool': 'lob-impact', 'seed': 'none'}

        path = write_events_csv(events, tmp_path / 'events.csv', header)
        frame = read_events_csv(path)
        original, original_horizon = to_history(events, K=3)
        restored, restored_horizon = history_from_frame(frame, K=3)

        assert read_header_block(path) == header
        assert np.array_equal(original.times, restored.times)
        assert np.array_equal(original.events, restored.events)
        assert np.array_equal(original.states, restored.states)
        assert original_horizon == restored_horizon
        assert frame['imbalance'].tolist() == events_to_frame(events)['imbalance'].tolist()

    def test_volume_csv(self, tmp_path):
        """Test normalised volumes are written per event with their state."""
        events, _ = golden_events()
        expected_volumes, expected_states = volume_matrix(events, 2)

        path = write_volumes_csv(events, 2, tmp_path / 'volumes.csv')
        volumes, states = read_volumes_csv(path)

        assert volumes.shape == (10, 4)
        assert np.allclose(volumes.sum(axis=1), 1.0)
        assert np.array_equal(volumes, expected_volumes)
        assert np.array_equal(states, expected_states)

    def test_empty_history_rejected(self, tmp_path):
        """Test an event file without events cannot become a history."""
        path = write_events_csv([], tmp_path / 'events.csv')

        with pytest.raises(InputError):
            history_from_frame(read_events_csv(path), K=3)
