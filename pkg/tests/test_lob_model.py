#!/usr/bin/env python3
"""
Tests for limit order book mechanics.
"""

import math
import pytest
import numpy as np
import sys
from pathlib import Path

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from lob_impact.error_handler import DomainError, InputError, ModelError, SamplingBudgetExceeded
from lob_impact.lob_model import (
    BUY,
    BUY_MARKET_PRICE,
    SELL,
    SELL_MARKET_PRICE,
    BookSnapshot,
    DirichletParams,
    LimitOrder,
    PriceLevelBook,
    Side,
    StateVariable,
    apply_market_order,
    bucket_bounds,
    consume_volumes,
    decompose_limit_order,
    deflationary_states,
    discretise_imbalance,
    discretise_imbalances,
    inflationary_states,
    market_order_update,
    mid_price_proxy,
    neutral_states,
    queue_imbalance,
    reflection_map,
    sample_volumes_conditional,
    state_count,
    volume_imbalance,
)


@pytest.fixture
def book():
    """Two-level book: asks 300 @ 10100, 200 @ 10200; bids 100 @ 10000, 400 @ 9900."""
    return BookSnapshot(10100, 10000, (300, 200), (100, 400))


class TestBookSnapshot:
    """Test cases for BookSnapshot."""

    def test_prices_and_levels(self, book):
        """Test derived prices of a snapshot."""
        assert book.depth == 2
        assert book.spread == 100
        assert book.mid_price == 10050.0
        assert book.ask_price(2) == 10200
        assert book.bid_price(2) == 9900

    def test_crossed_book_rejected(self):
        """Test best ask must exceed best bid."""
        with pytest.raises(DomainError):
            BookSnapshot(10000, 10000, (1,), (1,))

    def test_off_tick_price_rejected(self):
        """Test prices must sit on the tick grid."""
        with pytest.raises(DomainError):
            BookSnapshot(10150, 10000, (1,), (1,))

    def test_validate_empty_best_level(self):
        """Test an empty best queue is constructible but not valid."""
        snapshot = BookSnapshot(10100, 10000, (0, 5), (3, 4))

        assert not snapshot.is_valid()
        with pytest.raises(DomainError):
            snapshot.validate()

    def test_normalised_volumes(self, book):
        """Test interleaved normalised volumes."""
        volumes = book.normalised_volumes(2)

        assert volumes.tolist() == pytest.approx([0.3, 0.1, 0.2, 0.4])
        assert volumes.sum() == pytest.approx(1.0)

    def test_depth_out_of_range(self, book):
        """Test asking for more levels than the snapshot holds."""
        with pytest.raises(DomainError):
            book.normalised_volumes(3)


class TestImbalance:
    """Test cases for imbalance and its discretisation."""

    def test_queue_imbalance(self, book):
        """Test imbalance at depth one and two."""
        assert queue_imbalance(book, 1) == pytest.approx(-0.5)
        assert queue_imbalance(book, 2) == pytest.approx(0.0)

    def test_volume_imbalance_matches_queue_imbalance(self, book):
        """Test the vectorised imbalance of normalised volumes."""
        assert volume_imbalance(book.normalised_volumes(2)) == pytest.approx(queue_imbalance(book, 2))

    def test_discretise_three_buckets(self):
        """Test the uniform partition of [-1, 1] into three buckets."""
        assert discretise_imbalance(-1.0, 3) == -1
        assert discretise_imbalance(-0.34, 3) == -1
        assert discretise_imbalance(0.0, 3) == 0
        assert discretise_imbalance(0.33, 3) == 0
        assert discretise_imbalance(0.34, 3) == 1
        assert discretise_imbalance(1.0, 3) == 1

    def test_discretise_vectorised(self):
        """Test vector discretisation matches the scalar form."""
        values = np.linspace(-1.0, 1.0, 41)

        buckets = discretise_imbalances(values, 5)

        assert buckets.tolist() == [discretise_imbalance(v, 5) for v in values]
        assert buckets.min() == -2
        assert buckets.max() == 2

    def test_queue_imbalance_antisymmetric(self):
        """Test swapping the bid and ask volumes negates the imbalance."""
        rng = np.random.default_rng(4)

        for _ in range(200):
            depth = int(rng.integers(1, 6))
            asks = rng.integers(0, 1000, depth).astype(float)
            bids = rng.integers(0, 1000, depth).astype(float)
            asks[0] += 1.0
            bids[0] += 1.0
            book = BookSnapshot(10100, 10000, asks, bids)
            swapped = BookSnapshot(10100, 10000, bids, asks)

            assert -1.0 <= queue_imbalance(book) <= 1.0
            assert queue_imbalance(swapped) == -queue_imbalance(book)

    @pytest.mark.parametrize('K', [1, 3, 5, 7, 9])
    def test_discretise_monotone(self, K):
        """Test buckets never decrease along [-1, 1] and cover every bucket."""
        values = np.linspace(-1.0, 1.0, 4001)

        buckets = discretise_imbalances(values, K)

        assert np.all(np.diff(buckets) >= 0)
        assert sorted(set(buckets.tolist())) == list(range(-(K - 1) // 2, (K - 1) // 2 + 1))

    def test_discretise_out_of_range(self):
        """Test imbalances outside [-1, 1] are rejected."""
        with pytest.raises(DomainError):
            discretise_imbalance(1.5, 3)

    def test_even_bucket_count_rejected(self):
        """Test K must be odd."""
        with pytest.raises(InputError):
            discretise_imbalance(0.0, 4)

    def test_bucket_bounds(self):
        """Test bucket bounds tile [-1, 1]."""
        assert bucket_bounds(-1, 3) == pytest.approx((-1.0, -1 / 3))
        assert bucket_bounds(0, 3) == pytest.approx((-1 / 3, 1 / 3))
        assert bucket_bounds(1, 3) == pytest.approx((1 / 3, 1.0))


class TestStateVariable:
    """Test cases for the state variable and its flat index."""

    def test_index_round_trip(self):
        """Test every flat index decodes to a state with that index."""
        for K in (1, 3, 5):
            for index in range(state_count(K)):
                assert StateVariable.from_index(index, K).index == index

    def test_index_layout(self):
        """Test the flat index orders states by x1 then x2."""
        assert StateVariable(-1, -1).index == 0
        assert StateVariable(0, 0).index == 4
        assert StateVariable(1, 1).index == 8

    def test_state_sets(self):
        """Test deflationary, neutral and inflationary index ranges."""
        assert deflationary_states(3).tolist() == [0, 1, 2]
        assert neutral_states(3).tolist() == [3, 4, 5]
        assert inflationary_states(3).tolist() == [6, 7, 8]

    def test_reflection_map(self):
        """Test (1, x2) maps to (-1, -x2)."""
        assert reflection_map(3) == {6: 2, 7: 1, 8: 0}

    def test_invalid_components(self):
        """Test out-of-range components are rejected."""
        with pytest.raises(DomainError):
            StateVariable(2, 0)
        with pytest.raises(DomainError):
            StateVariable(0, 2, K=3)
        with pytest.raises(DomainError):
            StateVariable.from_index(9, 3)


class TestLimitOrders:
    """Test cases for order decomposition and the matching engine."""

    def test_market_order_prices(self):
        """Test market orders are recognised by their extreme price."""
        assert LimitOrder(0.0, 5, SELL_MARKET_PRICE, SELL).is_market
        assert LimitOrder(0.0, 5, BUY_MARKET_PRICE, BUY).is_market
        assert not LimitOrder(0.0, 5, 10000, BUY).is_market

    def test_invalid_direction(self):
        """Test direction must be -1 or +1."""
        with pytest.raises(InputError):
            LimitOrder(0.0, 5, 10000, 0)

    def test_zero_size_submission(self, book):
        """Test a zero-size order cannot be submitted."""
        with pytest.raises(InputError):
            decompose_limit_order(LimitOrder(0.0, 0, 10100, BUY), book)

    def test_passive_order_fully_queued(self, book):
        """Test a buy at the best bid has no market component."""
        market, queued = decompose_limit_order(LimitOrder(1.0, 50, 10000, BUY), book)

        assert market.size == 0
        assert market.is_market
        assert queued.size == 50
        assert queued.price == 10000

    def test_crossing_order_split(self, book):
        """Test a buy crossing two ask levels up to the available volume."""
        market, queued = decompose_limit_order(LimitOrder(1.0, 700, 10200, BUY), book)

        assert market.size == 500
        assert market.price == math.inf
        assert queued.size == 200

    def test_sell_crossing_one_level(self, book):
        """Test a sell at the best bid only crosses level one."""
        market, queued = decompose_limit_order(LimitOrder(1.0, 250, 10000, SELL), book)

        assert market.size == 100
        assert market.price == SELL_MARKET_PRICE
        assert queued.size == 150

    @pytest.mark.parametrize('size,price,direction', [
        (50, 10000, BUY), (700, 10200, BUY), (350, 10100, BUY),
        (250, 10000, SELL), (600, 9900, SELL), (30, 10100, SELL),
    ])
    def test_decomposition_matches_engine(self, book, size, price, direction):
        """Test decomposing then applying the parts equals applying the whole order."""
        order = LimitOrder(1.0, size, price, direction)
        ladder = PriceLevelBook.from_snapshot(book)

        market, queued = decompose_limit_order(order, book)
        sequential = ladder.apply(market)
        if queued.size > 0:
            sequential = sequential.apply(queued)

        whole = ladder.apply(order)
        assert sequential.bids == whole.bids
        assert sequential.asks == whole.asks

    def test_decomposition_matches_engine_on_random_books(self):
        """Test the decomposed replay equals the matching engine on 1000 random books and orders."""
        rng = np.random.default_rng(2024)

        for _ in range(1000):
            depth = int(rng.integers(1, 6))
            best_bid = 100 * int(rng.integers(90, 110))
            best_ask = best_bid + 100 * int(rng.integers(1, 4))
            asks = rng.integers(0, 500, depth).astype(float)
            bids = rng.integers(0, 500, depth).astype(float)
            asks[0] += 1.0
            bids[0] += 1.0
            snapshot = BookSnapshot(best_ask, best_bid, asks, bids)
            direction = BUY if rng.uniform() < 0.5 else SELL
            price = 100 * int(rng.integers(best_bid // 100 - 6, best_ask // 100 + 7))
            order = LimitOrder(1.0, float(rng.integers(1, 2000)), price, direction)
            ladder = PriceLevelBook.from_snapshot(snapshot)

            market, queued = decompose_limit_order(order, snapshot)
            sequential = ladder.apply(market)
            if queued.size > 0:
                sequential = sequential.apply(queued)

            whole = ladder.apply(order)
            assert market.size + queued.size == order.size
            assert sequential.bids == whole.bids
            assert sequential.asks == whole.asks


class TestDirichletVolumes:
    """Test cases for the Dirichlet volume model."""

    def test_shape_validation(self):
        """Test gamma needs an even number of columns and positive entries."""
        with pytest.raises(ModelError):
            DirichletParams(np.ones((9, 3)))
        with pytest.raises(ModelError):
            DirichletParams(np.zeros((9, 4)))

    def test_uniform(self):
        """Test the uniform concentration."""
        gamma = DirichletParams.uniform(9, 2)

        assert gamma.n_states == 9
        assert gamma.depth == 2
        assert gamma.for_state(StateVariable(0, 0)).tolist() == [1.0] * 4

    def test_conditional_sample_in_bucket(self):
        """Test conditional draws land in the requested bucket."""
        gamma = DirichletParams.uniform(9, 2)
        rng = np.random.default_rng(3)

        for x2 in (-1, 0, 1):
            state = StateVariable(0, x2)
            volumes = sample_volumes_conditional(gamma, state, rng)
            assert volumes.sum() == pytest.approx(1.0)
            assert discretise_imbalance(float(volume_imbalance(volumes)), 3) == x2

    def test_conditional_sample_deterministic(self):
        """Test a fixed seed gives the same draw."""
        gamma = DirichletParams.uniform(9, 2)
        state = StateVariable(1, -1)

        first = sample_volumes_conditional(gamma, state, 11)
        second = sample_volumes_conditional(gamma, state, 11)

        assert np.array_equal(first, second)

    def test_rejection_budget(self):
        """Test an unreachable bucket exhausts the budget."""
        # concentration piled on the bid side makes x2 = -1 practically impossible
        gamma = DirichletParams(np.tile([1e-3, 500.0, 1e-3, 500.0], (9, 1)))

        with pytest.raises(SamplingBudgetExceeded) as excinfo:
            sample_volumes_conditional(gamma, StateVariable(0, -1), 0, max_attempts=128)

        assert excinfo.value.details['attempts'] == 128
        assert excinfo.value.acceptance_rate == 0.0
        assert excinfo.value.details['acceptance_upper_bound'] == pytest.approx(3.0 / 128)


class TestMarketOrders:
    """Test cases for the market order state update."""

    def test_sell_clears_best_bid(self):
        """Test a sell larger than the best bid moves the price down."""
        volumes = np.array([0.2, 0.1, 0.2, 0.5])

        update = consume_volumes(StateVariable(0, 0), volumes, 0.8, Side.SELL)

        assert update.size == pytest.approx(0.48)
        assert update.post_volumes.tolist() == pytest.approx([0.2, 0.0, 0.2, 0.12])
        assert update.state_after.x1 == -1
        assert update.imbalance == pytest.approx((0.12 - 0.4) / 0.52)
        assert update.state_after.x2 == -1

    def test_small_buy_leaves_price(self):
        """Test a buy smaller than the best ask keeps x1 = 0."""
        volumes = np.array([0.3, 0.2, 0.2, 0.3])

        update = consume_volumes(StateVariable(0, 0), volumes, 0.1, 'buy')

        assert update.size == pytest.approx(0.05)
        assert update.state_after.x1 == 0
        assert update.post_volumes[0] == pytest.approx(0.25)

    def test_zero_size_order(self):
        """Test c = 0 leaves the book unchanged with x1 = 0."""
        volumes = np.array([0.25, 0.25, 0.25, 0.25])

        update = consume_volumes(StateVariable(1, 0), volumes, 0.0, Side.SELL)

        assert update.state_after == StateVariable(0, 0)
        assert np.array_equal(update.post_volumes, volumes)

    def test_negative_fraction(self):
        """Test a negative order size fraction is rejected."""
        with pytest.raises(InputError):
            consume_volumes(StateVariable(0, 0), np.full(4, 0.25), -0.1, Side.SELL)

    def test_full_sweep(self):
        """Test c = 1 empties the hit side."""
        update = consume_volumes(StateVariable(0, 0), np.full(4, 0.25), 1.0, Side.SELL)

        assert update.state_after == StateVariable(-1, -1)
        assert update.post_volumes[1::2].tolist() == [0.0, 0.0]
        assert update.imbalance == pytest.approx(-1.0)

    def test_sell_only_depletes_bids(self):
        """Test sampled sell updates never raise a bid queue nor touch the ask side."""
        gamma = DirichletParams.uniform(9, 2)
        rng = np.random.default_rng(12)

        for x in range(9):
            state = StateVariable.from_index(x, 3)
            for c in (0.05, 0.3, 1.0):
                update = market_order_update(state, gamma, c, Side.SELL, rng)
                new_state = apply_market_order(state, gamma, c, Side.SELL, rng)

                assert np.all(update.post_volumes[1::2] <= update.pre_volumes[1::2])
                assert np.array_equal(update.post_volumes[0::2], update.pre_volumes[0::2])
                assert new_state.x1 in (-1, 0)

    def test_apply_market_order_reproducible(self):
        """Test the sampled update is reproducible for a fixed seed."""
        gamma = DirichletParams.uniform(9, 2)

        first = apply_market_order(StateVariable(0, 0), gamma, 0.4, Side.SELL, rng_seed=5)
        second = apply_market_order(StateVariable(0, 0), gamma, 0.4, Side.SELL, rng_seed=5)

        assert first == second


class TestMidPriceProxy:
    """Test cases for the reconstructed mid-price."""

    def test_path_values(self):
        """Test the proxy accumulates half-tick moves."""
        path = mid_price_proxy(10050.0, 100, [(1.0, -1), (2.0, 0), (3.0, -1), (4.0, 1)])

        assert path.values.tolist() == [10000.0, 10000.0, 9950.0, 10000.0]
        assert path.value_at(0.5) == 10050.0
        assert path.value_at(3.0) == 9950.0
        assert path.values_at([0.0, 2.5, 10.0]).tolist() == [10050.0, 10000.0, 10000.0]
        assert path.final == 10000.0

    def test_empty_path(self):
        """Test an empty path stays at p0."""
        path = mid_price_proxy(100.0, 1, [])

        assert path.final == 100.0
        assert path.value_at(5.0) == 100.0
