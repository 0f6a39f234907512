#!/usr/bin/env python3
"""
Limit Order Book Mechanics

Book snapshots, queue imbalance, the (price move, imbalance bucket) state
variable, limit-order decomposition into a market and a queued component,
the Dirichlet volume model and the state update caused by a market order.
"""

import math
import logging
from enum import Enum
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .error_handler import DomainError, InputError, ModelError, SamplingBudgetExceeded

logger = logging.getLogger(__name__)

SeedLike = Union[None, int, np.random.SeedSequence, np.random.Generator]

SELL = -1
BUY = 1
SELL_MARKET_PRICE = 0.0
BUY_MARKET_PRICE = math.inf

DEFAULT_REJECTION_BUDGET = 10_000


def as_generator(seed: SeedLike) -> np.random.Generator:
    """Return a numpy Generator, reusing one that is passed in."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class Side(str, Enum):
    """Side of a market order."""
    BUY = "buy"
    SELL = "sell"

    @property
    def sign(self) -> int:
        return BUY if self is Side.BUY else SELL


@dataclass(frozen=True)
class BookSnapshot:
    """Best prices and per-level volumes of a limit order book.

    Prices are integers in units of 1e-4 currency. Level i of the ask side sits
    at best_ask_price + (i-1) * tick_size, the bid side mirrors it downwards.
    """
    best_ask_price: int
    best_bid_price: int
    ask_volumes: Tuple[float, ...]
    bid_volumes: Tuple[float, ...]
    tick_size: int = 100

    def __post_init__(self):
        object.__setattr__(self, 'ask_volumes', tuple(float(v) for v in self.ask_volumes))
        object.__setattr__(self, 'bid_volumes', tuple(float(v) for v in self.bid_volumes))

        if self.tick_size <= 0:
            raise DomainError(f"tick size must be positive, got {self.tick_size}")
        if self.best_ask_price <= self.best_bid_price:
            raise DomainError(
                f"best ask {self.best_ask_price} must exceed best bid {self.best_bid_price}"
            )
        if self.best_ask_price % self.tick_size or self.best_bid_price % self.tick_size:
            raise DomainError(f"prices must be multiples of the tick size {self.tick_size}")
        if len(self.ask_volumes) != len(self.bid_volumes) or not self.ask_volumes:
            raise DomainError("ask and bid sides must have the same non-zero depth")
        if any(v < 0 for v in self.ask_volumes + self.bid_volumes):
            raise DomainError("volumes must be non-negative")

    @property
    def depth(self) -> int:
        return len(self.ask_volumes)

    @property
    def spread(self) -> int:
        return self.best_ask_price - self.best_bid_price

    @property
    def mid_price(self) -> float:
        return (self.best_ask_price + self.best_bid_price) / 2.0

    def ask_price(self, level: int) -> int:
        return self.best_ask_price + (level - 1) * self.tick_size

    def bid_price(self, level: int) -> int:
        return self.best_bid_price - (level - 1) * self.tick_size

    def is_valid(self) -> bool:
        return self.ask_volumes[0] > 0 and self.bid_volumes[0] > 0

    def validate(self) -> None:
        """Raise unless both level-1 queues are non-empty."""
        if not self.is_valid():
            raise DomainError("level-1 volumes must be positive in a valid snapshot")

    def normalised_volumes(self, n: Optional[int] = None) -> np.ndarray:
        """Volumes of the first n levels as (Va1, Vb1, ..., Van, Vbn), summing to 1."""
        n = self._check_depth(n)
        volumes = np.empty(2 * n)
        volumes[0::2] = self.ask_volumes[:n]
        volumes[1::2] = self.bid_volumes[:n]
        total = volumes.sum()
        if total <= 0:
            raise DomainError("empty book")
        return volumes / total

    def _check_depth(self, n: Optional[int]) -> int:
        n = self.depth if n is None else n
        if not 1 <= n <= self.depth:
            raise DomainError(f"depth {n} not available in a snapshot of depth {self.depth}")
        return n


def queue_imbalance(snapshot: BookSnapshot, n: Optional[int] = None) -> float:
    """(sum bid - sum ask) / (sum bid + sum ask) over the first n levels."""
    n = snapshot._check_depth(n)
    bids = math.fsum(snapshot.bid_volumes[:n])
    asks = math.fsum(snapshot.ask_volumes[:n])
    if bids + asks <= 0:
        raise DomainError("empty book")
    return (bids - asks) / (bids + asks)


def volume_imbalance(volumes: np.ndarray) -> np.ndarray:
    """Imbalance of interleaved (ask, bid) volume vectors; works row-wise on 2-D input."""
    volumes = np.asarray(volumes, dtype=float)
    asks = volumes[..., 0::2].sum(axis=-1)
    bids = volumes[..., 1::2].sum(axis=-1)
    return (bids - asks) / (bids + asks)


def _check_buckets(K: int) -> None:
    if K < 1 or K % 2 == 0:
        raise InputError(f"number of buckets K must be odd and >= 1, got {K}")


def discretise_imbalances(imbalance: np.ndarray, K: int) -> np.ndarray:
    """Vectorised bucket index x2 for imbalances in [-1, 1]."""
    _check_buckets(K)
    imbalance = np.asarray(imbalance, dtype=float)
    if np.any(~np.isfinite(imbalance)) or np.any(np.abs(imbalance) > 1.0):
        raise DomainError("imbalance must lie in [-1, 1]")
    k = np.minimum(np.floor((imbalance + 1.0) * K / 2.0), K - 1).astype(np.int64)
    return k - (K - 1) // 2


def discretise_imbalance(i: float, K: int) -> int:
    """Bucket of i in the uniform partition of [-1, 1] into K cells, centred at 0.

    Cells are [-1 + 2k/K, -1 + 2(k+1)/K) for k = 0..K-1, the last one closed at 1.
    """
    return int(discretise_imbalances(np.array([i]), K)[0])


def bucket_bounds(x2: int, K: int) -> Tuple[float, float]:
    """Lower and upper imbalance bounds of bucket x2."""
    _check_buckets(K)
    k = x2 + (K - 1) // 2
    return -1.0 + 2.0 * k / K, -1.0 + 2.0 * (k + 1) / K


@dataclass(frozen=True)
class StateVariable:
    """State X = (x1, x2): last mid-price move and imbalance bucket."""
    x1: int
    x2: int
    K: int = 3

    def __post_init__(self):
        _check_buckets(self.K)
        half = (self.K - 1) // 2
        if self.x1 not in (-1, 0, 1):
            raise DomainError(f"x1 must be in {{-1, 0, 1}}, got {self.x1}")
        if not -half <= self.x2 <= half:
            raise DomainError(f"x2 must be in [{-half}, {half}], got {self.x2}")

    @property
    def index(self) -> int:
        return (self.x1 + 1) * self.K + (self.x2 + (self.K - 1) // 2)

    @classmethod
    def from_index(cls, index: int, K: int = 3) -> 'StateVariable':
        _check_buckets(K)
        if not 0 <= index < 3 * K:
            raise DomainError(f"state index {index} outside [0, {3 * K})")
        x1, k = divmod(int(index), K)
        return cls(x1=x1 - 1, x2=k - (K - 1) // 2, K=K)

    def reflected(self) -> 'StateVariable':
        return StateVariable(-self.x1, -self.x2, self.K)


def state_count(K: int) -> int:
    _check_buckets(K)
    return 3 * K


def deflationary_states(K: int) -> np.ndarray:
    """Flat indices with x1 = -1."""
    return np.arange(0, K)


def neutral_states(K: int) -> np.ndarray:
    return np.arange(K, 2 * K)


def inflationary_states(K: int) -> np.ndarray:
    """Flat indices with x1 = +1."""
    return np.arange(2 * K, 3 * K)


def reflection_map(K: int) -> Dict[int, int]:
    """Canonical bijection (1, x2) -> (-1, -x2) from inflationary to deflationary states."""
    return {
        int(i): StateVariable.from_index(int(i), K).reflected().index
        for i in inflationary_states(K)
    }


@dataclass(frozen=True)
class LimitOrder:
    """Order (t, q, p, d). Decomposition components may carry size 0."""
    time: float
    size: float
    price: float
    direction: int

    def __post_init__(self):
        if self.direction not in (SELL, BUY):
            raise InputError(f"direction must be -1 or +1, got {self.direction}")
        if self.size < 0 or self.time < 0:
            raise InputError("order time and size must be non-negative")

    @property
    def is_market(self) -> bool:
        if self.direction == SELL:
            return self.price == SELL_MARKET_PRICE
        return self.price == BUY_MARKET_PRICE

    def validate_submission(self) -> None:
        if self.size <= 0:
            raise InputError(f"submitted orders need a positive size, got {self.size}")


def decompose_limit_order(order: LimitOrder, snapshot: BookSnapshot) -> Tuple[LimitOrder, LimitOrder]:
    """Split a limit order into its immediately executed and its queued part."""
    snapshot.validate()
    order.validate_submission()

    if order.direction == SELL:
        crossing = sum(
            v for i, v in enumerate(snapshot.bid_volumes, start=1)
            if snapshot.bid_price(i) >= order.price
        )
        market_price = SELL_MARKET_PRICE
    else:
        crossing = sum(
            v for i, v in enumerate(snapshot.ask_volumes, start=1)
            if snapshot.ask_price(i) <= order.price
        )
        market_price = BUY_MARKET_PRICE

    market_size = min(order.size, crossing)
    market = LimitOrder(order.time, market_size, market_price, order.direction)
    queued = LimitOrder(order.time, order.size - market_size, order.price, order.direction)
    return market, queued


@dataclass
class PriceLevelBook:
    """Price -> volume ladder with a brute-force price-priority matching engine."""
    bids: Dict[float, float] = field(default_factory=dict)
    asks: Dict[float, float] = field(default_factory=dict)

    @classmethod
    def from_snapshot(cls, snapshot: BookSnapshot) -> 'PriceLevelBook':
        bids = {
            float(snapshot.bid_price(i)): v
            for i, v in enumerate(snapshot.bid_volumes, start=1) if v > 0
        }
        asks = {
            float(snapshot.ask_price(i)): v
            for i, v in enumerate(snapshot.ask_volumes, start=1) if v > 0
        }
        return cls(bids=bids, asks=asks)

    def copy(self) -> 'PriceLevelBook':
        return PriceLevelBook(bids=dict(self.bids), asks=dict(self.asks))

    def apply(self, order: LimitOrder) -> 'PriceLevelBook':
        """Return the book after matching the order; market remainders are discarded."""
        book = self.copy()
        remaining = order.size
        if order.direction == SELL:
            opposite, own = book.bids, book.asks
            levels = sorted(opposite, reverse=True)
            crosses = lambda price: price >= order.price  # noqa: E731
        else:
            opposite, own = book.asks, book.bids
            levels = sorted(opposite)
            crosses = lambda price: price <= order.price  # noqa: E731

        for price in levels:
            if remaining <= 0 or not crosses(price):
                break
            take = min(remaining, opposite[price])
            opposite[price] -= take
            remaining -= take
            if opposite[price] == 0:
                del opposite[price]

        if remaining > 0 and not order.is_market:
            own[order.price] = own.get(order.price, 0.0) + remaining
        return book


@dataclass(frozen=True, eq=False)
class DirichletParams:
    """Dirichlet concentration vectors gamma(x), one row of 2n entries per flat state."""
    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.array(self.gamma, dtype=float)
        if gamma.ndim != 2 or gamma.shape[1] % 2:
            raise ModelError(f"gamma must have shape (d_S, 2n), got {gamma.shape}")
        if not np.all(np.isfinite(gamma)) or np.any(gamma <= 0):
            raise ModelError("gamma entries must be finite and strictly positive")
        gamma.flags.writeable = False
        object.__setattr__(self, 'gamma', gamma)

    @property
    def n_states(self) -> int:
        return self.gamma.shape[0]

    @property
    def depth(self) -> int:
        return self.gamma.shape[1] // 2

    @classmethod
    def uniform(cls, n_states: int, depth: int) -> 'DirichletParams':
        return cls(np.ones((n_states, 2 * depth)))

    def for_state(self, state: Union[int, StateVariable]) -> np.ndarray:
        index = state.index if isinstance(state, StateVariable) else int(state)
        if not 0 <= index < self.n_states:
            raise DomainError(f"gamma is not defined for state {index}")
        return self.gamma[index]

    def to_list(self) -> List[List[float]]:
        return self.gamma.tolist()


def sample_volumes_conditional(gamma: DirichletParams,
                               state: StateVariable,
                               rng_seed: SeedLike = None,
                               max_attempts: int = DEFAULT_REJECTION_BUDGET,
                               batch_size: int = 64) -> np.ndarray:
    """Draw normalised volumes from Dir(gamma(x)) conditioned on the imbalance bucket of x.

    Rejection sampling from the unconditional Dirichlet; raises
    SamplingBudgetExceeded once max_attempts draws have been rejected.
    """
    if max_attempts < 1:
        raise InputError(f"rejection budget must be positive, got {max_attempts}")
    rng = as_generator(rng_seed)
    concentration = gamma.for_state(state)
    attempts = 0

    while attempts < max_attempts:
        size = min(batch_size, max_attempts - attempts)
        draws = rng.dirichlet(concentration, size=size)
        buckets = discretise_imbalances(np.clip(volume_imbalance(draws), -1.0, 1.0), state.K)
        hits = np.flatnonzero(buckets == state.x2)
        if hits.size:
            draw = draws[hits[0]]
            return draw / draw.sum()
        attempts += size

    # no accepted draws, so the rule of three bounds the true rate
    accepted = 0
    upper = 3.0 / attempts
    raise SamplingBudgetExceeded(
        f"no draw fell in bucket x2={state.x2} after {attempts} attempts "
        f"(acceptance rate < {upper:.2e} at 95%)",
        attempts=attempts,
        acceptance_rate=accepted / attempts,
        acceptance_upper_bound=upper
    )


@dataclass(frozen=True, eq=False)
class MarketOrderUpdate:
    """Outcome of a market order applied to sampled volumes."""
    state_before: StateVariable
    state_after: StateVariable
    pre_volumes: np.ndarray
    post_volumes: np.ndarray
    size: float
    imbalance: float


def consume_volumes(state: StateVariable,
                    volumes: np.ndarray,
                    order_size_fraction: float,
                    side: Union[Side, str]) -> MarketOrderUpdate:
    """Walk a market order of size c * (opposite depth) through interleaved volumes."""
    side = Side(side)
    if order_size_fraction < 0:
        raise InputError(f"order size fraction must be non-negative, got {order_size_fraction}")

    pre = np.asarray(volumes, dtype=float)
    post = pre.copy()
    hit = post[1::2] if side is Side.SELL else post[0::2]
    untouched = post[0::2] if side is Side.SELL else post[1::2]

    size = order_size_fraction * hit.sum()
    x1 = side.sign if size >= hit[0] and size > 0 else 0

    consumed_before = np.concatenate(([0.0], np.cumsum(hit)[:-1]))
    remaining = np.maximum(size - consumed_before, 0.0)
    taken = np.maximum(0.0, np.minimum(remaining, hit))
    hit = hit - taken
    if side is Side.SELL:
        post[1::2] = hit
    else:
        post[0::2] = hit

    survivor = hit.sum()
    other = untouched.sum()
    signed = survivor - other if side is Side.SELL else other - survivor
    imbalance = float(np.clip(signed / (survivor + other), -1.0, 1.0))
    x2 = discretise_imbalance(imbalance, state.K)

    return MarketOrderUpdate(
        state_before=state,
        state_after=StateVariable(x1, x2, state.K),
        pre_volumes=pre,
        post_volumes=post,
        size=float(size),
        imbalance=imbalance
    )


def market_order_update(state: StateVariable,
                        gamma: DirichletParams,
                        order_size_fraction: float,
                        side: Union[Side, str],
                        rng_seed: SeedLike = None,
                        max_attempts: int = DEFAULT_REJECTION_BUDGET) -> MarketOrderUpdate:
    """Sample the book behind state and apply a market order to it."""
    volumes = sample_volumes_conditional(gamma, state, rng_seed, max_attempts)
    return consume_volumes(state, volumes, order_size_fraction, side)


def apply_market_order(state: StateVariable,
                       gamma: DirichletParams,
                       order_size_fraction: float,
                       side: Union[Side, str],
                       rng_seed: SeedLike = None,
                       max_attempts: int = DEFAULT_REJECTION_BUDGET) -> StateVariable:
    """New state after a market order hits a book sampled from gamma."""
    return market_order_update(state, gamma, order_size_fraction, side, rng_seed, max_attempts).state_after


@dataclass(frozen=True, eq=False)
class MidPricePath:
    """Piecewise-constant mid-price proxy p0 + (tick/2) * cumulated x1."""
    p0: float
    tick: int
    times: np.ndarray
    values: np.ndarray

    def value_at(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side='right'))
        return float(self.p0 if idx == 0 else self.values[idx - 1])

    def values_at(self, ts: Sequence[float]) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(ts, dtype=float), side='right')
        padded = np.concatenate(([self.p0], self.values))
        return padded[idx]

    @property
    def final(self) -> float:
        return float(self.values[-1]) if self.values.size else float(self.p0)


def mid_price_proxy(p0: float, tick: int, events: Sequence[Tuple[float, int]]) -> MidPricePath:
    """Reconstruct the mid-price path from (time, x1) pairs."""
    if events:
        times, moves = zip(*events)
    else:
        times, moves = (), ()
    times = np.asarray(times, dtype=float)
    values = p0 + (tick / 2.0) * np.cumsum(np.asarray(moves, dtype=float))
    return MidPricePath(p0=float(p0), tick=tick, times=times, values=values)
