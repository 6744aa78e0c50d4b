"""Suspension setting: stocks of intermediate outputs and cost-aware selection.

A stock at stage ``i`` is a stored output ``y^(i)`` that lets the cascade
resume at stage ``i + 1`` without paying for stages ``1..i`` again.  Stage 0
always holds the permanent zero vector (start from scratch).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .acq_ci import CIParams, optimistic_argmax, pessimistic_argmax
from .acq_ei import EIContext, maximize_ei
from .cascade import CascadeModel
from .errors import ConsistencyViolation, InvalidArgument

REUSE_MODES = ("once", "unlimited")


@dataclass(frozen=True, eq=False)
class Stock:
    id: int
    stage: int
    value: np.ndarray
    uses_left: int | None = 1
    created: int = 0

    def as_dict(self) -> dict:
        return {"id": self.id, "stage": self.stage, "value": [float(v) for v in self.value],
                "uses_left": self.uses_left, "created": self.created}


@dataclass(frozen=True)
class Discard:
    stock_id: int
    stage: int
    value: tuple[float, ...]
    lcb: float
    ucb: float
    threshold: float
    t: int


@dataclass(frozen=True, eq=False)
class StockLedger:
    stocks: tuple[Stock, ...]
    reuse: str = "once"
    next_id: int = 1
    discards: tuple[Discard, ...] = field(default=())

    @classmethod
    def initial(cls, reuse: str = "once") -> "StockLedger":
        if reuse not in REUSE_MODES:
            raise InvalidArgument(f"unknown stock reuse mode {reuse!r}")
        origin = Stock(id=0, stage=0, value=np.zeros(0), uses_left=None, created=0)
        return cls((origin,), reuse=reuse)

    def at_stage(self, n: int) -> list[Stock]:
        return [s for s in self.stocks if s.stage == n]

    def get(self, stock_id: int) -> Stock:
        for s in self.stocks:
            if s.id == stock_id:
                return s
        raise ConsistencyViolation(f"stock {stock_id} is not in the ledger")

    def ordered(self) -> list[Stock]:
        return sorted(self.stocks, key=lambda s: (s.stage, s.id))

    def snapshot(self) -> list[dict]:
        return [s.as_dict() for s in self.ordered()]


@dataclass(frozen=True)
class CostVector:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals or any(not v > 0 for v in vals):
            raise InvalidArgument("stage costs must be positive")
        object.__setattr__(self, "values", vals)

    def stage(self, n: int) -> float:
        return self.values[n - 1]

    def remaining(self, n: int) -> float:
        """Cost of running stages ``n..N``."""
        return float(sum(self.values[n - 1:]))

    def scaled(self, factor: float) -> "CostVector":
        return CostVector(tuple(v * factor for v in self.values))


@dataclass(frozen=True, eq=False)
class SuspensionChoice:
    stage: int
    stock_id: int
    x: np.ndarray
    score: float
    utility: float


def can_finish(costs: CostVector, stage: int, budget_left: float) -> bool:
    return costs.remaining(stage) <= budget_left + 1e-12


def any_start_fits(ledger: StockLedger, costs: CostVector, budget_left: float) -> bool:
    n_stages = len(costs.values)
    return any(s.stage < n_stages and can_finish(costs, s.stage + 1, budget_left) for s in ledger.stocks)


# utility(stage, stock) -> (x_stage, value); replaces the EI maximization
UtilityFn = Callable[[int, Stock], tuple[np.ndarray, float]]


def select_suspension(ledger: StockLedger, ctx: EIContext | None, costs: CostVector, optimizer,
                      utility: UtilityFn | None = None, budget_left: float | None = None,
                      seed=None) -> SuspensionChoice:
    """Pick (stage, stock, control) maximizing utility per remaining cost.

    Every stock at stage ``i - 1`` is a candidate start for stage ``i``.
    When ``budget_left`` is given, a start is only admitted if the rest of the
    cascade from it (stages ``i..N``) still fits, since anything else cannot
    reach a final output.  Ties go to the lowest stage, then the lowest stock id.
    """
    n_stages = len(costs.values)
    best: SuspensionChoice | None = None
    for stock in ledger.ordered():
        i = stock.stage + 1
        if i > n_stages:
            continue
        if budget_left is not None and not can_finish(costs, i, budget_left):
            continue
        if utility is None:
            x, _, value = maximize_ei(ctx, stock.value, i, optimizer, seed=seed)
        else:
            x, value = utility(i, stock)
        score = float(value) / costs.remaining(i)
        if best is None or score > best.score:
            best = SuspensionChoice(i, stock.id, np.asarray(x, dtype=float), score, float(value))
    if best is None:
        raise InvalidArgument("no stage is affordable with the remaining budget")
    return best


def apply_observation(ledger: StockLedger, choice: SuspensionChoice, y_new, t: int,
                      n_stages: int) -> StockLedger:
    """Consume the used stock and bank the new output (unless it is final)."""
    stock = ledger.get(choice.stock_id)
    if stock.uses_left is not None and stock.uses_left < 1:
        raise ConsistencyViolation(f"stock {stock.id} has no uses left")
    stocks = []
    for s in ledger.stocks:
        if s.id != stock.id:
            stocks.append(s)
        elif s.uses_left is None:
            stocks.append(s)
        elif s.uses_left > 1:
            stocks.append(replace(s, uses_left=s.uses_left - 1))
    next_id = ledger.next_id
    if choice.stage < n_stages:
        value = np.asarray(y_new, dtype=float).ravel().copy()
        value.setflags(write=False)
        uses = 1 if ledger.reuse == "once" else None
        stocks.append(Stock(next_id, choice.stage, value, uses, created=t))
        next_id += 1
    return replace(ledger, stocks=tuple(stocks), next_id=next_id)


def stock_bounds(model: CascadeModel, stock: Stock, params: CIParams, optimizer, seed=None):
    """Best achievable LCB and UCB of ``F`` when resuming from ``stock``."""
    n = stock.stage + 1
    lcb, _ = pessimistic_argmax(model, params, optimizer, n=n, y_prev=stock.value, seed=seed)
    ucb, _ = optimistic_argmax(model, params, optimizer, n=n, y_prev=stock.value, seed=seed)
    return lcb, ucb


def stock_reduction(ledger: StockLedger, model: CascadeModel, params: CIParams, optimizer,
                    exempt_id: int | None = None, t: int = 0, seed=None):
    """Discard stocks whose UCB lies below the best LCB over all stocks.

    The stage-0 stock and ``exempt_id`` are never discarded.  Returns the
    new ledger, the discarded ids and the bounds of every stock.
    """
    bounds = {s.id: stock_bounds(model, s, params, optimizer, seed=seed) for s in ledger.ordered()}
    threshold = max(lcb for lcb, _ in bounds.values())
    keep, gone, log = [], [], list(ledger.discards)
    for s in ledger.stocks:
        lcb, ucb = bounds[s.id]
        if s.stage > 0 and s.id != exempt_id and ucb < threshold:
            gone.append(s.id)
            log.append(Discard(s.id, s.stage, tuple(float(v) for v in s.value), lcb, ucb, threshold, t))
        else:
            keep.append(s)
    return replace(ledger, stocks=tuple(keep), discards=tuple(log)), sorted(gone), bounds
