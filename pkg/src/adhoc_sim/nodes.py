"""Physical machine model: capacity, churn, primary-user demand, headroom.

A node alternates Up/Down according to its churn model (or a scripted list of
transitions), while the primary user's demand follows either a piecewise
constant trace or a two-state Markov process. Headroom is what harvesting may
use: capacity minus user demand minus a reserve margin, clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from .errors import NodeDown
from .kernel import Dist, RngStream, Simulator, draw_ms
from .resources import ResourceVector

UP = "up"
DOWN = "down"

DEFAULT_MARGIN_FRACTION = 0.1


@dataclass(frozen=True)
class ChurnModel:
    """Alternating up/down durations; stationary availability is
    E_up / (E_up + E_down)."""

    up_duration: Dist
    down_duration: Dist

    def stationary_availability(self) -> float:
        e_up = self.up_duration.mean_value()
        e_down = self.down_duration.mean_value()
        return e_up / (e_up + e_down)

    def problems(self) -> list[str]:
        out = list(self.up_duration.problems()) + list(self.down_duration.problems())
        if not out:
            if self.up_duration.mean_value() <= 0:
                out.append("churn mean up duration must be > 0")
            if self.down_duration.mean_value() < 0:
                out.append("churn mean down duration must be >= 0")
        return out


@dataclass(frozen=True)
class ScriptedChurn:
    """Explicit (time, up|down) transitions; used for forced-crash scenarios."""

    transitions: tuple[tuple[int, str], ...]

    def problems(self) -> list[str]:
        out = []
        last_t = -1
        for t, liveness in self.transitions:
            if liveness not in (UP, DOWN):
                out.append(f"scripted churn liveness must be up/down, got {liveness!r}")
            if t <= last_t:
                out.append("scripted churn times must be strictly increasing")
            last_t = t
        return out


@dataclass(frozen=True)
class TraceLoad:
    """Step-function user demand: value of the last breakpoint at or before t,
    zero before the first breakpoint."""

    points: tuple[tuple[int, ResourceVector], ...]

    def demand_at(self, t: int) -> ResourceVector:
        current = ResourceVector.zero()
        for pt, demand in self.points:
            if pt <= t:
                current = demand
            else:
                break
        return current

    def mean_over(self, start: int, end: int) -> ResourceVector:
        """Exact time-weighted mean of the step function over [start, end)."""
        if end <= start:
            return self.demand_at(start)
        total = ResourceVector.zero()
        cursor = start
        current = self.demand_at(start)
        for pt, demand in self.points:
            if pt <= start:
                continue
            if pt >= end:
                break
            total = total + current.scale(pt - cursor)
            cursor = pt
            current = demand
        total = total + current.scale(end - cursor)
        return total.scale(1.0 / (end - start))

    def problems(self) -> list[str]:
        out = []
        last_t = -1
        for t, demand in self.points:
            if t <= last_t:
                out.append("trace breakpoint times must be strictly increasing")
            if not demand.non_negative():
                out.append(f"trace demand at t={t} has negative components")
            last_t = t
        return out


@dataclass(frozen=True)
class MarkovLoad:
    """Two-state demand process: idle/active demands with exponential sojourns."""

    idle_demand: ResourceVector
    active_demand: ResourceVector
    mean_idle_ms: float
    mean_active_ms: float

    def stationary_mean(self) -> ResourceVector:
        total = self.mean_idle_ms + self.mean_active_ms
        return self.idle_demand.scale(self.mean_idle_ms / total) + self.active_demand.scale(
            self.mean_active_ms / total
        )

    def problems(self) -> list[str]:
        out = []
        if self.mean_idle_ms <= 0 or self.mean_active_ms <= 0:
            out.append("markov2 mean durations must be > 0")
        if not (self.idle_demand.non_negative() and self.active_demand.non_negative()):
            out.append("markov2 demands must be non-negative")
        return out


def next_churn_transition(node: "Node", stream: RngStream) -> tuple[str, int]:
    """Draw the duration of the current liveness phase; returns the flipped
    liveness and the virtual time at which it takes effect."""
    model = node.churn
    if not isinstance(model, ChurnModel):
        raise ValueError(f"node {node.node_id} has no stochastic churn model")
    dist = model.up_duration if node.liveness == UP else model.down_duration
    duration = draw_ms(stream, dist)
    new_liveness = DOWN if node.liveness == UP else UP
    return new_liveness, node.sim.now + duration


class Node:
    """One machine: liveness, user demand, and accounting history.

    Listeners (infrastructure, metrics) subscribe to liveness and demand
    changes; the node itself never touches hosted elements.
    """

    def __init__(
        self,
        sim: Simulator,
        node_id: str,
        capacity: ResourceVector,
        churn=None,
        user_load=None,
        reserve_margin: Optional[ResourceVector] = None,
        forecast_availability: Optional[float] = None,
    ):
        self.sim = sim
        self.node_id = node_id
        self.capacity = capacity
        self.churn = churn
        self.user_load = user_load
        # externally supplied long-run availability estimate, for nodes whose
        # churn is scripted or unknown to the planner
        self.forecast_availability = forecast_availability
        if reserve_margin is None:
            reserve_margin = capacity.scale(DEFAULT_MARGIN_FRACTION)
        self.reserve_margin = reserve_margin
        self.liveness = UP
        self.user_demand = ResourceVector.zero()
        self.on_liveness_change: list[Callable[["Node"], None]] = []
        self.on_demand_change: list[Callable[["Node"], None]] = []
        # accounting: liveness history as (t, liveness), demand history as (t, demand)
        self.liveness_history: list[tuple[int, str]] = [(0, UP)]
        self.demand_history: list[tuple[int, ResourceVector]] = [(0, self.user_demand)]
        self._component = f"node:{node_id}"

    # -- process wiring -----------------------------------------------------

    def start(self) -> None:
        """Schedule churn and user-load processes from t=0."""
        if isinstance(self.churn, ChurnModel):
            self._schedule_next_churn()
        elif isinstance(self.churn, ScriptedChurn):
            for t, liveness in self.churn.transitions:
                self.sim.schedule(
                    (lambda lv: lambda: self._apply_liveness(lv))(liveness),
                    self._component,
                    t - self.sim.now,
                )
        if isinstance(self.user_load, TraceLoad):
            initial = self.user_load.demand_at(self.sim.now)
            self._install_demand(initial, log=False)
            for t, demand in self.user_load.points:
                if t > self.sim.now:
                    self.sim.schedule(
                        (lambda d: lambda: self._install_demand(d))(demand),
                        self._component,
                        t - self.sim.now,
                    )
        elif isinstance(self.user_load, MarkovLoad):
            self._install_demand(self.user_load.idle_demand, log=False)
            self._schedule_markov_flip(active=True)

    def _schedule_next_churn(self) -> None:
        stream = self.sim.stream(f"churn/{self.node_id}")
        new_liveness, at = next_churn_transition(self, stream)
        self.sim.schedule(
            lambda: (self._apply_liveness(new_liveness), self._schedule_next_churn()),
            self._component,
            at - self.sim.now,
        )

    def _schedule_markov_flip(self, active: bool) -> None:
        load = self.user_load
        stream = self.sim.stream(f"user/{self.node_id}")
        mean = load.mean_idle_ms if active else load.mean_active_ms
        delay = draw_ms(stream, Dist.exponential(mean))
        demand = load.active_demand if active else load.idle_demand

        def flip():
            self._install_demand(demand)
            self._schedule_markov_flip(active=not active)

        self.sim.schedule(flip, self._component, delay)

    # -- state transitions --------------------------------------------------

    def _apply_liveness(self, liveness: str) -> None:
        if liveness == self.liveness:
            return
        self.liveness = liveness
        self.liveness_history.append((self.sim.now, liveness))
        self.sim.record(
            self._component,
            {"event": "node_up" if liveness == UP else "node_down", "node": self.node_id},
        )
        for cb in self.on_liveness_change:
            cb(self)

    def _install_demand(self, demand: ResourceVector, log: bool = True) -> None:
        if demand == self.user_demand:
            return
        self.user_demand = demand
        self.demand_history.append((self.sim.now, demand))
        if log:
            self.sim.record(
                self._component,
                {"event": "user_demand", "node": self.node_id, "demand": demand.as_dict()},
            )
        for cb in self.on_demand_change:
            cb(self)

    # -- queries ------------------------------------------------------------

    def is_up(self) -> bool:
        return self.liveness == UP

    def advance_user_load(self, t: int) -> ResourceVector:
        """Demand in force at t. For traces this is the step-function value
        (installed as current); Markov demand is whatever the scheduled
        transitions have installed."""
        if t < self.sim.now:
            raise ValueError(f"t={t} is in the past (now={self.sim.now})")
        if isinstance(self.user_load, TraceLoad):
            demand = self.user_load.demand_at(t)
            self._install_demand(demand, log=False)
            return demand
        return self.user_demand

    def headroom(self) -> ResourceVector:
        """capacity - user_demand - reserve_margin, clamped at zero."""
        if not self.is_up():
            raise NodeDown(f"node {self.node_id} is down")
        return (self.capacity - self.user_demand - self.reserve_margin).clamped()

    # -- accounting ---------------------------------------------------------

    def up_ms(self, start: int, end: int) -> int:
        """Milliseconds spent Up within [start, end)."""
        if end <= start:
            return 0
        total = 0
        hist = self.liveness_history
        for i, (t, liveness) in enumerate(hist):
            seg_start = max(t, start)
            seg_end = hist[i + 1][0] if i + 1 < len(hist) else end
            seg_end = min(seg_end, end)
            if liveness == UP and seg_end > seg_start:
                total += seg_end - seg_start
        return total

    def uptime_fraction(self, start: int, end: int) -> float:
        if end <= start:
            return 0.0
        return self.up_ms(start, end) / (end - start)

    def mean_demand(self, start: int, end: int) -> ResourceVector:
        """Time-weighted mean observed demand over [start, end)."""
        if end <= start:
            return self.user_demand
        total = ResourceVector.zero()
        hist = self.demand_history
        for i, (t, demand) in enumerate(hist):
            seg_start = max(t, start)
            seg_end = hist[i + 1][0] if i + 1 < len(hist) else end
            seg_end = min(seg_end, end)
            if seg_end > seg_start:
                total = total + demand.scale(seg_end - seg_start)
        return total.scale(1.0 / (end - start))
