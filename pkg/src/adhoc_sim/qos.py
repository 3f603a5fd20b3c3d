"""QoS brokering and dispatch.

The broker admits reservation requests against forecast usable capacity held
in a per-node calendar, maximizing the predicted availability of the reserved
node set 1 - prod(1 - p_i); admitted agreements are pre-deployed shortly
before their window opens. The dispatcher routes reserved traffic to its
agreement's elements first and falls back to best effort (most cpu headroom,
element id ascending) otherwise.

Search is exhaustive over node subsets up to a fleet-size threshold and
greedy (availability desc, headroom desc, node id asc) beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

from .errors import NoLiveElement, UnknownAgreement
from .kernel import Simulator
from .membership import CloudletRuntime
from .nodes import ChurnModel, MarkovLoad, Node, TraceLoad
from .resources import ResourceVector

ORACLE = "oracle"
ESTIMATOR = "estimator"

REJECT_AVAILABILITY = "availability_unreachable"
REJECT_CAPACITY = "capacity_exhausted"

ACTIVE = "active"
EXPIRED = "expired"
RELEASED = "released"

DEFAULT_EXHAUSTIVE_THRESHOLD = 10
DEFAULT_TRAILING_WINDOW_MS = 500_000_000


def availability_of(node_availabilities) -> float:
    """Probability that at least one of the nodes is up: 1 - prod(1 - p_i)."""
    q = 1.0
    for p in node_availabilities:
        q *= 1.0 - p
    return 1.0 - q


@dataclass(frozen=True)
class ReservationRequest:
    request_id: str
    cloudlet_id: str
    demand: ResourceVector  # per element
    element_count: int
    window: tuple[int, int]  # [start, end)
    availability_target: float

    def problems(self) -> list[str]:
        out = []
        if not self.window[0] < self.window[1]:
            out.append(f"request {self.request_id}: window start must precede end")
        if not self.demand.any_positive():
            out.append(f"request {self.request_id}: demand must be positive somewhere")
        if not self.demand.non_negative():
            out.append(f"request {self.request_id}: demand components must be >= 0")
        if self.element_count < 1:
            out.append(f"request {self.request_id}: element_count must be >= 1")
        if not 0 < self.availability_target <= 1:
            out.append(f"request {self.request_id}: availability_target must be in (0,1]")
        return out


@dataclass
class Agreement:
    agreement_id: str
    request: ReservationRequest
    reserved: list[tuple[str, Optional[str]]]  # (node_id, element_id once deployed)
    predicted_availability: float
    state: str = ACTIVE

    def reserved_nodes(self) -> list[str]:
        return [node_id for node_id, _ in self.reserved]

    def reserved_elements(self) -> list[str]:
        return [eid for _, eid in self.reserved if eid is not None]


@dataclass(frozen=True)
class Rejection:
    request: ReservationRequest
    reason: str
    predicted_availability: Optional[float] = None


@dataclass(frozen=True)
class NodeForecast:
    node_id: str
    availability: float
    expected_headroom: ResourceVector


@dataclass(frozen=True)
class CapacityForecast:
    window: tuple[int, int]
    per_node: dict  # node_id -> NodeForecast


class Forecaster:
    """Per-node availability and usable headroom, either from the true churn
    parameters (oracle mode) or from trailing observed history (estimator)."""

    def __init__(
        self,
        nodes: dict[str, Node],
        mode: str = ORACLE,
        trailing_window_ms: int = DEFAULT_TRAILING_WINDOW_MS,
        now_fn: Callable[[], int] = lambda: 0,
    ):
        if mode not in (ORACLE, ESTIMATOR):
            raise ValueError(f"unknown forecast mode {mode!r}")
        self.nodes = nodes
        self.mode = mode
        self.trailing_window_ms = trailing_window_ms
        self.now_fn = now_fn

    def forecast_capacity(self, window: tuple[int, int]) -> CapacityForecast:
        per_node = {}
        for node_id in sorted(self.nodes):
            node = self.nodes[node_id]
            if self.mode == ORACLE:
                availability = self._oracle_availability(node)
                mean_demand = self._model_mean_demand(node, window)
            else:
                now = self.now_fn()
                start = max(0, now - self.trailing_window_ms)
                availability = node.uptime_fraction(start, now) if now > start else 1.0
                mean_demand = node.mean_demand(start, now)
            headroom = (node.capacity - mean_demand - node.reserve_margin).clamped()
            per_node[node_id] = NodeForecast(node_id, availability, headroom)
        return CapacityForecast(window=window, per_node=per_node)

    @staticmethod
    def _oracle_availability(node: Node) -> float:
        if node.forecast_availability is not None:
            return node.forecast_availability
        if isinstance(node.churn, ChurnModel):
            return node.churn.stationary_availability()
        return 1.0  # no stochastic churn model: assumed always on

    @staticmethod
    def _model_mean_demand(node: Node, window: tuple[int, int]) -> ResourceVector:
        load = node.user_load
        if isinstance(load, TraceLoad):
            return load.mean_over(window[0], window[1])
        if isinstance(load, MarkovLoad):
            return load.stationary_mean()
        return ResourceVector.zero()


class ReservationCalendar:
    """Per-node piecewise-constant reservation ledger."""

    def __init__(self):
        self.entries: dict[str, list[tuple[int, int, ResourceVector, str]]] = {}

    def add(self, node_id: str, window: tuple[int, int], demand: ResourceVector,
            agreement_id: str) -> None:
        self.entries.setdefault(node_id, []).append(
            (window[0], window[1], demand, agreement_id)
        )

    def remove_agreement(self, agreement_id: str) -> None:
        for node_id in list(self.entries):
            self.entries[node_id] = [
                e for e in self.entries[node_id] if e[3] != agreement_id
            ]
            if not self.entries[node_id]:
                del self.entries[node_id]

    def reserved_at(self, node_id: str, t: int) -> ResourceVector:
        total = ResourceVector.zero()
        for start, end, demand, _aid in self.entries.get(node_id, []):
            if start <= t < end:
                total = total + demand
        return total

    def feasible(self, node_id: str, window: tuple[int, int], demand: ResourceVector,
                 limit: ResourceVector) -> bool:
        """Would adding demand over window keep the node within limit at
        every instant? Reservations are piecewise constant, so checking each
        overlap boundary suffices."""
        points = {window[0]}
        for start, end, _d, _a in self.entries.get(node_id, []):
            if end > window[0] and start < window[1]:
                points.add(max(start, window[0]))
        for t in sorted(points):
            if (self.reserved_at(node_id, t) + demand).exceeds_any(limit):
                return False
        return True


class Broker:
    """Establishes and manages up-front agreements."""

    def __init__(
        self,
        sim: Simulator,
        nodes: dict[str, Node],
        forecaster: Forecaster,
        ids,
        deploy_fn: Callable[[str, str, ResourceVector], str],
        deploy_ms: int = 2000,
        exhaustive_threshold: int = DEFAULT_EXHAUSTIVE_THRESHOLD,
    ):
        self.sim = sim
        self.nodes = nodes
        self.forecaster = forecaster
        self.ids = ids
        self.deploy_fn = deploy_fn
        self.deploy_ms = deploy_ms
        self.exhaustive_threshold = exhaustive_threshold
        self.calendar = ReservationCalendar()
        self.agreements: dict[str, Agreement] = {}

    # -- admission -------------------------------------------------------------

    def negotiate(self, request: ReservationRequest):
        """Admit iff some placement of element_count distinct nodes is
        calendar-feasible and meets the availability target; reserves and
        pre-deploys on admission."""
        forecast = self.forecaster.forecast_capacity(request.window)
        ordered = sorted(
            forecast.per_node.values(),
            key=lambda f: (-f.availability, -f.expected_headroom.cpu, f.node_id),
        )
        feasible = [
            f
            for f in ordered
            if self.calendar.feasible(
                f.node_id, request.window, request.demand, f.expected_headroom
            )
        ]
        if len(feasible) < request.element_count:
            return self._reject(request, REJECT_CAPACITY, None)
        if len(self.nodes) <= self.exhaustive_threshold:
            best, best_avail = None, -1.0
            for subset in combinations(feasible, request.element_count):
                avail = availability_of([f.availability for f in subset])
                if avail > best_avail + 1e-12:
                    best, best_avail = subset, avail
            chosen, predicted = list(best), best_avail
        else:
            chosen = feasible[: request.element_count]
            predicted = availability_of([f.availability for f in chosen])
        if predicted < request.availability_target:
            return self._reject(request, REJECT_AVAILABILITY, predicted)
        agreement = Agreement(
            agreement_id=self.ids.next("a"),
            request=request,
            reserved=[(f.node_id, None) for f in chosen],
            predicted_availability=predicted,
        )
        self.agreements[agreement.agreement_id] = agreement
        for f in chosen:
            self.calendar.add(f.node_id, request.window, request.demand,
                              agreement.agreement_id)
        self.sim.record(
            "broker",
            {
                "event": "agreement_admitted",
                "agreement": agreement.agreement_id,
                "request": request.request_id,
                "cloudlet": request.cloudlet_id,
                "nodes": agreement.reserved_nodes(),
                "window": list(request.window),
                "predicted_availability": predicted,
            },
        )
        deploy_at = max(self.sim.now, request.window[0] - self.deploy_ms)
        self.sim.schedule(
            lambda: self._pre_deploy(agreement.agreement_id),
            "broker",
            deploy_at - self.sim.now,
        )
        self.sim.schedule(
            lambda: self._expire(agreement.agreement_id),
            "broker",
            request.window[1] - self.sim.now,
        )
        return agreement

    def _reject(self, request: ReservationRequest, reason: str,
                predicted: Optional[float]) -> Rejection:
        self.sim.record(
            "broker",
            {
                "event": "agreement_rejected",
                "request": request.request_id,
                "reason": reason,
                "predicted_availability": predicted,
            },
        )
        return Rejection(request, reason, predicted)

    def _pre_deploy(self, agreement_id: str) -> None:
        agreement = self.agreements.get(agreement_id)
        if agreement is None or agreement.state != ACTIVE:
            return
        request = agreement.request
        for i, (node_id, eid) in enumerate(agreement.reserved):
            if eid is not None:
                continue
            try:
                new_eid = self.deploy_fn(node_id, request.cloudlet_id, request.demand)
            except Exception as exc:  # best effort: reservation kept, slot empty
                self.sim.record(
                    "broker",
                    {
                        "event": "pre_deploy_failed",
                        "agreement": agreement_id,
                        "node": node_id,
                        "error": type(exc).__name__,
                    },
                )
                continue
            agreement.reserved[i] = (node_id, new_eid)
            self.sim.record(
                "broker",
                {
                    "event": "agreement_element",
                    "agreement": agreement_id,
                    "node": node_id,
                    "element": new_eid,
                },
            )

    # -- lifecycle end ----------------------------------------------------------

    def release(self, agreement_id: str) -> None:
        agreement = self.agreements.get(agreement_id)
        if agreement is None or agreement.state != ACTIVE:
            raise UnknownAgreement(f"no active agreement {agreement_id}")
        self._close(agreement, RELEASED)

    def _expire(self, agreement_id: str) -> None:
        agreement = self.agreements.get(agreement_id)
        if agreement is None or agreement.state != ACTIVE:
            return
        self._close(agreement, EXPIRED)

    def _close(self, agreement: Agreement, state: str) -> None:
        agreement.state = state
        self.calendar.remove_agreement(agreement.agreement_id)
        # pre-deployed elements are handed over: they stay cloudlet members
        # and the adaptation loop decides whether to retain or remove them
        self.sim.record(
            "broker",
            {
                "event": "agreement_released" if state == RELEASED else "agreement_expired",
                "agreement": agreement.agreement_id,
                "elements": agreement.reserved_elements(),
            },
        )

    def reserved_element_ids(self) -> set[str]:
        out = set()
        for agreement in self.agreements.values():
            if agreement.state == ACTIVE:
                out.update(agreement.reserved_elements())
        return out


class Dispatcher:
    """Routes service requests: reserved elements first, best effort otherwise."""

    def __init__(self, sim: Simulator, cloudlets: dict[str, CloudletRuntime],
                 broker: Optional[Broker] = None):
        self.sim = sim
        self.cloudlets = cloudlets
        self.broker = broker

    def dispatch(self, cloudlet_id: str, t: int, agreement_id: Optional[str] = None) -> str:
        runtime = self.cloudlets[cloudlet_id]
        if agreement_id is not None:
            agreement = (
                self.broker.agreements.get(agreement_id) if self.broker else None
            )
            if agreement is None or agreement.state != ACTIVE:
                self.sim.record(
                    "dispatcher",
                    {"event": "unknown_agreement", "agreement": agreement_id},
                )
            else:
                for eid in agreement.reserved_elements():
                    el = runtime.elements.get(eid)
                    if el is not None and el.is_serving():
                        return eid
        el = runtime.best_effort_pick()
        return el.element_id
