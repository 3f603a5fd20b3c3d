"""Simulated message passing: latency draws, loss on dead endpoints,
and quorum fan-out rounds.

All latencies come from the shared "net" stream so message traffic never
perturbs churn or workload draws.
"""

from __future__ import annotations

from typing import Any, Callable, Optional

from .infrastructure import CloudElement
from .kernel import Dist, Simulator, draw_ms

DEFAULT_LATENCY = Dist.uniform(5, 50)
DEFAULT_OP_TIMEOUT_MS = 2000


class Network:
    def __init__(self, sim: Simulator, latency: Dist = DEFAULT_LATENCY):
        self.sim = sim
        self.latency = latency
        self._stream = sim.stream("net")

    def delay(self) -> int:
        return draw_ms(self._stream, self.latency)

    def max_latency_ms(self) -> float:
        return self.latency.max_value()

    def send(self, target: str, action: Callable[[], None], extra_delay: int = 0) -> None:
        """Deliver to an always-reachable (harness-hosted) component."""
        self.sim.schedule(action, target, self.delay() + extra_delay)

    def send_to_element(
        self,
        element: CloudElement,
        on_deliver: Callable[[], None],
        on_drop: Optional[Callable[[], None]] = None,
        extra_delay: int = 0,
    ) -> None:
        """Deliver to an element; dropped if it is not serving at delivery time."""

        def deliver():
            if element.is_serving():
                on_deliver()
            elif on_drop is not None:
                on_drop()

        self.sim.schedule(
            deliver, f"element:{element.element_id}", self.delay() + extra_delay
        )


class Round:
    """Fan-out to target elements, collect replies until quorum or timeout.

    on_element runs against a live element at request delivery and its return
    value travels back as the reply. Exactly one of on_success/on_failure
    fires; both receive the replies gathered so far.
    """

    def __init__(
        self,
        net: Network,
        targets: list[CloudElement],
        on_element: Callable[[CloudElement], Any],
        quorum: int,
        timeout_ms: int,
        on_success: Callable[[dict], None],
        on_failure: Callable[[dict], None],
        on_late: Optional[Callable[[str, Any], None]] = None,
    ):
        self.net = net
        self.targets = targets
        self.on_element = on_element
        self.quorum = quorum
        self.on_success = on_success
        self.on_failure = on_failure
        self.on_late = on_late
        self.replies: dict[str, Any] = {}
        self.done = False
        self._timeout_handle = net.sim.schedule(
            self._timed_out, "round:timeout", timeout_ms
        )
        for el in targets:
            self._request(el)
        self._check()  # quorum of zero completes immediately

    def _request(self, el: CloudElement) -> None:
        def deliver():
            result = self.on_element(el)
            self.net.send(f"round:reply:{el.element_id}", lambda: self._collect(el.element_id, result))

        self.net.send_to_element(el, deliver)

    def _collect(self, eid: str, result: Any) -> None:
        if self.done:
            if self.on_late is not None:
                self.on_late(eid, result)
            return
        self.replies[eid] = result
        self._check()

    def _check(self) -> None:
        if not self.done and len(self.replies) >= self.quorum:
            self.done = True
            self.net.sim.cancel(self._timeout_handle)
            self.on_success(dict(self.replies))

    def _timed_out(self) -> None:
        if not self.done:
            self.done = True
            self.on_failure(dict(self.replies))


class OpHandle:
    """Async operation outcome: result or error, filled at completion time."""

    def __init__(self, kind: str):
        self.kind = kind
        self.done = False
        self.result: Any = None
        self.error: Optional[Exception] = None
        self.completed_at: Optional[int] = None
        self._callbacks: list[Callable[["OpHandle"], None]] = []

    def on_complete(self, cb: Callable[["OpHandle"], None]) -> "OpHandle":
        if self.done:
            cb(self)
        else:
            self._callbacks.append(cb)
        return self

    def _finish(self, at: int, result: Any = None, error: Optional[Exception] = None) -> None:
        if self.done:
            return
        self.done = True
        self.result = result
        self.error = error
        self.completed_at = at
        for cb in self._callbacks:
            cb(self)

    def ok(self) -> bool:
        return self.done and self.error is None
