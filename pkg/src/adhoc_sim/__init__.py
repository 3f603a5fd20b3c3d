"""Deterministic discrete-event simulator for ad hoc clouds: cloudlets of
cloud elements harvested from non-dedicated, churning machines, with
non-intrusiveness enforcement, QoS brokering, and autonomic adaptation."""

__version__ = "0.1.0"
