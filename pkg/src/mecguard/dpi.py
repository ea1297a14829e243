"""Deep packet inspection on the isolation VM (VM4, or VM4a when split)."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .engine import SimTime
from .eventlog import EventLog
from .netmodel import Packet, PayloadTag

DEFAULT_ATTACK_MATCHES = 3
DEFAULT_CLEAR_PACKETS = 200


class Decision(str, Enum):
    ATTACK = "Attack"
    CLEARED = "Cleared"
    UNDECIDED = "Undecided"


class VmUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class Signature:
    id: str
    tags: frozenset[PayloadTag]
    dst_ports: frozenset[int] | None = None

    def __post_init__(self) -> None:
        if not self.tags:
            raise ValueError(f"signature {self.id} matches no payload tag")

    def matches(self, packet: Packet) -> bool:
        if packet.payload_tag not in self.tags:
            return False
        return self.dst_ports is None or packet.dst_port in self.dst_ports


def default_signatures() -> list[Signature]:
    return [
        Signature("flood-payload", frozenset({PayloadTag.ATTACK_SIGNATURE})),
        Signature("cnc-beacon", frozenset({PayloadTag.CNC_BEACON}), frozenset({4444})),
    ]


@dataclass
class DpiVerdict:
    device: int
    decision: Decision
    evidence: list[tuple[str, int]]
    decided_at: SimTime
    inspected: int = 0

    def __post_init__(self) -> None:
        if self.decision is Decision.ATTACK and not self.evidence:
            raise ValueError("an Attack verdict needs evidence")


@dataclass
class _DeviceState:
    inspected: int = 0
    matched: int = 0
    by_signature: dict[str, int] = field(default_factory=dict)


class DpiEngine:
    """Per-device counters on each inspecting VM, with one decision per device.

    Counters live in VM memory and vanish when that VM crashes; decisions
    already taken are kept by the platform manager and survive.
    """

    def __init__(self, signatures: list[Signature],
                 attack_match_threshold: int = DEFAULT_ATTACK_MATCHES,
                 clear_min_packets: int = DEFAULT_CLEAR_PACKETS,
                 log: EventLog | None = None,
                 is_running: Callable[[str], bool] | None = None,
                 on_verdict: Callable[[DpiVerdict], None] | None = None):
        if not signatures:
            raise ValueError("signature set must be non-empty")
        if attack_match_threshold < 1 or clear_min_packets < 1:
            raise ValueError("DPI thresholds must be >= 1")
        self.signatures = signatures
        self.attack_match_threshold = attack_match_threshold
        self.clear_min_packets = clear_min_packets
        self.log = log
        self.is_running = is_running
        self.on_verdict = on_verdict
        self.state: dict[str, dict[int, _DeviceState]] = {}
        self.decided: dict[int, DpiVerdict] = {}

    def inspect(self, vm: str, packet: Packet) -> DpiVerdict | None:
        if self.is_running is not None and not self.is_running(vm):
            raise VmUnavailable(vm)
        dev = packet.src_device
        if dev in self.decided:
            return None
        st = self.state.setdefault(vm, {}).get(dev)
        if st is None:
            st = self.state[vm][dev] = _DeviceState()
        st.inspected += 1
        for sig in self.signatures:
            if sig.matches(packet):
                st.matched += 1
                st.by_signature[sig.id] = st.by_signature.get(sig.id, 0) + 1
                break
        if st.matched >= self.attack_match_threshold:
            decision = Decision.ATTACK
        elif st.matched == 0 and st.inspected >= self.clear_min_packets:
            decision = Decision.CLEARED
        else:
            return None
        verdict = DpiVerdict(dev, decision, sorted(st.by_signature.items()), packet.ts,
                             st.inspected)
        self.decided[dev] = verdict
        self.state[vm].pop(dev, None)
        self.report_verdict(verdict)
        return verdict

    def report_verdict(self, verdict: DpiVerdict) -> None:
        if self.log is not None:
            evidence = [f"{sid}:{n}" for sid, n in verdict.evidence]
            self.log.emit(verdict.decided_at, "dpi", "dpi-verdict", dev=verdict.device,
                          decision=verdict.decision, inspected=verdict.inspected,
                          evidence=evidence)
        if self.on_verdict is not None:
            self.on_verdict(verdict)

    def reset_vm(self, vm: str) -> None:
        self.state.pop(vm, None)

    def undecided(self, devices) -> list[int]:
        return sorted(d for d in devices if d not in self.decided)
