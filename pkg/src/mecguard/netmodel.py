"""UEs, the gNB ingress point and per-device traffic steering."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

from .engine import SimTime
from .eventlog import EventLog

SERVICE_IP = 0x0AFF0001  # 10.255.0.1, the MEC application address
_DEVICE_NET = 0x0A010000  # devices live in 10.1.0.0/16

MIN_PACKET = 20
MAX_PACKET = 65535


class Profile(str, Enum):
    LEGITIMATE = "Legitimate"
    BOT = "Bot"
    ATTACKER_DIRECT = "AttackerDirect"


class Protocol(str, Enum):
    TCP = "TCP"
    UDP = "UDP"
    ICMP = "ICMP"


class PayloadTag(str, Enum):
    NORMAL = "Normal"
    ATTACK_SIGNATURE = "AttackSignature"
    CNC_BEACON = "CncBeacon"


class Target(str, Enum):
    VM1 = "VM1"
    VM4 = "VM4"
    VM4A = "VM4a"
    VM4B = "VM4b"
    DROP = "Drop"


class Outcome(str, Enum):
    SERVED = "served"
    INSPECTED = "inspected"  # examined on a DPI-only VM, not served
    DEGRADED = "degraded"  # dropped at the VM for lack of cpu
    LOST = "lost"  # target VM not running, or device held during recovery
    DROPPED = "dropped"  # blocked at ingress


class DuplicateDevice(ValueError):
    pass


class UnknownDevice(KeyError):
    pass


class ForbiddenTransition(ValueError):
    pass


ALLOWED_TRANSITIONS = frozenset({
    (Target.VM1, Target.VM4),
    (Target.VM1, Target.VM4A),
    (Target.VM4A, Target.VM4B),
    (Target.VM4A, Target.DROP),
    (Target.VM4, Target.DROP),
    # baseline architecture blocks attackers straight from VM1
    (Target.VM1, Target.DROP),
})


def device_ip(device_id: int) -> int:
    return _DEVICE_NET + device_id


def device_for_ip(ip: int) -> int:
    return ip - _DEVICE_NET


def ip_str(ip: int) -> str:
    return ".".join(str((ip >> s) & 0xFF) for s in (24, 16, 8, 0))


@dataclass(frozen=True)
class Device:
    id: int
    profile: Profile
    attach_time: SimTime = 0

    @property
    def ip(self) -> int:
        return device_ip(self.id)

    @property
    def ground_truth_malicious(self) -> bool:
        return self.profile is not Profile.LEGITIMATE


@dataclass(slots=True)
class Packet:
    ts: SimTime
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: Protocol
    length: int
    payload_tag: PayloadTag
    src_device: int
    # ground truth only: whether this flood packet can crash the serving VM
    crash_payload: bool = False

    def __post_init__(self) -> None:
        if not MIN_PACKET <= self.length <= MAX_PACKET:
            raise ValueError(f"packet length {self.length} outside [20, 65535]")


class RoutingTable:
    """Current target per device plus the full target history."""

    def __init__(self) -> None:
        self._target: dict[int, Target] = {}
        self.history: dict[int, list[Target]] = {}

    def add(self, device: int) -> None:
        self._target[device] = Target.VM1
        self.history[device] = [Target.VM1]

    def __contains__(self, device: int) -> bool:
        return device in self._target

    def __getitem__(self, device: int) -> Target:
        try:
            return self._target[device]
        except KeyError:
            raise UnknownDevice(device) from None

    def set(self, device: int, target: Target) -> Target:
        current = self[device]
        if (current, target) not in ALLOWED_TRANSITIONS:
            raise ForbiddenTransition(f"device {device}: {current.value} -> {target.value}")
        self._target[device] = target
        self.history[device].append(target)
        return current

    def devices_on(self, target: Target) -> list[int]:
        return sorted(d for d, t in self._target.items() if t is target)


# returns how the VM handled the packet
Sink = Callable[[Packet], Outcome]


class Network:
    """Ingress (gNB) for all devices: steering, mirroring to the flow exporter."""

    def __init__(self, log: EventLog, clock: Callable[[], SimTime]):
        self.log = log
        self._clock = clock
        self.devices: dict[int, Device] = {}
        self.routing = RoutingTable()
        self.held: set[int] = set()
        self.sinks: dict[Target, Sink] = {}
        self.observers: list[Callable[[Packet], None]] = []
        self.drop_listeners: list[Callable[[int], None]] = []

    def attach_device(self, device: Device) -> None:
        if device.id in self.devices:
            raise DuplicateDevice(device.id)
        self.devices[device.id] = device
        self.routing.add(device.id)
        self.log.emit(self._clock(), "netmodel", "attach", dev=device.id,
                      profile=device.profile, ip=ip_str(device.ip),
                      mal=device.ground_truth_malicious)

    def deliver(self, packet: Packet) -> tuple[Outcome, Target]:
        dev = packet.src_device
        target = self.routing[dev]
        lines = self.log.lines
        # the packet line goes before anything its processing logs (verdicts, crashes)
        position = len(lines)
        if target is Target.DROP:
            outcome = Outcome.DROPPED
        else:
            for observe in self.observers:
                observe(packet)
            if dev in self.held:
                outcome = Outcome.LOST
            else:
                outcome = self.sinks[target](packet)
        line = (f"{packet.ts} netmodel pkt dev={dev} sp={packet.src_port} dp={packet.dst_port} "
                f"pr={packet.protocol.value} len={packet.length} tag={packet.payload_tag.value} "
                f"to={target.value} out={outcome.value}")
        if len(lines) == position:
            lines.append(line)
        else:
            lines.insert(position, line)
        return outcome, target

    def reroute(self, device: int, target: Target, reason: str = "") -> None:
        previous = self.routing.set(device, target)
        self.held.discard(device)
        self.log.emit(self._clock(), "netmodel", "reroute", dev=device,
                      src=previous, dst=target, why=reason or "-")
        if target is Target.DROP:
            for listener in self.drop_listeners:
                listener(device)

    def hold(self, device: int) -> None:
        """Suspend delivery for a device without changing its target."""
        if device not in self.routing:
            raise UnknownDevice(device)
        if device not in self.held:
            self.held.add(device)
            self.log.emit(self._clock(), "netmodel", "hold", dev=device,
                          at=self.routing[device])

    def readmit(self, device: int) -> None:
        if device in self.held:
            self.held.discard(device)
            self.log.emit(self._clock(), "netmodel", "readmit", dev=device,
                          at=self.routing[device])
