"""Legitimate workloads and botnet attack traffic as packet-arrival events."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .engine import US_PER_S, Engine, EventKind, SimTime
from .netmodel import (
    SERVICE_IP,
    Device,
    Network,
    Packet,
    PayloadTag,
    Profile,
    Protocol,
    UnknownDevice,
)

BEACON_LENGTH = 64
DEFAULT_CNC_PORT = 4444
_PROTO_INDEX = {Protocol.TCP: 0, Protocol.UDP: 1, Protocol.ICMP: 2}


class InvalidWindow(ValueError):
    pass


@dataclass(frozen=True)
class LengthDist:
    kind: str  # "constant" or "uniform"
    a: int
    b: int | None = None

    def __post_init__(self) -> None:
        if self.kind == "constant":
            if not 20 <= self.a <= 65535:
                raise ValueError("constant length must be in [20, 65535]")
        elif self.kind == "uniform":
            if self.b is None or not 20 <= self.a <= self.b <= 65535:
                raise ValueError("uniform length needs 20 <= a <= b <= 65535")
        else:
            raise ValueError(f"unknown length distribution {self.kind!r}")

    @classmethod
    def constant(cls, n: int) -> "LengthDist":
        return cls("constant", n)

    @classmethod
    def uniform(cls, a: int, b: int) -> "LengthDist":
        return cls("uniform", a, b)

    def draw(self, rng) -> int:
        if self.kind == "constant":
            return self.a
        return rng.randint(self.a, self.b)

    @property
    def mean(self) -> float:
        return self.a if self.kind == "constant" else (self.a + self.b) / 2


@dataclass(frozen=True)
class WorkloadProfile:
    name: str
    packet_rate: Fraction
    length_dist: LengthDist
    protocol_mix: dict[Protocol, float]
    dst_port_set: tuple[int, ...]
    payload_tag: PayloadTag = PayloadTag.NORMAL

    def __post_init__(self) -> None:
        if self.packet_rate <= 0:
            raise ValueError(f"workload {self.name}: packet_rate must be positive")
        weights = list(self.protocol_mix.values())
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            raise ValueError(f"workload {self.name}: protocol weights must sum to 1")
        if not self.dst_port_set or any(not 0 <= p <= 65535 for p in self.dst_port_set):
            raise ValueError(f"workload {self.name}: dst ports must be 16-bit and non-empty")
        if self.payload_tag is not PayloadTag.NORMAL:
            raise ValueError("workloads only carry Normal payloads")


@dataclass(frozen=True)
class AttackScript:
    start: SimTime
    stop: SimTime
    bot_count: int
    flood_rate_per_bot: Fraction
    flood_tag: PayloadTag = PayloadTag.ATTACK_SIGNATURE
    beacon_period: SimTime | None = None
    beacon_lead: SimTime = 0
    crash_payload: bool = False
    profile: Profile = Profile.BOT
    flood_port: int = 80
    flood_protocol: Protocol = Protocol.UDP
    flood_length: int = 64
    cnc_port: int = DEFAULT_CNC_PORT
    device_ids: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.start >= self.stop:
            raise InvalidWindow(f"attack window [{self.start}, {self.stop}) is empty")
        if self.bot_count < 1:
            raise ValueError("bot_count must be >= 1")
        if self.flood_rate_per_bot <= 0:
            raise ValueError("flood_rate_per_bot must be positive")
        if self.beacon_period is not None and self.beacon_period <= 0:
            raise ValueError("beacon_period must be positive")
        if self.beacon_lead < 0 or self.beacon_lead > self.start:
            raise ValueError("beacon_lead must be within [0, start]")
        if self.profile is Profile.LEGITIMATE:
            raise ValueError("attack devices cannot be Legitimate")
        if self.device_ids and len(self.device_ids) != self.bot_count:
            raise ValueError("device_ids must list exactly bot_count ids")

    @property
    def attach_time(self) -> SimTime:
        return self.start - self.beacon_lead

    def beacon_times(self, index: int) -> list[SimTime]:
        if self.beacon_period is None:
            return []
        n = self.beacon_lead // self.beacon_period
        offset = index * self.beacon_period // self.bot_count
        first = self.start - self.beacon_lead + offset
        return [first + k * self.beacon_period for k in range(n)]


def ephemeral_port(device: int, dst_port: int, protocol: Protocol) -> int:
    if protocol is Protocol.ICMP:
        return 0
    return 49152 + (device * 131 + dst_port * 7 + _PROTO_INDEX[protocol]) % 16384


class TrafficGenerator:
    def __init__(self, engine: Engine, network: Network,
                 send: Callable[[Packet], object] | None = None):
        self.engine = engine
        self.network = network
        self.send = send or network.deliver
        self.generated = 0

    def spawn_workload(self, device: int, profile: WorkloadProfile,
                       start: SimTime | None = None, stop: SimTime | None = None) -> None:
        """Poisson arrivals for one device from ``start`` (default: now) until ``stop``."""
        if device not in self.network.devices:
            raise UnknownDevice(device)
        rng = self.engine.rng.stream(f"trafficgen/{device}")
        rate = float(profile.packet_rate)
        protocols = list(profile.protocol_mix)
        weights = [profile.protocol_mix[p] for p in protocols]
        ports = profile.dst_port_set
        ip = self.network.devices[device].ip
        draw_length = profile.length_dist.draw
        engine = self.engine

        def next_gap() -> SimTime:
            return round(rng.expovariate(rate) * US_PER_S)

        def fire(event) -> None:
            proto = protocols[0] if len(protocols) == 1 else rng.choices(protocols, weights)[0]
            dport = ports[0] if len(ports) == 1 else ports[rng.randrange(len(ports))]
            packet = Packet(event.fire_at, ip, SERVICE_IP, ephemeral_port(device, dport, proto),
                            dport, proto, draw_length(rng), PayloadTag.NORMAL, device)
            self.generated += 1
            self.send(packet)
            t = event.fire_at + next_gap()
            if stop is None or t < stop:
                engine.schedule(t, EventKind.PACKET_ARRIVAL, callback=fire)

        first = (engine.now if start is None else start) + next_gap()
        if stop is None or first < stop:
            engine.schedule(first, EventKind.PACKET_ARRIVAL, callback=fire)

    def launch_attack(self, script: AttackScript, first_device_id: int = 0) -> list[int]:
        """Schedule attachment, C&C beacons and the flood for every bot.

        Bots are attached at ``start - beacon_lead`` unless already attached.
        Returns the device ids used.
        """
        ids = list(script.device_ids) or [first_device_id + i for i in range(script.bot_count)]
        period = Fraction(US_PER_S) / Fraction(script.flood_rate_per_bot)
        for index, dev in enumerate(ids):
            known = self.network.devices.get(dev)
            if known is not None and not known.ground_truth_malicious:
                raise ValueError(f"device {dev} is legitimate and cannot join an attack")
            if known is None:
                self.engine.schedule(script.attach_time, EventKind.SCENARIO_DIRECTIVE,
                                     payload=("attach", dev),
                                     callback=self._attach_cb(dev, script.profile))
            for t in script.beacon_times(index):
                self.engine.schedule(t, EventKind.PACKET_ARRIVAL,
                                     callback=self._beacon_cb(dev, script))
            self._schedule_flood(dev, index, script, period)
        return ids

    def _attach_cb(self, dev: int, profile: Profile):
        def attach(event) -> None:
            if dev not in self.network.devices:
                self.network.attach_device(Device(dev, profile, event.fire_at))
        return attach

    def _beacon_cb(self, dev: int, script: AttackScript):
        def beacon(event) -> None:
            packet = Packet(event.fire_at, self.network.devices[dev].ip, SERVICE_IP,
                            ephemeral_port(dev, script.cnc_port, Protocol.UDP),
                            script.cnc_port, Protocol.UDP, BEACON_LENGTH,
                            PayloadTag.CNC_BEACON, dev)
            self.generated += 1
            self.send(packet)
        return beacon

    def _schedule_flood(self, dev: int, index: int, script: AttackScript, period: Fraction) -> None:
        engine = self.engine
        num, den = period.numerator, period.denominator
        base = script.start + (index * num) // (den * script.bot_count)
        sport = ephemeral_port(dev, script.flood_port, script.flood_protocol)
        k = 0

        def fire(event) -> None:
            nonlocal k
            packet = Packet(event.fire_at, self.network.devices[dev].ip, SERVICE_IP, sport,
                            script.flood_port, script.flood_protocol, script.flood_length,
                            script.flood_tag, dev, script.crash_payload)
            self.generated += 1
            self.send(packet)
            k += 1
            t = base + (k * num) // den
            if t < script.stop:
                engine.schedule(t, EventKind.PACKET_ARRIVAL, callback=fire)

        if base < script.stop:
            engine.schedule(base, EventKind.PACKET_ARRIVAL, callback=fire)
