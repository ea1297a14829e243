"""Flow exporter at the ingress observation point and the collector on VM2.

The exporter keeps one live record per 5-tuple and seals it on inactive or
active timeout. Independently, the collector slices the mirrored packet
metadata into tumbling detector windows so features describe exactly the
packets seen inside a window. Payload tags never reach either structure.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, NamedTuple

from .engine import SimTime, seconds
from .eventlog import EventLog
from .netmodel import Packet, Protocol, device_for_ip, ip_str

RECORD_BYTES = 48
DEFAULT_ACTIVE_TIMEOUT = seconds(60)
DEFAULT_INACTIVE_TIMEOUT = seconds(15)
DEFAULT_WINDOW = seconds(5)

FEATURE_NAMES = (
    "flow_count",
    "total_packets",
    "total_bytes",
    "mean_packet_size",
    "distinct_dst_ports",
    "fraction_udp",
)


class FlowKey(NamedTuple):
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: Protocol


@dataclass(slots=True)
class FlowRecord:
    key: FlowKey
    packet_count: int
    byte_count: int
    first_seen: SimTime
    last_seen: SimTime
    src_device: int

    def dump_line(self) -> str:
        k = self.key
        return (f"{self.first_seen} {self.last_seen} {ip_str(k.src_ip)} {ip_str(k.dst_ip)} "
                f"{k.src_port} {k.dst_port} {k.protocol.value} {self.packet_count} {self.byte_count}")


FLOW_DUMP_HEADER = ("# first_seen_us last_seen_us src_ip dst_ip src_port dst_port "
                    "protocol packets bytes")


@dataclass(frozen=True)
class FeatureVector:
    src_ip: int
    window_start: SimTime
    window_end: SimTime
    flow_count: int
    total_packets: int
    total_bytes: int
    mean_packet_size: float
    distinct_dst_ports: int
    fraction_udp: float
    dst_ports: tuple[int, ...] = ()

    @property
    def device(self) -> int:
        return device_for_ip(self.src_ip)

    @property
    def pps(self) -> float:
        return self.total_packets * 1_000_000 / (self.window_end - self.window_start)

    def values(self) -> tuple[float, ...]:
        return tuple(float(getattr(self, name)) for name in FEATURE_NAMES)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dst_ports"] = list(self.dst_ports)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVector":
        d = dict(d)
        d["dst_ports"] = tuple(d.get("dst_ports", ()))
        return cls(**d)


# per window: flow key -> [packets, bytes]
SliceTable = dict[FlowKey, list[int]]


def features_from_slices(slices: Iterable[tuple[FlowKey, int, int]],
                         window_start: SimTime, window_end: SimTime) -> list[FeatureVector]:
    """Aggregate (key, packets, bytes) slices into one vector per source IP."""
    by_src: dict[int, list[tuple[FlowKey, int, int]]] = defaultdict(list)
    for key, pkts, nbytes in slices:
        if pkts > 0:
            by_src[key.src_ip].append((key, pkts, nbytes))
    vectors = []
    for src in sorted(by_src):
        rows = by_src[src]
        flows = {key for key, _, _ in rows}
        packets = sum(p for _, p, _ in rows)
        nbytes = sum(b for _, _, b in rows)
        udp = sum(p for key, p, _ in rows if key.protocol is Protocol.UDP)
        ports = tuple(sorted({key.dst_port for key in flows}))
        vectors.append(FeatureVector(
            src_ip=src,
            window_start=window_start,
            window_end=window_end,
            flow_count=len(flows),
            total_packets=packets,
            total_bytes=nbytes,
            mean_packet_size=nbytes / packets,
            distinct_dst_ports=len(ports),
            fraction_udp=udp / packets,
            dst_ports=ports,
        ))
    return vectors


class FlowPipe:
    def __init__(self, log: EventLog | None = None,
                 active_timeout: SimTime = DEFAULT_ACTIVE_TIMEOUT,
                 inactive_timeout: SimTime = DEFAULT_INACTIVE_TIMEOUT,
                 window: SimTime = DEFAULT_WINDOW):
        if min(active_timeout, inactive_timeout, window) <= 0:
            raise ValueError("timeouts and window must be positive")
        self.log = log
        self.active_timeout = active_timeout
        self.inactive_timeout = inactive_timeout
        self.window = window
        self.live: dict[FlowKey, FlowRecord] = {}
        self.sealed: list[FlowRecord] = []
        self.slices: dict[int, SliceTable] = defaultdict(dict)
        self.observed_packets = 0
        self.observed_bytes = 0

    def observe(self, packet: Packet) -> None:
        key = FlowKey(packet.src_ip, packet.dst_ip, packet.src_port, packet.dst_port,
                      packet.protocol)
        ts = packet.ts
        length = packet.length
        rec = self.live.get(key)
        if rec is None:
            self.live[key] = FlowRecord(key, 1, length, ts, ts, packet.src_device)
        else:
            rec.packet_count += 1
            rec.byte_count += length
            rec.last_seen = ts
        table = self.slices[ts // self.window]
        cell = table.get(key)
        if cell is None:
            table[key] = [1, length]
        else:
            cell[0] += 1
            cell[1] += length
        self.observed_packets += 1
        self.observed_bytes += length

    def _seal(self, rec: FlowRecord, now: SimTime, why: str) -> None:
        self.sealed.append(rec)
        if self.log is not None:
            k = rec.key
            self.log.emit(now, "flowpipe", "export", dev=rec.src_device, sp=k.src_port,
                          dp=k.dst_port, pr=k.protocol, pkts=rec.packet_count,
                          bytes=rec.byte_count, first=rec.first_seen, last=rec.last_seen,
                          why=why)

    def expire_flows(self, now: SimTime) -> list[FlowRecord]:
        expired = []
        for key, rec in list(self.live.items()):
            if now - rec.last_seen >= self.inactive_timeout:
                why = "idle"
            elif now - rec.first_seen >= self.active_timeout:
                why = "active"
            else:
                continue
            del self.live[key]
            self._seal(rec, now, why)
            expired.append(rec)
        return expired

    def flush_device(self, device: int, now: SimTime) -> list[FlowRecord]:
        flushed = [rec for rec in self.live.values() if rec.src_device == device]
        for rec in flushed:
            del self.live[rec.key]
            self._seal(rec, now, "drop")
        return flushed

    def flush_all(self, now: SimTime) -> list[FlowRecord]:
        flushed = list(self.live.values())
        self.live.clear()
        for rec in flushed:
            self._seal(rec, now, "end")
        return flushed

    def build_features(self, window_start: SimTime, window_end: SimTime) -> list[FeatureVector]:
        if window_start % self.window or window_end % self.window or window_end <= window_start:
            raise ValueError("feature windows must align with the collector window")
        rows: list[tuple[FlowKey, int, int]] = []
        for index in range(window_start // self.window, window_end // self.window):
            table = self.slices.get(index)
            if table:
                rows.extend((key, cell[0], cell[1]) for key, cell in table.items())
        return features_from_slices(rows, window_start, window_end)

    def discard_before(self, t: SimTime) -> None:
        for index in [i for i in self.slices if (i + 1) * self.window <= t]:
            del self.slices[index]

    def export_ratio_report(self) -> dict[str, float]:
        records = len(self.sealed)
        return {
            "records": records,
            "packet_ratio": records / self.observed_packets if self.observed_packets else 0.0,
            "byte_ratio": (records * RECORD_BYTES / self.observed_bytes
                           if self.observed_bytes else 0.0),
        }
