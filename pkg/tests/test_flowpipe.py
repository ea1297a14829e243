import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecguard.engine import seconds
from mecguard.eventlog import EventLog
from mecguard.flowpipe import (
    FEATURE_NAMES,
    RECORD_BYTES,
    FeatureVector,
    FlowKey,
    FlowPipe,
    features_from_slices,
)
from mecguard.netmodel import SERVICE_IP, Packet, PayloadTag, Protocol, device_ip


def pkt(ts, dev=1, sport=50000, dport=80, proto=Protocol.TCP, length=100,
        tag=PayloadTag.NORMAL):
    return Packet(ts, device_ip(dev), SERVICE_IP, sport, dport, proto, length, tag, dev)


def test_packets_aggregate_per_five_tuple():
    fp = FlowPipe(EventLog())
    for i in range(5):
        fp.observe(pkt(i * 1000))
    fp.observe(pkt(6000, dport=443))
    assert len(fp.live) == 2
    fp.flush_all(10_000)
    recs = sorted(fp.sealed, key=lambda r: r.key.dst_port)
    assert [(r.packet_count, r.byte_count) for r in recs] == [(5, 500), (1, 100)]
    assert recs[0].first_seen == 0 and recs[0].last_seen == 4000


def test_inactive_and_active_timeouts():
    log = EventLog()
    fp = FlowPipe(log, active_timeout=seconds(60), inactive_timeout=seconds(15))
    fp.observe(pkt(0, dev=1))
    assert fp.expire_flows(seconds(14)) == []
    [idle] = fp.expire_flows(seconds(15))
    assert idle.packet_count == 1
    for s in range(0, 70):
        fp.expire_flows(seconds(s))
        fp.observe(pkt(seconds(s), dev=2))
    active = [r for r in fp.sealed if r.src_device == 2]
    assert len(active) == 1 and active[0].packet_count == 60
    assert "why=idle" in log.lines[0] and "why=active" in log.lines[1]


def test_payload_tags_do_not_split_flows():
    fp = FlowPipe()
    fp.observe(pkt(0, tag=PayloadTag.NORMAL))
    fp.observe(pkt(1, tag=PayloadTag.ATTACK_SIGNATURE))
    assert len(fp.live) == 1


def test_features_for_a_window():
    fp = FlowPipe(window=seconds(5))
    fp.observe(pkt(seconds(1), dport=80, length=100))
    fp.observe(pkt(seconds(2), dport=80, length=300))
    fp.observe(pkt(seconds(3), dport=53, proto=Protocol.UDP, length=200))
    fp.observe(pkt(seconds(6), dport=80, length=999))  # next window
    [fv] = fp.build_features(0, seconds(5))
    assert fv.device == 1
    assert (fv.flow_count, fv.total_packets, fv.total_bytes) == (2, 3, 600)
    assert fv.mean_packet_size == 200
    assert fv.distinct_dst_ports == 2 and fv.dst_ports == (53, 80)
    assert fv.fraction_udp == pytest.approx(1 / 3)
    assert fv.pps == pytest.approx(0.6)
    with pytest.raises(ValueError):
        fp.build_features(1, seconds(5))


def test_feature_vector_json_round_trip():
    fv = FeatureVector(device_ip(3), 0, 5, 1, 2, 3, 1.5, 1, 0.0, (80,))
    assert FeatureVector.from_dict(fv.to_dict()) == fv
    assert len(fv.values()) == len(FEATURE_NAMES)


def test_export_ratio_report():
    fp = FlowPipe()
    for i in range(100):
        fp.observe(pkt(i, length=1000))
    fp.flush_all(1000)
    rep = fp.export_ratio_report()
    assert rep["records"] == 1
    assert rep["packet_ratio"] == pytest.approx(0.01)
    assert rep["byte_ratio"] == pytest.approx(RECORD_BYTES / 100_000)


def test_flush_device_seals_only_that_device():
    fp = FlowPipe()
    fp.observe(pkt(0, dev=1))
    fp.observe(pkt(0, dev=2))
    assert [r.src_device for r in fp.flush_device(2, 5)] == [2]
    assert [k.src_ip for k in fp.live] == [device_ip(1)]


packets = st.lists(
    st.tuples(st.integers(0, seconds(40)), st.integers(1, 4), st.sampled_from([80, 443, 53]),
              st.sampled_from(list(Protocol)), st.integers(20, 1500)),
    max_size=200,
)


@settings(max_examples=100, deadline=None)
@given(packets)
def test_flow_records_conserve_packets_and_bytes(rows):
    fp = FlowPipe(active_timeout=seconds(7), inactive_timeout=seconds(3), window=seconds(5))
    rows = sorted(rows)
    windows = []
    for ts, dev, dport, proto, length in rows:
        fp.expire_flows(ts)
        fp.observe(pkt(ts, dev=dev, dport=dport, proto=proto, length=length))
    for k in range(0, 9):
        windows.extend(fp.build_features(k * seconds(5), (k + 1) * seconds(5)))
    fp.flush_all(seconds(50))
    assert sum(r.packet_count for r in fp.sealed) == len(rows)
    assert sum(r.byte_count for r in fp.sealed) == sum(r[4] for r in rows)
    # windows partition the packets too
    assert sum(fv.total_packets for fv in windows) == len(rows)
    assert sum(fv.total_bytes for fv in windows) == sum(r[4] for r in rows)
    for rec in fp.sealed:
        assert rec.last_seen - rec.first_seen < seconds(7)


def test_features_from_slices_ignores_empty_cells():
    key = FlowKey(device_ip(1), SERVICE_IP, 1, 80, Protocol.TCP)
    assert features_from_slices([(key, 0, 0)], 0, 5) == []
