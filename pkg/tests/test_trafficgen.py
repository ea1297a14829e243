import statistics
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mecguard.engine import Engine, seconds
from mecguard.eventlog import EventLog
from mecguard.netmodel import Device, Network, PayloadTag, Profile, Protocol
from mecguard.trafficgen import (
    AttackScript,
    InvalidWindow,
    LengthDist,
    TrafficGenerator,
    WorkloadProfile,
    ephemeral_port,
)


def make(seed=1):
    eng = Engine(seed)
    net = Network(EventLog(), lambda: eng.now)
    sent = []
    gen = TrafficGenerator(eng, net, send=sent.append)
    return eng, net, gen, sent


BROWSING = WorkloadProfile("b", Fraction(5), LengthDist.uniform(200, 1400),
                           {Protocol.TCP: 1.0}, (80, 443))


def test_workload_validation():
    with pytest.raises(ValueError):
        WorkloadProfile("x", Fraction(0), LengthDist.constant(100), {Protocol.TCP: 1.0}, (80,))
    with pytest.raises(ValueError):
        WorkloadProfile("x", Fraction(1), LengthDist.constant(100), {Protocol.TCP: 0.5}, (80,))
    with pytest.raises(ValueError):
        WorkloadProfile("x", Fraction(1), LengthDist.constant(100), {Protocol.TCP: 1.0}, ())
    with pytest.raises(ValueError):
        LengthDist.uniform(500, 100)
    assert LengthDist.uniform(200, 1400).mean == 800


def test_poisson_workload_rate_and_content():
    eng, net, gen, sent = make()
    net.attach_device(Device(1, Profile.LEGITIMATE))
    gen.spawn_workload(1, BROWSING, start=0, stop=seconds(200))
    eng.run_until(seconds(200))
    assert 900 < len(sent) < 1100  # 5 pps x 200 s, Poisson
    assert all(p.payload_tag is PayloadTag.NORMAL for p in sent)
    assert {p.dst_port for p in sent} == {80, 443}
    assert all(200 <= p.length <= 1400 for p in sent)
    gaps = [b.ts - a.ts for a, b in zip(sent, sent[1:])]
    assert abs(statistics.fmean(gaps) - 200_000) < 20_000
    assert gen.generated == len(sent)


def test_workload_for_unknown_device_is_rejected():
    from mecguard.netmodel import UnknownDevice
    eng, net, gen, _ = make()
    with pytest.raises(UnknownDevice):
        gen.spawn_workload(9, BROWSING)


def test_attack_window_must_be_non_empty():
    with pytest.raises(InvalidWindow):
        AttackScript(start=seconds(5), stop=seconds(5), bot_count=1, flood_rate_per_bot=Fraction(1))
    with pytest.raises(ValueError):
        AttackScript(start=seconds(5), stop=seconds(6), bot_count=1,
                     flood_rate_per_bot=Fraction(1), beacon_lead=seconds(6))


def test_flood_is_constant_rate_and_exact_count():
    eng, net, gen, sent = make()
    script = AttackScript(start=seconds(10), stop=seconds(12), bot_count=4,
                          flood_rate_per_bot=Fraction(300))
    ids = gen.launch_attack(script, first_device_id=100)
    eng.run_until(seconds(20))
    assert ids == [100, 101, 102, 103]
    assert all(net.devices[d].ground_truth_malicious for d in ids)
    assert len(sent) == 4 * 600
    for d in ids:
        ts = [p.ts for p in sent if p.src_device == d]
        assert all(seconds(10) <= t < seconds(12) for t in ts)
        gaps = {b - a for a, b in zip(ts, ts[1:])}
        assert gaps <= {3333, 3334}


def test_beacons_precede_the_flood():
    eng, net, gen, sent = make()
    script = AttackScript(start=seconds(20), stop=seconds(21), bot_count=5,
                          flood_rate_per_bot=Fraction(10), beacon_period=seconds(2),
                          beacon_lead=seconds(15), crash_payload=True)
    gen.launch_attack(script, first_device_id=1000)
    eng.run_until(seconds(30))
    beacons = [p for p in sent if p.payload_tag is PayloadTag.CNC_BEACON]
    flood = [p for p in sent if p.payload_tag is PayloadTag.ATTACK_SIGNATURE]
    assert len(beacons) == 5 * 7
    assert all(seconds(5) <= p.ts < seconds(20) for p in beacons)
    assert all(p.dst_port == 4444 and not p.crash_payload for p in beacons)
    assert len(flood) == 50 and all(p.crash_payload for p in flood)


def test_legitimate_devices_cannot_join_an_attack():
    eng, net, gen, _ = make()
    net.attach_device(Device(1, Profile.LEGITIMATE))
    script = AttackScript(start=seconds(1), stop=seconds(2), bot_count=1,
                          flood_rate_per_bot=Fraction(1))
    with pytest.raises(ValueError):
        gen.launch_attack(script, first_device_id=1)


def test_legit_traffic_is_independent_of_other_streams():
    def legit(with_attack):
        eng, net, gen, sent = make(seed=9)
        net.attach_device(Device(1, Profile.LEGITIMATE))
        gen.spawn_workload(1, BROWSING, start=0, stop=seconds(30))
        if with_attack:
            gen.launch_attack(AttackScript(start=seconds(5), stop=seconds(6), bot_count=3,
                                           flood_rate_per_bot=Fraction(50)), 500)
        eng.run_until(seconds(30))
        return [(p.ts, p.length, p.dst_port) for p in sent if p.src_device == 1]

    assert legit(False) == legit(True)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(1, 500), st.integers(1, 3000))
def test_flood_count_matches_rate_times_duration(bots, rate, dur_ms):
    eng, net, gen, sent = make()
    start, stop = seconds(1), seconds(1) + dur_ms * 1000
    gen.launch_attack(AttackScript(start=start, stop=stop, bot_count=bots,
                                   flood_rate_per_bot=Fraction(rate)), 0)
    eng.run_until(stop + seconds(1))
    period = Fraction(1_000_000, rate)
    for i in range(bots):
        base = start + (i * period.numerator) // (period.denominator * bots)
        expected = 0 if base >= stop else -(-(stop - base) * rate // 1_000_000)
        # every k with base + floor(k * period) < stop
        n = sum(1 for p in sent if p.src_device == i)
        assert abs(n - expected) <= 1
        assert all(start <= p.ts < stop for p in sent)


def test_ephemeral_port_range():
    for dev in (0, 1, 65535):
        for proto in (Protocol.TCP, Protocol.UDP):
            assert 49152 <= ephemeral_port(dev, 443, proto) <= 65535
    assert ephemeral_port(3, 0, Protocol.ICMP) == 0
