import pytest
from hypothesis import given
from hypothesis import strategies as st

from mecguard.eventlog import EventLog
from mecguard.netmodel import (
    ALLOWED_TRANSITIONS,
    SERVICE_IP,
    Device,
    DuplicateDevice,
    ForbiddenTransition,
    Network,
    Outcome,
    Packet,
    PayloadTag,
    Profile,
    Protocol,
    Target,
    UnknownDevice,
    device_for_ip,
    ip_str,
)


def pkt(dev, ts=0, tag=PayloadTag.NORMAL):
    return Packet(ts, Device(dev, Profile.LEGITIMATE).ip, SERVICE_IP, 50000, 443,
                  Protocol.TCP, 100, tag, dev)


@pytest.fixture
def net():
    n = Network(EventLog(), lambda: 0)
    n.sinks = {t: (lambda p, t=t: Outcome.SERVED) for t in (Target.VM1, Target.VM4, Target.VM4A,
                                                            Target.VM4B)}
    return n


def test_device_addressing():
    d = Device(258, Profile.BOT)
    assert ip_str(d.ip) == "10.1.1.2"
    assert device_for_ip(d.ip) == 258
    assert d.ground_truth_malicious
    assert not Device(1, Profile.LEGITIMATE).ground_truth_malicious
    assert Device(1, Profile.ATTACKER_DIRECT).ground_truth_malicious


def test_packet_length_bounds():
    with pytest.raises(ValueError):
        Packet(0, 1, 2, 3, 4, Protocol.UDP, 19, PayloadTag.NORMAL, 0)
    with pytest.raises(ValueError):
        Packet(0, 1, 2, 3, 4, Protocol.UDP, 65536, PayloadTag.NORMAL, 0)


def test_attach_routes_to_vm1_and_rejects_duplicates(net):
    net.attach_device(Device(1, Profile.LEGITIMATE))
    assert net.routing[1] is Target.VM1
    with pytest.raises(DuplicateDevice):
        net.attach_device(Device(1, Profile.BOT))
    with pytest.raises(UnknownDevice):
        net.routing[2]
    with pytest.raises(UnknownDevice):
        net.reroute(2, Target.VM4)


def test_deliver_mirrors_everything_except_dropped(net):
    seen = []
    net.observers.append(lambda p: seen.append(p.src_device))
    for d in (1, 2):
        net.attach_device(Device(d, Profile.BOT))
    net.reroute(2, Target.VM4)
    net.reroute(2, Target.DROP)
    assert net.deliver(pkt(1)) == (Outcome.SERVED, Target.VM1)
    assert net.deliver(pkt(2)) == (Outcome.DROPPED, Target.DROP)
    assert seen == [1]


def test_held_devices_lose_packets_until_readmitted(net):
    net.attach_device(Device(1, Profile.BOT))
    net.reroute(1, Target.VM4)
    net.hold(1)
    assert net.deliver(pkt(1))[0] is Outcome.LOST
    net.readmit(1)
    assert net.deliver(pkt(1))[0] is Outcome.SERVED
    kinds = [ln.split(" ")[2] for ln in net.log.lines]
    assert kinds == ["attach", "reroute", "hold", "pkt", "readmit", "pkt"]


def test_packet_line_precedes_what_its_processing_logs(net):
    net.attach_device(Device(1, Profile.BOT))

    def sink(p):
        net.reroute(1, Target.DROP, reason="verdict")
        return Outcome.SERVED

    net.sinks[Target.VM1] = sink
    net.deliver(pkt(1))
    assert [ln.split(" ")[2] for ln in net.log.lines] == ["attach", "pkt", "reroute"]


def test_drop_listeners_fire_on_drop(net):
    dropped = []
    net.drop_listeners.append(dropped.append)
    net.attach_device(Device(5, Profile.BOT))
    net.reroute(5, Target.VM4)
    assert dropped == []
    net.reroute(5, Target.DROP)
    assert dropped == [5]


def test_forbidden_transitions(net):
    net.attach_device(Device(1, Profile.BOT))
    with pytest.raises(ForbiddenTransition):
        net.reroute(1, Target.VM4B)
    net.reroute(1, Target.VM4A)
    with pytest.raises(ForbiddenTransition):
        net.reroute(1, Target.VM1)
    net.reroute(1, Target.DROP)
    for t in Target:
        with pytest.raises(ForbiddenTransition):
            net.reroute(1, t)
    assert net.routing.history[1] == [Target.VM1, Target.VM4A, Target.DROP]


@given(st.lists(st.sampled_from(list(Target)), max_size=12))
def test_no_path_ever_returns_to_vm1(moves):
    n = Network(EventLog(), lambda: 0)
    n.attach_device(Device(1, Profile.BOT))
    for target in moves:
        current = n.routing[1]
        try:
            n.reroute(1, target)
        except ForbiddenTransition:
            assert (current, target) not in ALLOWED_TRANSITIONS
    hist = n.routing.history[1]
    assert hist[0] is Target.VM1
    assert Target.VM1 not in hist[1:]
    assert len(hist) <= 3
