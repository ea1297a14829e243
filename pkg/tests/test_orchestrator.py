import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mecguard.detector import AnomalyVerdict, Reason
from mecguard.dpi import Decision, DpiEngine, DpiVerdict, default_signatures
from mecguard.engine import Engine, millis, seconds
from mecguard.eventlog import EventLog
from mecguard.infra import HostCapacity, Hypervisor, ResourceSpec, VmRole, VmStatus
from mecguard.netmodel import Device, Network, Outcome, Profile, Target
from mecguard.orchestrator import (
    STEP_TABLE,
    Entity,
    Mode,
    OrchestrationMessage,
    Orchestrator,
    RunState,
    Topology,
    Trigger,
    UnexpectedStep,
    Vm4Policy,
    golden_shape,
)

L = millis(10)
BOOT = seconds(2)


class Rig:
    def __init__(self, policy=Vm4Policy(), cpu=16, baseline=False, devices=range(1, 6)):
        self.engine = Engine()
        self.log = EventLog()
        self.hv = Hypervisor(self.engine, self.log, HostCapacity(cpu, cpu), unit_pps=1000,
                             boot_delay=BOOT)
        self.net = Network(self.log, lambda: self.engine.now)
        self.net.sinks = {t: (lambda p: Outcome.SERVED) for t in Target if t is not Target.DROP}
        for vm, role in (("VM1", VmRole.SERVICES), ("VM2", VmRole.FLOW_COLLECTOR),
                         ("VM3", VmRole.DETECTOR)):
            self.hv.place(vm, role, ResourceSpec(2, 2) if vm == "VM1" else ResourceSpec(1, 1))
        if policy.mode is Mode.PERMANENT:
            for vm in policy.isolation_vms:
                self.hv.place(vm, {"VM4": VmRole.DPI_AND_QUARANTINE, "VM4a": VmRole.DPI_ONLY,
                                   "VM4b": VmRole.QUARANTINE_SERVICES}[vm], ResourceSpec(1, 1))
        self.dpi = DpiEngine(default_signatures(), log=self.log, is_running=self.hv.is_running)
        self.orch = Orchestrator(self.engine, self.log, self.hv, self.net, self.dpi, policy,
                                 message_latency=L, baseline=baseline)
        for d in devices:
            self.net.attach_device(Device(d, Profile.BOT))

    def flag(self, *devs):
        self.orch.on_anomaly([AnomalyVerdict(d, 2.0, True, 1, self.engine.now,
                                             Reason.RATE_EXCEEDED) for d in devs])

    def run_to(self, t):
        self.engine.run_until(t)


def test_golden_shape_matches_the_step_table():
    assert golden_shape() == oracles.GOLDEN_TRANSCRIPT
    assert STEP_TABLE[5] == (Entity.MEPM, Entity.VM4)


def test_anomaly_run_allocates_vm4_and_reroutes_at_step8():
    rig = Rig()
    rig.flag(1, 2)
    rig.run_to(seconds(5))
    [run] = rig.orch.runs
    assert run.state is RunState.COMPLETE and run.trigger is Trigger.ANOMALY
    assert run.shape() == golden_shape()
    # step 0 at L, steps 1-2 at 2L, 3L, boot, then steps 3..9 every L
    assert run.started_at == L
    assert run.completed_at == L + 2 * L + BOOT + 7 * L
    assert rig.net.routing[1] is Target.VM4 and rig.net.routing[3] is Target.VM1
    reroutes = [t for t, _ in oracles.lines_of(rig.log.lines, "reroute")]
    step8 = [t for t, f in oracles.lines_of(rig.log.lines, "msg") if f["step"] == "8"]
    assert reroutes == [step8[0]] * 2
    assert rig.hv.vms["VM4"].spec == ResourceSpec(1, 1)


def test_devices_flagged_mid_run_join_that_run():
    rig = Rig()
    rig.flag(1)
    rig.run_to(seconds(1))
    rig.flag(2)  # pending before step 8 of the in-flight run
    rig.run_to(seconds(10))
    [run] = rig.orch.runs
    assert run.state is RunState.COMPLETE and sorted(run.admitted) == [1, 2]


def test_single_flight_queues_later_triggers():
    rig = Rig()
    rig.flag(1)
    # run 1 started at L; step 5 lands at 2 s + 6L. Crash VM4 right after it.
    rig.run_to(BOOT + 6 * L + 1)
    rig.hv.crash(rig.hv.vms["VM4"], "test")
    rig.run_to(seconds(10))
    first, recovery = rig.orch.runs
    assert first.state is RunState.COMPLETE and first.admitted == []
    assert recovery.trigger is Trigger.VM4_CRASHED
    # the crash notice waited for run 1 to finish
    assert recovery.started_at == first.completed_at
    assert recovery.completed_at - recovery.started_at == BOOT + 9 * L
    assert recovery.admitted == [1] and rig.net.routing[1] is Target.VM4
    tools = [f["how"] for _, f in oracles.lines_of(rig.log.lines, "tools")]
    assert tools == ["start", "start"]


def test_second_anomaly_reuses_running_vm4():
    rig = Rig()
    rig.flag(1)
    rig.run_to(seconds(5))
    rig.flag(2)
    rig.run_to(seconds(10))
    first, second = rig.orch.runs
    assert second.completed_at - second.started_at == 9 * L
    assert rig.net.routing[2] is Target.VM4
    tools = [f["how"] for _, f in oracles.lines_of(rig.log.lines, "tools")]
    assert tools == ["start", "use"]


def test_repeated_flags_do_not_start_extra_runs():
    rig = Rig()
    for _ in range(3):
        rig.flag(1)
    rig.run_to(seconds(5))
    rig.flag(1)  # already on VM4
    rig.run_to(seconds(10))
    assert len(rig.orch.runs) == 1


def test_crash_recovery_holds_then_readmits():
    rig = Rig()
    rig.flag(1, 2)
    rig.run_to(seconds(3))
    crash_t = rig.engine.now
    rig.hv.crash(rig.hv.vms["VM4"], "test")
    assert rig.net.held == {1, 2}
    rig.run_to(crash_t + L)
    rig.flag(3)  # anomaly during recovery: pending, and held
    rig.run_to(crash_t + 2 * L)
    assert rig.net.held == {1, 2, 3}
    rig.run_to(seconds(10))
    recovery = rig.orch.runs[1]
    assert recovery.trigger is Trigger.VM4_CRASHED and recovery.state is RunState.COMPLETE
    assert recovery.started_at == crash_t + L
    assert recovery.completed_at == crash_t + L + BOOT + 9 * L
    assert rig.net.held == set()
    assert rig.net.routing[3] is Target.VM4
    assert rig.hv.is_running("VM4")


def test_insufficient_resources_fail_at_step2():
    rig = Rig(cpu=4)
    rig.flag(1, 2)
    rig.run_to(seconds(5))
    [run] = rig.orch.runs
    assert run.state is RunState.FAILED and run.failure == "resources"
    assert [m.step for m in run.transcript] == [1, 2]
    assert rig.net.routing[1] is Target.VM1
    assert list(oracles.lines_of(rig.log.lines, "reroute")) == []
    rig.flag(1)  # rejected devices are not retried
    rig.run_to(seconds(6))
    assert len(rig.orch.runs) == 1


def test_out_of_order_message_fails_the_run():
    rig = Rig()
    run = rig.orch.start_run(Trigger.ANOMALY)
    bad = OrchestrationMessage(3, Entity.VIM, Entity.MEO, {}, 0, run.id)
    with pytest.raises(UnexpectedStep):
        rig.orch.advance(run, bad)
    assert run.state is RunState.FAILED and run.failure == "protocol"
    wrong_src = OrchestrationMessage(1, Entity.VIM, Entity.VIM, {}, 0, run.id)
    run2 = rig.orch.start_run(Trigger.ANOMALY)
    with pytest.raises(UnexpectedStep):
        rig.orch.advance(run2, wrong_src)


def test_split_topology_moves_cleared_devices_to_vm4b():
    rig = Rig(Vm4Policy(topology=Topology.SPLIT))
    rig.flag(1, 2)
    rig.run_to(seconds(5))
    assert rig.net.routing[1] is Target.VM4A
    assert rig.hv.is_running("VM4a") and rig.hv.is_running("VM4b")
    rig.dpi.report_verdict(DpiVerdict(1, Decision.CLEARED, [], rig.engine.now, 200))
    rig.dpi.report_verdict(DpiVerdict(2, Decision.ATTACK, [("x", 3)], rig.engine.now, 3))
    assert rig.net.routing[1] is Target.VM4B and rig.net.routing[2] is Target.DROP


def test_permanent_mode_uses_existing_vm4():
    rig = Rig(Vm4Policy(mode=Mode.PERMANENT))
    rig.flag(1)
    rig.run_to(seconds(1))
    [run] = rig.orch.runs
    assert run.state is RunState.COMPLETE and run.actions[0][1] == "keep"
    assert run.completed_at - run.started_at == 9 * L


def test_on_demand_idle_stop():
    rig = Rig(Vm4Policy(idle_stop_after=seconds(10)))
    rig.flag(1)
    rig.run_to(seconds(5))
    rig.dpi.report_verdict(DpiVerdict(1, Decision.ATTACK, [("x", 3)], rig.engine.now, 3))
    for t in range(5, 30, 5):
        rig.run_to(seconds(t))
        rig.orch.idle_check(seconds(t))
    assert rig.hv.status("VM4") is VmStatus.OFF
    assert rig.hv.used() == (4, 4)


def test_baseline_inspects_on_vm1_without_protocol():
    rig = Rig(baseline=True)
    rig.flag(1)
    rig.run_to(seconds(5))
    assert rig.orch.runs == [] and rig.orch.inspect_on_vm1 == {1}
    rig.dpi.report_verdict(DpiVerdict(1, Decision.ATTACK, [("x", 3)], rig.engine.now, 3))
    assert rig.net.routing[1] is Target.DROP


def test_services_vm_crash_is_restored_locally():
    rig = Rig()
    rig.hv.crash(rig.hv.vms["VM1"], "test")
    rig.run_to(seconds(3))
    assert rig.hv.is_running("VM1") and rig.orch.runs == []
    assert any(" alarm what=services-vm-crash" in ln for ln in rig.log.lines)


events = st.lists(st.tuples(st.sampled_from(["flag", "crash", "verdict", "wait"]),
                            st.integers(1, 8), st.integers(1, 3000)), max_size=25)


@settings(max_examples=60, deadline=None)
@given(events, st.sampled_from([Topology.COMBINED, Topology.SPLIT]))
def test_protocol_properties_under_random_triggers(script, topology):
    rig = Rig(Vm4Policy(topology=topology), devices=range(1, 9))
    in_flight = []
    rig.engine.probes.append(
        lambda ev: in_flight.append(sum(1 for r in rig.orch.runs if not r.terminal)))
    for action, dev, ms in script:
        if action == "flag":
            rig.flag(dev)
        elif action == "crash":
            for vm in rig.orch.policy.isolation_vms:
                if rig.hv.is_running(vm):
                    rig.hv.crash(rig.hv.vms[vm], "test")
                    break
        elif action == "verdict" and dev not in rig.dpi.decided and \
                rig.net.routing[dev] in (Target.VM4, Target.VM4A):
            decision = Decision.ATTACK if ms % 2 else Decision.CLEARED
            rig.dpi.report_verdict(DpiVerdict(dev, decision, [("x", 3)], rig.engine.now, 3))
        rig.run_to(rig.engine.now + millis(ms))
    rig.run_to(rig.engine.now + seconds(30))
    assert max(in_flight, default=0) <= 1
    for run in rig.orch.runs:
        assert run.terminal
        if run.state is RunState.COMPLETE:
            assert run.shape() == golden_shape()
    pattern = oracles.SPLIT_PATTERN if topology is Topology.SPLIT else oracles.COMBINED_PATTERN
    for dev, hist in oracles.routing_histories(rig.log.lines).items():
        assert oracles.history_matches(hist, pattern), hist
    assert oracles.vm1_after_reroute(rig.log.lines) == []
