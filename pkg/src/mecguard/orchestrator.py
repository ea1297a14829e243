"""MEO, VIM and MEPM as message-driven state machines.

One protocol run walks the nine steps below; every message is delivered after
a fixed latency on the engine loop::

    1 MEO->VIM        instantiate / reconfigure / restore the isolation VM
    2 VIM->VI         apply it on the virtualized infrastructure
    3 VIM->MEO        machine status once it is Running and compliant
    4 MEO->MEPM       machine information
    5 MEPM->VM4       start (or reuse) DPI tools and quarantined services
    6 MEPM->MEO       tool status
    7 MEO->MEPM       reconfigure the anomaly detector
    8 MEPM->Detector  redirection may start
    9 MEPM->MEO       reconfiguration status

Step 0 carries out-of-band notifications (anomaly or crash) into the MEO.
At most one run is in a non-terminal state; later triggers are queued.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .detector import AnomalyVerdict
from .dpi import Decision, DpiEngine, DpiVerdict
from .engine import Engine, EventKind, SimTime, millis
from .eventlog import EventLog
from .infra import (
    ISOLATION_ROLES,
    Hypervisor,
    InsufficientResources,
    ResourceSpec,
    VmInstance,
    VmRole,
    VmStatus,
)
from .netmodel import Network, Target

DEFAULT_MESSAGE_LATENCY = millis(10)


class Entity(str, Enum):
    DETECTOR = "Detector"
    MEO = "MEO"
    VIM = "VIM"
    VI = "VI"
    MEPM = "MEPM"
    VM4 = "VM4"


STEP_TABLE: dict[int, tuple[Entity, Entity]] = {
    1: (Entity.MEO, Entity.VIM),
    2: (Entity.VIM, Entity.VI),
    3: (Entity.VIM, Entity.MEO),
    4: (Entity.MEO, Entity.MEPM),
    5: (Entity.MEPM, Entity.VM4),
    6: (Entity.MEPM, Entity.MEO),
    7: (Entity.MEO, Entity.MEPM),
    8: (Entity.MEPM, Entity.DETECTOR),
    9: (Entity.MEPM, Entity.MEO),
}


def golden_shape() -> str:
    return "".join(f"{step} {src.value}->{dst.value}\n" for step, (src, dst) in STEP_TABLE.items())


class Trigger(str, Enum):
    ANOMALY = "AnomalyDetected"
    VM4_CRASHED = "Vm4Crashed"


class RunState(str, Enum):
    IDLE = "Idle"
    AWAIT_VIM = "AwaitVim"
    AWAIT_MEPM_START = "AwaitMepmStart"
    AWAIT_DETECTOR_RECONFIG = "AwaitDetectorReconfig"
    COMPLETE = "Complete"
    FAILED = "Failed"


class Mode(str, Enum):
    ON_DEMAND = "OnDemand"
    PERMANENT = "Permanent"


class Topology(str, Enum):
    COMBINED = "Combined"
    SPLIT = "Split"


class UnexpectedStep(RuntimeError):
    pass


@dataclass(frozen=True)
class Vm4Policy:
    mode: Mode = Mode.ON_DEMAND
    topology: Topology = Topology.COMBINED
    idle_stop_after: SimTime | None = None

    def __post_init__(self) -> None:
        if self.mode is Mode.PERMANENT and self.idle_stop_after is not None:
            raise ValueError("a permanent VM4 is never stopped")

    @property
    def entry_target(self) -> Target:
        return Target.VM4 if self.topology is Topology.COMBINED else Target.VM4A

    @property
    def isolation_vms(self) -> tuple[str, ...]:
        return ("VM4",) if self.topology is Topology.COMBINED else ("VM4a", "VM4b")


@dataclass
class OrchestrationMessage:
    step: int
    src: Entity
    dst: Entity
    payload: dict
    sent_at: SimTime
    run_id: int = 0

    def shape(self) -> str:
        return f"{self.step} {self.src.value}->{self.dst.value}"


@dataclass
class ProtocolRun:
    id: int
    trigger: Trigger
    started_at: SimTime
    state: RunState = RunState.IDLE
    expected_step: int = 1
    transcript: list[OrchestrationMessage] = field(default_factory=list)
    failure: str | None = None
    # (vm id, action, spec) requested at step 1
    actions: list[tuple[str, str, ResourceSpec]] = field(default_factory=list)
    crashed_vm: str | None = None
    completed_at: SimTime | None = None
    admitted: list[int] = field(default_factory=list)
    ready_at_step5: SimTime | None = None

    @property
    def terminal(self) -> bool:
        return self.state in (RunState.COMPLETE, RunState.FAILED)

    def shape(self) -> str:
        return "".join(m.shape() + "\n" for m in self.transcript)


def _state_for_step(step: int) -> RunState:
    if step <= 3:
        return RunState.AWAIT_VIM
    if step <= 6:
        return RunState.AWAIT_MEPM_START
    return RunState.AWAIT_DETECTOR_RECONFIG


VM_TARGET = {"VM4": Target.VM4, "VM4a": Target.VM4A, "VM4b": Target.VM4B}
VM_ROLE = {"VM4": VmRole.DPI_AND_QUARANTINE, "VM4a": VmRole.DPI_ONLY,
           "VM4b": VmRole.QUARANTINE_SERVICES}


class Orchestrator:
    def __init__(self, engine: Engine, log: EventLog, hypervisor: Hypervisor,
                 network: Network, dpi: DpiEngine, policy: Vm4Policy = Vm4Policy(),
                 message_latency: SimTime = DEFAULT_MESSAGE_LATENCY,
                 per_device_pps: int = 20, baseline: bool = False):
        self.engine = engine
        self.log = log
        self.hv = hypervisor
        self.net = network
        self.dpi = dpi
        self.policy = policy
        self.latency = message_latency
        self.per_device_pps = per_device_pps
        self.baseline = baseline
        self.runs: list[ProtocolRun] = []
        self.active: ProtocolRun | None = None
        self.queue: list[tuple[Trigger, str | None]] = []
        self.pending: set[int] = set()
        self.rejected: set[int] = set()
        self.inspect_on_vm1: set[int] = set()
        self.tools: set[str] = set()
        self.idle_since: SimTime | None = None
        hypervisor.crash_listeners.append(self._on_crash_sync)
        engine.on(EventKind.VM_CRASH, lambda ev: self.on_vm_crash(ev.payload))
        dpi.on_verdict = self.on_dpi_verdict

    # -- helpers --------------------------------------------------------------

    def _alarm(self, what: str, **fields: object) -> None:
        self.log.emit(self.engine.now, "orchestrator", "alarm", what=what, **fields)

    def size_for(self, devices: int) -> ResourceSpec:
        cpu = max(1, math.ceil(devices * self.per_device_pps / self.hv.unit_pps))
        return ResourceSpec(cpu, cpu)

    def quarantined(self) -> list[int]:
        """Devices steered to an isolation VM (held ones included)."""
        out = []
        for vm in self.policy.isolation_vms:
            out.extend(self.net.routing.devices_on(VM_TARGET[vm]))
        return sorted(out)

    def _crashed_isolation_vm(self) -> bool:
        return any(self.hv.status(vm) is VmStatus.CRASHED for vm in self.policy.isolation_vms)

    # -- triggers -------------------------------------------------------------

    def on_anomaly(self, verdicts: Iterable[AnomalyVerdict]) -> None:
        devices = sorted({v.device for v in verdicts if v.flagged})
        if not devices:
            return
        if self.baseline:
            for d in devices:
                if (d not in self.inspect_on_vm1 and d not in self.dpi.decided
                        and self.net.routing[d] is Target.VM1):
                    self.inspect_on_vm1.add(d)
                    self.log.emit(self.engine.now, "orchestrator", "inspect-on-vm1", dev=d)
            return
        self._send_oob(Entity.DETECTOR, "anomaly", devices)

    def on_vm_crash(self, vm_id: str) -> None:
        vm = self.hv.vms[vm_id]
        if vm.role in ISOLATION_ROLES and not self.baseline:
            self._send_oob(Entity.VIM, "crash", [vm_id])
        elif vm.role is VmRole.SERVICES:
            # the VIM restarts the services VM locally, outside the protocol
            self._alarm("services-vm-crash", vm=vm_id)
            self.hv.restore(vm_id)
        else:
            self._alarm("unhandled-crash", vm=vm_id, role=vm.role)

    def _on_crash_sync(self, vm: VmInstance) -> None:
        self.dpi.reset_vm(vm.id)
        self.tools.discard(vm.id)
        target = VM_TARGET.get(vm.id)
        if target is not None:
            for d in self.net.routing.devices_on(target):
                self.net.hold(d)

    def _send_oob(self, src: Entity, what: str, items: list) -> None:
        msg = OrchestrationMessage(0, src, Entity.MEO, {"what": what, "items": items},
                                   self.engine.now)
        self.engine.schedule_in(self.latency, EventKind.MESSAGE_DELIVERY, payload=msg,
                                callback=self._deliver_oob)

    def _deliver_oob(self, event) -> None:
        msg: OrchestrationMessage = event.payload
        what = msg.payload["what"]
        self.log.emit(self.engine.now, "orchestrator", "msg", run="-", step=0,
                      src=msg.src, dst=msg.dst, what=what, items=msg.payload["items"])
        if what == "anomaly":
            self._meo_anomaly(msg.payload["items"])
        else:
            self._enqueue(Trigger.VM4_CRASHED, msg.payload["items"][0])

    def _meo_anomaly(self, devices: list[int]) -> None:
        fresh = []
        recovering = self._crashed_isolation_vm() or (
            self.active is not None and self.active.trigger is Trigger.VM4_CRASHED)
        for d in devices:
            if d in self.pending or d in self.rejected or d in self.dpi.decided:
                continue
            if self.net.routing[d] is not Target.VM1:
                continue
            fresh.append(d)
            self.pending.add(d)
            if recovering:
                self.net.hold(d)
        if fresh:
            self.log.emit(self.engine.now, "orchestrator", "pending", devs=fresh,
                          total=len(self.pending))
            self._enqueue(Trigger.ANOMALY, None)

    def _enqueue(self, trigger: Trigger, vm: str | None) -> None:
        if (trigger, vm) not in self.queue:
            self.queue.append((trigger, vm))
        self._maybe_start()

    def _maybe_start(self) -> None:
        while self.active is None and self.queue:
            trigger, vm = self.queue.pop(0)
            if trigger is Trigger.ANOMALY and not self.pending:
                continue
            if trigger is Trigger.VM4_CRASHED and self.hv.status(vm) is not VmStatus.CRASHED:
                continue
            self.start_run(trigger, vm)

    # -- protocol -------------------------------------------------------------

    def _plan(self, trigger: Trigger, crashed_vm: str | None) -> list[tuple[str, str, ResourceSpec]]:
        actions = []
        quarantined = self.quarantined()
        if self.policy.topology is Topology.COMBINED:
            wanted = {"VM4": self.size_for(len(quarantined) + len(self.pending))}
        else:
            on_b = self.net.routing.devices_on(Target.VM4B)
            wanted = {
                "VM4a": self.size_for(len(quarantined) - len(on_b) + len(self.pending)),
                "VM4b": self.size_for(len(on_b)),
            }
        for vm_id, spec in wanted.items():
            vm = self.hv.vms.get(vm_id)
            status = self.hv.status(vm_id)
            if status is VmStatus.OFF:
                actions.append((vm_id, "allocate", spec))
            elif status is VmStatus.CRASHED:
                actions.append((vm_id, "restore", vm.spec))
            elif trigger is Trigger.VM4_CRASHED or vm.spec == spec:
                actions.append((vm_id, "keep", vm.spec))
            else:
                actions.append((vm_id, "reconfigure", spec))
        return actions

    def start_run(self, trigger: Trigger, crashed_vm: str | None = None) -> ProtocolRun:
        if self.active is not None:
            raise RuntimeError("a protocol run is already in flight")
        run = ProtocolRun(len(self.runs) + 1, trigger, self.engine.now, crashed_vm=crashed_vm)
        run.actions = self._plan(trigger, crashed_vm)
        self.runs.append(run)
        self.active = run
        self.log.emit(self.engine.now, "orchestrator", "run-start", run=run.id, trigger=trigger,
                      vm=crashed_vm or "-",
                      actions=[f"{v}:{a}:{s.cpu_units}" for v, a, s in run.actions])
        self._send(run, 1, {"actions": run.actions})
        return run

    def _send(self, run: ProtocolRun, step: int, payload: dict) -> None:
        src, dst = STEP_TABLE[step]
        msg = OrchestrationMessage(step, src, dst, payload, self.engine.now, run.id)
        self.engine.schedule_in(self.latency, EventKind.MESSAGE_DELIVERY, payload=msg,
                                callback=self._deliver)

    def _deliver(self, event) -> None:
        msg: OrchestrationMessage = event.payload
        run = self.runs[msg.run_id - 1]
        if run.terminal:
            return
        try:
            self.advance(run, msg)
        except UnexpectedStep:
            pass

    def _fail(self, run: ProtocolRun, reason: str) -> None:
        run.state = RunState.FAILED
        run.failure = reason
        run.completed_at = self.engine.now
        self.log.emit(self.engine.now, "orchestrator", "run-end", run=run.id, state=run.state,
                      reason=reason, steps=len(run.transcript))
        self._alarm("protocol-failed", run=run.id, reason=reason)
        if self.active is run:
            self.active = None
        self._maybe_start()

    def advance(self, run: ProtocolRun, incoming: OrchestrationMessage) -> ProtocolRun:
        expected = STEP_TABLE.get(run.expected_step)
        if incoming.step != run.expected_step or (incoming.src, incoming.dst) != expected:
            self._fail(run, "protocol")
            raise UnexpectedStep(
                f"run {run.id}: got step {incoming.step} while awaiting {run.expected_step}")
        run.transcript.append(incoming)
        run.state = _state_for_step(incoming.step)
        run.expected_step = incoming.step + 1
        self.log.emit(self.engine.now, "orchestrator", "msg", run=run.id, step=incoming.step,
                      src=incoming.src, dst=incoming.dst, sent=incoming.sent_at)
        handler = getattr(self, f"_step{incoming.step}")
        handler(run, incoming)
        return run

    def _step1(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        self._send(run, 2, msg.payload)

    def _step2(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        actions = msg.payload["actions"]
        need_cpu = need_mem = 0
        for vm_id, action, spec in actions:
            if action == "allocate":
                need_cpu += spec.cpu_units
                need_mem += spec.mem_units
            elif action == "reconfigure":
                current = self.hv.vms[vm_id].spec
                need_cpu += max(0, spec.cpu_units - current.cpu_units)
                need_mem += max(0, spec.mem_units - current.mem_units)
        free_cpu, free_mem = self.hv.free()
        if need_cpu > free_cpu or need_mem > free_mem:
            self.log.emit(self.engine.now, "infra", "reject", need_cpu=need_cpu,
                          free_cpu=free_cpu, need_mem=need_mem, free_mem=free_mem)
            rejected = sorted(self.pending)
            self.rejected.update(self.pending)
            for d in rejected:
                self.net.readmit(d)
            self.pending.clear()
            self._fail(run, "resources")
            return

        waiting = {vm_id for vm_id, _, _ in actions}

        def ready(vm_id: str):
            def cb(_vm=None) -> None:
                waiting.discard(vm_id)
                if not waiting and not run.terminal:
                    self._send(run, 3, {"status": {v: self.hv.status(v).value
                                                   for v, _, _ in actions}})
            return cb

        for vm_id, action, spec in actions:
            try:
                if action == "allocate":
                    self.hv.allocate(vm_id, VM_ROLE[vm_id], spec, on_running=ready(vm_id))
                elif action == "reconfigure":
                    self.hv.reconfigure(vm_id, spec, on_done=ready(vm_id))
                elif action == "restore":
                    self.hv.restore(vm_id, on_running=ready(vm_id))
                else:
                    ready(vm_id)()
            except InsufficientResources:
                self._fail(run, "resources")
                return

    def _step3(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        compliant = all(self.hv.status(vm_id) is VmStatus.RUNNING
                        and self.hv.vms[vm_id].spec == spec
                        for vm_id, _, spec in run.actions)
        if not compliant:
            self._fail(run, "vm-unavailable")
            return
        info = {vm_id: self.hv.vms[vm_id].spec.cpu_units for vm_id, _, _ in run.actions}
        self._send(run, 4, {"machines": info})

    def _step4(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        self._send(run, 5, msg.payload)

    def _step5(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        ok = True
        for vm_id in msg.payload["machines"]:
            if not self.hv.is_running(vm_id):
                ok = False
                continue
            how = "use" if vm_id in self.tools else "start"
            self.tools.add(vm_id)
            self.log.emit(self.engine.now, "orchestrator", "tools", vm=vm_id, how=how)
        run.ready_at_step5 = self.engine.now
        self._send(run, 6, {"ok": ok})

    def _step6(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        if not msg.payload["ok"]:
            self._fail(run, "vm-unavailable")
            return
        self._send(run, 7, {})

    def _step7(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        self._send(run, 8, {})

    def _step8(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        entry = self.policy.entry_target
        if self.hv.is_running(entry.value) and entry.value in self.tools:
            for d in sorted(self.pending):
                if self.net.routing[d] is Target.VM1:
                    self.net.reroute(d, entry, reason=f"run{run.id}")
                    run.admitted.append(d)
            self.pending.clear()
        for d in sorted(self.net.held):
            target = self.net.routing[d]
            vm_id = target.value
            if self.hv.is_running(vm_id) and vm_id in self.tools:
                self.net.readmit(d)
                run.admitted.append(d)
        self._send(run, 9, {"admitted": len(run.admitted)})

    def _step9(self, run: ProtocolRun, msg: OrchestrationMessage) -> None:
        run.state = RunState.COMPLETE
        run.completed_at = self.engine.now
        self.log.emit(self.engine.now, "orchestrator", "run-end", run=run.id, state=run.state,
                      reason="-", steps=len(run.transcript))
        self.active = None
        self._maybe_start()

    # -- verdicts and housekeeping -------------------------------------------

    def on_dpi_verdict(self, verdict: DpiVerdict) -> None:
        dev = verdict.device
        if verdict.decision is Decision.ATTACK:
            self.net.reroute(dev, Target.DROP, reason="dpi-attack")
            self._alarm("attack", dev=dev)
            self.inspect_on_vm1.discard(dev)
        elif verdict.decision is Decision.CLEARED:
            if self.net.routing[dev] is Target.VM4A:
                self.net.reroute(dev, Target.VM4B, reason="dpi-cleared")
            self.inspect_on_vm1.discard(dev)

    def idle_check(self, now: SimTime) -> None:
        if self.policy.mode is not Mode.ON_DEMAND or self.policy.idle_stop_after is None:
            return
        running = [vm for vm in self.policy.isolation_vms if self.hv.is_running(vm)]
        busy = self.active is not None or self.queue or self.pending or self.quarantined()
        if busy or not running:
            self.idle_since = None
            return
        if self.idle_since is None:
            self.idle_since = now
        elif now - self.idle_since >= self.policy.idle_stop_after:
            for vm in running:
                self.hv.stop(vm)
                self.tools.discard(vm)
                self.dpi.reset_vm(vm)
            self.log.emit(now, "orchestrator", "idle-stop", vms=running)
            self.idle_since = None
