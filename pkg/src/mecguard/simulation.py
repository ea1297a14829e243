"""Wires every component of one MEC host together and runs a scenario."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Any

from .detector import Detector, DetectorModel
from .dpi import DpiEngine, Signature
from .engine import Engine, EventKind, RunSummary, millis, seconds
from .eventlog import EventLog
from .flowpipe import FeatureVector, FlowPipe
from .infra import HostCapacity, Hypervisor, ResourceSpec, VmRole
from .metrics import compute_metrics
from .netmodel import Device, Network, Outcome, PayloadTag, Profile, Protocol, Target
from .orchestrator import Mode, Orchestrator, Topology, Vm4Policy
from .scenario import Scenario, scenario_models
from .trafficgen import AttackScript, LengthDist, TrafficGenerator, WorkloadProfile

INITIAL_ROLES = {
    "VM1": VmRole.SERVICES,
    "VM2": VmRole.FLOW_COLLECTOR,
    "VM3": VmRole.DETECTOR,
    "VM4": VmRole.DPI_AND_QUARANTINE,
    "VM4a": VmRole.DPI_ONLY,
    "VM4b": VmRole.QUARANTINE_SERVICES,
}


def _frac(x: float) -> Fraction:
    return Fraction(str(x))


@dataclass
class RunResult:
    scenario: str
    seed: int
    baseline: bool
    log: EventLog
    summary: RunSummary
    metrics: dict[str, Any]
    features: list[FeatureVector]
    sim: "Simulation"

    @property
    def digest(self) -> str:
        return self.log.digest()


class Simulation:
    def __init__(self, scenario: Scenario, seed: int | None = None,
                 baseline: bool | None = None, model: DetectorModel | None = None,
                 trace: bool = False, keep_features: bool = False):
        self.scenario = sc = scenario
        self.seed = sc.seed if seed is None else seed
        self.baseline = sc.baseline if baseline is None else baseline
        self.duration = seconds(_frac(sc.duration_s))
        self.engine = Engine(self.seed, trace=trace)
        self.log = EventLog()
        clock = lambda: self.engine.now  # noqa: E731

        self.network = Network(self.log, clock)
        self.flows = FlowPipe(self.log,
                              active_timeout=seconds(_frac(sc.flows.active_timeout_s)),
                              inactive_timeout=seconds(_frac(sc.flows.inactive_timeout_s)),
                              window=seconds(_frac(sc.flows.window_s)))
        self.network.observers.append(self.flows.observe)
        self.network.drop_listeners.append(lambda d: self.flows.flush_device(d, self.engine.now))

        models = scenario_models(sc)
        self.detector = Detector(self.flows, model or models["base"], self.log)
        self.detector.keep_features = keep_features

        self.hv = Hypervisor(
            self.engine, self.log,
            HostCapacity(sc.host.cpu_units, sc.host.mem_units),
            unit_pps=sc.host.unit_pps,
            boot_delay=seconds(_frac(sc.timing.boot_delay_s)),
            reconfig_delay=seconds(_frac(sc.timing.reconfig_delay_s)),
            check_window=millis(_frac(sc.timing.check_window_ms)),
            overload_factor=_frac(sc.crash_model.overload_factor),
            dpi_cost=sc.crash_model.dpi_cost,
        )
        signatures = [
            Signature(s.id, frozenset(PayloadTag(t) for t in s.tags),
                      frozenset(s.dst_ports) if s.dst_ports is not None else None)
            for s in sc.dpi.signatures
        ]
        self.dpi = DpiEngine(signatures, sc.dpi.attack_match_threshold,
                             sc.dpi.clear_min_packets, self.log, self.hv.is_running)
        self.policy = Vm4Policy(
            Mode(sc.vm4_policy.mode), Topology(sc.vm4_policy.topology),
            seconds(_frac(sc.vm4_policy.idle_stop_after_s))
            if sc.vm4_policy.idle_stop_after_s is not None else None)
        self.orch = Orchestrator(self.engine, self.log, self.hv, self.network, self.dpi,
                                 self.policy,
                                 message_latency=millis(_frac(sc.timing.message_latency_ms)),
                                 per_device_pps=sc.sizing.per_device_pps,
                                 baseline=self.baseline)
        self.detector.on_flagged = self.orch.on_anomaly
        self.traffic = TrafficGenerator(self.engine, self.network)

        self.network.sinks = {
            Target.VM1: self._vm1_sink,
            Target.VM4: self._vm4_sink,
            Target.VM4A: self._vm4a_sink,
            Target.VM4B: self._vm4b_sink,
        }
        self._built = False

    # -- data plane sinks -----------------------------------------------------

    def _vm1_sink(self, packet) -> Outcome:
        dev = packet.src_device
        if self.baseline and dev in self.orch.inspect_on_vm1 and dev not in self.dpi.decided:
            outcome = self.hv.consume("VM1", packet, 1 + self.hv.dpi_cost, Outcome.SERVED)
            if outcome is Outcome.SERVED:
                self.dpi.inspect("VM1", packet)
            return outcome
        return self.hv.consume("VM1", packet, 1, Outcome.SERVED)

    def _vm4_sink(self, packet) -> Outcome:
        undecided = packet.src_device not in self.dpi.decided
        cost = 1 + self.hv.dpi_cost if undecided else 1
        outcome = self.hv.consume("VM4", packet, cost, Outcome.SERVED)
        if outcome is Outcome.SERVED and undecided:
            self.dpi.inspect("VM4", packet)
        return outcome

    def _vm4a_sink(self, packet) -> Outcome:
        outcome = self.hv.consume("VM4a", packet, self.hv.dpi_cost, Outcome.INSPECTED)
        if outcome is Outcome.INSPECTED and packet.src_device not in self.dpi.decided:
            self.dpi.inspect("VM4a", packet)
        return outcome

    def _vm4b_sink(self, packet) -> Outcome:
        return self.hv.consume("VM4b", packet, 1, Outcome.SERVED)

    # -- setup ----------------------------------------------------------------

    def _build(self) -> None:
        sc = self.scenario
        self.log.emit(0, "sim", "start", scenario=sc.name, seed=self.seed,
                      baseline=self.baseline, duration=self.duration,
                      mode=self.policy.mode, topology=self.policy.topology)
        for vm_id, cfg in sc.vms.items():
            if self.baseline and vm_id.startswith("VM4"):
                continue
            self.hv.place(vm_id, INITIAL_ROLES[vm_id], ResourceSpec(cfg.cpu_units, cfg.mem_units))

        workloads = {
            name: WorkloadProfile(
                name, _frac(w.packet_rate),
                LengthDist.constant(w.length.constant) if w.length.constant is not None
                else LengthDist.uniform(*w.length.uniform),
                {Protocol(p): weight for p, weight in w.protocol_mix.items()},
                tuple(w.dst_ports))
            for name, w in sc.workloads.items()
        }
        for group in sc.devices:
            attach = seconds(_frac(group.attach_s))
            for dev in range(group.first_id, group.first_id + group.count):
                self.engine.schedule(attach, EventKind.SCENARIO_DIRECTIVE, ("attach", dev),
                                     callback=self._attach_legit(dev, workloads[group.workload]))
        for a in sc.attacks:
            script = AttackScript(
                start=seconds(_frac(a.start_s)), stop=seconds(_frac(a.stop_s)),
                bot_count=a.bot_count, flood_rate_per_bot=_frac(a.flood_rate_per_bot),
                beacon_period=seconds(_frac(a.beacon_period_s))
                if a.beacon_period_s is not None else None,
                beacon_lead=seconds(_frac(a.beacon_lead_s)),
                crash_payload=a.crash_payload, profile=Profile(a.profile),
                flood_port=a.flood_port, flood_length=a.flood_length, cnc_port=a.cnc_port)
            self.traffic.launch_attack(script, a.first_device_id)

        models = scenario_models(sc)
        for i, update in enumerate(sc.detector.updates):
            self.schedule_swap(seconds(_frac(update.at_s)), models[f"update.{i}"])
        for d in sc.directives:
            self.engine.schedule(seconds(_frac(d.at_s)), EventKind.SCENARIO_DIRECTIVE,
                                 (d.action, d.vm), callback=self._directive)

        sweep = seconds(_frac(sc.flows.sweep_s))
        for t in range(sweep, self.duration + 1, sweep):
            self.engine.schedule(t, EventKind.FLOW_TIMEOUT, callback=self._sweep)
        window = self.flows.window
        for t in range(window, self.duration + 1, window):
            self.engine.schedule(t, EventKind.DETECTOR_TICK, callback=self._tick)
        self._built = True

    def schedule_swap(self, at, model: DetectorModel) -> None:
        def swap(event) -> None:
            self.detector.swap_model(model, self.engine.now)
        self.engine.schedule(at, EventKind.MODEL_UPDATE, model.version, callback=swap)

    def _attach_legit(self, dev: int, workload: WorkloadProfile):
        def attach(event) -> None:
            self.network.attach_device(Device(dev, Profile.LEGITIMATE, event.fire_at))
            self.traffic.spawn_workload(dev, workload, stop=self.duration)
        return attach

    def _directive(self, event) -> None:
        action, vm_id = event.payload
        if action == "crash_vm":
            vm = self.hv.vms.get(vm_id)
            if vm is not None and self.hv.is_running(vm_id):
                self.hv.crash(vm, "directive")

    def _sweep(self, event) -> None:
        self.flows.expire_flows(self.engine.now)

    def _tick(self, event) -> None:
        now = self.engine.now
        self.flows.expire_flows(now)
        self.detector.tick(now)
        self.orch.idle_check(now)

    # -- run ------------------------------------------------------------------

    def run(self) -> RunResult:
        if not self._built:
            self._build()
        summary = self.engine.run_until(self.duration)
        self.flows.flush_all(self.duration)
        self.log.emit(self.duration, "sim", "end", events=summary.processed,
                      generated=self.traffic.generated)
        metrics = compute_metrics(self.log.lines)
        return RunResult(self.scenario.name, self.seed, self.baseline, self.log, summary,
                         metrics, self.detector.features, self)


def run_scenario(scenario: Scenario, **kwargs) -> RunResult:
    return Simulation(scenario, **kwargs).run()
