"""Virtualized infrastructure of the MEC host: VM lifecycle, capacity, crashes.

Service capacity is counted in cost units per check window. Serving a packet
costs one unit, inspecting it costs ``dpi_cost`` more. A Running VM with
``cpu_units`` has a budget of ``cpu_units * unit_pps`` units per second; any
packet that would overrun the current window's budget is dropped at the VM.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from typing import Callable

from .engine import US_PER_S, Engine, EventKind, SimTime, millis, seconds
from .eventlog import EventLog
from .netmodel import Outcome, Packet

DEFAULT_UNIT_PPS = 10_000
DEFAULT_BOOT_DELAY = seconds(2)
DEFAULT_RECONFIG_DELAY = millis(500)
DEFAULT_CHECK_WINDOW = millis(10)


class VmRole(str, Enum):
    SERVICES = "Services"
    FLOW_COLLECTOR = "FlowCollector"
    DETECTOR = "Detector"
    DPI_AND_QUARANTINE = "DpiAndQuarantine"
    DPI_ONLY = "DpiOnly"
    QUARANTINE_SERVICES = "QuarantineServices"


ISOLATION_ROLES = frozenset({VmRole.DPI_AND_QUARANTINE, VmRole.DPI_ONLY,
                             VmRole.QUARANTINE_SERVICES})


class VmStatus(str, Enum):
    OFF = "Off"
    BOOTING = "Booting"
    RUNNING = "Running"
    CRASHED = "Crashed"


LEGAL_TRANSITIONS = frozenset({
    (VmStatus.OFF, VmStatus.BOOTING),
    (VmStatus.BOOTING, VmStatus.RUNNING),
    (VmStatus.RUNNING, VmStatus.CRASHED),
    (VmStatus.CRASHED, VmStatus.BOOTING),
    (VmStatus.RUNNING, VmStatus.OFF),
    (VmStatus.CRASHED, VmStatus.OFF),
})


class InsufficientResources(RuntimeError):
    pass


class DuplicateVm(ValueError):
    pass


class VmNotRunning(RuntimeError):
    pass


class VmNotCrashed(RuntimeError):
    pass


@dataclass(frozen=True)
class ResourceSpec:
    cpu_units: int
    mem_units: int

    def __post_init__(self) -> None:
        if self.cpu_units <= 0 or self.mem_units <= 0:
            raise ValueError("resource units must be positive")

    def fits_in(self, cpu: int, mem: int) -> bool:
        return self.cpu_units <= cpu and self.mem_units <= mem


@dataclass(frozen=True)
class HostCapacity:
    cpu_units: int = 16
    mem_units: int = 16

    def __post_init__(self) -> None:
        if self.cpu_units <= 0 or self.mem_units <= 0:
            raise ValueError("host capacity must be positive")


@dataclass
class VmInstance:
    id: str
    role: VmRole
    spec: ResourceSpec
    status: VmStatus = VmStatus.OFF
    boot_started: SimTime | None = None
    # capacity held; differs from spec only while a reconfiguration is in flight
    reserved: ResourceSpec | None = None
    window_index: int = -1
    window_cost: int = 0
    window_crash_load: int = 0
    crashes: int = 0


def crash_check(crash_packets: int, cpu_units: int, unit_pps: int,
                overload_factor: Fraction, window: SimTime) -> bool:
    """True when crash-flagged load in one window exceeds overload x capacity."""
    return crash_packets * US_PER_S > overload_factor * cpu_units * unit_pps * window


class Hypervisor:
    def __init__(self, engine: Engine, log: EventLog, capacity: HostCapacity = HostCapacity(),
                 unit_pps: int = DEFAULT_UNIT_PPS,
                 boot_delay: SimTime = DEFAULT_BOOT_DELAY,
                 reconfig_delay: SimTime = DEFAULT_RECONFIG_DELAY,
                 check_window: SimTime = DEFAULT_CHECK_WINDOW,
                 overload_factor: Fraction = Fraction(2),
                 dpi_cost: int = 2):
        if unit_pps <= 0 or check_window <= 0 or overload_factor <= 0 or dpi_cost < 0:
            raise ValueError("invalid hypervisor parameters")
        self.engine = engine
        self.log = log
        self.capacity = capacity
        self.unit_pps = unit_pps
        self.boot_delay = boot_delay
        self.reconfig_delay = reconfig_delay
        self.check_window = check_window
        self.overload_factor = Fraction(overload_factor)
        self.dpi_cost = dpi_cost
        self.vms: dict[str, VmInstance] = {}
        self.crash_listeners: list[Callable[[VmInstance], None]] = []

    # -- accounting ---------------------------------------------------------

    def used(self) -> tuple[int, int]:
        cpu = mem = 0
        for vm in self.vms.values():
            if vm.status is not VmStatus.OFF and vm.reserved is not None:
                cpu += vm.reserved.cpu_units
                mem += vm.reserved.mem_units
        return cpu, mem

    def free(self) -> tuple[int, int]:
        cpu, mem = self.used()
        return self.capacity.cpu_units - cpu, self.capacity.mem_units - mem

    def _assert_capacity(self) -> None:
        cpu, mem = self.used()
        assert cpu <= self.capacity.cpu_units and mem <= self.capacity.mem_units, \
            "host capacity exceeded"

    def _set_status(self, vm: VmInstance, status: VmStatus, **extra: object) -> None:
        if (vm.status, status) not in LEGAL_TRANSITIONS:
            raise RuntimeError(f"{vm.id}: illegal transition {vm.status.value}->{status.value}")
        previous = vm.status
        vm.status = status
        cpu, mem = self.used()
        self.log.emit(self.engine.now, "infra", "vm-status", vm=vm.id, src=previous, dst=status,
                      cpu=vm.spec.cpu_units, used_cpu=cpu, used_mem=mem, **extra)

    def status(self, vm_id: str) -> VmStatus:
        vm = self.vms.get(vm_id)
        return VmStatus.OFF if vm is None else vm.status

    def is_running(self, vm_id: str) -> bool:
        return self.status(vm_id) is VmStatus.RUNNING

    # -- lifecycle ----------------------------------------------------------

    def place(self, vm_id: str, role: VmRole, spec: ResourceSpec) -> VmInstance:
        """Start a VM that is already up when the run begins."""
        vm = self._admit(vm_id, role, spec)
        self._set_status(vm, VmStatus.BOOTING)
        vm.boot_started = self.engine.now
        self._set_status(vm, VmStatus.RUNNING)
        return vm

    def _admit(self, vm_id: str, role: VmRole, spec: ResourceSpec) -> VmInstance:
        existing = self.vms.get(vm_id)
        if existing is not None and existing.status is not VmStatus.OFF:
            raise DuplicateVm(vm_id)
        free_cpu, free_mem = self.free()
        if not spec.fits_in(free_cpu, free_mem):
            raise InsufficientResources(
                f"{vm_id} needs {spec.cpu_units} cpu/{spec.mem_units} mem, "
                f"free {free_cpu} cpu/{free_mem} mem")
        if existing is None:
            vm = VmInstance(vm_id, role, spec)
            self.vms[vm_id] = vm
        else:
            vm = existing
            vm.role, vm.spec = role, spec
        vm.reserved = spec
        return vm

    def allocate(self, vm_id: str, role: VmRole, spec: ResourceSpec,
                 on_running: Callable[[VmInstance], None] | None = None) -> VmInstance:
        vm = self._admit(vm_id, role, spec)
        self._boot(vm, on_running)
        self._assert_capacity()
        return vm

    def _boot(self, vm: VmInstance, on_running) -> None:
        self._set_status(vm, VmStatus.BOOTING)
        vm.boot_started = self.engine.now
        vm.window_index, vm.window_cost, vm.window_crash_load = -1, 0, 0

        def booted(event) -> None:
            if vm.status is VmStatus.BOOTING:
                self._set_status(vm, VmStatus.RUNNING)
                if on_running is not None:
                    on_running(vm)

        self.engine.schedule_in(self.boot_delay, EventKind.VM_BOOT_COMPLETE,
                                payload=vm.id, callback=booted)

    def reconfigure(self, vm_id: str, new_spec: ResourceSpec,
                    on_done: Callable[[VmInstance], None] | None = None) -> None:
        vm = self.vms.get(vm_id)
        if vm is None or vm.status is not VmStatus.RUNNING:
            raise VmNotRunning(vm_id)
        free_cpu, free_mem = self.free()
        grow_cpu = max(0, new_spec.cpu_units - vm.spec.cpu_units)
        grow_mem = max(0, new_spec.mem_units - vm.spec.mem_units)
        if grow_cpu > free_cpu or grow_mem > free_mem:
            raise InsufficientResources(
                f"{vm_id} grow by {grow_cpu} cpu/{grow_mem} mem, free {free_cpu}/{free_mem}")
        vm.reserved = ResourceSpec(max(vm.spec.cpu_units, new_spec.cpu_units),
                                   max(vm.spec.mem_units, new_spec.mem_units))
        self.log.emit(self.engine.now, "infra", "vm-reconfig-start", vm=vm_id,
                      cpu=new_spec.cpu_units, mem=new_spec.mem_units)

        def applied(event) -> None:
            vm.spec = new_spec
            vm.reserved = new_spec
            self.log.emit(self.engine.now, "infra", "vm-reconfig-done", vm=vm_id,
                          cpu=new_spec.cpu_units, mem=new_spec.mem_units)
            if on_done is not None:
                on_done(vm)

        self._assert_capacity()
        self.engine.schedule_in(self.reconfig_delay, EventKind.SCENARIO_DIRECTIVE,
                                payload=("reconfig", vm_id), callback=applied)

    def restore(self, vm_id: str, on_running: Callable[[VmInstance], None] | None = None) -> None:
        vm = self.vms.get(vm_id)
        if vm is None or vm.status is not VmStatus.CRASHED:
            raise VmNotCrashed(vm_id)
        self._boot(vm, on_running)

    def stop(self, vm_id: str) -> None:
        vm = self.vms[vm_id]
        self._set_status(vm, VmStatus.OFF)
        vm.reserved = None

    def crash(self, vm: VmInstance, reason: str) -> None:
        vm.crashes += 1
        self._set_status(vm, VmStatus.CRASHED, why=reason)
        for listener in self.crash_listeners:
            listener(vm)
        self.engine.schedule(self.engine.now, EventKind.VM_CRASH, payload=vm.id)

    # -- data plane ---------------------------------------------------------

    def consume(self, vm_id: str, packet: Packet, cost: int, served: Outcome) -> Outcome:
        """Charge ``cost`` units for a packet on ``vm_id``; crash on overload."""
        vm = self.vms.get(vm_id)
        if vm is None or vm.status is not VmStatus.RUNNING:
            return Outcome.LOST
        index = packet.ts // self.check_window
        if index != vm.window_index:
            vm.window_index, vm.window_cost, vm.window_crash_load = index, 0, 0
        if packet.crash_payload:
            vm.window_crash_load += 1
            if crash_check(vm.window_crash_load, vm.spec.cpu_units, self.unit_pps,
                           self.overload_factor, self.check_window):
                self.crash(vm, "overload")
                return Outcome.LOST
        budget = vm.spec.cpu_units * self.unit_pps * self.check_window
        if (vm.window_cost + cost) * US_PER_S > budget:
            return Outcome.DEGRADED
        vm.window_cost += cost
        return served
