"""Scenario files: YAML documents validated against a strict schema.

Unknown keys are rejected everywhere so that a typo fails loudly instead of
silently falling back to a default. Times are given in seconds (``*_s``) or
milliseconds (``*_ms``) and converted to integer microseconds on load.
"""

from __future__ import annotations

from pathlib import Path
from typing import Annotated, Any, Literal, Optional

import yaml
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    NonNegativeFloat,
    PositiveFloat,
    PositiveInt,
    ValidationError,
    field_validator,
    model_validator,
)

from .detector import DetectorModel, InvalidParameters


class ScenarioParseError(ValueError):
    """Scenario could not be loaded; ``field`` and ``line`` locate the problem."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


Port = Annotated[int, Field(ge=0, le=65535)]


class HostConfig(_Strict):
    cpu_units: PositiveInt = 16
    mem_units: PositiveInt = 16
    unit_pps: PositiveInt = 10_000


class VmConfig(_Strict):
    cpu_units: PositiveInt
    mem_units: PositiveInt


class PolicyConfig(_Strict):
    mode: Literal["OnDemand", "Permanent"] = "OnDemand"
    topology: Literal["Combined", "Split"] = "Combined"
    idle_stop_after_s: Optional[PositiveFloat] = None

    @model_validator(mode="after")
    def _permanent_never_stops(self):
        if self.mode == "Permanent" and self.idle_stop_after_s is not None:
            raise ValueError("idle_stop_after_s is only valid with mode OnDemand")
        return self


class TimingConfig(_Strict):
    boot_delay_s: NonNegativeFloat = 2.0
    reconfig_delay_s: NonNegativeFloat = 0.5
    message_latency_ms: NonNegativeFloat = 10.0
    check_window_ms: PositiveFloat = 10.0


class CrashModelConfig(_Strict):
    overload_factor: PositiveFloat = 2.0
    dpi_cost: Annotated[int, Field(ge=0)] = 2


class SizingConfig(_Strict):
    per_device_pps: PositiveInt = 20


class FlowConfig(_Strict):
    active_timeout_s: PositiveFloat = 60.0
    inactive_timeout_s: PositiveFloat = 15.0
    window_s: PositiveFloat = 5.0
    sweep_s: PositiveFloat = 1.0


class ModelRef(_Strict):
    """Either an inline model document or a path to a model file."""

    inline: Optional[dict[str, Any]] = None
    file: Optional[str] = None

    @model_validator(mode="after")
    def _exactly_one(self):
        if (self.inline is None) == (self.file is None):
            raise ValueError("give exactly one of 'inline' or 'file'")
        return self


class ModelUpdate(_Strict):
    at_s: NonNegativeFloat
    model: ModelRef


class DetectorConfig(_Strict):
    model: ModelRef
    updates: list[ModelUpdate] = []


class SignatureConfig(_Strict):
    id: str
    tags: list[Literal["AttackSignature", "CncBeacon", "Normal"]] = Field(min_length=1)
    dst_ports: Optional[list[Port]] = None


class DpiConfig(_Strict):
    attack_match_threshold: PositiveInt = 3
    clear_min_packets: PositiveInt = 200
    signatures: list[SignatureConfig] = Field(min_length=1)


class LengthConfig(_Strict):
    constant: Optional[Annotated[int, Field(ge=20, le=65535)]] = None
    uniform: Optional[tuple[Annotated[int, Field(ge=20, le=65535)],
                            Annotated[int, Field(ge=20, le=65535)]]] = None

    @model_validator(mode="after")
    def _one_kind(self):
        if (self.constant is None) == (self.uniform is None):
            raise ValueError("give exactly one of 'constant' or 'uniform'")
        if self.uniform is not None and self.uniform[0] > self.uniform[1]:
            raise ValueError("uniform bounds must be ordered")
        return self


class WorkloadConfig(_Strict):
    packet_rate: PositiveFloat
    length: LengthConfig
    protocol_mix: dict[Literal["TCP", "UDP", "ICMP"], NonNegativeFloat]
    dst_ports: list[Port] = Field(min_length=1)

    @field_validator("protocol_mix")
    @classmethod
    def _weights_sum_to_one(cls, mix):
        if abs(sum(mix.values()) - 1.0) > 1e-9:
            raise ValueError("protocol weights must sum to 1")
        return mix


class DeviceGroup(_Strict):
    first_id: Annotated[int, Field(ge=0, le=65535)]
    count: PositiveInt
    workload: str
    attach_s: NonNegativeFloat = 0.0


class AttackConfig(_Strict):
    start_s: NonNegativeFloat
    stop_s: PositiveFloat
    bot_count: PositiveInt
    first_device_id: Annotated[int, Field(ge=0, le=65535)]
    flood_rate_per_bot: PositiveFloat
    profile: Literal["Bot", "AttackerDirect"] = "Bot"
    beacon_period_s: Optional[PositiveFloat] = None
    beacon_lead_s: NonNegativeFloat = 0.0
    crash_payload: bool = False
    flood_port: Port = 80
    flood_length: Annotated[int, Field(ge=20, le=65535)] = 64
    cnc_port: Port = 4444

    @model_validator(mode="after")
    def _window(self):
        if self.start_s >= self.stop_s:
            raise ValueError("start_s must be before stop_s")
        if self.beacon_lead_s > self.start_s:
            raise ValueError("beacon_lead_s reaches before t=0")
        return self


class DirectiveConfig(_Strict):
    at_s: NonNegativeFloat
    action: Literal["crash_vm"]
    vm: str


class Scenario(_Strict):
    name: str
    description: str = ""
    seed: Annotated[int, Field(ge=0, lt=2**64)] = 0
    duration_s: PositiveFloat
    baseline: bool = False
    host: HostConfig = HostConfig()
    vms: dict[str, VmConfig]
    vm4_policy: PolicyConfig = PolicyConfig()
    timing: TimingConfig = TimingConfig()
    crash_model: CrashModelConfig = CrashModelConfig()
    sizing: SizingConfig = SizingConfig()
    flows: FlowConfig = FlowConfig()
    detector: DetectorConfig
    dpi: DpiConfig
    workloads: dict[str, WorkloadConfig] = {}
    devices: list[DeviceGroup] = []
    attacks: list[AttackConfig] = []
    directives: list[DirectiveConfig] = []

    # resolved model documents keyed by position: "base", "update.<i>"
    _models: dict[str, DetectorModel] = {}

    @model_validator(mode="after")
    def _cross_checks(self):
        for required in ("VM1", "VM2", "VM3"):
            if required not in self.vms:
                raise ValueError(f"vms must define {required}")
        allowed = {"VM1", "VM2", "VM3", "VM4", "VM4a", "VM4b"}
        unknown = set(self.vms) - allowed
        if unknown:
            raise ValueError(f"unknown VM ids {sorted(unknown)}")
        permanent = self.vm4_policy.mode == "Permanent"
        iso = {"VM4"} if self.vm4_policy.topology == "Combined" else {"VM4a", "VM4b"}
        present = iso & set(self.vms)
        if permanent and present != iso:
            raise ValueError(f"Permanent mode needs initial {sorted(iso)}")
        if not permanent and present:
            raise ValueError("OnDemand mode starts without isolation VMs")
        stray = (set(self.vms) - {"VM1", "VM2", "VM3"}) - iso
        if stray:
            raise ValueError(f"VMs {sorted(stray)} do not belong to topology "
                             f"{self.vm4_policy.topology}")
        ids: set[int] = set()
        for group in self.devices:
            if group.workload not in self.workloads:
                raise ValueError(f"device group {group.first_id} uses unknown workload "
                                 f"'{group.workload}'")
            if group.attach_s >= self.duration_s:
                raise ValueError(f"device group {group.first_id} attaches after the run ends")
            span = set(range(group.first_id, group.first_id + group.count))
            if span & ids:
                raise ValueError(f"device ids overlap at group {group.first_id}")
            ids |= span
        for attack in self.attacks:
            if attack.stop_s > self.duration_s:
                raise ValueError("attack stop_s is beyond duration_s")
            span = set(range(attack.first_device_id, attack.first_device_id + attack.bot_count))
            if span & ids:
                raise ValueError(f"attack devices overlap existing ids at "
                                 f"{attack.first_device_id}")
            ids |= span
        if max(ids, default=0) > 65535:
            raise ValueError("device ids must fit in 16 bits")
        for d in self.directives:
            if d.at_s > self.duration_s:
                raise ValueError("directive after the end of the run")
        for u in self.detector.updates:
            if u.at_s > self.duration_s:
                raise ValueError("model update after the end of the run")
        if self.flows.window_s > self.duration_s:
            raise ValueError("detector window longer than the run")
        return self


def _line_for(root: yaml.Node | None, loc: tuple) -> int | None:
    node = root
    line = None
    for key in loc:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == str(key):
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
            line = node.start_mark.line + 1
        else:
            break
        if node is None:
            break
    return line


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioParseError(str(exc)) from exc
    return parse_scenario(text, base_dir=path.parent)


def parse_scenario(text: str, base_dir: str | Path = ".") -> Scenario:
    try:
        doc = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise ScenarioParseError(str(exc.problem), line=mark.line + 1 if mark else None) from exc
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario must be a mapping")
    try:
        scenario = Scenario.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = tuple(err["loc"])
        field = ".".join(str(p) for p in loc)
        raise ScenarioParseError(err["msg"], field=field or None,
                                 line=_line_for(root, loc)) from exc
    models = {"base": _resolve_model(scenario.detector.model, base_dir, ("detector", "model"),
                                     root)}
    for i, update in enumerate(scenario.detector.updates):
        models[f"update.{i}"] = _resolve_model(update.model, base_dir,
                                               ("detector", "updates", i, "model"), root)
    object.__setattr__(scenario, "_models", models)
    return scenario


def _resolve_model(ref: ModelRef, base_dir, loc: tuple, root) -> DetectorModel:
    try:
        if ref.file is not None:
            model_path = Path(base_dir) / ref.file
            return DetectorModel.load(model_path)
        return DetectorModel.from_dict(ref.inline)
    except (InvalidParameters, OSError, ValueError) as exc:
        raise ScenarioParseError(str(exc), field=".".join(str(p) for p in loc),
                                 line=_line_for(root, loc)) from exc


def scenario_models(scenario: Scenario) -> dict[str, DetectorModel]:
    return scenario._models
