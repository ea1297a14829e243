"""Flow-feature anomaly detector running on VM3.

Models are trained elsewhere and only loaded here. Two kinds exist: static
thresholds and a per-feature z-score against a clean baseline. Scoring is a
pure function of the feature vectors and the model.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .engine import SimTime
from .eventlog import EventLog
from .flowpipe import FEATURE_NAMES, FeatureVector, FlowPipe


class ModelKind(str, Enum):
    THRESHOLD = "Threshold"
    ZSCORE = "ZScore"


class Reason(str, Enum):
    RATE_EXCEEDED = "RateExceeded"
    PORT_SCAN = "PortScanPattern"
    BEACON = "BeaconPattern"
    ZSCORE = "ZScoreExceeded"


class InvalidParameters(ValueError):
    pass


class StaleModel(ValueError):
    pass


class EmptyDump(ValueError):
    pass


class DegenerateFeature(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdParams:
    max_pps: float
    max_flows_per_window: float
    min_mean_packet_size: float
    watch_ports: frozenset[int] = frozenset()

    def validate(self) -> None:
        for name in ("max_pps", "max_flows_per_window", "min_mean_packet_size"):
            value = getattr(self, name)
            if not value > 0 or math.isnan(value):
                raise InvalidParameters(f"{name} must be > 0, got {value}")
        if any(not 0 <= p <= 65535 for p in self.watch_ports):
            raise InvalidParameters("watch ports must be 16-bit")


@dataclass(frozen=True)
class ZScoreParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    z_threshold: float = 3.0

    def validate(self) -> None:
        if len(self.mean) != len(FEATURE_NAMES) or len(self.std) != len(FEATURE_NAMES):
            raise InvalidParameters(f"z-score baseline needs {len(FEATURE_NAMES)} features")
        for name, s in zip(FEATURE_NAMES, self.std):
            if not s > 0 or math.isinf(s):
                raise InvalidParameters(f"stddev of {name} must be > 0, got {s}")
        if any(math.isnan(m) or math.isinf(m) for m in self.mean):
            raise InvalidParameters("baseline means must be finite")
        if not self.z_threshold > 0:
            raise InvalidParameters("z_threshold must be > 0")


@dataclass(frozen=True)
class DetectorModel:
    version: int
    kind: ModelKind
    params: ThresholdParams | ZScoreParams

    def __post_init__(self) -> None:
        expected = ThresholdParams if self.kind is ModelKind.THRESHOLD else ZScoreParams
        if not isinstance(self.params, expected):
            raise InvalidParameters(f"{self.kind.value} model needs {expected.__name__}")
        self.params.validate()

    @property
    def decision_threshold(self) -> float:
        if isinstance(self.params, ZScoreParams):
            return self.params.z_threshold
        return 1.0

    def to_dict(self) -> dict:
        p = self.params
        if isinstance(p, ThresholdParams):
            params = {
                "max_pps": _finite_or_none(p.max_pps),
                "max_flows_per_window": _finite_or_none(p.max_flows_per_window),
                "min_mean_packet_size": p.min_mean_packet_size,
                "watch_ports": sorted(p.watch_ports),
            }
        else:
            params = {
                "z_threshold": p.z_threshold,
                "features": {
                    name: {"mean": m, "std": s}
                    for name, m, s in zip(FEATURE_NAMES, p.mean, p.std)
                },
            }
        return {"kind": self.kind.value, "version": self.version, "parameters": params}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DetectorModel":
        try:
            kind = ModelKind(doc["kind"])
            version = int(doc["version"])
            params = doc["parameters"]
            if kind is ModelKind.THRESHOLD:
                built: ThresholdParams | ZScoreParams = ThresholdParams(
                    max_pps=_none_to_inf(params["max_pps"]),
                    max_flows_per_window=_none_to_inf(params["max_flows_per_window"]),
                    min_mean_packet_size=float(params["min_mean_packet_size"]),
                    watch_ports=frozenset(int(x) for x in params.get("watch_ports", [])),
                )
            else:
                feats = params["features"]
                unknown = set(feats) - set(FEATURE_NAMES)
                if unknown:
                    raise InvalidParameters(f"unknown features {sorted(unknown)}")
                built = ZScoreParams(
                    mean=tuple(float(feats[n]["mean"]) for n in FEATURE_NAMES),
                    std=tuple(float(feats[n]["std"]) for n in FEATURE_NAMES),
                    z_threshold=float(params.get("z_threshold", 3.0)),
                )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, InvalidParameters):
                raise
            raise InvalidParameters(f"malformed model document: {exc}") from exc
        return cls(version, kind, built)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _finite_or_none(x: float) -> float | None:
    return None if math.isinf(x) else x


def _none_to_inf(x) -> float:
    return math.inf if x is None else float(x)


def disabled_model(version: int = 1) -> DetectorModel:
    return DetectorModel(version, ModelKind.THRESHOLD,
                         ThresholdParams(math.inf, math.inf, 1.0, frozenset()))


@dataclass(frozen=True)
class AnomalyVerdict:
    device: int
    score: float
    flagged: bool
    model_version: int
    window_end: SimTime
    reason: Reason


def _threshold_score(fv: FeatureVector, p: ThresholdParams) -> tuple[float, Reason]:
    rate = fv.pps / p.max_pps
    if fv.mean_packet_size < p.min_mean_packet_size:
        # small packets at the same rate weigh heavier
        rate *= p.min_mean_packet_size / fv.mean_packet_size
    scan = fv.flow_count / p.max_flows_per_window
    beacon = 1.0 if p.watch_ports.intersection(fv.dst_ports) else 0.0
    candidates = [(rate, Reason.RATE_EXCEEDED), (scan, Reason.PORT_SCAN), (beacon, Reason.BEACON)]
    best = max(c[0] for c in candidates)
    return best, next(r for s, r in candidates if s == best)


def zscores(fv: FeatureVector, p: ZScoreParams) -> tuple[float, ...]:
    return tuple(abs(x - m) / s for x, m, s in zip(fv.values(), p.mean, p.std))


def score_vector(fv: FeatureVector, model: DetectorModel) -> AnomalyVerdict:
    if isinstance(model.params, ThresholdParams):
        score, reason = _threshold_score(fv, model.params)
    else:
        score, reason = max(zscores(fv, model.params)), Reason.ZSCORE
    return AnomalyVerdict(fv.device, score, score >= model.decision_threshold,
                          model.version, fv.window_end, reason)


def score_window(features: Iterable[FeatureVector], model: DetectorModel) -> list[AnomalyVerdict]:
    return [score_vector(fv, model) for fv in features]


@dataclass(frozen=True)
class SwapReport:
    old_version: int
    new_version: int
    swapped_at: SimTime
    first_window_end: SimTime


class Detector:
    """Scores each closed window and forwards flagged verdicts."""

    def __init__(self, flows: FlowPipe, model: DetectorModel, log: EventLog | None = None,
                 on_flagged: Callable[[list[AnomalyVerdict]], None] | None = None):
        self.flows = flows
        self.model = model
        self.log = log
        self.on_flagged = on_flagged
        self.window = flows.window
        self.enabled = True
        self.verdicts: list[AnomalyVerdict] = []
        self.features: list[FeatureVector] = []
        self.keep_features = False

    def next_window_end(self, now: SimTime) -> SimTime:
        return (now // self.window + 1) * self.window

    def tick(self, now: SimTime) -> list[AnomalyVerdict]:
        """Score the window that closes at ``now``."""
        start = now - self.window
        vectors = self.flows.build_features(start, now)
        self.flows.discard_before(now)
        if self.keep_features:
            self.features.extend(vectors)
        verdicts = score_window(vectors, self.model)
        self.verdicts.extend(verdicts)
        if self.log is not None:
            for v in verdicts:
                self.log.emit(now, "detector", "verdict", dev=v.device, win=v.window_end,
                              ver=v.model_version, score=f"{v.score:.6f}", flag=v.flagged,
                              why=v.reason)
        flagged = [v for v in verdicts if v.flagged]
        if flagged and self.on_flagged is not None:
            self.on_flagged(flagged)
        return verdicts

    def swap_model(self, new: DetectorModel, now: SimTime) -> SwapReport:
        if new.version <= self.model.version:
            raise StaleModel(f"version {new.version} is not newer than {self.model.version}")
        new.params.validate()
        old = self.model
        self.model = new
        report = SwapReport(old.version, new.version, now, self.next_window_end(now))
        if self.log is not None:
            self.log.emit(now, "detector", "swap", old=old.version, new=new.version,
                          kind=new.kind, first=report.first_window_end)
        return report


def train_zscore(vectors: Iterable[FeatureVector], version: int = 1,
                 z_threshold: float = 3.0) -> DetectorModel:
    """Fit per-feature mean and population stddev from a clean run."""
    rows = [fv.values() for fv in vectors]
    if not rows:
        raise EmptyDump("feature dump contains no vectors")
    columns = list(zip(*rows))
    means = tuple(statistics.fmean(col) for col in columns)
    stds = tuple(statistics.pstdev(col) for col in columns)
    flat = [name for name, s in zip(FEATURE_NAMES, stds) if s == 0]
    if flat:
        raise DegenerateFeature(
            f"constant feature(s) {', '.join(flat)}; widen the clean run so they vary")
    return DetectorModel(version, ModelKind.ZSCORE, ZScoreParams(means, stds, z_threshold))


@dataclass
class DetectionMetrics:
    tpr: float | None
    fpr: float | None
    mean_detection_latency: float | None  # seconds
    detected: list[int] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)


def detection_metrics(malicious: Mapping[int, bool], first_flag: Mapping[int, SimTime],
                      attack_start: Mapping[int, SimTime]) -> DetectionMetrics:
    """Rates over devices; latency is first flag minus first malicious emission."""
    bad = sorted(d for d, m in malicious.items() if m)
    good = sorted(d for d, m in malicious.items() if not m)
    detected = [d for d in bad if d in first_flag]
    fps = [d for d in good if d in first_flag]
    lat = [first_flag[d] - attack_start[d] for d in detected if d in attack_start]
    return DetectionMetrics(
        tpr=len(detected) / len(bad) if bad else None,
        fpr=len(fps) / len(good) if good else None,
        mean_detection_latency=(sum(lat) / len(lat) / 1e6) if lat else None,
        detected=detected,
        false_positives=fps,
    )
