"""Metrics report computed purely from event-log lines."""

from __future__ import annotations

from collections import Counter, defaultdict
from typing import Any, Iterable

from .detector import detection_metrics
from .eventlog import parse_line
from .flowpipe import RECORD_BYTES

ISOLATION_TARGETS = {"VM4", "VM4a"}


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def compute_metrics(lines: Iterable[str]) -> dict[str, Any]:
    malicious: dict[int, bool] = {}
    outcomes: dict[int, Counter] = defaultdict(Counter)
    first_bad_tx: dict[int, int] = {}
    first_flag: dict[int, int] = {}
    isolated_at: dict[int, int] = {}
    vm4b_at: dict[int, int] = {}
    inspected_devices: set[int] = set()
    verdicts: dict[int, str] = {}
    runs: dict[str, dict[str, Any]] = {}
    vm_crash_at: dict[str, int] = {}
    vm_stats: dict[str, dict[str, Any]] = defaultdict(
        lambda: {"crashes": 0, "restores": 0, "outages_s": []})
    alarms: Counter = Counter()
    mirrored_packets = mirrored_bytes = 0
    records = exported_packets = exported_bytes = 0
    header: dict[str, str] = {}
    end = 0
    n = 0

    for line in lines:
        n += 1
        parts = line.split(" ", 3)
        kind = parts[2]
        if kind == "pkt":
            rec = parse_line(line).fields
            dev = int(rec["dev"])
            out = rec["out"]
            outcomes[dev][f"{rec['to']}:{out}"] += 1
            if out != "dropped":
                mirrored_packets += 1
                mirrored_bytes += int(rec["len"])
            if rec["tag"] != "Normal" and dev not in first_bad_tx:
                first_bad_tx[dev] = int(parts[0])
            continue
        rec = parse_line(line)
        f = rec.fields
        if kind == "attach":
            malicious[int(f["dev"])] = f["mal"] == "1"
        elif kind == "verdict":
            dev = int(f["dev"])
            if f["flag"] == "1" and dev not in first_flag:
                first_flag[dev] = rec.t
        elif kind == "reroute":
            dev = int(f["dev"])
            if f["dst"] in ISOLATION_TARGETS and dev not in isolated_at:
                isolated_at[dev] = rec.t
            if f["dst"] == "VM4b":
                vm4b_at[dev] = rec.t
        elif kind == "inspect-on-vm1":
            inspected_devices.add(int(f["dev"]))
        elif kind == "dpi-verdict":
            verdicts[int(f["dev"])] = f["decision"]
        elif kind == "export":
            records += 1
            exported_packets += int(f["pkts"])
            exported_bytes += int(f["bytes"])
        elif kind == "run-start":
            runs[f["run"]] = {"run": int(f["run"]), "trigger": f["trigger"], "vm": f["vm"],
                              "started": rec.t, "state": "InFlight", "reason": None,
                              "ended": None, "steps": 0}
        elif kind == "run-end":
            r = runs[f["run"]]
            r.update(state=f["state"], reason=None if f["reason"] == "-" else f["reason"],
                     ended=rec.t, steps=int(f["steps"]))
        elif kind == "vm-status":
            vm = f["vm"]
            stats = vm_stats[vm]
            if f["dst"] == "Crashed":
                vm_stats[vm]["crashes"] += 1
                vm_crash_at[vm] = rec.t
            elif f["src"] == "Crashed" and f["dst"] == "Booting":
                vm_stats[vm]["restores"] += 1
            elif f["dst"] == "Running" and vm in vm_crash_at:
                vm_stats[vm]["outages_s"].append((rec.t - vm_crash_at.pop(vm)) / 1e6)
        elif kind == "alarm":
            alarms[f["what"]] += 1
        elif kind == "start":
            header = f
        elif kind == "end" and rec.module == "sim":
            end = rec.t

    for vm, t in vm_crash_at.items():
        vm_stats[vm]["outages_s"].append((end - t) / 1e6)

    legit = [d for d, m in malicious.items() if not m]
    bad = [d for d, m in malicious.items() if m]
    legit_counts: Counter = Counter()
    for d in legit:
        legit_counts.update(outcomes[d])
    legit_total = sum(legit_counts.values())
    suspicious: Counter = Counter()
    for d in bad:
        suspicious.update(outcomes[d])

    det = detection_metrics(malicious, first_flag, first_bad_tx)
    iso_lat = [(isolated_at[d] - first_flag[d]) / 1e6 for d in isolated_at if d in first_flag]
    under_inspection = set(isolated_at) | inspected_devices
    tallies = Counter(verdicts.values())
    tallies["Undecided"] = len(under_inspection - set(verdicts))

    return {
        "scenario": header.get("scenario"),
        "seed": int(header["seed"]) if "seed" in header else None,
        "baseline": header.get("baseline") == "1",
        "duration_s": end / 1e6,
        "legit_service_availability":
            legit_counts["VM1:served"] / legit_total if legit_total else None,
        "legit_packets": dict(sorted(legit_counts.items())),
        "suspicious_service": dict(sorted(suspicious.items())),
        "detection": {
            "tpr": det.tpr,
            "fpr": det.fpr,
            "mean_detection_latency_s": det.mean_detection_latency,
            "detected": len(det.detected),
            "false_positives": det.false_positives,
        },
        "isolation_latency_s": _mean(iso_lat),
        "isolated_devices": len(isolated_at),
        "protocol_runs": [runs[k] for k in sorted(runs, key=int)],
        "protocol_complete": sum(1 for r in runs.values() if r["state"] == "Complete"),
        "protocol_failed": sum(1 for r in runs.values() if r["state"] == "Failed"),
        "vms": {vm: vm_stats[vm] for vm in sorted(vm_stats)},
        "vm1_crash_count": vm_stats["VM1"]["crashes"] if "VM1" in vm_stats else 0,
        "flow_export": {
            "records": records,
            "observed_packets": mirrored_packets,
            "observed_bytes": mirrored_bytes,
            "exported_packets": exported_packets,
            "exported_bytes": exported_bytes,
            "packet_ratio": records / mirrored_packets if mirrored_packets else 0.0,
            "byte_ratio": records * RECORD_BYTES / mirrored_bytes if mirrored_bytes else 0.0,
        },
        "verdicts": {k: tallies.get(k, 0) for k in ("Attack", "Cleared", "Undecided")},
        "quarantine_vm4b_s": {str(d): (end - t) / 1e6 for d, t in sorted(vm4b_at.items())},
        "alarms": dict(sorted(alarms.items())),
        "log_lines": n,
    }
