"""Scenario files: parsing, system construction and the phased run.

A scenario is a YAML mapping. Unknown keys are rejected with the line they
appear on. A run has three phases: setup (DE creation and seeding, then a
settle period until every write is replicated), I/O (traffic counters are
reset first, fault times are relative to its start) and a quiet tail that
lets replication finish.
"""

from __future__ import annotations

import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .block_store import BlockKey
from .cloud_node import CloudNode
from .coordinator import Coordinator
from .crypto import SigScheme, make_keyrings
from .device import Device, DeviceConfig
from .simnet import InvariantViolation, Simulator, seconds
from .workloads import WORKLOADS

COORDINATOR_ID = 0
CLOUD_ID = 1
PRESET_DIR = Path(__file__).parent / "presets"

# bits per second (up, down) for the HOME network preset
HOME_WIRED = (32e6, 128e6)
HOME_MOBILE = (8e6, 16e6)


class ScenarioError(ValueError):
    pass


@dataclass
class DeviceSpec:
    id: int
    heartbeat: float = 0  # seconds; 0 picks the default for the power class
    battery: bool = False


def _default_devices() -> list[DeviceSpec]:
    return [DeviceSpec(2, 30), DeviceSpec(3, 30), DeviceSpec(4, 60, True)]


@dataclass
class FaultSpec:
    at: float
    action: str
    arg: Any = None


FAULT_ACTIONS = ("crash", "recover", "partition", "heal", "adversary", "cloud", "misbehave")


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    scheme: str = "HMAC"
    replication_target: int = 3
    network: str = "UNLIMITED"
    latency_ms: list = field(default_factory=lambda: [10, 50])
    devices: list[DeviceSpec] = field(default_factory=_default_devices)
    workload: dict = field(default_factory=lambda: {"name": "idle"})
    faults: list[FaultSpec] = field(default_factory=list)
    settle: float = 400
    io_limit: float = 7200
    quiet: float = 200
    trace: bool = True

    @property
    def sig_scheme(self) -> SigScheme:
        return SigScheme.parse(self.scheme)


_TOP_KEYS = set(Scenario.__dataclass_fields__)
_DEVICE_KEYS = set(DeviceSpec.__dataclass_fields__)


def _where(node) -> str:
    return f"line {node.start_mark.line + 1}"


def _check_keys(node, allowed: set[str], what: str) -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ScenarioError(f"{_where(node)}: {what} must be a mapping")
    for k, _ in node.value:
        if k.value not in allowed:
            raise ScenarioError(f"{_where(k)}: unknown key {k.value!r} in {what}")


def _validate(root) -> None:
    """Walk the YAML node tree so errors can quote line numbers."""
    _check_keys(root, _TOP_KEYS, "scenario")
    for k, v in root.value:
        if k.value == "devices":
            if not isinstance(v, yaml.SequenceNode):
                raise ScenarioError(f"{_where(v)}: devices must be a list")
            for item in v.value:
                _check_keys(item, _DEVICE_KEYS, "device")
        elif k.value == "faults":
            if not isinstance(v, yaml.SequenceNode):
                raise ScenarioError(f"{_where(v)}: faults must be a list")
            for item in v.value:
                _check_keys(item, {"at", *FAULT_ACTIONS}, "fault")
                actions = [fk.value for fk, _ in item.value if fk.value != "at"]
                if len(actions) != 1:
                    raise ScenarioError(f"{_where(item)}: a fault needs exactly one action")
        elif k.value == "workload":
            if not isinstance(v, yaml.MappingNode):
                raise ScenarioError(f"{_where(v)}: workload must be a mapping")


def set_dotted(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    cur = data
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ScenarioError(f"cannot set {dotted}: {p} is not a mapping")
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ScenarioError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw) if raw.strip() else ""


def from_dict(data: dict) -> Scenario:
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown keys: {sorted(unknown)}")
    data = dict(data)
    if data.get("scheme") is False:
        data["scheme"] = "OFF"  # YAML reads a bare OFF as a boolean
    if "devices" in data:
        data["devices"] = [DeviceSpec(**d) for d in data["devices"]]
    if "faults" in data:
        faults = []
        for f in data["faults"]:
            f = dict(f)
            at = f.pop("at", 0)
            if len(f) != 1 or next(iter(f)) not in FAULT_ACTIONS:
                raise ScenarioError(f"bad fault entry {f!r}")
            (action, arg), = f.items()
            faults.append(FaultSpec(float(at), action, arg))
        data["faults"] = faults
    sc = Scenario(**data)
    _check_semantics(sc)
    return sc


def _check_semantics(sc: Scenario) -> None:
    try:
        sc.sig_scheme
    except ValueError as exc:
        raise ScenarioError(str(exc)) from None
    if sc.network.upper() not in ("UNLIMITED", "HOME"):
        raise ScenarioError(f"unknown network preset {sc.network!r}")
    ids = [d.id for d in sc.devices]
    if len(set(ids)) != len(ids) or COORDINATOR_ID in ids or CLOUD_ID in ids:
        raise ScenarioError("device ids must be distinct and not 0 or 1")
    name = sc.workload.get("name")
    if name not in WORKLOADS:
        raise ScenarioError(f"unknown workload {name!r}; known: {sorted(WORKLOADS)}")


def load(source: str | Path, overrides: list[str] = ()) -> Scenario:
    """Load a scenario from a path or a preset name, applying overrides."""
    path = Path(source)
    if not path.exists():
        preset = PRESET_DIR / f"{source}.yaml"
        if not preset.exists():
            raise ScenarioError(f"no scenario file or preset named {source!r}")
        path = preset
    text = path.read_text()
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    if root is None:
        data: dict = {}
    else:
        try:
            _validate(root)
        except ScenarioError as exc:
            raise ScenarioError(f"{path}: {exc}") from None
        data = yaml.safe_load(text)
    for item in overrides:
        key, value = parse_override(item)
        set_dotted(data, key, value)
    return from_dict(data)


def list_presets() -> list[str]:
    return sorted(p.stem for p in PRESET_DIR.glob("*.yaml"))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class System:
    sim: Simulator
    coordinator: Coordinator
    cloud: CloudNode
    devices: dict[int, Device]


def build_system(sc: Scenario) -> System:
    scheme = sc.sig_scheme
    periods = {}
    for d in sc.devices:
        cfg = DeviceConfig(d.id, seconds(d.heartbeat), d.battery)
        periods[d.id] = cfg.heartbeat_period
    caps = {}
    if sc.network.upper() == "HOME":
        caps = {d.id: HOME_MOBILE if d.battery else HOME_WIRED for d in sc.devices}
    lo, hi = sc.latency_ms
    sim = Simulator(sc.seed, scheme, (seconds(lo / 1000), seconds(hi / 1000)), caps, trace=sc.trace)
    keys = make_keyrings(sorted(periods), [COORDINATOR_ID, CLOUD_ID], sc.seed,
                         with_rsa=scheme is SigScheme.ASYM_RSA2048)
    coordinator = sim.add(Coordinator(COORDINATOR_ID, {**periods, CLOUD_ID: seconds(10)},
                                      sc.replication_target, scheme))
    cloud = sim.add(CloudNode(CLOUD_ID, COORDINATOR_ID, sorted(periods), sc.replication_target,
                              scheme, keys[CLOUD_ID]))
    devices = {}
    for d in sc.devices:
        cfg = DeviceConfig(d.id, periods[d.id], d.battery, sc.replication_target, scheme, keys[d.id])
        devices[d.id] = sim.add(Device(cfg, COORDINATOR_ID, CLOUD_ID, periods))
    return System(sim, coordinator, cloud, devices)


def fully_replicated(system: System) -> bool:
    """Every write created so far has reached the replication target."""
    m = system.sim.metrics
    return len(m.replication_latency) >= len(m.write_created) and m.write_created.keys() <= m.replication_latency.keys()


@dataclass
class RunResult:
    scenario: Scenario
    system: System
    violation: InvariantViolation | None = None
    io_start: int = 0
    io_end: int = 0
    end: int = 0
    unfinished: list[int] = field(default_factory=list)

    @property
    def metrics(self):
        return self.system.sim.metrics

    @property
    def ok(self) -> bool:
        return self.violation is None


def _apply_fault(system: System, f: FaultSpec) -> None:
    sim = system.sim
    if f.action == "crash":
        sim.crash(f.arg)
    elif f.action == "recover":
        sim.recover(f.arg)
    elif f.action == "partition":
        sim.partition(f.arg if isinstance(f.arg, list) else [f.arg])
    elif f.action == "heal":
        sim.heal(f.arg if f.arg is None or isinstance(f.arg, list) else [f.arg])
    elif f.action == "adversary":
        _adversary(system, f.arg or {})
    elif f.action == "cloud":
        pol = system.cloud.policy
        arg = f.arg or {}
        pol.corrupt_blocks = {BlockKey(*k) for k in arg.get("corrupt", [])}
        pol.drop_blocks = {BlockKey(*k) for k in arg.get("drop", [])}
    elif f.action == "misbehave":
        dev = system.devices[f.arg["device"]]
        dev.ignore_revocations = bool(f.arg.get("ignore_revocations", True))


def _adversary(system: System, arg: dict) -> None:
    co = system.coordinator
    pol = co.policy
    if arg.get("clear"):
        pol.truncate_at.clear()
        pol.omit_updates.clear()
        pol.drop_lh_revocations = False
    for de, cut in (arg.get("truncate_at") or {}).items():
        de = int(de)
        pol.truncate_at[de] = co.states[de].head if cut == "head" else int(cut)
    for de, lo, hi in arg.get("omit", []):
        pol.omit_updates.add((de, lo, hi))
    if "drop_lh_revocations" in arg:
        pol.drop_lh_revocations = bool(arg["drop_lh_revocations"])


def run(sc: Scenario) -> RunResult:
    system = build_system(sc)
    sim = system.sim
    result = RunResult(sc, system)
    plan = WORKLOADS[sc.workload["name"]](
        system.devices, {k: v for k, v in sc.workload.items() if k != "name"}, random.Random(sc.seed)
    )
    try:
        sim.start()
        t = seconds(1)
        if plan.setup is not None:
            host = system.devices[plan.setup_device]
            sim.run(until=t)
            proc = host.spawn(plan.setup(), "setup")
            sim.run(until=t + seconds(sc.io_limit), stop=lambda: proc.result.done)
            if proc.result.error is not None:
                raise ScenarioError(f"setup failed: {proc.result.error!r}")
            if not proc.result.done:
                raise ScenarioError("setup did not finish")
            sim.run(until=sim.now + seconds(sc.settle), stop=lambda: fully_replicated(system))
        sim.run(until=sim.now + seconds(1))
        sim.metrics.reset_traffic()
        result.io_start = sim.now
        for f in sc.faults:
            sim.at(result.io_start + seconds(f.at), _apply_fault, system, f)
        procs = {d: system.devices[d].spawn(gen(), f"io-{d}") for d, gen in sorted(plan.io.items())}
        for p in procs.values():
            p.result.add_callback(lambda _f: None)  # failures are reported, not raised
        deadline = sim.now + seconds(sc.io_limit)
        if procs:
            sim.run(until=deadline, stop=lambda: all(p.result.done for p in procs.values()))
        last_fault = max((seconds(f.at) for f in sc.faults), default=0)
        if result.io_start + last_fault > sim.now:
            sim.run(until=result.io_start + last_fault)
        result.io_end = sim.now
        result.unfinished = [d for d, p in procs.items() if not p.result.done]
        sim.run(until=sim.now + seconds(sc.quiet))
    except InvariantViolation as exc:
        result.violation = exc
    result.end = sim.now
    return result


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

CSV_HEADER = "node,up_block,up_ctrl,down_block,down_ctrl,lease_switches"


def metrics_csv(result: RunResult) -> str:
    m = result.metrics
    rows = [CSV_HEADER]
    for nid in sorted(result.system.sim.nodes):
        c = m.nodes[nid]
        rows.append(f"{nid},{c.up_block},{c.up_control},{c.down_block},{c.down_control},{m.lease_acquired[nid]}")
    return "\n".join(rows) + "\n"


def upload_savings(new_block_bytes: int, target: int) -> int:
    """Bytes the writer avoids uploading compared with pushing ``target - 1``
    copies to peers directly: the cloud node takes one copy and serves it."""
    return max(0, target - 2) * new_block_bytes


def latency_summary(result: RunResult) -> dict:
    m = result.metrics
    lat = sorted(m.replication_latency.values())
    created = len(m.write_created)
    out = {"writes": created, "replicated": len(lat), "mean_s": None, "p95_s": None, "max_s": None}
    if lat:
        out["mean_s"] = statistics.fmean(lat) / 1e6
        out["p95_s"] = lat[min(len(lat) - 1, int(round(0.95 * (len(lat) - 1))))] / 1e6
        out["max_s"] = lat[-1] / 1e6
    return out


def throughput(result: RunResult) -> dict[int, float]:
    """Completed client ops per virtual second of the I/O phase, per device."""
    span = max(1, result.io_end - result.io_start) / 1e6
    done: dict[int, int] = {}
    for op in result.metrics.ops:
        if op.phase == "io" and op.ok:
            done[op.device] = done.get(op.device, 0) + 1
    return {d: n / span for d, n in sorted(done.items())}


def text_report(result: RunResult) -> str:
    sc = result.scenario
    m = result.metrics
    sim = result.system.sim
    roles = {nid: n.role for nid, n in sim.nodes.items()}
    lines = [f"scenario {sc.name}  seed {sc.seed}  scheme {sc.sig_scheme.value}  target {sc.replication_target}"]
    header = ("node", "role", "up_block", "up_ctrl", "down_block", "down_ctrl", "lease_switches", "savings")
    table = [header]
    for nid in sorted(sim.nodes):
        c = m.nodes[nid]
        table.append((
            str(nid), roles[nid], str(c.up_block), str(c.up_control), str(c.down_block),
            str(c.down_control), str(m.lease_acquired[nid]),
            str(upload_savings(c.up_new_block, sc.replication_target)) if roles[nid] == "device" else "-",
        ))
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    for r in table:
        lines.append("  ".join(v.rjust(w) for v, w in zip(r, widths)))
    lat = latency_summary(result)
    if lat["replicated"]:
        lines.append(
            f"replication latency: {lat['replicated']}/{lat['writes']} writes, "
            f"mean {lat['mean_s']:.2f} s, p95 {lat['p95_s']:.2f} s, max {lat['max_s']:.2f} s"
        )
    else:
        lines.append(f"replication latency: 0/{lat['writes']} writes replicated")
    switches = ", ".join(f"de {de}: {n}" for de, n in sorted(m.lease_switches.items())) or "none"
    lines.append(f"lease switches: {switches}")
    tp = throughput(result)
    if tp:
        lines.append("ops/s: " + ", ".join(f"device {d}: {v:.3f}" for d, v in tp.items()))
    if result.unfinished:
        lines.append(f"unfinished workers: {result.unfinished}")
    kinds = sorted({(f.kind, f.node) for f in m.faults})
    lines.append("faults: " + (", ".join(f"{k}@{n}" for k, n in kinds) or "none"))
    lines.append("oracles: " + ("PASS" if result.ok else f"FAIL {result.violation.description}"))
    return "\n".join(lines) + "\n"


def format_trace(trace: list[tuple]) -> str:
    out = ["time_us,event,src,dst,kind,de,bytes"]
    out += [",".join(str(x) for x in row) for row in trace]
    return "\n".join(out) + "\n"
