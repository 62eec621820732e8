"""Scenario files, mode runners and reports.

A scenario is a JSON document validated against ``schemas/scenario.schema.json``.
Parsing fills every section with its defaults, so ``parse -> to_dict ->
parse`` is a fixed point. :func:`run_scenario` returns a :class:`RunResult`
whose ``report`` is plain JSON data and whose ``timelines`` feed the
trace-event export.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .collectives import (alltoall_flat, alltoall_hierarchical, flat_transfers,
                          lower_transfers, spin_hops)
from .elastic import balance_scale_down, balance_scale_up, simulate_multitask, TaskAssignment
from .embedding import CommCounter, backward, forward, lower_step, partition_table
from .engine import Engine, Timeline
from .model_spec import InfeasibleError, MachineSpec, ModelSpec, check_feasibility, total_params
from .prefetch import CacheParams, run_2d_schedule
from .ring import RingPlan, simulate as ring_simulate, slot_safety_violations
from .topology import LinkClass, Topology
from .workload import RoutingTrace, gen_trace, imbalance_ratio

SCHEMA_VERSION = 1
MODES = ("plan", "train-sim", "infer-sim", "alltoall-bench", "elastic-plan", "embed-check")

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2

DEFAULTS = {
    "model": {"moe_layers": 1, "activation_prob": 1.0},
    "machine": {"gpus_per_node": 8},
    "topology": {"clusters": 1, "nodes_per_cluster": 1, "gpus_per_node": 8},
    "workload": {"seed": 0, "steps": 1, "ranks": 1, "experts": 8,
                 "tokens_per_rank": 256, "skew": 0.0},
    "cache": {"threshold": 1, "beta": 1.0, "k": 1},
    "prefetch": {"lookahead": 1, "compute_ns": 1_000_000, "per_token_ns": 0, "rank": 0,
                 "flush_period": None},
    "ring": {"dense_bytes": 0, "compute_ns": 1_000_000},
    "elastic": {"per_sample_ns": 1_000_000, "dense_bytes": 0, "sync_ns": None,
                "gpu_capacity": None},
    "embed": {"vocab": 64, "hidden": 8, "world_size": 4, "max_tokens_per_rank": 16,
              "instances": 1, "elem_bytes": 4},
    "alltoall": {"chunk_bytes": 1 << 20},
}

REQUIRED_SECTIONS = {
    "plan": ("model", "machine"),
    "train-sim": ("model", "machine", "cache"),
    "infer-sim": ("ring",),
    "alltoall-bench": (),
    "elastic-plan": ("elastic",),
    "embed-check": (),
}


class ScenarioError(ValueError):
    """Malformed scenario; exit code 2."""


def load_schema(name: str) -> dict:
    text = resources.files("moesim").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(instance, name: str) -> None:
    validator = jsonschema.Draft202012Validator(load_schema(name))
    errors = sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ScenarioError(f"{name} field '{where}': {err.message}")


@dataclass
class Scenario:
    mode: str
    seed: int = 0
    sections: dict = field(default_factory=dict)
    base_dir: Path = field(default=Path("."), compare=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "Scenario":
        validate(data, "scenario")
        sections = {}
        for name, defaults in DEFAULTS.items():
            if name in data:
                sections[name] = {**defaults, **copy.deepcopy(data[name])}
        if "topology" not in sections:
            sections["topology"] = dict(DEFAULTS["topology"])
        scenario = cls(mode=data["mode"], seed=data.get("seed", 0), sections=sections,
                       base_dir=Path(base_dir))
        scenario.check_mode()
        return scenario

    @classmethod
    def load(cls, path) -> "Scenario":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"scenario {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data, base_dir=path.parent)

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION, "mode": self.mode, "seed": self.seed}
        out.update(copy.deepcopy(self.sections))
        return out

    def check_mode(self) -> None:
        if self.mode not in MODES:
            raise ScenarioError(f"field 'mode': unknown mode {self.mode!r}")
        for name in REQUIRED_SECTIONS[self.mode]:
            if name not in self.sections:
                raise ScenarioError(f"field '{name}': required for mode {self.mode!r}")

    def with_overrides(self, mode=None, seed=None) -> "Scenario":
        data = self.to_dict()
        if mode is not None:
            data["mode"] = mode
        if seed is not None:
            data["seed"] = seed
            if "workload" in data:
                data["workload"]["seed"] = seed
        return Scenario.from_dict(data, base_dir=self.base_dir)

    # typed views
    def model(self) -> ModelSpec:
        return ModelSpec(**self.sections["model"])

    def machine(self) -> MachineSpec:
        return MachineSpec(**self.sections["machine"])

    def topology(self) -> Topology:
        return Topology.from_dict(self.sections["topology"])

    def trace(self) -> RoutingTrace:
        w = self.sections.get("workload", DEFAULTS["workload"])
        if "trace_file" in w:
            path = self.base_dir / w["trace_file"]
            if not path.exists():
                raise ScenarioError(f"field 'workload/trace_file': {path} does not exist")
            data = json.loads(path.read_text())
            validate(data, "routing_trace")
            return RoutingTrace.from_dict(data)
        return gen_trace(w["seed"], w["steps"], w["ranks"], w["experts"],
                         w["tokens_per_rank"], w["skew"])


@dataclass
class RunResult:
    report: dict
    timelines: dict = field(default_factory=dict)  # label -> Timeline

    @property
    def exit_code(self) -> int:
        return self.report["exit_code"]

    def report_json(self) -> str:
        return dumps(self.report)

    def trace_events(self) -> list:
        events = []
        for pid, label in enumerate(sorted(self.timelines)):
            tl = self.timelines[label]
            if len(tl):
                events.append({"name": "process_name", "ph": "M", "pid": pid, "tid": 0,
                               "args": {"name": label}})
            events.extend(tl.trace_events(pid=pid))
        return events


def dumps(data) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"


def export_trace(result: RunResult, path) -> None:
    text = json.dumps(result.trace_events(), sort_keys=True, indent=1) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write trace to {path}: {exc}") from exc


def _stream_metrics(tl: Timeline) -> dict:
    return {s: {"busy_ns": tl.busy_time(s), "idle_ns": tl.idle_time(s)} for s in tl.streams}


def _run_plan(sc: Scenario):
    model, machine = sc.model(), sc.machine()
    rep = check_feasibility(model, machine)
    metrics = {"total_params": total_params(model), "tiers": rep.to_dict(),
               "failing_tiers": rep.failing_tiers}
    return metrics, {"feasible": rep.ok}, {}, (EXIT_OK if rep.ok else EXIT_INFEASIBLE)


def _run_train(sc: Scenario):
    model, machine, topo = sc.model(), sc.machine(), sc.topology()
    trace = sc.trace()
    cp = CacheParams(**sc.sections["cache"])
    pf = sc.sections.get("prefetch", DEFAULTS["prefetch"])
    rep = check_feasibility(model, machine)
    if not rep.ok:
        metrics = {"tiers": rep.to_dict(), "failing_tiers": rep.failing_tiers}
        return metrics, {"feasible": False}, {}, EXIT_INFEASIBLE
    res = run_2d_schedule(model, machine, trace, topo, cp, rank=pf["rank"],
                          lookahead=pf["lookahead"], compute_ns=pf["compute_ns"],
                          per_token_ns=pf["per_token_ns"], flush_period=pf["flush_period"])
    tl = res.timeline
    sound = all(
        tl[c].start >= max((tl[d].end for d in tl[c].deps), default=0) for c in res.computes
    )
    metrics = {
        "makespan_ns": tl.makespan,
        "compute_ns": tl.busy_time("compute"),
        "stall_ns": res.total_stall,
        "exposed_stall_ns": res.exposed_stall,
        "steady_stall_ns": res.steady_stall,
        "streams": _stream_metrics(tl),
        "peak_memory": tl.peak_memory(),
        "cache_outcomes": res.outcome_counts(),
        "imbalance_ratio": imbalance_ratio(trace) if trace.counts.sum() else None,
        "tiers": rep.to_dict(),
    }
    verdicts = {
        "feasible": True,
        "prefetch_sound": sound,
        "cache_capacity_respected": len(res.cache.resident) <= cp.cpu_size,
    }
    return metrics, verdicts, {"train": tl}, EXIT_OK


def _run_infer(sc: Scenario):
    r = sc.sections["ring"]
    plan = RingPlan(r["num_layers"], r["ring_slots"], r["expert_bytes"], r["dense_bytes"],
                    r["compute_ns"] if isinstance(r["compute_ns"], int) else tuple(r["compute_ns"]))
    res = ring_simulate(plan, sc.topology())
    metrics = res.to_dict()
    metrics["ring_slots"] = plan.ring_slots
    metrics["memory_reduction"] = round(res.memory_reduction, 6)
    metrics["streams"] = _stream_metrics(res.timeline)
    verdicts = {"slot_safety": not slot_safety_violations(plan, res.timeline)}
    return metrics, verdicts, {"infer": res.timeline}, EXIT_OK


def _random_payload(rng, n, chunk_bytes):
    return [[rng.integers(0, 256, size=chunk_bytes, dtype=np.uint8).tobytes()
             for _ in range(n)] for _ in range(n)]


def _link_usage(transfers) -> dict:
    usage: dict = {}
    for t in transfers:
        phase = usage.setdefault(f"phase{t.phase}", {})
        for hop in t.path:
            phase[hop.value] = phase.get(hop.value, 0) + 1
    return {p: dict(sorted(v.items())) for p, v in sorted(usage.items())}


def _run_alltoall(sc: Scenario):
    topo = sc.topology()
    n = topo.num_gpus
    rng = np.random.Generator(np.random.Philox(sc.seed))
    payload = _random_payload(rng, n, sc.sections.get("alltoall", DEFAULTS["alltoall"])["chunk_bytes"])
    flat = alltoall_flat(payload)
    hier_log: list = []
    hier = alltoall_hierarchical(payload, topo, hier_log)
    flat_log = flat_transfers(payload, topo)

    flat_engine, hier_engine = Engine(topo), Engine(topo)
    lower_transfers(flat_engine, flat_log, label="flat")
    lower_transfers(hier_engine, hier_log, label="hier")
    flat_tl, hier_tl = flat_engine.run(), hier_engine.run()

    phase1_ok = all(all(h == LinkClass.NVLINK for h in t.path) for t in hier_log if t.phase == 1)
    phase2_ok = all(LinkClass.SPIN not in t.path and LinkClass.NVLINK not in t.path
                    for t in hier_log if t.phase == 2)
    metrics = {
        "ranks": n,
        "flat": {"makespan_ns": flat_tl.makespan, "link_usage": _link_usage(flat_log),
                 "spin_hops": spin_hops(flat_log)},
        "hierarchical": {"makespan_ns": hier_tl.makespan, "link_usage": _link_usage(hier_log),
                         "spin_hops": spin_hops(hier_log)},
    }
    verdicts = {
        "equivalent": flat == hier,
        "phase1_nvlink_only": phase1_ok,
        "phase2_same_rail_only": phase2_ok,
    }
    return metrics, verdicts, {"alltoall.flat": flat_tl, "alltoall.hierarchical": hier_tl}, EXIT_OK


def _run_elastic(sc: Scenario):
    e = sc.sections["elastic"]
    batches = e["batch_sizes"]
    topo = sc.topology()
    budget = e.get("gpu_budget", len(batches))
    balanced = balance_scale_up(batches, budget)
    imbalanced = TaskAssignment(gpus_per_task=tuple(1 for _ in batches))
    kw = dict(dense_bytes=e["dense_bytes"], sync_ns=e["sync_ns"])
    before = simulate_multitask(imbalanced, batches, e["per_sample_ns"], topo, **kw)
    after = simulate_multitask(balanced, batches, e["per_sample_ns"], topo, **kw)
    speedup = after.per_card_throughput / before.per_card_throughput - 1
    metrics = {
        "batch_sizes": list(batches),
        "scale_up": balanced.to_dict(),
        "imbalanced": before.to_dict(),
        "balanced": after.to_dict(),
        "per_card_speedup": round(speedup, 6),
    }
    timelines = {"elastic.imbalanced": before.timeline, "elastic.balanced": after.timeline}
    if e["gpu_capacity"] is not None:
        down = balance_scale_down(batches, e["gpu_capacity"])
        packed = simulate_multitask(down, batches, e["per_sample_ns"], topo, **kw)
        metrics["scale_down"] = down.to_dict()
        metrics["packed"] = packed.to_dict()
        timelines["elastic.packed"] = packed.timeline
    verdicts = {"balanced_faster_per_card": after.per_card_throughput > before.per_card_throughput}
    return metrics, verdicts, timelines, EXIT_OK


def _run_embed(sc: Scenario):
    cfg = sc.sections.get("embed", DEFAULTS["embed"])
    vocab, hidden, n = cfg["vocab"], cfg["hidden"], cfg["world_size"]
    rng = np.random.Generator(np.random.Philox(sc.seed))
    fwd_ok = bwd_ok = True
    calls = []
    for _ in range(cfg["instances"]):
        table = rng.integers(-100, 100, size=(vocab, hidden)).astype(np.float64)
        batch = [rng.integers(0, vocab, size=rng.integers(0, cfg["max_tokens_per_rank"] + 1))
                 for _ in range(n)]
        shards = partition_table(table, n)
        comm = CommCounter()
        out = forward(shards, batch, vocab, comm)
        fwd_calls = comm.alltoall_calls
        fwd_ok &= all(np.array_equal(out[r], table[batch[r]]) for r in range(n))
        grads = [rng.integers(-10, 10, size=(len(b), hidden)).astype(np.float64) for b in batch]
        shard_grads = backward(shards, batch, grads, vocab, comm)
        dense = np.zeros((shards[0].hi * n, hidden))
        for b, g in zip(batch, grads):
            np.add.at(dense, b, g)
        bwd_ok &= np.array_equal(np.concatenate(shard_grads), dense)
        calls.append((fwd_calls, comm.alltoall_calls))

    topo = sc.topology()
    if topo.num_gpus != n:
        topo = Topology(1, 1, n, links=topo.links)
    engine = Engine(topo)
    lower_step(engine, batch, shards[0].hi - shards[0].lo, hidden, elem_bytes=cfg["elem_bytes"])
    tl = engine.run()
    baseline = vocab * hidden * cfg["elem_bytes"]
    per_shard = (shards[0].hi - shards[0].lo) * hidden * cfg["elem_bytes"]
    metrics = {
        "forward_alltoalls": calls[-1][0],
        "step_alltoalls": calls[-1][1],
        "shard_bytes": per_shard,
        "replicated_table_bytes": baseline,
        "step_comm_makespan_ns": tl.makespan,
    }
    verdicts = {
        "forward_matches_oracle": bool(fwd_ok),
        "backward_matches_oracle": bool(bwd_ok),
        "three_alltoalls_per_step": all(c == (2, 3) for c in calls),
    }
    return metrics, verdicts, {"embed": tl}, EXIT_OK


_RUNNERS = {
    "plan": _run_plan,
    "train-sim": _run_train,
    "infer-sim": _run_infer,
    "alltoall-bench": _run_alltoall,
    "elastic-plan": _run_elastic,
    "embed-check": _run_embed,
}


def run_scenario(sc: Scenario) -> RunResult:
    sc.check_mode()
    try:
        metrics, verdicts, timelines, code = _RUNNERS[sc.mode](sc)
    except InfeasibleError as exc:
        metrics = {"tiers": exc.report.to_dict(), "failing_tiers": exc.report.failing_tiers}
        verdicts, timelines, code = {"feasible": False}, {}, EXIT_INFEASIBLE
    except ScenarioError:
        raise
    except (TypeError, KeyError, ValueError) as exc:
        raise ScenarioError(f"incomplete configuration for mode {sc.mode!r}: {exc}") from exc
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool_version": __version__,
        "mode": sc.mode,
        "scenario": sc.to_dict(),
        "metrics": _jsonable(metrics),
        "verdicts": {k: bool(v) for k, v in verdicts.items()},
        "exit_code": code,
    }
    validate(report, "report")
    return RunResult(report, timelines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj
