"""Control plane: A/B prompt experiments, request routing, agent gates.

Routing is stateless and replay-safe: a request lands in the candidate arm
iff its allocation coordinate falls below the experiment's allocation
fraction. The coordinate is pinned as::

    mix64(fnv1a64(utf8(experiment_id) || 0x1F || utf8(request_key))) / 2^64

where fnv1a64 is the 64-bit FNV-1a digest and mix64 is the splitmix64
finalizer. The finalizer is required: raw FNV-1a top bits are not uniform
enough over short, similar keys to hold an allocation fraction.

Per-arm outcome statistics use Welford's online update, and every outcome
is also logged as an experiment_event record, so the control and candidate
groups are reconstructible from the log alone.

Promotion is a mean-difference rule with a per-arm sample floor. A promote
decision emits a proposal for a human to act on; it never activates the
candidate version unless the server was configured with auto_promote.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Mapping

from .clock import now_ms
from .errors import (
    ExperimentAlreadyRunning,
    ExperimentNotRunning,
    PausedAgent,
    ScoreOutOfRange,
    UnknownBinding,
    UnknownExperiment,
    UnknownVersion,
    ValidationError,
)
from .model import check_id, new_id
from .registry import PromptRegistry
from .storage import LogRecord, Store, check_project_id

ARMS = ("control", "candidate")

DEFAULT_ALLOCATION = 0.05
DEFAULT_MIN_SAMPLES = 50
DEFAULT_PROMOTION_DELTA = 0.05

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_SEPARATOR = b"\x1f"


_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def mix64(h: int) -> int:
    """splitmix64 finalizer: full-avalanche mixing of a 64-bit value."""
    h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
    return h ^ (h >> 31)


def allocation_hash(experiment_id: str, request_key: str) -> float:
    """Uniform [0, 1) allocation coordinate for a request key."""
    digest = fnv1a64(experiment_id.encode("utf-8") + _SEPARATOR + request_key.encode("utf-8"))
    return mix64(digest) / 2.0**64



@dataclass
class ArmStats:
    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    @property
    def variance(self) -> float:
        """Sample variance (n-1 denominator); 0.0 for fewer than 2 samples."""
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    def to_wire(self) -> dict:
        return {"n": self.n, "mean": self.mean, "m2": self.m2}


@dataclass
class ExperimentState:
    experiment_id: str
    project_id: str
    prompt_name: str
    control_version: int
    candidate_version: int
    allocation_fraction: float = DEFAULT_ALLOCATION
    objective_metric: str = "quality"
    min_samples_per_arm: int = DEFAULT_MIN_SAMPLES
    promotion_delta: float = DEFAULT_PROMOTION_DELTA
    status: str = "running"
    control_stats: ArmStats = field(default_factory=ArmStats)
    candidate_stats: ArmStats = field(default_factory=ArmStats)

    def arm(self, name: str) -> ArmStats:
        return self.control_stats if name == "control" else self.candidate_stats

    def to_wire(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "project_id": self.project_id,
            "prompt_name": self.prompt_name,
            "control_version": self.control_version,
            "candidate_version": self.candidate_version,
            "allocation_fraction": self.allocation_fraction,
            "objective_metric": self.objective_metric,
            "min_samples_per_arm": self.min_samples_per_arm,
            "promotion_delta": self.promotion_delta,
            "status": self.status,
            "control_stats": self.control_stats.to_wire(),
            "candidate_stats": self.candidate_stats.to_wire(),
        }

    @classmethod
    def from_wire(cls, raw: Mapping) -> ExperimentState:
        return cls(
            experiment_id=raw["experiment_id"],
            project_id=raw["project_id"],
            prompt_name=raw["prompt_name"],
            control_version=raw["control_version"],
            candidate_version=raw["candidate_version"],
            allocation_fraction=raw["allocation_fraction"],
            objective_metric=raw["objective_metric"],
            min_samples_per_arm=raw["min_samples_per_arm"],
            promotion_delta=raw["promotion_delta"],
            status=raw["status"],
            control_stats=ArmStats(**raw["control_stats"]),
            candidate_stats=ArmStats(**raw["candidate_stats"]),
        )


def decide(state: ExperimentState) -> str:
    """Promotion rule, isolated so a sequential test could replace it."""
    ctrl, cand = state.control_stats, state.candidate_stats
    if ctrl.n < state.min_samples_per_arm or cand.n < state.min_samples_per_arm:
        return "continue"
    if cand.mean - ctrl.mean > state.promotion_delta:
        return "promote"
    if ctrl.mean - cand.mean > state.promotion_delta:
        return "stop_inferior"
    return "continue"


class ControlPlane:
    def __init__(self, store: Store, registry: PromptRegistry) -> None:
        self._store = store
        self._registry = registry
        self._lock = threading.Lock()
        self._experiments: dict[str, ExperimentState] = {}
        self._running: dict[tuple[str, str], str] = {}  # binding -> experiment_id
        self._agents: dict[tuple[str, str], dict] = {}

    # -- fold ----------------------------------------------------------------

    def apply(self, record: LogRecord) -> None:
        if record.kind == "experiment_event":
            p = record.payload
            event = p["event"]
            if event == "started":
                state = ExperimentState.from_wire(p["state"])
                self._experiments[state.experiment_id] = state
                self._running[(state.project_id, state.prompt_name)] = state.experiment_id
            elif event == "outcome":
                state = self._experiments.get(p["experiment_id"])
                if state is not None and state.status == "running":
                    state.arm(p["arm"]).update(p["score"])
            elif event == "decision":
                state = self._experiments.get(p["experiment_id"])
                if state is not None and p["decision"] in ("promote", "stop_inferior"):
                    state.status = "promoted" if p["decision"] == "promote" else "stopped"
                    self._running.pop((state.project_id, state.prompt_name), None)
            elif event == "stopped":
                state = self._experiments.get(p["experiment_id"])
                if state is not None:
                    state.status = "stopped"
                    self._running.pop((state.project_id, state.prompt_name), None)
        elif record.kind == "agent_state":
            p = record.payload
            self._agents[(p["project_id"], p["agent_name"])] = dict(p)

    # -- experiments -----------------------------------------------------------

    def start_experiment(
        self,
        project_id: str,
        prompt_name: str,
        candidate_version: int,
        *,
        control_version: int | None = None,
        allocation_fraction: float = DEFAULT_ALLOCATION,
        objective_metric: str = "quality",
        min_samples_per_arm: int = DEFAULT_MIN_SAMPLES,
        promotion_delta: float = DEFAULT_PROMOTION_DELTA,
    ) -> ExperimentState:
        check_project_id(project_id)
        check_id(prompt_name, "prompt_name")
        check_id(objective_metric, "objective_metric")
        with self._lock:
            if (project_id, prompt_name) in self._running:
                raise ExperimentAlreadyRunning(
                    f"an experiment is already running on {prompt_name!r} in {project_id!r}"
                )
            if control_version is None:
                control_version = self._registry.active_version(project_id, prompt_name)
                if control_version is None:
                    raise UnknownBinding(
                        f"no active binding for {prompt_name!r} in {project_id!r}"
                    )
            latest = self._registry.latest_version(prompt_name)
            for label, version in (("control_version", control_version), ("candidate_version", candidate_version)):
                if not isinstance(version, int) or not 1 <= version <= latest:
                    raise UnknownVersion(f"{label} {version} does not exist for {prompt_name!r}")
            if control_version == candidate_version:
                raise ValidationError("candidate_version", "must differ from control_version")
            if not 0.0 < allocation_fraction <= 0.5:
                raise ValidationError("allocation_fraction", "must lie in (0, 0.5]")
            if not isinstance(min_samples_per_arm, int) or min_samples_per_arm < 1:
                raise ValidationError("min_samples_per_arm", "must be a positive integer")
            if promotion_delta < 0:
                raise ValidationError("promotion_delta", "must be >= 0")
            state = ExperimentState(
                experiment_id=new_id("exp-"),
                project_id=project_id,
                prompt_name=prompt_name,
                control_version=control_version,
                candidate_version=candidate_version,
                allocation_fraction=allocation_fraction,
                objective_metric=objective_metric,
                min_samples_per_arm=min_samples_per_arm,
                promotion_delta=promotion_delta,
            )
            self._store.append(
                project_id,
                "experiment_event",
                {"event": "started", "state": state.to_wire(), "at": now_ms()},
            )
            return self._experiments[state.experiment_id]

    def get_experiment(self, experiment_id: str) -> ExperimentState:
        state = self._experiments.get(experiment_id)
        if state is None:
            raise UnknownExperiment(f"unknown experiment {experiment_id!r}")
        return state

    def running_experiment(self, project_id: str, prompt_name: str) -> ExperimentState | None:
        eid = self._running.get((project_id, prompt_name))
        return self._experiments.get(eid) if eid else None

    def record_outcome(self, experiment_id: str, arm: str, score: float) -> ExperimentState:
        if arm not in ARMS:
            raise ValidationError("arm", "must be 'control' or 'candidate'")
        if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
            raise ScoreOutOfRange(f"score must lie in [0, 1], got {score!r}")
        with self._lock:
            state = self.get_experiment(experiment_id)
            if state.status != "running":
                raise ExperimentNotRunning(f"experiment {experiment_id!r} is {state.status}")
            self._store.append(
                state.project_id,
                "experiment_event",
                {
                    "event": "outcome",
                    "experiment_id": experiment_id,
                    "project_id": state.project_id,
                    "arm": arm,
                    "score": float(score),
                    "at": now_ms(),
                },
            )
            return state

    def evaluate_experiment(self, experiment_id: str) -> tuple[str, ExperimentState]:
        """Apply the promotion rule; terminal decisions freeze the experiment."""
        with self._lock:
            state = self.get_experiment(experiment_id)
            if state.status != "running":
                raise ExperimentNotRunning(f"experiment {experiment_id!r} is {state.status}")
            decision = decide(state)
            if decision != "continue":
                self._store.append(
                    state.project_id,
                    "experiment_event",
                    {
                        "event": "decision",
                        "experiment_id": experiment_id,
                        "decision": decision,
                        "at": now_ms(),
                    },
                )
            return decision, state

    def stop_experiment(self, experiment_id: str) -> ExperimentState:
        with self._lock:
            state = self.get_experiment(experiment_id)
            if state.status != "running":
                raise ExperimentNotRunning(f"experiment {experiment_id!r} is {state.status}")
            self._store.append(
                state.project_id,
                "experiment_event",
                {"event": "stopped", "experiment_id": experiment_id, "project_id": state.project_id, "at": now_ms()},
            )
            return state

    # -- routing ---------------------------------------------------------------

    def route_request(self, project_id: str, prompt_name: str, request_key: str) -> dict:
        """Deterministic arm/version choice for one request key."""
        check_project_id(project_id)
        gate = self._agents.get((project_id, prompt_name))
        if gate is not None and gate["state"] == "paused":
            raise PausedAgent(
                f"agent {prompt_name!r} in {project_id!r} is paused: {gate.get('reason', '')}"
            )
        active = self._registry.active_version(project_id, prompt_name)
        if active is None:
            raise UnknownBinding(f"no active binding for {prompt_name!r} in {project_id!r}")
        state = self.running_experiment(project_id, prompt_name)
        if state is None:
            return {"prompt_name": prompt_name, "version": active, "arm": "control"}
        if allocation_hash(state.experiment_id, request_key) < state.allocation_fraction:
            return {"prompt_name": prompt_name, "version": state.candidate_version, "arm": "candidate"}
        return {"prompt_name": prompt_name, "version": state.control_version, "arm": "control"}

    # -- agent gates -------------------------------------------------------------

    def set_agent_state(self, project_id: str, agent_name: str, state: str, reason: str = "") -> dict:
        check_project_id(project_id)
        check_id(agent_name, "agent_name")
        if state not in ("active", "paused"):
            raise ValidationError("state", "must be 'active' or 'paused'")
        if not isinstance(reason, str):
            raise ValidationError("reason", "must be a string")
        payload = {
            "project_id": project_id,
            "agent_name": agent_name,
            "state": state,
            "reason": reason,
            "changed_at": now_ms(),
            "at": now_ms(),
        }
        self._store.append(project_id, "agent_state", payload)
        return self.agent_gate(project_id, agent_name)

    def agent_gate(self, project_id: str, agent_name: str) -> dict:
        gate = self._agents.get((project_id, agent_name))
        if gate is None:
            return {
                "project_id": project_id,
                "agent_name": agent_name,
                "state": "active",
                "reason": "",
                "changed_at": 0,
            }
        return {k: gate[k] for k in ("project_id", "agent_name", "state", "reason", "changed_at")}

    def experiment_wire(self, experiment_id: str) -> dict:
        return self.get_experiment(experiment_id).to_wire()
