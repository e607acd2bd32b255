"""Rule-driven monitoring over the committed trace stream.

Rules are deterministic programs: a conjunctive trace filter, a trailing
window, and a threshold over an aggregate (match count or the mean of a
score). A rule fires only when the trigger holds, at least ``min_matches``
traces back it, and the cooldown since the previous firing has elapsed.
Firing produces an alert or a proposal carrying up to 20 evidence trace
ids, newest first.

``evaluate_rule`` is a pure function of (rule, now, committed traces,
last_fired), which is what makes offline replay over a recorded window
produce exactly the firings of the original live run.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Mapping

from .clock import now_ms
from .errors import IllegalTransition, UnknownProposal, ValidationError
from .model import Predicate, check_id, new_id
from .query import TraceIndex
from .storage import LogRecord, Store, check_project_id

logger = logging.getLogger(__name__)

RULE_ACTIONS = ("alert", "propose_prompt_change", "propose_experiment")
COMPARATORS = ("gt", "ge", "lt", "le")
MAX_EVIDENCE = 20
DEFAULT_COOLDOWN_MS = 10 * 60 * 1000
MAX_CONSECUTIVE_ERRORS = 3



@dataclass(frozen=True)
class Trigger:
    aggregate: str  # "count" or "mean_of"
    comparator: str
    threshold: float
    metric: str | None = None
    min_matches: int = 1

    def __post_init__(self) -> None:
        if self.aggregate not in ("count", "mean_of"):
            raise ValidationError("trigger.aggregate", "must be 'count' or 'mean_of'")
        if self.aggregate == "mean_of":
            check_id(self.metric, "trigger.metric")
        if self.comparator not in COMPARATORS:
            raise ValidationError("trigger.comparator", f"must be one of {', '.join(COMPARATORS)}")
        if isinstance(self.threshold, bool) or not isinstance(self.threshold, (int, float)):
            raise ValidationError("trigger.threshold", "must be a finite number")
        if not isinstance(self.min_matches, int) or self.min_matches < 1:
            raise ValidationError("trigger.min_matches", "must be a positive integer")

    def compare(self, value: float) -> bool:
        if self.comparator == "gt":
            return value > self.threshold
        if self.comparator == "ge":
            return value >= self.threshold
        if self.comparator == "lt":
            return value < self.threshold
        return value <= self.threshold

    def to_wire(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "metric": self.metric,
            "comparator": self.comparator,
            "threshold": self.threshold,
            "min_matches": self.min_matches,
        }


@dataclass(frozen=True)
class MonitorRule:
    rule_id: str
    project_id: str
    filter: tuple[Predicate, ...]
    window_ms: int
    trigger: Trigger
    action: str = "alert"
    cooldown_ms: int = DEFAULT_COOLDOWN_MS
    action_params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        check_id(self.rule_id, "rule_id")
        check_project_id(self.project_id)
        if not isinstance(self.window_ms, int) or self.window_ms <= 0:
            raise ValidationError("window_ms", "must be a positive duration")
        if not isinstance(self.cooldown_ms, int) or self.cooldown_ms < 0:
            raise ValidationError("cooldown_ms", "must be >= 0")
        if self.action not in RULE_ACTIONS:
            raise ValidationError("action", f"must be one of {', '.join(RULE_ACTIONS)}")

    def to_wire(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "project_id": self.project_id,
            "filter": [p.to_wire() for p in self.filter],
            "window_ms": self.window_ms,
            "trigger": self.trigger.to_wire(),
            "action": self.action,
            "cooldown_ms": self.cooldown_ms,
            "action_params": dict(self.action_params),
        }

    @classmethod
    def from_wire(cls, raw: Mapping, project_id: str | None = None) -> MonitorRule:
        if not isinstance(raw, Mapping):
            raise ValidationError("rule", "must be an object")
        trigger_raw = raw.get("trigger") or {}
        trigger = Trigger(
            aggregate=trigger_raw.get("aggregate", "count"),
            metric=trigger_raw.get("metric"),
            comparator=trigger_raw.get("comparator", "ge"),
            threshold=trigger_raw.get("threshold", 1),
            min_matches=trigger_raw.get("min_matches", 1),
        )
        return cls(
            rule_id=raw.get("rule_id"),
            project_id=project_id or raw.get("project_id"),
            filter=tuple(Predicate.from_wire(p) for p in raw.get("filter") or ()),
            window_ms=raw.get("window_ms"),
            trigger=trigger,
            action=raw.get("action", "alert"),
            cooldown_ms=raw.get("cooldown_ms", DEFAULT_COOLDOWN_MS),
            action_params=dict(raw.get("action_params") or {}),
        )


@dataclass(frozen=True)
class Firing:
    rule_id: str
    at: int
    value: float
    matches: int
    evidence: tuple[str, ...]  # trace ids, most recent first


def evaluate_rule(
    rule: MonitorRule,
    now: int,
    index: TraceIndex,
    last_fired: int | None,
) -> Firing | None:
    """Pure rule evaluation over committed data in [now - window, now)."""
    if last_fired is not None and now - last_fired < rule.cooldown_ms:
        return None
    window = index.traces_in_window(rule.project_id, now - rule.window_ms, now)
    matched = [
        (t, seq) for t, seq in window if all(p.matches(t) for p in rule.filter)
    ]
    if rule.trigger.aggregate == "mean_of":
        metric = rule.trigger.metric
        valued = [(t, seq) for t, seq in matched if metric in t.scores]
        if not valued:
            return None
        value = sum(t.scores[metric] for t, _ in valued) / len(valued)
        relevant = valued
    else:
        value = float(len(matched))
        relevant = matched
    if len(relevant) < rule.trigger.min_matches:
        return None
    if not rule.trigger.compare(value):
        return None
    newest_first = sorted(relevant, key=lambda pair: (pair[0].start_time, pair[1]), reverse=True)
    evidence = tuple(t.trace_id for t, _ in newest_first[:MAX_EVIDENCE])
    return Firing(rule_id=rule.rule_id, at=now, value=value, matches=len(relevant), evidence=evidence)


class _RuleState:
    __slots__ = ("rule", "last_fired", "consecutive_errors", "disabled")

    def __init__(self, rule: MonitorRule) -> None:
        self.rule = rule
        self.last_fired: int | None = None
        self.consecutive_errors = 0
        self.disabled = False


class MonitorService:
    def __init__(self, store: Store, index: TraceIndex) -> None:
        self._store = store
        self._index = index
        self._lock = threading.Lock()
        self._rules: dict[tuple[str, str], _RuleState] = {}
        self._proposals: dict[str, dict] = {}
        self._proposal_order: list[str] = []

    # -- fold ----------------------------------------------------------------

    def apply(self, record: LogRecord) -> None:
        if record.kind == "rule_change":
            p = record.payload
            if p["action"] == "put":
                rule = MonitorRule.from_wire(p["rule"])
                key = (rule.project_id, rule.rule_id)
                existing = self._rules.get(key)
                state = _RuleState(rule)
                if existing is not None:
                    state.last_fired = existing.last_fired
                self._rules[key] = state
            elif p["action"] == "disable":
                state = self._rules.get((p["project_id"], p["rule_id"]))
                if state is not None:
                    state.disabled = True
        elif record.kind == "proposal_event":
            p = record.payload
            proposal = dict(p["proposal"])
            if p["event"] == "created" and proposal["proposal_id"] not in self._proposals:
                self._proposal_order.append(proposal["proposal_id"])
            self._proposals[proposal["proposal_id"]] = proposal
            rule_id = p.get("rule_id")
            if p["event"] == "created" and rule_id is not None:
                state = self._rules.get((proposal["project_id"], rule_id))
                if state is not None:
                    state.last_fired = p.get("fired_at", proposal["created_at"])

    # -- rules -----------------------------------------------------------------

    def register_rule(self, rule: MonitorRule) -> MonitorRule:
        with self._lock:
            self._store.append(
                rule.project_id,
                "rule_change",
                {"action": "put", "rule": rule.to_wire(), "at": now_ms()},
            )
        return rule

    def list_rules(self, project_id: str) -> list[dict]:
        check_project_id(project_id)
        out = []
        for (pid, _), state in sorted(self._rules.items()):
            if pid == project_id:
                wire = state.rule.to_wire()
                wire["disabled"] = state.disabled
                out.append(wire)
        return out

    def _disable_rule(self, state: _RuleState, reason: str) -> None:
        rule = state.rule
        self._store.append(
            rule.project_id,
            "rule_change",
            {"action": "disable", "project_id": rule.project_id, "rule_id": rule.rule_id, "at": now_ms()},
        )
        self._create_proposal(
            source="monitor_rule",
            project_id=rule.project_id,
            subject=rule.rule_id,
            description=f"rule {rule.rule_id} disabled after {MAX_CONSECUTIVE_ERRORS} consecutive errors: {reason}",
            evidence=(),
            rule_id=None,
            fired_at=None,
        )

    # -- ticking ---------------------------------------------------------------

    def tick(self, project_id: str, rule_id: str, now: int | None = None) -> dict | None:
        """Evaluate one rule once; returns the created proposal if it fired."""
        state = self._rules.get((project_id, rule_id))
        if state is None or state.disabled:
            return None
        now = now if now is not None else now_ms()
        try:
            firing = evaluate_rule(state.rule, now, self._index, state.last_fired)
            state.consecutive_errors = 0
        except Exception as exc:
            state.consecutive_errors += 1
            logger.warning("rule %s/%s errored: %s", project_id, rule_id, exc)
            if state.consecutive_errors >= MAX_CONSECUTIVE_ERRORS:
                self._disable_rule(state, str(exc))
            return None
        if firing is None:
            return None
        rule = state.rule
        template = rule.action_params.get(
            "description", "rule {rule_id}: {aggregate} {value:.4g} over {matches} matching traces"
        )
        description = template.format(
            rule_id=rule.rule_id,
            aggregate=rule.trigger.aggregate if rule.trigger.aggregate == "count" else f"mean {rule.trigger.metric}",
            value=firing.value,
            matches=firing.matches,
            threshold=rule.trigger.threshold,
        )
        subject = rule.action_params.get("subject", rule.rule_id)
        return self._create_proposal(
            source="monitor_rule",
            project_id=rule.project_id,
            subject=subject,
            description=f"[{rule.action}] {description}",
            evidence=firing.evidence,
            rule_id=rule.rule_id,
            fired_at=firing.at,
        )

    def tick_all(self, now: int | None = None) -> list[dict]:
        fired = []
        for (project_id, rule_id) in list(self._rules):
            proposal = self.tick(project_id, rule_id, now)
            if proposal is not None:
                fired.append(proposal)
        return fired

    # -- proposals ---------------------------------------------------------------

    def _create_proposal(
        self,
        source: str,
        project_id: str,
        subject: str,
        description: str,
        evidence: tuple[str, ...],
        rule_id: str | None,
        fired_at: int | None,
    ) -> dict:
        proposal = {
            "proposal_id": new_id("prop-"),
            "source": source,
            "project_id": project_id,
            "subject": subject,
            "description": description,
            "evidence": list(evidence),
            "status": "open",
            "created_at": now_ms(),
            "resolution_note": None,
        }
        payload = {"event": "created", "proposal": proposal, "at": proposal["created_at"]}
        if rule_id is not None:
            payload["rule_id"] = rule_id
            payload["fired_at"] = fired_at
        self._store.append(project_id, "proposal_event", payload)
        return dict(self._proposals[proposal["proposal_id"]])

    def create_promotion_proposal(self, experiment_wire: dict) -> dict:
        """Proposal emitted when an experiment's candidate wins."""
        cand = experiment_wire["candidate_stats"]
        ctrl = experiment_wire["control_stats"]
        description = (
            f"experiment {experiment_wire['experiment_id']}: candidate v{experiment_wire['candidate_version']} "
            f"mean {cand['mean']:.4f} beat control v{experiment_wire['control_version']} "
            f"mean {ctrl['mean']:.4f} on {experiment_wire['objective_metric']} "
            f"(n={ctrl['n']}/{cand['n']}); activate to promote"
        )
        return self._create_proposal(
            source="experiment_promotion",
            project_id=experiment_wire["project_id"],
            subject=experiment_wire["prompt_name"],
            description=description,
            evidence=(),
            rule_id=None,
            fired_at=None,
        )

    def list_proposals(self, status: str | None = None, project_id: str | None = None) -> list[dict]:
        if status is not None and status not in ("open", "accepted", "rejected"):
            raise ValidationError("status", "must be open, accepted, or rejected")
        out = []
        for pid in self._proposal_order:
            proposal = self._proposals[pid]
            if status is not None and proposal["status"] != status:
                continue
            if project_id is not None and proposal["project_id"] != project_id:
                continue
            out.append(dict(proposal))
        return out

    def resolve_proposal(self, proposal_id: str, resolution: str, note: str = "") -> dict:
        if resolution not in ("accepted", "rejected"):
            raise ValidationError("resolution", "must be 'accepted' or 'rejected'")
        with self._lock:
            proposal = self._proposals.get(proposal_id)
            if proposal is None:
                raise UnknownProposal(f"unknown proposal {proposal_id!r}")
            if proposal["status"] != "open":
                raise IllegalTransition(
                    f"proposal {proposal_id!r} is already {proposal['status']}"
                )
            updated = dict(proposal)
            updated["status"] = resolution
            updated["resolution_note"] = note
            self._store.append(
                proposal["project_id"],
                "proposal_event",
                {"event": "resolved", "proposal": updated, "at": now_ms()},
            )
        return dict(self._proposals[proposal_id])

    def rule_state(self, project_id: str, rule_id: str) -> _RuleState | None:
        return self._rules.get((project_id, rule_id))

    def reset_firing_state(self) -> None:
        """Forget cooldown state; used for offline replay of recorded windows."""
        for state in self._rules.values():
            state.last_fired = None
            state.consecutive_errors = 0


class MonitorScheduler:
    """Background loop ticking every enabled rule once per interval."""

    def __init__(self, service: MonitorService, interval_ms: int = 1000) -> None:
        self._service = service
        self._interval = interval_ms / 1000.0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, name="monitor-scheduler", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            try:
                self._service.tick_all()
            except Exception:
                logger.exception("monitor scheduler tick failed")
            self._stop.wait(self._interval)

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
