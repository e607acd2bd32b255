"""Server assembly: wires storage, services, and the event hub together
and exposes every operation the transports dispatch to.

All state is derived by folding the record log, so startup recovery and
live operation share one code path: each service's ``apply`` runs as a
store observer, and the constructor replays the existing log through the
same dispatcher.
"""

from __future__ import annotations

import logging
import threading
from typing import Any

from .config import ServerConfig
from .control import ControlPlane
from .errors import UnknownRun, UnknownTrace, ValidationError
from .evaluators import EvaluatorSpec
from .events import EventHub, Subscription
from .gate import GateConfig, GateService
from .ingest import IngestService
from .model import FilterQuery, Predicate
from .monitor import MonitorRule, MonitorScheduler, MonitorService
from .query import QueryEngine, TraceIndex
from .registry import PromptRegistry
from .storage import LogRecord, Store, check_project_id

logger = logging.getLogger(__name__)


class AideServer:
    def __init__(self, config: ServerConfig | None = None) -> None:
        self.config = config or ServerConfig()
        self.store = Store(
            self.config.data_dir,
            fsync=self.config.fsync,
            max_log_bytes=self.config.max_log_bytes,
        )
        self.index = TraceIndex()
        self.registry = PromptRegistry(self.store)
        self.control = ControlPlane(self.store, self.registry)
        self.gate = GateService(self.store, self.index)
        self.monitor = MonitorService(self.store, self.index)
        self.hub = EventHub(self.store, depth=self.config.queue_depth)
        self.query = QueryEngine(self.index, auto_create_projects=self.config.auto_create_projects)
        self._evaluators: dict[str, list[EvaluatorSpec]] = {}
        self._evaluators_lock = threading.Lock()
        self.ingest = IngestService(
            self.store,
            self.index,
            self.evaluators_for,
            auto_create_projects=self.config.auto_create_projects,
            batch_max=self.config.batch_max,
            defer_batch_eval=self.config.defer_batch_eval,
        )
        self.scheduler = MonitorScheduler(self.monitor, self.config.monitor_interval_ms)

        self._snapshot_counter = 0
        for record in self.store.all_records():
            self._fold(record)
        self.store.add_observer(self._dispatch)
        self._load_configured_state()

    def _fold(self, record: LogRecord) -> None:
        self.index.apply(record)
        self.registry.apply(record)
        self.control.apply(record)
        self.gate.apply(record)
        self.monitor.apply(record)

    def _dispatch(self, record: LogRecord) -> None:
        self._fold(record)
        self.hub.publish(record)
        every = self.config.snapshot_every_records
        if every > 0:
            self._snapshot_counter += 1
            if self._snapshot_counter % every == 0:
                # snapshot() needs the append lock this observer runs under,
                # so the snapshotter runs on its own thread
                threading.Thread(target=self._safe_snapshot, daemon=True).start()

    def _safe_snapshot(self) -> None:
        try:
            self.store.snapshot()
        except Exception:
            logger.exception("background snapshot failed")

    def _load_configured_state(self) -> None:
        for project_id, specs in self.config.project_evaluators.items():
            self.set_evaluators(project_id, specs)
        for project_id, rules in self.config.project_rules.items():
            for raw in rules:
                rule = MonitorRule.from_wire(raw, project_id)
                existing = self.monitor.rule_state(project_id, rule.rule_id)
                if existing is None or existing.rule.to_wire() != rule.to_wire():
                    self.monitor.register_rule(rule)

    def close(self) -> None:
        self.scheduler.stop()
        self.hub.close()
        self.store.close()

    # -- evaluator configuration ------------------------------------------------

    def evaluators_for(self, project_id: str) -> list[EvaluatorSpec]:
        with self._evaluators_lock:
            return list(self._evaluators.get(project_id, ()))

    def set_evaluators(self, project_id: str, specs_raw: list) -> dict:
        check_project_id(project_id)
        specs = [EvaluatorSpec.from_wire(raw) for raw in specs_raw]
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ValidationError("evaluators", "evaluator names must be unique per project")
        with self._evaluators_lock:
            self._evaluators[project_id] = specs
        return {"project_id": project_id, "evaluators": [s.to_wire() for s in specs]}

    # -- traces -------------------------------------------------------------------

    def log_trace(self, project_id: str, trace: Any) -> dict:
        return self.ingest.log_trace(project_id, trace)

    def log_batch(self, project_id: str, traces: Any) -> dict:
        return {"results": self.ingest.log_batch(project_id, traces)}

    def get_trace(self, project_id: str, trace_id: str) -> dict:
        check_project_id(project_id)
        found = self.index.get(project_id, trace_id)
        if found is None:
            raise UnknownTrace(f"no trace {trace_id!r} in project {project_id!r}")
        trace, seq = found
        return {"trace": trace.to_wire(), "seq": seq}

    def search_traces(self, query_raw: Any, project_id: str | None = None) -> dict:
        query = FilterQuery.from_wire(query_raw, project_id=project_id)
        return self.query.search_traces(query)

    def count_traces(self, project_id: str, time_range: Any = None) -> dict:
        check_project_id(project_id)
        if time_range is not None:
            time_range = (time_range[0], time_range[1])
        return {"count": self.query.count_traces(project_id, time_range)}

    def latest_trace(self, project_id: str, predicates_raw: Any = None) -> dict:
        check_project_id(project_id)
        predicates = tuple(Predicate.from_wire(p) for p in predicates_raw or ())
        found = self.query.latest_trace(project_id, predicates)
        if found is None:
            return {"trace": None, "seq": None}
        trace, seq = found
        return {"trace": trace.to_wire(), "seq": seq}

    def aggregate_metrics(self, project_id: str, window: Any, bucket_width_ms: int) -> dict:
        check_project_id(project_id)
        if not isinstance(window, (list, tuple)) or len(window) != 2:
            raise ValidationError("window", "must be [from, to)")
        return self.query.aggregate_metrics(project_id, (window[0], window[1]), bucket_width_ms)

    # -- prompts --------------------------------------------------------------------

    def save_prompt(
        self,
        prompt_name: str,
        template: str,
        metadata: Any = None,
        expected_latest: int | None = None,
        created_by: str = "",
        commit_tag: str | None = None,
    ) -> dict:
        pv = self.registry.save_prompt(
            prompt_name,
            template,
            metadata,
            expected_latest=expected_latest,
            created_by=created_by,
            commit_tag=commit_tag,
        )
        return {"prompt": pv.to_wire()}

    def get_prompt(self, prompt_name: str, version: int | None = None) -> dict:
        return {"prompt": self.registry.get_prompt(prompt_name, version).to_wire()}

    def list_prompts(self, project_id: str | None = None) -> dict:
        return {"prompts": self.registry.list_prompts(project_id)}

    def activate_prompt(self, project_id: str, prompt_name: str, version: int) -> dict:
        binding = self.registry.activate(project_id, prompt_name, version)
        return {"binding": self._binding_with_experiment(binding)}

    def rollback_prompt(self, project_id: str, prompt_name: str) -> dict:
        binding = self.registry.rollback(project_id, prompt_name)
        return {"binding": self._binding_with_experiment(binding)}

    def _binding_with_experiment(self, binding: dict) -> dict:
        state = self.control.running_experiment(binding["project_id"], binding["prompt_name"])
        binding["experiment"] = state.to_wire() if state else None
        return binding

    # -- ci gate ----------------------------------------------------------------------

    def evaluate_gate(
        self,
        project_id: str,
        run_id: str,
        configs: Any,
        commit_tag: str | None = None,
    ) -> dict:
        check_project_id(project_id)
        if not isinstance(configs, (list, tuple)) or not configs:
            raise ValidationError("configs", "must be a nonempty list of gate configs")
        parsed = [GateConfig.from_wire(raw, self.config.gate_defaults) for raw in configs]
        try:
            self.gate.get_run(project_id, run_id)
        except UnknownRun:
            self.gate.summarize_run(project_id, run_id, commit_tag)
        verdict = self.gate.evaluate_gate(project_id, run_id, parsed)
        return {"verdict": verdict}

    def summarize_run(self, project_id: str, run_id: str, commit_tag: str | None = None) -> dict:
        return {"summary": self.gate.summarize_run(project_id, run_id, commit_tag).to_wire()}

    def drift_check(
        self,
        project_id: str,
        metric_name: str,
        window_a: Any,
        window_b: Any,
        threshold_pct: float,
    ) -> dict:
        for label, window in (("window_a", window_a), ("window_b", window_b)):
            if not isinstance(window, (list, tuple)) or len(window) != 2:
                raise ValidationError(label, "must be [from, to)")
        report = self.gate.drift_check(
            project_id,
            metric_name,
            (window_a[0], window_a[1]),
            (window_b[0], window_b[1]),
            threshold_pct,
        )
        return {"report": report}

    # -- control plane -----------------------------------------------------------------

    def start_experiment(self, project_id: str, prompt_name: str, candidate_version: int, **params: Any) -> dict:
        defaults = self.config.experiment_defaults
        state = self.control.start_experiment(
            project_id,
            prompt_name,
            candidate_version,
            control_version=params.get("control_version"),
            allocation_fraction=params.get("allocation_fraction", defaults["allocation_fraction"]),
            objective_metric=params.get("objective_metric", defaults["objective_metric"]),
            min_samples_per_arm=params.get("min_samples_per_arm", defaults["min_samples_per_arm"]),
            promotion_delta=params.get("promotion_delta", defaults["promotion_delta"]),
        )
        return {"experiment": state.to_wire()}

    def stop_experiment(self, experiment_id: str) -> dict:
        return {"experiment": self.control.stop_experiment(experiment_id).to_wire()}

    def get_experiment(self, experiment_id: str) -> dict:
        return {"experiment": self.control.get_experiment(experiment_id).to_wire()}

    def record_outcome(self, experiment_id: str, arm: str, score: float) -> dict:
        state = self.control.record_outcome(experiment_id, arm, score)
        return {"experiment_id": experiment_id, "arm": arm, "stats": state.arm(arm).to_wire()}

    def evaluate_experiment(self, experiment_id: str) -> dict:
        decision, state = self.control.evaluate_experiment(experiment_id)
        if decision == "promote":
            self.monitor.create_promotion_proposal(state.to_wire())
            if self.config.auto_promote:
                self.registry.activate(state.project_id, state.prompt_name, state.candidate_version)
        return {"decision": decision, "experiment": state.to_wire()}

    def route_request(self, project_id: str, prompt_name: str, request_key: str) -> dict:
        return self.control.route_request(project_id, prompt_name, request_key)

    def set_agent_state(self, project_id: str, agent_name: str, state: str, reason: str = "") -> dict:
        return {"agent": self.control.set_agent_state(project_id, agent_name, state, reason)}

    # -- monitor -------------------------------------------------------------------------

    def register_rule(self, project_id: str, rule_raw: Any) -> dict:
        rule = MonitorRule.from_wire(rule_raw, project_id)
        return {"rule": self.monitor.register_rule(rule).to_wire()}

    def list_rules(self, project_id: str) -> dict:
        return {"rules": self.monitor.list_rules(project_id)}

    def list_proposals(self, status: str | None = None, project_id: str | None = None) -> dict:
        return {"proposals": self.monitor.list_proposals(status, project_id)}

    def resolve_proposal(self, proposal_id: str, resolution: str, note: str = "") -> dict:
        return {"proposal": self.monitor.resolve_proposal(proposal_id, resolution, note)}

    # -- streaming --------------------------------------------------------------------------

    def subscribe(
        self,
        project_id: str,
        predicates_raw: Any = None,
        from_seq: int = 0,
    ) -> Subscription:
        check_project_id(project_id)
        predicates = tuple(Predicate.from_wire(p) for p in predicates_raw or ())
        return self.hub.subscribe(project_id, predicates, from_seq)

    def health(self) -> dict:
        return {"status": "ok", "last_seq": self.store.last_seq}
