"""CI regression gate: metric baselines over historical runs and
deterministic pass/fail verdicts for a new run.

A run is the set of traces tagged ``ci-run:<run_id>``. Two independent
trigger rules are checked per metric and either one fails the gate:

- relative drop: the current mean fell more than ``relative_drop_threshold``
  (as a fraction) below the baseline mean (mirrored for lower_is_better);
- sigma band: the current mean sits more than ``k_sigma`` sample standard
  deviations from the baseline mean. A degenerate band (fewer than two
  baseline runs, or zero variance across them) disables this rule rather
  than making any deviation fatal.

Fewer than ``min_baseline_runs`` usable baseline runs yields an
``insufficient_data_pass``: the gate passes but is flagged, so new
projects are never permanently blocked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping

from .clock import now_ms
from .errors import EmptyRun, EmptyWindow, UnknownRun, ValidationError
from .model import check_id
from .query import TraceIndex
from .storage import LogRecord, Store, check_project_id

RUN_TAG_PREFIX = "ci-run:"

DEFAULT_BASELINE_WINDOW = 10
DEFAULT_RELATIVE_DROP = 0.10
DEFAULT_K_SIGMA = 2.0
DEFAULT_MIN_BASELINE_RUNS = 3

# Scores live in [0, 1]; any std below this is accumulation noise from
# summing identical means, not real variance, and must not arm the band.
STD_EPSILON = 1e-9



@dataclass(frozen=True)
class GateConfig:
    metric_name: str
    baseline_window: int = DEFAULT_BASELINE_WINDOW
    relative_drop_threshold: float = DEFAULT_RELATIVE_DROP
    k_sigma: float = DEFAULT_K_SIGMA
    min_baseline_runs: int = DEFAULT_MIN_BASELINE_RUNS
    direction: str = "higher_is_better"

    def __post_init__(self) -> None:
        check_id(self.metric_name, "metric_name")
        if not isinstance(self.baseline_window, int) or self.baseline_window < 1:
            raise ValidationError("baseline_window", "must be a positive integer")
        if not self.relative_drop_threshold > 0:
            raise ValidationError("relative_drop_threshold", "must be positive")
        if self.k_sigma < 0:
            raise ValidationError("k_sigma", "must be >= 0")
        if not isinstance(self.min_baseline_runs, int) or self.min_baseline_runs < 1:
            raise ValidationError("min_baseline_runs", "must be a positive integer")
        if self.baseline_window < self.min_baseline_runs:
            raise ValidationError("baseline_window", "must be >= min_baseline_runs")
        if self.direction not in ("higher_is_better", "lower_is_better"):
            raise ValidationError("direction", "must be higher_is_better or lower_is_better")

    def to_wire(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "baseline_window": self.baseline_window,
            "relative_drop_threshold": self.relative_drop_threshold,
            "k_sigma": self.k_sigma,
            "min_baseline_runs": self.min_baseline_runs,
            "direction": self.direction,
        }

    @classmethod
    def from_wire(cls, raw: Any, defaults: Mapping | None = None) -> GateConfig:
        if not isinstance(raw, Mapping):
            raise ValidationError("gate_config", "must be an object")
        defaults = dict(defaults or {})
        merged = {**defaults, **{k: v for k, v in raw.items() if v is not None}}
        return cls(
            metric_name=merged.get("metric_name"),
            baseline_window=merged.get("baseline_window", DEFAULT_BASELINE_WINDOW),
            relative_drop_threshold=merged.get("relative_drop_threshold", DEFAULT_RELATIVE_DROP),
            k_sigma=merged.get("k_sigma", DEFAULT_K_SIGMA),
            min_baseline_runs=merged.get("min_baseline_runs", DEFAULT_MIN_BASELINE_RUNS),
            direction=merged.get("direction", "higher_is_better"),
        )


@dataclass
class RunSummary:
    run_id: str
    commit_tag: str | None
    metrics: dict[str, float]
    trace_count: int
    created_at: int
    order_seq: int = 0  # seq of the first summary record; fixes baseline order

    def to_wire(self) -> dict:
        return {
            "run_id": self.run_id,
            "commit_tag": self.commit_tag,
            "metrics": {k: self.metrics[k] for k in sorted(self.metrics)},
            "trace_count": self.trace_count,
            "created_at": self.created_at,
        }


def sample_std(values: list[float]) -> float:
    """Sample standard deviation (n-1 denominator); 0.0 for fewer than 2."""
    n = len(values)
    if n < 2:
        return 0.0
    mean = sum(values) / n
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (n - 1))


class GateService:
    def __init__(self, store: Store, index: TraceIndex) -> None:
        self._store = store
        self._index = index
        self._runs: dict[str, dict[str, RunSummary]] = {}  # project -> run_id -> summary
        self._run_order: dict[str, list[str]] = {}  # project -> run ids, first-summarized order

    # -- fold ----------------------------------------------------------------

    def apply(self, record: LogRecord) -> None:
        if record.kind != "gate_result" or record.payload.get("result") != "run_summary":
            return
        p = record.payload
        project_id = p["project_id"]
        raw = p["summary"]
        runs = self._runs.setdefault(project_id, {})
        order = self._run_order.setdefault(project_id, [])
        existing = runs.get(raw["run_id"])
        summary = RunSummary(
            run_id=raw["run_id"],
            commit_tag=raw.get("commit_tag"),
            metrics=dict(raw["metrics"]),
            trace_count=raw["trace_count"],
            created_at=raw["created_at"],
            order_seq=existing.order_seq if existing else record.seq,
        )
        if existing is None:
            order.append(raw["run_id"])
        runs[raw["run_id"]] = summary

    # -- operations ------------------------------------------------------------

    def summarize_run(self, project_id: str, run_id: str, commit_tag: str | None = None) -> RunSummary:
        check_project_id(project_id)
        check_id(run_id, "run_id")
        tag = RUN_TAG_PREFIX + run_id
        traces = [t for t, _ in self._index.all_traces(project_id) if tag in t.tags]
        if not traces:
            raise EmptyRun(f"no traces tagged {tag!r} in project {project_id!r}")
        keys = sorted({k for t in traces for k in t.scores})
        metrics = {}
        for key in keys:
            values = [t.scores[key] for t in traces if key in t.scores]
            metrics[key] = sum(values) / len(values)
        existing = self._runs.get(project_id, {}).get(run_id)
        if (
            existing is not None
            and existing.metrics == metrics
            and existing.trace_count == len(traces)
        ):
            return existing  # idempotent re-summarize, inputs unchanged
        summary = RunSummary(
            run_id=run_id,
            commit_tag=commit_tag if commit_tag is not None else (existing.commit_tag if existing else None),
            metrics=metrics,
            trace_count=len(traces),
            created_at=now_ms(),
        )
        self._store.append(
            project_id,
            "gate_result",
            {"result": "run_summary", "project_id": project_id, "summary": summary.to_wire(), "at": summary.created_at},
        )
        return self._runs[project_id][run_id]

    def get_run(self, project_id: str, run_id: str) -> RunSummary:
        summary = self._runs.get(project_id, {}).get(run_id)
        if summary is None:
            raise UnknownRun(f"run {run_id!r} has not been summarized in {project_id!r}")
        return summary

    def evaluate_gate(self, project_id: str, run_id: str, configs: list[GateConfig]) -> dict:
        """Deterministic verdict for a summarized run against its baseline.

        Baseline = the previous ``baseline_window`` run summaries (most
        recent first), never including the evaluated run itself.
        """
        current = self.get_run(project_id, run_id)
        order = self._run_order.get(project_id, [])
        prior_ids = [rid for rid in order if rid != run_id]
        # only runs summarized before this one count as history
        prior_ids = [
            rid for rid in prior_ids
            if self._runs[project_id][rid].order_seq < current.order_seq
        ]
        details = []
        passed = True
        for config in configs:
            window = [
                self._runs[project_id][rid]
                for rid in reversed(prior_ids[-config.baseline_window :])
            ]
            baseline_values = [
                s.metrics[config.metric_name] for s in window if config.metric_name in s.metrics
            ]
            current_mean = current.metrics.get(config.metric_name)
            detail = {
                "metric_name": config.metric_name,
                "current_mean": current_mean,
                "baseline_mean": None,
                "baseline_std": None,
                "relative_change": None,
                "rule_triggered": "none",
            }
            if current_mean is None or len(baseline_values) < config.min_baseline_runs:
                detail["rule_triggered"] = "insufficient_data_pass"
                if baseline_values:
                    detail["baseline_mean"] = sum(baseline_values) / len(baseline_values)
                    detail["baseline_std"] = sample_std(baseline_values)
                details.append(detail)
                continue
            baseline_mean = sum(baseline_values) / len(baseline_values)
            baseline_std = sample_std(baseline_values)
            detail["baseline_mean"] = baseline_mean
            detail["baseline_std"] = baseline_std
            if baseline_mean != 0:
                detail["relative_change"] = (current_mean - baseline_mean) / baseline_mean
            dropped = False
            if baseline_mean != 0:
                if config.direction == "higher_is_better":
                    dropped = (baseline_mean - current_mean) / baseline_mean > config.relative_drop_threshold
                else:
                    dropped = (current_mean - baseline_mean) / baseline_mean > config.relative_drop_threshold
            if dropped:
                detail["rule_triggered"] = "relative_drop"
                passed = False
            elif (
                len(baseline_values) >= 2
                and baseline_std > STD_EPSILON
                and abs(current_mean - baseline_mean) > config.k_sigma * baseline_std
            ):
                detail["rule_triggered"] = "sigma_band"
                passed = False
            details.append(detail)
        verdict = {"run_id": run_id, "pass": passed, "details": details}
        self._store.append(
            project_id,
            "gate_result",
            {"result": "verdict", "project_id": project_id, "run_id": run_id, "verdict": verdict, "at": now_ms()},
        )
        return verdict

    def drift_check(
        self,
        project_id: str,
        metric_name: str,
        window_a: tuple[int, int],
        window_b: tuple[int, int],
        threshold_pct: float,
    ) -> dict:
        """Relative change (in percent) of a metric's mean between two time
        windows, and whether its magnitude exceeds threshold_pct."""
        check_project_id(project_id)
        check_id(metric_name, "metric_name")

        def window_mean(window: tuple[int, int], label: str) -> float:
            lo, hi = window
            if not isinstance(lo, int) or not isinstance(hi, int) or lo > hi:
                raise ValidationError(label, f"invalid window [{lo}, {hi})")
            values = [
                t.scores[metric_name]
                for t, _ in self._index.traces_in_window(project_id, lo, hi)
                if metric_name in t.scores
            ]
            if not values:
                raise EmptyWindow(f"{label} [{lo}, {hi}) has no traces with metric {metric_name!r}")
            return sum(values) / len(values)

        mean_a = window_mean(window_a, "window_a")
        mean_b = window_mean(window_b, "window_b")
        if mean_a == 0:
            change_pct = None
            triggered = mean_b != 0
        else:
            change_pct = (mean_b - mean_a) / mean_a * 100.0
            triggered = abs(change_pct) > threshold_pct
        return {
            "metric_name": metric_name,
            "window_a": list(window_a),
            "window_b": list(window_b),
            "mean_a": mean_a,
            "mean_b": mean_b,
            "change_pct": change_pct,
            "threshold_pct": threshold_pct,
            "triggered": triggered,
        }
