"""Versioned prompt store with per-project active bindings.

Prompts are global to the server; bindings (which version a project
serves) are per project. All state changes flow through the record log:
command methods validate, append a record, and the fold applies it, so
recovery replays the exact same code path.

Concurrency is compare-and-set: a save may assert what it believes the
latest version is, and loses with VersionConflict if another writer got
there first. Rollback is binding-stack semantics — it restores the
previously *activated* version, which is not necessarily version-1.
"""

from __future__ import annotations

import threading
from typing import Mapping

from .clock import now_ms
from .errors import (
    EmptyTemplate,
    NoHistory,
    UnknownPrompt,
    UnknownVersion,
    ValidationError,
    VersionConflict,
)
from .model import PromptVersion, check_id
from .storage import REGISTRY_DIR, LogRecord, Store, check_project_id



class PromptRegistry:
    def __init__(self, store: Store) -> None:
        self._store = store
        self._lock = threading.Lock()
        self._prompts: dict[str, list[PromptVersion]] = {}
        self._bindings: dict[tuple[str, str], list[int]] = {}

    # -- fold ----------------------------------------------------------------

    def apply(self, record: LogRecord) -> None:
        if record.kind == "prompt_version":
            pv = PromptVersion.from_wire(record.payload)
            self._prompts.setdefault(pv.prompt_name, []).append(pv)
        elif record.kind == "binding_change":
            p = record.payload
            key = (p["project_id"], p["prompt_name"])
            stack = self._bindings.setdefault(key, [])
            if p["action"] == "activate":
                stack.append(p["version"])
            elif p["action"] == "rollback" and stack:
                stack.pop()

    # -- commands ------------------------------------------------------------

    def save_prompt(
        self,
        prompt_name: str,
        template: str,
        metadata: Mapping[str, str] | None = None,
        expected_latest: int | None = None,
        created_by: str = "",
        commit_tag: str | None = None,
    ) -> PromptVersion:
        check_id(prompt_name, "prompt_name")
        if not isinstance(template, str) or not template:
            raise EmptyTemplate("template must be a nonempty string")
        metadata = dict(metadata or {})
        for k, v in metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ValidationError("metadata", "must map strings to strings")
        if commit_tag is not None and not isinstance(commit_tag, str):
            raise ValidationError("commit_tag", "must be a string")
        with self._lock:
            latest = len(self._prompts.get(prompt_name, ()))
            if expected_latest is not None and expected_latest != latest:
                raise VersionConflict(
                    f"expected latest {expected_latest} but registry has {latest}",
                    expected=expected_latest,
                    actual=latest,
                )
            pv = PromptVersion(
                prompt_name=prompt_name,
                version=latest + 1,
                template=template,
                metadata=metadata,
                created_at=now_ms(),
                created_by=created_by,
                commit_tag=commit_tag,
            )
            self._store.append(REGISTRY_DIR, "prompt_version", pv.to_wire())
        return pv

    def get_prompt(self, prompt_name: str, version: int | None = None) -> PromptVersion:
        versions = self._prompts.get(prompt_name)
        if not versions:
            raise UnknownPrompt(f"no prompt named {prompt_name!r}")
        if version is None:
            return versions[-1]
        if not isinstance(version, int) or not 1 <= version <= len(versions):
            raise UnknownVersion(f"prompt {prompt_name!r} has no version {version}")
        return versions[version - 1]

    def latest_version(self, prompt_name: str) -> int:
        return len(self._prompts.get(prompt_name, ()))

    def list_prompts(self, project_id: str | None = None) -> list[dict]:
        if project_id is not None:
            check_project_id(project_id)
        out = []
        for name in sorted(self._prompts):
            versions = self._prompts[name]
            summary = {
                "prompt_name": name,
                "latest_version": len(versions),
                "active_version": None,
            }
            if project_id is not None:
                stack = self._bindings.get((project_id, name))
                summary["active_version"] = stack[-1] if stack else None
            out.append(summary)
        return out

    def active_version(self, project_id: str, prompt_name: str) -> int | None:
        stack = self._bindings.get((project_id, prompt_name))
        return stack[-1] if stack else None

    def activate(self, project_id: str, prompt_name: str, version: int) -> dict:
        check_project_id(project_id)
        with self._lock:
            versions = self._prompts.get(prompt_name)
            if not versions:
                raise UnknownPrompt(f"no prompt named {prompt_name!r}")
            if not isinstance(version, int) or not 1 <= version <= len(versions):
                raise UnknownVersion(f"prompt {prompt_name!r} has no version {version}")
            self._store.append(
                project_id,
                "binding_change",
                {
                    "project_id": project_id,
                    "prompt_name": prompt_name,
                    "action": "activate",
                    "version": version,
                    "at": now_ms(),
                },
            )
        return self.binding(project_id, prompt_name)

    def rollback(self, project_id: str, prompt_name: str) -> dict:
        check_project_id(project_id)
        with self._lock:
            stack = self._bindings.get((project_id, prompt_name), [])
            if len(stack) < 2:
                raise NoHistory(
                    f"binding for {prompt_name!r} in {project_id!r} has no prior activation"
                )
            self._store.append(
                project_id,
                "binding_change",
                {
                    "project_id": project_id,
                    "prompt_name": prompt_name,
                    "action": "rollback",
                    "version": stack[-2],
                    "at": now_ms(),
                },
            )
        return self.binding(project_id, prompt_name)

    def binding(self, project_id: str, prompt_name: str, experiment: dict | None = None) -> dict:
        return {
            "project_id": project_id,
            "prompt_name": prompt_name,
            "active_version": self.active_version(project_id, prompt_name),
            "experiment": experiment,
        }

    def prompt_names(self) -> list[str]:
        return sorted(self._prompts)
