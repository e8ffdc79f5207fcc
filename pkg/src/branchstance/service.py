"""Two-round annotation back end.

Round 1 (context_free) presents each instance alone; round 2 (contextual)
presents the instance with its sub-branch.  Labels are persisted to an
append-only line-delimited log; replaying the log reconstructs the project
state exactly.  Final labels are the majority of round-2 labels, with
explicit adjudication of ties.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path
from typing import Optional

from .errors import (
    DuplicateSubmission,
    InsufficientData,
    InvalidLabel,
    NoTasksRemaining,
    UnknownTask,
    UnresolvedInstances,
)
from .ingest import Dataset
from .thread_model import STANCE_LABELS, sub_branch

ROUNDS = ("context_free", "contextual")


@dataclass(frozen=True)
class AnnotationRecord:
    instance_id: str
    annotator_id: str
    round: str
    label: str
    submitted_at: float = 0.0

    def __post_init__(self):
        if self.round not in ROUNDS:
            raise InvalidLabel(f"unknown round {self.round!r}")
        if self.label not in STANCE_LABELS:
            raise InvalidLabel(f"unknown label {self.label!r}")


def _majority(labels: list[str]) -> Optional[str]:
    counts = {lbl: labels.count(lbl) for lbl in set(labels)}
    best = max(counts.values())
    winners = [lbl for lbl, c in counts.items() if c == best]
    return winners[0] if len(winners) == 1 else None


class AnnotationProject:
    """Task dispensing, label persistence, and round statistics for one dataset."""

    def __init__(self, dataset: Dataset, min_annotators: int = 3,
                 log_path: Optional[str | Path] = None):
        self.dataset = dataset
        self.min_annotators = min_annotators
        self.log_path = Path(log_path) if log_path else None
        self._lock = threading.Lock()
        self._seq = 0
        # instance -> annotators it was dispensed to / labeled by, per round
        self.assigned: dict[str, dict[str, set[str]]] = {r: {} for r in ROUNDS}
        self.labels: dict[str, dict[str, dict[str, str]]] = {r: {} for r in ROUNDS}
        self._threads_by_instance = {
            inst.instance_id: t for t in dataset.threads for inst in t.instances()
        }
        self._order = [inst.instance_id for t in sorted(dataset.threads,
                                                        key=lambda t: t.thread_id)
                       for inst in t.instances()]
        if self.log_path and self.log_path.exists():
            self._replay()

    # -- persistence --

    def _append(self, event: dict) -> None:
        if self.log_path is None:
            return
        with self.log_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(event, ensure_ascii=False) + "\n")

    def _replay(self) -> None:
        for line in self.log_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            ev = json.loads(line)
            if ev["event"] == "assign":
                self.assigned[ev["round"]].setdefault(ev["instance_id"], set()).add(
                    ev["annotator_id"])
            elif ev["event"] == "label":
                self.labels[ev["round"]].setdefault(ev["instance_id"], {})[
                    ev["annotator_id"]] = ev["label"]
                self._seq = max(self._seq, ev["seq"])

    # -- operations --

    def next_task(self, annotator_id: str, round: str) -> dict:
        """Dispense one task; round-1 payloads never include ancestors."""
        if round not in ROUNDS:
            raise InvalidLabel(f"unknown round {round!r}")
        with self._lock:
            for iid in self._order:
                assigned = self.assigned[round].setdefault(iid, set())
                if annotator_id in assigned or len(assigned) >= self.min_annotators:
                    continue
                if round == "contextual":
                    # the same annotator must label context-free first
                    if annotator_id not in self.labels["context_free"].get(iid, {}):
                        continue
                assigned.add(annotator_id)
                self._append({"event": "assign", "instance_id": iid,
                              "annotator_id": annotator_id, "round": round})
                return self._payload(iid, round)
            raise NoTasksRemaining(f"no {round} tasks left for {annotator_id!r}")

    def _payload(self, instance_id: str, round: str) -> dict:
        thread = self._threads_by_instance[instance_id]
        target = thread.nodes[instance_id]
        ancestors = []
        if round == "contextual":
            branch = sub_branch(thread, instance_id)
            ancestors = [
                {"instance_id": x.instance_id, "text": x.text}
                for x in branch.instances[:-1]
            ]
        return {
            "instance_id": instance_id,
            "thread_id": thread.thread_id,
            "text": target.text,
            "round": round,
            "ancestors": ancestors,
            "labels": list(STANCE_LABELS),
        }

    def submit_label(self, record: AnnotationRecord) -> int:
        """Durably append one label; returns the stored sequence number."""
        with self._lock:
            if record.instance_id not in self._threads_by_instance:
                raise UnknownTask(f"unknown instance {record.instance_id!r}")
            if record.annotator_id not in self.assigned[record.round].get(
                    record.instance_id, set()):
                raise UnknownTask(
                    f"{record.instance_id!r} was not dispensed to "
                    f"{record.annotator_id!r} in round {record.round!r}")
            got = self.labels[record.round].setdefault(record.instance_id, {})
            if record.annotator_id in got:
                raise DuplicateSubmission(
                    f"{record.annotator_id!r} already labeled {record.instance_id!r} "
                    f"in round {record.round!r}")
            got[record.annotator_id] = record.label
            self._seq += 1
            self._append({"event": "label", "seq": self._seq,
                          "instance_id": record.instance_id,
                          "annotator_id": record.annotator_id,
                          "round": record.round, "label": record.label,
                          "submitted_at": record.submitted_at or time.time()})
            return self._seq

    def round_disagreement_rate(self) -> float:
        """Fraction of instances whose round-1 majority differs from round-2's."""
        flipped = 0
        counted = 0
        for iid in self._order:
            m1 = _majority(list(self.labels["context_free"].get(iid, {}).values()) or [""])
            m2 = _majority(list(self.labels["contextual"].get(iid, {}).values()) or [""])
            if not m1 or not m2 or m1 not in STANCE_LABELS or m2 not in STANCE_LABELS:
                continue
            counted += 1
            flipped += int(m1 != m2)
        if counted == 0:
            raise InsufficientData("no instances with majorities in both rounds")
        return flipped / counted

    def finalize_labels(self, adjudications: Optional[dict[str, str]] = None) -> Dataset:
        """Majority vote on round-2 labels; ties require an adjudication entry."""
        adjudications = adjudications or {}
        final: dict[str, str] = {}
        unresolved = []
        for iid in self._order:
            votes = list(self.labels["contextual"].get(iid, {}).values())
            maj = _majority(votes) if len(votes) >= self.min_annotators else None
            if maj is None:
                adj = adjudications.get(iid)
                if adj is None:
                    unresolved.append(iid)
                    continue
                if adj not in STANCE_LABELS:
                    raise InvalidLabel(f"adjudication label {adj!r}")
                maj = adj
            final[iid] = maj
        if unresolved:
            raise UnresolvedInstances(unresolved)
        threads = []
        for t in self.dataset.threads:
            records = [dc_replace(inst, label=final[inst.instance_id])
                       for inst in t.instances()]
            from .thread_model import build_thread

            threads.append(build_thread(records))
        return Dataset(threads=threads,
                       provenance={**self.dataset.provenance, "annotated": True})

    def stats(self) -> dict:
        out = {
            "instances": len(self._order),
            "min_annotators": self.min_annotators,
            "labels_per_round": {r: sum(len(v) for v in self.labels[r].values())
                                 for r in ROUNDS},
            "assigned_per_round": {r: sum(len(v) for v in self.assigned[r].values())
                                   for r in ROUNDS},
        }
        try:
            out["round_disagreement_rate"] = self.round_disagreement_rate()
        except InsufficientData:
            out["round_disagreement_rate"] = None
        return out


# ---------------------------------------------------------------------------
# HTTP layer

def create_app(project: AnnotationProject,
               attribution_dir: Optional[str | Path] = None,
               bearer_token: Optional[str] = None):
    """JSON API over one annotation project.

    ``attribution_dir`` holds precomputed per-instance attribution reports
    (<instance_id>.json) proxied to the UI.
    """
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="branchstance annotation service")

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status,
                            content={"code": code, "message": message})

    @app.middleware("http")
    async def check_token(request: Request, call_next):
        if bearer_token is not None:
            auth = request.headers.get("authorization", "")
            if auth != f"Bearer {bearer_token}":
                return error(401, "unauthorized", "missing or bad bearer token")
        return await call_next(request)

    @app.get("/projects/{project_id}/next")
    def next_task(project_id: str, annotator: str, round: str):
        try:
            return project.next_task(annotator, round)
        except NoTasksRemaining as e:
            return error(404, "no_tasks_remaining", str(e))
        except InvalidLabel as e:
            return error(400, "invalid_round", str(e))

    @app.post("/projects/{project_id}/labels")
    def submit(project_id: str, body: dict):
        try:
            record = AnnotationRecord(
                instance_id=body["instance_id"],
                annotator_id=body["annotator_id"],
                round=body["round"],
                label=body["label"],
                submitted_at=time.time(),
            )
        except (KeyError, InvalidLabel) as e:
            return error(400, "invalid_label", str(e))
        try:
            seq = project.submit_label(record)
        except DuplicateSubmission as e:
            return error(409, "duplicate_submission", str(e))
        except UnknownTask as e:
            return error(404, "unknown_task", str(e))
        return {"sequence": seq}

    @app.get("/projects/{project_id}/stats")
    def stats(project_id: str):
        return project.stats()

    @app.get("/threads/{thread_id}")
    def thread(thread_id: str):
        for t in project.dataset.threads:
            if t.thread_id == thread_id:
                return {
                    "thread_id": t.thread_id,
                    "instances": [
                        {"instance_id": i.instance_id, "parent_id": i.parent_id,
                         "text": i.text}
                        for i in t.instances()
                    ],
                }
        return error(404, "unknown_thread", f"no thread {thread_id!r}")

    @app.get("/attribution/{instance_id}")
    def attribution(instance_id: str):
        if attribution_dir is None:
            return error(404, "no_attribution", "attribution reports not configured")
        path = Path(attribution_dir) / f"{instance_id}.json"
        if not path.exists():
            return error(404, "no_attribution", f"no report for {instance_id!r}")
        return json.loads(path.read_text(encoding="utf-8"))

    return app
