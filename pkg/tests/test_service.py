import json

import pytest
from fastapi.testclient import TestClient

from branchstance.errors import (
    DuplicateSubmission,
    InsufficientData,
    InvalidLabel,
    NoTasksRemaining,
    UnknownTask,
    UnresolvedInstances,
)
from branchstance.ingest import Dataset, load_dataset, save_dataset
from branchstance.service import AnnotationProject, AnnotationRecord, create_app
from branchstance.thread_model import build_thread
from conftest import make_instance


def small_dataset():
    recs = [
        make_instance("p", tid="t1", text="root post text",
                      created_at="2021-01-01T00:00:00"),
        make_instance("c1", tid="t1", parent="p", text="first reply",
                      created_at="2021-01-01T00:01:00"),
        make_instance("c2", tid="t1", parent="c1", text="second reply",
                      created_at="2021-01-01T00:02:00"),
    ]
    return Dataset(threads=[build_thread(recs)])


def label_all_round1(project, annotators, label="favor", per_instance=None):
    """Drive each annotator through round 1 until the pool is exhausted."""
    got = {}
    for a in annotators:
        while True:
            try:
                task = project.next_task(a, "context_free")
            except NoTasksRemaining:
                break
            lbl = (per_instance or {}).get(task["instance_id"], label)
            project.submit_label(AnnotationRecord(
                instance_id=task["instance_id"], annotator_id=a,
                round="context_free", label=lbl))
            got.setdefault(task["instance_id"], []).append(a)
    return got


class TestTaskDispensing:
    def test_round1_payload_has_no_context(self):
        project = AnnotationProject(small_dataset())
        task = project.next_task("ann1", "context_free")
        assert task["ancestors"] == []
        assert task["round"] == "context_free"
        assert task["labels"] == ["favor", "against", "neither"]

    def test_contextual_payload_has_ancestors(self):
        project = AnnotationProject(small_dataset(), min_annotators=1)
        label_all_round1(project, ["ann1"])
        task = project.next_task("ann1", "contextual")
        # dispensing order follows the thread, so the post comes first
        while task["instance_id"] != "c2":
            project.submit_label(AnnotationRecord(
                instance_id=task["instance_id"], annotator_id="ann1",
                round="contextual", label="favor"))
            task = project.next_task("ann1", "contextual")
        assert [a["instance_id"] for a in task["ancestors"]] == ["p", "c1"]
        assert task["ancestors"][0]["text"] == "root post text"

    def test_quota_three_of_four_annotators(self):
        project = AnnotationProject(small_dataset(), min_annotators=3)
        got = label_all_round1(project, ["a1", "a2", "a3", "a4"])
        assert all(len(v) == 3 for v in got.values())

    def test_no_repeat_for_same_annotator(self):
        project = AnnotationProject(small_dataset(), min_annotators=3)
        seen = set()
        for _ in range(3):
            task = project.next_task("a1", "context_free")
            assert task["instance_id"] not in seen
            seen.add(task["instance_id"])
            project.submit_label(AnnotationRecord(
                instance_id=task["instance_id"], annotator_id="a1",
                round="context_free", label="favor"))
        with pytest.raises(NoTasksRemaining):
            project.next_task("a1", "context_free")

    def test_contextual_requires_round1_label_first(self):
        project = AnnotationProject(small_dataset(), min_annotators=1)
        with pytest.raises(NoTasksRemaining):
            project.next_task("a1", "contextual")

    def test_unknown_round(self):
        with pytest.raises(InvalidLabel):
            AnnotationProject(small_dataset()).next_task("a1", "round3")


class TestSubmission:
    def test_duplicate_rejected(self):
        project = AnnotationProject(small_dataset(), min_annotators=1)
        task = project.next_task("a1", "context_free")
        rec = AnnotationRecord(instance_id=task["instance_id"], annotator_id="a1",
                               round="context_free", label="favor")
        seq = project.submit_label(rec)
        assert seq == 1
        with pytest.raises(DuplicateSubmission):
            project.submit_label(rec)

    def test_unassigned_submission_rejected(self):
        project = AnnotationProject(small_dataset(), min_annotators=1)
        with pytest.raises(UnknownTask):
            project.submit_label(AnnotationRecord(
                instance_id="p", annotator_id="nobody",
                round="context_free", label="favor"))

    def test_invalid_label_rejected(self):
        with pytest.raises(InvalidLabel):
            AnnotationRecord(instance_id="p", annotator_id="a1",
                             round="context_free", label="agree")


class TestDisagreement:
    def _project_with_both_rounds(self, round2_per_instance):
        # four single-annotator-quota instances would collapse; use one
        # annotator with quota 1 across a 4-instance dataset
        recs = [make_instance("p", tid="t1", text="post", created_at="2021-01-01T00:00:00")]
        for i in range(3):
            recs.append(make_instance(f"c{i}", tid="t1", parent="p", text=f"reply {i}",
                                      created_at=f"2021-01-01T00:0{i + 1}:00"))
        project = AnnotationProject(Dataset(threads=[build_thread(recs)]),
                                    min_annotators=1)
        label_all_round1(project, ["a1"], label="favor")
        while True:
            try:
                task = project.next_task("a1", "contextual")
            except NoTasksRemaining:
                break
            project.submit_label(AnnotationRecord(
                instance_id=task["instance_id"], annotator_id="a1",
                round="contextual",
                label=round2_per_instance.get(task["instance_id"], "favor")))
        return project

    def test_two_of_four_flipped_is_half(self):
        project = self._project_with_both_rounds({"c0": "against", "c1": "against"})
        assert project.round_disagreement_rate() == pytest.approx(0.5)

    def test_no_flips_is_zero(self):
        project = self._project_with_both_rounds({})
        assert project.round_disagreement_rate() == 0.0

    def test_insufficient_data(self):
        project = AnnotationProject(small_dataset())
        with pytest.raises(InsufficientData):
            project.round_disagreement_rate()


class TestFinalize:
    def _fully_labeled_project(self, votes_by_instance):
        project = AnnotationProject(small_dataset(), min_annotators=3)
        annotators = ["a1", "a2", "a3"]
        label_all_round1(project, annotators)
        for a in annotators:
            while True:
                try:
                    task = project.next_task(a, "contextual")
                except NoTasksRemaining:
                    break
                vote_idx = annotators.index(a)
                project.submit_label(AnnotationRecord(
                    instance_id=task["instance_id"], annotator_id=a,
                    round="contextual",
                    label=votes_by_instance[task["instance_id"]][vote_idx]))
        return project

    def test_majority_wins(self):
        votes = {"p": ["favor", "favor", "against"],
                 "c1": ["against", "against", "against"],
                 "c2": ["neither", "neither", "favor"]}
        project = self._fully_labeled_project(votes)
        out = project.finalize_labels()
        labels = {i.instance_id: i.label for i in out.instances()}
        assert labels == {"p": "favor", "c1": "against", "c2": "neither"}

    def test_tie_needs_adjudication(self):
        votes = {"p": ["favor", "against", "neither"],
                 "c1": ["favor", "favor", "favor"],
                 "c2": ["favor", "favor", "favor"]}
        project = self._fully_labeled_project(votes)
        with pytest.raises(UnresolvedInstances) as e:
            project.finalize_labels()
        assert e.value.instance_ids == ["p"]
        out = project.finalize_labels(adjudications={"p": "neither"})
        assert {i.instance_id: i.label for i in out.instances()}["p"] == "neither"

    def test_finalized_dataset_round_trips(self, tmp_path):
        votes = {k: ["favor", "favor", "favor"] for k in ("p", "c1", "c2")}
        out = self._fully_labeled_project(votes).finalize_labels()
        path = tmp_path / "final.jsonl"
        save_dataset(out, path)
        back = load_dataset(path)
        assert all(i.label == "favor" for i in back.instances())

    def test_finalize_idempotent(self):
        votes = {k: ["against", "against", "favor"] for k in ("p", "c1", "c2")}
        project = self._fully_labeled_project(votes)
        a = project.finalize_labels()
        b = project.finalize_labels()
        assert a.records() == b.records()


class TestReplay:
    def test_log_replay_reconstructs_state(self, tmp_path):
        log = tmp_path / "log.jsonl"
        project = AnnotationProject(small_dataset(), min_annotators=3, log_path=log)
        label_all_round1(project, ["a1", "a2"], label="against")
        replayed = AnnotationProject(small_dataset(), min_annotators=3, log_path=log)
        assert replayed.labels == project.labels
        assert replayed.assigned == project.assigned
        assert replayed.stats() == project.stats()
        # sequence numbers continue after the replayed ones
        task = replayed.next_task("a3", "context_free")
        seq = replayed.submit_label(AnnotationRecord(
            instance_id=task["instance_id"], annotator_id="a3",
            round="context_free", label="favor"))
        assert seq == 7

    def test_log_is_append_only_json_lines(self, tmp_path):
        log = tmp_path / "log.jsonl"
        project = AnnotationProject(small_dataset(), min_annotators=1, log_path=log)
        label_all_round1(project, ["a1"])
        events = [json.loads(l) for l in log.read_text().splitlines()]
        assert [e["event"] for e in events] == ["assign", "label"] * 3


class TestHttpApi:
    def _client(self, **kw):
        project = AnnotationProject(small_dataset(), min_annotators=1)
        return TestClient(create_app(project, **kw)), project

    def test_next_and_submit_flow(self):
        client, _ = self._client()
        r = client.get("/projects/p1/next", params={"annotator": "a1",
                                                    "round": "context_free"})
        assert r.status_code == 200
        task = r.json()
        assert task["ancestors"] == []
        r = client.post("/projects/p1/labels", json={
            "instance_id": task["instance_id"], "annotator_id": "a1",
            "round": "context_free", "label": "favor"})
        assert r.status_code == 200
        assert r.json()["sequence"] == 1

    def test_duplicate_is_409(self):
        client, _ = self._client()
        task = client.get("/projects/p1/next", params={
            "annotator": "a1", "round": "context_free"}).json()
        body = {"instance_id": task["instance_id"], "annotator_id": "a1",
                "round": "context_free", "label": "favor"}
        assert client.post("/projects/p1/labels", json=body).status_code == 200
        r = client.post("/projects/p1/labels", json=body)
        assert r.status_code == 409
        assert r.json()["code"] == "duplicate_submission"

    def test_invalid_label_is_400(self):
        client, _ = self._client()
        task = client.get("/projects/p1/next", params={
            "annotator": "a1", "round": "context_free"}).json()
        r = client.post("/projects/p1/labels", json={
            "instance_id": task["instance_id"], "annotator_id": "a1",
            "round": "context_free", "label": "agree"})
        assert r.status_code == 400

    def test_exhausted_pool_is_404(self):
        client, _ = self._client()
        for _ in range(3):
            task = client.get("/projects/p1/next", params={
                "annotator": "a1", "round": "context_free"}).json()
            client.post("/projects/p1/labels", json={
                "instance_id": task["instance_id"], "annotator_id": "a1",
                "round": "context_free", "label": "favor"})
        r = client.get("/projects/p1/next", params={"annotator": "a1",
                                                    "round": "context_free"})
        assert r.status_code == 404
        assert r.json()["code"] == "no_tasks_remaining"

    def test_stats_endpoint(self):
        client, _ = self._client()
        r = client.get("/projects/p1/stats")
        assert r.status_code == 200
        assert r.json()["instances"] == 3

    def test_thread_endpoint(self):
        client, _ = self._client()
        r = client.get("/threads/t1")
        assert r.status_code == 200
        assert [i["instance_id"] for i in r.json()["instances"]] == ["p", "c1", "c2"]
        assert client.get("/threads/nope").status_code == 404

    def test_attribution_endpoint(self, tmp_path):
        report = {"target_id": "c1", "predicted_label": "favor",
                  "confidence": 0.9, "records": []}
        (tmp_path / "c1.json").write_text(json.dumps(report))
        client, _ = self._client(attribution_dir=tmp_path)
        assert client.get("/attribution/c1").json() == report
        assert client.get("/attribution/zz").status_code == 404

    def test_bearer_token_required_when_configured(self):
        client, _ = self._client(bearer_token="sekrit")
        r = client.get("/projects/p1/stats")
        assert r.status_code == 401
        r = client.get("/projects/p1/stats",
                       headers={"Authorization": "Bearer sekrit"})
        assert r.status_code == 200
