import json

import pytest
from fastapi.testclient import TestClient

from refgame import service, speaker, synthworld
from refgame.errors import InsufficientTasks
from refgame.evaluation import aggregate_human


@pytest.fixture(scope="module")
def served(tmp_path_factory):
    root = tmp_path_factory.mktemp("serve-root")
    spec = synthworld.default_world_spec(seed=51)
    dataset = synthworld.generate_dataset(spec, {"test": 30})
    synthworld.write_dataset(dataset, root / "data", render=True, image_size=64)
    # a hand-rolled run file: one ground-truth phrase per side per pair
    entries = []
    for rec in dataset.records["test"]:
        pp = rec.phrase_pairs[0]
        entries.append(speaker.DecodedEntry(rec.pair_id, "a", 1, pp.left.text, -0.5))
        entries.append(speaker.DecodedEntry(rec.pair_id, "b", 1, pp.right.text, -0.5))
    speaker.save_run(entries, root / "run.jsonl")
    app = service.create_app(root, out_dir=root / "sessions")
    client = TestClient(app)
    return root, dataset, client


def open_session(client, n_tasks=6, seed=3, panel_size=3):
    response = client.post("/api/sessions", json={
        "dataset": "data", "run": "run.jsonl", "n_tasks": n_tasks, "seed": seed,
        "panel_size": panel_size,
    })
    assert response.status_code == 200, response.text
    return response.json()["session_id"]


class TestSessionLifecycle:
    def test_create_and_fetch_next(self, served):
        _, _, client = served
        sid = open_session(client)
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": "v1"}).json()
        assert set(view) == {"task_id", "phrase", "image_left_url", "image_right_url",
                             "completed", "total"}
        assert view["total"] == 6 and view["completed"] == 0

    def test_task_order_deterministic_under_seed(self, served):
        _, _, client = served
        s1 = open_session(client, seed=11)
        s2 = open_session(client, seed=11)
        phrases1 = _drain_phrases(client, s1, "v1")
        phrases2 = _drain_phrases(client, s2, "v1")
        assert phrases1 == phrases2

    def test_images_served_via_opaque_urls(self, served):
        _, _, client = served
        sid = open_session(client)
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": "v1"}).json()
        for key in ("image_left_url", "image_right_url"):
            img = client.get(view[key])
            assert img.status_code == 200
            assert img.headers["content-type"] == "image/png"
            assert img.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_no_target_information_in_payloads(self, served):
        _, _, client = served
        sid = open_session(client)
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": "v1"}).json()
        blob = json.dumps(view).lower()
        for secret in ("target", "swap", "image_a", "image_b", "pair_id", "-a", "-b"):
            assert secret not in blob

    def test_insufficient_tasks(self, served):
        _, _, client = served
        response = client.post("/api/sessions", json={
            "dataset": "data", "run": "run.jsonl", "n_tasks": 10_000, "seed": 1,
        })
        assert response.status_code == 400
        assert response.json()["error"] == "InsufficientTasks"

    def test_duplicate_answer_conflict(self, served):
        _, _, client = served
        sid = open_session(client)
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": "v1"}).json()
        body = {"task_id": view["task_id"], "voter": "v1", "choice": "left"}
        first = client.post(f"/api/sessions/{sid}/answers", json=body)
        assert first.status_code == 200
        second = client.post(f"/api/sessions/{sid}/answers", json=body)
        assert second.status_code == 409
        assert second.json()["error"] == "DuplicateAnswer"

    def test_unknown_task(self, served):
        _, _, client = served
        sid = open_session(client)
        response = client.post(f"/api/sessions/{sid}/answers", json={
            "task_id": "nope", "voter": "v1", "choice": "left"})
        assert response.status_code == 404
        assert response.json()["error"] == "UnknownTask"

    def test_summary_before_completion_conflicts(self, served):
        _, _, client = served
        sid = open_session(client)
        response = client.get(f"/api/sessions/{sid}/summary")
        assert response.status_code == 409
        assert response.json()["error"] == "IncompletePanels"


def _drain_phrases(client, sid, voter):
    phrases = []
    while True:
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": voter}).json()
        if view.get("done"):
            break
        phrases.append(view["phrase"])
        client.post(f"/api/sessions/{sid}/answers", json={
            "task_id": view["task_id"], "voter": voter, "choice": "left"})
    return phrases


def play_session(client, sid, voters, oracle_choice):
    """Complete the session: each voter answers per oracle_choice(task_view)."""
    for voter in voters:
        while True:
            view = client.get(f"/api/sessions/{sid}/next", params={"voter": voter}).json()
            if view.get("done"):
                break
            choice = oracle_choice(view, voter)
            response = client.post(f"/api/sessions/{sid}/answers", json={
                "task_id": view["task_id"], "voter": voter, "choice": choice})
            assert response.status_code == 200, response.text


class TestSummary:
    def test_full_session_summary_matches_offline_recomputation(self, served):
        root, _, client = served
        sid = open_session(client, n_tasks=8, seed=7)
        play_session(client, sid, ["v1", "v2", "v3"],
                     lambda view, voter: "left" if voter != "v3" else "unsure")
        served_summary = client.get(f"/api/sessions/{sid}/summary").json()

        session_dir = root / "sessions" / sid
        tasks = service.load_session_tasks(session_dir / "tasks.jsonl")
        answers = service.load_answers(session_dir / "answers.jsonl")
        offline = aggregate_human(tasks, answers, panel_size=3).to_json()
        assert served_summary == offline

    def test_session_closes_after_final_answer(self, served):
        _, _, client = served
        sid = open_session(client, n_tasks=3, seed=9)
        play_session(client, sid, ["v1", "v2", "v3"], lambda view, voter: "right")
        view = client.get(f"/api/sessions/{sid}/next", params={"voter": "v1"}).json()
        assert view["done"] is True
        late = client.post(f"/api/sessions/{sid}/answers", json={
            "task_id": "s00000", "voter": "v9", "choice": "left"})
        assert late.status_code == 409
        assert late.json()["error"] == "SessionClosed"

    def test_all_unsure_gives_half_with_guessing(self, served):
        _, _, client = served
        sid = open_session(client, n_tasks=4, seed=13)
        play_session(client, sid, ["v1", "v2", "v3"], lambda view, voter: "unsure")
        summary = client.get(f"/api/sessions/{sid}/summary").json()
        assert summary["majority_accuracy"] == 0.0
        assert summary["accuracy_with_guessing"] == 0.5

    def test_answer_log_is_append_only_record_of_choices(self, served):
        root, _, client = served
        sid = open_session(client, n_tasks=2, seed=15)
        play_session(client, sid, ["v1", "v2", "v3"], lambda view, voter: "left")
        log = (root / "sessions" / sid / "answers.jsonl").read_text().strip().splitlines()
        assert len(log) == 2 * 3
        parsed = [json.loads(line) for line in log]
        assert all(p["choice"] == "left" for p in parsed)


class TestCreateSessionUnit:
    def test_insufficient_pool_raises(self, served, tmp_path):
        root, dataset, _ = served
        with pytest.raises(InsufficientTasks):
            service.create_session(root / "data", root / "run.jsonl",
                                   n_tasks=10_000, seed=0)

    def test_swap_correctness_recovered_in_aggregation(self, served):
        # oracle voters answering through the swap always hit the target
        root, dataset, client = served
        sid = open_session(client, n_tasks=10, seed=21)
        session_dir = root / "sessions" / sid
        tasks = {t.task_id: t for t in service.load_session_tasks(session_dir / "tasks.jsonl")}

        def oracle(view, voter):
            task = tasks[view["task_id"]]
            want_left = (task.target_side == "a") != task.presentation_swap
            return "left" if want_left else "right"

        play_session(client, sid, ["v1", "v2", "v3"], oracle)
        summary = client.get(f"/api/sessions/{sid}/summary").json()
        assert summary["majority_accuracy"] == 1.0
