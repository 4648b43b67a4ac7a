"""Session service for live reference games: serves image pairs and phrases
to human listeners, collects left/right/unsure votes, and reports the
majority summary once every panel is complete.

Clients never see target sides or swap bits: tasks are addressed by opaque
ids and images by per-task left/right URLs resolved server-side. Answers
are appended to a log file before acknowledgement; the summary is a pure
function of that log.
"""

from __future__ import annotations

import json
import secrets
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .errors import (
    ConfigError,
    DuplicateAnswer,
    IncompletePanel,
    InsufficientTasks,
    RefGameError,
    SessionClosed,
    UnknownTask,
)
from .evaluation import CHOICES, EvalReport, GameAnswer, GameTask, aggregate_human
from .speaker import load_run


class IncompletePanels(IncompletePanel):
    """Summary requested before every task has a full panel."""


@dataclass
class Session:
    session_id: str
    dataset_dir: Path
    tasks: list[GameTask]
    pairs: dict[str, tuple[str, str]]
    panel_size: int
    seed: int
    answers: list[GameAnswer] = field(default_factory=list)
    log_path: Path | None = None

    @property
    def total(self) -> int:
        return len(self.tasks)

    @property
    def complete(self) -> bool:
        return len(self.answers) >= self.total * self.panel_size

    def answered_by(self, voter: str) -> set[str]:
        return {a.task_id for a in self.answers if a.voter_id == voter}

    def next_task(self, voter: str) -> GameTask | None:
        done = self.answered_by(voter)
        for task in self.tasks:
            if task.task_id not in done:
                return task
        return None

    def task_by_id(self, task_id: str) -> GameTask:
        for task in self.tasks:
            if task.task_id == task_id:
                return task
        raise UnknownTask(f"no task {task_id!r} in session {self.session_id}")

    def record_answer(self, task_id: str, voter: str, choice: str) -> GameAnswer:
        if self.complete:
            raise SessionClosed(f"session {self.session_id} is complete")
        task = self.task_by_id(task_id)
        if task.task_id in self.answered_by(voter):
            raise DuplicateAnswer(f"voter {voter!r} already answered {task_id}")
        if choice not in CHOICES:
            raise ConfigError(f"choice must be one of {CHOICES}, got {choice!r}")
        answer = GameAnswer(task_id=task_id, voter_id=voter, choice=choice,
                            timestamp=time.time())
        if self.log_path is not None:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({
                    "task_id": answer.task_id,
                    "voter_id": answer.voter_id,
                    "choice": answer.choice,
                    "timestamp": answer.timestamp,
                }, separators=(",", ":")) + "\n")
                fh.flush()
        self.answers.append(answer)
        return answer

    def summary(self) -> EvalReport:
        if not self.complete:
            raise IncompletePanels(
                f"{len(self.answers)} of {self.total * self.panel_size} answers collected"
            )
        return aggregate_human(self.tasks, self.answers, self.panel_size)


def create_session(
    dataset_dir: str | Path,
    run_path: str | Path,
    n_tasks: int,
    seed: int,
    panel_size: int = 3,
    session_id: str | None = None,
    out_dir: str | Path | None = None,
) -> Session:
    """Sample n_tasks gradable decoded phrases with a seeded shuffle; the
    presentation swap is drawn per task and stored server-side only."""
    dataset_dir = Path(dataset_dir)
    entries = load_run(run_path)
    records = _load_pairs(dataset_dir)
    rng = np.random.Generator(np.random.PCG64([seed, 23]))
    pool = [e for e in entries if e.phrase.strip() and e.pair_id in records]
    if n_tasks > len(pool):
        raise InsufficientTasks(f"asked for {n_tasks} tasks, run offers {len(pool)}")
    order = rng.permutation(len(pool))
    tasks = []
    for i, idx in enumerate(order[:n_tasks]):
        e = pool[idx]
        tasks.append(
            GameTask(
                task_id=f"s{i:05d}",
                pair_id=e.pair_id,
                phrase_tokens=tuple(e.phrase.split()),
                target_side=e.target,
                presentation_swap=bool(rng.integers(2)),
                rank=e.rank,
            )
        )
    session_id = session_id or secrets.token_hex(8)
    session = Session(
        session_id=session_id,
        dataset_dir=dataset_dir,
        tasks=tasks,
        pairs={pid: records[pid] for pid in {t.pair_id for t in tasks}},
        panel_size=panel_size,
        seed=seed,
    )
    if out_dir is not None:
        session_dir = Path(out_dir) / session_id
        session_dir.mkdir(parents=True, exist_ok=True)
        session.log_path = session_dir / "answers.jsonl"
        save_session_tasks(session, session_dir / "tasks.jsonl")
        (session_dir / "meta.json").write_text(
            json.dumps(
                {
                    "session_id": session_id,
                    "dataset": str(dataset_dir),
                    "run": str(run_path),
                    "n_tasks": n_tasks,
                    "panel_size": panel_size,
                    "seed": seed,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
    return session


def _load_pairs(dataset_dir: Path) -> dict[str, tuple[str, str]]:
    from .data import load_annotations

    pairs: dict[str, tuple[str, str]] = {}
    for split_file in sorted(dataset_dir.glob("*.jsonl")):
        if split_file.name in ("objects.jsonl",):
            continue
        try:
            for rec in load_annotations(split_file):
                pairs[rec.pair_id] = (rec.image_a, rec.image_b)
        except RefGameError:
            continue
    if not pairs:
        raise ConfigError(f"no annotation records found under {dataset_dir}")
    return pairs


def save_session_tasks(session: Session, path: str | Path) -> None:
    """Server-side task dump (includes the secret fields) for offline
    recomputation of the summary from the answer log."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in session.tasks:
            fh.write(json.dumps({
                "task_id": t.task_id,
                "pair_id": t.pair_id,
                "phrase": t.phrase_text,
                "target_side": t.target_side,
                "presentation_swap": t.presentation_swap,
                "rank": t.rank,
            }, separators=(",", ":")) + "\n")


def load_session_tasks(path: str | Path) -> list[GameTask]:
    tasks = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            tasks.append(GameTask(
                task_id=obj["task_id"],
                pair_id=obj["pair_id"],
                phrase_tokens=tuple(obj["phrase"].split()),
                target_side=obj["target_side"],
                presentation_swap=bool(obj["presentation_swap"]),
                rank=obj.get("rank"),
            ))
    return tasks


def load_answers(path: str | Path) -> list[GameAnswer]:
    answers = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            answers.append(GameAnswer(
                task_id=obj["task_id"],
                voter_id=obj["voter_id"],
                choice=obj["choice"],
                timestamp=float(obj.get("timestamp", 0.0)),
            ))
    return answers


# -- HTTP layer ------------------------------------------------------------------

_STATUS = {
    "ConfigError": 400,
    "InsufficientTasks": 400,
    "UnknownTask": 404,
    "DuplicateAnswer": 409,
    "SessionClosed": 409,
    "IncompletePanel": 409,
    "IncompletePanels": 409,
}


def create_app(root_dir: str | Path, out_dir: str | Path | None = None,
               frontend_dir: str | Path | None = None) -> FastAPI:
    """App serving the session API; dataset and run paths in requests are
    resolved relative to root_dir. Mounts the built UI when present, but
    everything works without it."""
    root = Path(root_dir)
    out = Path(out_dir) if out_dir else root / "sessions"
    app = FastAPI(title="refgame sessions")
    sessions: dict[str, Session] = {}

    @app.exception_handler(RefGameError)
    async def handle_refgame_error(_request: Request, exc: RefGameError):
        return JSONResponse(
            status_code=_STATUS.get(exc.code, 400),
            content={"error": exc.code, "detail": str(exc)},
        )

    @app.post("/api/sessions")
    async def post_session(body: dict):
        for key in ("dataset", "run", "n_tasks", "seed"):
            if key not in body:
                raise ConfigError(f"missing field {key!r}")
        session = create_session(
            dataset_dir=root / str(body["dataset"]),
            run_path=root / str(body["run"]),
            n_tasks=int(body["n_tasks"]),
            seed=int(body["seed"]),
            panel_size=int(body.get("panel_size", 3)),
            out_dir=out,
        )
        sessions[session.session_id] = session
        return {"session_id": session.session_id, "n_tasks": session.total,
                "panel_size": session.panel_size}

    def get_session(session_id: str) -> Session:
        if session_id not in sessions:
            raise UnknownTask(f"no session {session_id!r}")
        return sessions[session_id]

    def task_view(session: Session, task: GameTask, voter: str) -> dict:
        base = f"/api/sessions/{session.session_id}/tasks/{task.task_id}/image"
        return {
            "task_id": task.task_id,
            "phrase": task.phrase_text,
            "image_left_url": f"{base}/left",
            "image_right_url": f"{base}/right",
            "completed": len(session.answered_by(voter)),
            "total": session.total,
        }

    @app.get("/api/sessions/{session_id}/next")
    async def get_next(session_id: str, voter: str):
        session = get_session(session_id)
        task = session.next_task(voter)
        if task is None:
            return {"done": True, "completed": session.total, "total": session.total}
        return task_view(session, task, voter)

    @app.get("/api/sessions/{session_id}/tasks/{task_id}/image/{side}")
    async def get_image(session_id: str, task_id: str, side: str):
        session = get_session(session_id)
        task = session.task_by_id(task_id)
        if side not in ("left", "right"):
            raise UnknownTask(f"side must be left or right, got {side!r}")
        image_a, image_b = session.pairs[task.pair_id]
        want_a = (side == "left") != task.presentation_swap
        image_id = image_a if want_a else image_b
        path = session.dataset_dir / "images" / f"{image_id}.png"
        if not path.exists():
            raise ConfigError(f"image {image_id} not rendered for this dataset")
        return FileResponse(path, media_type="image/png")

    @app.post("/api/sessions/{session_id}/answers")
    async def post_answer(session_id: str, body: dict):
        session = get_session(session_id)
        for key in ("task_id", "voter", "choice"):
            if key not in body:
                raise ConfigError(f"missing field {key!r}")
        voter = str(body["voter"])
        session.record_answer(str(body["task_id"]), voter, str(body["choice"]))
        nxt = session.next_task(voter)
        return {
            "ok": True,
            "next_task_id": nxt.task_id if nxt else None,
            "completed": len(session.answered_by(voter)),
            "total": session.total,
            "session_complete": session.complete,
        }

    @app.get("/api/sessions/{session_id}/summary")
    async def get_summary(session_id: str):
        session = get_session(session_id)
        return session.summary().to_json()

    if frontend_dir is not None and Path(frontend_dir).exists():
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="ui")
    return app
