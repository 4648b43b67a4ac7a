"""Reference-game evaluation: machine-listener accuracy over top-k decoded
phrases, per-position accuracy on human-schema annotations, and majority
aggregation of human panels with the accuracy-with-guessing convention.

A task counts as correct only when the judged probability of the true
target strictly exceeds one half; exact ties score as wrong.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AnnotationRecord
from .errors import IncompletePanel, MissingRanks, ParseError
from .speaker import DecodedEntry

LEFT = "left"
RIGHT = "right"
UNSURE = "unsure"
CHOICES = (LEFT, RIGHT, UNSURE)


@dataclass(frozen=True)
class GameTask:
    task_id: str
    pair_id: str
    phrase_tokens: tuple[str, ...]
    target_side: str  # "a" | "b"
    presentation_swap: bool = False
    rank: int | None = None
    position: int | None = None

    def __post_init__(self):
        if self.target_side not in ("a", "b"):
            raise ParseError(f"task {self.task_id}: bad target side {self.target_side!r}")

    @property
    def gradable(self) -> bool:
        # a speaker may emit the empty sequence; nothing can ground it, so it
        # stays in the rank grid and scores as incorrect
        return bool(self.phrase_tokens)

    @property
    def phrase_text(self) -> str:
        return " ".join(self.phrase_tokens)


@dataclass(frozen=True)
class GameAnswer:
    task_id: str
    voter_id: str
    choice: str
    timestamp: float = 0.0

    def __post_init__(self):
        if self.choice not in CHOICES:
            raise ParseError(f"answer for {self.task_id}: bad choice {self.choice!r}")


@dataclass
class EvalReport:
    total_tasks: int = 0
    per_k: dict[int, float] = field(default_factory=dict)
    per_position: dict[int, float] = field(default_factory=dict)
    majority_correct: int = 0
    majority_wrong: int = 0
    no_majority: int = 0
    majority_accuracy: float | None = None
    accuracy_with_guessing: float | None = None

    def to_json(self) -> dict:
        return {
            "total_tasks": self.total_tasks,
            "per_k": {str(k): v for k, v in sorted(self.per_k.items())},
            "per_position": {str(k): v for k, v in sorted(self.per_position.items())},
            "majority_correct": self.majority_correct,
            "majority_wrong": self.majority_wrong,
            "no_majority": self.no_majority,
            "majority_accuracy": self.majority_accuracy,
            "accuracy_with_guessing": self.accuracy_with_guessing,
        }

    def render(self) -> str:
        lines = [f"tasks: {self.total_tasks}"]
        if self.per_k:
            lines.append("top-k accuracy:")
            for k, acc in sorted(self.per_k.items()):
                lines.append(f"  top-{k}: {100 * acc:.1f}")
        if self.per_position:
            lines.append("per-position accuracy:")
            for pos, acc in sorted(self.per_position.items()):
                lines.append(f"  position {pos}: {100 * acc:.1f}")
        if self.majority_accuracy is not None:
            lines.append(
                f"majority accuracy: {100 * self.majority_accuracy:.1f} "
                f"({100 * self.accuracy_with_guessing:.1f} with guessing); "
                f"no majority on {self.no_majority} of {self.total_tasks}"
            )
        return "\n".join(lines)


def pair_index(records: list[AnnotationRecord]) -> dict[str, tuple[str, str]]:
    return {rec.pair_id: (rec.image_a, rec.image_b) for rec in records}


def tasks_from_run(
    entries: list[DecodedEntry], prefix: str = "t"
) -> list[GameTask]:
    """One task per decoded entry, phrased as a simple listener sees it:
    pair sequences are cut at the first "vs" and the first half (the one
    crediting the target) kept; without a "vs" the whole sequence stands."""
    from .speaker import split_phrase_pair

    tasks = []
    for i, e in enumerate(entries):
        tokens = tuple(e.phrase.split())
        first, _ = split_phrase_pair(tokens)
        tasks.append(
            GameTask(
                task_id=f"{prefix}{i:06d}",
                pair_id=e.pair_id,
                phrase_tokens=tuple(first) if first else tokens,
                target_side=e.target,
                rank=e.rank,
            )
        )
    return tasks


def pair_tasks_from_annotations(
    records: list[AnnotationRecord], prefix: str = "p"
) -> list[GameTask]:
    """Discerning-listener tasks: the full pair sequence in both orders, the
    first half's image being the target each time."""
    from .data import VS_TOKEN

    tasks = []
    i = 0
    for rec in records:
        for pp in rec.phrase_pairs:
            fwd = pp.left.tokens + (VS_TOKEN,) + pp.right.tokens
            rev = pp.right.tokens + (VS_TOKEN,) + pp.left.tokens
            for tokens, side in ((fwd, "a"), (rev, "b")):
                tasks.append(
                    GameTask(
                        task_id=f"{prefix}{i:06d}", pair_id=rec.pair_id,
                        phrase_tokens=tokens, target_side=side, position=pp.position,
                    )
                )
                i += 1
    return tasks


def tasks_from_annotations(records: list[AnnotationRecord], prefix: str = "g") -> list[GameTask]:
    """Ten directed ground-truth tasks per record: each side of each phrase
    pair targets its own image."""
    tasks = []
    i = 0
    for rec in records:
        for pp in rec.phrase_pairs:
            tasks.append(
                GameTask(
                    task_id=f"{prefix}{i:06d}", pair_id=rec.pair_id,
                    phrase_tokens=pp.left.tokens, target_side="a", position=pp.position,
                )
            )
            i += 1
            tasks.append(
                GameTask(
                    task_id=f"{prefix}{i:06d}", pair_id=rec.pair_id,
                    phrase_tokens=pp.right.tokens, target_side="b", position=pp.position,
                )
            )
            i += 1
    return tasks


def task_correct(task: GameTask, pairs: dict[str, tuple[str, str]], judge) -> bool:
    """Judge the task in canonical (image_a, image_b) order; the stored swap
    bit never reaches the judge."""
    if not task.gradable:
        return False
    image_a, image_b = pairs[task.pair_id]
    p_a = judge.p_left(task.phrase_tokens, image_a, image_b)
    p_target = p_a if task.target_side == "a" else 1.0 - p_a
    return p_target > 0.5


def rg_accuracy(
    tasks: list[GameTask],
    pairs: dict[str, tuple[str, str]],
    judge,
    k: int = 1,
) -> float:
    """Accuracy over each (pair, target) group's top-k ranked phrases."""
    grouped: dict[tuple[str, str], dict[int, GameTask]] = {}
    for task in tasks:
        if task.rank is None:
            raise MissingRanks(f"task {task.task_id} has no rank")
        grouped.setdefault((task.pair_id, task.target_side), {})[task.rank] = task
    correct = 0
    total = 0
    for key, by_rank in grouped.items():
        for rank in range(1, k + 1):
            if rank not in by_rank:
                raise MissingRanks(f"group {key} missing rank {rank}")
            correct += int(task_correct(by_rank[rank], pairs, judge))
            total += 1
    return correct / total if total else 0.0


def position_accuracy(
    tasks: list[GameTask], pairs: dict[str, tuple[str, str]], judge
) -> dict[int, float]:
    by_position: dict[int, list[GameTask]] = {}
    for task in tasks:
        if task.position is not None:
            by_position.setdefault(task.position, []).append(task)
    return {
        pos: sum(task_correct(t, pairs, judge) for t in group) / len(group)
        for pos, group in sorted(by_position.items())
    }


def unmap_choice(choice: str, presentation_swap: bool) -> str:
    """Displayed left/right back to canonical image side a/b."""
    if choice == UNSURE:
        return UNSURE
    if presentation_swap:
        choice = LEFT if choice == RIGHT else RIGHT
    return "a" if choice == LEFT else "b"


def aggregate_human(
    tasks: list[GameTask],
    answers: list[GameAnswer],
    panel_size: int = 3,
) -> EvalReport:
    """Majority aggregation: a task is decided when at least (panel_size+1)/2
    voters picked the same image; "unsure" never joins a majority. The
    with-guessing accuracy adds half of the undecided fraction."""
    if panel_size % 2 == 0:
        raise IncompletePanel(f"panel size must be odd, got {panel_size}")
    needed = (panel_size + 1) // 2
    by_task: dict[str, list[GameAnswer]] = {}
    for ans in answers:
        by_task.setdefault(ans.task_id, []).append(ans)
    report = EvalReport(total_tasks=len(tasks))
    for task in tasks:
        panel = by_task.get(task.task_id, [])
        voters = {a.voter_id for a in panel}
        if len(panel) != panel_size or len(voters) != panel_size:
            raise IncompletePanel(
                f"task {task.task_id}: {len(panel)} answers from {len(voters)} voters, "
                f"need {panel_size}"
            )
        votes = [unmap_choice(a.choice, task.presentation_swap) for a in panel]
        count_a = votes.count("a")
        count_b = votes.count("b")
        if count_a >= needed or count_b >= needed:
            picked = "a" if count_a >= needed else "b"
            if picked == task.target_side:
                report.majority_correct += 1
            else:
                report.majority_wrong += 1
        else:
            report.no_majority += 1
    total = report.total_tasks
    if total:
        report.majority_accuracy = report.majority_correct / total
        # single division keeps majority + half the undecided fraction exact
        report.accuracy_with_guessing = (
            (2 * report.majority_correct + report.no_majority) / (2 * total)
        )
    return report


def save_report(report: EvalReport, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    path.with_suffix(".txt").write_text(report.render() + "\n", encoding="utf-8")
