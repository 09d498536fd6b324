"""Prompt assembly, multiple-choice answer parsing and accuracy reports."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

LETTERS = "ABCDE"
VIDEO_TOKEN = "<|video|>"


@dataclass(frozen=True)
class QAItem:
    video_id: str
    question: str
    options: tuple
    answer_index: int
    qtype: str = ""

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if not 2 <= len(self.options) <= len(LETTERS):
            raise ValueError(f"need 2-{len(LETTERS)} options, got {len(self.options)}")
        if not 0 <= self.answer_index < len(self.options):
            raise ValueError(f"answer_index {self.answer_index} out of range")

    @classmethod
    def from_record(cls, rec: dict) -> "QAItem":
        return cls(
            rec["video_id"], rec["question"], rec["options"], int(rec["answer_index"]), rec.get("qtype", "")
        )


@dataclass(frozen=True)
class ModalityFlags:
    video: bool = False
    caption: bool = False
    box: bool = True

    def __post_init__(self):
        if not (self.video or self.caption or self.box):
            raise ValueError("at least one modality must be enabled")


def assemble_prompt(
    item: QAItem,
    flags: ModalityFlags,
    captions: Optional[Sequence[str]] = None,
    box_script: Optional[str] = None,
) -> str:
    """Fixed-order prompt: video token, frame captions, box script, question, options."""
    lines = []
    if flags.video:
        lines.append(VIDEO_TOKEN)
    if flags.caption:
        if captions is None:
            raise ValueError(f"{item.video_id}: caption modality enabled but no captions given")
        lines.append("Frame captions:")
        lines.extend(f"Frame {i}: {c}" for i, c in enumerate(captions))
    if flags.box:
        if box_script is None:
            raise ValueError(f"{item.video_id}: box modality enabled but no box script given")
        lines.append("Object bounding boxes:")
        lines.append(box_script)
    lines.append(f"Question: {item.question}")
    lines.extend(f"({LETTERS[i]}) {opt}" for i, opt in enumerate(item.options))
    lines.append("Answer:")
    return "\n".join(lines)


_PAREN = re.compile(r"\(([A-Z])\)")
_LEADING = re.compile(r"^\s*([A-Z])(?![A-Za-z0-9])")


def parse_choice(output: str, options) -> Optional[int]:
    """Option index from a model output, or ``None`` if nothing parses.

    ``options`` is the option count or the option texts. Tried in order: a
    parenthesized letter ``(B)`` anywhere, a lone capital letter opening the
    output (``C``, ``C.``, ``C) ...``), and, when texts are given, the whole
    output matching one option case-insensitively (a trailing period is
    ignored).
    """
    texts = None if isinstance(options, int) else list(options)
    n_options = options if texts is None else len(texts)
    if n_options < 2:
        raise ValueError(f"need at least 2 options, got {n_options}")
    valid = LETTERS[:n_options]
    for m in _PAREN.finditer(output):
        if m.group(1) in valid:
            return valid.index(m.group(1))
    m = _LEADING.match(output)
    if m and m.group(1) in valid:
        return valid.index(m.group(1))
    if texts:
        answer = output.strip().rstrip(".").strip().casefold()
        for i, opt in enumerate(texts):
            if answer == opt.strip().casefold():
                return i
    return None


@dataclass
class TypeStats:
    total: int = 0
    correct: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0


@dataclass
class EvalReport:
    total: int
    correct: int
    parse_failures: int
    per_type: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "parse_failures": self.parse_failures,
            "per_type": {
                k: {"total": s.total, "correct": s.correct, "accuracy": s.accuracy}
                for k, s in sorted(self.per_type.items())
            },
        }


def score(items: Sequence[QAItem], predictions: Sequence[Optional[int]]) -> EvalReport:
    if len(items) != len(predictions):
        raise ValueError(f"{len(items)} items but {len(predictions)} predictions")
    per_type = {}
    correct = failures = 0
    for item, pred in zip(items, predictions):
        stats = per_type.setdefault(item.qtype, TypeStats())
        stats.total += 1
        if pred is None:
            failures += 1
        elif pred == item.answer_index:
            stats.correct += 1
            correct += 1
    return EvalReport(len(items), correct, failures, per_type)


def iter_jsonl(path):
    """Yield ``(line_number, record)`` for each non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield n, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: {exc.msg}") from None


def read_jsonl(path) -> list:
    return [rec for _, rec in iter_jsonl(path)]


def load_items(path) -> list:
    items = []
    for n, rec in iter_jsonl(path):
        try:
            items.append(QAItem.from_record(rec))
        except KeyError as exc:
            raise ValueError(f"{path}:{n}: missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError, AttributeError) as exc:
            raise ValueError(f"{path}:{n}: {exc}") from None
    return items
