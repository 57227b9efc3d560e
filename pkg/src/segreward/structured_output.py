"""Tagged response parsing, rendering, tokenization and sentence splitting.

A response is a sequence of tagged blocks::

    <think>...</think> <description>...</description> <answer>[...]</answer>

The first pass requires the description block; the second pass forbids it.
The answer block holds a JSON list of ``{"bbox_2d": [x1, y1, x2, y2],
"point_2d": [x, y]}`` objects in pixel coordinates.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

FIRST_PASS = "first_pass"
SECOND_PASS = "second_pass"
MODES = (FIRST_PASS, SECOND_PASS)

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
DESC_OPEN, DESC_CLOSE = "<description>", "</description>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
ALL_TAGS = (THINK_OPEN, THINK_CLOSE, DESC_OPEN, DESC_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

_TAG_RE = re.compile("|".join(re.escape(t) for t in sorted(ALL_TAGS, key=len, reverse=True)))

_EXAMPLE_ANSWER = (
    '[{"bbox_2d": [10,100,200,210], "point_2d": [30,110]}, '
    '{"bbox_2d": [225,296,706,786], "point_2d": [302,410]}]'
)

FIRST_PASS_TEMPLATE = (
    'Please find "{question}" with bboxs and points.\n'
    "Compare the difference between object(s) and find the most closely matched object(s).\n"
    "Output the thinking process in <think> </think>, "
    "the explicit referring description for object localization in "
    "<description> </description>, "
    "and final answer in <answer> </answer> tags.\n"
    "Output the bbox(es) and point(s) inside the interested object(s) in JSON format.\n"
    "i.e., <think> thinking process here </think>\n"
    "<description> referring description here </description>\n"
    "<answer>" + _EXAMPLE_ANSWER + "</answer>"
)

SECOND_PASS_TEMPLATE = (
    'Please find "{question}" with bboxs and points.\n'
    "Compare the difference between object(s) and find the most closely matched object(s).\n"
    "Output the thinking process in <think> </think> "
    "and final answer in <answer> </answer> tags.\n"
    "Output the bbox(es) and point(s) inside the interested object(s) in JSON format.\n"
    "i.e., <think> thinking process here </think>\n"
    "<answer>" + _EXAMPLE_ANSWER + "</answer>"
)

_PROMPT_QUESTION_RE = re.compile(r'^Please find "(?P<q>.*)" with bboxs and points\.', re.DOTALL)


def first_pass_prompt(question: str) -> str:
    return FIRST_PASS_TEMPLATE.replace("{question}", question)


def second_pass_prompt(description: str) -> str:
    """The description takes the place of the question."""
    return SECOND_PASS_TEMPLATE.replace("{question}", description)


def prompt_mode(prompt: str) -> str:
    tail = prompt.rsplit('" with bboxs and points.', 1)[-1]
    return FIRST_PASS if f"{DESC_OPEN} {DESC_CLOSE}" in tail else SECOND_PASS


def prompt_question(prompt: str) -> str:
    m = _PROMPT_QUESTION_RE.match(prompt)
    if m is None:
        raise ValueError("prompt does not follow a shipped template")
    return m.group("q")


# --- errors -----------------------------------------------------------------


class ResponseParseError(ValueError):
    """Base class; every parse failure raises exactly one subclass."""


class MissingTag(ResponseParseError):
    def __init__(self, tag: str):
        super().__init__(f"missing tag {tag}")
        self.tag = tag


class TagOrderViolation(ResponseParseError):
    def __init__(self, detail: str, position: int | None = None):
        super().__init__(detail)
        self.position = position


class MalformedJson(ResponseParseError):
    pass


class InvalidBox(ResponseParseError):
    def __init__(self, index: int, detail: str):
        super().__init__(f"answer {index}: {detail}")
        self.index = index


# --- data -------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectAnswer:
    bbox: tuple[float, float, float, float]
    point: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))
        object.__setattr__(self, "point", tuple(float(v) for v in self.point))
        if len(self.bbox) != 4 or len(self.point) != 2:
            raise ValueError("bbox needs 4 numbers and point needs 2")

    def to_json(self) -> dict:
        return {"bbox_2d": [_num(v) for v in self.bbox], "point_2d": [_num(v) for v in self.point]}

    @classmethod
    def from_json(cls, obj: dict) -> "ObjectAnswer":
        return cls(tuple(obj["bbox_2d"]), tuple(obj["point_2d"]))


def _num(v: float) -> int | float:
    return int(v) if float(v).is_integer() else v


@dataclass(frozen=True)
class StructuredResponse:
    think: str
    description: str | None
    answers: tuple[ObjectAnswer, ...]
    answer_raw: str = field(default="", compare=False)
    # (start, end) character offsets of each tag's stripped content in the source
    spans: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def mode(self) -> str:
        return FIRST_PASS if self.description is not None else SECOND_PASS


# --- parsing ----------------------------------------------------------------


def _expected_tags(mode: str) -> tuple[str, ...]:
    if mode == FIRST_PASS:
        return ALL_TAGS
    if mode == SECOND_PASS:
        return (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)
    raise ValueError(f"unknown mode {mode!r}")


def parse_response(
    text: str, mode: str = FIRST_PASS, image_size: tuple[float, float] | None = None
) -> StructuredResponse:
    """Parse a raw model response.

    Tags are scanned left to right against the sequence the mode expects, so
    the raised error describes the first violation encountered. Only
    whitespace may appear outside the tagged blocks. When ``image_size`` is
    given, points must fall inside ``[0, W] x [0, H]``.
    """
    expected = _expected_tags(mode)
    k = 0
    cursor = 0
    positions: dict[str, tuple[int, int]] = {}
    for m in _TAG_RE.finditer(text):
        tag = m.group(0)
        if k >= len(expected) or tag != expected[k]:
            if tag in positions:
                raise TagOrderViolation(f"duplicate tag {tag}", m.start())
            # a tag that was skipped entirely is missing; one that shows up later is out of order
            if k < len(expected) and tag in expected[k:] and expected[k] not in text[m.start() :]:
                raise MissingTag(expected[k])
            raise TagOrderViolation(f"unexpected tag {tag}", m.start())
        # text between a closing tag and the next opening tag must be blank
        if not tag.startswith("</") and text[cursor : m.start()].strip():
            raise TagOrderViolation(f"stray text before {tag}", cursor)
        positions[tag] = (m.start(), m.end())
        cursor = m.end()
        k += 1
    if k < len(expected):
        raise MissingTag(expected[k])
    if text[cursor:].strip():
        raise TagOrderViolation("stray text after final tag", cursor)

    def block(open_tag: str, close_tag: str) -> tuple[str, tuple[int, int]]:
        start, end = positions[open_tag][1], positions[close_tag][0]
        raw = text[start:end]
        lead = len(raw) - len(raw.lstrip())
        content = raw.strip()
        return content, (start + lead, start + lead + len(content))

    think, think_span = block(THINK_OPEN, THINK_CLOSE)
    spans = {"think": think_span}
    description = None
    if mode == FIRST_PASS:
        description, spans["description"] = block(DESC_OPEN, DESC_CLOSE)
    answer_raw, spans["answer"] = block(ANSWER_OPEN, ANSWER_CLOSE)
    answers = parse_answer_json(answer_raw, image_size)
    return StructuredResponse(think, description, answers, answer_raw, spans)


def _reject_constant(name: str):
    raise ValueError(f"non-finite constant {name}")


def _as_coords(value, n: int, index: int, key: str) -> tuple[float, ...]:
    if not isinstance(value, list) or len(value) != n:
        raise InvalidBox(index, f"{key} must be a list of {n} numbers")
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InvalidBox(index, f"{key} has a non-numeric entry")
        v = float(v)
        if not math.isfinite(v):
            raise InvalidBox(index, f"{key} has a non-finite entry")
        if v < 0:
            raise InvalidBox(index, f"{key} has a negative coordinate")
        out.append(v)
    return tuple(out)


def parse_answer_json(
    raw: str, image_size: tuple[float, float] | None = None
) -> tuple[ObjectAnswer, ...]:
    try:
        payload = json.loads(raw, parse_constant=_reject_constant)
    except (ValueError, RecursionError) as exc:
        raise MalformedJson(f"answer is not valid JSON: {exc}") from None
    if not isinstance(payload, list):
        raise MalformedJson("answer JSON must be a list")
    answers = []
    for i, item in enumerate(payload):
        if not isinstance(item, dict) or "bbox_2d" not in item or "point_2d" not in item:
            raise InvalidBox(i, "expected an object with bbox_2d and point_2d")
        x1, y1, x2, y2 = _as_coords(item["bbox_2d"], 4, i, "bbox_2d")
        px, py = _as_coords(item["point_2d"], 2, i, "point_2d")
        if not (x1 < x2 and y1 < y2):
            raise InvalidBox(i, "degenerate box")
        if image_size is not None:
            w, h = image_size
            if px > w or py > h:
                raise InvalidBox(i, "point outside the image")
        answers.append(ObjectAnswer((x1, y1, x2, y2), (px, py)))
    return tuple(answers)


def try_parse(text: str, mode: str = FIRST_PASS, image_size=None):
    """Return ``(response, None)`` or ``(None, error)``."""
    try:
        return parse_response(text, mode, image_size), None
    except ResponseParseError as exc:
        return None, exc


# --- rendering --------------------------------------------------------------


def render_answers(answers: Iterable[ObjectAnswer]) -> str:
    return json.dumps([a.to_json() for a in answers], separators=(", ", ": "))


def render_response(
    think: str, answers: Iterable[ObjectAnswer] | str, description: str | None = None
) -> str:
    """Render a response; ``answers`` may be pre-rendered JSON text."""
    answer_text = answers if isinstance(answers, str) else render_answers(answers)
    parts = [f"{THINK_OPEN}{think}{THINK_CLOSE}"]
    if description is not None:
        parts.append(f"{DESC_OPEN}{description}{DESC_CLOSE}")
    parts.append(f"{ANSWER_OPEN}{answer_text}{ANSWER_CLOSE}")
    return "\n".join(parts)


def render(resp: StructuredResponse) -> str:
    return render_response(resp.think, resp.answers, resp.description)


# --- tokenization -----------------------------------------------------------


class Tokenizer(Protocol):
    def tokenize(self, text: str) -> list[str]: ...


_WORD_PUNCT_RE = re.compile(r"\w+|[^\w\s]")


class WhitespacePunctTokenizer:
    """Words split on whitespace; every punctuation character is its own token."""

    def tokenize(self, text: str) -> list[str]:
        return _WORD_PUNCT_RE.findall(text)


class CallableTokenizer:
    """Adapter for an external tokenizer function ``str -> sequence``."""

    def __init__(self, fn: Callable[[str], Sequence]):
        self.fn = fn

    def tokenize(self, text: str) -> list:
        return list(self.fn(text))


DEFAULT_TOKENIZER = WhitespacePunctTokenizer()


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return len((tokenizer or DEFAULT_TOKENIZER).tokenize(text))


_SENTENCE_END_RE = re.compile(r"[.!?]+(?=\s|$)")
_WS_RE = re.compile(r"\s+")


def split_sentences(text: str) -> list[str]:
    """Split on terminal punctuation followed by whitespace or end of text.

    Terminators are dropped, whitespace is trimmed and internal runs of
    whitespace collapse to one space.
    """
    out = []
    for frag in _SENTENCE_END_RE.split(text):
        frag = _WS_RE.sub(" ", frag).strip()
        if frag:
            out.append(frag)
    return out
