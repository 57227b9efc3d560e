"""Factored categorical template policy.

A generation is three independent categorical choices given a context:

* ``length``: reasoning-length bucket, rendered as template think text of
  exactly 15/30/60/100 tokens under the default tokenizer;
* ``description``: which candidate referring phrase to emit (first pass only);
* ``answer``: how the answer relates to what the description grounds to
  (exact boxes, near miss, sloppy, empty list, or malformed JSON).

The context is ``easy`` or ``hard`` for first-pass prompts (decided by
whether the query names an object class) and ``referring`` for second-pass
prompts. Each (context, factor) pair owns a logit vector; log-probabilities,
entropies and the GRPO gradient are all closed form.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import log_softmax

from ..rollout import GREEDY, SAMPLE, Generation, TokenRecord
from ..structured_output import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    DESC_CLOSE,
    DESC_OPEN,
    FIRST_PASS,
    THINK_CLOSE,
    THINK_OPEN,
    ObjectAnswer,
    count_tokens,
    prompt_mode,
    prompt_question,
    render_answers,
)
from .scenes import CLASSES, EASY, HARD, Scene, SceneRef, ground, precise_phrase

REFERRING = "referring"
CONTEXTS = (EASY, HARD, REFERRING)

LENGTH_BUCKETS = (15, 30, 60, 100)
DESCRIPTION_KINDS = ("precise", "class_only", "same_class_distractor", "other_object", "query_copy")
ANSWER_KINDS = ("exact", "near_miss", "sloppy", "empty", "malformed")

LENGTH = "length"
DESCRIPTION = "description"
ANSWER = "answer"


class NonFiniteGradient(FloatingPointError):
    pass


# --- think text ------------------------------------------------------------------

_FIRST_PASS_SENTENCES = (
    "I look at every object in the image.",
    "The query describes one target indirectly.",
    "Several objects could match the wording.",
    "I compare their classes and colors.",
    "Then I check where each one sits.",
    "Objects of the same class need a closer look.",
    "The attribute in the query narrows it down.",
    "One candidate fits all the clues.",
    "The other candidates miss at least one clue.",
    "Its outline is clear enough to box.",
    "I place a point near its center.",
)
_SECOND_PASS_SENTENCES = (
    "The description names the target directly.",
    "I find the object it refers to.",
    "Its box and center are easy to read.",
    "No other object matches the phrase.",
    "I check the edges of the box.",
    "The point goes near the middle.",
    "Nothing else needs comparing.",
    "The answer follows from the phrase.",
    "I confirm the size of the box.",
    "The box covers the whole object.",
)
_REPEAT_SENTENCE = "Let me double check the target again."
_FILLER = ("then", "next", "also", "so", "and", "still", "now", "here")


def think_text(n_tokens: int, second_pass: bool = False, repetitive: bool | None = None) -> str:
    """Template reasoning of exactly ``n_tokens`` default-tokenizer tokens.

    Long buckets (>= 100 tokens by default) repeat a sentence, mimicking the
    redundancy of overlong reasoning.
    """
    if repetitive is None:
        repetitive = n_tokens >= 100
    pool = _SECOND_PASS_SENTENCES if second_pass else _FIRST_PASS_SENTENCES
    if repetitive:
        half = len(pool) // 2
        seq = list(pool[:half])
        for s in pool[half:]:
            seq += [_REPEAT_SENTENCE, s]
    else:
        seq = list(pool)
    seq = seq * (1 + n_tokens // 10)
    sentences: list[str] = []
    used = 0
    for s in seq:
        c = count_tokens(s)
        if used + c > n_tokens:
            break
        sentences.append(s)
        used += c
    rest = n_tokens - used
    if rest >= 2:
        words = [_FILLER[j % len(_FILLER)] for j in range(rest - 1)]
        sentences.append(" ".join(words).capitalize() + ".")
    elif rest == 1:
        sentences.append("Done")
    text = " ".join(sentences)
    assert count_tokens(text) == n_tokens, (n_tokens, text)
    return text


# --- answer rendering --------------------------------------------------------------


def _clamp_box(box, w, h):
    x1, y1, x2, y2 = box
    dx = -min(0.0, x1) - max(0.0, x2 - w)
    dy = -min(0.0, y1) - max(0.0, y2 - h)
    return (x1 + dx, y1 + dy, x2 + dx, y2 + dy)


def _shift(ans: ObjectAnswer, scene: Scene, frac: float, point_shift: float) -> ObjectAnswer:
    """Shift a box toward the image centre by ``frac`` of its size."""
    x1, y1, x2, y2 = ans.bbox
    bw, bh = x2 - x1, y2 - y1
    sx = 1.0 if (x1 + x2) / 2 < scene.image_w / 2 else -1.0
    sy = 1.0 if (y1 + y2) / 2 < scene.image_h / 2 else -1.0
    if frac > 0:
        dx, dy = sx * frac * bw, sy * frac * bh
    else:
        dx = dy = 0.0
    box = _clamp_box((x1 + dx, y1 + dy, x2 + dx, y2 + dy), scene.image_w, scene.image_h)
    px = min(max(ans.point[0] + sx * point_shift, 0.0), scene.image_w)
    py = min(max(ans.point[1] + sy * point_shift, 0.0), scene.image_h)
    return ObjectAnswer(box, (px, py))


def _near_miss(ans: ObjectAnswer, scene: Scene) -> ObjectAnswer:
    # 6 px per coordinate: box L1 = 24 (fails < 10), IoU > 0.5 for boxes >= 48 px,
    # point L1 = 12 (passes < 30)
    x1, y1, x2, y2 = ans.bbox
    sx = 6.0 if (x1 + x2) / 2 < scene.image_w / 2 else -6.0
    sy = 6.0 if (y1 + y2) / 2 < scene.image_h / 2 else -6.0
    box = (x1 + sx, y1 + sy, x2 + sx, y2 + sy)
    return ObjectAnswer(box, (ans.point[0] + sx, ans.point[1] + sy))


def answer_text(kind: str, grounded: Sequence[ObjectAnswer], scene: Scene) -> str:
    if kind == "empty":
        return "[]"
    if kind == "malformed":
        inner = render_answers(grounded[:1] or [ObjectAnswer((0, 0, 1, 1), (0, 0))])
        return inner[:-2]
    if kind == "exact":
        out = list(grounded)
    elif kind == "near_miss":
        out = [_near_miss(a, scene) for a in grounded]
    elif kind == "sloppy":
        out = [_shift(a, scene, 0.5, 40.0) for a in grounded]
    else:
        raise ValueError(f"unknown answer kind {kind!r}")
    return render_answers(out)


# --- description candidates -------------------------------------------------------


def description_candidates(ref: SceneRef) -> list[str]:
    """Phrases in ``DESCRIPTION_KINDS`` order for one query case."""
    scene, case = ref.scene, ref.case
    target = scene.by_id(case.target_ids[0])
    same = [o for o in scene.objects if o.label == target.label and o.id != target.id]
    other = [o for o in scene.objects if o.label != target.label]
    present = {o.label for o in scene.objects}
    absent = next((c for c in CLASSES if c not in present), None)

    def phrase_for(objs):
        for o in objs:
            p = precise_phrase(scene, o)
            if p:
                return p
        # grounds to nothing
        return f"green {absent}" if absent else "something else entirely"

    return [
        case.precise,
        target.label,
        phrase_for(same),
        phrase_for(other),
        case.query,
    ]


# --- policy ------------------------------------------------------------------------


def _entropy(logp: np.ndarray) -> float:
    p = np.exp(logp)
    return float(-(p * logp).sum())


@dataclass
class Action:
    context: str
    length: int
    description: int | None
    answer: int

    def items(self):
        yield LENGTH, self.length
        if self.description is not None:
            yield DESCRIPTION, self.description
        yield ANSWER, self.answer


def factor_sizes(answer_kinds=ANSWER_KINDS) -> dict[tuple[str, str], int]:
    sizes = {}
    for c in CONTEXTS:
        sizes[(c, LENGTH)] = len(LENGTH_BUCKETS)
        if c != REFERRING:
            sizes[(c, DESCRIPTION)] = len(DESCRIPTION_KINDS)
        sizes[(c, ANSWER)] = len(answer_kinds)
    return sizes


def default_logits(answer_kinds=ANSWER_KINDS) -> dict[tuple[str, str], np.ndarray]:
    """Prior resembling a pretrained model: verbose on queries, short and
    accurate when given an explicit referring phrase."""
    theta = {k: np.zeros(n) for k, n in factor_sizes(answer_kinds).items()}
    for c in (EASY, HARD):
        theta[(c, LENGTH)] = np.array([0.0, 0.0, 0.5, 0.5])
        # echoes the query and leans toward loose boxes under greedy decoding
        theta[(c, DESCRIPTION)] = np.array([0.0, 0.0, 0.0, 0.0, 0.3])
        a = np.zeros(len(answer_kinds))
        a[list(answer_kinds).index("near_miss")] = 0.3
        theta[(c, ANSWER)] = a
    theta[(REFERRING, LENGTH)] = np.array([2.0, 0.0, 0.0, 0.0])
    ref_answer = np.zeros(len(answer_kinds))
    ref_answer[0] = 2.0
    theta[(REFERRING, ANSWER)] = ref_answer
    return theta


def cold_start_logits(answer_kinds=ANSWER_KINDS) -> dict[tuple[str, str], np.ndarray]:
    """A policy whose first-pass answers are effectively always empty."""
    theta = default_logits(answer_kinds)
    for c in (EASY, HARD):
        a = np.full(len(answer_kinds), -40.0)
        a[answer_kinds.index("empty")] = 0.0
        theta[(c, ANSWER)] = a
    return theta


class TemplatePolicy:
    def __init__(self, logits: dict | None = None, answer_kinds: Sequence[str] = ANSWER_KINDS):
        self.answer_kinds = tuple(answer_kinds)
        self.theta = {k: np.asarray(v, dtype=float).copy() for k, v in (logits or default_logits(self.answer_kinds)).items()}
        self._check()

    def _check(self):
        for key, n in factor_sizes(self.answer_kinds).items():
            if key not in self.theta or self.theta[key].shape != (n,):
                raise ValueError(f"logits for {key} must have shape ({n},)")

    # parameter vector view, for finite differences and updates
    @property
    def keys(self) -> list[tuple[str, str]]:
        return sorted(self.theta)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.theta[k] for k in self.keys])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in self.keys:
            n = self.theta[k].size
            self.theta[k] = np.array(vec[i : i + n], dtype=float)
            i += n

    def snapshot(self) -> "TemplatePolicy":
        return TemplatePolicy(copy.deepcopy(self.theta), self.answer_kinds)

    def logp(self, context: str, factor: str) -> np.ndarray:
        return log_softmax(self.theta[(context, factor)])

    def probs(self, context: str, factor: str) -> np.ndarray:
        return np.exp(self.logp(context, factor))

    def entropy(self, context: str, factor: str) -> float:
        return _entropy(self.logp(context, factor))

    def action_logprob(self, action: Action) -> float:
        return float(sum(self.logp(action.context, f)[i] for f, i in action.items()))

    # --- generation ---

    @staticmethod
    def context_for(prompt: str, scene: Scene) -> tuple[str, str]:
        question = prompt_question(prompt)
        if prompt_mode(prompt) != FIRST_PASS:
            return REFERRING, question
        return (EASY if ground(scene, question) else HARD), question

    def _choose(self, logp: np.ndarray, decode: str, rng) -> int:
        if decode == GREEDY:
            return int(np.argmax(logp))
        if rng is None:
            raise ValueError("sampling needs an rng")
        cdf = np.cumsum(np.exp(logp))
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))

    def generate(self, prompt: str, scene_ref, decode: str = SAMPLE, rng=None) -> Generation:
        scene = scene_ref.scene if isinstance(scene_ref, SceneRef) else scene_ref
        context, question = self.context_for(prompt, scene)
        tokens: list[TokenRecord] = []

        def pick(factor: str) -> tuple[int, float, float]:
            lp = self.logp(context, factor)
            i = self._choose(lp, decode, rng)
            return i, float(lp[i]), _entropy(lp)

        li, llp, lh = pick(LENGTH)
        think = think_text(LENGTH_BUCKETS[li], second_pass=context == REFERRING)
        tokens.append(TokenRecord(f"{THINK_OPEN}{think}{THINK_CLOSE}", llp, lh, False))

        di = None
        if context == REFERRING:
            phrase = question
            description = None
        else:
            if not isinstance(scene_ref, SceneRef) or scene_ref.case is None:
                raise ValueError("first-pass generation needs a SceneRef with its query case")
            di, dlp, dh = pick(DESCRIPTION)
            phrase = description_candidates(scene_ref)[di]
            description = phrase
            tokens.append(TokenRecord(f"{DESC_OPEN}{phrase}{DESC_CLOSE}", dlp, dh, False))

        ai, alp, ah = pick(ANSWER)
        grounded = [scene.by_id(i).answer for i in ground(scene, phrase)]
        answer = answer_text(self.answer_kinds[ai], grounded, scene)
        tokens.append(TokenRecord(f"{ANSWER_OPEN}{answer}{ANSWER_CLOSE}", alp, ah, True))

        parts = [f"{THINK_OPEN}{think}{THINK_CLOSE}"]
        if description is not None:
            parts.append(f"{DESC_OPEN}{description}{DESC_CLOSE}")
        parts.append(f"{ANSWER_OPEN}{answer}{ANSWER_CLOSE}")
        return Generation("\n".join(parts), tokens, Action(context, li, di, ai))


# --- GRPO surrogate and its gradient -----------------------------------------------

# A batch is a list of groups; each group is a list of (Action, advantage).
Batch = Sequence[Sequence[tuple[Action, float]]]


def _batch_contexts(batch: Batch) -> list[str]:
    return [group[0][0].context for group in batch if group]


def surrogate(policy: TemplatePolicy, batch: Batch, beta: float = 0.0, ref: TemplatePolicy | None = None) -> float:
    """Mean over groups of ``(1/K) sum_i A_i log pi(y_i)`` minus ``beta`` times
    the mean exact KL to ``ref`` over the groups' contexts."""
    if not batch:
        return 0.0
    total = 0.0
    for group in batch:
        total += sum(a * policy.action_logprob(act) for act, a in group) / len(group)
    value = total / len(batch)
    if beta:
        value -= beta * mean_context_kl(policy, ref, _batch_contexts(batch))
    return value


def surrogate_gradient(
    policy: TemplatePolicy, batch: Batch, beta: float = 0.0, ref: TemplatePolicy | None = None
) -> dict[tuple[str, str], np.ndarray]:
    """Closed-form gradient of :func:`surrogate`.

    For a categorical factor, d log softmax(z)[i] / dz = onehot(i) - p.
    """
    grad = {k: np.zeros_like(v) for k, v in policy.theta.items()}
    if not batch:
        return grad
    probs = {k: np.exp(log_softmax(v)) for k, v in policy.theta.items()}
    for group in batch:
        w = 1.0 / (len(group) * len(batch))
        for act, a in group:
            for factor, i in act.items():
                key = (act.context, factor)
                g = grad[key]
                g -= w * a * probs[key]
                g[i] += w * a
    if beta:
        contexts = _batch_contexts(batch)
        for c in contexts:
            for key in grad:
                if key[0] != c:
                    continue
                p = probs[key]
                lq = log_softmax(ref.theta[key])
                lp = np.log(p)
                kl = float(np.sum(p * (lp - lq)))
                grad[key] -= beta / len(contexts) * p * (lp - lq - kl)
    for key, g in grad.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {key}")
    return grad


def mean_context_kl(policy: TemplatePolicy, ref: TemplatePolicy, contexts: Sequence[str]) -> float:
    """Mean over ``contexts`` of the summed factor KL(policy || ref)."""
    if not contexts:
        return 0.0
    total = 0.0
    for c in contexts:
        for key in policy.theta:
            if key[0] != c:
                continue
            lp = policy.logp(*key)
            lq = ref.logp(*key)
            total += float(np.sum(np.exp(lp) * (lp - lq)))
    return total / len(contexts)


def flatten_grad(policy: TemplatePolicy, grad: dict) -> np.ndarray:
    return np.concatenate([grad[k] for k in policy.keys])
