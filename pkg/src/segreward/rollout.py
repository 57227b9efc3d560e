"""Two-pass rollout orchestration over a pluggable policy.

First pass: (scene, query) -> think, description, answer. Second pass:
(scene, description) -> think, answer, decoded greedily. The first-pass
answer feeds the accuracy reward; the second-pass answer only feeds the
description reward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol, Sequence

import numpy as np

from .geometry import BinaryMask, mask_iou
from .grpo import GrpoConfig, GroupAdvantages, group_advantages
from .rewards import (
    AccuracyReward,
    RewardBreakdown,
    RewardConfig,
    accuracy_reward,
    conditional_length,
    length_reward,
    non_repeat_reward,
    total_reward,
)
from .structured_output import (
    FIRST_PASS,
    SECOND_PASS,
    ObjectAnswer,
    ResponseParseError,
    StructuredResponse,
    count_tokens,
    first_pass_prompt,
    prompt_mode,
    second_pass_prompt,
    try_parse,
)

log = logging.getLogger(__name__)

SAMPLE = "sample"
GREEDY = "greedy"


class PolicyFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class TokenRecord:
    token: str
    logprob: float
    entropy: float
    is_answer: bool = False


@dataclass
class Generation:
    text: str
    tokens: list[TokenRecord] = field(default_factory=list)
    # policy-specific action record, used by policies that can score their own samples
    actions: Any = None

    @property
    def logprob(self) -> float:
        return float(sum(t.logprob for t in self.tokens))


class Policy(Protocol):
    def generate(self, prompt: str, scene_ref: Any, decode: str = SAMPLE, rng=None) -> Generation: ...

    def snapshot(self) -> "Policy": ...


@dataclass
class Sample:
    """One generation plus its parse outcome."""

    mode: str
    generation: Generation | None
    response: StructuredResponse | None = None
    error: Exception | None = None
    skipped: bool = False

    @property
    def ok(self) -> bool:
        return self.response is not None

    @property
    def text(self) -> str:
        return self.generation.text if self.generation is not None else ""

    def think_tokens(self, tokenizer=None) -> int | None:
        return count_tokens(self.response.think, tokenizer) if self.ok else None


def _parse_sample(mode: str, gen: Generation, image_size) -> Sample:
    resp, err = try_parse(gen.text, mode, image_size)
    return Sample(mode, gen, resp, err)


def _image_size(scene) -> tuple[float, float] | None:
    if scene is None:
        return None
    w = getattr(scene, "image_w", None)
    h = getattr(scene, "image_h", None)
    return (w, h) if w is not None and h is not None else None


def run_first_pass(policy: Policy, scene, query: str, k: int, rng, scene_ref=None) -> list[Sample]:
    """Draw ``k`` independent first-pass samples; failures are kept per sample."""
    if k < 1:
        raise ValueError("k must be at least 1")
    prompt = first_pass_prompt(query)
    ref = scene_ref if scene_ref is not None else scene
    out = []
    for _ in range(k):
        try:
            gen = policy.generate(prompt, ref, SAMPLE, rng)
        except PolicyFailure as exc:
            out.append(Sample(FIRST_PASS, None, error=exc))
            continue
        out.append(_parse_sample(FIRST_PASS, gen, _image_size(scene)))
    return out


def run_second_pass(policy: Policy, scene, description: str | None, scene_ref=None) -> Sample:
    """Greedy second pass with the description in place of the question."""
    if not description or not description.strip():
        return Sample(SECOND_PASS, None, skipped=True)
    ref = scene_ref if scene_ref is not None else scene
    try:
        gen = policy.generate(second_pass_prompt(description), ref, GREEDY, None)
    except PolicyFailure as exc:
        return Sample(SECOND_PASS, None, error=exc)
    return _parse_sample(SECOND_PASS, gen, _image_size(scene))


def answer_entropy(sample: Sample | Generation) -> float:
    """Mean full-distribution entropy over answer-span tokens (0 if none)."""
    gen = sample.generation if isinstance(sample, Sample) else sample
    if gen is None:
        return 0.0
    ents = [t.entropy for t in gen.tokens if t.is_answer]
    return float(np.mean(ents)) if ents else 0.0


# mask_fn(answers, phrase) -> BinaryMask, used in mask reward mode
MaskFn = Callable[[Sequence[ObjectAnswer], str], BinaryMask]


@dataclass
class Target:
    """Ground truth for one query."""

    answers: tuple[ObjectAnswer, ...]
    image_w: float | None = None
    image_h: float | None = None
    gt_mask: BinaryMask | None = None
    mask_fn: MaskFn | None = None


@dataclass
class RolloutGroup:
    query: str
    first_pass: list[Sample]
    second_pass: list[Sample]
    rewards: list[RewardBreakdown]
    advantages: GroupAdvantages
    n1: list[int | None]
    n2: list[int | None]
    scene_ref: Any = None

    @property
    def totals(self) -> list[float]:
        return [b.total for b in self.rewards]


def _accuracy(sample: Sample, target: Target, cfg: RewardConfig, phrase: str) -> AccuracyReward:
    if cfg.reward_mode == "mask":
        if target.gt_mask is None or target.mask_fn is None:
            raise ValueError("mask reward mode needs gt_mask and mask_fn")
        m = target.mask_fn(sample.response.answers, phrase)
        return AccuracyReward(mask_iou(m, target.gt_mask), 0.0, 0.0)
    return accuracy_reward(sample.response.answers, target.answers, cfg.accuracy)


def score_sample(
    first: Sample, second: Sample | None, target: Target, cfg: RewardConfig, tokenizer=None
) -> tuple[RewardBreakdown, int | None, int | None]:
    """Ungated breakdown for one sample (``len_conditional`` = raw length reward)."""
    n1 = first.think_tokens(tokenizer)
    n2 = second.think_tokens(tokenizer) if second is not None else None
    if not first.ok:
        b = total_reward(0.0, 0.0, (0.0, 0.0, 0.0), 0.0, 0.0, 0.0)
        return b, n1, n2
    acc = _accuracy(first, target, cfg, first.response.description or "")
    desc = 0.0
    if cfg.enable_desc and second is not None and second.ok:
        desc = _accuracy(second, target, cfg, first.response.description or "").acc_total
    len_raw = length_reward(n1, n2, cfg.length) if cfg.enable_len else 1.0
    b = total_reward(1.0, non_repeat_reward(first.response.think), acc, desc, len_raw, len_raw)
    return b, n1, n2


def gate_group(raw: Sequence[RewardBreakdown], cfg: RewardConfig) -> list[RewardBreakdown]:
    """Apply group-level length gating and recompose each total."""
    gated = conditional_length([b.acc_total for b in raw], [b.len_raw for b in raw])
    out = []
    for b, g in zip(raw, gated):
        if not cfg.enable_len:
            g = 1.0
        out.append(
            total_reward(
                b.format, b.non_repeat, (b.acc_iou, b.acc_box_l1, b.acc_point_l1), b.desc, b.len_raw, g
            )
        )
    return out


def assemble_group(
    first: Sequence[Sample],
    second: Sequence[Sample | None],
    target: Target,
    reward_cfg: RewardConfig = RewardConfig(),
    grpo_cfg: GrpoConfig = GrpoConfig(),
    query: str = "",
    scene_ref=None,
    tokenizer=None,
) -> RolloutGroup:
    if len(first) != len(second):
        raise ValueError("first and second pass lists differ in length")
    raw, n1s, n2s = [], [], []
    for f, s in zip(first, second):
        b, n1, n2 = score_sample(f, s, target, reward_cfg, tokenizer)
        raw.append(b)
        n1s.append(n1)
        n2s.append(n2)
        if not f.ok:
            log.debug("first pass failed to parse: %s", f.error)
    rewards = gate_group(raw, reward_cfg)
    totals = [b.total for b in rewards]
    if len(totals) >= 2:
        adv = group_advantages(totals, grpo_cfg)
    else:
        adv = GroupAdvantages(np.zeros(len(totals)), grpo_cfg.normalize_by_std, grpo_cfg.epsilon)
    return RolloutGroup(query, list(first), list(second), rewards, adv, n1s, n2s, scene_ref)


def run_group(
    policy: Policy,
    scene,
    query: str,
    target: Target,
    k: int,
    rng,
    reward_cfg: RewardConfig = RewardConfig(),
    grpo_cfg: GrpoConfig = GrpoConfig(),
    scene_ref=None,
    tokenizer=None,
) -> RolloutGroup:
    """Both passes for one query, then rewards and advantages."""
    first = run_first_pass(policy, scene, query, k, rng, scene_ref)
    second = [
        run_second_pass(policy, scene, f.response.description, scene_ref) if f.ok else None for f in first
    ]
    return assemble_group(first, second, target, reward_cfg, grpo_cfg, query, scene_ref, tokenizer)


class PassCounter:
    """Wraps a policy and counts ``generate`` calls per mode."""

    def __init__(self, policy: Policy):
        self.policy = policy
        self.calls = {FIRST_PASS: 0, SECOND_PASS: 0}

    def generate(self, prompt, scene_ref, decode=SAMPLE, rng=None):
        self.calls[prompt_mode(prompt)] += 1
        return self.policy.generate(prompt, scene_ref, decode, rng)

    def snapshot(self):
        return self.policy.snapshot()


def infer(policy: Policy, scene, query: str, scene_ref=None) -> Sample:
    """Inference: exactly one greedy first pass, no verification pass."""
    prompt = first_pass_prompt(query)
    try:
        gen = policy.generate(prompt, scene_ref if scene_ref is not None else scene, GREEDY, None)
    except PolicyFailure as exc:
        return Sample(FIRST_PASS, None, error=exc)
    return _parse_sample(FIRST_PASS, gen, _image_size(scene))


# --- trace records -------------------------------------------------------------


def _err_name(s: Sample | None) -> str | None:
    if s is None or s.error is None:
        return None
    return type(s.error).__name__


def group_trace(group: RolloutGroup, target: Target, step: int | None = None, extra: dict | None = None) -> dict:
    """JSON-ready record of one group: raw text of both passes, counts, rewards."""
    samples = []
    for i, f in enumerate(group.first_pass):
        s = group.second_pass[i]
        samples.append(
            {
                "raw_first_pass": f.text if f.generation is not None else None,
                "raw_second_pass": s.text if s is not None and s.generation is not None else None,
                "first_pass_error": _err_name(f),
                "second_pass_error": _err_name(s),
                "n1": group.n1[i],
                "n2": group.n2[i],
                "answer_entropy": answer_entropy(f),
                "reward": group.rewards[i].to_dict(),
                "advantage": float(group.advantages.values[i]),
            }
        )
    rec = {
        "query": group.query,
        "gt_answers": [a.to_json() for a in target.answers],
        "image_w": target.image_w,
        "image_h": target.image_h,
        "samples": samples,
    }
    if step is not None:
        rec = {"step": step, **rec}
    if extra:
        rec.update(extra)
    return rec


__all__ = [
    "GREEDY",
    "SAMPLE",
    "Generation",
    "PassCounter",
    "Policy",
    "PolicyFailure",
    "ResponseParseError",
    "RolloutGroup",
    "Sample",
    "Target",
    "TokenRecord",
    "answer_entropy",
    "assemble_group",
    "gate_group",
    "group_trace",
    "infer",
    "run_first_pass",
    "run_group",
    "run_second_pass",
    "score_sample",
]
