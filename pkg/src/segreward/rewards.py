"""Reward stack for two-pass rollouts.

Per sample::

    base  = format + non_repeat + acc_total
    total = (base + desc) * len_conditional

``len_conditional`` is the length reward gated over the whole group: it is
forced to 1 when no rollout in the group earned any accuracy reward.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .geometry import BinaryMask, box_l1, iou, iou_matrix, mask_iou, point_l1
from .matching import _boxes, assign_max_iou_preferring
from .structured_output import FIRST_PASS, ObjectAnswer, split_sentences, try_parse

DEFAULT_ANCHOR_N0 = 45
DEFAULT_GAMMA = 0.05


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LengthConfig:
    anchor_n0: float = DEFAULT_ANCHOR_N0
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if self.anchor_n0 < 0 or self.gamma < 0:
            raise ValueError("anchor_n0 and gamma must be non-negative")


@dataclass(frozen=True)
class AccuracyConfig:
    iou_threshold: float = 0.5
    box_l1_threshold: float = 10.0
    point_l1_threshold: float = 30.0
    box_l1_reduction: str = "sum"


@dataclass(frozen=True)
class RewardConfig:
    length: LengthConfig = field(default_factory=LengthConfig)
    accuracy: AccuracyConfig = field(default_factory=AccuracyConfig)
    enable_desc: bool = True
    enable_len: bool = True
    reward_mode: str = "box_point"

    def __post_init__(self):
        if self.reward_mode not in ("box_point", "mask"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")


@dataclass
class RewardBreakdown:
    format: float = 0.0
    non_repeat: float = 0.0
    acc_iou: float = 0.0
    acc_box_l1: float = 0.0
    acc_point_l1: float = 0.0
    acc_total: float = 0.0
    desc: float = 0.0
    len_raw: float = 0.0
    len_conditional: float = 1.0
    base: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AccuracyReward:
    acc_iou: float
    acc_box_l1: float
    acc_point_l1: float

    @property
    def acc_total(self) -> float:
        return self.acc_iou + self.acc_box_l1 + self.acc_point_l1

    def __iter__(self):
        return iter((self.acc_iou, self.acc_box_l1, self.acc_point_l1, self.acc_total))


def format_reward(text: str, mode: str = FIRST_PASS, image_size=None) -> float:
    resp, _ = try_parse(text, mode, image_size)
    return 1.0 if resp is not None else 0.0


def non_repeat_reward(reasoning: str) -> float:
    """Fraction of sentences that are distinct; 1 for empty reasoning."""
    sentences = split_sentences(reasoning)
    if not sentences:
        return 1.0
    return len(set(sentences)) / len(sentences)


def accuracy_reward(
    pred: Sequence[ObjectAnswer],
    gt: Sequence[ObjectAnswer],
    cfg: AccuracyConfig = AccuracyConfig(),
) -> AccuracyReward:
    """IoU, box-L1 and point-L1 credits over one shared optimal matching.

    Each matched pair passing a threshold adds ``1 / max(N, K)`` to that
    component. Both lists empty scores full credit; exactly one empty scores 0.
    """
    n, k = len(gt), len(pred)
    if n == 0 and k == 0:
        return AccuracyReward(1.0, 1.0, 1.0)
    if n == 0 or k == 0:
        return AccuracyReward(0.0, 0.0, 0.0)
    quantum = 1.0 / max(n, k)
    passes = np.zeros((n, k, 3), dtype=bool)
    for i, g in enumerate(gt):
        for j, p in enumerate(pred):
            passes[i, j] = (
                iou(g.bbox, p.bbox) > cfg.iou_threshold,
                box_l1(g.bbox, p.bbox, cfg.box_l1_reduction) < cfg.box_l1_threshold,
                point_l1(g.point, p.point) < cfg.point_l1_threshold,
            )
    # Tied IoU optima are resolved by content, not list order: most credits
    # first, then iou / box / point credits lexicographically.
    base = min(n, k) + 1
    pref = passes.sum(axis=2) * base**3 + passes[..., 0] * base**2 + passes[..., 1] * base + passes[..., 2]
    pairs = assign_max_iou_preferring(iou_matrix(_boxes(gt), _boxes(pred)), pref)
    c_iou, c_box, c_pt = (int(v) for v in sum((passes[i, j].astype(int) for i, j in pairs), np.zeros(3, int)))
    return AccuracyReward(c_iou * quantum, c_box * quantum, c_pt * quantum)


def description_reward(
    second_pass_answers: Sequence[ObjectAnswer] | None,
    gt: Sequence[ObjectAnswer],
    cfg: AccuracyConfig = AccuracyConfig(),
) -> float:
    """Accuracy of the second-pass answer; ``None`` (failed pass) scores 0."""
    if second_pass_answers is None:
        return 0.0
    return accuracy_reward(second_pass_answers, gt, cfg).acc_total


def length_reward(n1: float, n2: float | None, cfg: LengthConfig = LengthConfig()) -> float:
    """``clip(1[n2 < n1] - gamma * max(0, n1 - anchor), 0, 1)``.

    ``n2=None`` (no usable second pass) makes the indicator 0.
    """
    indicator = 1.0 if (n2 is not None and n2 < n1) else 0.0
    value = indicator - cfg.gamma * max(0.0, n1 - cfg.anchor_n0)
    return min(1.0, max(0.0, value))


def conditional_length(group_acc_totals: Sequence[float], per_sample_len: Sequence[float]) -> list[float]:
    if len(group_acc_totals) != len(per_sample_len):
        raise LengthMismatch(
            f"{len(group_acc_totals)} accuracy values vs {len(per_sample_len)} length values"
        )
    if len(group_acc_totals) == 0:
        raise LengthMismatch("empty group")
    if any(a > 0 for a in group_acc_totals):
        return [float(v) for v in per_sample_len]
    return [1.0] * len(per_sample_len)


def total_reward(
    format: float,
    non_repeat: float,
    acc: AccuracyReward | Sequence[float],
    desc: float,
    len_raw: float,
    len_conditional: float,
) -> RewardBreakdown:
    """Compose a breakdown; a zero format reward zeroes content rewards."""
    acc_iou, acc_box, acc_pt = tuple(acc)[:3]
    if format == 0:
        non_repeat = acc_iou = acc_box = acc_pt = desc = 0.0
    b = RewardBreakdown(
        format=float(format),
        non_repeat=float(non_repeat),
        acc_iou=float(acc_iou),
        acc_box_l1=float(acc_box),
        acc_point_l1=float(acc_pt),
        desc=float(desc),
        len_raw=float(len_raw),
        len_conditional=float(len_conditional),
    )
    b.acc_total = b.acc_iou + b.acc_box_l1 + b.acc_point_l1
    b.base = b.format + b.non_repeat + b.acc_total
    b.total = (b.base + b.desc) * b.len_conditional
    return b


def sam3_style_reward(merged_mask: BinaryMask, gt_mask: BinaryMask) -> float:
    """Mask-IoU accuracy used in mask reward mode."""
    return mask_iou(merged_mask, gt_mask)


def check_breakdown(b: RewardBreakdown, reward_mode: str = "box_point") -> None:
    """Raise ``AssertionError`` if a breakdown violates its invariants."""
    tol = 1e-9
    acc_max = 3.0 if reward_mode == "box_point" else 1.0
    assert b.format in (0.0, 1.0)
    assert -tol <= b.non_repeat <= 1 + tol
    for v in (b.acc_iou, b.acc_box_l1, b.acc_point_l1, b.len_raw, b.len_conditional):
        assert -tol <= v <= 1 + tol
    assert -tol <= b.acc_total <= acc_max + tol
    assert -tol <= b.desc <= acc_max + tol
    assert math.isclose(b.acc_total, b.acc_iou + b.acc_box_l1 + b.acc_point_l1, abs_tol=tol)
    assert math.isclose(b.base, b.format + b.non_repeat + b.acc_total, abs_tol=tol)
    assert math.isclose(b.total, (b.base + b.desc) * b.len_conditional, abs_tol=tol)
    if b.format == 0:
        assert b.total == 0.0


def summarize(breakdowns: Sequence[RewardBreakdown]) -> dict:
    """Mean of every breakdown component, plus the record count."""
    keys = list(RewardBreakdown().to_dict())
    if not breakdowns:
        return {"count": 0, **{k: 0.0 for k in keys}}
    arr = np.array([[getattr(b, k) for k in keys] for b in breakdowns], dtype=float)
    return {"count": len(breakdowns), **{k: float(v) for k, v in zip(keys, arr.mean(axis=0))}}
