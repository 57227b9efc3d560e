"""Seeded GRPO training loop over the synthetic suite, plus ablations and sweeps."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..geometry import mask_intersection_union, seg_metrics
from ..grpo import GrpoConfig
from ..rollout import PassCounter, RolloutGroup, Target, answer_entropy, group_trace, infer, run_group
from ..structured_output import FIRST_PASS, SECOND_PASS, count_tokens
from .config import TrainConfig
from .oracle import MaskOracle
from .policy import (
    NonFiniteGradient,
    TemplatePolicy,
    cold_start_logits,
    default_logits,
    mean_context_kl,
    surrogate_gradient,
)
from .scenes import SceneRef, build_suite

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step",
    "mean_total",
    "mean_acc",
    "mean_desc",
    "mean_len",
    "mean_n1",
    "mean_n2",
    "answer_entropy",
    "acc_rate",
    "gate_open",
    "kl",
    "epoch",
)

# (name, enable_desc, enable_len)
ABLATION_ROWS = (
    ("base", False, False),
    ("base+desc", True, False),
    ("base+desc+len", True, True),
)
SWEEP_N0 = (25.0, 35.0, 45.0, 55.0)
SWEEP_GAMMA = (0.01, 0.05, 0.1, 0.2)


def _mean(xs) -> float:
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else float("nan")


def group_metrics(groups: Sequence[RolloutGroup]) -> dict[str, float]:
    """Per-step means over every first-pass sample in ``groups``.

    ``acc_rate`` is the mean IoU-matched share (the IoU accuracy component);
    ``gate_open`` is the share of groups where some rollout earned accuracy.
    """
    rewards = [b for g in groups for b in g.rewards]
    return {
        "mean_total": _mean(b.total for b in rewards),
        "mean_acc": _mean(b.acc_total for b in rewards),
        "mean_desc": _mean(b.desc for b in rewards),
        "mean_len": _mean(b.len_conditional for b in rewards),
        "mean_n1": _mean(n for g in groups for n in g.n1),
        "mean_n2": _mean(n for g in groups for n in g.n2),
        "answer_entropy": _mean(answer_entropy(s) for g in groups for s in g.first_pass),
        "acc_rate": _mean(b.acc_iou for b in rewards),
        "gate_open": _mean(float(any(b.acc_total > 0 for b in g.rewards)) for g in groups),
    }


def make_policy(cfg: TrainConfig) -> TemplatePolicy:
    logits = cold_start_logits() if cfg.init == "cold" else default_logits()
    return TemplatePolicy(logits)


def make_target(ref: SceneRef, oracle: MaskOracle | None = None) -> Target:
    return Target(
        ref.gt_answers(),
        ref.image_w,
        ref.image_h,
        ref.gt_mask(),
        oracle.bind(ref.scene) if oracle is not None else None,
    )


def rollout_batch(policy, refs: Sequence[SceneRef], cfg: TrainConfig, rng, oracle: MaskOracle) -> list[RolloutGroup]:
    reward_cfg, grpo_cfg = cfg.rewards(), cfg.grpo()
    groups = []
    for ref in refs:
        groups.append(
            run_group(
                policy,
                ref.scene,
                ref.case.query,
                make_target(ref, oracle),
                cfg.group_size,
                rng,
                reward_cfg,
                grpo_cfg,
                scene_ref=ref,
            )
        )
    return groups


def policy_update(
    policy: TemplatePolicy,
    groups: Sequence[RolloutGroup],
    grpo_cfg: GrpoConfig = GrpoConfig(),
    ref: TemplatePolicy | None = None,
) -> dict[str, float]:
    """One gradient-ascent step on the GRPO objective; returns diagnostics.

    Only first-pass samples carry advantages; the greedy second pass is a
    verifier and contributes no gradient.
    """
    batch = []
    for g in groups:
        items = [
            (s.generation.actions, float(a))
            for s, a in zip(g.first_pass, g.advantages.values)
            if s.generation is not None and s.generation.actions is not None
        ]
        if items:
            batch.append(items)
    if grpo_cfg.kl_beta and ref is None:
        raise ValueError("kl_beta > 0 needs a reference policy")
    grad = surrogate_gradient(policy, batch, grpo_cfg.kl_beta, ref)
    for key, g in grad.items():
        policy.theta[key] = policy.theta[key] + grpo_cfg.learning_rate * g
        if not np.all(np.isfinite(policy.theta[key])):
            raise NonFiniteGradient(f"update produced non-finite logits for {key}")
    contexts = sorted({items[0][0].context for items in batch})
    diag = group_metrics(groups)
    diag["kl"] = mean_context_kl(policy, ref, contexts) if ref is not None else 0.0
    diag["grad_norm"] = float(np.sqrt(sum(float(np.sum(g * g)) for g in grad.values())))
    return diag


@dataclass
class TrainResult:
    config: TrainConfig
    timeline: list[dict] = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    traces: list[dict] = field(default_factory=list)
    policy: TemplatePolicy | None = None


def measure(policy: TemplatePolicy, suite: Sequence[SceneRef], cfg: TrainConfig) -> dict[str, float]:
    """Sampled-rollout metrics on a fixed suite with a fixed rng, so that two
    calls on different policies are paired draws."""
    oracle = MaskOracle(cfg.mask_noise, cfg.eval_seed)
    rng = np.random.default_rng(cfg.eval_seed)
    groups = rollout_batch(policy, suite, cfg, rng, oracle)
    out = group_metrics(groups)
    out.update(evaluate(policy, suite, MaskOracle(cfg.mask_noise, cfg.eval_seed)))
    return out


def train(cfg: TrainConfig, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Run ``cfg.steps`` GRPO steps; fully determined by ``cfg``."""
    scene_cfg = cfg.scenes()
    suite = build_suite(cfg.n_cases, cfg.scene_seed, scene_cfg, cfg.hard_fraction)
    eval_suite = build_suite(cfg.eval_cases, cfg.eval_seed, scene_cfg, cfg.hard_fraction) if cfg.eval_cases else []
    policy = make_policy(cfg)
    ref = policy.snapshot()
    rng = np.random.default_rng(cfg.seed)
    oracle = MaskOracle(cfg.mask_noise, cfg.seed + 1)
    grpo_cfg = cfg.grpo()

    result = TrainResult(cfg, policy=policy)
    if eval_suite:
        result.initial = measure(policy, eval_suite, cfg)

    order: list[int] = []
    epoch = -1
    for step in range(cfg.steps):
        refs = []
        while len(refs) < cfg.batch_size:
            if not order:
                epoch += 1
                order = list(rng.permutation(len(suite)))
            refs.append(suite[order.pop(0)])
        groups = rollout_batch(policy, refs, cfg, rng, oracle)
        if cfg.trace:
            for g in groups:
                result.traces.append(group_trace(g, make_target(g.scene_ref), step, {"epoch": epoch}))
        diag = policy_update(policy, groups, grpo_cfg, ref)
        row = {"step": step, **{k: diag[k] for k in METRIC_COLUMNS if k in diag}, "epoch": epoch}
        result.timeline.append(row)
        if on_step is not None:
            on_step(row)
        log.debug("step %d total %.4f n1 %.1f", step, row["mean_total"], row["mean_n1"])

    if eval_suite:
        result.final = measure(policy, eval_suite, cfg)
    return result


# --- evaluation -------------------------------------------------------------------


def evaluate(policy, suite: Sequence[SceneRef], oracle: MaskOracle | None = None) -> dict[str, float]:
    """Inference-mode report: one greedy first pass per query, masks via the
    oracle, then mean think tokens, gIoU and cIoU."""
    oracle = oracle or MaskOracle()
    if not suite:
        return {"tokens": float("nan"), "giou": float("nan"), "ciou": float("nan"), "n": 0}
    counter = PassCounter(policy)
    pairs, tokens = [], []
    for ref in suite:
        before = counter.calls[FIRST_PASS]
        sample = infer(counter, ref.scene, ref.case.query, scene_ref=ref)
        if counter.calls[FIRST_PASS] != before + 1:
            raise AssertionError("inference must run exactly one first pass per query")
        if sample.ok:
            pred = oracle.mask_from(ref.scene, sample.response.answers, sample.response.description or "")
            tokens.append(count_tokens(sample.response.think))
        else:
            pred = ref.scene.union_mask([])
            tokens.append(None)
        pairs.append(mask_intersection_union(pred, ref.gt_mask()))
    if counter.calls[SECOND_PASS] != 0:
        raise AssertionError("inference must not run the second pass")
    giou, ciou = seg_metrics(pairs)
    return {"tokens": _mean(tokens), "giou": giou, "ciou": ciou, "n": len(suite)}


# --- ablation and sensitivity ------------------------------------------------------


def run_ablation(cfg: TrainConfig, seeds: Sequence[int] = (0,), rows=ABLATION_ROWS) -> list[dict]:
    """Paired-seed runs of each reward configuration; one summary per row and seed."""
    out = []
    for name, desc, length in rows:
        for seed in seeds:
            res = train(cfg.replace(enable_desc=desc, enable_len=length, seed=seed, trace=False))
            out.append({"row": name, "seed": seed, "enable_desc": desc, "enable_len": length, **res.final})
    return out


def sensitivity_sweep(
    cfg: TrainConfig, n0s: Sequence[float] = SWEEP_N0, gammas: Sequence[float] = SWEEP_GAMMA
) -> dict[str, list[dict]]:
    """One-at-a-time sweeps of the length anchor and penalty, others at ``cfg``."""
    anchor = []
    for n0 in n0s:
        res = train(cfg.replace(anchor_n0=float(n0), trace=False))
        anchor.append({"anchor_n0": float(n0), **res.final})
    penalty = []
    for gamma in gammas:
        res = train(cfg.replace(gamma=float(gamma), trace=False))
        penalty.append({"gamma": float(gamma), **res.final})
    return {"anchor_n0": anchor, "gamma": penalty}


def format_table(rows: Sequence[dict], key: str) -> str:
    """Plain-text table with Tokens / gIoU / cIoU columns (IoUs in percent)."""
    header = f"{key:>14} | {'Tokens':>7} | {'gIoU':>6} | {'cIoU':>6} | {'acc':>6}"
    lines = [header, "-" * len(header)]
    for r in rows:
        label = r[key] if isinstance(r[key], str) else f"{r[key]:g}"
        lines.append(
            f"{label:>14} | {r['tokens']:7.1f} | {100 * r['giou']:6.1f} | {100 * r['ciou']:6.1f} | {r['acc_rate']:6.3f}"
        )
    return "\n".join(lines)
