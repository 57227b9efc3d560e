"""Randomized implementation-vs-oracle comparisons.

Each suite draws ``count`` seeded instances, runs the production routine and
an independent reference, and reports failures with the instance serialized
so it can be replayed.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import BinaryMask, iou_matrix, mask_iou
from .grpo import categorical_kl, kl_estimate
from .matching import TIE_TOL, brute_force_match, match_objects
from .structured_output import (
    ALL_TAGS,
    FIRST_PASS,
    MODES,
    ObjectAnswer,
    ResponseParseError,
    parse_response,
    render,
    render_response,
)
from .harness.policy import (
    ANSWER_KINDS,
    CONTEXTS,
    DESCRIPTION_KINDS,
    LENGTH_BUCKETS,
    REFERRING,
    Action,
    TemplatePolicy,
    factor_sizes,
    flatten_grad,
    surrogate,
    surrogate_gradient,
)

SUITES = ("matching", "gradient", "mask_iou", "kl")


@dataclass
class OracleReport:
    suite: str
    count: int
    seed: int
    failures: list[dict] = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "suite": self.suite,
            "count": self.count,
            "seed": self.seed,
            "passed": self.passed,
            "stats": self.stats,
            "failures": self.failures,
        }


# --- matching ----------------------------------------------------------------------


def random_boxes(rng, n: int, size: float = 100.0) -> list[list[float]]:
    """Boxes clustered around a few centres so that many pairs overlap."""
    centres = rng.uniform(20, size - 20, size=(2, 2))
    out = []
    for _ in range(n):
        cx, cy = centres[rng.integers(2)] + rng.normal(0, 8, size=2)
        w, h = rng.uniform(5, 30, size=2)
        out.append([float(cx - w / 2), float(cy - h / 2), float(cx + w / 2), float(cy + h / 2)])
    return out


def _unique_optimum(ious: np.ndarray, gap: float = 1e-6) -> bool:
    n, k = ious.shape
    need = min(n, k)
    totals = sorted(
        (
            sum(ious[i, j] for i, j in zip(rows, cols))
            for rows in itertools.combinations(range(n), need)
            for cols in itertools.permutations(range(k), need)
        ),
        reverse=True,
    )
    return len(totals) < 2 or totals[0] - totals[1] > gap


def check_matching(count: int = 1000, seed: int = 0, max_objects: int = 6) -> OracleReport:
    rng = np.random.default_rng(seed)
    report = OracleReport("matching", count, seed)
    tie_free = 0
    for _ in range(count):
        n, k = (int(x) for x in rng.integers(0, max_objects + 1, size=2))
        gt, pred = random_boxes(rng, n), random_boxes(rng, k)
        fast, slow = match_objects(gt, pred), brute_force_match(gt, pred)
        problem = None
        if abs(fast.total_iou - slow.total_iou) > TIE_TOL:
            problem = "total IoU differs"
        elif _unique_optimum(iou_matrix(np.array(gt).reshape(-1, 4), np.array(pred).reshape(-1, 4))):
            tie_free += 1
            if fast.pairs != slow.pairs:
                problem = "pairings differ on a tie-free instance"
        if problem:
            report.failures.append(
                {
                    "problem": problem,
                    "gt": gt,
                    "pred": pred,
                    "hungarian": [list(p) for p in fast.pairs],
                    "brute_force": [list(p) for p in slow.pairs],
                }
            )
    report.stats = {"tie_free": tie_free}
    return report


# --- gradient ----------------------------------------------------------------------


def random_policy(rng, scale: float = 1.0) -> TemplatePolicy:
    return TemplatePolicy({key: rng.normal(0, scale, n) for key, n in factor_sizes().items()})


def random_batch(rng, n_groups: int = 3, k: int = 4):
    batch = []
    for _ in range(n_groups):
        context = CONTEXTS[int(rng.integers(len(CONTEXTS)))]
        group = []
        for _ in range(k):
            act = Action(
                context,
                int(rng.integers(len(LENGTH_BUCKETS))),
                None if context == REFERRING else int(rng.integers(len(DESCRIPTION_KINDS))),
                int(rng.integers(len(ANSWER_KINDS))),
            )
            group.append((act, float(rng.normal())))
        batch.append(group)
    return batch


def finite_difference(policy: TemplatePolicy, fn, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn(policy)`` in every logit."""
    base = policy.flat()
    out = np.zeros_like(base)
    probe = policy.snapshot()
    for i in range(base.size):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        probe.set_flat(up)
        f_up = fn(probe)
        probe.set_flat(down)
        f_down = fn(probe)
        out[i] = (f_up - f_down) / (2 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradient(count: int = 100, seed: int = 0, tol: float = 1e-4) -> OracleReport:
    rng = np.random.default_rng(seed)
    report = OracleReport("gradient", count, seed)
    worst = 0.0
    for _ in range(count):
        policy = random_policy(rng)
        ref = random_policy(rng)
        batch = random_batch(rng, int(rng.integers(1, 5)), int(rng.integers(2, 9)))
        beta = float(rng.choice([0.0, rng.uniform(0.01, 0.5)]))
        analytic = flatten_grad(policy, surrogate_gradient(policy, batch, beta, ref))
        numeric = finite_difference(policy, lambda p: surrogate(p, batch, beta, ref))
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if not err < tol:
            report.failures.append(
                {
                    "rel_error": err,
                    "beta": beta,
                    "logits": policy.flat().tolist(),
                    "ref_logits": ref.flat().tolist(),
                    "batch": [[[vars(a), adv] for a, adv in g] for g in batch],
                }
            )
    report.stats = {"max_rel_error": worst}
    return report


# --- mask IoU ----------------------------------------------------------------------


def pixel_count_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = union = 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        inter += x and y
        union += x or y
    return 1.0 if union == 0 else inter / union


def check_mask_iou(count: int = 1000, seed: int = 0, max_side: int = 16) -> OracleReport:
    rng = np.random.default_rng(seed)
    report = OracleReport("mask_iou", count, seed)
    for _ in range(count):
        h, w = (int(x) for x in rng.integers(1, max_side + 1, size=2))
        density = rng.uniform(0, 1)
        a = rng.random((h, w)) < density
        b = rng.random((h, w)) < density
        got = mask_iou(BinaryMask(a), BinaryMask(b))
        want = pixel_count_iou(a, b)
        if abs(got - want) > 1e-12:
            report.failures.append({"a": a.astype(int).tolist(), "b": b.astype(int).tolist(), "got": got, "want": want})
    return report


# --- KL estimator ------------------------------------------------------------------


def check_kl(count: int = 20, seed: int = 0, samples: int = 10_000, n_se: float = 3.0) -> OracleReport:
    """Monte Carlo mean of the per-token estimator against closed-form KL."""
    rng = np.random.default_rng(seed)
    report = OracleReport("kl", count, seed)
    worst = 0.0
    for _ in range(count):
        v = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(v))
        q = rng.dirichlet(np.ones(v))
        draws = rng.choice(v, size=samples, p=p)
        lp, lq = np.log(p)[draws], np.log(q)[draws]
        estimate = kl_estimate(lp, lq)
        d = lq - lp
        per_sample = np.exp(d) - d - 1
        se = float(per_sample.std(ddof=1) / np.sqrt(samples))
        exact = categorical_kl(p, q)
        z = abs(estimate - exact) / se if se > 0 else 0.0
        worst = max(worst, z)
        if z > n_se:
            report.failures.append({"p": p.tolist(), "q": q.tolist(), "estimate": estimate, "exact": exact, "se": se})
    report.stats = {"max_z": worst}
    return report


# --- parser fuzz ------------------------------------------------------------------

_FRAGMENTS = ALL_TAGS + ("[", "]", "{", "}", ",", ":", '"bbox_2d"', '"point_2d"', "NaN", "-1", "1e999", "\n", " ", "\u00e9")


def _seed_text(rng) -> str:
    answers = []
    for _ in range(int(rng.integers(0, 4))):
        x, y = (float(v) for v in rng.integers(0, 500, size=2))
        w, h = (float(v) for v in rng.integers(1, 100, size=2))
        answers.append(ObjectAnswer((x, y, x + w, y + h), (x + w / 2, y + h / 2)))
    desc = None if rng.random() < 0.3 else "the red cup"
    return render_response("Look at the table. The cup is left.", answers, desc)


def _mutate(rng, text: str) -> str:
    for _ in range(int(rng.integers(0, 4))):
        op = int(rng.integers(5))
        i = int(rng.integers(len(text) + 1))
        j = min(len(text), i + int(rng.integers(1, 12)))
        if op == 0:
            text = text[:i] + text[j:]
        elif op == 1:
            text = text[:i] + _FRAGMENTS[int(rng.integers(len(_FRAGMENTS)))] + text[i:]
        elif op == 2:
            text = text[:i] + text[j:] + text[i:j]
        elif op == 3:
            text = text[:i] + chr(int(rng.integers(0, 0x3000))) + text[i:]
        else:
            text = text[:i] + text[i:j] * 2 + text[j:]
    return text


def fuzz_parser(count: int = 100_000, seed: int = 0) -> OracleReport:
    """Mutated and random inputs must either parse or raise a typed parse
    error; every input that parses must survive render -> parse unchanged."""
    rng = np.random.default_rng(seed)
    report = OracleReport("parser_fuzz", count, seed)
    parsed = 0
    for _ in range(count):
        if rng.random() < 0.1:
            text = "".join(_FRAGMENTS[int(i)] for i in rng.integers(len(_FRAGMENTS), size=int(rng.integers(0, 20))))
        else:
            text = _mutate(rng, _seed_text(rng))
        mode = MODES[int(rng.integers(2))] if rng.random() < 0.2 else (FIRST_PASS if "<description>" in text else MODES[1])
        try:
            resp = parse_response(text, mode)
        except ResponseParseError:
            continue
        except Exception as exc:  # any untyped error is a finding
            report.failures.append({"text": text, "mode": mode, "error": repr(exc)})
            continue
        parsed += 1
        if parse_response(render(resp), mode) != resp:
            report.failures.append({"text": text, "mode": mode, "error": "round trip changed the response"})
    report.stats = {"parsed": parsed}
    return report


def run_suite(name: str, count: int | None = None, seed: int = 0) -> OracleReport:
    runners = {
        "matching": check_matching,
        "gradient": check_gradient,
        "mask_iou": check_mask_iou,
        "kl": check_kl,
    }
    if name not in runners:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    kwargs = {"seed": seed}
    if count is not None:
        kwargs["count"] = count
    return runners[name](**kwargs)
