import json
import math

import numpy as np
import pytest

from segreward.geometry import rasterize_ellipse
from segreward.grpo import GroupAdvantages, GrpoConfig
from segreward.harness import (
    ConfigError,
    MaskOracle,
    TemplatePolicy,
    TrainConfig,
    build_suite,
    evaluate,
    generate_query,
    generate_scene,
    load_config_file,
    policy_update,
    train,
)
from segreward.harness.config import parse_kv
from segreward.harness.policy import (
    ANSWER,
    DESCRIPTION,
    EASY,
    LENGTH,
    LENGTH_BUCKETS,
    REFERRING,
    Action,
    NonFiniteGradient,
    default_logits,
    factor_sizes,
    think_text,
)
from segreward.harness.scenes import (
    HARD,
    InvalidConfig,
    Scene,
    SceneConfig,
    SceneObject,
    Unresolvable,
    check_scene,
    ground,
)
from segreward.rewards import LengthConfig, RewardConfig
from segreward.rollout import GREEDY, SAMPLE, Generation, RolloutGroup, Sample, Target, answer_entropy, run_group
from segreward.structured_output import FIRST_PASS, ObjectAnswer, count_tokens, first_pass_prompt

CFG = SceneConfig()


def obj(i, label, box, color="red", action=None):
    box = tuple(float(v) for v in box)
    point = ((box[0] + box[2]) // 2, (box[1] + box[3]) // 2)
    mask = rasterize_ellipse(box, CFG.grid_w, CFG.grid_h, CFG.grid_scale)
    return SceneObject(i, label, color, action, ObjectAnswer(box, point), mask)


def scene_of(*objects):
    return Scene(CFG.image_w, CFG.image_h, CFG.grid_w, CFG.grid_h, CFG.grid_scale, tuple(objects))


# --- scenes and queries ------------------------------------------------------------


def test_scene_deterministic():
    assert generate_scene(11) == generate_scene(11)
    assert generate_scene(11) != generate_scene(12)


def test_single_object_config():
    scene = generate_scene(5, SceneConfig(min_objects=1, max_objects=1))
    assert len(scene.objects) == 1 and scene.distractor_count == 0


def test_scene_invariant_sweep():
    bad = {seed: check_scene(generate_scene(seed)) for seed in range(1000)}
    assert {s: p for s, p in bad.items() if p} == {}


@pytest.mark.parametrize(
    "kwargs", [{"min_objects": 0}, {"min_objects": 3, "max_objects": 2}, {"grid_scale": 0}, {"max_size": 480}]
)
def test_invalid_scene_config(kwargs):
    with pytest.raises(InvalidConfig):
        generate_scene(0, SceneConfig(**kwargs))


def test_easy_query_names_object():
    scene = scene_of(
        obj(0, "cup", (10, 10, 80, 80)),
        obj(1, "person", (200, 100, 300, 300)),
        obj(2, "person", (400, 100, 500, 300)),
    )
    case = generate_query(scene, EASY, 0)
    assert case.query == "cup" and case.target_ids == (0,)


def test_hard_query_holding_hand():
    scene = scene_of(
        obj(0, "person", (50, 100, 150, 300), color="blue", action="holding hand"),
        obj(1, "person", (300, 100, 400, 300), color="blue", action="waving"),
    )
    seen = set()
    for seed in range(20):
        case = generate_query(scene, HARD, seed)
        assert "person" not in case.query.split()
        assert ground(scene, case.precise) == list(case.target_ids)
        seen.add((case.query, case.target_ids))
    assert any("holding hand" in q and t == (0,) for q, t in seen)


def test_hard_query_on_single_object_unresolvable():
    scene = generate_scene(5, SceneConfig(min_objects=1, max_objects=1))
    with pytest.raises(Unresolvable):
        generate_query(scene, HARD, 0)


def test_hard_queries_have_same_class_distractor():
    for ref in build_suite(40, 3, hard_fraction=1.0):
        target = ref.scene.by_id(ref.case.target_ids[0])
        assert sum(o.label == target.label for o in ref.scene.objects) >= 2
        assert target.label not in ref.case.query.split()


# --- template policy ---------------------------------------------------------------


@pytest.fixture(scope="module")
def ref():
    return build_suite(1, 99)[0]


def test_think_text_calibrated():
    for n in LENGTH_BUCKETS:
        assert count_tokens(think_text(n)) == n
        assert count_tokens(think_text(n, second_pass=True)) == n


def test_greedy_decode_deterministic(ref):
    policy = TemplatePolicy()
    prompt = first_pass_prompt(ref.case.query)
    assert policy.generate(prompt, ref, GREEDY).text == policy.generate(prompt, ref, GREEDY).text


def test_uniform_four_answer_entropy(ref):
    kinds = ("exact", "near_miss", "sloppy", "empty")
    logits = {k: np.zeros(n) for k, n in factor_sizes(kinds).items()}
    policy = TemplatePolicy(logits, kinds)
    gen = policy.generate(first_pass_prompt(ref.case.query), ref, SAMPLE, np.random.default_rng(0))
    assert answer_entropy(gen) == pytest.approx(math.log(4), abs=1e-12)


def test_sampled_logprob_is_sum_of_factors(ref):
    rng = np.random.default_rng(1)
    policy = TemplatePolicy({k: rng.normal(0, 1, n) for k, n in factor_sizes().items()})
    prompt = first_pass_prompt(ref.case.query)
    for _ in range(50):
        gen = policy.generate(prompt, ref, SAMPLE, rng)
        act = gen.actions
        want = 0.0
        for factor, i in act.items():
            z = policy.theta[(act.context, factor)]
            want += math.log(math.exp(z[i]) / sum(math.exp(v) for v in z))
        assert gen.logprob == pytest.approx(want, abs=1e-12)


def fake_group(actions, advantages):
    samples = [Sample(FIRST_PASS, Generation("", [], a)) for a in actions]
    adv = GroupAdvantages(np.asarray(advantages, dtype=float), True, 1e-8)
    return RolloutGroup("q", samples, [None] * len(samples), [], adv, [], [])


def test_zero_advantages_leave_parameters():
    policy = TemplatePolicy()
    before = policy.flat()
    group = fake_group([Action(EASY, 0, 1, 2), Action(EASY, 3, 0, 1)], [0.0, 0.0])
    diag = policy_update(policy, [group])
    assert np.array_equal(policy.flat(), before)
    assert diag["grad_norm"] == 0


def test_update_sign_of_score_function():
    logits = {k: np.zeros(n) for k, n in factor_sizes().items()}
    policy = TemplatePolicy(logits)
    group = fake_group([Action(REFERRING, 0, None, 0), Action(REFERRING, 1, None, 0)], [1.0, -1.0])
    policy_update(policy, [group], GrpoConfig(learning_rate=0.5))
    z = policy.theta[(REFERRING, LENGTH)]
    assert z[0] > 0 > z[1]
    # the answer factor saw the same action with opposite advantages
    assert np.allclose(policy.theta[(REFERRING, ANSWER)], 0)
    # other contexts untouched
    assert np.all(policy.theta[(EASY, DESCRIPTION)] == 0)


def test_update_rejects_non_finite():
    policy = TemplatePolicy()
    group = fake_group([Action(EASY, 0, 0, 0), Action(EASY, 1, 1, 1)], [np.inf, -np.inf])
    with pytest.raises(NonFiniteGradient), np.errstate(invalid="ignore"):
        policy_update(policy, [group])


def test_update_with_kl_needs_reference():
    group = fake_group([Action(EASY, 0, 0, 0), Action(EASY, 1, 1, 1)], [1.0, -1.0])
    with pytest.raises(ValueError):
        policy_update(TemplatePolicy(), [group], GrpoConfig(kl_beta=0.1))


def test_policy_rejects_bad_shapes():
    logits = default_logits()
    logits[(EASY, LENGTH)] = np.zeros(3)
    with pytest.raises(ValueError):
        TemplatePolicy(logits)


# --- mask oracle -------------------------------------------------------------------


def test_oracle_exact_union():
    scene = generate_scene(3, SceneConfig(min_objects=4, max_objects=4))
    oracle = MaskOracle()
    for ids in ([0], [1, 2], [0, 1, 2, 3]):
        boxes = [scene.by_id(i).answer for i in ids]
        assert oracle.mask_from(scene, boxes) == scene.union_mask(ids)


def test_oracle_phrase_only():
    scene = scene_of(obj(0, "cup", (10, 10, 80, 80)), obj(1, "dog", (200, 100, 300, 300)))
    assert MaskOracle().mask_from(scene, [], "dog") == scene.union_mask([1])
    assert MaskOracle().mask_from(scene, [], "something tall").count() == 0


def test_oracle_noise_flips_cells():
    scene = generate_scene(3)
    clean = MaskOracle().mask_from(scene, [scene.objects[0].answer])
    noisy = MaskOracle(0.1, seed=0).mask_from(scene, [scene.objects[0].answer])
    assert clean != noisy
    with pytest.raises(ValueError):
        MaskOracle(1.5)


# --- reward hacking guard ----------------------------------------------------------


def pinned_policy(first_bucket, second_bucket):
    """Always-exact policy whose first and second pass lengths are fixed."""
    theta = default_logits()
    for c in (EASY, HARD):
        theta[(c, LENGTH)] = np.full(4, -50.0)
        theta[(c, LENGTH)][first_bucket] = 0.0
        theta[(c, DESCRIPTION)] = np.array([0.0, -50, -50, -50, -50])
        theta[(c, ANSWER)] = np.array([0.0, -50, -50, -50, -50])
    theta[(REFERRING, LENGTH)] = np.full(4, -50.0)
    theta[(REFERRING, LENGTH)][second_bucket] = 0.0
    return TemplatePolicy(theta)


def length_rewards(policy, ref, length_cfg):
    target = Target(ref.gt_answers(), ref.image_w, ref.image_h)
    cfg = RewardConfig(length=length_cfg)
    g = run_group(policy, ref.scene, ref.case.query, target, 4, np.random.default_rng(0), cfg, scene_ref=ref)
    return g, [b.len_conditional for b in g.rewards]


def test_reward_hacking_guard(ref):
    compact = pinned_policy(1, 0)  # n1 = 30, n2 = 15
    inflated = pinned_policy(3, 2)  # n1 = 100, n2 = 60
    g, _ = length_rewards(inflated, ref, LengthConfig())
    assert g.n1 == [100] * 4 and g.n2 == [60] * 4
    # without the anchor term both policies earn the full indicator
    free = LengthConfig(45, 0.0)
    assert length_rewards(compact, ref, free)[1] == length_rewards(inflated, ref, free)[1] == [1.0] * 4
    # with the shipped anchor the inflated policy scores no more than the compact one
    anchored_compact = length_rewards(compact, ref, LengthConfig())[1]
    anchored_inflated = length_rewards(inflated, ref, LengthConfig())[1]
    assert max(anchored_inflated) <= min(anchored_compact)
    assert anchored_inflated == [0.0] * 4 and anchored_compact == [1.0] * 4


# --- training loop -----------------------------------------------------------------

SMALL = TrainConfig(n_cases=8, eval_cases=8, steps=3, group_size=4, batch_size=4)


def test_zero_steps():
    res = train(SMALL.replace(steps=0))
    assert res.timeline == [] and res.traces == []
    assert res.initial and res.initial == res.final


def test_training_deterministic():
    a, b = train(SMALL), train(SMALL)
    assert a.timeline == b.timeline and a.traces == b.traces and a.final == b.final
    assert train(SMALL.replace(seed=1)).timeline != a.timeline


def test_timeline_columns_and_epochs():
    res = train(SMALL.replace(steps=5))
    assert [r["step"] for r in res.timeline] == list(range(5))
    # 8 cases in batches of 4 gives two steps per epoch
    assert [r["epoch"] for r in res.timeline] == [0, 0, 1, 1, 2]
    assert {"mean_total", "mean_n1", "answer_entropy", "acc_rate", "kl"} <= set(res.timeline[0])


def test_cold_start_gate_closed_in_traces():
    res = train(SMALL.replace(init="cold", steps=2))
    assert res.traces
    for tr in res.traces:
        assert all(s["reward"]["acc_total"] == 0 for s in tr["samples"])
        assert all(s["reward"]["len_conditional"] == 1 for s in tr["samples"])


def test_evaluate_identity_policy(ref):
    res = evaluate(pinned_policy(0, 0), [ref])
    assert res["giou"] == 1.0 and res["ciou"] == 1.0 and res["tokens"] == 15


# --- config ------------------------------------------------------------------------


def test_parse_kv():
    assert parse_kv("a = 1\n# c\n b=x # tail\n\n") == {"a": "1", "b": "x"}
    for text in ("novalue", "= 3", "a=1\na=2"):
        with pytest.raises(ConfigError):
            parse_kv(text)


def test_config_from_mapping():
    cfg = TrainConfig.from_mapping({"steps": "5", "enable_len": "false", "gamma": "0.1", "init": "cold"})
    assert cfg.steps == 5 and cfg.enable_len is False and cfg.gamma == 0.1 and cfg.init == "cold"
    assert TrainConfig.from_mapping(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "data,key",
    [
        ({"stepz": 1}, "stepz"),
        ({"steps": "1.5"}, "steps"),
        ({"steps": -1}, "steps"),
        ({"enable_len": "maybe"}, "enable_len"),
        ({"gamma": "abc"}, "gamma"),
        ({"gamma": [1]}, "gamma"),
        ({"init": "warm"}, "init"),
        ({"reward_mode": 3}, "reward_mode"),
    ],
)
def test_config_errors_name_the_key(data, key):
    with pytest.raises(ConfigError, match=key):
        TrainConfig.from_mapping(data)


def test_load_config_file(tmp_path):
    kv = tmp_path / "run.cfg"
    kv.write_text("steps = 3\nseed = 2\n")
    js = tmp_path / "run.json"
    js.write_text(json.dumps({"steps": 3, "seed": 2}))
    assert load_config_file(kv) == {"steps": "3", "seed": "2"}
    assert load_config_file(js) == {"steps": 3, "seed": 2}
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError):
        load_config_file(tmp_path / "bad.json")


def test_shipped_length_defaults():
    cfg = TrainConfig()
    assert cfg.anchor_n0 == 45 and cfg.gamma == 0.05
    assert cfg.group_size == 8 and cfg.batch_size == 16 and cfg.learning_rate == 0.1
