"""Score a handful of hand-written two-pass rollouts as one group.

Shows fail-closed parsing, the description reward and the length gate.

    python3 demos/score_rollouts.py
"""

from segreward.rollout import Generation, Sample, Target, assemble_group
from segreward.structured_output import FIRST_PASS, SECOND_PASS, ObjectAnswer, render_response, try_parse

CUP = ObjectAnswer((100, 100, 200, 180), (150, 140))
OFF = ObjectAnswer((300, 260, 380, 330), (340, 300))


def sample(mode, text):
    return Sample(mode, Generation(text), *try_parse(text, mode))


def main() -> None:
    short = "The mug on the left is what you drink from."
    long = " ".join(["I check each object on the table one at a time."] * 6)
    firsts = [
        sample(FIRST_PASS, render_response(short, [CUP], "cup")),
        sample(FIRST_PASS, render_response(long, [CUP], "cup")),
        sample(FIRST_PASS, render_response(short, [OFF], "plate")),
        sample(FIRST_PASS, "<think>hmm</think><answer>[{]</answer>"),
    ]
    seconds = [
        sample(SECOND_PASS, render_response("A cup.", [CUP])),
        sample(SECOND_PASS, render_response("A cup.", [CUP])),
        sample(SECOND_PASS, render_response("A plate.", [OFF])),
        None,
    ]
    group = assemble_group(firsts, seconds, Target((CUP,), 640, 480))
    print(f"{'':>3} {'n1':>4} {'fmt':>4} {'acc':>5} {'desc':>5} {'len':>5} {'total':>6} {'adv':>7}")
    for i, b in enumerate(group.rewards):
        n1 = group.n1[i] if group.n1[i] is not None else "-"
        print(
            f"{i:>3} {n1:>4} {b.format:4.1f} {b.acc_total:5.2f} {b.desc:5.2f} {b.len_conditional:5.2f}"
            f" {b.total:6.2f} {group.advantages.values[i]:7.3f}"
        )


if __name__ == "__main__":
    main()
