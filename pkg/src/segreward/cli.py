"""Command-line entry point: ``segreward {score,train,oracle,eval}``.

Exit codes: 0 success, 1 input or config error, 2 internal invariant
violation (including oracle mismatches).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checks import SUITES, run_suite
from .geometry import GeometryError, decode_mask, mask_intersection_union, seg_metrics
from .grpo import GrpoConfig
from .harness.config import ConfigError, TrainConfig, load_config_file
from .harness.training import METRIC_COLUMNS, SWEEP_GAMMA, SWEEP_N0, ABLATION_ROWS, format_table, train
from .rewards import RewardBreakdown, check_breakdown, summarize
from .rollout import Generation, Sample, Target, assemble_group
from .structured_output import FIRST_PASS, SECOND_PASS, ObjectAnswer, count_tokens, try_parse

log = logging.getLogger("segreward")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_INVARIANT = 2
MANIFEST = "manifest.json"


class InputError(ValueError):
    pass


# --- output helpers ----------------------------------------------------------------


def write_atomic(path: Path, data: str | bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def jsonl(records) -> str:
    return "".join(dumps(r) + "\n" for r in records)


def write_manifest(out: Path, command: str, config: dict, seed, outputs: list[str], args: dict | None = None):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "engine_version": __version__,
        "outputs": sorted(outputs),
        "args": args or {},
    }
    write_atomic(out / MANIFEST, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRIC_COLUMNS])
    return buf.getvalue()


def read_jsonl(path) -> list[tuple[int, dict]]:
    out = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise InputError(f"{path}:{lineno}: expected a JSON object")
        out.append((lineno, rec))
    return out


# --- config ------------------------------------------------------------------------


def load_train_config(path: str | None, seed: int | None = None, steps: int | None = None) -> tuple[TrainConfig, str]:
    """Config plus matrix mode; accepts a config file or a previous run's manifest."""
    raw: dict = {}
    if path:
        try:
            raw = load_config_file(path)
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        if "command" in raw and "config" in raw:
            raw = dict(raw["config"])
    raw = dict(raw)
    matrix = str(raw.pop("matrix", "none")).strip()
    if matrix not in ("none", "ablation", "sweep"):
        raise ConfigError(f"matrix: expected none, ablation or sweep, got {matrix!r}")
    if seed is not None:
        raw["seed"] = seed
    if steps is not None:
        raw["steps"] = steps
    return TrainConfig.from_mapping(raw), matrix


# --- score -------------------------------------------------------------------------


def _answers(value, where: str) -> tuple[ObjectAnswer, ...]:
    if not isinstance(value, list):
        raise InputError(f"{where}: gt_answers must be a list")
    try:
        return tuple(ObjectAnswer.from_json(a) for a in value)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{where}: bad gt answer ({exc})") from None


def _number(rec: dict, key: str, where: str):
    v = rec.get(key)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v <= 0:
        raise InputError(f"{where}: {key} must be a positive number")
    return v


def _text(rec: dict, key: str, where: str, required: bool) -> str | None:
    v = rec.get(key)
    if v is None and not required:
        return None
    if not isinstance(v, str):
        raise InputError(f"{where}: {key} must be a string")
    return v


def _sample(mode: str, text: str | None, size):
    if text is None:
        return None
    resp, err = try_parse(text, mode, size)
    return Sample(mode, Generation(text), resp, err)


def _score_group(items: list[tuple[str, dict]], target: Target, cfg: TrainConfig):
    """items: (where, record) pairs sharing one target."""
    size = (target.image_w, target.image_h) if target.image_w and target.image_h else None
    first, second = [], []
    for where, rec in items:
        f = _sample(FIRST_PASS, _text(rec, "raw_first_pass", where, True), size)
        s = _sample(SECOND_PASS, _text(rec, "raw_second_pass", where, False), size)
        if not f.ok:
            log.warning("%s: first pass unparseable (%s); content rewards are 0", where, type(f.error).__name__)
        first.append(f)
        second.append(s if f.ok else None)
    grpo_cfg = GrpoConfig(normalize_by_std=cfg.normalize_by_std, epsilon=cfg.epsilon, group_size=max(len(items), 2))
    return assemble_group(first, second, target, cfg.rewards(), grpo_cfg)


def _target(rec: dict, where: str) -> Target:
    if "gt_answers" not in rec:
        raise InputError(f"{where}: missing gt_answers")
    return Target(_answers(rec["gt_answers"], where), _number(rec, "image_w", where), _number(rec, "image_h", where))


def score_records(records: list[tuple[int, dict]], cfg: TrainConfig, source: str = "input") -> list[dict]:
    """Score batch or trace records; returns one output row per sample, in input order."""
    if cfg.reward_mode != "box_point":
        raise InputError("scoring files supports reward_mode box_point only (mask mode needs scene masks)")
    jobs: list[tuple[list[tuple[str, dict]], Target, list[dict]]] = []
    groups: dict[str, int] = {}
    for lineno, rec in records:
        where = f"{source}:{lineno}"
        if "samples" in rec:
            samples = rec["samples"]
            if not isinstance(samples, list) or not samples:
                raise InputError(f"{where}: samples must be a non-empty list")
            for s in samples:
                if not isinstance(s, dict):
                    raise InputError(f"{where}: each sample must be an object")
            meta = {"line": lineno, **({"step": rec["step"]} if "step" in rec else {})}
            metas = [{**meta, "sample": i} for i in range(len(samples))]
            jobs.append(([(where, s) for s in samples], _target(rec, where), metas))
            continue
        gid = rec.get("group_id")
        target = _target(rec, where)
        meta = {"line": lineno, **({"group_id": gid} if gid is not None else {})}
        if gid is None:
            jobs.append(([(where, rec)], target, [meta]))
            continue
        key = json.dumps(gid, sort_keys=True)
        if key in groups:
            items, first_target, metas = jobs[groups[key]]
            if target.answers != first_target.answers:
                raise InputError(f"{where}: group {gid!r} has inconsistent gt_answers")
            items.append((where, rec))
            metas.append(meta)
        else:
            groups[key] = len(jobs)
            jobs.append(([(where, rec)], target, [meta]))
    rows = []
    for items, target, metas in jobs:
        group = _score_group(items, target, cfg)
        for i, b in enumerate(group.rewards):
            check_breakdown(b, cfg.reward_mode)
            rows.append(
                {
                    **metas[i],
                    "n1": group.n1[i],
                    "n2": group.n2[i],
                    "reward": b.to_dict(),
                    "advantage": float(group.advantages.values[i]),
                }
            )
    rows.sort(key=lambda r: (r["line"], r.get("sample", 0)))
    return rows


def cmd_score(args) -> int:
    cfg, _ = load_train_config(args.config)
    if not args.input:
        raise InputError("score needs --input")
    rows = score_records(read_jsonl(args.input), cfg, args.input)
    summary = summarize([RewardBreakdown(**r["reward"]) for r in rows])
    if args.out:
        out = Path(args.out)
        write_atomic(out / "scores.jsonl", jsonl(rows))
        write_atomic(out / "summary.json", dumps(summary) + "\n")
        write_manifest(out, "score", cfg.to_dict(), cfg.seed, ["scores.jsonl", "summary.json"], {"input": args.input})
        print(dumps({"summary": summary}))
    else:
        sys.stdout.write(jsonl(rows))
        print(dumps({"summary": summary}), file=sys.stderr)
    return EXIT_OK


# --- train -------------------------------------------------------------------------


def _run_one(cfg: TrainConfig, out: Path | None, args_meta: dict) -> dict:
    res = train(cfg)
    final = res.timeline[-1] if res.timeline else {}
    if out is not None:
        outputs = ["metrics.csv", "summary.json"]
        write_atomic(out / "metrics.csv", metrics_csv(res.timeline))
        if cfg.trace:
            write_atomic(out / "traces.jsonl", jsonl(res.traces))
            outputs.append("traces.jsonl")
        summary = {"initial": res.initial, "final": res.final, "last_step": final}
        write_atomic(out / "summary.json", dumps(summary) + "\n")
        write_manifest(out, "train", cfg.to_dict(), cfg.seed, outputs, args_meta)
    return {"config": cfg.to_dict(), "initial": res.initial, "final": res.final, "last_step": final}


def _worker(payload):
    cfg_dict, out, meta = payload
    return _run_one(TrainConfig.from_mapping(cfg_dict), Path(out) if out else None, meta)


def _engine_threads() -> int:
    raw = os.environ.get("ENGINE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ENGINE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _run_many(jobs: list[tuple[TrainConfig, Path | None, dict]]) -> list[dict]:
    payloads = [(c.to_dict(), str(o) if o else None, m) for c, o, m in jobs]
    threads = min(_engine_threads(), len(jobs))
    if threads <= 1:
        return [_worker(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_worker, payloads))


def _summary_line(name: str, result: dict) -> str:
    last = result["last_step"]
    if not last:
        return f"{name}: 0 steps"
    return (
        f"{name}: step {last['step']} mean_total {last['mean_total']:.4f} mean_acc {last['mean_acc']:.4f} "
        f"acc_rate {last['acc_rate']:.4f} mean_n1 {last['mean_n1']:.2f} answer_entropy {last['answer_entropy']:.4f}"
    )


def cmd_train(args) -> int:
    cfg, matrix = load_train_config(args.config, args.seed, args.steps)
    out = Path(args.out) if args.out else None
    meta = {"matrix": matrix}
    if matrix == "none":
        result = _run_one(cfg, out, meta)
        print(_summary_line("run", result))
        return EXIT_OK

    if matrix == "ablation":
        names = [name for name, _, _ in ABLATION_ROWS]
        jobs = [
            (cfg.replace(enable_desc=d, enable_len=l), out / name if out else None, {"matrix": matrix, "row": name})
            for name, d, l in ABLATION_ROWS
        ]
    else:
        names = [f"n0_{n0:g}" for n0 in SWEEP_N0] + [f"gamma_{g:g}" for g in SWEEP_GAMMA]
        cfgs = [cfg.replace(anchor_n0=n0) for n0 in SWEEP_N0] + [cfg.replace(gamma=g) for g in SWEEP_GAMMA]
        jobs = [(c, out / n if out else None, {"matrix": matrix, "cell": n}) for c, n in zip(cfgs, names)]
    results = _run_many(jobs)
    for name, res in zip(names, results):
        print(_summary_line(name, res))
    finals = [dict(res["final"]) for res in results]
    if matrix == "ablation":
        rows = [{"row": n, **f} for n, f in zip(names, finals)]
        table = format_table(rows, "row") if all(f for f in finals) else ""
    else:
        a = [{"anchor_n0": n0, **f} for n0, f in zip(SWEEP_N0, finals[: len(SWEEP_N0)])]
        g = [{"gamma": gm, **f} for gm, f in zip(SWEEP_GAMMA, finals[len(SWEEP_N0) :])]
        table = (format_table(a, "anchor_n0") + "\n\n" + format_table(g, "gamma")) if all(finals) else ""
    if table:
        print(table)
    if out is not None:
        write_atomic(out / "table.txt", table + "\n")
        write_manifest(out, "train", {**cfg.to_dict(), "matrix": matrix}, cfg.seed, ["table.txt"] + [f"{n}/" for n in names], meta)
    return EXIT_OK


# --- oracle ------------------------------------------------------------------------


def cmd_oracle(args) -> int:
    if args.suite not in SUITES:
        raise InputError(f"--suite must be one of {', '.join(SUITES)}")
    if args.count is not None and args.count < 1:
        raise InputError("--count must be positive")
    seed = args.seed if args.seed is not None else 0
    report = run_suite(args.suite, args.count, seed)
    doc = report.to_dict()
    if args.out:
        out = Path(args.out)
        write_atomic(out / "oracle.json", dumps(doc) + "\n")
        write_manifest(out, "oracle", {"suite": args.suite, "count": report.count}, seed, ["oracle.json"])
    status = "PASS" if report.passed else "FAIL"
    print(f"{args.suite}: {status} ({report.count} instances, seed {seed}) {dumps(report.stats)}")
    for f in report.failures[:5]:
        print("mismatch:", dumps(f))
    return EXIT_OK if report.passed else EXIT_INVARIANT


# --- eval --------------------------------------------------------------------------


def _tokens(rec: dict, where: str):
    if "tokens" in rec:
        t = rec["tokens"]
        if isinstance(t, bool) or not isinstance(t, (int, float)) or t < 0:
            raise InputError(f"{where}: tokens must be a non-negative number")
        return float(t)
    if "response" in rec:
        resp, _ = try_parse(_text(rec, "response", where, True), FIRST_PASS)
        return float(count_tokens(resp.think)) if resp is not None else None
    return None


def _mask(rec: dict, where: str):
    if "mask" not in rec:
        raise InputError(f"{where}: missing mask")
    try:
        return decode_mask(rec["mask"])
    except (GeometryError, TypeError, ValueError) as exc:
        raise InputError(f"{where}: bad mask ({exc})") from None


def eval_records(preds: list[tuple[int, dict]], gts: list[tuple[int, dict]], pred_src="pred", gt_src="gt") -> dict:
    if len(preds) != len(gts):
        raise InputError(f"misaligned inputs: {len(preds)} predictions vs {len(gts)} ground-truth records")
    splits: dict[str, dict] = {}
    for (pl, p), (gl, g) in zip(preds, gts):
        pw, gw = f"{pred_src}:{pl}", f"{gt_src}:{gl}"
        if "id" in p or "id" in g:
            if p.get("id") != g.get("id"):
                raise InputError(f"{pw}: id {p.get('id')!r} does not match {gw} id {g.get('id')!r}")
        pm, gm = _mask(p, pw), _mask(g, gw)
        if pm.shape != gm.shape:
            raise InputError(f"{pw}: mask shape {pm.shape} differs from ground truth {gm.shape}")
        split = str(g.get("split", p.get("split", "all")))
        s = splits.setdefault(split, {"pairs": [], "tokens": []})
        s["pairs"].append(mask_intersection_union(pm, gm))
        t = _tokens(p, pw)
        if t is not None:
            s["tokens"].append(t)
    report = {}
    for split in sorted(splits):
        s = splits[split]
        giou, ciou = seg_metrics(s["pairs"])
        tokens = sum(s["tokens"]) / len(s["tokens"]) if s["tokens"] else None
        report[split] = {"n": len(s["pairs"]), "tokens": tokens, "giou": giou, "ciou": ciou}
    return report


def cmd_eval(args) -> int:
    if not args.input or not args.gt:
        raise InputError("eval needs --input (predictions) and --gt")
    report = eval_records(read_jsonl(args.input), read_jsonl(args.gt), args.input, args.gt)
    if args.out:
        out = Path(args.out)
        write_atomic(out / "eval.json", dumps(report) + "\n")
        write_manifest(out, "eval", {}, None, ["eval.json"], {"input": args.input, "gt": args.gt})
    print(f"{'split':>10} | {'Tokens':>7} | {'gIoU':>7} | {'cIoU':>7} | {'n':>5}")
    for split, r in report.items():
        tok = f"{r['tokens']:7.1f}" if r["tokens"] is not None else f"{'-':>7}"
        print(f"{split:>10} | {tok} | {100 * r['giou']:7.2f} | {100 * r['ciou']:7.2f} | {r['n']:>5}")
    return EXIT_OK


# --- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors are input errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segreward", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="score JSONL rollouts or group traces")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="run the synthetic GRPO training loop")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("oracle", help="compare implementations against brute-force oracles")
    p.add_argument("--suite", required=True, choices=SUITES)
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval", help="gIoU / cIoU / token report for predicted masks")
    p.add_argument("--input", required=True, help="predictions JSONL")
    p.add_argument("--gt", required=True, help="ground-truth JSONL")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors and --help/--version; return the code instead of exiting
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AssertionError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
