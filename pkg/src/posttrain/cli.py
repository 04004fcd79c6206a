"""``posttrain`` command-line entry point.

Every subcommand reads JSONL (or plain-text) inputs, writes its outputs
atomically, and emits a run manifest: to the ``--report`` JSON when given and
always as one JSON line on stderr. Line-oriented subcommands accept
``--shard I/K`` and process the I-th of K contiguous blocks of input lines;
concatenating shard outputs in order reproduces the unsharded output.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import warnings
from pathlib import Path
from typing import Any, Callable, Iterator

from . import __version__
from ._validation import ConfigError, CoverageError, StructureError
from .chat_template import (
    DEFAULT_BUDGETS,
    Conversation,
    conversation_from_dict,
    conversation_to_dict,
    prepare_reasoning_corpus,
    render,
)
from .config import config_digest, get_value, load_config
from .curriculum import (
    CurriculumConfig,
    TaskProfile,
    WsdConfig,
    filter_solved,
    prompt_sensitivity,
    sample_batch,
    wsd_lr,
)
from .data_filter import FilterReport, Rollout, SFTDataFilter, label_dpo_pairs
from .quant import LayerPattern, ModelDims, QuantPolicy, memory_estimate, parameter_count, plan, resolve_policy
from .rewards import LengthControlConfig, PairVerdict, Response, ResponseGroup, score_group
from .router import RouterConfig, load_imbalance, simulate, skewed_logit_stream

SUBCOMMANDS = (
    "render-template", "sft-prep", "score-group", "schedule-curriculum", "lr",
    "filter-data", "label-dpo", "simulate-router", "plan-quant", "prompt-sensitivity",
)


class InputError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


# --- I/O helpers ------------------------------------------------------------------

def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_jsonl(path: str | Path) -> Iterator[tuple[int, Any]]:
    """Yield ``(line number, object)``; blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(path, lineno, f"malformed JSON: {exc.msg}") from None


def parse_records(path, convert: Callable[[Any], Any]) -> list[tuple[int, Any]]:
    out = []
    for lineno, obj in read_jsonl(path):
        try:
            out.append((lineno, convert(obj)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(path, lineno, f"invalid record: {exc!r}") from None
    return out


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def write_atomic(path: str | Path | None, text: str) -> None:
    """Write via a temp file in the target directory and rename over ``path``."""
    if path is None or str(path) == "-":
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jsonl_text(rows) -> str:
    return "".join(dumps(r) + "\n" for r in rows)


def parse_shard(text: str | None) -> tuple[int, int]:
    if text is None:
        return 0, 1
    try:
        index, count = (int(x) for x in text.split("/"))
    except ValueError:
        raise ConfigError(f"--shard must look like I/K, got {text!r}") from None
    if not 0 <= index < count:
        raise ConfigError(f"--shard index must satisfy 0 <= I < K, got {text!r}")
    return index, count


def shard_bounds(n: int, shard: tuple[int, int]) -> tuple[int, int]:
    index, count = shard
    size = -(-n // count)
    return min(n, index * size), min(n, (index + 1) * size)


def parse_steps(text: str) -> list[int]:
    """``"7"`` or an inclusive range ``"0..K"``."""
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise ConfigError(f"empty step range {text!r}")
        return list(range(lo, hi + 1))
    return [int(text)]


class Run:
    """Collects manifest fields for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.inputs: dict[str, str] = {}
        self.config: dict[str, Any] = {}
        self.seed: int | None = getattr(args, "seed", None)

    def input(self, path) -> str:
        self.inputs[str(path)] = file_digest(path)
        return path

    def manifest(self) -> dict:
        return {
            "subcommand": self.args.command,
            "config_digest": config_digest(self.config),
            "seed": self.seed,
            "input_digests": dict(sorted(self.inputs.items())),
            "tool_version": __version__,
        }

    def finish(self, metrics: dict) -> int:
        manifest = self.manifest()
        report_path = getattr(self.args, "report", None)
        if report_path:
            write_atomic(report_path, dumps({"manifest": manifest, "metrics": metrics}) + "\n")
        sys.stderr.write(dumps({"manifest": manifest}) + "\n")
        return 0


def _effective(args: argparse.Namespace, *skip: str) -> dict:
    drop = {"command", "func", "out", "report", *skip}
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


# --- subcommands ------------------------------------------------------------------

def cmd_render_template(args) -> int:
    run = Run(args)
    run.config = _effective(args, "input")
    records = parse_records(run.input(args.input), conversation_from_dict)
    lo, hi = shard_bounds(len(records), parse_shard(args.shard))
    rows = []
    for lineno, conv in records[lo:hi]:
        if args.mode:
            conv = Conversation(conv.messages, args.mode)
        try:
            prompt = render(conv, add_generation_prompt=args.generation_prompt)
        except StructureError as exc:
            raise InputError(args.input, lineno, str(exc)) from None
        rows.append({
            "text": prompt.text,
            "included_reasoning_spans": [[i, list(span)] for i, span in prompt.included_reasoning_spans],
        })
    write_atomic(args.out, jsonl_text(rows))
    return run.finish({"rendered": len(rows)})


def cmd_sft_prep(args) -> int:
    run = Run(args)
    run.config = _effective(args, "input")
    records = parse_records(run.input(args.input), conversation_from_dict)
    lo, hi = shard_bounds(len(records), parse_shard(args.shard))
    corpus = [c for _, c in records[lo:hi]]
    budgets = tuple(int(b) for b in args.budgets.split(",")) if args.budgets else DEFAULT_BUDGETS
    out, n_stripped, trunc = prepare_reasoning_corpus(corpus, args.strip_frac, args.trunc_frac, args.seed, budgets, offset=lo)
    write_atomic(args.out, jsonl_text(conversation_to_dict(c) for c in out))
    return run.finish({
        "samples": len(corpus),
        "stripped": n_stripped,
        "truncation": vars(trunc),
    })


def _group_from_dict(obj) -> ResponseGroup:
    return ResponseGroup(
        obj["prompt_id"],
        tuple(Response(r["id"], int(r["think_len"]), int(r["answer_len"]), r.get("total_len")) for r in obj["responses"]),
    )


def _verdict_from_dict(obj) -> tuple[Any, PairVerdict]:
    v = PairVerdict(int(obj["first"]), int(obj["second"]), float(obj["s_i"]), float(obj["s_j"]), float(obj["s_r"]))
    return obj.get("prompt_id"), v


def cmd_score_group(args) -> int:
    run = Run(args)
    cfg = load_config(run.input(args.config)) if args.config else {}
    length_cfg = LengthControlConfig.from_config(cfg)
    max_len = get_value(cfg, "max_len", int, None)
    run.config = {"length_control": vars(length_cfg), "max_len": max_len, "shard": args.shard}

    groups = parse_records(run.input(args.group), _group_from_dict)
    verdict_rows = parse_records(run.input(args.verdicts), _verdict_from_dict)
    by_prompt: dict[Any, list[PairVerdict]] = {}
    for lineno, (pid, verdict) in verdict_rows:
        if pid is None:
            if len(groups) != 1:
                raise InputError(args.verdicts, lineno, "prompt_id is required when scoring several groups")
            pid = groups[0][1].prompt_id
        by_prompt.setdefault(pid, []).append(verdict)

    lo, hi = shard_bounds(len(groups), parse_shard(args.shard))
    rows = []
    for lineno, group in groups[lo:hi]:
        try:
            scored = score_group(group, by_prompt.get(group.prompt_id, []), length_cfg, max_len)
        except CoverageError as exc:
            raise InputError(args.group, lineno, f"prompt {group.prompt_id!r}: {exc}") from None
        for s in scored:
            rows.append({"prompt_id": group.prompt_id, "id": s.id, **vars(s.breakdown),
                         "advantage": s.advantage, "overlong": s.overlong})
    write_atomic(args.out, jsonl_text(rows))
    return run.finish({"groups": hi - lo, "responses": len(rows), "overlong": sum(r["overlong"] for r in rows)})


def _profile_from_dict(obj) -> TaskProfile:
    return TaskProfile(str(obj["task_id"]), str(obj["domain"]), float(obj["pass_rate"]))


def cmd_schedule_curriculum(args) -> int:
    run = Run(args)
    cfg_map = load_config(run.input(args.config))
    if args.seed is not None:
        cfg_map["seed"] = str(args.seed)
    cfg = CurriculumConfig.from_config(cfg_map)
    run.seed = cfg.seed
    run.config = {"curriculum": {**vars(cfg), "domain_ratios": dict(cfg.domain_ratios)}, "steps": args.steps}
    profiles = [p for _, p in parse_records(run.input(args.profiles), _profile_from_dict)]
    eligible = filter_solved(profiles)
    rows = []
    for step in parse_steps(args.steps):
        bp = sample_batch(eligible, cfg, step)
        rows.append({"step": bp.step, "target_mean": bp.target_mean, "entries": list(bp.entries),
                     "domain_counts": bp.domain_counts, "with_replacement": list(bp.with_replacement)})
    write_atomic(args.out, jsonl_text(rows))
    return run.finish({"profiles": len(profiles), "filtered_solved": len(profiles) - len(eligible), "plans": len(rows)})


def cmd_lr(args) -> int:
    run = Run(args)
    cfg = WsdConfig.from_config(load_config(run.input(args.config)) if args.config else {})
    run.config = {"wsd": vars(cfg)}
    lr = wsd_lr(args.tokens, cfg)
    write_atomic(args.out, dumps({"tokens": args.tokens, "lr": lr}) + "\n")
    return run.finish({"lr": lr})


def cmd_filter_data(args) -> int:
    run = Run(args)
    rules = load_config(run.input(args.rules)) if args.rules else {}
    flt = SFTDataFilter.from_config(rules).fit()
    run.config = {"filter": {k: v for k, v in flt.get_params().items() if k != "tokenizer"}, "shard": args.shard}

    lines = list(read_jsonl(run.input(args.input)))
    lo, hi = shard_bounds(len(lines), parse_shard(args.shard))
    report = FilterReport()
    kept = []
    for index in range(lo, hi):
        lineno, obj = lines[index]
        sample_id = obj.get("id", index) if isinstance(obj, dict) else index
        try:
            conv = conversation_from_dict(obj)
        except (KeyError, TypeError, ValueError):
            report.record(sample_id, "structural")
            continue
        failure = flt.first_failure(conv)
        report.record(sample_id, None if failure is None else failure[0])
        if failure is None:
            kept.append(obj)
    write_atomic(args.out, jsonl_text(kept))
    return run.finish(report.to_dict())


def _rollout_from_dict(obj) -> Rollout:
    return Rollout(obj["prompt_id"], obj["sample_id"], bool(obj["correct"]),
                   bool(obj["tool_called"]), bool(obj["tools_declared"]))


def cmd_label_dpo(args) -> int:
    run = Run(args)
    run.config = _effective(args, "rollouts")
    rollouts = [r for _, r in parse_records(run.input(args.rollouts), _rollout_from_dict)]
    pairs, skipped = label_dpo_pairs(rollouts, args.seed, args.max_pairs)
    write_atomic(args.out, jsonl_text(vars(p) for p in pairs))
    counts = {}
    for p in pairs:
        counts[p.category] = counts.get(p.category, 0) + 1
    return run.finish({"pairs": len(pairs), "by_category": counts, "skipped_prompts": skipped})


def cmd_simulate_router(args) -> int:
    run = Run(args)
    cfg = RouterConfig(args.experts, args.topk, args.shared, args.update_rate, args.lb_coeff)
    run.config = _effective(args)
    stream = skewed_logit_stream(cfg.n_experts, args.tokens_per_step, args.steps, args.seed, args.skew)
    state, trace = simulate(stream, cfg)
    rows = [
        {"step": i, "load": trace.loads[i].tolist(), "bias": trace.biases[i].tolist(),
         "imbalance": load_imbalance(trace.loads[i]), "lb_loss": trace.lb_losses[i]}
        for i in range(len(trace.loads))
    ]
    if args.out:
        write_atomic(args.out, jsonl_text(rows))
    window = min(args.window, len(trace.loads))
    metrics = {
        "steps": len(trace.loads),
        "initial_imbalance": rows[0]["imbalance"] if rows else None,
        "final_imbalance": rows[-1]["imbalance"] if rows else None,
        f"trailing_{window}_imbalance": trace.imbalance(window) if rows else None,
        "final_bias": state.expert_bias.tolist(),
        "cumulative_load": state.cumulative_load.tolist(),
    }
    if not args.out:
        metrics["trajectory"] = rows
    return run.finish(metrics)


def cmd_plan_quant(args) -> int:
    run = Run(args)
    pattern = LayerPattern.from_file(run.input(args.pattern))
    name, policy = resolve_policy(args.policy)
    overrides = {k: getattr(args, k) for k in ("attention", "mamba", "kv_cache") if getattr(args, k)}
    if overrides:
        policy = QuantPolicy(**{**vars(policy), **overrides})
        name = f"{name}+custom"
    run.config = {"policy": vars(policy), "policy_name": name}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = plan(pattern, policy)
    doc = result.to_dict()
    doc["policy"] = name
    doc["warnings"] = [str(w.message) for w in caught]
    if args.dims:
        dims = ModelDims.from_mapping(load_config(run.input(args.dims)))
        doc["parameter_count"] = parameter_count(pattern, dims)
        doc["memory_bytes"] = memory_estimate(pattern, result, dims)
    write_atomic(args.out, dumps(doc) + "\n")
    return run.finish({
        "layers": len(pattern),
        "bf16_layers": len(result.bf16_indices()),
        "bf16_attention": len(result.bf16_indices("attention")),
        "bf16_mamba": len(result.bf16_indices("mamba")),
        "kv_cache": result.kv_cache,
        "conv1d": result.conv1d,
    })


def cmd_prompt_sensitivity(args) -> int:
    run = Run(args)
    run.config = {}
    rows = parse_records(run.input(args.input), lambda o: [float(x) for x in (o["accuracies"] if isinstance(o, dict) else o)])
    matrix = [r for _, r in rows]
    if len({len(r) for r in matrix}) > 1:
        raise ConfigError("every prompt needs the same number of seeds")
    value = prompt_sensitivity(matrix)
    write_atomic(args.out, dumps({"prompts": len(matrix), "prompt_sensitivity": value}) + "\n")
    return run.finish({"prompt_sensitivity": value})


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posttrain", description="Post-training data and reward utilities.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--report", help="write JSON metrics and run manifest here")
        return p

    p = add("render-template", cmd_render_template, "render conversations to prompt text")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mode", choices=("on", "off"), help="override each conversation's reasoning mode")
    p.add_argument("--generation-prompt", action="store_true")
    p.add_argument("--out")
    p.add_argument("--shard")

    p = add("sft-prep", cmd_sft_prep, "strip / truncate reasoning for reasoning control")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--strip-frac", type=float, default=0.10)
    p.add_argument("--trunc-frac", type=float, default=0.03)
    p.add_argument("--budgets", help="comma-separated token budgets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shard")

    p = add("score-group", cmd_score_group, "compute length-controlled RLHF rewards")
    p.add_argument("--group", required=True)
    p.add_argument("--verdicts", required=True)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--shard")

    p = add("schedule-curriculum", cmd_schedule_curriculum, "plan curriculum batches")
    p.add_argument("--profiles", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--steps", default="0")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")

    p = add("lr", cmd_lr, "warmup-stable-decay learning rate")
    p.add_argument("--tokens", type=float, required=True)
    p.add_argument("--config")
    p.add_argument("--out")

    p = add("filter-data", cmd_filter_data, "structural / repetition / alignment filtering")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--rules")
    p.add_argument("--shard")

    p = add("label-dpo", cmd_label_dpo, "build DPO preference pairs from rollouts")
    p.add_argument("--rollouts", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-pairs", type=int)

    p = add("simulate-router", cmd_simulate_router, "simulate aux-loss-free expert balancing")
    p.add_argument("--experts", type=int, default=128)
    p.add_argument("--topk", type=int, default=6)
    p.add_argument("--shared", type=int, default=2)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--tokens-per-step", type=int, default=1024)
    p.add_argument("--update-rate", type=float, default=1e-3)
    p.add_argument("--lb-coeff", type=float, default=1e-4)
    p.add_argument("--skew", type=float, default=1.5)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-step load histograms and bias trajectories (JSONL)")

    p = add("plan-quant", cmd_plan_quant, "selective mixed-precision plan")
    p.add_argument("--pattern", required=True)
    p.add_argument("--policy", default="selective", choices=("selective", "all_fp8", "all_bf16"))
    p.add_argument("--attention", choices=("BF16", "FP8"))
    p.add_argument("--mamba", choices=("mixed", "FP8"))
    p.add_argument("--kv-cache", dest="kv_cache", choices=("BF16", "FP8"))
    p.add_argument("--dims")
    p.add_argument("--out")

    p = add("prompt-sensitivity", cmd_prompt_sensitivity, "std of per-prompt mean accuracy")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "path": exc.path, "line": exc.line}
    except (ConfigError, StructureError, CoverageError, ValueError, OSError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
    error["subcommand"] = args.command
    sys.stderr.write(dumps(error) + "\n")
    return 2


if __name__ == "__main__":
    sys.exit(main())
