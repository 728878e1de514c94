"""Command-line driver: ``cropzoom {eval,simulate,score,parse-check}``.

Exit codes: 0 success, 1 bad configuration or flags, 2 unreadable dataset
or input, 3 generation backend unreachable, 4 non-finite gradient during
simulation.

Settings resolve as command-line flag, then ``--config`` JSON file, then
built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

from . import defaults
from .backends import (
    BackendUnavailable,
    HttpBackend,
    RecordingBackend,
    load_transcripts,
    save_transcripts,
    scripted_backend,
)
from .dataset import FileUnreadable, SchemaError, load_dataset
from .evaluation import aggregate_report
from .geometry import Resolution, scale_bbox
from .grpo import GrpoConfig
from .orchestrator import EpisodeConfig, ToolRegistry, run_batch, run_episode
from .protocol import Level, TaskKind, parse_response, validate_pattern
from .rewards import LexicalOracle, RewardConfig, SynonymLexicon, score_stages

log = logging.getLogger("cropzoom")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_NONFINITE = 0, 1, 2, 3, 4

BUILTIN: Dict[str, Any] = {
    "alpha": defaults.ALPHA,
    "eps_rg": defaults.EPS_RG,
    "beta": defaults.BETA,
    "sim_threshold": defaults.SIM_THRESHOLD,
    "clip_eps": defaults.CLIP_EPS,
    "gamma_kl": defaults.GAMMA_KL,
    "group_size": defaults.GROUP_SIZE,
    "lr": None,
    "std_floor": defaults.STD_FLOOR,
    "input_resolution": defaults.INPUT_RESOLUTION,
    "crop_size": defaults.CROP_SIZE,
    "temperature": None,
    "max_new_tokens": defaults.MAX_NEW_TOKENS,
    "max_crops": defaults.MAX_CROPS,
    "workers": 1,
    "retries": defaults.BACKEND_RETRIES,
    "image_mode": "path",
    "lexicon": None,
    "seed": 0,
    "steps": 2000,
    "scenes": 3,
    "policy": "grid",
    "tail": 50,
}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _reward_flags(p):
    g = p.add_argument_group("reward")
    g.add_argument("--alpha", type=float, help=f"region-guided scale (default {defaults.ALPHA})")
    g.add_argument("--eps-rg", type=float, help=f"region-guided denominator constant (default {defaults.EPS_RG})")
    g.add_argument("--beta", type=float, help=f"format reward weight (default {defaults.BETA})")
    g.add_argument("--sim-threshold", type=float, help="answer similarity cut-off, strict (default 0.8)")
    g.add_argument("--lexicon", help="synonym lexicon TSV replacing the bundled one")


def _episode_flags(p):
    g = p.add_argument_group("inference")
    g.add_argument("--input-resolution", type=int, help="longest side of the global view (default 512)")
    g.add_argument("--crop-size", type=int, help="side of the zoom window (default 512)")
    g.add_argument("--temperature", type=float, help="sampling temperature (default 0.01 eval, 0.7 simulate)")
    g.add_argument("--max-new-tokens", type=int, help="generation budget per stage (default 1024)")
    g.add_argument("--max-crops", type=int, help="zooms per episode (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cropzoom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", help="run or replay a benchmark and write an accuracy / APO IoU report")
    p.add_argument("--dataset", required=True, help="JSONL dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--transcripts", help="JSONL transcript table replayed by the scripted backend")
    src.add_argument("--endpoint", help="HTTP generation endpoint (token from $CROPZOOM_BACKEND_TOKEN)")
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--workers", type=int, help="episodes in flight (default 1)")
    p.add_argument("--retries", type=int, help="HTTP retries on transport failure (default 3)")
    p.add_argument("--image-mode", choices=("path", "base64"), help="how images travel to the HTTP backend")
    p.add_argument("--report-json", help="write the JSON report here")
    p.add_argument("--results-jsonl", help="write one summary record per episode here")
    p.add_argument("--record", help="save every completion as a replayable transcript table")
    _episode_flags(p)
    _reward_flags(p)

    p = sub.add_parser("simulate", help="train toy policies with GRPO on synthetic scenes")
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    p.add_argument("--steps", type=int, help="GRPO steps (default 2000)")
    p.add_argument("--seed", type=int, help="seed for scenes and sampling (default 0)")
    p.add_argument("--scenes", type=int, help="scenes in the suite (default 3)")
    p.add_argument("--policy", choices=("grid", "gaussian"), help="toy policy family (default grid)")
    p.add_argument("--ablate", help="comma list from {rg,iou}; runs every on/off combination")
    p.add_argument("--tail", type=int, help="trailing steps averaged for ablation finals (default 50)")
    p.add_argument("--trace", help="write the training trace (JSONL) here")
    p.add_argument("--table-json", help="write the ablation table (JSON) here")
    g = p.add_argument_group("grpo")
    g.add_argument("--clip-eps", type=float, help="ratio clip range (default 0.2)")
    g.add_argument("--gamma-kl", type=float, help="KL penalty weight (default 0.04)")
    g.add_argument("--group-size", type=int, help="trajectories per group (default 4)")
    g.add_argument("--lr", type=float, help="ascent step size (default: simulation setting)")
    g.add_argument("--std-floor", type=float, help="advantage std guard (default 1e-8)")
    _reward_flags(p)

    p = sub.add_parser("score", help="compute the reward breakdown of a recorded transcript")
    p.add_argument("--transcript", required=True, help="JSONL transcript table (stage 1 and optional 2)")
    p.add_argument("--sample", required=True, help="JSONL dataset holding the sample")
    p.add_argument("--sample-id", help="which sample (default: the only/first one)")
    p.add_argument("--config", help="JSON file of settings (flags take precedence)")
    _episode_flags(p)
    _reward_flags(p)

    p = sub.add_parser("parse-check", help="parse a transcript and report its structure and format validity")
    p.add_argument("file", nargs="?", help="text file (default stdin)")
    p.add_argument("--level", choices=[lv.value for lv in Level], default="region")
    p.add_argument("--downstream", action="store_true", help="validate as a tool-invocation task")
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    return parser


def resolve(args, config: Dict[str, Any], key: str):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return BUILTIN[key]


def load_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    unknown = set(cfg) - set(BUILTIN)
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    return cfg


def reward_config(args, config) -> RewardConfig:
    return RewardConfig(
        alpha=resolve(args, config, "alpha"),
        eps_rg=resolve(args, config, "eps_rg"),
        beta=resolve(args, config, "beta"),
        sim_threshold=resolve(args, config, "sim_threshold"),
    )


def episode_config(args, config, temperature_default: float, workers: int = 1) -> EpisodeConfig:
    t = resolve(args, config, "temperature")
    return EpisodeConfig(
        input_resolution=resolve(args, config, "input_resolution"),
        crop_size=resolve(args, config, "crop_size"),
        temperature=temperature_default if t is None else t,
        max_new_tokens=resolve(args, config, "max_new_tokens"),
        max_crops=resolve(args, config, "max_crops"),
        workers=workers,
    )


def make_oracle(args, config) -> LexicalOracle:
    path = resolve(args, config, "lexicon")
    if path is None:
        return LexicalOracle()
    try:
        return LexicalOracle(SynonymLexicon.load(path))
    except OSError as exc:
        raise FileUnreadable(str(exc)) from exc


def _load_samples(path: str):
    errors: List[SchemaError] = []
    samples = load_dataset(path, errors)
    for e in errors:
        log.warning("%s: %s", path, e)
    return samples


def cmd_eval(args) -> int:
    config = load_config(args.config)
    reward_cfg = reward_config(args, config)
    ep_cfg = episode_config(args, config, defaults.EVAL_TEMPERATURE, resolve(args, config, "workers"))
    try:
        oracle = make_oracle(args, config)
        samples = _load_samples(args.dataset)
    except FileUnreadable as exc:
        print(f"cropzoom eval: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.transcripts:
        try:
            backend = scripted_backend(load_transcripts(args.transcripts))
        except (OSError, ValueError) as exc:
            print(f"cropzoom eval: transcripts: {exc}", file=sys.stderr)
            return EXIT_DATA
    else:
        backend = HttpBackend(
            args.endpoint,
            retries=resolve(args, config, "retries"),
            image_mode=resolve(args, config, "image_mode"),
        )
    recorder = RecordingBackend(backend) if args.record else None
    results = run_batch(samples, recorder or backend, ToolRegistry.with_stubs(), ep_cfg)
    report = aggregate_report(results, samples, oracle, reward_cfg.sim_threshold, ep_cfg.crop_size)
    sys.stdout.write(report.format_table())
    if args.report_json:
        with open(args.report_json, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
    if args.results_jsonl:
        with open(args.results_jsonl, "w", encoding="utf-8") as fh:
            for r in results:
                fh.write(json.dumps(r.summary(), sort_keys=True) + "\n")
    if recorder is not None:
        save_transcripts(recorder.table, args.record)
    if any(r.error and r.error.startswith(BackendUnavailable.__name__) for r in results):
        print("cropzoom eval: generation backend unreachable", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def _ablation_grid(spec: str):
    names = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = set(names) - {"rg", "iou"}
    if unknown or not names:
        raise ConfigError(f"--ablate takes a comma list from {{rg,iou}}, got {spec!r}")
    names = sorted(set(names), key=["rg", "iou"].index)
    grid = [()]
    for n in names:
        grid = grid + [g + (n,) for g in grid]
    return grid


def cmd_simulate(args) -> int:
    from . import simlab

    config = load_config(args.config)
    reward_cfg = reward_config(args, config)
    base = simlab.SimConfig()
    lr = resolve(args, config, "lr")
    grpo_cfg = GrpoConfig(
        clip_eps=resolve(args, config, "clip_eps"),
        gamma_kl=resolve(args, config, "gamma_kl"),
        group_size=resolve(args, config, "group_size"),
        learning_rate=base.grpo.learning_rate if lr is None else lr,
        std_floor=resolve(args, config, "std_floor"),
    )
    sim_cfg = replace(base, grpo=grpo_cfg, reward=reward_cfg)
    seed = resolve(args, config, "seed")
    steps = resolve(args, config, "steps")
    if steps < 0:
        raise ConfigError("--steps must be non-negative")
    scenes = simlab.default_suite(seed, resolve(args, config, "scenes"))
    if args.ablate:
        traces: dict = {}
        table = simlab.ablation_run(
            _ablation_grid(args.ablate), seed, steps, scenes, sim_cfg, resolve(args, config, "tail"), traces
        )
        sys.stdout.write(table.format_table())
        if args.table_json:
            with open(args.table_json, "w", encoding="utf-8") as fh:
                fh.write(table.to_json())
        if args.trace:
            with open(args.trace, "w", encoding="utf-8") as fh:
                for name, tr in traces.items():
                    for line in tr.to_jsonl().splitlines():
                        rec = json.loads(line)
                        rec["mask"] = name
                        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        failed = [t for t in traces.values() if t.error]
    else:
        n = len(simlab.cropping_questions(scenes))
        if resolve(args, config, "policy") == "gaussian":
            policy = simlab.GaussianCenterPolicy(n, scenes[0].resolution)
        else:
            policy = simlab.GridSoftmaxPolicy(n, scenes[0].resolution)
        trace = simlab.train_grpo(policy, scenes, sim_cfg, steps, seed)
        if args.trace:
            trace.write(args.trace)
        if trace.records:
            first, last = trace.records[0], trace.records[-1]
            print(
                f"steps={len(trace)} reward {first.mean_reward:.4f} -> {last.mean_reward:.4f}  "
                f"center distance {first.mean_center_distance:.1f} -> {last.mean_center_distance:.1f}"
            )
        else:
            print("steps=0 (empty trace)")
        failed = [trace] if trace.error else []
    if failed:
        print(f"cropzoom simulate: {failed[0].error}", file=sys.stderr)
        return EXIT_NONFINITE
    return EXIT_OK


def cmd_score(args) -> int:
    config = load_config(args.config)
    reward_cfg = reward_config(args, config)
    ep_cfg = episode_config(args, config, defaults.EVAL_TEMPERATURE)
    try:
        oracle = make_oracle(args, config)
        samples = _load_samples(args.sample)
        table = load_transcripts(args.transcript)
    except (FileUnreadable, OSError, ValueError) as exc:
        print(f"cropzoom score: {exc}", file=sys.stderr)
        return EXIT_DATA
    if args.sample_id:
        samples = [s for s in samples if s.sample_id == args.sample_id]
    if not samples:
        print("cropzoom score: no matching sample", file=sys.stderr)
        return EXIT_DATA
    sample = samples[0]
    # Transcripts keyed by a different id are accepted when only one sample is scored.
    ids = {sid for sid, _ in table}
    if sample.sample_id not in ids and len(ids) == 1:
        table = {(sample.sample_id, stage): text for (_, stage), text in table.items()}
    try:
        result = run_episode(sample, scripted_backend(table), ToolRegistry.with_stubs(), ep_cfg)
    except Exception as exc:
        print(f"cropzoom score: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    view = Resolution(*result.view_resolution)
    gt_view = scale_bbox(sample.bbox, sample.resolution, view) if sample.bbox is not None else None
    breakdown = score_stages(
        sample.kind, result.stage1, result.stage2, sample.answer, gt_view, oracle, reward_cfg,
        pred_bbox=result.proposal_bbox,
    )
    out = {"sample_id": sample.sample_id, **breakdown.as_dict(), "final_answer": result.final_answer}
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_parse_check(args) -> int:
    try:
        if args.file:
            with open(args.file, "rb") as fh:
                data = fh.read()
        else:
            data = sys.stdin.buffer.read()
    except OSError as exc:
        print(f"cropzoom parse-check: {exc}", file=sys.stderr)
        return EXIT_DATA
    parsed = parse_response(data)
    kind = TaskKind.for_level(args.level, downstream=args.downstream)
    out = {
        "think_blocks": len(parsed.think_blocks),
        "bbox_proposals": [{"bbox_2d": b.as_list(), "label": lab} for b, lab in parsed.bbox_proposals],
        "tool_call": (
            {"name": parsed.tool_call.name, "arguments": parsed.tool_call.arguments}
            if parsed.tool_call else None
        ),
        "tool_call_blocks": parsed.tool_call_blocks,
        "answers": parsed.answers,
        "task": kind.mode.value,
        "stage": args.stage,
        "pattern_valid": validate_pattern(parsed, kind, args.stage),
    }
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


COMMANDS = {"eval": cmd_eval, "simulate": cmd_simulate, "score": cmd_score, "parse-check": cmd_parse_check}


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"cropzoom {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
