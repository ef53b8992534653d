"""Command-line entry point: ``lma3 {run,eval,finetune,report,replay,confusion}``."""

from __future__ import annotations

import argparse
import json
import logging
import random
import statistics
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .agent import (
    CONDITIONS,
    REGISTRY,
    REPLAY,
    TRAJECTORIES,
    ArchiveReplayer,
    GoalRegistry,
    RunConfig,
    read_archive,
    run,
)
from .gateway import BACKENDS, Gateway, GatewayError
from .metrics import (
    TIMESERIES_FIELDS,
    DiversityReport,
    diversity_timeseries,
    novelty,
    unique_goals,
    uniqueness_novelty,
    write_rows,
)
from .oracle import confusion_from_csv, eval_goals, evaluate_success, oracle_finetune
from .world import Trajectory, default_world

log = logging.getLogger("lma3")

FINETUNED = "registry_finetuned.json"
FLAG_KEYS = ("cot", "human_tips", "use_goal_generator")


class ConfigInvalid(ValueError):
    pass


class MissingArtifacts(FileNotFoundError):
    pass


def parse_seeds(text: str) -> list[int]:
    """``"1..5"``, ``"1,3,7"`` or ``"4"``."""
    seeds: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def load_config_file(path: str | Path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path}: top level must be a mapping")
    return data


def condition_for_flags(cot: bool, human_tips: bool, use_goal_generator: bool) -> str:
    for name, c in CONDITIONS.items():
        if not c.oracle_judges and (c.cot, c.human_tips, c.use_goal_generator) == (cot, human_tips, use_goal_generator):
            return name
    raise ConfigInvalid(f"no condition has cot={cot}, human_tips={human_tips}, use_goal_generator={use_goal_generator}")


def build_config(file_values: dict, overrides: dict) -> RunConfig:
    values = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    flags = {k: values.pop(k) for k in FLAG_KEYS if k in values}
    if flags:
        base = CONDITIONS.get(values.get("condition", ""), None)
        merged = {k: flags.get(k, getattr(base, k) if base else False) for k in FLAG_KEYS}
        implied = condition_for_flags(**{k: bool(v) for k, v in merged.items()})
        if "condition" in values and values["condition"] != implied:
            raise ConfigInvalid(f"flags {flags} contradict condition {values['condition']!r}")
        values["condition"] = implied
    if "seeds" in values and isinstance(values["seeds"], (str, int)):
        values["seeds"] = parse_seeds(str(values["seeds"]))
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
    if values.get("backend", "oracle") not in BACKENDS:
        raise ConfigInvalid(f"backend must be one of {BACKENDS}")
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc


def seed_dirs(run_dir: str | Path) -> list[Path]:
    root = Path(run_dir)
    if not root.is_dir():
        raise MissingArtifacts(f"{root} is not a run directory")
    found = sorted((p for p in root.glob("seed_*") if p.is_dir()), key=_seed_key)
    return found or [root]


def _seed_key(p: Path):
    tail = p.name.removeprefix("seed_")
    return (0, int(tail), "") if tail.isdigit() else (1, 0, tail)


def load_registry(seed_dir: Path, which: str = "registry") -> GoalRegistry:
    path = seed_dir / (FINETUNED if which == "finetuned" else REGISTRY)
    if not path.exists():
        if which == "finetuned":
            raise MissingArtifacts(f"{path} missing; run finetune first")
        log.warning("%s has no registry; treating it as empty", seed_dir)
        return GoalRegistry()
    return GoalRegistry.load(path)


def load_run_config(run_dir: Path) -> dict:
    path = run_dir / "config.json"
    if not path.exists() and (run_dir.parent / "config.json").exists():
        path = run_dir.parent / "config.json"
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        "condition": args.condition, "episodes": args.episodes,
        "seeds": parse_seeds(args.seeds) if args.seeds else None,
        "backend": args.backend, "model": args.model, "output_dir": args.output_dir,
        "cache_path": args.cache, "epsilon": args.epsilon,
        "bootstrap_episodes": args.bootstrap_episodes, "snapshot_every": args.snapshot_every,
        "workers": args.workers,
    }
    config = build_config(file_values, overrides)
    every = args.progress_every

    def progress(seed, episode, seed_run):
        if every and (episode % every == 0 or episode == config.episodes):
            print(f"[seed {seed}] episode {episode}/{config.episodes} "
                  f"goals={len(seed_run.registry)} lm_calls={len(seed_run.calls.records)}", flush=True)

    arts = run(config, resume=not args.fresh, progress=progress)
    stats = arts.gateway.stats if arts.gateway is not None else {"remote": 0, "cache": 0, "oracle": 0}
    for seed, reg in arts.registries.items():
        print(f"seed {seed}: {len(reg)} goals -> {arts.seed_dirs[seed]}")
    print("gateway calls: " + ", ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def _self_eval_gateway(args, cfg: dict) -> Gateway:
    backend = args.backend or cfg.get("backend") or "oracle"
    return Gateway.from_env(backend, cache_path=args.cache or cfg.get("cache_path"),
                            model=args.model or cfg.get("model"))


def cmd_eval(args) -> int:
    dirs = seed_dirs(args.run_dir)
    cfg = load_run_config(Path(args.run_dir))
    gateway = _self_eval_gateway(args, cfg) if args.judge == "lm" else None
    cot = CONDITIONS.get(cfg.get("condition", "lma3"), CONDITIONS["lma3"]).cot
    goals = eval_goals()
    rates = []
    print(f"{'seed':<12} {'goals':>6} {'success':>8}")
    for d in dirs:
        reg = load_registry(d, args.registry)
        if args.judge == "oracle":
            report = evaluate_success(reg, goals)
            name = "success_report.csv"
        else:
            report = evaluate_success(reg, reg.keys(), judge="lm", gateway=gateway, cot=cot,
                                      rng=random.Random(args.sample_seed), sample_size=args.sample)
            name = "self_eval_report.csv"
        report.write_csv(d / name)
        rates.append(report.success_rate)
        print(f"{d.name:<12} {len(report.outcomes):>6} {report.success_rate:>8.1%}")
    print(f"{'mean':<12} {'':>6} {statistics.fmean(rates):>8.1%}")
    return 0


def cmd_finetune(args) -> int:
    goals = eval_goals()
    rows = []
    print(f"{'seed':<12} {'before':>8} {'after':>8} {'goals':>11}")
    for d in seed_dirs(args.run_dir):
        if not (d / TRAJECTORIES).exists():
            raise MissingArtifacts(f"{d / TRAJECTORIES} missing")
        archive = list(read_archive(d))
        reg = load_registry(d)
        tuned = oracle_finetune(archive, reg, goals)
        tuned.save(d / FINETUNED)
        replayer = ArchiveReplayer(archive)
        pre = evaluate_success(reg, goals, world=replayer)
        post = evaluate_success(tuned, goals, world=replayer)
        rows.append({"seed": d.name, "before": pre.success_rate, "after": post.success_rate,
                     "goals_before": len(reg), "goals_after": len(tuned), "env_steps": replayer.env_steps})
        print(f"{d.name:<12} {pre.success_rate:>8.1%} {post.success_rate:>8.1%} {len(reg):>5}->{len(tuned):<5}")
        write_rows(d / "finetune.csv", rows[-1:], list(rows[-1]))
    return 0


def _mean_std(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 0.0
    return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0


REPORT_METRICS = ["n_goals", "D0", "D1", "h_index", "conjunction_ratio", "category_ratio",
                  "unique_ratio", "unique_novelty"]


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    per_seed: dict[tuple[str, str], dict] = {}
    goal_sets: dict[tuple[str, str], set[str]] = {}
    locations: dict[tuple[str, str], Path] = {}
    for run_dir in args.run_dirs:
        run_dir = Path(run_dir)
        cond = load_run_config(run_dir).get("condition") or run_dir.name
        for d in seed_dirs(run_dir):
            reg = load_registry(d, args.registry)
            key = (cond, d.name)
            goal_sets[key] = set(reg.keys())
            locations[key] = d
            per_seed[key] = DiversityReport.from_goals(reg.keys()).to_dict()
            discovered = {g: e.first_episode for g, e in reg.goals.items()}
            write_rows(d / "diversity_timeseries.csv", diversity_timeseries(discovered, args.every),
                       TIMESERIES_FIELDS)

    corpus = sorted(set().union(*goal_sets.values())) if goal_sets else []
    uniq = unique_goals(goal_sets) if len(goal_sets) >= 2 else {}
    for key, row in per_seed.items():
        u = uniq.get(key)
        row["unique_ratio"] = u.ratio if u else 0.0
        row["unique_novelty"] = uniqueness_novelty(u.unique, corpus) if u and len(corpus) >= 2 else 0.0
        rows = [{"goal": g, "novelty": novelty(g, corpus)} for g in sorted(u.unique)] if u else []
        write_rows(locations[key] / "uniqueness.csv", rows, ["goal", "novelty"])

    write_rows(out / "per_seed.csv", [{"condition": c, "seed": s, **r} for (c, s), r in per_seed.items()],
               ["condition", "seed", *REPORT_METRICS])
    conditions = list(dict.fromkeys(c for c, _ in per_seed))
    summary = []
    for cond in conditions:
        rows = [r for (c, _), r in per_seed.items() if c == cond]
        for m in REPORT_METRICS:
            mean, std = _mean_std([float(r[m]) for r in rows])
            summary.append({"condition": cond, "metric": m, "mean": mean, "std": std, "n_seeds": len(rows)})
    write_rows(out / "summary.csv", summary, ["condition", "metric", "mean", "std", "n_seeds"])

    width = max([len(c) for c in conditions] + [9])
    print(f"{'condition':<{width}} " + " ".join(f"{m:>19}" for m in REPORT_METRICS))
    for cond in conditions:
        cells = [s for s in summary if s["condition"] == cond]
        print(f"{cond:<{width}} " + " ".join(f"{s['mean']:>9.3f} ±{s['std']:>8.3f}" for s in cells))
    return 0


def cmd_replay(args) -> int:
    """Re-execute archived episodes and replay records; report any divergence."""
    world = default_world()
    bad = 0
    checked = 0
    for d in seed_dirs(args.run_dir):
        if args.seed is not None and d.name != f"seed_{args.seed}":
            continue
        if not (d / TRAJECTORIES).exists():
            raise MissingArtifacts(f"{d / TRAJECTORIES} missing")
        archive = {rec["episode"]: Trajectory.from_records(rec["steps"]) for rec in read_archive(d)}
        episodes = [args.episode] if args.episode is not None else sorted(archive)
        for ep in episodes:
            if ep not in archive:
                raise MissingArtifacts(f"{d.name} has no episode {ep}")
            stored = archive[ep]
            again = world.rollout(stored.actions)
            checked += 1
            if again.to_records() != stored.to_records():
                bad += 1
                print(f"{d.name} episode {ep}: replay diverges")
            if args.episode is not None and args.show:
                from .prompts import serialize_trajectory

                print(serialize_trajectory(again))
        if (d / REPLAY).exists() and args.episode is None:
            with open(d / REPLAY, encoding="utf-8") as fh:
                for line in fh:
                    rec = json.loads(line)
                    src = archive.get(rec["episode"])
                    n = len(rec["actions"])
                    checked += 1
                    if src is None or world.rollout(rec["actions"]).to_records() != src.prefix(n).to_records():
                        bad += 1
                        print(f"{d.name} replay record {rec['goal']!r} (episode {rec['episode']}) diverges")
    print(f"checked {checked} trajectories, {bad} divergent")
    return 1 if bad else 0


def cmd_confusion(args) -> int:
    cm = confusion_from_csv(args.verdicts, args.labels)
    print(cm.as_table())
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lma3", description="Autotelic agent experiments in a text kitchen.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="launch or resume a multi-seed run")
    p.add_argument("--config", help="JSON or YAML file with run settings")
    p.add_argument("--condition", choices=sorted(CONDITIONS))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", help="e.g. 1..5 or 1,2,3")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--model")
    p.add_argument("--output-dir")
    p.add_argument("--cache", help="response cache (JSONL)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--bootstrap-episodes", type=int)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.add_argument("--progress-every", type=int, default=1, help="0 silences progress lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="success rates from stored sequences")
    p.add_argument("run_dir")
    p.add_argument("--judge", choices=("oracle", "lm"), default="oracle")
    p.add_argument("--registry", choices=("registry", "finetuned"), default="registry")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--cache")
    p.add_argument("--model")
    p.add_argument("--sample", type=int, default=200)
    p.add_argument("--sample-seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="oracle relabel sweep over the archive")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="diversity and uniqueness tables")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out", default="report")
    p.add_argument("--registry", choices=("registry", "finetuned"), default="registry")
    p.add_argument("--every", type=int, default=100)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("replay", help="check archived episodes replay identically")
    p.add_argument("run_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--episode", type=int)
    p.add_argument("--show", action="store_true", help="print the replayed episode")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("confusion", help="judge verdicts vs human labels")
    p.add_argument("verdicts", help="CSV of (trajectory-id, verdict)")
    p.add_argument("labels", help="CSV of (trajectory-id, label)")
    p.set_defaults(func=cmd_confusion)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigInvalid as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return 2
    except MissingArtifacts as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return 1
    except GatewayError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
