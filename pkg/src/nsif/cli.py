"""Command-line entry point: gen, train, eval, robustness, report, selftest."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from nsif.agents import Agent, ConfigError, ExpertAgent
from nsif.config import RunConfig
from nsif.evalharness import (
    Report,
    aggregate,
    evaluate,
    read_results,
    report,
    robustness_records,
    robustness_table,
    write_results,
)
from nsif.neuralkit import CheckpointError
from nsif.pipeline import SPLIT_ALIASES, SPLIT_FILES, build_split, split_sizes, train_agent
from nsif.worldsim.dataset import read_episodes, write_episodes
from nsif.worldsim.types import Split

log = logging.getLogger("nsif")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3, 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; its values override flags")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsif", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate train/valid datasets")
    _add_common(p)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-valid-seen", type=int, default=None)
    p.add_argument("--n-valid-unseen", type=int, default=None)
    p.add_argument("--K", type=int, default=None, help="instruction variants per episode")

    p = sub.add_parser("train", help="train one agent")
    _add_common(p)
    p.add_argument("--agent", choices=("nsif", "s2spm"), required=True)
    p.add_argument("--data", type=Path, default=None, help="dataset directory (default: --out)")
    p.add_argument("--epochs", type=int, default=None)

    for name, helptext in (("eval", "per-subtask evaluation"), ("robustness", "paraphrase robustness table")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--agent", choices=("nsif", "s2spm", "expert"), required=True)
        p.add_argument("--split", choices=("seen", "unseen", "both"), default="both")
        p.add_argument("--data", type=Path, default=None)
        p.add_argument("--ckpt", type=Path, default=None, help="checkpoint (default: OUT/AGENT.npz)")
        p.add_argument("--budget", type=int, default=None)

    p = sub.add_parser("report", help="combine results files into subtask and robustness reports")
    _add_common(p)
    p.add_argument("results", nargs="*", type=Path, help="results files (default: OUT/results_*.jsonl)")

    p = sub.add_parser("selftest", help="run the built-in property and gradient checks")
    _add_common(p)
    return parser


def _run_config(args) -> RunConfig:
    overrides = {}
    for flag, key in (("seed", "seed"), ("workers", "workers"), ("n_train", "n_train"),
                      ("n_valid_seen", "n_valid_seen"), ("n_valid_unseen", "n_valid_unseen"),
                      ("K", "K"), ("budget", "budget")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "epochs", None) is not None:
        overrides["agent"] = {"epochs": args.epochs}
    cfg = RunConfig().merged(overrides)
    if args.config is not None:
        cfg = cfg.merged(json.loads(args.config.read_text(encoding="utf-8")))
    return cfg


def _splits(choice: str) -> List[Split]:
    return [Split.ValidSeen, Split.ValidUnseen] if choice == "both" else [SPLIT_ALIASES[choice]]


def cmd_gen(args, cfg: RunConfig) -> int:
    prov = cfg.provenance()
    for split, n in split_sizes(cfg).items():
        episodes = build_split(split, n, cfg.seed, cfg.K, cfg.workers)
        write_episodes(args.out / SPLIT_FILES[split], episodes, prov)
        log.info("wrote %d %s episodes", len(episodes), split.value)
    (args.out / "config.json").write_text(json.dumps({**cfg.to_dict(), **prov}, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = args.data or args.out
    episodes = read_episodes(data_dir / SPLIT_FILES[Split.TrainSeen])
    agent = train_agent(args.agent, episodes, cfg)
    agent.save(args.out / f"{args.agent}.npz", extra=cfg.provenance())
    log_path = args.out / f"{args.agent}_loss.json"
    log_path.write_text(json.dumps({"loss": agent.loss_log, **cfg.provenance()}, indent=2) + "\n")
    print(f"{args.agent}: final epoch loss {agent.loss_log[-1]:.4f}")
    return EXIT_OK


def _load_agent(args):
    if args.agent == "expert":
        return ExpertAgent()
    return Agent.load(args.ckpt or args.out / f"{args.agent}.npz")


def _evaluate(args, cfg: RunConfig):
    agent = _load_agent(args)
    data_dir = args.data or args.out
    prov = {**cfg.provenance(), "agent": args.agent}
    all_results = []
    for split in _splits(args.split):
        episodes = read_episodes(data_dir / SPLIT_FILES[split])
        results = evaluate(agent, episodes, cfg.K, cfg.budget, cfg.workers)
        write_results(args.out / f"results_{args.agent}_{split.value}.jsonl", results, prov)
        all_results.extend(results)
    return all_results


def _write_report(out: Path, stem: str, rep: Report) -> str:
    text = report(rep, "text")
    (out / f"{stem}.txt").write_text(text)
    (out / f"{stem}.json").write_text(report(rep, "json"))
    return text


def cmd_eval(args, cfg: RunConfig) -> int:
    results = _evaluate(args, cfg)
    rep = Report("subtask", {args.agent: aggregate(results)}, [cfg.seed], cfg.hash())
    print(_write_report(args.out, f"table1_{args.agent}", rep), end="")
    return EXIT_OK


def cmd_robustness(args, cfg: RunConfig) -> int:
    results = _evaluate(args, cfg)
    table = robustness_table(robustness_records(results, cfg.K))
    rep = Report("robustness", {args.agent: table}, [cfg.seed], cfg.hash())
    print(_write_report(args.out, f"table2_{args.agent}", rep), end="")
    return EXIT_OK


def _results_agent(path: Path) -> str:
    with path.open(encoding="utf-8") as fh:
        first = json.loads(fh.readline())
    return first.get("provenance", {}).get("agent") or path.stem.split("_")[1]


def cmd_report(args, cfg: RunConfig) -> int:
    paths = args.results or sorted(args.out.glob("results_*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"no results files under {args.out}")
    by_agent = {}
    for path in paths:
        by_agent.setdefault(_results_agent(path), []).extend(read_results(path))
    t1 = Report("subtask", {a: aggregate(r) for a, r in by_agent.items()}, [cfg.seed], cfg.hash())
    t2 = Report("robustness", {a: robustness_table(robustness_records(r)) for a, r in by_agent.items()},
                [cfg.seed], cfg.hash())
    print(_write_report(args.out, "table1", t1), end="")
    print(_write_report(args.out, "table2", t2), end="")
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    from nsif.selftest import run_selftest

    failures = run_selftest(print)
    return EXIT_OK if not failures else EXIT_FAIL


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "robustness": cmd_robustness,
            "report": cmd_report, "selftest": cmd_selftest}


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _run_config(args)
        if args.command != "selftest":
            args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"nsif: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"nsif: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
