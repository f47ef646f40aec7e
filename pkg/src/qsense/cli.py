"""Command-line harness: train, evaluate and compare agents.

Exit codes: 0 ok, 2 config error, 3 checkpoint mismatch, 4 budget-grid
mismatch, 5 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .agents import AgentError, PghAgent, RandomAgent, SigmaAgent, StaticScheduleAgent, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, architecture_matches
from .io import atomic_write_text, read_csv, write_csv
from .training import NumericalAbort, evaluate, train

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_GRID, EXIT_NUMERICAL = 0, 2, 3, 4, 5

RESULT_HEADER = ["budget", "mean", "median", "ci_low", "ci_high", "n_episodes", "agent", "seed"]
HISTORY_HEADER = ["iteration", "loss_mean", "loss_median", "grad_norm", "learning_rate", "n_failed"]
BASELINES = ("pgh", "sigma", "static", "random")

log = logging.getLogger("qsense")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(path) -> ExperimentConfig:
    try:
        return ExperimentConfig.load(path)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"config error: {exc}") from None


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    model = cfg.build_model()
    agent = cfg.build_agent(model)
    try:
        result = train(model, agent, cfg.training, cfg.training_budget(), cfg.build_loss(model),
                       cfg.particle_filter, seed=cfg.seed, log_every=args.log_every)
    except NumericalAbort as exc:
        raise CliError(EXIT_NUMERICAL, f"numerical abort: {exc}") from None
    out = Path(args.output_dir or cfg.output_dir)
    ckpt = out / "checkpoint.json"
    save_checkpoint(result.agent, ckpt)
    rows = [[r[k] for k in HISTORY_HEADER] for r in result.history]
    write_csv(out / "history.csv", HISTORY_HEADER, rows)
    print(f"wrote {ckpt} and {out / 'history.csv'}")
    return EXIT_OK


def _baseline_agent(name: str, model, cfg: ExperimentConfig):
    lo, hi = model.control_low, model.control_high
    if name == "pgh":
        return PghAgent(lo, hi)
    if name == "sigma":
        return SigmaAgent(lo, hi)
    if name == "random":
        return RandomAgent(lo, hi)
    return StaticScheduleAgent.constant(model.reference_control(), cfg.max_steps, lo, hi)


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    model = cfg.build_model()
    if args.checkpoint:
        try:
            agent = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError, AgentError) as exc:
            raise CliError(EXIT_CHECKPOINT, f"cannot load checkpoint: {exc}") from None
        if not architecture_matches(agent, cfg.build_agent(model)):
            raise CliError(EXIT_CHECKPOINT, "checkpoint architecture does not match the config")
        label = args.label or Path(args.checkpoint).stem
    else:
        agent = _baseline_agent(args.baseline, model, cfg)
        label = args.label or args.baseline
    ev = cfg.evaluation
    try:
        curve = evaluate(model, agent, cfg.budgets, ev.n_episodes, cfg.seed, cfg.particle_filter,
                         cfg.build_loss(model), cfg.max_steps, ev.n_bootstrap, ev.chunk_size)
    except NumericalAbort as exc:
        raise CliError(EXIT_NUMERICAL, f"numerical abort: {exc}") from None
    rows = [[p.budget, p.mean, p.median, p.ci_low, p.ci_high, p.n_episodes, label, cfg.seed] for p in curve]
    out = Path(args.output) if args.output else Path(cfg.output_dir) / f"results_{label}.csv"
    write_csv(out, RESULT_HEADER, rows)
    print(f"wrote {out}")
    return EXIT_OK


def _read_results(path) -> list[dict]:
    try:
        header, rows = read_csv(path)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {path}: {exc.strerror}") from None
    if header != RESULT_HEADER:
        raise CliError(EXIT_CONFIG, f"{path}: unexpected header {header}")
    return [{"budget": float(r["budget"]), "median": float(r["median"]), "ci_low": float(r["ci_low"]),
             "ci_high": float(r["ci_high"]), "agent": r["agent"]} for r in rows]


def compare_results(tables: list[list[dict]], names: list[str]) -> dict:
    """Compare every table against the first one, budget by budget.

    Lower loss is better.  A ``win`` means the candidate's median CI lies
    entirely below the reference CI, ``loss`` entirely above, ``tie`` otherwise.
    """
    grid = [r["budget"] for r in tables[0]]
    for name, table in zip(names[1:], tables[1:]):
        if [r["budget"] for r in table] != grid:
            raise CliError(EXIT_GRID, f"budget grid of {name} does not match {names[0]}")
    ref = tables[0]
    comparisons = []
    for name, table in zip(names[1:], tables[1:]):
        points = []
        counts = {"win": 0, "loss": 0, "tie": 0}
        for a, b in zip(ref, table):
            ratio = b["median"] / a["median"] if a["median"] != 0 else (1.0 if b["median"] == 0 else float("inf"))
            if b["ci_high"] < a["ci_low"]:
                verdict = "win"
            elif b["ci_low"] > a["ci_high"]:
                verdict = "loss"
            else:
                verdict = "tie"
            counts[verdict] += 1
            points.append({"budget": a["budget"], "ratio": ratio, "verdict": verdict,
                           "reference_median": a["median"], "median": b["median"]})
        comparisons.append({"file": name, "points": points, "summary": counts})
    return {"reference": names[0], "version": __version__, "comparisons": comparisons}


def cmd_compare(args) -> int:
    if len(args.results) < 2:
        raise CliError(EXIT_CONFIG, "compare needs at least two result files")
    tables = [_read_results(p) for p in args.results]
    summary = compare_results(tables, list(args.results))
    for comp in summary["comparisons"]:
        print(f"{comp['file']} vs {summary['reference']}")
        print(f"  {'budget':>12} {'ratio':>10} verdict")
        for p in comp["points"]:
            print(f"  {p['budget']:>12.6g} {p['ratio']:>10.4g} {p['verdict']}")
        s = comp["summary"]
        print(f"  wins {s['win']}  losses {s['loss']}  ties {s['tie']}")
    text = json.dumps(summary, indent=2)
    if args.output:
        atomic_write_text(args.output, text + "\n")
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qsense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the configured agent")
    p.add_argument("config")
    p.add_argument("--output-dir", help="override the config's output_dir")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint or a baseline on the budget grid")
    p.add_argument("config")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--baseline", choices=BASELINES)
    p.add_argument("--output", help="results CSV path")
    p.add_argument("--label", help="agent id written to the CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="compare result CSVs against the first one")
    p.add_argument("results", nargs="+")
    p.add_argument("--output", help="write the JSON summary here")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"qsense: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
