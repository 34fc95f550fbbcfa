"""``peevader`` command-line entry point.

Exit status: 0 on success, 1 on usage or configuration errors, 2 when the
work itself fails. Logs go to stderr; data goes to files or stdout.

A ``--config`` file holds flat ``key = value`` lines whose keys are the long
flag names of the chosen subcommand (dashes or underscores). Flags given on
the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bandit import DEFAULT_ARM_CAP, replay
from .bank import ContentBank, build_bank
from .campaign import (CampaignConfig, compare_samplers, read_outcomes, run_campaign,
                       summarize_outcomes)
from .corpusgen import generate_suite, write_suite
from .oracle import Oracle, OracleConfig, OracleFailure, filter_dataset, weight_digest
from .pe import MalformedPe, inspect_lines, parse_pe
from .transforms import ActionKind, ActionSpec, apply, check_equivalence

log = logging.getLogger("peevader")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _actions(text: str) -> tuple:
    try:
        return tuple(ActionKind(a.strip().lower()) for a in text.split(",") if a.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return value


def _positive(text: str) -> int:
    value = int(text, 0)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _threshold(text: str) -> float:
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError("threshold must lie strictly between 0 and 1")
    return value


def read_config(path: Path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment line."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _oracle_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--oracle", default="builtin", help="builtin | cmd:<command> | http:<url>")
    p.add_argument("--threshold", type=_threshold, default=0.5)
    p.add_argument("--timeout", type=float, default=30.0)


def _campaign_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset", nargs="?", type=Path, help="directory of candidate samples")
    _oracle_flags(p)
    p.add_argument("--bank", type=Path)
    p.add_argument("--sampler", choices=("thompson", "ucb1"), default="thompson")
    p.add_argument("--actions", type=_actions, default=tuple(ActionKind),
                   help="comma-separated action kinds (default: all)")
    p.add_argument("--max-iterations", type=_positive, default=20)
    p.add_argument("--max-actions-per-iteration", type=_positive, default=1)
    p.add_argument("--mode", choices=("combined", "isolation"), default="combined")
    p.add_argument("--fresh-bandit", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--arm-cap", type=_positive, default=DEFAULT_ARM_CAP)
    p.add_argument("--ucb-c", type=float, default=2.0)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("-o", "--output", type=Path)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="peevader", description="Functionality-preserving PE evasion toolkit")
    parser.add_argument("--version", action="version",
                        version=f"peevader {__version__} (scorer weights {weight_digest()})")
    parser.add_argument("--config", type=Path, help="key = value file of flag defaults")
    parser.add_argument("--log-level", default="WARNING",
                        choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    leaves: dict[str, argparse.ArgumentParser] = {}

    p = sub.add_parser("scan", help="score every file in a directory (CSV to stdout)")
    p.add_argument("directory", type=Path)
    _oracle_flags(p)
    leaves["scan"] = p

    p = sub.add_parser("filter", help="keep only the files the oracle detects")
    p.add_argument("directory", type=Path)
    _oracle_flags(p)
    p.add_argument("-o", "--output", type=Path, required=True)
    leaves["filter"] = p

    bank = sub.add_parser("bank", help="content bank tools")
    bsub = bank.add_subparsers(dest="bank_command", metavar="action", parser_class=_Parser)
    p = bsub.add_parser("build", help="harvest a bank from benign files")
    p.add_argument("directory", type=Path)
    p.add_argument("-o", "--output", type=Path, required=True)
    leaves["bank build"] = p

    p = sub.add_parser("transform", help="apply one action to one file")
    p.add_argument("file", type=Path)
    p.add_argument("--action", type=lambda s: ActionKind(s.lower()), required=True,
                   help=",".join(k.value for k in ActionKind))
    p.add_argument("--size", type=int, default=0)
    p.add_argument("--target", type=int)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--bank", type=Path)
    p.add_argument("--block", type=int, help="bank block to inject (default: chosen by seed)")
    p.add_argument("-o", "--output", type=Path, required=True)
    leaves["transform"] = p

    p = sub.add_parser("attack", help="run an evasion campaign")
    _campaign_flags(p)
    leaves["attack"] = p

    p = sub.add_parser("compare-sampling", help="run UCB1 and Thompson sampling side by side")
    _campaign_flags(p)
    p.add_argument("--rounds", type=_positive, help="attacks per sampler (default: one pass)")
    leaves["compare-sampling"] = p

    corpus = sub.add_parser("corpus", help="synthetic PE corpora")
    csub = corpus.add_subparsers(dest="corpus_command", metavar="action", parser_class=_Parser)
    p = csub.add_parser("gen", help="generate a labelled corpus")
    p.add_argument("--profile", choices=("malicious", "benign", "tight"), default="malicious")
    p.add_argument("-n", "--count", type=_positive, default=100)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("-o", "--output", type=Path, required=True)
    leaves["corpus gen"] = p

    p = sub.add_parser("replay", help="rebuild bandit state from an event log")
    p.add_argument("log", type=Path)
    leaves["replay"] = p

    p = sub.add_parser("report", help="recompute metrics from a campaign output directory")
    p.add_argument("outdir", type=Path)
    leaves["report"] = p

    pe = sub.add_parser("pe", help="PE inspection")
    psub = pe.add_subparsers(dest="pe_command", metavar="action", parser_class=_Parser)
    p = psub.add_parser("inspect", help="dump header fields")
    p.add_argument("file", type=Path)
    leaves["pe inspect"] = p

    return parser, leaves


def _apply_config(leaves: dict, values: dict) -> None:
    """Install config values as defaults; argparse converts string defaults with ``type``."""
    known = set()
    for p in leaves.values():
        dests = {a.dest: a for a in p._actions}
        hits = {}
        for key, value in values.items():
            if key in dests:
                hits[key] = _bool(value) if dests[key].const is True else value
                known.add(key)
        if hits:
            p.set_defaults(**hits)
            for key in hits:  # a config value satisfies a required flag
                dests[key].required = False
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")


def _leaf(args) -> str:
    cmd = args.command
    for attr in ("bank_command", "corpus_command", "pe_command"):
        if getattr(args, attr, None):
            cmd = f"{cmd} {getattr(args, attr)}"
    return cmd


def _oracle_config(args) -> OracleConfig:
    try:
        return OracleConfig.from_string(args.oracle, threshold=args.threshold, timeout=args.timeout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _campaign_config(args) -> CampaignConfig:
    if args.dataset is None:
        raise UsageError("a dataset directory is required")
    if not args.dataset.is_dir():
        raise UsageError(f"not a directory: {args.dataset}")
    if args.bank is not None and not args.bank.is_file():
        raise UsageError(f"bank not found: {args.bank}")
    cfg = CampaignConfig(
        dataset_dir=args.dataset, bank_path=args.bank, oracle=_oracle_config(args),
        sampler=args.sampler, max_iterations=args.max_iterations,
        actions_enabled=args.actions, max_actions_per_iteration=args.max_actions_per_iteration,
        seed=args.seed, workers=args.workers, mode=args.mode, fresh_bandit=args.fresh_bandit,
        arm_cap=args.arm_cap, ucb_c=args.ucb_c, output_dir=args.output)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_scan(args) -> int:
    oracle = Oracle(_oracle_config(args))
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["path", "score", "detected"])
    for path in sorted(p for p in args.directory.iterdir() if p.is_file()):
        try:
            v = oracle.classify(path.read_bytes())
        except (MalformedPe, OracleFailure) as exc:
            log.warning("%s: %s", path, exc)
            w.writerow([str(path), "nan", 0])
            continue
        w.writerow([str(path), f"{v.score:.6f}", int(v.detected)])
    return EXIT_OK


def cmd_filter(args) -> int:
    kept, dropped = filter_dataset(args.directory, Oracle(_oracle_config(args)))
    out = args.output
    (out / "kept").mkdir(parents=True, exist_ok=True)
    for e in kept:
        shutil.copyfile(e.path, out / "kept" / e.path.name)
    with open(out / "filter.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "score", "kept", "reason"])
        for e, flag in [(e, 1) for e in kept] + [(e, 0) for e in dropped]:
            w.writerow([e.path.name, "nan" if e.score is None else f"{e.score:.6f}", flag, e.reason])
    print(f"kept = {len(kept)}\ndropped = {len(dropped)}")
    return EXIT_OK


def cmd_bank_build(args) -> int:
    bank = build_bank(args.directory)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    bank.save(args.output)
    print(f"names = {len(bank.names)}\nblocks = {len(bank.blocks)}\ndigest = {bank.seed_digest}")
    return EXIT_OK


def cmd_transform(args) -> int:
    img = parse_pe(args.file.read_bytes())
    bank = ContentBank.load(args.bank) if args.bank else None
    block = args.block
    if block is None and bank is not None and not bank.is_empty:
        block = int(np.random.default_rng([args.seed, 0xB1]).integers(len(bank.blocks)))
    spec = ActionSpec(args.action, args.size, block, args.target, args.seed)
    out = apply(img, spec, bank)
    report = check_equivalence(img, out)
    if not report.ok:
        raise RuntimeError(f"equivalence check failed: {'; '.join(report.notes)}")
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_bytes(out.raw)
    print(f"action = {spec.label}\nsize_before = {len(img.raw)}\nsize_after = {len(out.raw)}")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _campaign_config(args)
    report = run_campaign(cfg)
    for label, g in report.groups.items():
        print(f"{label}: evaded {g.evaded}/{g.attacked} ({g.evasion_rate:.4f}), "
              f"mean iterations {g.mean_iterations:.2f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _campaign_config(args)
    comp = compare_samplers(cfg, args.rounds)
    for sampler, rate in comp.evasion_rates().items():
        print(f"{sampler}.evasion_rate = {rate:.4f}")
    return EXIT_OK


def cmd_corpus_gen(args) -> int:
    paths = write_suite(generate_suite(args.count, args.profile, args.seed), args.output)
    print(f"wrote {len(paths)} files to {args.output}")
    return EXIT_OK


def cmd_replay(args) -> int:
    state = replay(args.log.read_text().splitlines())
    print("arm,label,pulls,reward_sum,alpha,beta")
    for arm in state.arms:
        s = state.stats(arm.id)
        print(f"{arm.id},{arm.label},{s.pulls},{s.reward_sum:g},{s.alpha:g},{s.beta:g}")
    return EXIT_OK


def cmd_report(args) -> int:
    files = sorted(args.outdir.glob("outcomes_*.csv"))
    if not files:
        raise UsageError(f"no outcomes_*.csv in {args.outdir}")
    for path in files:
        group = path.stem[len("outcomes_"):]
        for key, value in summarize_outcomes(read_outcomes(path)).items():
            shown = f"{value:.4f}" if isinstance(value, float) else value
            print(f"group.{group}.{key} = {shown}")
    return EXIT_OK


def cmd_pe_inspect(args) -> int:
    print("\n".join(inspect_lines(parse_pe(args.file.read_bytes()))))
    return EXIT_OK


HANDLERS = {
    "scan": cmd_scan,
    "filter": cmd_filter,
    "bank build": cmd_bank_build,
    "transform": cmd_transform,
    "attack": cmd_attack,
    "compare-sampling": cmd_compare,
    "corpus gen": cmd_corpus_gen,
    "replay": cmd_replay,
    "report": cmd_report,
    "pe inspect": cmd_pe_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, leaves = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path)
    known, _ = pre.parse_known_args(argv)
    try:
        if known.config is not None:
            _apply_config(leaves, read_config(known.config))
    except UsageError as exc:
        print(f"peevader: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cmd = _leaf(args) if args.command else None
    if cmd not in HANDLERS:
        parser.print_usage(sys.stderr)
        print("peevader: error: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        return HANDLERS[cmd](args)
    except UsageError as exc:
        leaves[cmd].print_usage(sys.stderr)
        print(f"peevader: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure in the work maps to status 2
        log.debug("failure", exc_info=True)
        print(f"peevader: error: {type(exc).__name__}: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
