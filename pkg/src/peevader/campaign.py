"""End-to-end attacks over a dataset, plus the per-action statistics.

Output directory layout written by :func:`write_report`::

    outcomes_<group>.csv   one row per attacked sample
    histogram.csv          group,iterations,count
    summary.txt            key = value lines
    bandit_<group>.log     arm header plus pull/reward events
    adv_<group>/<sha256>.adv  minimized evasive samples

``<group>`` is ``combined`` or, in isolation mode, the action kind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .bandit import (
    DEFAULT_ARM_CAP,
    AttackTrace,
    BanditState,
    TraceStep,
    assign_rewards,
    build_arms,
    minimize_trace,
    select,
)
from .bank import ContentBank
from .oracle import Oracle, OracleConfig, OracleFailure, filter_dataset, weight_digest
from .pe import InconsistentModel, MalformedPe, PeImage, parse_pe
from .transforms import (
    ActionKind,
    NotApplicable,
    TransformError,
    apply,
    apply_sequence,
    check_equivalence,
)

log = logging.getLogger(__name__)

CSV_HEADER = ["sample", "initial_score", "final_score", "evaded", "iterations",
              "first_iter", "no_improve", "broken", "queries", "actions"]


class EmptyDataset(ValueError):
    pass


@dataclass
class CampaignConfig:
    dataset_dir: Optional[Path] = None
    bank_path: Optional[Path] = None
    oracle: OracleConfig = field(default_factory=OracleConfig)
    sampler: str = "thompson"
    max_iterations: int = 20
    actions_enabled: tuple = tuple(ActionKind)
    max_actions_per_iteration: int = 1
    seed: int = 0
    workers: int = 1
    mode: str = "combined"  # "combined" | "isolation"
    fresh_bandit: bool = False
    arm_cap: int = DEFAULT_ARM_CAP
    ucb_c: float = 2.0
    output_dir: Optional[Path] = None

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.actions_enabled:
            raise ValueError("at least one action must be enabled")
        self.actions_enabled = tuple(ActionKind(a) for a in self.actions_enabled)
        if self.sampler not in ("thompson", "ucb1"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.mode not in ("combined", "isolation"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.max_actions_per_iteration < 1:
            raise ValueError("max_actions_per_iteration must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class SampleOutcome:
    sample: str
    initial_score: float
    final_score: float
    evaded: bool
    iterations_used: int
    first_iteration_evasion: bool
    no_improvement: bool
    broken: bool
    minimized_actions: list
    queries: int
    error: Optional[str] = None

    def csv_row(self) -> list[str]:
        return [
            self.sample,
            f"{self.initial_score:.6f}",
            f"{self.final_score:.6f}",
            str(int(self.evaded)),
            str(self.iterations_used),
            str(int(self.first_iteration_evasion)),
            str(int(self.no_improvement)),
            str(int(self.broken)),
            str(self.queries),
            ";".join(s.label for s in self.minimized_actions),
        ]


class _CountingOracle:
    """Per-sample query counter in front of a shared oracle."""

    def __init__(self, oracle: Oracle):
        self.oracle = oracle
        self.threshold = oracle.threshold
        self.queries = 0

    def classify(self, data: bytes):
        self.queries += 1
        return self.oracle.classify(data)


def sample_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _streams(seed: int, sid: str, group: int) -> tuple[np.random.Generator, np.random.Generator]:
    base = [seed, int(sid[:16], 16), group]
    return np.random.default_rng(base + [1]), np.random.default_rng(base + [2])


def attack_sample(img: PeImage, cfg: CampaignConfig, state: BanditState,
                  bank: Optional[ContentBank], oracle: Oracle,
                  select_rng: Optional[np.random.Generator] = None,
                  seed_rng: Optional[np.random.Generator] = None,
                  ) -> tuple[SampleOutcome, AttackTrace]:
    """Attack one detected sample; rewards are posted to ``state`` at the end.

    Each iteration pulls ``cfg.max_actions_per_iteration`` arms and applies
    them cumulatively. Actions that raise (other than NotApplicable) or fail
    the equivalence check mark the sample broken and are reverted.
    """
    sid = sample_id(img.raw)
    if select_rng is None or seed_rng is None:
        select_rng, seed_rng = _streams(cfg.seed, sid, 0)
    counter = _CountingOracle(oracle)
    threshold = oracle.threshold

    try:
        initial = counter.classify(img.raw)
    except OracleFailure as exc:
        outcome = SampleOutcome(sid, float("nan"), float("nan"), False, 0, False, True,
                                False, [], counter.queries, str(exc))
        return outcome, AttackTrace([], float("nan"), False, threshold)

    current = img
    steps: list[TraceStep] = []
    pulls: list[int] = []
    pending = np.zeros(len(state.arms))
    score = best = initial.score
    evaded = broken = False
    used = 0
    error = None
    try:
        for it in range(1, cfg.max_iterations + 1):
            used = it
            changed = False
            for _ in range(cfg.max_actions_per_iteration):
                arm = select(state, select_rng, pending)
                pending[arm.id] += 1
                pulls.append(arm.id)
                spec = arm.make_spec(current, int(seed_rng.integers(2**63)))
                try:
                    candidate = apply(current, spec, bank)
                except NotApplicable:
                    continue
                except (TransformError, MalformedPe, InconsistentModel) as exc:
                    log.debug("sample %s: %s broke: %s", sid[:12], spec.label, exc)
                    broken = True
                    continue
                if not check_equivalence(img, candidate).ok:
                    broken = True
                    continue
                current = candidate
                steps.append(TraceStep(spec, None, arm.id, len(pulls) - 1))
                changed = True
            if not changed:
                continue
            verdict = counter.classify(current.raw)
            steps[-1].score_after = score = verdict.score
            best = min(best, score)
            if not verdict.detected:
                evaded = True
                break
        trace = AttackTrace(steps, initial.score, evaded, threshold, pulls)
        if evaded:
            trace = minimize_trace(trace, img, counter, bank)
            score = trace.final_score
    except OracleFailure as exc:
        error = str(exc)
        evaded = False
        trace = AttackTrace(steps, initial.score, False, threshold, pulls)
    assign_rewards(state, trace)

    outcome = SampleOutcome(
        sample=sid,
        initial_score=initial.score,
        final_score=score,
        evaded=evaded,
        iterations_used=used if evaded else cfg.max_iterations,
        first_iteration_evasion=evaded and used == 1,
        no_improvement=best >= initial.score,
        broken=broken,
        minimized_actions=trace.specs if evaded else [],
        queries=counter.queries,
        error=error,
    )
    return outcome, trace


@dataclass
class GroupResult:
    label: str
    max_iterations: int
    outcomes: list = field(default_factory=list)
    event_log: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)  # sample id -> adversarial bytes

    @property
    def attacked(self) -> int:
        return len(self.outcomes)

    @property
    def evaded(self) -> int:
        return sum(o.evaded for o in self.outcomes)

    def _rate(self, flag: str) -> float:
        return sum(getattr(o, flag) for o in self.outcomes) / self.attacked if self.outcomes else 0.0

    @property
    def evasion_rate(self) -> float:
        return self._rate("evaded")

    @property
    def no_improvement_rate(self) -> float:
        return self._rate("no_improvement")

    @property
    def first_iteration_rate(self) -> float:
        return self._rate("first_iteration_evasion")

    @property
    def broken_rate(self) -> float:
        return self._rate("broken")

    @property
    def mean_iterations(self) -> float:
        its = [o.iterations_used for o in self.outcomes if o.evaded]
        return float(np.mean(its)) if its else float("nan")

    @property
    def queries(self) -> int:
        return sum(o.queries for o in self.outcomes)

    def histogram(self) -> list[int]:
        counts = [0] * self.max_iterations
        for o in self.outcomes:
            if o.evaded:
                counts[o.iterations_used - 1] += 1
        return counts


@dataclass
class CampaignReport:
    sampler: str
    seed: int
    groups: dict
    kept: int = 0
    dropped: int = 0
    dropped_reasons: dict = field(default_factory=dict)
    oracle: str = "builtin"

    @property
    def outcomes(self) -> list[SampleOutcome]:
        return [o for g in self.groups.values() for o in g.outcomes]


def iteration_histogram(report: CampaignReport, action: Union[ActionKind, str, None] = None) -> list[int]:
    """Evaded-sample counts by iterations used, buckets 1..max_iterations.

    ``action`` names a group (an action kind in isolation mode, or
    "combined"); None sums every group.
    """
    if action is None:
        groups = list(report.groups.values())
    else:
        key = action.value if isinstance(action, ActionKind) else str(action)
        groups = [report.groups[key]]
    total = np.zeros(groups[0].max_iterations, dtype=int)
    for g in groups:
        total += np.array(g.histogram())
    return total.tolist()


def _load_bank(cfg: CampaignConfig) -> Optional[ContentBank]:
    return ContentBank.load(cfg.bank_path) if cfg.bank_path else None


def _attack_group(label: str, group_index: int, kinds: Sequence[ActionKind], samples,
                  cfg: CampaignConfig, bank: Optional[ContentBank], oracle: Oracle) -> GroupResult:
    arms = build_arms(kinds, bank, cfg.seed, cfg.arm_cap)

    def fresh() -> BanditState:
        return BanditState(arms, cfg.sampler, cfg.seed, cfg.ucb_c)

    shared = fresh()
    result = GroupResult(label, cfg.max_iterations, event_log=shared.header_lines())

    def run_one(img: PeImage):
        state = fresh() if cfg.fresh_bandit else shared
        sel, seeds = _streams(cfg.seed, sample_id(img.raw), group_index)
        outcome, trace = attack_sample(img, cfg, state, bank, oracle, sel, seeds)
        art = apply_sequence(img, trace.specs, bank).raw if outcome.evaded else None
        return outcome, state, art

    if cfg.workers == 1:
        results = [run_one(img) for img in samples]
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run_one, samples))
    for outcome, state, art in results:
        result.outcomes.append(outcome)
        if art is not None:
            result.artifacts[outcome.sample] = art
        if cfg.fresh_bandit:
            result.event_log += state.log
    if not cfg.fresh_bandit:
        result.event_log += shared.log
    ev = result.evaded
    log.info("%s: %d/%d evaded", label, ev, result.attacked)
    return result


def run_campaign(cfg: CampaignConfig, oracle: Optional[Oracle] = None,
                 rounds: Optional[int] = None) -> CampaignReport:
    """Filter the dataset, attack every kept sample and aggregate.

    ``rounds`` cycles through the kept samples until that many attacks have
    run (the default is one pass). Results are reproducible for a fixed seed
    when ``workers == 1``.
    """
    cfg.validate()
    oracle = oracle or Oracle(cfg.oracle)
    kept, dropped = filter_dataset(cfg.dataset_dir, oracle)
    if not kept:
        raise EmptyDataset(f"no detected samples in {cfg.dataset_dir}")
    images = [parse_pe(e.path.read_bytes()) for e in kept]
    if rounds is not None:
        images = [images[i % len(images)] for i in range(rounds)]
    bank = _load_bank(cfg)

    if cfg.mode == "isolation":
        plan = [(k.value, (k,)) for k in cfg.actions_enabled]
    else:
        plan = [("combined", cfg.actions_enabled)]
    groups = {}
    for gi, (label, kinds) in enumerate(plan):
        groups[label] = _attack_group(label, gi, kinds, images, cfg, bank, oracle)

    reasons: dict[str, int] = {}
    for d in dropped:
        key = d.reason.split(":")[0]
        reasons[key] = reasons.get(key, 0) + 1
    oracle_label = cfg.oracle.backend if cfg.oracle.backend == "builtin" else f"{cfg.oracle.backend}:{cfg.oracle.target}"
    report = CampaignReport(cfg.sampler, cfg.seed, groups, len(kept), len(dropped), reasons, oracle_label)
    if cfg.output_dir is not None:
        write_report(report, cfg.output_dir)
    return report


def outcomes_csv(outcomes: Sequence[SampleOutcome]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for o in outcomes:
        w.writerow(o.csv_row())
    return buf.getvalue()


def histogram_csv(report: CampaignReport) -> str:
    lines = ["group,iterations,count"]
    for label, g in report.groups.items():
        lines += [f"{label},{i},{c}" for i, c in enumerate(g.histogram(), start=1)]
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.4f}"


def summary_text(report: CampaignReport) -> str:
    lines = [
        f"sampler = {report.sampler}",
        f"seed = {report.seed}",
        f"oracle = {report.oracle}",
        f"scorer_weights = {weight_digest()}",
        f"dataset.kept = {report.kept}",
        f"dataset.dropped = {report.dropped}",
    ]
    lines += [f"dataset.dropped.{k} = {v}" for k, v in sorted(report.dropped_reasons.items())]
    for label, g in report.groups.items():
        p = f"group.{label}"
        lines += [
            f"{p}.attacked = {g.attacked}",
            f"{p}.evaded = {g.evaded}",
            f"{p}.evasion_rate = {_fmt(g.evasion_rate)}",
            f"{p}.no_improvement_rate = {_fmt(g.no_improvement_rate)}",
            f"{p}.mean_iterations = {_fmt(g.mean_iterations)}",
            f"{p}.first_iteration_rate = {_fmt(g.first_iteration_rate)}",
            f"{p}.broken_rate = {_fmt(g.broken_rate)}",
            f"{p}.queries = {g.queries}",
        ]
    return "\n".join(lines) + "\n"


def write_report(report: CampaignReport, outdir: Union[str, Path]) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for label, g in report.groups.items():
        (outdir / f"outcomes_{label}.csv").write_text(outcomes_csv(g.outcomes))
        (outdir / f"bandit_{label}.log").write_text("\n".join(g.event_log) + "\n")
        if g.artifacts:
            adv = outdir / f"adv_{label}"
            adv.mkdir(exist_ok=True)
            for sid, data in sorted(g.artifacts.items()):
                (adv / f"{sid}.adv").write_bytes(data)
    (outdir / "histogram.csv").write_text(histogram_csv(report))
    (outdir / "summary.txt").write_text(summary_text(report))


def read_outcomes(path: Union[str, Path]) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return list(reader)


def summarize_outcomes(rows: Sequence[dict]) -> dict:
    """Recompute the headline metrics from CSV rows."""
    n = len(rows)
    evaded = [r for r in rows if r["evaded"] == "1"]
    its = [int(r["iterations"]) for r in evaded]
    return {
        "attacked": n,
        "evaded": len(evaded),
        "evasion_rate": len(evaded) / n if n else 0.0,
        "no_improvement_rate": sum(r["no_improve"] == "1" for r in rows) / n if n else 0.0,
        "mean_iterations": float(np.mean(its)) if its else float("nan"),
        "first_iteration_rate": sum(r["first_iter"] == "1" for r in rows) / n if n else 0.0,
        "broken_rate": sum(r["broken"] == "1" for r in rows) / n if n else 0.0,
    }


@dataclass
class SamplerComparison:
    reports: dict  # sampler -> CampaignReport
    curves: dict  # sampler -> cumulative evasions after each attack

    def evasion_rates(self) -> dict:
        return {s: r.groups[next(iter(r.groups))].evasion_rate for s, r in self.reports.items()}


def compare_samplers(cfg: CampaignConfig, rounds: Optional[int] = None,
                     oracle: Optional[Oracle] = None) -> SamplerComparison:
    """Run the same campaign under UCB1 and Thompson sampling, all else equal.

    ``rounds`` defaults to one pass over the detected samples.
    """
    if rounds is not None and rounds < 1:
        raise ValueError("rounds must be >= 1")
    reports, curves = {}, {}
    for sampler in ("ucb1", "thompson"):
        sub = CampaignConfig(**{**cfg.__dict__, "sampler": sampler, "output_dir": None})
        rep = run_campaign(sub, oracle, rounds)
        reports[sampler] = rep
        flags = [o.evaded for o in rep.outcomes]
        curves[sampler] = np.cumsum(flags).tolist()
    comp = SamplerComparison(reports, curves)
    if cfg.output_dir is not None:
        write_comparison(comp, cfg.output_dir)
    return comp


def write_comparison(comp: SamplerComparison, outdir: Union[str, Path]) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    samplers = list(comp.curves)
    lines = ["round," + ",".join(samplers)]
    for i in range(len(comp.curves[samplers[0]])):
        lines.append(f"{i + 1}," + ",".join(str(comp.curves[s][i]) for s in samplers))
    (outdir / "sampling.csv").write_text("\n".join(lines) + "\n")
    rates = comp.evasion_rates()
    (outdir / "sampling_summary.txt").write_text(
        "".join(f"{s}.evasion_rate = {_fmt(rates[s])}\n" for s in samplers))
    for s, rep in comp.reports.items():
        write_report(rep, outdir / s)
