"""Arm selection (UCB1 / Thompson sampling), action minimization and rewards.

Arms are flat: one per (action kind, size bucket, content source). Rewards
are binary and are only handed out after an attack finishes, once the
minimizer has worked out which applied actions were actually needed.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .bank import ContentBank
from .pe import InconsistentModel, MalformedPe, PeImage
from .transforms import (
    SHRINKABLE_KINDS,
    ActionKind,
    ActionSpec,
    TransformError,
    apply_sequence,
    with_size,
)

SIZE_MENU = (512, 2048, 8192)
EXTEND_MULTIPLIERS = (1, 2, 4)
DEFAULT_ARM_CAP = 64


class UnknownArm(KeyError):
    pass


@dataclass(frozen=True)
class Arm:
    id: int
    kind: Optional[ActionKind]
    # Bytes for injecting kinds, a FileAlignment multiple for extenddos, 0 if unsized.
    size_bucket: int = 0
    block_id: Optional[int] = None

    @property
    def label(self) -> str:
        if self.kind is None:
            return f"arm{self.id}"
        src = "random" if self.block_id is None else f"block{self.block_id}"
        return f"{self.kind.value}:{self.size_bucket}:{src}"

    @classmethod
    def from_label(cls, arm_id: int, label: str) -> "Arm":
        if label == f"arm{arm_id}":
            return cls(arm_id, None)
        kind, size, src = label.split(":")
        block = None if src == "random" else int(src[len("block"):])
        return cls(arm_id, ActionKind(kind), int(size), block)

    def make_spec(self, img: PeImage, seed: int) -> ActionSpec:
        """Concrete action for ``img``; only extenddos and editdos depend on the image."""
        if self.kind is None:
            raise ValueError("synthetic arms carry no action")
        size = self.size_bucket
        if self.kind is ActionKind.EXTEND_DOS:
            size = self.size_bucket * img.opt.file_alignment
        elif self.kind is ActionKind.EDIT_DOS:
            size = max(1, img.dos.e_lfanew - 6)
        return ActionSpec(self.kind, size, self.block_id, None, seed)


def build_arms(kinds: Iterable[ActionKind], bank: Optional[ContentBank] = None,
               seed: int = 0, cap: int = DEFAULT_ARM_CAP) -> list[Arm]:
    """Enumerate the arm space in a fixed order, so ids are stable for a given bank and seed."""
    wanted = set(kinds)
    sources: list[Optional[int]] = [None]
    if bank is not None and not bank.is_empty:
        block = int(np.random.default_rng([seed, 0xA2]).integers(len(bank.blocks)))
        sources = [block, None]
    combos = []
    for kind in ActionKind:
        if kind not in wanted:
            continue
        if kind is ActionKind.EXTEND_DOS:
            sizes = EXTEND_MULTIPLIERS
        elif kind in (ActionKind.PADDING, ActionKind.SECTION_ADD, ActionKind.SECTION_APPEND):
            sizes = SIZE_MENU
        else:
            sizes = (0,)
        srcs = [None] if kind is ActionKind.CODE_RANDOMIZE else sources
        combos += [(kind, s, b) for s in sizes for b in srcs]
    return [Arm(i, k, s, b) for i, (k, s, b) in enumerate(combos[:cap])]


@dataclass(frozen=True)
class ArmStats:
    pulls: int
    reward_sum: float
    alpha: float
    beta: float


@dataclass
class BanditState:
    arms: list
    sampler: str = "thompson"  # "thompson" | "ucb1"
    seed: int = 0
    ucb_c: float = 2.0
    prior: tuple = (1.0, 1.0)
    pulls: np.ndarray = field(default=None)
    reward_sum: np.ndarray = field(default=None)
    alpha: np.ndarray = field(default=None)
    beta: np.ndarray = field(default=None)
    log: list = field(default_factory=list, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    def __post_init__(self):
        if self.sampler not in ("thompson", "ucb1"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not self.arms:
            raise ValueError("bandit needs at least one arm")
        n = len(self.arms)
        if self.pulls is None:
            self.pulls = np.zeros(n, dtype=np.int64)
            self.reward_sum = np.zeros(n)
            self.alpha = np.full(n, float(self.prior[0]))
            self.beta = np.full(n, float(self.prior[1]))

    @classmethod
    def synthetic(cls, n_arms: int, **kw) -> "BanditState":
        return cls([Arm(i, None) for i in range(n_arms)], **kw)

    @property
    def total_pulls(self) -> int:
        return int(self.pulls.sum())

    def stats(self, arm_id: int) -> ArmStats:
        self._check(arm_id)
        return ArmStats(int(self.pulls[arm_id]), float(self.reward_sum[arm_id]),
                        float(self.alpha[arm_id]), float(self.beta[arm_id]))

    def copy(self) -> "BanditState":
        return BanditState(list(self.arms), self.sampler, self.seed, self.ucb_c, self.prior,
                           self.pulls.copy(), self.reward_sum.copy(), self.alpha.copy(),
                           self.beta.copy(), list(self.log))

    def header_lines(self) -> list[str]:
        return [f"sampler {self.sampler}"] + [f"arm {a.id} {a.label}" for a in self.arms]

    def _check(self, arm_id: int) -> None:
        if not 0 <= arm_id < len(self.arms):
            raise UnknownArm(arm_id)


def _pending(state: BanditState, pending: Optional[np.ndarray]) -> np.ndarray:
    return np.zeros(len(state.arms)) if pending is None else pending


def select_ucb1(state: BanditState, pending: Optional[np.ndarray] = None) -> Arm:
    """Highest ``mean + sqrt(c ln N / n)``; unpulled arms first, ties to the lowest id.

    ``pending`` counts pulls still awaiting a reward; they are treated as
    failures so one attack does not hammer a single arm.
    """
    with state._lock:
        p = _pending(state, pending)
        n = state.pulls + p
        unpulled = np.flatnonzero(n == 0)
        if unpulled.size:
            return state.arms[int(unpulled[0])]
        total = n.sum()
        index = state.reward_sum / n + np.sqrt(state.ucb_c * math.log(total) / n)
        return state.arms[int(np.argmax(index))]


def select_thompson(state: BanditState, rng: np.random.Generator,
                    pending: Optional[np.ndarray] = None) -> Arm:
    """Argmax of one Beta(alpha, beta) draw per arm."""
    with state._lock:
        theta = rng.beta(state.alpha, state.beta + _pending(state, pending))
        return state.arms[int(np.argmax(theta))]


def select(state: BanditState, rng: np.random.Generator,
           pending: Optional[np.ndarray] = None) -> Arm:
    if state.sampler == "ucb1":
        arm = select_ucb1(state, pending)
    else:
        arm = select_thompson(state, rng, pending)
    with state._lock:
        state.log.append(f"pull {arm.id}")
    return arm


def update(state: BanditState, arm, reward: int) -> BanditState:
    """Record one binary reward for ``arm`` (an Arm or an id). Mutates and returns ``state``."""
    arm_id = arm.id if isinstance(arm, Arm) else int(arm)
    if reward not in (0, 1):
        raise ValueError("rewards are binary")
    with state._lock:
        state._check(arm_id)
        state.pulls[arm_id] += 1
        state.reward_sum[arm_id] += reward
        state.alpha[arm_id] += reward
        state.beta[arm_id] += 1 - reward
        state.log.append(f"reward {arm_id} {reward}")
    return state


@dataclass
class TraceStep:
    spec: ActionSpec
    score_after: Optional[float] = None
    arm_id: Optional[int] = None
    pull_index: Optional[int] = None


@dataclass
class AttackTrace:
    """Applied actions in order. ``pulls`` lists every arm selected, including
    ones whose action was not applicable or was reverted."""
    steps: list
    initial_score: float
    evaded: bool
    threshold: float = 0.5
    pulls: list = field(default_factory=list)
    probes: int = 0

    @property
    def specs(self) -> list[ActionSpec]:
        return [s.spec for s in self.steps]

    @property
    def final_score(self) -> Optional[float]:
        return self.steps[-1].score_after if self.steps else self.initial_score


def minimize_trace(trace: AttackTrace, original: PeImage, oracle,
                   bank: Optional[ContentBank] = None) -> AttackTrace:
    """Drop actions the evasion does not need, then shrink the survivors.

    1. Macro: try omitting each action in turn; keep the omission if the
       rebuilt sample still evades.
    2. Micro: halve each shrinkable action's size while the sample still
       evades, keeping the last evasive size.
    3. Audit: one more single-deletion pass so the result is 1-minimal.

    Rebuilds that fail structurally count as non-evasive. The returned
    trace's last step carries the score of the minimized sample.
    """
    if not trace.evaded:
        raise ValueError("only evasive traces can be minimized")
    probes = 0

    def probe(steps) -> Optional[float]:
        nonlocal probes
        probes += 1
        try:
            img = apply_sequence(original, [s.spec for s in steps], bank)
        except (TransformError, MalformedPe, InconsistentModel):
            return None
        verdict = oracle.classify(img.raw)
        return None if verdict.detected else verdict.score

    def drop_pass(steps, score):
        i = 0
        while i < len(steps):
            cand = steps[:i] + steps[i + 1:]
            s = probe(cand)
            if s is not None:
                steps, score = cand, s
            else:
                i += 1
        return steps, score

    steps = [TraceStep(s.spec, None, s.arm_id, s.pull_index) for s in trace.steps]
    score = trace.final_score
    steps, score = drop_pass(steps, score)

    for i, step in enumerate(steps):
        spec = step.spec
        if spec.kind not in SHRINKABLE_KINDS:
            continue
        unit = original.opt.file_alignment if spec.kind is ActionKind.EXTEND_DOS else 1
        size = spec.size
        while size // 2 >= unit and (size // 2) % unit == 0:
            cand = list(steps)
            cand[i] = TraceStep(with_size(spec, size // 2), None, step.arm_id, step.pull_index)
            s = probe(cand)
            if s is None:
                break
            size, score = size // 2, s
        steps[i] = TraceStep(with_size(spec, size), None, step.arm_id, step.pull_index)

    steps, score = drop_pass(steps, score)
    if steps:
        steps[-1].score_after = score
    return AttackTrace(steps, trace.initial_score, True, trace.threshold,
                       list(trace.pulls), trace.probes + probes)


def assign_rewards(state: BanditState, minimized: AttackTrace) -> BanditState:
    """Reward 1 for every pull whose action survived minimization, 0 for the rest."""
    survivors = {s.pull_index for s in minimized.steps} if minimized.evaded else set()
    for j, arm_id in enumerate(minimized.pulls):
        update(state, arm_id, 1 if j in survivors else 0)
    return state


def replay(lines: Iterable[str]) -> BanditState:
    """Rebuild a BanditState from an event log (``arm``/``sampler`` header, then
    ``pull``/``reward`` records)."""
    arms, sampler, events = [], "thompson", []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        word, *rest = line.split()
        if word == "sampler":
            sampler = rest[0]
        elif word == "arm":
            arms.append(Arm.from_label(int(rest[0]), rest[1]))
        elif word in ("pull", "reward"):
            events.append((word, rest))
        else:
            raise ValueError(f"unrecognized log record: {line!r}")
    if not arms:
        top = max(int(r[0]) for _, r in events) if events else -1
        arms = [Arm(i, None) for i in range(top + 1)]
    state = BanditState(arms, sampler)
    for word, rest in events:
        if word == "pull":
            state._check(int(rest[0]))
            state.log.append(f"pull {rest[0]}")
        else:
            update(state, int(rest[0]), int(rest[1]))
    return state


def simulate(state: BanditState, payoff: Sequence[float], rounds: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Play ``rounds`` pulls against Bernoulli arms with success ``payoff[i]``.

    Rewards are drawn from a separate stream so both samplers face the same
    environment realisation for a given seed. Returns (choices, rewards).
    """
    env = np.random.default_rng(rng.integers(2**63))
    draws = env.random((rounds, len(payoff)))
    p = np.asarray(payoff)
    choices = np.empty(rounds, dtype=np.int64)
    rewards = np.empty(rounds, dtype=np.int64)
    for t in range(rounds):
        arm = select(state, rng)
        r = int(draws[t, arm.id] < p[arm.id])
        update(state, arm, r)
        choices[t], rewards[t] = arm.id, r
    return choices, rewards


def environment_payoff(arms: Sequence[Arm], good: Callable[[Arm], bool],
                       high: float = 0.8, low: float = 0.05) -> list[float]:
    return [high if good(a) else low for a in arms]
