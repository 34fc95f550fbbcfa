"""UCB1 and Thompson sampling on the same Bernoulli environment."""
import numpy as np

from peevader.bandit import BanditState, build_arms, environment_payoff, simulate
from peevader.transforms import ActionKind

payoff = [0.8, 0.2, 0.2]
for sampler in ("ucb1", "thompson"):
    state = BanditState.synthetic(3, sampler=sampler)
    choices, rewards = simulate(state, payoff, 1000, np.random.default_rng(0))
    share = (choices[-100:] == 0).mean()
    print(f"{sampler:8s} best arm in last 100 rounds: {share:.0%}, total reward {rewards.sum()}")

# One action kind pays off often, all others rarely, spread over the whole arm space.
arms = build_arms(list(ActionKind))
env = environment_payoff(arms, lambda a: a.kind is ActionKind.SECTION_ADD)
for sampler in ("ucb1", "thompson"):
    totals = [simulate(BanditState(arms, sampler), env, 1000, np.random.default_rng(s))[1].sum()
              for s in range(10)]
    print(f"{sampler:8s} mean successes over {len(arms)} arms: {np.mean(totals):.0f}")
