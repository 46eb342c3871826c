"""Risk-seeking policy over operator sequences.

Each tree slot gets one trainable logit vector; sequences are drawn per
slot with epsilon-greedy exploration and rewarded by the inverse of their
coarse-tuned loss.  Updates ascend a quantile-filtered surrogate, so only
sequences at or above the batch quantile pull on the distribution and low
scorers are never punished.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import expr as ex
from .problems import Problem, SampleBatch
from .tuner import TuneFlags, TuneSchedule, coarse_tune

DEFAULT_EPSILON = 0.1
DEFAULT_NU = 0.25
DEFAULT_POLICY_LR = 0.05


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True, eq=False)
class Policy:
    """Per-slot categorical distributions in logit form."""

    logits: tuple
    lr: float = DEFAULT_POLICY_LR
    epsilon: float = DEFAULT_EPSILON
    nu: float = DEFAULT_NU

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if not 0.0 < self.nu < 1.0:
            raise ValueError("nu must lie in (0, 1)")
        if not self.lr > 0.0:
            raise ValueError("lr must be > 0")

    @property
    def n_slots(self) -> int:
        return len(self.logits)

    def pmfs(self) -> tuple:
        return tuple(softmax(z) for z in self.logits)


def make_policy(shape: ex.TreeShape, library: ex.OperatorLibrary | None = None,
                lr: float = DEFAULT_POLICY_LR,
                epsilon: float = DEFAULT_EPSILON,
                nu: float = DEFAULT_NU) -> Policy:
    """Uniform initial policy: zero logits for every slot."""
    if library is None:
        library = ex.default_library()
    sizes = ex.slot_sizes(shape, library)
    return Policy(tuple(np.zeros(k) for k in sizes), lr, epsilon, nu)


def sample(policy: Policy, rng: np.random.Generator) -> tuple:
    """One operator sequence; per slot, explore uniformly with probability
    epsilon, otherwise draw from the slot's softmax distribution."""
    ops = []
    for z in policy.logits:
        k = len(z)
        if rng.random() < policy.epsilon:
            ops.append(int(rng.integers(k)))
        else:
            ops.append(int(rng.choice(k, p=softmax(z))))
    return tuple(ops)


def score_value(loss_total: float) -> float:
    """Reward map 1/(1+L): strictly decreasing in the loss, 0 for poisoned
    (non-finite) losses."""
    if not np.isfinite(loss_total):
        return 0.0
    return 1.0 / (1.0 + float(loss_total))


@dataclass(frozen=True, eq=False)
class ScoredSequence:
    """A sequence with its coarse-tuned loss, reward, and tuned snapshot."""

    ops: tuple
    score: float
    loss: float
    expression: ex.Expression | None

    def __post_init__(self):
        if self.score != score_value(self.loss):
            raise ValueError("score must equal 1/(1+loss)")


def scored(ops, loss_total: float,
           expression: ex.Expression | None) -> ScoredSequence:
    return ScoredSequence(tuple(ops), score_value(loss_total),
                          float(loss_total), expression)


def score(sequence, problem: Problem, batch: SampleBatch,
          schedule: TuneSchedule, rng: np.random.Generator,
          shape: ex.TreeShape | None = None,
          library: ex.OperatorLibrary | None = None,
          flags: TuneFlags | None = None) -> ScoredSequence:
    """Build an expression for the sequence, coarse-tune it, and reward it.

    rng seeds the fresh weight/bias initialization; candidate failures are
    contained by coarse_tune as an infinite loss, hence score 0.
    """
    if library is None:
        library = ex.default_library()
    if shape is None:
        shape = ex.TreeShape((len(sequence) + 1) // 3)
    candidate = ex.build_expression(shape, tuple(sequence), problem.d,
                                    library, rng)
    tuned, loss_total = coarse_tune(candidate, problem, batch, schedule,
                                    flags=flags)
    return scored(sequence, loss_total, tuned)


@dataclass(frozen=True)
class UpdateInfo:
    """Outcome of one policy update: the batch quantile, how many sequences
    made the cut, and whether the update degenerated to a no-op."""

    quantile: float
    n_retained: int
    no_op: bool


def update(policy: Policy, batch) -> tuple:
    """Ascend the risk-seeking surrogate on a batch of scored sequences.

    Sequences scoring below the (1-nu) empirical quantile contribute
    nothing; ties at the quantile are retained with zero advantage but
    count toward the normalization.  An all-zero batch (every candidate
    poisoned) leaves the policy untouched and is flagged.
    """
    batch = list(batch)
    if len(batch) < 2:
        raise ValueError("need at least two scored sequences")
    for s in batch:
        if len(s.ops) != policy.n_slots:
            raise ValueError("sequence length does not match the policy")
    scores = np.array([s.score for s in batch], dtype=float)
    if not np.any(scores > 0.0):
        return policy, UpdateInfo(0.0, 0, True)
    s_nu = float(np.quantile(scores, 1.0 - policy.nu))
    retained = [s for s in batch if s.score >= s_nu]
    pmfs = policy.pmfs()
    grads = [np.zeros_like(z) for z in policy.logits]
    for s in retained:
        adv = s.score - s_nu
        for k, op in enumerate(s.ops):
            grads[k][op] += adv
            grads[k] -= adv * pmfs[k]
    n = len(retained)
    new_logits = tuple(z + policy.lr * g / n
                       for z, g in zip(policy.logits, grads))
    return replace(policy, logits=new_logits), UpdateInfo(s_nu, n, False)


def policy_to_dict(policy: Policy) -> dict:
    return {"logits": [z.tolist() for z in policy.logits],
            "lr": policy.lr, "epsilon": policy.epsilon, "nu": policy.nu}


def policy_from_dict(data: dict) -> Policy:
    return Policy(tuple(np.asarray(z, dtype=float) for z in data["logits"]),
                  float(data["lr"]), float(data["epsilon"]),
                  float(data["nu"]))
