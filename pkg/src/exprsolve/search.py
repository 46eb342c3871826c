"""The operator-sequence search loop.

Each iteration samples a batch of sequences from the policy, coarse-tunes
them on one shared fresh batch, regroups and retrains the iteration's best
(keeping the result only when it is at least as good), updates the policy
from the scores, and offers everything to a fixed-capacity pool.  After the
loop every pool entry is fine-tuned, the winner is picked on a shared fresh
selection batch and polished with BFGS.

All randomness is drawn from seed streams keyed by (tag, iteration,
candidate), so a run can be checkpointed and resumed bit-identically: no
generator state is saved, only the iteration counter, policy, and pool.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import controller as ctl
from . import expr as ex
from . import problems as pr
from . import tuner as tu

TAG_BATCH, TAG_CONTROLLER, TAG_INIT, TAG_FINETUNE, TAG_METRICS, TAG_SELECTION = range(6)

METRIC_POINTS = 10_000


class SearchError(RuntimeError):
    pass


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class SearchSettings:
    """Loop-level knobs: horizon, per-iteration candidate count, pool size,
    seeds, policy hyperparameters, and batch overrides."""

    iterations: int = 50
    batch_size: int = 16
    pool_size: int = 10
    seed: int = 0
    metrics_seed: int | None = None
    epsilon: float = ctl.DEFAULT_EPSILON
    nu: float = ctl.DEFAULT_NU
    policy_lr: float = ctl.DEFAULT_POLICY_LR
    grouping: bool = True
    n_interior: int | None = None
    n_boundary: int | None = None
    threads: int = 1
    precision: str = "double"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


class CandidatePool:
    """Fixed-capacity store of the best-scoring distinct sequences.

    Offers below the floor of a full pool are dropped; a duplicate sequence
    refreshes the stored entry only when its score improved (keeping the
    original insertion order for tie-breaks).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: list = []     # ScoredSequence
        self._counters: list = []  # insertion order, aligned with _items
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    @property
    def entries(self) -> tuple:
        return tuple(self._items)

    def floor_score(self) -> float:
        return self._items[-1].score if self._items else 0.0

    def _sort(self):
        order = sorted(range(len(self._items)),
                       key=lambda i: (-self._items[i].score, self._counters[i]))
        self._items = [self._items[i] for i in order]
        self._counters = [self._counters[i] for i in order]

    def offer(self, candidate: ctl.ScoredSequence) -> bool:
        for i, item in enumerate(self._items):
            if item.ops == candidate.ops:
                if candidate.score > item.score:
                    self._items[i] = candidate
                    self._sort()
                    return True
                return False
        if len(self._items) >= self.capacity and \
                candidate.score <= self._items[-1].score:
            return False
        self._items.append(candidate)
        self._counters.append(self._next)
        self._next += 1
        self._sort()
        if len(self._items) > self.capacity:
            self._items.pop()
            self._counters.pop()
        return True

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "next": self._next,
                "entries": [{"ops": list(s.ops), "loss": s.loss,
                             "counter": c,
                             "expression": ex.expr_to_dict(s.expression)}
                            for s, c in zip(self._items, self._counters)]}

    @classmethod
    def from_dict(cls, data: dict) -> "CandidatePool":
        pool = cls(int(data["capacity"]))
        pool._next = int(data["next"])
        for entry in data["entries"]:
            pool._items.append(ctl.scored(
                tuple(entry["ops"]), float(entry["loss"]),
                ex.expr_from_dict(entry["expression"])))
            pool._counters.append(int(entry["counter"]))
        pool._sort()
        return pool


@dataclass(frozen=True)
class TelemetryRow:
    iteration: int
    best_loss: float
    quantile: float
    pool_floor: float
    flagged: bool


@dataclass
class SearchResult:
    """Outcome of run_search; expression/loss/metrics are None for a run
    paused by stop_after."""

    finished: bool
    expression: ex.Expression | None
    loss: float
    metrics: dict | None
    pool: CandidatePool
    policy: ctl.Policy
    telemetry: list
    finetune_traces: list
    selection_losses: list
    checkpoint: dict
    flags: tu.TuneFlags = field(default_factory=tu.TuneFlags)


def _merge_flags(total: tu.TuneFlags, part: tu.TuneFlags):
    total.adam_skipped += part.adam_skipped
    total.line_search_failures += part.line_search_failures
    total.curvature_skipped += part.curvature_skipped
    total.degenerate_candidates += part.degenerate_candidates


def _score_wave(sequences, problem, batch, schedule, shape, library,
                seed, iteration, threads, flags):
    """Coarse-tune one iteration's candidates; one seed stream per candidate,
    results ordered by candidate index regardless of scheduling."""
    rngs = [_stream(seed, TAG_INIT, iteration, n) for n in range(len(sequences))]
    parts = [tu.TuneFlags() for _ in sequences]
    if threads <= 1:
        wave = [ctl.score(s, problem, batch, schedule, r, shape, library, f)
                for s, r, f in zip(sequences, rngs, parts)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(ctl.score, s, problem, batch, schedule, r,
                                   shape, library, f)
                       for s, r, f in zip(sequences, rngs, parts)]
            wave = [f.result() for f in futures]
    for part in parts:
        _merge_flags(flags, part)
    return wave


def _checkpoint(problem, settings, schedule, shape, library, iteration,
                policy, pool, telemetry) -> dict:
    return {"problem": problem.name,
            "d": problem.d,
            "iteration": iteration,
            "slot_sizes": list(ex.slot_sizes(shape, library)),
            "settings": asdict(settings),
            "schedule": asdict(schedule),
            "policy": ctl.policy_to_dict(policy),
            "pool": pool.to_dict(),
            "telemetry": [asdict(row) for row in telemetry]}


def _restore(resume, problem, settings, schedule, shape, library):
    if resume["problem"] != problem.name or resume["d"] != problem.d:
        raise SearchError("checkpoint was written for a different problem")
    if resume["slot_sizes"] != list(ex.slot_sizes(shape, library)):
        raise SearchError("checkpoint was written for a different operator set")
    if resume["settings"] != asdict(settings) or \
            resume["schedule"] != asdict(schedule):
        raise SearchError("checkpoint settings do not match this run")
    policy = ctl.policy_from_dict(resume["policy"])
    pool = CandidatePool.from_dict(resume["pool"])
    telemetry = [TelemetryRow(**row) for row in resume["telemetry"]]
    return int(resume["iteration"]), policy, pool, telemetry


def _final_metrics(problem, expression, settings):
    if problem.exact is None:
        return None
    seed = settings.metrics_seed if settings.metrics_seed is not None \
        else settings.seed + 1
    X = problem.domain.sample_interior(METRIC_POINTS, _stream(seed, TAG_METRICS))
    m = pr.error_metrics(expression, problem.exact, X)
    out = {"relative_L2": m["relative_L2"],
           "absolute_relative": m["absolute_relative"]}
    if problem.is_eigen:
        out["lambda"] = expression.lam
        out["scale_invariant_relative_L2"] = \
            pr.scale_invariant_relative_l2(expression, problem.exact, X)
    return out


def run_search(problem: pr.Problem, settings: SearchSettings = SearchSettings(),
               schedule: tu.TuneSchedule = tu.TuneSchedule(),
               shape: ex.TreeShape | None = None,
               library: ex.OperatorLibrary | None = None,
               resume: dict | None = None,
               stop_after: int | None = None) -> SearchResult:
    """Run the full search; raises SearchError for an empty pool (a zero
    iteration budget with nothing to resume).

    resume takes a checkpoint dict from a previous SearchResult; stop_after
    pauses the loop at that absolute iteration and returns a resumable
    result without the fine-tune stage.
    """
    if shape is None:
        shape = ex.TreeShape(2)
    if library is None:
        library = ex.default_library()
    flags = tu.TuneFlags()
    if resume is not None:
        start, policy, pool, telemetry = _restore(
            resume, problem, settings, schedule, shape, library)
    else:
        start = 0
        policy = ctl.make_policy(shape, library, settings.policy_lr,
                                 settings.epsilon, settings.nu)
        pool = CandidatePool(settings.pool_size)
        telemetry = []

    end = settings.iterations if stop_after is None \
        else min(settings.iterations, stop_after)
    for t in range(start, end):
        batch = pr.sample_batch(problem, _stream(settings.seed, TAG_BATCH, t),
                                settings.n_interior, settings.n_boundary,
                                dtype=settings.dtype)
        ctrl_rng = _stream(settings.seed, TAG_CONTROLLER, t)
        sequences = [ctl.sample(policy, ctrl_rng)
                     for _ in range(settings.batch_size)]
        wave = _score_wave(sequences, problem, batch, schedule, shape, library,
                           settings.seed, t, settings.threads, flags)
        n_best = int(np.argmin([s.loss for s in wave]))
        if settings.grouping and np.isfinite(wave[n_best].loss):
            _, regrouped = tu.group_parameters(wave[n_best].expression,
                                               schedule.eta)
            retrained, r_loss = tu.adam_retrain(regrouped, problem, batch,
                                                schedule.t3, schedule.lr3,
                                                flags)
            # keep the grouped result only when it is at least as good
            if r_loss <= wave[n_best].loss:
                wave[n_best] = ctl.scored(wave[n_best].ops, r_loss, retrained)
        policy, info = ctl.update(policy, wave)
        for s in wave:
            pool.offer(s)
        best_loss = wave[n_best].loss
        telemetry.append(TelemetryRow(t, float(best_loss),
                                      float(info.quantile),
                                      float(pool.floor_score()),
                                      bool(info.no_op)
                                      or not np.isfinite(best_loss)))

    checkpoint = _checkpoint(problem, settings, schedule, shape, library,
                             end, policy, pool, telemetry)
    if end < settings.iterations:
        return SearchResult(False, None, float("nan"), None, pool, policy,
                            telemetry, [], [], checkpoint, flags)

    if len(pool) == 0:
        raise SearchError("empty pool: no candidates were ever scored")

    tuned = []
    traces = []
    for i, entry in enumerate(pool.entries):
        e2, trace = tu.fine_tune(entry.expression, problem, schedule,
                                 _stream(settings.seed, TAG_FINETUNE, i), flags)
        tuned.append(e2)
        traces.append(trace)
    selection_batch = pr.sample_batch(problem,
                                      _stream(settings.seed, TAG_SELECTION),
                                      settings.n_interior, settings.n_boundary,
                                      dtype=settings.dtype)
    selection_losses = [pr.loss(problem, e2, selection_batch).total
                        for e2 in tuned]
    winner = int(np.argmin(selection_losses))
    best, best_loss = tu.bfgs_polish(tuned[winner], problem, selection_batch,
                                     schedule.polish, flags)
    metrics = _final_metrics(problem, best, settings)
    return SearchResult(True, best, float(best_loss), metrics, pool, policy,
                        telemetry, traces, [float(v) for v in selection_losses],
                        checkpoint, flags)
