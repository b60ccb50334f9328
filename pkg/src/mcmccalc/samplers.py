"""Chain simulators and the central-limit-theorem harness.

Three simulation schemes share one vectorised accept/reject engine:

* :func:`run_limiting_chain` — a homogeneous chain driven by a fixed kernel;
* :func:`run_smcmc` — sequential levels: level 1 targets the initial flow
  density, level ``p`` targets the reweight/mutate transform of the previous
  level's *completed* empirical measure;
* :func:`run_imcmc` — interacting levels advancing in lockstep: at every step
  the level-``p`` chain moves against the transform of the level-``(p-1)``
  *running* empirical measure, so its target is refined each iteration.

Seed discipline: every public run operation accepts an integer or a
``numpy.random.SeedSequence`` and derives one child stream per level via
``spawn``; :func:`clt_experiment` derives one child per replication and then
per level, so replication ``r`` of an experiment reproduces a standalone run
seeded with that child.  Identical (configuration, seed) pairs give
bit-identical state sequences.  A raw ``numpy.random.Generator`` is accepted
as an escape hatch and consumed directly (its runs record seed 0).

Within a replication the per-step draw order is fixed: blocks of proposal
draws, then blocks of acceptance uniforms, from the replication's own stream.
Proposals vectorise for the random-walk and independence families; any other
proposal tag is refused with instructions rather than silently looped.

The CLT harness validates the two asymptotic-variance displays: the
random-centered statistic (each replication centered at its own realised
target mean) against the limiting chain's variance, and the
deterministic-centered statistic against that variance plus the
approximation term — the sequential scheme's extra term from the variance
recursion, the interacting scheme's doubled version of it.  The asymptotic
variance is estimated at full weight (not the fractional power the test-class
restriction uses); the report records the fractional exponent alongside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats as _scipy_stats

from .errors import (
    DegenerateWeightsError,
    InvalidInputError,
    RangeError,
    ResourceLimitError,
)
from .feynman_kac import (
    EmpiricalMeasure,
    FeynmanKacModel,
    smcmc_variance_recursion,
)
from .ergodicity import asymptotic_variance, poisson_resolvent
from .calculus import uniform_boundedness_scan
from .kernels import (
    GibbsKernel,
    HastingsFamily,
    HastingsKernel,
    sample_from_grid_density,
    sample_step_detail,
)
from .measures import (
    Grid1D,
    GridDensity,
    POSITIVE_FLOOR,
    WeightFunction,
)

DRAW_BLOCK = 1024
MIN_BATCHES = 20
MIN_REPLICATIONS = 100
STATE_STORAGE_CAP = 200_000_000  # replications * steps kept in memory
_TRACE_POINTS = 48

SeedLike = Union[int, np.integer, np.random.SeedSequence, np.random.Generator]


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------

def _as_seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool):
        return np.random.SeedSequence(int(seed))
    raise InvalidInputError("seed must be an integer or a numpy SeedSequence")


def _seed_digest(seed: SeedLike) -> int:
    """64-bit record of the seed for run metadata."""
    if isinstance(seed, np.random.Generator):
        return 0
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool):
        return int(seed)
    return int(_as_seed_sequence(seed).generate_state(1, np.uint64)[0])


def _level_streams(seed: SeedLike, levels: int) -> List[np.random.Generator]:
    if isinstance(seed, np.random.Generator):
        if levels != 1:
            raise InvalidInputError(
                "a raw Generator seeds exactly one stream; multi-level runs "
                "need an integer or SeedSequence seed"
            )
        return [seed]
    children = _as_seed_sequence(seed).spawn(levels)
    return [np.random.default_rng(c) for c in children]


def _replication_streams(seed: SeedLike, replications: int,
                         levels: int) -> Tuple[List[List[np.random.Generator]],
                                               np.random.SeedSequence]:
    """Per-replication, per-level streams plus one spare child."""
    parent = _as_seed_sequence(seed)
    children = parent.spawn(replications + 1)
    per_rep = [[np.random.default_rng(c) for c in child.spawn(levels)]
               for child in children[:replications]]
    return per_rep, children[replications]


# ---------------------------------------------------------------------------
# run records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainRun:
    """One simulated chain: the generated states (the start point excluded),
    the seed record, and acceptance bookkeeping."""

    states: np.ndarray
    seed: int
    kernel_descriptor: str
    acceptance_rate: float
    truncation_events: int

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float)
        if states.ndim not in (1, 2):
            raise InvalidInputError("chain states must be a 1-D or 2-D array")
        object.__setattr__(self, "states", states)
        if not 0.0 <= self.acceptance_rate <= 1.0:
            raise InvalidInputError(
                "acceptance rate %g outside [0, 1]" % self.acceptance_rate
            )
        if self.truncation_events < 0:
            raise InvalidInputError("truncation count cannot be negative")

    @property
    def n_steps(self) -> int:
        return int(self.states.shape[0])

    def describe(self) -> str:
        return "%d steps of %s (accept %.3f, %d boundary folds)" % (
            self.n_steps, self.kernel_descriptor,
            self.acceptance_rate, self.truncation_events)


@dataclass(frozen=True)
class CltReport:
    """Replication distribution of the scaled ergodic-average error.

    ``replication_variance`` and ``normality_stats`` describe the
    random-centered statistic (every replication centered at its own realised
    target mean); the ``*_deterministic`` twins describe centering at the
    grid reference flow.  ``predicted_variance_deterministic`` is the
    limiting-chain variance plus the approximation term (``extra_variance``).
    """

    scheme: str
    depth: int
    n_steps: int
    replications: int
    estimate: float
    asymptotic_variance_batchmeans: float
    asymptotic_variance_poisson: float
    replication_variance: float
    replication_variance_deterministic: float
    predicted_variance_deterministic: float
    extra_variance: float
    normality_stats: Tuple[float, float, float]
    normality_stats_deterministic: Tuple[float, float, float]
    f_fractional_norm: float
    fractional_exponent: float
    d1_checkpoints: Optional[np.ndarray] = None
    d1_sup_stats: Optional[np.ndarray] = None
    d1_v_stats: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        for name in ("asymptotic_variance_batchmeans", "asymptotic_variance_poisson",
                     "replication_variance", "replication_variance_deterministic",
                     "predicted_variance_deterministic", "extra_variance"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidInputError("%s must be finite and >= 0, got %g"
                                        % (name, value))
        if self.replications < 1:
            raise InvalidInputError("replication count missing")

    def describe(self) -> str:
        sk, ku, ks = self.normality_stats
        lines = [
            "%s depth %d: n=%d, %d replications" % (
                self.scheme, self.depth, self.n_steps, self.replications),
            "  estimate %.6g (grid reference in predicted variances)" % self.estimate,
            "  random-centered replication variance %.6g vs sigma2 %.6g "
            "(batch means %.6g)" % (
                self.replication_variance, self.asymptotic_variance_poisson,
                self.asymptotic_variance_batchmeans),
            "  deterministic-centered variance %.6g vs sigma2+extra %.6g "
            "(extra %.6g)" % (
                self.replication_variance_deterministic,
                self.predicted_variance_deterministic, self.extra_variance),
            "  normality: skew %.3f, excess kurtosis %.3f, KS %.3f" % (sk, ku, ks),
        ]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# vectorised proposal plans
# ---------------------------------------------------------------------------

class _ProposalPlan:
    """Vectorised draw/propose/density triple for one proposal family."""

    def __init__(self, draw, propose, q_pair, tag):
        self.draw = draw          # (rng, count) -> raw draws
        self.propose = propose    # (x, draws) -> (y, folded_mask)
        self.q_pair = q_pair      # (x, y) -> (q(x, y), q(y, x))
        self.tag = tag


def _plan_for(proposal, grid: Grid1D) -> _ProposalPlan:
    if proposal.tag == "random-walk":
        sigma = float(proposal.params["sigma"])
        lo, hi = grid.lower, grid.upper
        width = hi - lo
        inv = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
        s2 = 2.0 * sigma * sigma

        def draw(rng, count):
            return rng.standard_normal(count)

        def propose(x, draws):
            z = x + sigma * draws
            folded = (z < lo) | (z > hi)
            if np.any(folded):
                d = np.mod(z - lo, 2.0 * width)
                z = np.where(folded, lo + width - np.abs(d - width), z)
            return z, folded

        def q_pair(x, y):
            d0 = y - x
            d1 = (2.0 * hi - y) - x
            d2 = (2.0 * lo - y) - x
            q = inv * (np.exp(-d0 * d0 / s2) + np.exp(-d1 * d1 / s2)
                       + np.exp(-d2 * d2 / s2))
            return q, q  # the folded density is symmetric

        return _ProposalPlan(draw, propose, q_pair, proposal.tag)

    if proposal.tag == "independence":
        # rebuild the base table from the density itself: rows are constant
        # in the start point, so one probe row is the whole table
        base_vals = np.asarray(proposal.density(grid.nodes[:1, None],
                                                grid.nodes[None, :]),
                               dtype=float)[0]

        def draw(rng, count):
            return rng.uniform(size=count)

        def propose(x, draws):
            y = sample_from_grid_density(grid, base_vals, draws)
            return np.asarray(y, dtype=float), np.zeros(np.shape(x), dtype=bool)

        def q_pair(x, y):
            return (np.interp(y, grid.nodes, base_vals),
                    np.interp(x, grid.nodes, base_vals))

        return _ProposalPlan(draw, propose, q_pair, proposal.tag)

    raise InvalidInputError(
        "proposal '%s' has no vectorised sampler; the chain drivers support "
        "the random-walk and independence families" % proposal.tag
    )


# ---------------------------------------------------------------------------
# the stepping lane
# ---------------------------------------------------------------------------

def _matrix_rows_at(grid: Grid1D, table: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Per-replication linear interpolation: row ``r`` of ``table`` at ``xs[r]``."""
    pos = (xs - grid.lower) / grid.h
    idx = np.clip(pos.astype(np.int64), 0, grid.n_points - 2)
    frac = pos - idx
    rows = np.arange(table.shape[0])
    return table[rows, idx] * (1.0 - frac) + table[rows, idx + 1] * frac


class _Lane:
    """R parallel accept/reject chains against a shared or per-chain target."""

    def __init__(self, grid: Grid1D, plan: _ProposalPlan, balancing,
                 x0s: np.ndarray, rngs: Sequence[np.random.Generator],
                 block: int = DRAW_BLOCK):
        self.grid = grid
        self.plan = plan
        self.balancing = balancing
        self.x = np.array(x0s, dtype=float)
        self.rngs = list(rngs)
        if self.x.shape != (len(self.rngs),):
            raise InvalidInputError("one start point per stream required")
        self._block = int(block)
        self._cursor = self._block
        self._draws: Optional[np.ndarray] = None
        self._accept_u: Optional[np.ndarray] = None
        self.accept_count = np.zeros(len(self.rngs), dtype=np.int64)
        self.fold_count = np.zeros(len(self.rngs), dtype=np.int64)
        self.target: Optional[np.ndarray] = None
        self.mu_x: Optional[np.ndarray] = None

    # target handling ------------------------------------------------------

    def set_target(self, table: np.ndarray) -> None:
        self.target = table
        self.refresh()

    def refresh(self) -> None:
        """Recompute the cached target value at the current states (call after
        mutating a per-chain target table in place)."""
        self.mu_x = np.maximum(self._target_at(self.x), POSITIVE_FLOOR)

    def _target_at(self, xs: np.ndarray) -> np.ndarray:
        if self.target.ndim == 1:
            return np.interp(xs, self.grid.nodes, self.target)
        return _matrix_rows_at(self.grid, self.target, xs)

    # stepping ---------------------------------------------------------------

    def _refill(self) -> None:
        count = len(self.rngs)
        draws = np.empty((count, self._block))
        accept_u = np.empty((count, self._block))
        for r, rng in enumerate(self.rngs):
            draws[r] = self.plan.draw(rng, self._block)
            accept_u[r] = rng.uniform(size=self._block)
        self._draws = draws
        self._accept_u = accept_u
        self._cursor = 0

    def step(self) -> np.ndarray:
        if self._cursor == self._block:
            self._refill()
        d = self._draws[:, self._cursor]
        u = self._accept_u[:, self._cursor]
        self._cursor += 1

        y, folded = self.plan.propose(self.x, d)
        mu_y = self._target_at(y)
        q_xy, q_yx = self.plan.q_pair(self.x, y)
        num = mu_y * q_yx
        den = self.mu_x * q_xy
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            ratio = np.where(den > 0.0, num / den, 1.0)
        accept = u < self.balancing.g(ratio)
        self.x = np.where(accept, y, self.x)
        self.mu_x = np.where(accept, np.maximum(mu_y, POSITIVE_FLOOR), self.mu_x)
        self.accept_count += accept
        self.fold_count += folded
        return self.x


# ---------------------------------------------------------------------------
# homogeneous chains
# ---------------------------------------------------------------------------

def _check_steps(n: int) -> int:
    if not isinstance(n, (int, np.integer)) or isinstance(n, bool) or n < 0:
        raise InvalidInputError("step count must be a nonnegative integer")
    return int(n)


def _gibbs_chain(kernel: GibbsKernel, x0, n: int, rng) -> Tuple[np.ndarray, int]:
    states = np.empty((n, 2))
    x = (float(x0[0]), float(x0[1]))
    for k in range(n):
        x, _, _ = sample_step_detail(kernel, x, rng)
        states[k] = x
    return states, n  # two-stage moves always accept


def run_limiting_chain(kernel, x0, n: int, seed: SeedLike) -> ChainRun:
    """Simulate ``n`` homogeneous transitions of a fixed kernel.

    Accept/reject kernels run through the vectorised lane; two-stage kernels
    step through their conditional inverse CDFs.  The run is deterministic
    given the seed; the returned states exclude the start point.
    """
    n = _check_steps(n)
    if n > STATE_STORAGE_CAP:
        raise ResourceLimitError("run of %d steps exceeds the storage cap" % n)
    rng = _level_streams(seed, 1)[0]
    if isinstance(kernel, GibbsKernel):
        if n == 0:
            states = np.empty((0, 2))
            accept = 0.0
            folds = 0
        else:
            states, accepted = _gibbs_chain(kernel, x0, n, rng)
            accept = accepted / n
            folds = 0
        descriptor = "two-stage scan @ %s" % kernel.target.description
        return ChainRun(states, _seed_digest(seed), descriptor, accept, folds)
    if not isinstance(kernel, HastingsKernel) or kernel.grid.ndim != 1:
        raise InvalidInputError(
            "run_limiting_chain drives 1-D accept/reject or two-stage kernels"
        )
    plan = _plan_for(kernel.proposal, kernel.grid)
    lane = _Lane(kernel.grid, plan, kernel.balancing,
                 np.array([float(x0)]), [rng])
    lane.set_target(kernel.target.values)
    states = np.empty(n)
    for k in range(n):
        states[k] = lane.step()[0]
    descriptor = "%s+%s @ %s" % (kernel.proposal.tag, kernel.balancing.tag,
                                 kernel.target.description)
    accept = float(lane.accept_count[0]) / n if n else 0.0
    return ChainRun(states, _seed_digest(seed), descriptor, accept,
                    int(lane.fold_count[0]))


def batch_means_variance(run: ChainRun, f: Callable[[np.ndarray], np.ndarray],
                         batch_count: int = 40) -> float:
    """Batch-means estimate of the asymptotic variance of the scaled average.

    The last ``batch_count * (n // batch_count)`` states are split into equal
    batches (any leading remainder is treated as extra warm-up).
    """
    if not callable(f):
        raise InvalidInputError("batch means needs a callable test function")
    if not isinstance(batch_count, (int, np.integer)) or batch_count < MIN_BATCHES:
        raise InvalidInputError(
            "batch count must be an integer >= %d" % MIN_BATCHES
        )
    n = run.n_steps
    size = n // int(batch_count)
    if size < 1:
        raise InvalidInputError(
            "run of %d steps cannot fill %d batches" % (n, batch_count)
        )
    vals = np.asarray(f(run.states[n - size * batch_count:]), dtype=float)
    means = vals.reshape(int(batch_count), size).mean(axis=1)
    grand = float(vals.mean())
    return float(size * np.sum((means - grand) ** 2) / (batch_count - 1))


# ---------------------------------------------------------------------------
# sequential scheme
# ---------------------------------------------------------------------------

def _resolve_family(family) -> HastingsFamily:
    if not isinstance(family, HastingsFamily):
        raise InvalidInputError("the chain drivers take a HastingsFamily")
    return family


def _level_descriptor(plan, balancing, level: int, text: str) -> str:
    return "%s+%s @ level %d: %s" % (plan.tag, balancing.tag, level, text)


def _smcmc_engine(family: HastingsFamily, model: FeynmanKacModel, p: int,
                  n: int, streams: Sequence[Sequence[np.random.Generator]],
                  x0: float, level_init: str, collect_states: bool,
                  f: Optional[Callable] = None) -> Dict[str, object]:
    """Advance all replications through the sequential levels.

    ``streams[r][j]`` drives replication ``r`` at level ``j+1``.  When states
    are not collected, the mixture for the next level's target accumulates
    on the fly, weighted sample row by weighted sample row.
    """
    grid = model.grid
    reps = len(streams)
    plan = _plan_for(family.proposal, grid)
    weights = grid.trapezoid_weights()

    levels: List[Dict[str, object]] = []
    x0s = np.full(reps, float(x0))
    target: np.ndarray = model.flow(1).values
    target_text = "reference flow level 1"
    final_table: Optional[np.ndarray] = None

    for level in range(1, p + 1):
        lane = _Lane(grid, plan, family.balancing, x0s,
                     [streams[r][level - 1] for r in range(reps)])
        lane.set_target(target)
        build_next = level < p
        acc_table = np.zeros((reps, grid.n_points)) if (build_next and not collect_states) else None
        states = np.empty((reps, n)) if collect_states else None
        f_sums = np.zeros(reps) if (f is not None and level == p) else None

        mutation = model.mutation(level) if build_next else None
        for k in range(n):
            x = lane.step()
            if states is not None:
                states[:, k] = x
            if acc_table is not None:
                rows = mutation.rows(grid, x)
                acc_table += model.potential_at(level, x)[:, None] * rows
            if f_sums is not None:
                f_sums += f(x)

        levels.append({
            "states": states,
            "finals": lane.x.copy(),
            "accepts": lane.accept_count.copy(),
            "folds": lane.fold_count.copy(),
            "f_sums": f_sums,
            "target_text": target_text,
            "descriptor": _level_descriptor(plan, family.balancing, level, target_text),
        })

        if build_next:
            if collect_states:
                tables = []
                for r in range(reps):
                    try:
                        dens = model.transform(level, EmpiricalMeasure(states[r]))
                    except DegenerateWeightsError as err:
                        raise DegenerateWeightsError(
                            "level %d target degenerate: %s" % (level + 1, err)
                        ) from err
                    tables.append(dens.values)
                target = np.vstack(tables) if reps > 1 else tables[0]
            else:
                row_mass = acc_table @ weights
                if not np.all(np.isfinite(row_mass)) or np.any(row_mass <= 0.0):
                    raise DegenerateWeightsError(
                        "level %d target degenerate: empirical mixture carries "
                        "no weight" % (level + 1)
                    )
                target = acc_table
            target_text = "mixture target level %d" % (level + 1)
            x0s = lane.x.copy() if level_init == "previous-final" else np.full(reps, float(x0))
            final_table = target if level + 1 == p + 1 else None

    # the level-p target in table form, for the random centering
    if p == 1:
        final_table = np.broadcast_to(model.flow(1).values, (reps, grid.n_points))
    elif collect_states:
        final_table = target if target.ndim == 2 else target[None, :]
    else:
        final_table = target
    return {"levels": levels, "final_table": final_table}


def run_smcmc(family, model: FeynmanKacModel, p_levels: int, n: int,
              seed: SeedLike, x0: float = 0.0,
              level_init: str = "previous-final"
              ) -> List[Tuple[ChainRun, EmpiricalMeasure]]:
    """Run the sequential scheme once; per level, the chain and its samples.

    Level 1 targets the initial flow density; level ``p`` targets the
    reweight/mutate transform of level ``p-1``'s completed sample set.  Each
    level starts from the previous level's final state by default
    (``level_init="fixed"`` restarts every level at ``x0``).
    """
    family = _resolve_family(family)
    n = _check_steps(n)
    if not isinstance(p_levels, (int, np.integer)) or p_levels < 1:
        raise InvalidInputError("p_levels must be a positive integer")
    if p_levels - 1 > model.n_levels:
        raise RangeError("depth %d needs %d reweight/mutate pairs, model has %d"
                         % (p_levels, p_levels - 1, model.n_levels))
    if level_init not in ("previous-final", "fixed"):
        raise InvalidInputError('level_init must be "previous-final" or "fixed"')
    if n == 0:
        raise InvalidInputError("sequential runs need at least one step per level")
    streams = [_level_streams(seed, int(p_levels))]
    engine = _smcmc_engine(family, model, int(p_levels), n, streams,
                           float(x0), level_init, collect_states=True)
    digest = _seed_digest(seed)
    out = []
    for level in engine["levels"]:
        states = level["states"][0]
        run = ChainRun(states, digest, level["descriptor"],
                       float(level["accepts"][0]) / n, int(level["folds"][0]))
        out.append((run, EmpiricalMeasure(states)))
    return out


# ---------------------------------------------------------------------------
# interacting scheme
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdaptationTrace:
    """Per-step increments of the evolving top-level target of one run,
    plus thinned density snapshots for derivative scans."""

    grid: Grid1D
    sup_increments: np.ndarray
    v_increments: np.ndarray
    checkpoints: np.ndarray
    snapshots: np.ndarray
    weight_tag: str


def _checkpoint_indices(n: int, count: int = _TRACE_POINTS) -> np.ndarray:
    if n <= 1:
        return np.array([n], dtype=int) if n else np.array([], dtype=int)
    pts = np.unique(np.geomspace(1, n, min(count, n)).astype(int))
    return pts


def _imcmc_engine(family: HastingsFamily, model: FeynmanKacModel, p: int,
                  n: int, streams: Sequence[Sequence[np.random.Generator]],
                  x0: float, f: Optional[Callable] = None,
                  f_nodes: Optional[np.ndarray] = None,
                  freeze_lower: Optional[GridDensity] = None,
                  collect_states: bool = False,
                  trace_weight: Optional[WeightFunction] = None
                  ) -> Dict[str, object]:
    """Advance all replications through the interacting levels in lockstep.

    Per step and per level ``j >= 2``: the level-``(j-1)`` chain has just
    moved, its new point's weighted mutation row joins the running mixture,
    and the level-``j`` chain moves against the refreshed mixture.  The
    top level's running target mean of ``f`` accumulates incrementally for
    the random-centered statistic.
    """
    grid = model.grid
    reps = len(streams)
    plan = _plan_for(family.proposal, grid)
    weights = grid.trapezoid_weights()

    lanes = []
    for level in range(1, p + 1):
        lane = _Lane(grid, plan, family.balancing, np.full(reps, float(x0)),
                     [streams[r][level - 1] for r in range(reps)])
        lanes.append(lane)
    lanes[0].set_target(model.flow(1).values)

    frozen_table = None
    if freeze_lower is not None:
        if p != 2:
            raise InvalidInputError("freezing the lower level is a depth-2 device")
        frozen_table = model.transform(1, freeze_lower).values
        lanes[1].set_target(frozen_table)

    mixtures = [np.zeros((reps, grid.n_points)) for _ in range(p - 1)]
    center_num = np.zeros(reps)
    center_den = np.zeros(reps)
    f_sums = np.zeros(reps) if f is not None else None
    center_sums = np.zeros(reps) if f is not None else None
    wf = weights * f_nodes if f_nodes is not None else None

    states = np.empty((p, reps, n)) if collect_states else None
    accept0 = [lane.accept_count for lane in lanes]

    trace = None
    if trace_weight is not None:
        v_vals = trace_weight.values_on(grid)
        marks = _checkpoint_indices(n)
        trace = {
            "sup": np.zeros(n),
            "v": np.zeros(n),
            "marks": marks,
            "snaps": np.zeros((marks.size, grid.n_points)),
            "prev": None,
            "next_mark": 0,
            "v_vals": v_vals,
        }

    for k in range(n):
        x_prev = lanes[0].step()
        if collect_states:
            states[0, :, k] = x_prev
        for j in range(2, p + 1):
            if frozen_table is None:
                table = mixtures[j - 2]
                rows = model.mutation(j - 1).rows(grid, x_prev)
                g_at = model.potential_at(j - 1, x_prev)
                table += g_at[:, None] * rows
                if j == p and f is not None:
                    center_num += g_at * (rows @ wf)
                    center_den += g_at
                if k == 0:
                    lanes[j - 1].set_target(table)
                else:
                    lanes[j - 1].refresh()
            x_prev = lanes[j - 1].step()
            if collect_states:
                states[j - 1, :, k] = x_prev
        if f is not None:
            f_sums += f(x_prev)
            if frozen_table is not None:
                center_sums += float(np.sum(weights * frozen_table
                                            * f_nodes))
            else:
                center_sums += center_num / center_den
        if trace is not None and p >= 2 and frozen_table is None:
            top = mixtures[-1][0]
            mu = top / float(top @ weights)
            if trace["prev"] is not None:
                delta = mu - trace["prev"]
                trace["sup"][k] = float(np.max(np.abs(delta)))
                trace["v"][k] = float(np.sum(weights * trace["v_vals"]
                                             * np.abs(delta)))
            trace["prev"] = mu
            if (trace["next_mark"] < trace["marks"].size
                    and k + 1 == trace["marks"][trace["next_mark"]]):
                trace["snaps"][trace["next_mark"]] = mu
                trace["next_mark"] += 1

    result: Dict[str, object] = {
        "states": states,
        "finals": [lane.x.copy() for lane in lanes],
        "accepts": [c.copy() for c in accept0],
        "folds": [lane.fold_count.copy() for lane in lanes],
        "f_sums": f_sums,
        "center_sums": center_sums,
        "descriptors": [
            _level_descriptor(plan, family.balancing, 1, "reference flow level 1")
        ] + [
            _level_descriptor(plan, family.balancing, j,
                              "frozen mixture" if frozen_table is not None
                              else "running mixture level %d" % j)
            for j in range(2, p + 1)
        ],
    }
    if trace is not None:
        result["trace"] = AdaptationTrace(
            grid=grid,
            sup_increments=trace["sup"],
            v_increments=trace["v"],
            checkpoints=trace["marks"].copy(),
            snapshots=trace["snaps"],
            weight_tag=trace_weight.description,
        )
    return result


def run_imcmc(family, model: FeynmanKacModel, p_levels: int, n: int,
              seed: SeedLike, x0: float = 0.0,
              freeze_lower: Optional[GridDensity] = None,
              trace_weight: Optional[WeightFunction] = None
              ) -> Union[List[ChainRun], Tuple[List[ChainRun], AdaptationTrace]]:
    """Run the interacting scheme once; one chain per level.

    All levels start at ``x0`` and advance together; level ``p`` moves
    against the transform of level ``p-1``'s running sample set, refreshed
    every step.  ``freeze_lower`` replaces the running measure with a fixed
    density (a depth-2 diagnostic: the top chain becomes homogeneous).
    Passing ``trace_weight`` additionally returns the adaptation trace of the
    top-level target (per-step sup and weighted-norm increments, thinned
    snapshots).
    """
    family = _resolve_family(family)
    n = _check_steps(n)
    if not isinstance(p_levels, (int, np.integer)) or p_levels < 1:
        raise InvalidInputError("p_levels must be a positive integer")
    if p_levels - 1 > model.n_levels:
        raise RangeError("depth %d needs %d reweight/mutate pairs, model has %d"
                         % (p_levels, p_levels - 1, model.n_levels))
    if n == 0:
        raise InvalidInputError("interacting runs need at least one step")
    streams = [_level_streams(seed, int(p_levels))]
    engine = _imcmc_engine(family, model, int(p_levels), n, streams, float(x0),
                           freeze_lower=freeze_lower, collect_states=True,
                           trace_weight=trace_weight)
    digest = _seed_digest(seed)
    runs = []
    for j in range(int(p_levels)):
        runs.append(ChainRun(
            engine["states"][j][0], digest, engine["descriptors"][j],
            float(engine["accepts"][j][0]) / n, int(engine["folds"][j][0])))
    if trace_weight is not None:
        return runs, engine["trace"]
    return runs


# ---------------------------------------------------------------------------
# experiment configuration and the CLT harness
# ---------------------------------------------------------------------------

def v_alpha_norm(f_values: np.ndarray, weight_values: np.ndarray,
                 alpha: float) -> float:
    """sup |f| / V**alpha; the exponent must lie strictly inside (0, 1/2)."""
    if not (0.0 < alpha < 0.5):
        raise RangeError("alpha must lie in (0, 1/2), got %g" % alpha)
    f_vals = np.asarray(f_values, dtype=float)
    v_vals = np.asarray(weight_values, dtype=float)
    if f_vals.shape != v_vals.shape:
        raise InvalidInputError("function and weight values must align")
    if np.any(v_vals < 1.0 - 1e-12):
        raise InvalidInputError("weight values must be >= 1")
    return float(np.max(np.abs(f_vals) / v_vals ** alpha))


@dataclass
class SchemeConfig:
    """What a CLT experiment runs: family, model, depth, starts, norms."""

    family: HastingsFamily
    model: FeynmanKacModel
    p_levels: int = 2
    x0: float = 0.0
    level_init: Optional[str] = None
    alpha: float = 0.25
    weight: Optional[WeightFunction] = None
    batch_count: int = 40

    def __post_init__(self) -> None:
        _resolve_family(self.family)
        if not isinstance(self.model, FeynmanKacModel):
            raise InvalidInputError("config needs a reweight/mutate model")
        if not isinstance(self.p_levels, (int, np.integer)) or self.p_levels < 1:
            raise InvalidInputError("p_levels must be a positive integer")
        if self.p_levels - 1 > self.model.n_levels:
            raise RangeError("depth %d needs %d reweight/mutate pairs, model has %d"
                             % (self.p_levels, self.p_levels - 1,
                                self.model.n_levels))
        if not (math.isfinite(self.x0)
                and self.model.grid.lower <= self.x0 <= self.model.grid.upper):
            raise InvalidInputError("x0 must sit inside the grid window")
        if self.level_init not in (None, "previous-final", "fixed"):
            raise InvalidInputError('level_init must be "previous-final" or "fixed"')
        if not (0.0 < self.alpha < 0.5):
            raise RangeError("alpha must lie in (0, 1/2), got %g" % self.alpha)
        if self.weight is None:
            self.weight = WeightFunction.one_plus_square()
        if (not isinstance(self.batch_count, (int, np.integer))
                or self.batch_count < MIN_BATCHES):
            raise InvalidInputError("batch count must be an integer >= %d"
                                    % MIN_BATCHES)


def _normality(stat: np.ndarray) -> Tuple[float, float, float]:
    spread = float(np.std(stat, ddof=1))
    if spread <= 1e-12 * (1.0 + abs(float(np.mean(stat)))):
        return 0.0, 0.0, 0.0  # constant to rounding
    z = (stat - float(np.mean(stat))) / spread
    ks = float(_scipy_stats.kstest(z, "norm").statistic)
    return (float(_scipy_stats.skew(z)),
            float(_scipy_stats.kurtosis(z)),
            ks)


def _sigma_functionals(family: HastingsFamily, model: FeynmanKacModel,
                       p: int) -> List[Callable[[np.ndarray], float]]:
    fns = []
    for j in range(1, p + 1):
        kern = family.at(model.flow(j), validate=False)

        def fn(g, _kern=kern):
            return asymptotic_variance(_kern, poisson_resolvent(_kern, g))

        fns.append(fn)
    return fns


def clt_experiment(scheme: str, config: SchemeConfig,
                   f: Callable[[np.ndarray], np.ndarray], n: int,
                   replications: int, seed: SeedLike) -> CltReport:
    """Replicate a scheme and compare the scaled-average error distribution
    with the predicted normal laws.

    Every replication owns a spawned stream (its chains reproduce standalone
    runs seeded with that child).  The random-centered statistic subtracts
    each replication's realised top-level target mean; the deterministic one
    subtracts the grid reference flow's mean.  Predictions: the top-level
    limiting chain's asymptotic variance (resolvent route, with a batch-means
    cross-check on a fresh limiting run) for random centering, plus the
    variance-recursion approximation term — doubled for the interacting
    scheme — for deterministic centering.
    """
    if scheme not in ("smcmc", "imcmc"):
        raise InvalidInputError('scheme must be "smcmc" or "imcmc"')
    if not isinstance(config, SchemeConfig):
        raise InvalidInputError("config must be a SchemeConfig")
    if not callable(f):
        raise InvalidInputError("the test function must be callable")
    if (not isinstance(replications, (int, np.integer))
            or replications < MIN_REPLICATIONS):
        raise InvalidInputError("need at least %d replications" % MIN_REPLICATIONS)
    n = _check_steps(n)
    if n < config.batch_count:
        raise InvalidInputError("run length %d below the batch count" % n)

    model = config.model
    grid = model.grid
    p = int(config.p_levels)
    reps = int(replications)
    f_nodes = np.asarray(f(grid.nodes), dtype=float)
    if f_nodes.shape != (grid.n_points,) or not np.all(np.isfinite(f_nodes)):
        raise InvalidInputError("test function must be finite on the grid")
    fractional_norm = v_alpha_norm(f_nodes, config.weight.values_on(grid),
                                   config.alpha)
    if scheme == "imcmc" and p != 2:
        raise InvalidInputError(
            "interacting-scheme variance predictions are depth-2 only"
        )

    streams, spare = _replication_streams(seed, reps, p)
    weights = grid.trapezoid_weights()

    trace_obj = None
    if scheme == "smcmc":
        init = config.level_init or "previous-final"
        engine = _smcmc_engine(config.family, model, p, n, streams,
                               config.x0, init, collect_states=False, f=f)
        f_sums = engine["levels"][-1]["f_sums"]
        table = engine["final_table"]
        centers = (table @ (weights * f_nodes)) / (table @ weights)
        averages = f_sums / n
        stat_random = math.sqrt(n) * (averages - centers)
    else:
        if config.level_init not in (None, "fixed"):
            raise InvalidInputError("interacting levels start at x0")
        engine = _imcmc_engine(config.family, model, p, n, streams, config.x0,
                               f=f, f_nodes=f_nodes,
                               trace_weight=config.weight)
        averages = engine["f_sums"] / n
        stat_random = (engine["f_sums"] - engine["center_sums"]) / math.sqrt(n)
        trace_obj = engine["trace"]

    det_center = model.flow(p).expect(f_nodes)
    stat_det = math.sqrt(n) * (averages - det_center)

    # predictions
    rec = smcmc_variance_recursion(model, p, f_nodes,
                                   _sigma_functionals(config.family, model, p))
    sigma2 = rec["terms"][p - 1]
    approx_extra = float(sum(rec["terms"][:p - 1]))
    if scheme == "imcmc":
        approx_extra *= 2.0
    predicted_det = sigma2 + approx_extra

    limiting_kernel = config.family.at(model.flow(p), validate=False)
    limiting = run_limiting_chain(limiting_kernel, config.x0, n, spare)
    sigma2_bm = batch_means_variance(limiting, f, config.batch_count)

    report = CltReport(
        scheme=scheme,
        depth=p,
        n_steps=n,
        replications=reps,
        estimate=float(np.mean(averages)),
        asymptotic_variance_batchmeans=sigma2_bm,
        asymptotic_variance_poisson=float(sigma2),
        replication_variance=float(np.var(stat_random, ddof=1)),
        replication_variance_deterministic=float(np.var(stat_det, ddof=1)),
        predicted_variance_deterministic=float(predicted_det),
        extra_variance=float(approx_extra),
        normality_stats=_normality(stat_random),
        normality_stats_deterministic=_normality(stat_det),
        f_fractional_norm=fractional_norm,
        fractional_exponent=float(config.alpha),
        d1_checkpoints=None if trace_obj is None else trace_obj.checkpoints,
        d1_sup_stats=None if trace_obj is None else _partial_sum_stats(
            trace_obj.sup_increments, trace_obj.checkpoints),
        d1_v_stats=None if trace_obj is None else _partial_sum_stats(
            trace_obj.v_increments, trace_obj.checkpoints),
    )
    return report


# ---------------------------------------------------------------------------
# adaptation diagnostics
# ---------------------------------------------------------------------------

def _partial_sum_stats(increments: np.ndarray, marks: np.ndarray) -> np.ndarray:
    sums = np.cumsum(increments)
    marks = np.asarray(marks, dtype=int)
    return sums[marks - 1] / np.sqrt(marks)


def _trend_slope(marks: np.ndarray, stats_vals: np.ndarray) -> Tuple[float, bool]:
    """Log-log slope of the statistic over the later checkpoints; all-zero
    statistics trend trivially."""
    if np.max(stats_vals) <= 1e-14:
        return 0.0, True
    keep = stats_vals > 0.0
    marks = marks[keep]
    stats_vals = stats_vals[keep]
    if marks.size < 2:
        return 0.0, False
    half = marks.size // 2
    xs = np.log(marks[half:].astype(float))
    ys = np.log(stats_vals[half:])
    if xs.size < 2:
        return 0.0, False
    slope = float(np.polyfit(xs, ys, 1)[0])
    return slope, slope < 0.0


@dataclass(frozen=True)
class AdaptationReport:
    """Diagnostics for the diminishing-adaptation conditions of a run."""

    checkpoints: np.ndarray
    d1_sup_stats: np.ndarray
    d1_v_stats: np.ndarray
    slope_sup: float
    slope_v: float
    sup_trending: bool
    v_trending: bool
    c1_gaps: np.ndarray
    c1_shrinking: bool
    scan_max_m_x: Optional[float]
    scan_max_m_perp: Optional[float]
    scan_all_finite: Optional[bool]
    passed: bool

    def describe(self) -> str:
        lines = [
            "partial-sum statistics at n=%d: sup %.4g (slope %.3f), "
            "weighted %.4g (slope %.3f)" % (
                int(self.checkpoints[-1]), self.d1_sup_stats[-1],
                self.slope_sup, self.d1_v_stats[-1], self.slope_v),
            "target gap to reference: %.4g -> %.4g" % (
                self.c1_gaps[0], self.c1_gaps[-1]),
        ]
        if self.scan_max_m_x is not None:
            lines.append("derivative scan: max m_x %.4g, max m_perp %.4g, "
                         "finite=%s" % (self.scan_max_m_x, self.scan_max_m_perp,
                                        self.scan_all_finite))
        lines.append("passed" if self.passed else "failed")
        return "\n".join(lines)


def check_adaptation_conditions(artifacts, weight: Optional[WeightFunction] = None,
                                family: Optional[HastingsFamily] = None,
                                reference: Optional[GridDensity] = None,
                                scan_points: Optional[Sequence[float]] = None,
                                max_scan_pairs: int = 4) -> AdaptationReport:
    """Diminishing-adaptation diagnostics from run artifacts.

    ``artifacts`` is either an :class:`AdaptationTrace` (from
    :func:`run_imcmc`) or an explicit sequence of target densities.  Reported:
    the two scaled partial sums of per-step target increments (sup norm and
    weighted norm) with their log-log trend slopes — both must head to zero —
    the sup-gap of the snapshots to the reference density (the last snapshot
    when none is given), and, when a family is supplied, point-start
    derivative constants scanned along consecutive snapshot pairs.
    """
    weight = weight or WeightFunction.one_plus_square()
    if isinstance(artifacts, AdaptationTrace):
        grid = artifacts.grid
        sup_inc = artifacts.sup_increments
        v_inc = artifacts.v_increments
        marks = artifacts.checkpoints
        snapshots = artifacts.snapshots
    else:
        densities = list(artifacts)
        if len(densities) < 2:
            raise InvalidInputError("need at least two target densities")
        if not all(isinstance(d, GridDensity) for d in densities):
            raise InvalidInputError(
                "density-sequence artifacts must be GridDensity objects"
            )
        grid = densities[0].grid
        if any(d.grid != grid for d in densities):
            raise InvalidInputError("all densities must share one grid")
        v_vals = weight.values_on(grid)
        w = grid.trapezoid_weights()
        sup_inc = np.zeros(len(densities))
        v_inc = np.zeros(len(densities))
        for k in range(1, len(densities)):
            delta = densities[k].values - densities[k - 1].values
            sup_inc[k] = float(np.max(np.abs(delta)))
            v_inc[k] = float(np.sum(w * v_vals * np.abs(delta)))
        marks = np.arange(1, len(densities) + 1)
        snapshots = np.vstack([d.values for d in densities])

    sup_stats = _partial_sum_stats(sup_inc, marks)
    v_stats = _partial_sum_stats(v_inc, marks)
    slope_sup, sup_ok = _trend_slope(marks, sup_stats)
    slope_v, v_ok = _trend_slope(marks, v_stats)

    ref_vals = reference.values if reference is not None else snapshots[-1]
    c1_gaps = np.max(np.abs(snapshots - ref_vals[None, :]), axis=1)
    c1_ok = bool(c1_gaps[-1] <= c1_gaps[0] + 1e-15)

    scan_m_x = scan_m_perp = scan_finite = None
    if family is not None and snapshots.shape[0] >= 2:
        pair_count = min(max_scan_pairs, snapshots.shape[0] - 1)
        picks = np.unique(np.linspace(1, snapshots.shape[0] - 1,
                                      pair_count).astype(int))
        pts = (list(scan_points) if scan_points is not None
               else list(np.linspace(-3.0, 3.0, 5)))
        m_x_all, m_perp_all, finite_all = [], [], []
        for k in picks:
            mu = GridDensity(grid, snapshots[k], normalize=True, positive=True)
            nu = GridDensity(grid, snapshots[k - 1], normalize=True, positive=True)
            scan = uniform_boundedness_scan(family, mu, nu, weight, pts)
            m_x_all.append(scan["max_m_x"])
            m_perp_all.append(scan["max_m_perp"])
            finite_all.append(scan["all_finite"])
        scan_m_x = float(np.max(m_x_all))
        scan_m_perp = float(np.max(m_perp_all))
        scan_finite = bool(all(finite_all))

    passed = bool(sup_ok and v_ok and (scan_finite is not False))
    return AdaptationReport(
        checkpoints=np.asarray(marks, dtype=int),
        d1_sup_stats=sup_stats,
        d1_v_stats=v_stats,
        slope_sup=slope_sup,
        slope_v=slope_v,
        sup_trending=sup_ok,
        v_trending=v_ok,
        c1_gaps=c1_gaps,
        c1_shrinking=c1_ok,
        scan_max_m_x=scan_m_x,
        scan_max_m_perp=scan_m_perp,
        scan_all_finite=scan_finite,
        passed=passed,
    )
