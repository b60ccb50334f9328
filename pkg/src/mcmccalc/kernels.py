"""Transition kernels on truncated grids.

Two families are implemented.

* :class:`HastingsKernel` — accept/reject chains built from a proposal density
  ``q`` and a balancing rule ``g`` mapping the target ratio
  ``r(x, y) = mu(y) q(y, x) / (mu(x) q(x, y))`` to an acceptance probability:

      P(x, f) = \\int f(y) q(x, y) g(r(x, y)) dy  +  f(x) * rejection_mass(x).

  By the balancing identity ``g(t) = t * g(1/t)`` the kernel satisfies
  detailed balance for the target *exactly* at the quadrature level, so grid
  invariance residuals sit at rounding error.

* :class:`GibbsKernel` — a deterministic-scan two-stage kernel on a product
  grid that refreshes the first coordinate from its conditional given the
  second, then the second given the new first.  Its moves depend on the
  starting point only through the second coordinate.

The module also provides point-mass propagation (``P^k(delta_x, .)`` kept as
an explicit atom plus a density part), single sampling steps with the draw
order fixed as "one proposal draw, then one uniform", and invariance checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import (
    InternalConsistencyError,
    InvalidInputError,
    PreconditionError,
    ResourceLimitError,
)
from .measures import (
    Grid1D,
    Grid2D,
    GridDensity,
    POSITIVE_FLOOR,
    integrate_values,
)

NEG_REJECTION_TOL = 1e-9
PROPOSAL_ROW_TOL = 1e-6
DEFAULT_MAX_ITER = 100_000


# ---------------------------------------------------------------------------
# balancing rules
# ---------------------------------------------------------------------------

def _sum_powers(u: np.ndarray, m: int) -> np.ndarray:
    """S_m(u) = 1 + u + ... + u**m by Horner (m >= 0)."""
    acc = np.ones_like(u)
    for _ in range(m):
        acc = 1.0 + u * acc
    return acc


def _poly_g(x: np.ndarray, j: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = x <= 1.0
    xs = np.where(small, x, 1.0)
    lo = xs * _sum_powers(xs, j - 1) / _sum_powers(xs, j)
    with np.errstate(divide="ignore"):
        u = np.where(small, 1.0, 1.0 / np.maximum(x, 1.0))
    hi = _sum_powers(u, j - 1) / _sum_powers(u, j)
    return np.where(small, lo, hi)


def _poly_g_prime(x: np.ndarray, j: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = x <= 1.0
    xs = np.where(small, x, 1.0)
    # N'(x) = 1 + 2 x + ... + j x^(j-1), Horner from the top coefficient
    acc = np.full_like(xs, float(j))
    for i in range(j - 1, 0, -1):
        acc = acc * xs + float(i)
    lo = acc / _sum_powers(xs, j) ** 2
    with np.errstate(divide="ignore"):
        u = np.where(small, 1.0, 1.0 / np.maximum(x, 1.0))
    # T(u) = u^(j-1) + 2 u^(j-2) + ... + j
    t = np.ones_like(u)
    for i in range(2, j + 1):
        t = t * u + float(i)
    hi = u ** (j + 1) * t / _sum_powers(u, j) ** 2
    return np.where(small, lo, hi)


@dataclass
class BalancingFunction:
    """Acceptance rule ``g: (0, inf) -> [0, 1]`` with ``g(t) = t g(1/t)``.

    ``g_prime`` is ``None`` when the rule is not differentiable (the min-one
    rule); derivative-based operations must then refuse to run.
    ``small_value_factor`` is the constant ``inf_{t<=1} g(t)/min(1,t)`` used
    when converting min-one minorization bounds to this rule.
    """

    g: Callable[[np.ndarray], np.ndarray]
    g_prime: Optional[Callable[[np.ndarray], np.ndarray]]
    tag: str
    small_value_factor: float = 1.0

    def __post_init__(self):
        self._validate_identity()

    def _validate_identity(self, n=64, tol=1e-9):
        t = np.geomspace(1e-6, 1e6, n)
        lhs = self.g(t)
        rhs = t * self.g(1.0 / t)
        if not np.all(np.isfinite(lhs)) or np.any(lhs < -1e-15) or np.any(lhs > 1 + 1e-12):
            raise InvalidInputError(f"balancing '{self.tag}' must map into [0, 1]")
        err = np.max(np.abs(lhs - rhs))
        if err > tol:
            raise InvalidInputError(
                f"balancing '{self.tag}' violates g(t) = t*g(1/t) by {err:.3g}"
            )

    @staticmethod
    def barker() -> "BalancingFunction":
        def g(t):
            t = np.asarray(t, dtype=float)
            with np.errstate(invalid="ignore"):
                out = t / (1.0 + t)
            return np.where(np.isinf(t), 1.0, out)

        def gp(t):
            t = np.asarray(t, dtype=float)
            with np.errstate(over="ignore"):
                out = 1.0 / (1.0 + t) ** 2
            return np.where(np.isinf(t), 0.0, out)

        return BalancingFunction(g, gp, "barker", small_value_factor=0.5)

    @staticmethod
    def min_one() -> "BalancingFunction":
        return BalancingFunction(
            lambda t: np.minimum(1.0, np.asarray(t, dtype=float)),
            None,
            "min-one",
            small_value_factor=1.0,
        )

    @staticmethod
    def polynomial(j: int) -> "BalancingFunction":
        """g_j(t) = (t + ... + t^j) / (1 + ... + t^j); approaches min-one as
        j grows, stays differentiable with |g_j'| <= 1."""
        if int(j) != j or j < 1:
            raise InvalidInputError(f"polynomial balancing order must be an integer >= 1, got {j}")
        j = int(j)
        return BalancingFunction(
            lambda t: _poly_g(t, j),
            lambda t: _poly_g_prime(t, j),
            f"gj({j})",
            small_value_factor=j / (j + 1.0),
        )

    @staticmethod
    def custom(g, g_prime=None, tag="custom", small_value_factor=None) -> "BalancingFunction":
        if small_value_factor is None:
            t = np.geomspace(1e-8, 1.0, 512)
            small_value_factor = float(np.min(np.asarray(g(t), dtype=float) / np.minimum(1.0, t)))
        return BalancingFunction(g, g_prime, tag, small_value_factor)


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------

def reflect_into(lo: float, hi: float, z):
    """Fold real numbers into [lo, hi] by repeated boundary reflection."""
    width = hi - lo
    d = np.mod(np.asarray(z, dtype=float) - lo, 2.0 * width)
    return lo + width - np.abs(d - width)


def _cell_root(a, b, target_over_h):
    """Solve a*s + (b-a)/2*s^2 = target for s in [0, 1]; a, b >= 0."""
    c2 = 0.5 * (b - a)
    c0 = -target_over_h
    disc = a * a - 4.0 * c2 * c0
    denom = a + np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -2.0 * c0 / denom
    s = np.where(denom > 0.0, s, 0.0)
    return np.clip(s, 0.0, 1.0)


def sample_from_grid_density(grid: Grid1D, values: np.ndarray, u):
    """Map uniforms in (0,1) through the inverse CDF of the piecewise-linear
    density defined by node values (exact within each cell)."""
    v = np.asarray(values, dtype=float)
    cell = 0.5 * grid.h * (v[:-1] + v[1:])
    cdf = np.concatenate([[0.0], np.cumsum(cell)])
    total = cdf[-1]
    uu = np.asarray(u, dtype=float) * total
    k = np.clip(np.searchsorted(cdf, uu, side="right") - 1, 0, grid.n_points - 2)
    s = _cell_root(v[k], v[k + 1], (uu - cdf[k]) / grid.h)
    return grid.nodes[k] + s * grid.h


@dataclass
class ProposalKernel:
    """Proposal density with a matching sampler.

    ``density(x, y)`` must broadcast over arrays; ``sample(x, rng)`` returns
    one draw from ``density(x, .)`` and whether boundary folding occurred.
    ``bounded`` marks a uniformly bounded density (precondition of the
    derivative operations).
    """

    density: Callable[[np.ndarray, np.ndarray], np.ndarray]
    sample: Callable[[float, np.random.Generator], tuple]
    tag: str
    bounded: bool = True
    params: dict = field(default_factory=dict)

    def validate_rows(self, grid: Grid1D, tol: float = PROPOSAL_ROW_TOL) -> float:
        """Largest deviation of quadrature row mass from 1 over grid starts."""
        q = self.density(grid.nodes[:, None], grid.nodes[None, :])
        sums = q @ grid.trapezoid_weights()
        worst = float(np.max(np.abs(sums - 1.0)))
        if worst > tol:
            raise InvalidInputError(
                f"proposal '{self.tag}' rows integrate to 1 +/- {worst:.3g} (tol {tol:g})"
            )
        return worst

    @staticmethod
    def random_walk(sigma: float, grid: Grid1D) -> "ProposalKernel":
        """Gaussian step reflected at the window walls.

        The density adds the two first mirror images, which matches the
        folding sampler for any step size that cannot cross the window twice
        and keeps the kernel symmetric in (x, y).
        """
        if sigma <= 0:
            raise InvalidInputError(f"random-walk sigma must be positive, got {sigma}")
        lo, hi = grid.lower, grid.upper
        if sigma > (hi - lo) / 6.0:
            raise InvalidInputError(
                f"random-walk sigma {sigma} too large for window [{lo}, {hi}] "
                "(double reflections would be non-negligible)"
            )
        inv = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
        s2 = 2.0 * sigma * sigma

        def density(x, y):
            x = np.asarray(x, dtype=float)
            y = np.asarray(y, dtype=float)
            d0 = y - x
            d1 = (2.0 * hi - y) - x
            d2 = (2.0 * lo - y) - x
            return inv * (
                np.exp(-d0 * d0 / s2) + np.exp(-d1 * d1 / s2) + np.exp(-d2 * d2 / s2)
            )

        def sample(x, rng):
            z = x + sigma * rng.standard_normal()
            if lo <= z <= hi:
                return z, False
            return float(reflect_into(lo, hi, z)), True

        return ProposalKernel(density, sample, "random-walk", True, {"sigma": sigma})

    @staticmethod
    def independence(base: GridDensity) -> "ProposalKernel":
        if base.grid.ndim != 1:
            raise InvalidInputError("independence proposal needs a 1-D base density")
        grid = base.grid
        vals = base.values

        def density(x, y):
            y = np.asarray(y, dtype=float)
            out = np.interp(y, grid.nodes, vals)
            return np.broadcast_to(out, np.broadcast(np.asarray(x, dtype=float), y).shape).copy()

        def sample(x, rng):
            return float(sample_from_grid_density(grid, vals, rng.uniform())), False

        return ProposalKernel(density, sample, "independence", True, {"base": base.description})


# ---------------------------------------------------------------------------
# point-mass mixtures (atom + density), used by k-step propagation
# ---------------------------------------------------------------------------

@dataclass
class AtomPlusDensity:
    """Measure of the form ``atom * delta_x + density(y) dy`` on a 1-D grid."""

    grid: Grid1D
    x: float
    atom: float
    density: np.ndarray

    @property
    def mass(self) -> float:
        return self.atom + integrate_values(self.grid, self.density)

    def expect(self, f_values: np.ndarray) -> float:
        fx = float(np.interp(self.x, self.grid.nodes, f_values))
        return self.atom * fx + integrate_values(self.grid, self.density * f_values)


# ---------------------------------------------------------------------------
# accept/reject kernel
# ---------------------------------------------------------------------------

class HastingsKernel:
    """Accept/reject kernel for a grid target.

    Parameters
    ----------
    target : GridDensity
        Invariant density (must carry the positivity floor).
    proposal : ProposalKernel
    balancing : BalancingFunction
    validate : bool
        Check proposal row masses on the target grid (default True).
    """

    def __init__(self, target: GridDensity, proposal: ProposalKernel,
                 balancing: BalancingFunction, validate: bool = True):
        if target.grid.ndim != 1:
            raise InvalidInputError("accept/reject kernels live on 1-D grids")
        if not target.positive:
            raise InvalidInputError("target must be a positive-floored density")
        self.target = target
        self.proposal = proposal
        self.balancing = balancing
        self.grid: Grid1D = target.grid
        self._q = None
        self._accept = None
        self._rej = None
        if validate:
            proposal.validate_rows(self.grid)

    # -- cached node matrices ------------------------------------------------

    @property
    def q_matrix(self) -> np.ndarray:
        """q(node_i, node_j), rows indexed by the *from* state."""
        if self._q is None:
            n = self.grid.nodes
            self._q = self.proposal.density(n[:, None], n[None, :])
        return self._q

    def ratio_matrix(self, target_values: Optional[np.ndarray] = None) -> np.ndarray:
        """r(node_i, node_j) for this kernel's target (or for substitute
        target values, used when sweeping along contamination curves)."""
        mu = self.target.values if target_values is None else np.asarray(target_values)
        q = self.q_matrix
        num = mu[None, :] * q.T
        den = mu[:, None] * q
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            r = num / den
        return np.where(den > 0.0, r, 1.0)

    def _parts(self):
        if self._accept is None:
            a = self.q_matrix * self.balancing.g(self.ratio_matrix())
            row = a @ self.grid.trapezoid_weights()
            rej = 1.0 - row
            worst = float(rej.min())
            if worst < -NEG_REJECTION_TOL:
                node = self.grid.nodes[int(rej.argmin())]
                raise InternalConsistencyError(
                    f"negative rejection mass {worst:.3g} at node {node:.6g}"
                )
            self._accept = a
            self._rej = np.maximum(rej, 0.0)
        return self._accept, self._rej

    @property
    def accept_matrix(self) -> np.ndarray:
        return self._parts()[0]

    @property
    def rejection_vector(self) -> np.ndarray:
        return self._parts()[1]

    # -- pointwise pieces (continuous state allowed) --------------------------

    def target_at(self, x) -> float:
        return float(max(self.target.at(x), POSITIVE_FLOOR))

    def ratio_at(self, x, y):
        """r(x, y) with y scalar or array; x scalar (off-grid allowed)."""
        y = np.asarray(y, dtype=float)
        mu_x = self.target_at(x)
        mu_y = np.interp(y, self.grid.nodes, self.target.values)
        q_xy = self.proposal.density(x, y)
        q_yx = self.proposal.density(y, np.asarray(x, dtype=float))
        num = mu_y * q_yx
        den = mu_x * q_xy
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            r = num / den
        return np.where(den > 0.0, r, 1.0)

    def point_row(self, x):
        """(acceptance density q(x,.)g(r(x,.)) on nodes, rejection mass at x)."""
        row = self.proposal.density(x, self.grid.nodes) * self.balancing.g(self.ratio_at(x, self.grid.nodes))
        rej = 1.0 - integrate_values(self.grid, row)
        if rej < -NEG_REJECTION_TOL:
            raise InternalConsistencyError(f"negative rejection mass {rej:.3g} at x={x:.6g}")
        return row, max(rej, 0.0)

    # -- applications ---------------------------------------------------------

    def apply_to_function(self, f_values: np.ndarray) -> np.ndarray:
        """(P f) on grid nodes."""
        a, rej = self._parts()
        f_values = np.asarray(f_values, dtype=float)
        return a @ (self.grid.trapezoid_weights() * f_values) + rej * f_values

    def propagate_density(self, rho_values: np.ndarray) -> np.ndarray:
        """(rho P) node values for an absolutely continuous start."""
        a, rej = self._parts()
        rho_values = np.asarray(rho_values, dtype=float)
        return (self.grid.trapezoid_weights() * rho_values) @ a + rej * rho_values

    def propagate_point(self, x: float) -> AtomPlusDensity:
        row, rej = self.point_row(x)
        return AtomPlusDensity(self.grid, float(x), rej, row)

    def propagate_mixture(self, m: AtomPlusDensity) -> AtomPlusDensity:
        step = self.propagate_point(m.x)
        dens = self.propagate_density(m.density) + m.atom * step.density
        return AtomPlusDensity(self.grid, m.x, m.atom * step.atom, dens)

    def describe(self) -> str:
        p = self.proposal
        extras = ",".join(f"{k}={v}" for k, v in p.params.items())
        return f"hastings[{self.target.description};{p.tag}({extras});{self.balancing.tag}]"


# ---------------------------------------------------------------------------
# deterministic-scan two-stage kernel
# ---------------------------------------------------------------------------

class GibbsKernel:
    """Two-stage conditional-refresh kernel for a joint grid density.

    One step from ``(x1, x2)``: draw ``y1`` from the first-coordinate
    conditional given ``x2``, then ``y2`` from the second-coordinate
    conditional given ``y1``.  The starting first coordinate never enters.
    """

    def __init__(self, joint: GridDensity):
        if joint.grid.ndim != 2:
            raise InvalidInputError("two-stage kernels need a 2-D joint density")
        if not joint.positive:
            raise InvalidInputError("joint target must be a positive-floored density")
        self.target = joint
        self.grid: Grid2D = joint.grid
        v = joint.values
        self.w1 = self.grid.axis1.trapezoid_weights()
        self.w2 = self.grid.axis2.trapezoid_weights()
        self.marginal1 = v @ self.w2              # over first coordinate
        self.marginal2 = self.w1 @ v              # over second coordinate
        # cond_1g2[k, i]: density over y1 (index i) given second coordinate node k
        self.cond_1g2 = (v / self.marginal2[None, :]).T
        # cond_2g1[i, j]: density over y2 (index j) given first coordinate node i
        self.cond_2g1 = v / self.marginal1[:, None]
        worst = max(
            float(np.max(np.abs(self.cond_1g2 @ self.w1 - 1.0))),
            float(np.max(np.abs(self.cond_2g1 @ self.w2 - 1.0))),
        )
        if worst > PROPOSAL_ROW_TOL:
            raise InternalConsistencyError(
                f"conditional rows integrate to 1 +/- {worst:.3g}"
            )

    def conditional_first_given_second(self, x2: float) -> np.ndarray:
        """Density over the first coordinate given a (possibly off-grid) x2."""
        a2 = self.grid.axis2
        col = np.interp(x2, a2.nodes, np.arange(a2.n_points, dtype=float))
        k = min(int(col), a2.n_points - 2)
        f = col - k
        row = (1.0 - f) * self.target.values[:, k] + f * self.target.values[:, k + 1]
        return row / float(row @ self.w1)

    def conditional_second_given_first(self, x1: float) -> np.ndarray:
        a1 = self.grid.axis1
        rowpos = np.interp(x1, a1.nodes, np.arange(a1.n_points, dtype=float))
        i = min(int(rowpos), a1.n_points - 2)
        f = rowpos - i
        row = (1.0 - f) * self.target.values[i, :] + f * self.target.values[i + 1, :]
        return row / float(row @ self.w2)

    def conditional_mean_first(self, f_values: np.ndarray) -> np.ndarray:
        """Mf over first-coordinate nodes: average of f(y1, .) under the
        second-coordinate conditional."""
        return (self.cond_2g1 * np.asarray(f_values, dtype=float)) @ self.w2

    def apply_over_second(self, f_values: np.ndarray) -> np.ndarray:
        """(P f) as a function of the second coordinate node index."""
        mf = self.conditional_mean_first(f_values)
        return self.cond_1g2 @ (self.w1 * mf)

    def apply_to_function(self, f_values: np.ndarray) -> np.ndarray:
        g = self.apply_over_second(f_values)
        return np.broadcast_to(g[None, :], self.grid.shape()).copy()

    def propagate_density(self, rho_values: np.ndarray) -> np.ndarray:
        rho2 = self.w1 @ np.asarray(rho_values, dtype=float)
        pull = (self.w2 * rho2) @ self.cond_1g2        # density of y1
        return self.cond_2g1 * pull[:, None]

    def apply_from_x2(self, x2: float, f_values: np.ndarray) -> float:
        c1 = self.conditional_first_given_second(x2)
        mf = self.conditional_mean_first(f_values)
        return float((self.w1 * c1) @ mf)

    def describe(self) -> str:
        return f"two-stage[{self.target.description}]"


Kernel = Union[HastingsKernel, GibbsKernel]


# ---------------------------------------------------------------------------
# families: kernels indexed by their target, used for curves and flows
# ---------------------------------------------------------------------------

@dataclass
class HastingsFamily:
    """Accept/reject kernels sharing one proposal and balancing rule, indexed
    by the target density."""

    proposal: ProposalKernel
    balancing: BalancingFunction

    def at(self, target: GridDensity, validate: bool = False) -> HastingsKernel:
        return HastingsKernel(target, self.proposal, self.balancing, validate=validate)

    def describe(self) -> str:
        extras = ",".join(f"{k}={v}" for k, v in self.proposal.params.items())
        return f"hastings-family[{self.proposal.tag}({extras});{self.balancing.tag}]"


@dataclass
class GibbsFamily:
    """Two-stage kernels indexed by the joint target."""

    def at(self, target: GridDensity, validate: bool = False) -> GibbsKernel:
        return GibbsKernel(target)

    def describe(self) -> str:
        return "two-stage-family"


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def hastings_ratio(kernel: HastingsKernel, x: float, y: float) -> float:
    """Target ratio r(x, y); returns 1 on never-proposed pairs."""
    return float(kernel.ratio_at(x, y))


def apply_hastings(kernel: HastingsKernel, x: float, f_values) -> float:
    """One-step expectation P(x, f) from a (possibly off-grid) point."""
    f_values = _as_grid_values(kernel.grid, f_values)
    row, rej = kernel.point_row(x)
    fx = float(np.interp(x, kernel.grid.nodes, f_values))
    return integrate_values(kernel.grid, row * f_values) + rej * fx


def apply_hastings_to_density(kernel: HastingsKernel, rho: GridDensity, f_values) -> float:
    """P(rho, f) = integral of P(x, f) under the start density rho."""
    f_values = _as_grid_values(kernel.grid, f_values)
    pf = kernel.apply_to_function(f_values)
    return integrate_values(kernel.grid, rho.values * pf)


def apply_gibbs(kernel: GibbsKernel, x, f_values) -> float:
    """One-step expectation of the two-stage kernel from x = (x1, x2)."""
    f_values = np.asarray(f_values, dtype=float)
    if f_values.shape != kernel.grid.shape():
        raise InvalidInputError("test function shape does not match the joint grid")
    return kernel.apply_from_x2(float(x[1]), f_values)


def apply_gibbs_to_density(kernel: GibbsKernel, rho: GridDensity, f_values) -> float:
    f_values = np.asarray(f_values, dtype=float)
    rho2 = kernel.w1 @ rho.values
    g = kernel.apply_over_second(f_values)
    return float((kernel.w2 * rho2) @ g)


def iterate_kernel(kernel: Kernel, f_values, steps: int, max_steps: int = DEFAULT_MAX_ITER):
    """P^steps f on the grid; steps = 0 returns the input values unchanged."""
    if int(steps) != steps or steps < 0:
        raise InvalidInputError(f"step count must be a nonnegative integer, got {steps}")
    if steps > max_steps:
        raise ResourceLimitError(f"step count {steps} exceeds budget {max_steps}")
    out = np.array(
        _as_grid_values(kernel.grid, f_values) if kernel.grid.ndim == 1 else f_values,
        dtype=float,
    )
    for _ in range(int(steps)):
        out = kernel.apply_to_function(out)
    return out


def iterate_density(kernel: Kernel, rho: GridDensity, steps: int,
                    max_steps: int = DEFAULT_MAX_ITER) -> np.ndarray:
    """(rho P^steps) node values."""
    if int(steps) != steps or steps < 0:
        raise InvalidInputError(f"step count must be a nonnegative integer, got {steps}")
    if steps > max_steps:
        raise ResourceLimitError(f"step count {steps} exceeds budget {max_steps}")
    out = np.array(rho.values, dtype=float)
    for _ in range(int(steps)):
        out = kernel.propagate_density(out)
    return out


def iterate_point(kernel: HastingsKernel, x: float, steps: int) -> AtomPlusDensity:
    """P^steps(delta_x, .) with the surviving atom tracked explicitly."""
    m = AtomPlusDensity(kernel.grid, float(x), 1.0, np.zeros(kernel.grid.n_points))
    for _ in range(int(steps)):
        m = kernel.propagate_mixture(m)
    return m


def sample_step(kernel: Kernel, x, rng: np.random.Generator):
    """One transition; returns the new state only."""
    return sample_step_detail(kernel, x, rng)[0]


def sample_step_detail(kernel: Kernel, x, rng: np.random.Generator):
    """One transition returning (state, accepted, boundary_folded)."""
    if isinstance(kernel, GibbsKernel):
        u1, u2 = rng.uniform(), rng.uniform()
        c1 = kernel.conditional_first_given_second(float(x[1]))
        y1 = float(sample_from_grid_density(kernel.grid.axis1, c1, u1))
        c2 = kernel.conditional_second_given_first(y1)
        y2 = float(sample_from_grid_density(kernel.grid.axis2, c2, u2))
        return (y1, y2), True, False
    y, folded = kernel.proposal.sample(float(x), rng)
    u = rng.uniform()
    accept_prob = float(kernel.balancing.g(kernel.ratio_at(x, y)))
    if u < accept_prob:
        return y, True, folded
    return float(x), False, folded


def acceptance_rate_quadrature(kernel: HastingsKernel) -> float:
    """Stationary acceptance probability by quadrature."""
    return 1.0 - integrate_values(
        kernel.grid, kernel.target.values * kernel.rejection_vector
    )


def check_invariance(kernel: Kernel, candidate: Optional[GridDensity] = None) -> float:
    """Total-variation residual of one propagation step applied to a candidate
    invariant density (the kernel target by default)."""
    cand = kernel.target if candidate is None else candidate
    if cand.grid != kernel.grid:
        raise InvalidInputError("candidate density lives on a different grid")
    out = kernel.propagate_density(cand.values)
    diff = np.abs(out - cand.values)
    return integrate_values(kernel.grid, diff)


def _as_grid_values(grid: Grid1D, f) -> np.ndarray:
    if callable(f):
        return np.asarray(f(grid.nodes), dtype=float)
    f = np.asarray(f, dtype=float)
    if f.shape != grid.shape():
        raise InvalidInputError(f"function values shape {f.shape} != grid {grid.shape()}")
    return f
