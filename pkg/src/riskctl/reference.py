"""Grid-based backward-induction reference solver for the mean-CVaR instance.

For fixed xi the objective E[sum_m q_m + gamma*(xi + min(W_T - q_M - xi,0)/alpha)]
is solved by dynamic programming on a log-wealth grid.  One-period
conditional expectations use quadrature against a nonnegative series
tabulation of the jump-diffusion log-return density: for each candidate
risky weight the quadrature nodes map to log-wealth shifts, the shifted
point masses are binned onto the uniform grid (exactly reproducing linear
interpolation of the value function), and the resulting nonnegative,
unit-mass kernel is applied by FFT convolution.  That application is
bitwise-equivalent (to roundoff) to direct summation of the quadrature
rule; a test pins the agreement.

States below zero wealth leave the stochastic region: withdrawals are
forced to q_min and wealth accrues at the risk-free rate, so the
continuation value there is evaluated in closed form instead of gridded.
The outer maximization over xi scans a coarse grid and refines the
incumbent bracket by golden section (the inner value is concave in xi in
practice).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.fft import next_fast_len, rfft, irfft
from scipy.special import log_ndtr

from .errors import ConfigError, NumericError
from .recursion import ConstraintSpec
from .scenarios import KouParams, ScenarioSet, TimeGrid, generate_dataset

EVAL_SET_SEED = 907  # fixed seed of the forward-pass evaluation dataset
KERNEL_TRIM_MASS = 1e-14
DENSITY_SERIES_TAIL = 1e-12
DENSITY_NORM_TOL = 1e-8


@dataclass(frozen=True)
class GridSpec:
    """Discretization sizes and truncation choices for one refinement level."""

    n_quad: int   # risky log-return quadrature nodes on the main domain
    n_outer: int  # outer resolution label; xi grid size n_xi equals it
    n_q: int = 65
    n_p: int = 129
    wealth_center: float = math.log(100.0)
    wealth_halfwidth: float = 10.0
    quad_halfwidth: float = 8.0
    quad_ext_halfwidth: float = 16.0
    xi_domain: tuple[float, float] = (-5.0e5, 5.0e5)

    def __post_init__(self) -> None:
        if self.n_quad < 2 or self.n_outer < 2 or self.n_q < 2 or self.n_p < 2:
            raise ConfigError("grid node counts must be >= 2")

    @property
    def n_wealth(self) -> int:
        return 4 * self.n_quad

    @property
    def n_xi(self) -> int:
        return self.n_outer

    @property
    def label(self) -> str:
        return f"{self.n_quad}x{self.n_outer}"

    def wealth_log_grid(self) -> np.ndarray:
        return np.linspace(self.wealth_center - self.wealth_halfwidth,
                           self.wealth_center + self.wealth_halfwidth, self.n_wealth)

    def quad_grid(self) -> tuple[np.ndarray, float]:
        """Extended-domain log-return nodes (node exactly at zero) and spacing."""
        h = 2.0 * self.quad_halfwidth / self.n_quad
        n_side = int(round(self.quad_ext_halfwidth / h))
        nodes = (np.arange(-n_side, n_side + 1)) * h
        return nodes, h

    @classmethod
    def from_level(cls, level: int) -> "GridSpec":
        if level not in (512, 1024, 2048):
            raise ConfigError(f"unsupported refinement level {level}")
        # control grids doubled at the finest level so control-search error
        # stays subordinate to state-grid error
        if level == 2048:
            return cls(n_quad=2048, n_outer=2048, n_q=129, n_p=257)
        return cls(n_quad=level, n_outer=level)


# ---------------------------------------------------------------------------
# One-period log-return density (nonnegative series over jump counts)


def _emg_pos(eta: float, nu: np.ndarray, s: float) -> np.ndarray:
    """integral_0^inf eta*exp(-eta*u) * normpdf(nu - u; 0, s) du"""
    return eta * np.exp(eta * eta * s * s / 2.0 - eta * nu + log_ndtr(nu / s - eta * s))


def _emg_lin_pos(eta: float, nu: np.ndarray, s: float) -> np.ndarray:
    """integral_0^inf eta^2*u*exp(-eta*u) * normpdf(nu - u; 0, s) du"""
    log_e = eta * eta * s * s / 2.0 - eta * nu
    m = nu - eta * s * s
    z = m / s
    phi_term = np.exp(log_e - 0.5 * z * z) / math.sqrt(2.0 * math.pi)
    ndtr_term = np.sign(m) * np.exp(log_e + np.log(np.maximum(np.abs(m), 1e-300)) + log_ndtr(z))
    return eta * eta * (ndtr_term + s * phi_term)


def _double_exp_pdf(x: np.ndarray, p_up: float, eta1: float, eta2: float) -> np.ndarray:
    up = p_up * eta1 * np.exp(-eta1 * np.maximum(x, 0.0)) * (x > 0)
    dn = (1.0 - p_up) * eta2 * np.exp(eta2 * np.minimum(x, 0.0)) * (x < 0)
    mid = (x == 0) * 0.5 * (p_up * eta1 + (1.0 - p_up) * eta2)
    return up + dn + mid


@dataclass
class DensityModel:
    """Tabulated one-period log-return density plus its closed-form pieces."""

    params: KouParams
    dt: float
    nodes: np.ndarray
    values: np.ndarray
    spacing: float
    poisson_weights: np.ndarray
    numeric_terms: list = field(default_factory=list, repr=False)

    def integral(self) -> float:
        return float(np.trapezoid(self.values, dx=self.spacing))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        """Density at arbitrary points; numeric series terms interpolated."""
        x = np.asarray(x, dtype=np.float64)
        params, s = self.params, self.params.sigma * math.sqrt(self.dt)
        mu_d = (params.mu - params.lam * params.kappa - 0.5 * params.sigma**2) * self.dt
        nu = x - mu_d
        w = self.poisson_weights
        out = w[0] * np.exp(-0.5 * (nu / s) ** 2) / (s * math.sqrt(2 * math.pi))
        if len(w) > 1:
            out = out + w[1] * _density_term1(params, nu, s)
        if len(w) > 2:
            out = out + w[2] * _density_term2(params, nu, s)
        for n, tab in enumerate(self.numeric_terms, start=3):
            out = out + w[n] * np.interp(x, self.nodes, tab, left=0.0, right=0.0)
        return out


def _density_term1(params: KouParams, nu: np.ndarray, s: float) -> np.ndarray:
    return (params.p_up * _emg_pos(params.eta1, nu, s)
            + (1.0 - params.p_up) * _emg_pos(params.eta2, -nu, s))


def _density_term2(params: KouParams, nu: np.ndarray, s: float) -> np.ndarray:
    p, e1, e2 = params.p_up, params.eta1, params.eta2
    cross = e1 * e2 / (e1 + e2)
    return (p * p * _emg_lin_pos(e1, nu, s)
            + (1.0 - p) * (1.0 - p) * _emg_lin_pos(e2, -nu, s)
            + 2.0 * p * (1.0 - p) * cross
            * (_emg_pos(e1, nu, s) / e1 + _emg_pos(e2, -nu, s) / e2))


def build_density(params: KouParams, dt: float, grid: GridSpec) -> DensityModel:
    """Tabulate the density on the extended quadrature grid.

    Jump-count terms n <= 2 use closed forms (already convolved with the
    diffusion normal); higher terms are built by numeric self-convolution
    with the jump-size density and renormalized to unit mass.  The series
    stops once the cumulative Poisson weight exceeds 1 - 1e-12.
    """
    if params.sigma <= 0:
        raise ConfigError("density tabulation needs sigma > 0")
    nodes, h = grid.quad_grid()
    s = params.sigma * math.sqrt(dt)
    if s < 2.0 * h:
        raise ConfigError(
            f"quadrature spacing {h:.4g} too coarse for diffusion scale {s:.4g}")
    mu_d = (params.mu - params.lam * params.kappa - 0.5 * params.sigma**2) * dt
    nu = nodes - mu_d

    lam_dt = params.lam * dt
    w_n = math.exp(-lam_dt)
    weights = [w_n]
    total = w_n
    n = 0
    while total < 1.0 - DENSITY_SERIES_TAIL and n < 200:
        n += 1
        w_n = w_n * lam_dt / n
        weights.append(w_n)
        total += w_n
    weights = np.array(weights)

    values = weights[0] * np.exp(-0.5 * (nu / s) ** 2) / (s * math.sqrt(2 * math.pi))
    terms = []
    if len(weights) > 1:
        f1 = _density_term1(params, nu, s)
        values = values + weights[1] * f1
    if len(weights) > 2:
        f2 = _density_term2(params, nu, s)
        values = values + weights[2] * f2
    if len(weights) > 3:
        g_tab = _double_exp_pdf(nodes, params.p_up, params.eta1, params.eta2)
        prev = f2
        for k in range(3, len(weights)):
            conv = np.convolve(prev, g_tab, mode="same") * h
            total = np.trapezoid(conv, dx=h)
            if total <= 0:
                raise NumericError("self-convolution lost all mass")
            conv /= total
            terms.append(conv)
            values = values + weights[k] * conv
            prev = conv
    model = DensityModel(params=params, dt=dt, nodes=nodes, values=values,
                         spacing=h, poisson_weights=weights, numeric_terms=terms)
    if abs(model.integral() - 1.0) > DENSITY_NORM_TOL:
        raise NumericError(
            f"density normalization off by {model.integral() - 1.0:.3e}")
    if np.any(values < 0):
        raise NumericError("density tabulation went negative")
    return model


# ---------------------------------------------------------------------------
# Continuation operator: E[V(w * (p*Y1 + (1-p)*Rf))] on the log-wealth grid


@dataclass
class ContinuationOperator:
    """Batched one-period expectation for every candidate risky weight."""

    x: np.ndarray                 # log-wealth grid
    p_cands: np.ndarray
    kernel_fft: np.ndarray        # (n_p, L//2 + 1)
    fft_len: int
    pad_left: int
    pad_right: int
    out_start: int
    out_of_grid_fraction: float

    def apply(self, v: np.ndarray) -> np.ndarray:
        """(n_p, n_wealth) continuation values with edge-clamped extrapolation."""
        vp = np.concatenate([
            np.full(self.pad_left, v[0]), v, np.full(self.pad_right, v[-1])])
        vf = rfft(vp, self.fft_len)
        full = irfft(vf[None, :] * self.kernel_fft, self.fft_len, axis=1)
        return full[:, self.out_start:self.out_start + len(self.x)]


def build_continuation_operator(params: KouParams, dt: float, grid: GridSpec,
                                density: Optional[DensityModel]) -> ContinuationOperator:
    x = grid.wealth_log_grid()
    dx = x[1] - x[0]
    n = len(x)
    p_cands = np.linspace(0.0, 1.0, grid.n_p)
    rf_gross = math.exp(params.r_f * dt)

    if density is None:
        if not (params.sigma == 0.0 and params.lam == 0.0):
            raise ConfigError("need a density model unless the market is deterministic")
        nodes = np.array([(params.mu - 0.5 * params.sigma**2) * dt])
        masses = np.array([1.0])
    else:
        nodes = density.nodes
        masses = density.values * density.spacing
        masses[0] *= 0.5
        masses[-1] *= 0.5

    offsets, kernels = [], []
    for p in p_cands:
        shifts = np.log(p * np.exp(nodes) + (1.0 - p) * rf_gross)
        o = shifts / dx
        k = np.floor(o).astype(np.int64)
        frac = o - k
        lo = int(k.min())
        hi = int(k.max()) + 1
        kern = np.zeros(hi - lo + 1)
        np.add.at(kern, k - lo, masses * (1.0 - frac))
        np.add.at(kern, k - lo + 1, masses * frac)
        total = kern.sum()
        csum = np.cumsum(kern)
        first = int(np.searchsorted(csum, KERNEL_TRIM_MASS * total))
        last = int(np.searchsorted(csum, (1.0 - KERNEL_TRIM_MASS) * total))
        last = min(last, len(kern) - 1)
        kern = kern[first:last + 1]
        kern = kern / kern.sum()
        offsets.append(lo + first)
        kernels.append(kern)

    lo_all = min(offsets)
    hi_all = max(o + len(k) - 1 for o, k in zip(offsets, kernels))
    span = hi_all - lo_all + 1
    pad_left = max(0, -lo_all)
    pad_right = max(0, hi_all)
    fft_len = next_fast_len(n + pad_left + pad_right + span)
    kfft = np.empty((grid.n_p, fft_len // 2 + 1), dtype=np.complex128)
    for i, (o, kern) in enumerate(zip(offsets, kernels)):
        aligned = np.zeros(span)
        aligned[o - lo_all:o - lo_all + len(kern)] = kern
        kfft[i] = rfft(aligned[::-1], fft_len)
    out_start = pad_left + lo_all + span - 1

    # average kernel mass that would land outside the grid (clamped to edges)
    out_frac = 0.0
    idx = np.arange(n)
    for o, kern in zip(offsets, kernels):
        csum = np.concatenate([[0.0], np.cumsum(kern)])
        below = np.clip(-(idx + o), 0, len(kern))       # taps with i + o + t < 0
        above = np.clip(idx + o + len(kern) - n, 0, len(kern))
        out_frac += float(np.mean(csum[below] + (1.0 - csum[len(kern) - above])))
    out_frac /= len(kernels)

    return ContinuationOperator(x=x, p_cands=p_cands, kernel_fft=kfft, fft_len=fft_len,
                                pad_left=pad_left, pad_right=pad_right,
                                out_start=out_start, out_of_grid_fraction=out_frac)


def apply_kernels_direct(op_params: KouParams, dt: float, grid: GridSpec,
                         density: Optional[DensityModel], v: np.ndarray) -> np.ndarray:
    """Direct-summation reference for ContinuationOperator.apply (tests)."""
    x = grid.wealth_log_grid()
    rf_gross = math.exp(op_params.r_f * dt)
    if density is None:
        nodes = np.array([(op_params.mu - 0.5 * op_params.sigma**2) * dt])
        masses = np.array([1.0])
    else:
        nodes = density.nodes
        masses = density.values * density.spacing
        masses[0] *= 0.5
        masses[-1] *= 0.5
        keep = masses > 0
        nodes, masses = nodes[keep], masses[keep]
        masses = masses / masses.sum()
    p_cands = np.linspace(0.0, 1.0, grid.n_p)
    out = np.empty((grid.n_p, len(x)))
    for i, p in enumerate(p_cands):
        shifts = np.log(p * np.exp(nodes) + (1.0 - p) * rf_gross)
        pts = x[:, None] + shifts[None, :]
        out[i] = (np.interp(pts, x, v) * masses[None, :]).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# Backward induction


@dataclass
class DecumulationProblem:
    params: KouParams
    grid_time: TimeGrid
    cs: ConstraintSpec
    w0: float
    gamma: float = 1.0
    alpha: float = 0.05


@dataclass
class InnerSolution:
    value_at_w0: float
    v0: np.ndarray
    q_tables: Optional[np.ndarray]   # (M+1, n_wealth)
    p_tables: Optional[np.ndarray]   # (M, n_wealth)
    clamped_fraction: float


def _debt_continuation(prob: DecumulationProblem, xi: float, n_remaining: int,
                       b: np.ndarray) -> np.ndarray:
    """Value after a post-decision state b <= 0 with n_remaining periods left.

    Wealth accrues risk-free while the singleton constraint forces q_min
    withdrawals; terminal shortfall is penalized through the CVaR term.
    """
    r = prob.params.r_f * prob.grid_time.dt
    growth = math.exp(r * n_remaining)
    if r != 0.0:
        annuity = math.expm1(r * n_remaining) / math.expm1(r)
    else:
        annuity = float(n_remaining)
    w_T = b * growth - prob.cs.q_min * annuity
    tail = np.minimum(w_T - xi, 0.0)
    return (n_remaining * prob.cs.q_min + prob.gamma * xi
            + (prob.gamma / prob.alpha) * tail)


def solve_inner(xi: float, prob: DecumulationProblem, grid: GridSpec,
                op: ContinuationOperator, want_policy: bool = False) -> InnerSolution:
    """Backward induction at fixed xi.

    Terminal condition maximizes q + gamma*(xi + min(w - q - xi, 0)/alpha)
    over the admissible withdrawal grid (plus the interval-clipped kink
    candidate, where the piecewise-linear objective attains its maximum);
    interior steps maximize immediate withdrawal plus the quadrature
    expectation of the next value over the withdrawal and allocation grids.
    Ties break toward the smallest withdrawal and smallest risky weight.
    """
    x = op.x
    w = np.exp(x)
    M = prob.grid_time.num_periods
    cs = prob.cs
    g, a = prob.gamma, prob.alpha
    u = np.linspace(0.0, 1.0, grid.n_q)
    q_hi = np.clip(w, cs.q_min, cs.q_max)

    q_tables = np.empty((M + 1, len(x))) if want_policy else None
    p_tables = np.empty((M, len(x))) if want_policy else None

    # terminal: candidates are the uniform grid plus the exact kink w - xi
    qc = cs.q_min + (q_hi - cs.q_min)[:, None] * u[None, :]
    kink = np.clip(w - xi, cs.q_min, q_hi)[:, None]
    qc_T = np.concatenate([qc, kink], axis=1)
    vals = qc_T + g * xi + (g / a) * np.minimum(w[:, None] - qc_T - xi, 0.0)
    v = vals.max(axis=1)
    if want_policy:
        q_tables[M] = qc_T[np.arange(len(x)), vals.argmax(axis=1)]

    clamped = 0
    evaluations = 0
    x_lo, x_hi = x[0], x[-1]
    for m in range(M - 1, -1, -1):
        cont = op.apply(v)
        best_p = cont.argmax(axis=0)
        cv = cont[best_p, np.arange(len(x))]
        # withdrawal search at pre-decision nodes
        wq = w[:, None] - qc
        pos = wq > 0.0
        lw = np.log(np.where(pos, wq, 1.0))
        interp_vals = np.interp(lw, x, cv)
        debt_vals = _debt_continuation(prob, xi, M - m, np.minimum(wq, 0.0))
        cand = qc + np.where(pos, interp_vals, debt_vals)
        v = cand.max(axis=1)
        clamped += int(np.sum(pos & ((lw < x_lo) | (lw > x_hi))))
        evaluations += pos.size
        if want_policy:
            q_tables[m] = qc[np.arange(len(x)), cand.argmax(axis=1)]
            p_tables[m] = op.p_cands[best_p]

    value = float(np.interp(math.log(prob.w0), x, v))
    frac = clamped / evaluations if evaluations else 0.0
    frac = max(frac, op.out_of_grid_fraction)
    return InnerSolution(value_at_w0=value, v0=v, q_tables=q_tables,
                         p_tables=p_tables, clamped_fraction=frac)


# ---------------------------------------------------------------------------
# Outer xi search and the full reference solve


@dataclass
class ReferenceSolution:
    grid: GridSpec
    value: float
    xi_star: float
    mean_withdrawal: float
    cvar_terminal: float
    q_tables: np.ndarray
    p_tables: np.ndarray
    wealth_log_grid: np.ndarray
    clamped_fraction: float
    xi_evaluations: int


def solve_reference(prob: DecumulationProblem, grid: GridSpec,
                    coarse_points: int = 33, xi_tol: float = 1e-3,
                    eval_paths: int = 256_000, eval_seed: int = EVAL_SET_SEED,
                    eval_set: Optional[ScenarioSet] = None) -> ReferenceSolution:
    """Maximize the inner value over xi and evaluate the resulting policy.

    The xi scan uses min(coarse_points, n_xi) nodes of the configured xi
    grid followed by golden-section refinement around the incumbent to
    ``xi_tol`` absolute.  Summary statistics come from a forward pass of
    the reference policy tables on a fixed Monte Carlo evaluation set.
    """
    if prob.params.sigma > 0:
        density = build_density(prob.params, prob.grid_time.dt, grid)
    else:
        density = None
    op = build_continuation_operator(prob.params, prob.grid_time.dt, grid, density)

    cache: dict[float, float] = {}

    def val(xi: float) -> float:
        if xi not in cache:
            cache[xi] = solve_inner(xi, prob, grid, op).value_at_w0
        return cache[xi]

    lo, hi = grid.xi_domain
    xs = np.linspace(lo, hi, min(coarse_points, grid.n_xi))
    vs = [val(x) for x in xs]
    i = int(np.argmax(vs))
    a = xs[max(i - 1, 0)]
    b = xs[min(i + 1, len(xs) - 1)]
    xi_star = _golden_max_scalar(val, a, b, xi_tol)

    final = solve_inner(xi_star, prob, grid, op, want_policy=True)
    if final.clamped_fraction > 1e-3:
        warnings.warn(
            f"reference solve clamped {final.clamped_fraction:.2%} of evaluations",
            stacklevel=2)

    if eval_set is None:
        eval_set = generate_dataset(prob.params, prob.grid_time, eval_paths, eval_seed)
    stats = evaluate_reference_policy(final, prob, grid, xi_star, eval_set)
    return ReferenceSolution(
        grid=grid,
        value=final.value_at_w0,
        xi_star=xi_star,
        mean_withdrawal=stats["mean_withdrawal"],
        cvar_terminal=stats["cvar_terminal"],
        q_tables=final.q_tables,
        p_tables=final.p_tables,
        wealth_log_grid=op.x,
        clamped_fraction=final.clamped_fraction,
        xi_evaluations=len(cache),
    )


def _golden_max_scalar(f, a: float, b: float, tol: float) -> float:
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return c if fc > fd else d


def _policy_lookup(table: np.ndarray, x: np.ndarray, w: np.ndarray,
                   fallback: float) -> np.ndarray:
    pos = w > 0
    lw = np.log(np.where(pos, w, 1.0))
    vals = np.interp(lw, x, table)
    return np.where(pos, vals, fallback)


def rollout_reference_policy(sol_q: np.ndarray, sol_p: np.ndarray, x: np.ndarray,
                             prob: DecumulationProblem, returns: np.ndarray
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Total withdrawals and terminal wealth per path under the table policy."""
    K, M, _ = returns.shape
    cs = prob.cs
    w = np.full(K, prob.w0)
    q_sum = np.zeros(K)
    for m in range(M + 1):
        q = _policy_lookup(sol_q[m], x, w, cs.q_min)
        q = np.clip(q, cs.q_min, np.clip(w, cs.q_min, cs.q_max))
        q_sum += q
        wp = w - q
        if m < M:
            pw = np.clip(_policy_lookup(sol_p[m], x, wp, 0.0), 0.0, 1.0)
            y = returns[:, m, :]
            growth = np.where(wp > 0, pw * y[:, 0] + (1.0 - pw) * y[:, 1], y[:, 1])
            w = wp * growth
    return q_sum, wp


def evaluate_reference_policy(inner: InnerSolution, prob: DecumulationProblem,
                              grid: GridSpec, xi: float, eval_set: ScenarioSet) -> dict:
    x = grid.wealth_log_grid()
    q_sum, w_T = rollout_reference_policy(inner.q_tables, inner.p_tables, x, prob,
                                          eval_set.data)
    M = prob.grid_time.num_periods
    tail_n = max(1, int(math.ceil(prob.alpha * len(w_T))))
    worst = np.sort(w_T)[:tail_n]
    value_mc = float(np.mean(q_sum + prob.gamma * (xi + np.minimum(w_T - xi, 0.0) / prob.alpha)))
    return {
        "mean_withdrawal": float(q_sum.mean()) / (M + 1),
        "cvar_terminal": float(worst.mean()),
        "value_mc": value_mc,
    }


# ---------------------------------------------------------------------------
# Exports


def policy_heatmap(tables: np.ndarray, x: np.ndarray, w_points: np.ndarray) -> np.ndarray:
    """Nearest-node sampling of policy tables onto a plotting wealth grid.

    Nearest lookup (not interpolation) preserves bang-bang values exactly.
    """
    dx = x[1] - x[0]
    lw = np.log(np.maximum(w_points, np.exp(x[0])))
    idx = np.clip(np.round((lw - x[0]) / dx).astype(np.int64), 0, len(x) - 1)
    return tables[:, idx]


def heatmap_csv(times: np.ndarray, w_points: np.ndarray, values: np.ndarray,
                value_name: str) -> str:
    lines = [f"t,w,{value_name}"]
    for ti, t in enumerate(times):
        for wi, wv in enumerate(w_points):
            lines.append(f"{t!r},{wv!r},{values[ti, wi]!r}")
    return "\n".join(lines) + "\n"


def bang_bang_fraction(q_tables: np.ndarray, cs: ConstraintSpec, tol: float = 1e-6) -> float:
    """Fraction of policy cells within tol of either withdrawal bound."""
    near = (np.abs(q_tables - cs.q_min) < tol) | (np.abs(q_tables - cs.q_max) < tol)
    return float(near.mean())


def convergence_table_csv(solutions: list[ReferenceSolution]) -> str:
    lines = ["grid_size,value,mean_withdrawal,cvar_5pct_terminal,xi_star"]
    for sol in solutions:
        lines.append(
            f"{sol.grid.label},{sol.value:.2f},{sol.mean_withdrawal:.2f},"
            f"{sol.cvar_terminal:.2f},{sol.xi_star:.2f}")
    return "\n".join(lines) + "\n"
