"""Admissible actions, update maps, and the two-step controlled recursion.

Each intervention time applies a pre-decision action q (state adjustment,
interval-constrained by the current state) followed by a post-decision
action p (allocation on the simplex); the state then evolves to the next
intervention time under the realized exogenous return vector.  The final
time applies only the pre-decision action.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ConstraintViolationError, NumericError

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class ConstraintSpec:
    """Bounds for the pre-decision interval and the allocation simplex."""

    q_min: float
    q_max: float
    num_assets: int = 2

    def __post_init__(self) -> None:
        if self.q_min > self.q_max:
            raise ConfigError("q_min must not exceed q_max")
        if self.num_assets < 1:
            raise ConfigError("need at least one asset")


def admissible_interval(w: float, cs: ConstraintSpec) -> tuple[float, float]:
    """Admissible pre-decision interval at state w.

    [q_min, q_max] when w >= q_max, [q_min, w] when q_min < w < q_max, and
    the singleton {q_min} when w <= q_min (the minimum action is forced even
    if the state cannot cover it).
    """
    if w >= cs.q_max:
        return (cs.q_min, cs.q_max)
    if w > cs.q_min:
        return (cs.q_min, float(w))
    return (cs.q_min, cs.q_min)


def in_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p)
    return bool(np.all(p >= -tol) and abs(float(p.sum()) - 1.0) <= tol)


@dataclass(frozen=True)
class DynamicsSpec:
    """Update maps w+ = update_q(t, w, q) and w' = update_p(t, w+, p, y)."""

    update_q: Callable[[float, float, float], float]
    update_p: Callable[[float, float, np.ndarray, np.ndarray], float]
    label: str


def _decumulation_update_q(t: float, w: float, q: float) -> float:
    return w - q


def _decumulation_update_p(t: float, w_post: float, p: np.ndarray, y: np.ndarray) -> float:
    # Liquidation at depletion: non-positive balances forgo allocation and
    # accrue at the risk-free (second) component.  Continuous at zero.
    if w_post > 0.0:
        return w_post * float(np.dot(p, y))
    return w_post * float(y[-1])


def decumulation_dynamics() -> DynamicsSpec:
    return DynamicsSpec(
        update_q=_decumulation_update_q,
        update_p=_decumulation_update_p,
        label="decumulation",
    )


def step_pre(t: float, w: float, q: float, cs: ConstraintSpec, dyn: DynamicsSpec) -> float:
    lo, hi = admissible_interval(w, cs)
    if not (lo - 1e-9 <= q <= hi + 1e-9):
        raise ConstraintViolationError(f"q={q} outside [{lo}, {hi}] at w={w}")
    return dyn.update_q(t, w, q)


def step_post(
    t: float, w_post: float, p: np.ndarray, y: np.ndarray, cs: ConstraintSpec, dyn: DynamicsSpec
) -> float:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (cs.num_assets,):
        raise ConstraintViolationError(f"allocation has shape {p.shape}, want ({cs.num_assets},)")
    if not in_simplex(p):
        raise ConstraintViolationError(f"allocation {p} is not on the simplex")
    return dyn.update_p(t, w_post, p, np.asarray(y, dtype=np.float64))


@dataclass
class StatePath:
    """One realized trajectory of the controlled recursion."""

    w_pre: np.ndarray  # (M+1,)
    w_post: np.ndarray  # (M+1,)
    q_taken: np.ndarray  # (M+1,)
    p_taken: np.ndarray  # (M, d_a)

    @property
    def num_periods(self) -> int:
        return len(self.w_pre) - 1

    @property
    def terminal_wealth(self) -> float:
        return float(self.w_post[-1])


def roll_path(
    policy,
    path_returns: np.ndarray,
    w0: float,
    times: Sequence[float],
    cs: ConstraintSpec,
    dyn: DynamicsSpec,
) -> StatePath:
    """Apply a feedback policy along one return path.

    ``policy`` supplies actions via policy.action_q(t, w) and
    policy.action_p(t, w); actions are validated against the constraint
    sets, and a non-finite state aborts with the offending period.
    """
    path_returns = np.asarray(path_returns, dtype=np.float64)
    M = path_returns.shape[0]
    if len(times) != M + 1:
        raise ConfigError(f"times has {len(times)} entries, returns imply {M + 1}")
    w_pre = np.empty(M + 1)
    w_post = np.empty(M + 1)
    q_taken = np.empty(M + 1)
    p_taken = np.empty((M, cs.num_assets))
    w = float(w0)
    for m in range(M + 1):
        t = float(times[m])
        w_pre[m] = w
        q = float(policy.action_q(t, w))
        q_taken[m] = q
        wp = step_pre(t, w, q, cs, dyn)
        w_post[m] = wp
        if not np.isfinite(wp):
            raise NumericError(f"non-finite state at period {m}")
        if m < M:
            p = np.asarray(policy.action_p(t, wp), dtype=np.float64)
            p_taken[m] = p
            w = step_post(t, wp, p, path_returns[m], cs, dyn)
            if not np.isfinite(w):
                raise NumericError(f"non-finite state after period {m}")
    return StatePath(w_pre=w_pre, w_post=w_post, q_taken=q_taken, p_taken=p_taken)


@dataclass(frozen=True)
class ConstantPolicy:
    """Fixed (q, p) regardless of state, clipped to feasibility for q."""

    q: float
    p: np.ndarray
    cs: ConstraintSpec

    def action_q(self, t: float, w: float) -> float:
        lo, hi = admissible_interval(w, self.cs)
        return min(max(self.q, lo), hi)

    def action_p(self, t: float, w: float) -> np.ndarray:
        return self.p


# ---------------------------------------------------------------------------
# Performance vectors


@dataclass(frozen=True)
class PerformanceLayout:
    """Named-slot descriptor mapping slots to index ranges of a flat vector.

    Slot names: "withdrawals" (M+1), "terminal_wealth" (1), "w_post_seq"
    (w_post[0..M-1]), "w_pre_seq" (w_pre[1..M]), "w_pre_all"/"w_post_all"
    (M+1 each), "allocations" (M*d_a).
    """

    name: str
    num_periods: int
    num_assets: int
    slots: dict = field(repr=False)

    @property
    def dim(self) -> int:
        return max(sl.stop for sl in self.slots.values())

    def slice_of(self, slot: str) -> slice:
        try:
            return self.slots[slot]
        except KeyError:
            raise ConfigError(f"layout '{self.name}' has no slot '{slot}'") from None

    def has_slot(self, slot: str) -> bool:
        return slot in self.slots


def decumulation_layout(num_periods: int, num_assets: int = 2) -> PerformanceLayout:
    """(q_0..q_M, W(T+)): dimension M + 2."""
    M = num_periods
    return PerformanceLayout(
        name="decumulation",
        num_periods=M,
        num_assets=num_assets,
        slots={"withdrawals": slice(0, M + 1), "terminal_wealth": slice(M + 1, M + 2)},
    )


def quadratic_variation_layout(num_periods: int, num_assets: int = 2) -> PerformanceLayout:
    """(w_post[0..M-1], w_pre[1..M]): dimension 2M."""
    M = num_periods
    return PerformanceLayout(
        name="quadratic_variation",
        num_periods=M,
        num_assets=num_assets,
        slots={"w_post_seq": slice(0, M), "w_pre_seq": slice(M, 2 * M)},
    )


def full_layout(num_periods: int, num_assets: int = 2) -> PerformanceLayout:
    """All intervention-time states and actions: dimension 3(M+1) + M*d_a."""
    M, d_a = num_periods, num_assets
    n1 = M + 1
    return PerformanceLayout(
        name="full",
        num_periods=M,
        num_assets=d_a,
        slots={
            "w_pre_all": slice(0, n1),
            "w_post_all": slice(n1, 2 * n1),
            "withdrawals": slice(2 * n1, 3 * n1),
            "allocations": slice(3 * n1, 3 * n1 + M * d_a),
        },
    )


LAYOUTS = {
    "decumulation": decumulation_layout,
    "quadratic_variation": quadratic_variation_layout,
    "full": full_layout,
}


def layout_by_name(name: str, num_periods: int, num_assets: int = 2) -> PerformanceLayout:
    try:
        factory = LAYOUTS[name]
    except KeyError:
        raise ConfigError(f"unknown performance layout '{name}'") from None
    return factory(num_periods, num_assets)


def _slot_values(path: StatePath, slot: str) -> np.ndarray:
    M = path.num_periods
    if slot == "withdrawals":
        return path.q_taken
    if slot == "terminal_wealth":
        return np.array([path.w_post[M]])
    if slot == "w_post_seq":
        return path.w_post[:M]
    if slot == "w_pre_seq":
        return path.w_pre[1:]
    if slot == "w_pre_all":
        return path.w_pre
    if slot == "w_post_all":
        return path.w_post
    if slot == "allocations":
        return path.p_taken.reshape(-1)
    raise ConfigError(f"unknown slot '{slot}'")


def extract_performance(path: StatePath, layout: PerformanceLayout) -> np.ndarray:
    """Flatten the requested state/action statistics into one vector."""
    out = np.empty(layout.dim)
    for slot, sl in layout.slots.items():
        vals = _slot_values(path, slot)
        if len(vals) != sl.stop - sl.start:
            raise ConfigError(
                f"slot '{slot}' has {len(vals)} values for range {sl} in layout '{layout.name}'"
            )
        out[sl] = vals
    return out


def state_bounds_report(paths: Sequence[StatePath], w_min: float, w_max: float) -> float:
    """Fraction of visited pre/post states outside [w_min, w_max].

    Diagnostic for the bounded-state modelling assumption; nothing is
    clamped, callers decide what fraction is tolerable.
    """
    total = 0
    outside = 0
    for path in paths:
        states = np.concatenate([path.w_pre, path.w_post])
        total += states.size
        outside += int(np.sum((states < w_min) | (states > w_max)))
    return outside / total if total else 0.0


def paths_to_csv(paths: Sequence[StatePath]) -> str:
    """One row per (path, period): states, action, and allocation weights."""
    buf = io.StringIO()
    d_a = paths[0].p_taken.shape[1] if paths else 0
    alloc_cols = ",".join(f"p_{i}" for i in range(d_a))
    buf.write(f"path,period,w_pre,q,w_post{',' if alloc_cols else ''}{alloc_cols}\n")
    for k, path in enumerate(paths):
        M = path.num_periods
        for m in range(M + 1):
            row = f"{k},{m},{path.w_pre[m]!r},{path.q_taken[m]!r},{path.w_post[m]!r}"
            if d_a:
                if m < M:
                    row += "," + ",".join(repr(v) for v in path.p_taken[m])
                else:
                    row += "," * d_a
            buf.write(row + "\n")
    return buf.getvalue()
