"""Reward and risk templates composed into the scalarized criterion.

The criterion is H(xi, s, s_bar) = R(s) + gamma * L(xi, s, s_bar), where s
is a performance vector, xi ranges over a compact interval (a singleton
for templates without an auxiliary variable), and s_bar is an optional
moment vector estimated by the batch sample average.  Supported risks:

* cvar(alpha):           L = xi + min(s_T - xi, 0) / alpha
* bpoe(threshold):       L = -max(1 - (s_T - D) / (xi - D), 0)
* quadratic_variation:   L = -sum_m (w_pre[m+1] - w_post[m])^2
* variance:              L = -(s_T - xi)^2
* semi_variance:         L = -min(s_T - s_bar, 0)^2, s_bar = E[s_T]

All min/max kinks use the zero-derivative-at-the-kink convention so that
training gradients are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError
from .recursion import PerformanceLayout

BPOE_GAP = 1e-6  # keeps xi strictly above the bpoe threshold


# ---------------------------------------------------------------------------
# Templates


@dataclass(frozen=True)
class RewardTemplate:
    kind: str
    kappa_target: float = 0.0
    lambda_weight: float = 0.0
    utility: Optional[Callable[[np.ndarray], np.ndarray]] = None
    utility_grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    KINDS = ("cumulative", "linear_terminal", "quadratic", "one_sided_quadratic",
             "terminal_utility")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown reward kind '{self.kind}'")
        if self.kind == "terminal_utility" and self.utility is None:
            raise ConfigError("terminal_utility reward needs a utility callable")

    def required_slots(self) -> tuple[str, ...]:
        if self.kind == "cumulative":
            return ("withdrawals",)
        return ("terminal_wealth",)

    def values(self, slots: dict) -> np.ndarray:
        if self.kind == "cumulative":
            return slots["withdrawals"].sum(axis=1)
        s_T = slots["terminal_wealth"]
        if self.kind == "linear_terminal":
            return s_T.copy()
        if self.kind == "quadratic":
            return -((s_T - self.kappa_target) ** 2)
        if self.kind == "one_sided_quadratic":
            short = np.minimum(s_T - self.kappa_target, 0.0)
            return -(short**2) + self.lambda_weight * s_T
        return self.utility(s_T)

    def add_grads(self, slots: dict, grads: dict, scale: float) -> None:
        """Accumulate d(mean reward)/d(slot) * scale into ``grads``."""
        if self.kind == "cumulative":
            grads["withdrawals"] += scale
            return
        s_T = slots["terminal_wealth"]
        if self.kind == "linear_terminal":
            grads["terminal_wealth"] += scale
        elif self.kind == "quadratic":
            grads["terminal_wealth"] += scale * (-2.0 * (s_T - self.kappa_target))
        elif self.kind == "one_sided_quadratic":
            short = np.minimum(s_T - self.kappa_target, 0.0)
            grads["terminal_wealth"] += scale * (-2.0 * short + self.lambda_weight)
        else:
            if self.utility_grad is None:
                raise ConfigError("terminal_utility reward has no gradient callable")
            grads["terminal_wealth"] += scale * self.utility_grad(s_T)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "quadratic":
            d["kappa_target"] = self.kappa_target
        elif self.kind == "one_sided_quadratic":
            d["kappa_target"] = self.kappa_target
            d["lambda_weight"] = self.lambda_weight
        elif self.kind == "terminal_utility":
            raise ConfigError("terminal_utility rewards are not config-serializable")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RewardTemplate":
        return cls(
            kind=d["kind"],
            kappa_target=float(d.get("kappa_target", 0.0)),
            lambda_weight=float(d.get("lambda_weight", 0.0)),
        )


@dataclass(frozen=True)
class RiskTemplate:
    kind: str
    alpha: float = 0.05
    threshold: float = 0.0  # bpoe exceedance level D
    xi_domain: tuple[float, float] = (0.0, 0.0)

    KINDS = ("cvar", "bpoe", "quadratic_variation", "variance", "semi_variance")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown risk kind '{self.kind}'")
        lo, hi = self.xi_domain
        if lo > hi:
            raise ConfigError("xi domain must be a nonempty interval")
        if self.kind == "cvar" and not 0.0 < self.alpha < 1.0:
            raise ConfigError("cvar needs alpha in (0, 1)")
        if self.kind == "bpoe":
            if lo <= self.threshold:
                object.__setattr__(
                    self, "xi_domain", (self.threshold + BPOE_GAP, max(hi, self.threshold + BPOE_GAP))
                )
        if self.kind in ("quadratic_variation", "semi_variance") and (lo, hi) != (0.0, 0.0):
            raise ConfigError(f"{self.kind} uses the singleton xi domain {{0}}")

    @property
    def xi_free(self) -> bool:
        lo, hi = self.xi_domain
        return hi > lo

    @property
    def moment_dim(self) -> int:
        return 1 if self.kind == "semi_variance" else 0

    def required_slots(self) -> tuple[str, ...]:
        if self.kind == "quadratic_variation":
            return ("w_post_seq", "w_pre_seq")
        return ("terminal_wealth",)

    def check_xi(self, xi: float) -> None:
        lo, hi = self.xi_domain
        if not lo - 1e-12 <= xi <= hi + 1e-12:
            raise ConfigError(f"xi={xi} outside domain [{lo}, {hi}]")

    def sample_feature(self, slots: dict) -> np.ndarray:
        """Per-sample scalar the loss depends on."""
        if self.kind == "quadratic_variation":
            d = slots["w_pre_seq"] - slots["w_post_seq"]
            return (d * d).sum(axis=-1)
        return slots["terminal_wealth"]

    def psi(self, slots: dict) -> np.ndarray:
        """Moment-map values, shape (K, d_psi)."""
        if self.kind == "semi_variance":
            return slots["terminal_wealth"][:, None]
        return np.empty((len(self.sample_feature(slots)), 0))

    def loss(self, xi: float, feature: np.ndarray, s_bar: np.ndarray) -> np.ndarray:
        if self.kind == "cvar":
            return xi + np.minimum(feature - xi, 0.0) / self.alpha
        if self.kind == "bpoe":
            u = (feature - self.threshold) / (xi - self.threshold)
            return -np.maximum(1.0 - u, 0.0)
        if self.kind == "quadratic_variation":
            return -feature
        if self.kind == "variance":
            return -((feature - xi) ** 2)
        # semi_variance
        short = np.minimum(feature - float(s_bar[0]), 0.0)
        return -(short**2)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "xi_domain": list(self.xi_domain)}
        if self.kind == "cvar":
            d["alpha"] = self.alpha
        elif self.kind == "bpoe":
            d["threshold"] = self.threshold
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RiskTemplate":
        return cls(
            kind=d["kind"],
            alpha=float(d.get("alpha", 0.05)),
            threshold=float(d.get("threshold", 0.0)),
            xi_domain=tuple(d.get("xi_domain", (0.0, 0.0))),
        )


@dataclass(frozen=True)
class ObjectiveSpec:
    """H = reward + gamma * risk over a given performance layout."""

    layout: PerformanceLayout
    reward: RewardTemplate
    risk: RiskTemplate
    gamma: float

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        for slot in self.reward.required_slots() + self.risk.required_slots():
            if not self.layout.has_slot(slot):
                raise ConfigError(
                    f"objective needs slot '{slot}' absent from layout '{self.layout.name}'"
                )

    def slots_from_matrix(self, S: np.ndarray) -> dict:
        """View a (K, d) batch of performance vectors as named slot arrays."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        if S.shape[1] != self.layout.dim:
            raise ConfigError(
                f"performance vectors have dim {S.shape[1]}, layout wants {self.layout.dim}"
            )
        out = {}
        for slot, sl in self.layout.slots.items():
            block = S[:, sl]
            out[slot] = block[:, 0] if slot == "terminal_wealth" else block
        return out

    def to_dict(self) -> dict:
        return {
            "layout": self.layout.name,
            "reward": self.reward.to_dict(),
            "risk": self.risk.to_dict(),
            "gamma": self.gamma,
        }


def mean_cvar_objective(layout: PerformanceLayout, alpha: float = 0.05, gamma: float = 1.0,
                        xi_domain: tuple[float, float] = (-5.0e5, 5.0e5)) -> ObjectiveSpec:
    """Expected cumulative withdrawals plus gamma * CVaR_alpha(terminal wealth)."""
    return ObjectiveSpec(
        layout=layout,
        reward=RewardTemplate(kind="cumulative"),
        risk=RiskTemplate(kind="cvar", alpha=alpha, xi_domain=xi_domain),
        gamma=gamma,
    )


# ---------------------------------------------------------------------------
# Evaluation


def batch_moments(spec: ObjectiveSpec, slots: dict) -> np.ndarray:
    """Sample-average moment vector over the batch (possibly empty)."""
    psi = spec.risk.psi(slots)
    return psi.mean(axis=0) if psi.shape[1] else np.empty(0)


def batch_objective(spec: ObjectiveSpec, xi: float, slots: dict,
                    s_bar: Optional[np.ndarray] = None) -> float:
    """Mean of H over the batch; two passes when a moment map is present."""
    spec.risk.check_xi(xi)
    if s_bar is None:
        s_bar = batch_moments(spec, slots)
    r = spec.reward.values(slots)
    l = spec.risk.loss(xi, spec.risk.sample_feature(slots), s_bar)
    return float(np.mean(r + spec.gamma * l))


def eval_H(spec: ObjectiveSpec, xi: float, s: np.ndarray, s_bar: np.ndarray = None) -> float:
    """Scalarized criterion at a single performance vector."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ConfigError("performance vector must be finite")
    slots = spec.slots_from_matrix(s[None, :])
    if s_bar is None:
        s_bar = batch_moments(spec, slots)
    return batch_objective(spec, xi, slots, s_bar=np.asarray(s_bar, dtype=np.float64))


def empirical_objective(spec: ObjectiveSpec, xi: float, S_batch: np.ndarray) -> float:
    """Sample-average objective over K performance vectors (moments first)."""
    S_batch = np.atleast_2d(np.asarray(S_batch, dtype=np.float64))
    if S_batch.shape[0] < 1:
        raise ConfigError("empty batch")
    return batch_objective(spec, xi, spec.slots_from_matrix(S_batch))


def _golden_max(f: Callable[[float], float], lo: float, hi: float,
                tol: float = 1e-10, max_iter: int = 200) -> tuple[float, float]:
    """Golden-section maximization of a unimodal function on [lo, hi]."""
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol * max(1.0, abs(a) + abs(b)):
            break
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    xi = c if fc > fd else d
    return float(xi), float(max(fc, fd))


def maximize_xi(spec: ObjectiveSpec, S_batch: np.ndarray,
                method: str = "auto", grid_points: int = 2001) -> tuple[float, float]:
    """Exact 1D maximization of the empirical objective over xi.

    cvar and variance objectives are concave in xi, bpoe is concave after
    the substitution t = 1/(xi - D); those use golden-section.  ``grid``
    forces a dense scan followed by local refinement.
    """
    S_batch = np.atleast_2d(np.asarray(S_batch, dtype=np.float64))
    slots = spec.slots_from_matrix(S_batch)
    s_bar = batch_moments(spec, slots)
    lo, hi = spec.risk.xi_domain
    if not spec.risk.xi_free:
        return lo, batch_objective(spec, lo, slots, s_bar)

    def value_at(xi: float) -> float:
        return batch_objective(spec, xi, slots, s_bar)

    if method == "grid":
        xs = np.linspace(lo, hi, grid_points)
        vals = np.array([value_at(x) for x in xs])
        i = int(np.argmax(vals))
        a = xs[max(i - 1, 0)]
        b = xs[min(i + 1, len(xs) - 1)]
        return _golden_max(value_at, a, b)
    if spec.risk.kind == "bpoe":
        D = spec.risk.threshold
        t_lo, t_hi = 1.0 / (hi - D), 1.0 / (lo - D)
        t_star, val = _golden_max(lambda t: value_at(D + 1.0 / t), t_lo, t_hi, tol=1e-14)
        return D + 1.0 / t_star, val
    return _golden_max(value_at, lo, hi)


def sorted_tail_cvar(samples: np.ndarray, alpha: float) -> tuple[float, float]:
    """Exact empirical Rockafellar-Uryasev optimum from the sorted sample.

    Returns (alpha-quantile xi*, sup value).  Independent of the 1D-solver
    route, used as its oracle.
    """
    s = np.sort(np.asarray(samples, dtype=np.float64))
    K = len(s)
    j = int(np.ceil(alpha * K))
    xi = s[j - 1] if j >= 1 else s[0]
    value = xi + np.minimum(s - xi, 0.0).sum() / (alpha * K)
    return float(xi), float(value)


# ---------------------------------------------------------------------------
# Batch gradients (seeds for reverse-mode training)


def objective_grads(spec: ObjectiveSpec, xi: float, slots: dict
                    ) -> tuple[float, dict, float]:
    """Value, d(mean H)/d(slot arrays), and d(mean H)/d(xi) for a batch.

    The moment vector of semi_variance is the batch average, so its
    gradient includes the coupling through s_bar.
    """
    risk = spec.risk
    feature = risk.sample_feature(slots)
    K = len(feature)
    s_bar = batch_moments(spec, slots)
    r = spec.reward.values(slots)
    l = risk.loss(xi, feature, s_bar)
    value = float(np.mean(r + spec.gamma * l))

    grads = {slot: np.zeros_like(np.atleast_1d(arr), dtype=np.float64)
             for slot, arr in slots.items()}
    spec.reward.add_grads(slots, grads, 1.0 / K)

    g = spec.gamma
    d_xi = 0.0
    if risk.kind == "cvar":
        active = feature < xi
        grads["terminal_wealth"] += (g / (risk.alpha * K)) * active
        d_xi = g * (1.0 - active.mean() / risk.alpha)
    elif risk.kind == "bpoe":
        D = risk.threshold
        active = feature < xi
        grads["terminal_wealth"] += (g / (K * (xi - D))) * active
        d_xi = float(g * np.sum(-(feature - D) * active) / (K * (xi - D) ** 2))
    elif risk.kind == "variance":
        grads["terminal_wealth"] += (-2.0 * g / K) * (feature - xi)
        d_xi = float(2.0 * g * np.mean(feature - xi))
    elif risk.kind == "semi_variance":
        short = np.minimum(feature - float(s_bar[0]), 0.0)
        grads["terminal_wealth"] += (-2.0 * g / K) * (short - short.mean())
    else:  # quadratic_variation
        d = slots["w_pre_seq"] - slots["w_post_seq"]
        grads["w_pre_seq"] += (-2.0 * g / K) * d
        grads["w_post_seq"] += (2.0 * g / K) * d
    return value, grads, float(d_xi)


def objective_grads_batched(spec: ObjectiveSpec, xi: np.ndarray, slots: dict
                            ) -> tuple[np.ndarray, dict, np.ndarray]:
    """objective_grads over stacked runs: slot arrays carry a leading run axis.

    ``xi`` has shape (R,); returns per-run values, per-run slot gradients,
    and per-run xi gradients.  Mirrors objective_grads formula for formula.
    """
    risk = spec.risk
    feature = risk.sample_feature(slots)          # (R, K)
    R, K = feature.shape
    xi_col = xi[:, None]
    g = spec.gamma

    if spec.reward.kind == "cumulative":
        r = slots["withdrawals"].sum(axis=-1)
    else:
        r = spec.reward.values({"terminal_wealth": slots["terminal_wealth"]})

    grads = {slot: np.zeros_like(arr, dtype=np.float64) for slot, arr in slots.items()}
    spec.reward.add_grads(slots, grads, 1.0 / K)

    d_xi = np.zeros(R)
    if risk.kind == "cvar":
        l = xi_col + np.minimum(feature - xi_col, 0.0) / risk.alpha
        active = feature < xi_col
        grads["terminal_wealth"] += (g / (risk.alpha * K)) * active
        d_xi = g * (1.0 - active.mean(axis=-1) / risk.alpha)
    elif risk.kind == "bpoe":
        D = risk.threshold
        l = -np.maximum(1.0 - (feature - D) / (xi_col - D), 0.0)
        active = feature < xi_col
        grads["terminal_wealth"] += (g / K) * active / (xi_col - D)
        d_xi = g * np.sum(-(feature - D) * active, axis=-1) / (K * (xi - D) ** 2)
    elif risk.kind == "variance":
        l = -((feature - xi_col) ** 2)
        grads["terminal_wealth"] += (-2.0 * g / K) * (feature - xi_col)
        d_xi = 2.0 * g * np.mean(feature - xi_col, axis=-1)
    elif risk.kind == "semi_variance":
        s_bar = feature.mean(axis=-1, keepdims=True)
        short = np.minimum(feature - s_bar, 0.0)
        l = -(short**2)
        grads["terminal_wealth"] += (-2.0 * g / K) * (short - short.mean(axis=-1, keepdims=True))
    else:  # quadratic_variation
        d = slots["w_pre_seq"] - slots["w_post_seq"]
        l = -(d * d).sum(axis=-1)
        grads["w_pre_seq"] += (-2.0 * g / K) * d
        grads["w_post_seq"] += (2.0 * g / K) * d
    value = np.mean(r + g * l, axis=-1)
    return value, grads, d_xi


def h_bound(spec: ObjectiveSpec, s_abs_max: float) -> float:
    """Upper bound on |H| when every performance component lies in
    [-s_abs_max, s_abs_max] and xi ranges over the configured domain."""
    a = float(s_abs_max)
    M = spec.layout.num_periods
    rw = spec.reward
    if rw.kind == "cumulative":
        r_bound = (M + 1) * a
    elif rw.kind == "linear_terminal":
        r_bound = a
    elif rw.kind == "quadratic":
        r_bound = (a + abs(rw.kappa_target)) ** 2
    elif rw.kind == "one_sided_quadratic":
        r_bound = (a + abs(rw.kappa_target)) ** 2 + rw.lambda_weight * a
    else:
        raise ConfigError("no generic bound for terminal_utility rewards")
    xi_mag = max(abs(spec.risk.xi_domain[0]), abs(spec.risk.xi_domain[1]))
    rk = spec.risk
    if rk.kind == "cvar":
        l_bound = xi_mag + (a + xi_mag) / rk.alpha
    elif rk.kind == "bpoe":
        l_bound = 1.0 + (a + abs(rk.threshold)) / BPOE_GAP
    elif rk.kind == "quadratic_variation":
        l_bound = M * (2.0 * a) ** 2
    elif rk.kind == "variance":
        l_bound = (a + xi_mag) ** 2
    else:
        l_bound = (2.0 * a) ** 2
    return r_bound + spec.gamma * l_bound
