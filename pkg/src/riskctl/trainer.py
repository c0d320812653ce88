"""Joint minibatch-Adam training of (theta_q, theta_p, xi).

The batched rollout applies the decumulation recursion to every path in a
minibatch; the backward sweep propagates objective gradients through the
pathwise dependence of later states on earlier actions, including the
constraint output maps.  Gradients are exact reverse-mode derivatives of
the minibatch empirical objective under the fixed kink conventions
(zero derivative at min/max/range kinks, risk-free branch at w_post = 0).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import records
from .errors import ConfigError, DataError, NumericError
from .nets import (
    AdamState,
    Architecture,
    PolicyPair,
    adam_step,
    layer_views,
    mlp_forward,
    new_policy,
    psi_q,
    sigmoid,
    softmax,
    softmax_vjp,
    withdrawal_range,
    withdrawal_range_grad,
)
from .objectives import ObjectiveSpec, RewardTemplate, RiskTemplate, objective_grads, batch_objective, batch_moments
from .recursion import ConstraintSpec, PerformanceLayout, layout_by_name
from .scenarios import KouParams, ScenarioSet, TimeGrid, params_fingerprint

DEFAULT_EVAL_CHUNK = 65536

# stream tags so init, shuffling, and data seeds never collide
_INIT_STREAM = 0x5EED_0001
_SHUFFLE_STREAM = 0x5EED_0002


@dataclass(frozen=True)
class TrainConfig:
    market: KouParams
    grid: TimeGrid
    constraints: ConstraintSpec
    objective: ObjectiveSpec
    w0: float
    architecture: tuple[int, int]  # (hidden layers, width)
    iterations: int = 50_000
    minibatch: int = 1_000
    lr_params: float = 0.05
    lr_xi: float = 0.04
    weight_decay: float = 1e-4
    seed: int = 0
    xi_init: Optional[float] = None
    xi_scale: float = 1.0
    cosine_decay: bool = False
    trace_every: int = 200

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.minibatch < 1:
            raise ConfigError("iterations and minibatch must be positive")
        if min(self.lr_params, self.lr_xi) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.xi_scale <= 0:
            raise ConfigError("xi_scale must be positive")

    def to_dict(self) -> dict:
        return {
            "market": self.market.to_dict(),
            "grid": {"horizon_years": self.grid.horizon_years,
                     "num_periods": self.grid.num_periods},
            "constraints": {"q_min": self.constraints.q_min, "q_max": self.constraints.q_max,
                            "num_assets": self.constraints.num_assets},
            "objective": self.objective.to_dict(),
            "w0": self.w0,
            "architecture": list(self.architecture),
            "iterations": self.iterations,
            "minibatch": self.minibatch,
            "lr_params": self.lr_params,
            "lr_xi": self.lr_xi,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
            "xi_init": self.xi_init,
            "xi_scale": self.xi_scale,
            "cosine_decay": self.cosine_decay,
            "trace_every": self.trace_every,
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        market = KouParams.from_dict(d["market"])
        grid = TimeGrid(**d["grid"])
        cs = ConstraintSpec(**d["constraints"])
        obj = d["objective"]
        layout = layout_by_name(obj["layout"], grid.num_periods, cs.num_assets)
        spec = ObjectiveSpec(
            layout=layout,
            reward=RewardTemplate.from_dict(obj["reward"]),
            risk=RiskTemplate.from_dict(obj["risk"]),
            gamma=float(obj["gamma"]),
        )
        kwargs = {k: d[k] for k in ("iterations", "minibatch", "lr_params", "lr_xi",
                                    "weight_decay", "seed", "xi_init", "xi_scale",
                                    "cosine_decay", "trace_every") if k in d}
        return cls(market=market, grid=grid, constraints=cs, objective=spec,
                   w0=float(d["w0"]), architecture=tuple(d["architecture"]), **kwargs)


# ---------------------------------------------------------------------------
# Batched rollout of the decumulation recursion


def rollout_states(policy: PolicyPair, returns: np.ndarray, w0: float
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """States and actions for a batch of paths; no gradient bookkeeping.

    Returns (q, w_pre, w_post, p) with shapes (K, M+1), (K, M+1), (K, M+1),
    (K, M, d_a).
    """
    K, M, d_a = returns.shape
    cs = policy.cs
    inv_scale = 1.0 / policy.w_scale
    q = np.empty((K, M + 1))
    w_pre = np.empty((K, M + 1))
    w_post = np.empty((K, M + 1))
    p_all = np.empty((K, M, d_a))
    lq = layer_views(policy.theta_q, policy.arch_q)
    lp = layer_views(policy.theta_p, policy.arch_p)
    w = np.full(K, float(w0))
    x = np.empty((K, 2))
    for m in range(M + 1):
        tf = m / M if M else 0.0
        w_pre[:, m] = w
        x[:, 0] = tf
        x[:, 1] = w * inv_scale
        zq = _forward(lq, x)[0][:, 0]
        q[:, m] = psi_q(w, zq, cs)
        wp = w - q[:, m]
        w_post[:, m] = wp
        if m < M:
            x[:, 0] = tf
            x[:, 1] = wp * inv_scale
            zp = _forward(lp, x)[0]
            P = softmax(zp)
            p_all[:, m] = P
            y = returns[:, m, :]
            growth = np.where(wp > 0.0, (P * y).sum(axis=1), y[:, -1])
            w = wp * growth
    return q, w_pre, w_post, p_all


def _forward(layers, x):
    a = x
    cache = [x]
    for W, b in layers[:-1]:
        a = sigmoid(a @ W.T + b)
        cache.append(a)
    W, b = layers[-1]
    return a @ W.T + b, cache


def _backward_into(layers, grad_views, cache, dz):
    """Accumulate parameter gradients; return gradient w.r.t. the input."""
    delta = dz
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = cache[li]
        gW, gb = grad_views[li]
        gW += delta.T @ a_prev
        gb += delta.sum(axis=0)
        delta = delta @ W
        if li > 0:
            delta = delta * (a_prev * (1.0 - a_prev))
    return delta


def batch_slots(layout: PerformanceLayout, q: np.ndarray, w_pre: np.ndarray,
                w_post: np.ndarray, p_all: np.ndarray) -> dict:
    M = layout.num_periods
    out = {}
    for slot in layout.slots:
        if slot == "withdrawals":
            out[slot] = q
        elif slot == "terminal_wealth":
            out[slot] = w_post[:, M]
        elif slot == "w_post_seq":
            out[slot] = w_post[:, :M]
        elif slot == "w_pre_seq":
            out[slot] = w_pre[:, 1:]
        elif slot == "w_pre_all":
            out[slot] = w_pre
        elif slot == "w_post_all":
            out[slot] = w_post
        elif slot == "allocations":
            out[slot] = p_all.reshape(len(q), -1)
        else:
            raise ConfigError(f"unknown slot '{slot}'")
    return out


def objective_value_and_grads(policy: PolicyPair, xi: float, returns: np.ndarray,
                              w0: float, spec: ObjectiveSpec
                              ) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Minibatch objective and its exact gradient w.r.t. (theta_q, theta_p, xi)."""
    K, M, d_a = returns.shape
    cs = policy.cs
    inv_scale = 1.0 / policy.w_scale
    lq = layer_views(policy.theta_q, policy.arch_q)
    lp = layer_views(policy.theta_p, policy.arch_p)

    # forward pass, keeping per-period caches
    q = np.empty((K, M + 1))
    w_pre = np.empty((K, M + 1))
    w_post = np.empty((K, M + 1))
    p_all = np.empty((K, M, d_a))
    caches_q, caches_p = [], []
    sig_q = np.empty((K, M + 1))
    w = np.full(K, float(w0))
    for m in range(M + 1):
        tf = m / M if M else 0.0
        w_pre[:, m] = w
        x = np.empty((K, 2))
        x[:, 0] = tf
        x[:, 1] = w * inv_scale
        zq, cq = _forward(lq, x)
        caches_q.append(cq)
        s = sigmoid(zq[:, 0])
        sig_q[:, m] = s
        q[:, m] = cs.q_min + withdrawal_range(w, cs) * s
        wp = w - q[:, m]
        w_post[:, m] = wp
        if m < M:
            xp = np.empty((K, 2))
            xp[:, 0] = tf
            xp[:, 1] = wp * inv_scale
            zp, cp = _forward(lp, xp)
            caches_p.append(cp)
            P = softmax(zp)
            p_all[:, m] = P
            y = returns[:, m, :]
            growth = np.where(wp > 0.0, (P * y).sum(axis=1), y[:, -1])
            w = wp * growth

    slots = batch_slots(spec.layout, q, w_pre, w_post, p_all)
    value, seeds, d_xi = objective_grads(spec, xi, slots)
    if "allocations" in seeds and np.any(seeds["allocations"]):
        raise ConfigError("objectives over raw allocations are not trainable")

    sq = seeds.get("withdrawals")
    s_wt = seeds.get("terminal_wealth")
    s_post = seeds.get("w_post_seq")
    s_pre = seeds.get("w_pre_seq")
    s_pre_all = seeds.get("w_pre_all")
    s_post_all = seeds.get("w_post_all")

    grad_q = np.zeros_like(policy.theta_q)
    grad_p = np.zeros_like(policy.theta_p)
    gq_views = layer_views(grad_q, policy.arch_q)
    gp_views = layer_views(grad_p, policy.arch_p)

    aw = np.zeros(K)  # d(objective)/d(w_pre[m+1]) during the sweep
    for m in range(M, -1, -1):
        awp = np.zeros(K)
        if m == M:
            if s_wt is not None:
                awp += s_wt
        else:
            y = returns[:, m, :]
            wp = w_post[:, m]
            pos = wp > 0.0
            P = p_all[:, m]
            growth = np.where(pos, (P * y).sum(axis=1), y[:, -1])
            awp += aw * growth
            dP = (aw * wp * pos)[:, None] * y
            dzp = softmax_vjp(P, dP)
            dxp = _backward_into(lp, gp_views, caches_p[m], dzp)
            awp += dxp[:, 1] * inv_scale
            if s_post is not None:
                awp += s_post[:, m]
        if s_post_all is not None:
            awp += s_post_all[:, m]
        # withdrawal step: w_post = w_pre - q, q = q_min + range(w_pre)*sigmoid(z)
        dq_total = -awp
        if sq is not None:
            dq_total = dq_total + sq[:, m]
        s = sig_q[:, m]
        dzq = dq_total * withdrawal_range(w_pre[:, m], cs) * s * (1.0 - s)
        dxq = _backward_into(lq, gq_views, caches_q[m], dzq[:, None])
        aw = awp + dq_total * withdrawal_range_grad(w_pre[:, m], cs) * s + dxq[:, 1] * inv_scale
        if m >= 1 and s_pre is not None:
            aw += s_pre[:, m - 1]
        if s_pre_all is not None:
            aw += s_pre_all[:, m]
    return value, grad_q, grad_p, d_xi


def finite_difference_grads(policy: PolicyPair, xi: float, returns: np.ndarray, w0: float,
                            spec: ObjectiveSpec, coords_q, coords_p, check_xi: bool = True,
                            rel_step: float = 1e-6) -> tuple[np.ndarray, np.ndarray, float]:
    """Central-difference oracle for selected parameter coordinates."""

    def value() -> float:
        qa, wpre, wpost, pall = rollout_states(policy, returns, w0)
        return batch_objective(spec, xi, batch_slots(spec.layout, qa, wpre, wpost, pall))

    def fd(vec: np.ndarray, i: int) -> float:
        h = rel_step * (1.0 + abs(vec[i]))
        orig = vec[i]
        vec[i] = orig + h
        up = value()
        vec[i] = orig - h
        dn = value()
        vec[i] = orig
        return (up - dn) / (2.0 * h)

    gq = np.array([fd(policy.theta_q, i) for i in coords_q])
    gp = np.array([fd(policy.theta_p, i) for i in coords_p])
    g_xi = 0.0
    if check_xi and spec.risk.xi_free:
        h = rel_step * (1.0 + abs(xi))
        qa, wpre, wpost, pall = rollout_states(policy, returns, w0)
        slots = batch_slots(spec.layout, qa, wpre, wpost, pall)
        g_xi = (batch_objective(spec, xi + h, slots) - batch_objective(spec, xi - h, slots)) / (2 * h)
    return gq, gp, g_xi


# ---------------------------------------------------------------------------
# Full-dataset evaluation


def evaluate_full(policy: PolicyPair, xi: float, dataset: ScenarioSet, spec: ObjectiveSpec,
                  chunk: int = DEFAULT_EVAL_CHUNK) -> float:
    """Deterministic single-pass (two with moment maps) sample average of H."""
    data = dataset.data
    K = data.shape[0]
    splits = range(0, K, chunk)
    w0 = policy.w_scale  # initial wealth doubles as the input scale
    s_bar = None
    if spec.risk.moment_dim:
        acc = np.zeros(spec.risk.moment_dim)
        for lo in splits:
            sl = slice(lo, min(lo + chunk, K))
            slots = _chunk_slots(policy, data[sl], spec.layout, w0)
            acc += spec.risk.psi(slots).sum(axis=0)
        s_bar = acc / K
    total = 0.0
    for lo in splits:
        sl = slice(lo, min(lo + chunk, K))
        slots = _chunk_slots(policy, data[sl], spec.layout, w0)
        sb = s_bar if s_bar is not None else batch_moments(spec, slots)
        r = spec.reward.values(slots)
        l = spec.risk.loss(xi, spec.risk.sample_feature(slots), sb)
        total += float(np.sum(r + spec.gamma * l))
    return total / K


def _chunk_slots(policy: PolicyPair, returns: np.ndarray, layout: PerformanceLayout,
                 w0: float) -> dict:
    q, w_pre, w_post, p_all = rollout_states(policy, returns, w0)
    return batch_slots(layout, q, w_pre, w_post, p_all)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class RunRecord:
    config: dict
    config_fingerprint: str
    dataset_key: str
    policy: PolicyPair
    xi: float
    v_hat: float
    trace_iterations: np.ndarray
    trace_values: np.ndarray
    wallclock_seconds: float = field(default=0.0, compare=False)

    def canonical_bytes(self) -> bytes:
        """Deterministic serialization; excludes wall-clock timing."""
        meta, arrays = self._parts()
        return records.pack_record(meta, arrays)

    def _parts(self) -> tuple[dict, dict]:
        meta = {
            "kind": "run_record",
            "config": self.config,
            "config_fingerprint": self.config_fingerprint,
            "dataset_key": self.dataset_key,
            "arch_q": self.policy.arch_q.to_dict(),
            "arch_p": self.policy.arch_p.to_dict(),
            "v_hat": self.v_hat,
            "xi": self.xi,
        }
        arrays = {
            "theta_q": self.policy.theta_q,
            "theta_p": self.policy.theta_p,
            "trace_iterations": self.trace_iterations,
            "trace_values": self.trace_values,
        }
        return meta, arrays

    def save(self, path: str) -> None:
        meta, arrays = self._parts()
        meta["wallclock_seconds"] = self.wallclock_seconds
        records.write_record(path, meta, arrays)

    @classmethod
    def load(cls, path: str) -> "RunRecord":
        meta, arrays = records.read_record(path)
        if meta.get("kind") != "run_record":
            raise DataError(f"{path} is not a run record")
        cfg = TrainConfig.from_dict(meta["config"])
        policy = PolicyPair(
            arch_q=Architecture.from_dict(meta["arch_q"]),
            arch_p=Architecture.from_dict(meta["arch_p"]),
            theta_q=arrays["theta_q"],
            theta_p=arrays["theta_p"],
            cs=cfg.constraints,
            horizon=cfg.grid.horizon_years,
            w_scale=cfg.w0,
        )
        return cls(
            config=meta["config"],
            config_fingerprint=meta["config_fingerprint"],
            dataset_key=meta["dataset_key"],
            policy=policy,
            xi=float(meta["xi"]),
            v_hat=float(meta["v_hat"]),
            trace_iterations=arrays["trace_iterations"],
            trace_values=arrays["trace_values"],
            wallclock_seconds=float(meta.get("wallclock_seconds", 0.0)),
        )


def train_many(datasets: list[ScenarioSet], cfgs: list[TrainConfig]) -> list[RunRecord]:
    """Train several runs that share architecture and schedule.

    Runs are stacked on a leading axis inside the batched engine (one core
    benefits from the amortized dispatch); each run's arithmetic is
    identical to training it alone, so records are reproducible run by
    run.  The recorded optimum is a fresh full-dataset evaluation of each
    run's final parameters, not the last minibatch value.
    """
    from .engine import RunBatchTrainer  # deferred: engine imports this module's config

    eng = RunBatchTrainer(datasets, cfgs)
    trace_it, trace_vals, xis, (thetas_q, thetas_p), elapsed = eng.run()
    out = []
    for r, (ds, cfg) in enumerate(zip(datasets, cfgs)):
        policy = PolicyPair(
            arch_q=eng.arch_q, arch_p=eng.arch_p,
            theta_q=thetas_q[r], theta_p=thetas_p[r],
            cs=cfg.constraints, horizon=cfg.grid.horizon_years, w_scale=cfg.w0)
        v_hat = evaluate_full(policy, float(xis[r]), ds, cfg.objective)
        out.append(RunRecord(
            config=cfg.to_dict(),
            config_fingerprint=cfg.fingerprint(),
            dataset_key=ds.dataset_key.hex(),
            policy=policy,
            xi=float(xis[r]),
            v_hat=v_hat,
            trace_iterations=trace_it,
            trace_values=trace_vals[r],
            wallclock_seconds=elapsed / len(cfgs),
        ))
    return out


def train(dataset: ScenarioSet, cfg: TrainConfig) -> RunRecord:
    """Maximize the empirical objective over (theta_q, theta_p, xi).

    Minibatches are drawn without replacement within reshuffled epochs
    (left-over partial batches trigger a reshuffle); xi is a free trained
    scalar clipped into its compact domain after each step.
    """
    return train_many([dataset], [cfg])[0]
