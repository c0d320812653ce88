"""Run-batched training engine.

Independent training runs that share an architecture and schedule are
stacked along a leading run axis so each numpy op covers all runs at
once; on one core this amortizes per-op dispatch overhead roughly by the
number of runs.  Every array keeps each run's slice bitwise identical to
a solo run of the same seed (matmuls hit the same per-slice BLAS kernel,
reductions keep the same per-slice order), which a regression test pins.

Weights live in two contiguous layouts: (R, out, in) as the canonical
Adam target matching the flat per-run parameter vector, and its
transposed copy (R, in, out) refreshed after each update so forward
matmuls avoid strided operands.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .nets import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, Architecture, init_params, new_policy
from .objectives import objective_grads_batched
from .scenarios import ScenarioSet, params_fingerprint

_INIT_STREAM = 0x5EED_0001
_SHUFFLE_STREAM = 0x5EED_0002


class BatchedMLP:
    """Per-layer batched parameters for R structurally identical nets."""

    def __init__(self, arch: Architecture, thetas: np.ndarray):
        self.arch = arch
        R, eta = thetas.shape
        if eta != arch.param_count:
            raise ConfigError("parameter stack does not match architecture")
        self.num_runs = R
        self.W: list[np.ndarray] = []   # (R, o, i), canonical
        self.b: list[np.ndarray] = []   # (R, 1, o)
        off = 0
        for o, i in arch.layer_dims():
            self.W.append(np.ascontiguousarray(
                thetas[:, off:off + o * i].reshape(R, o, i)))
            off += o * i
            self.b.append(np.ascontiguousarray(
                thetas[:, off:off + o].reshape(R, 1, o)))
            off += o
        self.Wt: list[np.ndarray] = [None] * len(self.W)
        self.refresh()

    def refresh(self) -> None:
        for li, W in enumerate(self.W):
            self.Wt[li] = np.ascontiguousarray(W.transpose(0, 2, 1))

    def flat_run(self, r: int) -> np.ndarray:
        parts = []
        for W, b in zip(self.W, self.b):
            parts.append(W[r].reshape(-1))
            parts.append(b[r, 0])
        return np.concatenate(parts)

    def zeros_like_params(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return ([np.zeros_like(W) for W in self.W], [np.zeros_like(b) for b in self.b])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        a = x
        cache = [x]
        for Wt, b in zip(self.Wt[:-1], self.b[:-1]):
            z = a @ Wt
            z += b
            np.negative(z, out=z)
            np.exp(z, out=z)
            z += 1.0
            a = 1.0 / z
            cache.append(a)
        return a @ self.Wt[-1] + self.b[-1], cache

    def backward_into(self, gW: list[np.ndarray], gb: list[np.ndarray],
                      cache: list[np.ndarray], dz: np.ndarray) -> np.ndarray:
        delta = dz
        for li in range(len(self.W) - 1, -1, -1):
            a_prev = cache[li]
            gW[li] += delta.transpose(0, 2, 1) @ a_prev
            gb[li] += delta.sum(axis=1, keepdims=True)
            delta = delta @ self.W[li]
            if li > 0:
                delta = delta * (a_prev * (1.0 - a_prev))
        return delta


class BatchedAdam:
    """Adam moments per layer array; descent convention as in nets.adam_step."""

    def __init__(self, shapes_like: list[np.ndarray]):
        self.m = [np.zeros_like(a) for a in shapes_like]
        self.v = [np.zeros_like(a) for a in shapes_like]
        self.step = 0

    def update(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
               weight_decay: float) -> None:
        self.step += 1
        bc1 = 1.0 - ADAM_BETA1**self.step
        bc2 = 1.0 - ADAM_BETA2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            if weight_decay:
                p -= lr * weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    return shifted


@dataclass
class _Caches:
    q_caches: list
    p_caches: list
    sig_q: np.ndarray      # (R, K, M+1)
    p_all: np.ndarray      # (R, K, M, d_a)
    w_pre: np.ndarray      # (R, K, M+1)
    w_post: np.ndarray     # (R, K, M+1)
    q: np.ndarray          # (R, K, M+1)


class RunBatchTrainer:
    """Trains R runs of the decumulation problem simultaneously."""

    def __init__(self, datasets: list[ScenarioSet], cfgs: list):
        if len(datasets) != len(cfgs) or not cfgs:
            raise ConfigError("need one dataset per run config")
        base = cfgs[0]
        for c in cfgs[1:]:
            same = (c.architecture == base.architecture and c.iterations == base.iterations
                    and c.minibatch == base.minibatch and c.lr_params == base.lr_params
                    and c.lr_xi == base.lr_xi and c.weight_decay == base.weight_decay
                    and c.objective.to_dict() == base.objective.to_dict()
                    and c.grid == base.grid and c.constraints == base.constraints
                    and c.w0 == base.w0 and c.xi_scale == base.xi_scale
                    and c.cosine_decay == base.cosine_decay)
            if not same:
                raise ConfigError("stacked runs must share everything except seeds/data")
        for ds, c in zip(datasets, cfgs):
            if ds.params_fp != params_fingerprint(c.market, c.grid):
                raise DataError("dataset was generated under different market params or grid")
            if ds.num_periods != c.grid.num_periods:
                raise DataError("dataset period count does not match the time grid")
            if c.minibatch > ds.num_paths:
                raise ConfigError("minibatch exceeds dataset size")
        if len({ds.num_paths for ds in datasets}) != 1:
            raise ConfigError("stacked runs must share the dataset size")

        self.cfgs = cfgs
        self.base = base
        self.num_runs = len(cfgs)
        self.data = np.stack([ds.data for ds in datasets])  # (R, K, M, d_a)
        self.cs = base.constraints
        self.M = base.grid.num_periods
        self.inv_scale = 1.0 / base.w0

        init_thetas_q, init_thetas_p = [], []
        self.shuffle_rngs = []
        for c in cfgs:
            rng = np.random.Generator(np.random.Philox(
                key=np.array([c.seed, _INIT_STREAM], dtype=np.uint64)))
            pol = new_policy(c.architecture, c.constraints, c.grid.horizon_years, c.w0, rng)
            init_thetas_q.append(pol.theta_q)
            init_thetas_p.append(pol.theta_p)
            self.shuffle_rngs.append(np.random.Generator(np.random.Philox(
                key=np.array([c.seed, _SHUFFLE_STREAM], dtype=np.uint64))))
        self.net_q = BatchedMLP(pol.arch_q, np.stack(init_thetas_q))
        self.net_p = BatchedMLP(pol.arch_p, np.stack(init_thetas_p))
        self.arch_q, self.arch_p = pol.arch_q, pol.arch_p

        lo, hi = base.objective.risk.xi_domain
        self.xi_lo, self.xi_hi = lo, hi
        xi0 = base.xi_init if base.xi_init is not None else base.w0 / 10.0
        self.xi = np.full(self.num_runs, float(np.clip(xi0, lo, hi)))
        self.xi_free = base.objective.risk.xi_free

        self.adam_q = BatchedAdam(self.net_q.W + self.net_q.b)
        self.adam_p = BatchedAdam(self.net_p.W + self.net_p.b)
        self.adam_xi = BatchedAdam([self.xi])

    # -- forward / backward over the controlled recursion ------------------

    def _rollout(self, returns: np.ndarray) -> _Caches:
        R, K = returns.shape[0], returns.shape[1]
        M, cs = self.M, self.cs
        q = np.empty((R, K, M + 1))
        w_pre = np.empty((R, K, M + 1))
        w_post = np.empty((R, K, M + 1))
        sig_q = np.empty((R, K, M + 1))
        p_all = np.empty((R, K, M, returns.shape[3]))
        q_caches, p_caches = [], []
        w = np.full((R, K), self.base.w0)
        for m in range(M + 1):
            tf = m / M if M else 0.0
            w_pre[:, :, m] = w
            x = np.empty((R, K, 2))
            x[:, :, 0] = tf
            x[:, :, 1] = w * self.inv_scale
            zq, cq = self.net_q.forward(x)
            q_caches.append(cq)
            s = 1.0 / (1.0 + np.exp(-zq[:, :, 0]))
            sig_q[:, :, m] = s
            rng_w = np.maximum(np.minimum(w, cs.q_max) - cs.q_min, 0.0)
            qm = cs.q_min + rng_w * s
            q[:, :, m] = qm
            wp = w - qm
            w_post[:, :, m] = wp
            if m < M:
                xp = np.empty((R, K, 2))
                xp[:, :, 0] = tf
                xp[:, :, 1] = wp * self.inv_scale
                zp, cp = self.net_p.forward(xp)
                p_caches.append(cp)
                P = _stable_softmax(zp)
                p_all[:, :, m] = P
                y = returns[:, :, m, :]
                growth = np.where(wp > 0.0, (P * y).sum(axis=-1), y[:, :, -1])
                w = wp * growth
        return _Caches(q_caches=q_caches, p_caches=p_caches, sig_q=sig_q, p_all=p_all,
                       w_pre=w_pre, w_post=w_post, q=q)

    def _slots(self, caches: _Caches) -> dict:
        layout = self.base.objective.layout
        M = self.M
        out = {}
        for slot in layout.slots:
            if slot == "withdrawals":
                out[slot] = caches.q
            elif slot == "terminal_wealth":
                out[slot] = caches.w_post[:, :, M]
            elif slot == "w_post_seq":
                out[slot] = caches.w_post[:, :, :M]
            elif slot == "w_pre_seq":
                out[slot] = caches.w_pre[:, :, 1:]
            elif slot == "w_pre_all":
                out[slot] = caches.w_pre
            elif slot == "w_post_all":
                out[slot] = caches.w_post
            else:
                raise ConfigError(f"slot '{slot}' is not trainable in the batched engine")
        return out

    def _step_grads(self, returns: np.ndarray
                    ) -> tuple[np.ndarray, list, list, list, list, np.ndarray]:
        caches = self._rollout(returns)
        slots = self._slots(caches)
        values, seeds, d_xi = objective_grads_batched(self.base.objective, self.xi, slots)

        cs, M = self.cs, self.M
        sq = seeds.get("withdrawals")
        s_wt = seeds.get("terminal_wealth")
        s_post = seeds.get("w_post_seq")
        s_pre = seeds.get("w_pre_seq")
        s_pre_all = seeds.get("w_pre_all")
        s_post_all = seeds.get("w_post_all")

        gW_q, gb_q = self.net_q.zeros_like_params()
        gW_p, gb_p = self.net_p.zeros_like_params()
        R, K = returns.shape[0], returns.shape[1]
        aw = np.zeros((R, K))
        for m in range(M, -1, -1):
            if m == M:
                awp = s_wt.copy() if s_wt is not None else np.zeros((R, K))
            else:
                y = returns[:, :, m, :]
                wp = caches.w_post[:, :, m]
                pos = wp > 0.0
                P = caches.p_all[:, :, m]
                growth = np.where(pos, (P * y).sum(axis=-1), y[:, :, -1])
                awp = aw * growth
                dP = (aw * wp * pos)[:, :, None] * y
                inner = (dP * P).sum(axis=-1, keepdims=True)
                dzp = P * (dP - inner)
                dxp = self.net_p.backward_into(gW_p, gb_p, caches.p_caches[m], dzp)
                awp += dxp[:, :, 1] * self.inv_scale
                if s_post is not None:
                    awp += s_post[:, :, m]
            if s_post_all is not None:
                awp += s_post_all[:, :, m]
            w_m = caches.w_pre[:, :, m]
            dq_total = -awp
            if sq is not None:
                dq_total = dq_total + sq[:, :, m]
            s = caches.sig_q[:, :, m]
            rng_w = np.maximum(np.minimum(w_m, cs.q_max) - cs.q_min, 0.0)
            dzq = dq_total * rng_w * s * (1.0 - s)
            dxq = self.net_q.backward_into(gW_q, gb_q, caches.q_caches[m], dzq[:, :, None])
            rgrad = ((w_m > cs.q_min) & (w_m < cs.q_max)).astype(np.float64)
            aw = awp + dq_total * rgrad * s + dxq[:, :, 1] * self.inv_scale
            if m >= 1 and s_pre is not None:
                aw += s_pre[:, :, m - 1]
            if s_pre_all is not None:
                aw += s_pre_all[:, :, m]
        return values, gW_q, gb_q, gW_p, gb_p, d_xi

    # -- the optimization loop ---------------------------------------------

    def run(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float]:
        """Returns (trace_iterations, trace_values (R, n), final xi, flat thetas, elapsed)."""
        base = self.base
        R = self.num_runs
        K = self.data.shape[1]
        B = base.minibatch
        started = time.perf_counter()
        orders = None
        pos = 0
        trace_it, trace_vals = [], []
        xi_scale = base.xi_scale
        xi_t = self.xi / xi_scale
        for it in range(base.iterations):
            if orders is None or pos + B > K:
                orders = np.stack([rng.permutation(K) for rng in self.shuffle_rngs])
                pos = 0
            idx = orders[:, pos:pos + B]
            pos += B
            batch = np.take_along_axis(self.data, idx[:, :, None, None], axis=1)
            values, gW_q, gb_q, gW_p, gb_p, d_xi = self._step_grads(batch)
            if not np.all(np.isfinite(values)):
                bad = int(np.argmax(~np.isfinite(values)))
                raise NumericError(f"objective became non-finite at iteration {it} (run {bad})")
            lr_fac = (0.5 * (1.0 + np.cos(np.pi * it / base.iterations))
                      if base.cosine_decay else 1.0)
            neg = [-g for g in gW_q + gb_q]
            self.adam_q.update(self.net_q.W + self.net_q.b, neg,
                               base.lr_params * lr_fac, base.weight_decay)
            neg = [-g for g in gW_p + gb_p]
            self.adam_p.update(self.net_p.W + self.net_p.b, neg,
                               base.lr_params * lr_fac, base.weight_decay)
            self.net_q.refresh()
            self.net_p.refresh()
            if self.xi_free:
                self.adam_xi.update([xi_t], [-d_xi * xi_scale], base.lr_xi * lr_fac, 0.0)
                np.clip(xi_t * xi_scale, self.xi_lo, self.xi_hi, out=self.xi)
                xi_t = self.xi / xi_scale
            if it % base.trace_every == 0 or it == base.iterations - 1:
                for net in (self.net_q, self.net_p):
                    if not all(np.all(np.isfinite(W)) for W in net.W):
                        raise NumericError(f"parameters became non-finite at iteration {it}")
                trace_it.append(it)
                trace_vals.append(values.copy())
        elapsed = time.perf_counter() - started
        thetas_q = np.stack([self.net_q.flat_run(r) for r in range(R)])
        thetas_p = np.stack([self.net_p.flat_run(r) for r in range(R)])
        return (np.array(trace_it, dtype=np.float64), np.array(trace_vals).T,
                self.xi.copy(), (thetas_q, thetas_p), elapsed)
