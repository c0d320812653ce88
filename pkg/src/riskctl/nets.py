"""Small sigmoid MLPs, constraint-enforcing output maps, and Adam.

Networks take the feature pair (t/T, w/w_scale) and emit pre-activation
outputs; psi_q squashes a scalar head into the state-dependent withdrawal
interval and psi_p softmaxes a vector head onto the simplex, so any
parameter vector yields feasible actions.  Forward/backward passes are
hand-written for this fixed architecture (no output activation, sigmoid
hidden layers).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .errors import ConfigError, DataError
from .recursion import ConstraintSpec
from . import records


@dataclass(frozen=True)
class Architecture:
    hidden_layers: int
    width: int
    output_dim: int
    input_dim: int = 2

    def __post_init__(self) -> None:
        if self.hidden_layers < 0 or self.width < 1 or self.output_dim < 1:
            raise ConfigError("bad architecture")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_out, fan_in) per affine layer, input to output."""
        dims = []
        prev = self.input_dim
        for _ in range(self.hidden_layers):
            dims.append((self.width, prev))
            prev = self.width
        dims.append((self.output_dim, prev))
        return dims

    @property
    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_dims())

    def to_dict(self) -> dict:
        return {"hidden_layers": self.hidden_layers, "width": self.width,
                "output_dim": self.output_dim, "input_dim": self.input_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(hidden_layers=int(d["hidden_layers"]), width=int(d["width"]),
                   output_dim=int(d["output_dim"]), input_dim=int(d.get("input_dim", 2)))


def layer_views(theta: np.ndarray, arch: Architecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """(W, b) views tiling the flat parameter vector exactly."""
    if theta.shape != (arch.param_count,):
        raise ConfigError(f"theta has {theta.shape}, architecture wants ({arch.param_count},)")
    out = []
    off = 0
    for o, i in arch.layer_dims():
        W = theta[off:off + o * i].reshape(o, i)
        off += o * i
        b = theta[off:off + o]
        off += o
        out.append((W, b))
    return out


def init_params(arch: Architecture, rng: np.random.Generator) -> np.ndarray:
    """Uniform[-c, c] weights with c = sqrt(6/(fan_in+fan_out)), zero biases."""
    theta = np.zeros(arch.param_count)
    for W, b in layer_views(theta, arch):
        o, i = W.shape
        c = np.sqrt(6.0 / (i + o))
        W[:] = rng.uniform(-c, c, size=(o, i))
    return theta


def mlp_forward(theta: np.ndarray, arch: Architecture, x: np.ndarray
                ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Pre-activation output (K, out) and the activation cache for backward."""
    layers = layer_views(theta, arch)
    a = x
    cache = [x]
    for W, b in layers[:-1]:
        a = sigmoid(a @ W.T + b)
        cache.append(a)
    W, b = layers[-1]
    return a @ W.T + b, cache


def mlp_backward(theta: np.ndarray, arch: Architecture, cache: list[np.ndarray],
                 dz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients (d theta, d input) of sum(dz * output)."""
    layers = layer_views(theta, arch)
    dtheta = np.zeros_like(theta)
    dviews = layer_views(dtheta, arch)
    delta = dz
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a_prev = cache[li]
        dW, db = dviews[li]
        dW += delta.T @ a_prev
        db += delta.sum(axis=0)
        delta = delta @ W
        if li > 0:
            delta = delta * (a_prev * (1.0 - a_prev))
    return dtheta, delta


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; safe for large inputs."""
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_vjp(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """dz given softmax outputs p and upstream dp."""
    inner = (dp * p).sum(axis=-1, keepdims=True)
    return p * (dp - inner)


def withdrawal_range(w: np.ndarray, cs: ConstraintSpec) -> np.ndarray:
    """Width of the admissible interval: max(min(q_max, w) - q_min, 0)."""
    return np.maximum(np.minimum(cs.q_max, w) - cs.q_min, 0.0)


def withdrawal_range_grad(w: np.ndarray, cs: ConstraintSpec) -> np.ndarray:
    # zero derivative at both kinks (w == q_min, w == q_max)
    w = np.asarray(w)
    return ((w > cs.q_min) & (w < cs.q_max)).astype(np.float64)


def psi_q(w: np.ndarray, z: np.ndarray, cs: ConstraintSpec) -> np.ndarray:
    """q = q_min + range(w) * sigmoid(z); always inside the admissible interval."""
    return cs.q_min + withdrawal_range(w, cs) * sigmoid(z)


def psi_p(z: np.ndarray) -> np.ndarray:
    """Softmax onto the simplex; components strictly positive."""
    return softmax(z)


@dataclass
class PolicyPair:
    """Two networks plus the output maps that make their actions feasible."""

    arch_q: Architecture
    arch_p: Architecture
    theta_q: np.ndarray
    theta_p: np.ndarray
    cs: ConstraintSpec
    horizon: float
    w_scale: float

    def __post_init__(self) -> None:
        if self.arch_q.output_dim != 1:
            raise ConfigError("withdrawal head must be scalar")
        if self.arch_p.output_dim != self.cs.num_assets:
            raise ConfigError("allocation head must match asset count")

    def features(self, t: np.ndarray, w: np.ndarray) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), np.shape(w))
        return np.stack([t / self.horizon, np.asarray(w) / self.w_scale], axis=-1)

    def q_values(self, t, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        z, _ = mlp_forward(self.theta_q, self.arch_q, np.atleast_2d(self.features(t, w)))
        return psi_q(w, z[..., 0].reshape(np.shape(w)), self.cs)

    def p_values(self, t, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        z, _ = mlp_forward(self.theta_p, self.arch_p, np.atleast_2d(self.features(t, w)))
        return psi_p(z).reshape(np.shape(w) + (self.cs.num_assets,))

    # single-state adapters for recursion.roll_path
    def action_q(self, t: float, w: float) -> float:
        return float(self.q_values(t, np.array([w]))[0])

    def action_p(self, t: float, w: float) -> np.ndarray:
        return self.p_values(t, np.array([w]))[0]


def new_policy(arch: tuple[int, int], cs: ConstraintSpec, horizon: float, w_scale: float,
               rng: np.random.Generator) -> PolicyPair:
    """Fresh policy pair with (hidden_layers, width) = arch for both heads."""
    L, width = arch
    arch_q = Architecture(hidden_layers=L, width=width, output_dim=1)
    arch_p = Architecture(hidden_layers=L, width=width, output_dim=cs.num_assets)
    return PolicyPair(
        arch_q=arch_q,
        arch_p=arch_p,
        theta_q=init_params(arch_q, rng),
        theta_p=init_params(arch_p, rng),
        cs=cs,
        horizon=horizon,
        w_scale=w_scale,
    )


# ---------------------------------------------------------------------------
# Adam (descent convention; callers maximizing pass negated gradients)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> None:
    """One in-place Adam update with decoupled weight decay."""
    if state.m.shape != params.shape:
        raise ConfigError("Adam state does not match parameter shape")
    state.step += 1
    state.m *= ADAM_BETA1
    state.m += (1.0 - ADAM_BETA1) * grads
    state.v *= ADAM_BETA2
    state.v += (1.0 - ADAM_BETA2) * grads * grads
    m_hat = state.m / (1.0 - ADAM_BETA1**state.step)
    v_hat = state.v / (1.0 - ADAM_BETA2**state.step)
    if weight_decay:
        params -= lr * weight_decay * params
    params -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# Class-nesting embeddings


def embed_wider(theta: np.ndarray, arch: Architecture, new_width: int
                ) -> tuple[np.ndarray, Architecture]:
    """Zero-pad hidden layers to a larger width; outputs are unchanged exactly.

    New units receive zero in-weights and zero bias, so they sit at
    sigmoid(0) = 0.5 and feed zero out-weights.
    """
    if new_width < arch.width:
        raise ConfigError("can only widen")
    wide = Architecture(hidden_layers=arch.hidden_layers, width=new_width,
                        output_dim=arch.output_dim, input_dim=arch.input_dim)
    theta_w = np.zeros(wide.param_count)
    for (W_old, b_old), (W_new, b_new) in zip(layer_views(theta, arch),
                                              layer_views(theta_w, wide)):
        o, i = W_old.shape
        W_new[:o, :i] = W_old
        b_new[:o] = b_old
    return theta_w, wide


def embed_deeper(theta: np.ndarray, arch: Architecture, extra_layers: int,
                 eps: float = 3e-6) -> tuple[np.ndarray, Architecture]:
    """Insert near-identity sigmoid layers before the output layer.

    An exact identity is not expressible with sigmoid activations; each
    inserted layer computes sigmoid(eps*a) and the next layer unscales by
    4/eps around 0.5, leaving a relative error of order eps^2.  Combined
    with embed_wider this realizes the class-nesting embedding, e.g.
    (1,2) -> (2,5).
    """
    if arch.hidden_layers < 1:
        raise ConfigError("need at least one hidden layer to deepen")
    if extra_layers < 0:
        raise ConfigError("extra_layers must be >= 0")
    deep = Architecture(hidden_layers=arch.hidden_layers + extra_layers, width=arch.width,
                        output_dim=arch.output_dim, input_dim=arch.input_dim)
    theta_d = np.zeros(deep.param_count)
    old_layers = layer_views(theta, arch)
    views = layer_views(theta_d, deep)
    for li in range(arch.hidden_layers):
        views[li][0][:] = old_layers[li][0]
        views[li][1][:] = old_layers[li][1]
    width = arch.width
    # first inserted layer encodes h as sigmoid(eps*h) ~ 0.5 + eps*h/4; later
    # inserted layers re-encode via sigmoid(4a - 2) = sigmoid(4*(a - 0.5))
    for k in range(extra_layers):
        W, b = views[arch.hidden_layers + k]
        if k == 0:
            W[:] = eps * np.eye(width)
            b[:] = 0.0
        else:
            W[:] = 4.0 * np.eye(width)
            b[:] = -2.0
    W_out_old, b_out_old = old_layers[-1]
    W_out, b_out = views[-1]
    if extra_layers:
        W_out[:] = (4.0 / eps) * W_out_old
        b_out[:] = b_out_old - (2.0 / eps) * W_out_old.sum(axis=1)
    else:
        W_out[:] = W_out_old
        b_out[:] = b_out_old
    return theta_d, deep


def embed_policy(policy: PolicyPair, target: tuple[int, int], eps: float = 3e-6) -> PolicyPair:
    """Embed a trained policy into a larger class (wider and/or deeper)."""
    L, width = target
    if L < policy.arch_q.hidden_layers or width < policy.arch_q.width:
        raise ConfigError("target class must contain the source class")
    tq, aq = embed_wider(policy.theta_q, policy.arch_q, width)
    tp, ap = embed_wider(policy.theta_p, policy.arch_p, width)
    if L > aq.hidden_layers:
        tq, aq = embed_deeper(tq, aq, L - aq.hidden_layers, eps)
        tp, ap = embed_deeper(tp, ap, L - ap.hidden_layers, eps)
    return PolicyPair(arch_q=aq, arch_p=ap, theta_q=tq, theta_p=tp, cs=policy.cs,
                      horizon=policy.horizon, w_scale=policy.w_scale)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str, policy: PolicyPair, xi: float, seed: int, iteration: int,
                    adam_q: AdamState = None, adam_p: AdamState = None,
                    adam_xi: AdamState = None) -> None:
    meta = {
        "kind": "checkpoint",
        "arch_q": policy.arch_q.to_dict(),
        "arch_p": policy.arch_p.to_dict(),
        "constraints": {"q_min": policy.cs.q_min, "q_max": policy.cs.q_max,
                        "num_assets": policy.cs.num_assets},
        "horizon": policy.horizon,
        "w_scale": policy.w_scale,
        "seed": seed,
        "iteration": iteration,
    }
    arrays = {"theta_q": policy.theta_q, "theta_p": policy.theta_p,
              "xi": np.array([xi])}
    for name, st in (("adam_q", adam_q), ("adam_p", adam_p), ("adam_xi", adam_xi)):
        if st is not None:
            arrays[f"{name}_m"] = st.m
            arrays[f"{name}_v"] = st.v
            meta[f"{name}_step"] = st.step
    records.write_record(path, meta, arrays)


def load_checkpoint(path: str) -> tuple[PolicyPair, float, dict]:
    meta, arrays = records.read_record(path)
    if meta.get("kind") != "checkpoint":
        raise DataError(f"{path} is not a checkpoint")
    cs = ConstraintSpec(**meta["constraints"])
    policy = PolicyPair(
        arch_q=Architecture.from_dict(meta["arch_q"]),
        arch_p=Architecture.from_dict(meta["arch_p"]),
        theta_q=arrays["theta_q"],
        theta_p=arrays["theta_p"],
        cs=cs,
        horizon=meta["horizon"],
        w_scale=meta["w_scale"],
    )
    return policy, float(arrays["xi"][0]), meta
