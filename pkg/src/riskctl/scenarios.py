"""Intervention time grid and exogenous return-path datasets.

The market model is a one-factor jump-diffusion for the risky asset,

    dG/G = (mu - lam*kappa) dt + sigma dZ + d( sum_{i<=N_t} (chi_i - 1) ),

with N a Poisson process of rate ``lam`` and log(chi) asymmetric
double-exponential (density ``p_up*eta1*exp(-eta1*j)`` for j >= 0 and
``(1-p_up)*eta2*exp(eta2*j)`` for j < 0), plus a deterministic risk-free
account growing at rate ``r_f``.  One-period gross returns are simulated
exactly (lognormal diffusion times compound-Poisson jump product), so a
period return is

    risky = exp((mu - lam*kappa - sigma^2/2)*dt + sigma*sqrt(dt)*Z + sum_i J_i),
    risk-free = exp(r_f*dt),

with no intra-period discretization error.  Each path draws from its own
counter-based (Philox) substream keyed by (seed, path index), so datasets
are reproducible independently of generation order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DatasetFormatError

_MAGIC = b"RSC1"
_FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQQQ")  # magic, version, d_a, K, M, seed; 32 bytes
assert _HEADER.size == 32


@dataclass(frozen=True)
class TimeGrid:
    """Equally spaced intervention times t_m = m*dt, m = 0..M."""

    horizon_years: float
    num_periods: int

    def __post_init__(self) -> None:
        if self.horizon_years <= 0:
            raise ConfigError("horizon must be positive")
        if self.num_periods < 1:
            raise ConfigError("need at least one period")

    @property
    def dt(self) -> float:
        return self.horizon_years / self.num_periods

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon_years, self.num_periods + 1)


def derive_kappa(p_up: float, eta1: float, eta2: float) -> float:
    """Mean relative jump size E[chi - 1] for the double-exponential law.

    Requires eta1 > 1, otherwise E[chi] is infinite.
    """
    if eta1 <= 1.0:
        raise ConfigError(f"eta1={eta1} <= 1 gives an infinite-mean jump multiplier")
    return p_up * eta1 / (eta1 - 1.0) + (1.0 - p_up) * eta2 / (eta2 + 1.0) - 1.0


@dataclass(frozen=True)
class KouParams:
    """Annualized jump-diffusion parameters; ``kappa`` is derived, not free."""

    mu: float
    sigma: float
    lam: float
    p_up: float
    eta1: float
    eta2: float
    r_f: float
    kappa: float = field(init=False)

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.lam < 0:
            raise ConfigError("jump intensity must be >= 0")
        if not 0.0 <= self.p_up <= 1.0:
            raise ConfigError("p_up must lie in [0, 1]")
        if self.eta2 <= 0:
            raise ConfigError("eta2 must be > 0")
        object.__setattr__(self, "kappa", derive_kappa(self.p_up, self.eta1, self.eta2))

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "sigma": self.sigma,
            "lambda": self.lam,
            "p_up": self.p_up,
            "eta1": self.eta1,
            "eta2": self.eta2,
            "r_f": self.r_f,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KouParams":
        try:
            return cls(
                mu=float(d["mu"]),
                sigma=float(d["sigma"]),
                lam=float(d["lambda"]),
                p_up=float(d["p_up"]),
                eta1=float(d["eta1"]),
                eta2=float(d["eta2"]),
                r_f=float(d["r_f"]),
            )
        except KeyError as exc:
            raise ConfigError(f"market params missing key {exc}") from exc


def params_fingerprint(params: KouParams, grid: TimeGrid) -> bytes:
    """32-byte digest identifying (market params, time grid)."""
    payload = dict(params.to_dict())
    payload["horizon_years"] = params_repr(grid.horizon_years)
    payload["num_periods"] = grid.num_periods
    blob = json.dumps({k: params_repr(v) if isinstance(v, float) else v
                       for k, v in payload.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).digest()


def params_repr(x: float) -> str:
    # repr() is the shortest round-trip form, stable across platforms
    return repr(float(x))


def double_exp_ppf(u: np.ndarray, p_up: float, eta1: float, eta2: float) -> np.ndarray:
    """Inverse CDF of the asymmetric double-exponential jump size.

    Branch on the uniform: u < 1-p_up gives a down jump, otherwise up.
    """
    u = np.asarray(u)
    p_dn = 1.0 - p_up
    out = np.empty_like(u, dtype=np.float64)
    dn = u < p_dn
    # CDF is p_dn*exp(eta2*j) below zero and p_dn + p_up*(1-exp(-eta1*j)) above
    with np.errstate(divide="ignore"):
        out[dn] = np.log(u[dn] / p_dn) / eta2 if p_dn > 0 else 0.0
        up = ~dn
        out[up] = -np.log((1.0 - u[up]) / p_up) / eta1 if p_up > 0 else 0.0
    return out


def _path_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, index], dtype=np.uint64)))


def sample_log_return_parts(
    params: KouParams, dt: float, size: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw (diffusion normals, jump counts, jump sums) for ``size`` periods.

    Draw order is fixed (normals, Poisson counts, one uniform per jump) so a
    given generator state always yields the same returns.
    """
    z = rng.standard_normal(size)
    n = rng.poisson(params.lam * dt, size) if params.lam > 0 else np.zeros(size, dtype=np.int64)
    total = int(n.sum())
    if total > 0:
        u = rng.random(total)
        jumps = double_exp_ppf(u, params.p_up, params.eta1, params.eta2)
        jump_sum = np.zeros(size)
        np.add.at(jump_sum, np.repeat(np.arange(size), n), jumps)
    else:
        jump_sum = np.zeros(size)
    return z, n, jump_sum


def sample_risky_log_returns(
    params: KouParams, dt: float, size: int, rng: np.random.Generator
) -> np.ndarray:
    """One-period risky log returns, exact in distribution."""
    z, _, jump_sum = sample_log_return_parts(params, dt, size, rng)
    drift = (params.mu - params.lam * params.kappa - 0.5 * params.sigma**2) * dt
    return drift + params.sigma * np.sqrt(dt) * z + jump_sum


def simulate_period_return(params: KouParams, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One ReturnVector (risky gross, risk-free gross) over a period of length dt."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    log_r = sample_risky_log_returns(params, dt, 1, rng)[0]
    return np.array([np.exp(log_r), np.exp(params.r_f * dt)])


@dataclass
class ScenarioSet:
    """K i.i.d. return paths, shape (K, M, d_a), plus provenance metadata."""

    data: np.ndarray
    seed: int
    params_fp: bytes

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise DatasetFormatError("scenario data must be K x M x d_a")
        if not np.all(np.isfinite(self.data)) or np.any(self.data <= 0):
            raise DatasetFormatError("scenario data must be finite and positive")

    @property
    def num_paths(self) -> int:
        return self.data.shape[0]

    @property
    def num_periods(self) -> int:
        return self.data.shape[1]

    @property
    def num_assets(self) -> int:
        return self.data.shape[2]

    @property
    def dataset_key(self) -> bytes:
        """Identity of this dataset (params, shape and seed), for leak checks."""
        h = hashlib.sha256(self.params_fp)
        h.update(struct.pack("<QQQ", self.num_paths, self.num_periods, self.seed))
        return h.digest()


def generate_dataset(params: KouParams, grid: TimeGrid, num_paths: int, seed: int) -> ScenarioSet:
    """Simulate ``num_paths`` i.i.d. return paths over the grid.

    Path k draws from Philox substream (seed, k); the output is therefore
    identical however path generation is scheduled.
    """
    if num_paths < 1:
        raise ConfigError("need at least one path")
    M = grid.num_periods
    dt = grid.dt
    drift = (params.mu - params.lam * params.kappa - 0.5 * params.sigma**2) * dt
    vol = params.sigma * np.sqrt(dt)
    rf_gross = np.exp(params.r_f * dt)
    try:
        data = np.empty((num_paths, M, 2), dtype=np.float64)
    except MemoryError as exc:
        raise DatasetFormatError(
            f"cannot allocate {num_paths}x{M}x2 float64 dataset"
        ) from exc
    lam_dt = params.lam * dt
    for k in range(num_paths):
        rng = _path_rng(seed, k)
        z = rng.standard_normal(M)
        if lam_dt > 0:
            n = rng.poisson(lam_dt, M)
            total = int(n.sum())
        else:
            total = 0
        log_r = drift + vol * z
        if total > 0:
            jumps = double_exp_ppf(rng.random(total), params.p_up, params.eta1, params.eta2)
            np.add.at(log_r, np.repeat(np.arange(M), n), jumps)
        data[k, :, 0] = np.exp(log_r)
    data[:, :, 1] = rf_gross
    return ScenarioSet(data=data, seed=seed, params_fp=params_fingerprint(params, grid))


def count_period_jumps(params: KouParams, dt: float, num_paths: int, seed: int) -> np.ndarray:
    """Jump counts of the first period of each path, for distribution checks."""
    counts = np.empty(num_paths, dtype=np.int64)
    lam_dt = params.lam * dt
    for k in range(num_paths):
        rng = _path_rng(seed, k)
        rng.standard_normal(1)
        counts[k] = rng.poisson(lam_dt, 1)[0] if lam_dt > 0 else 0
    return counts


def save_dataset(sset: ScenarioSet, path: str) -> None:
    """Write header(32B) + params fingerprint(32B) + little-endian float64 body."""
    header = _HEADER.pack(
        _MAGIC, _FORMAT_VERSION, sset.num_assets, sset.num_paths, sset.num_periods, sset.seed
    )
    body = np.ascontiguousarray(sset.data, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(sset.params_fp)
        fh.write(body.tobytes())


def load_dataset(path: str) -> ScenarioSet:
    """Read and validate a dataset file; round-trips save_dataset bit-exactly."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise DatasetFormatError(f"{path}: truncated header")
        magic, version, d_a, K, M, seed = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != _FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        if d_a < 1 or K < 1 or M < 1:
            raise DatasetFormatError(f"{path}: nonsensical dimensions K={K} M={M} d_a={d_a}")
        fp = fh.read(32)
        if len(fp) < 32:
            raise DatasetFormatError(f"{path}: truncated fingerprint")
        expected = K * M * d_a * 8
        body = fh.read(expected)
        if len(body) < expected:
            raise DatasetFormatError(
                f"{path}: body holds {len(body)} bytes, header promises {expected}"
            )
    data = np.frombuffer(body, dtype="<f8").reshape(K, M, d_a).copy()
    return ScenarioSet(data=data, seed=seed, params_fp=fp)
