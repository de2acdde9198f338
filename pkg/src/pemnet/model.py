"""Stochastic two-timescale recurrent network: dynamics, loss, gradients.

The network has a slow "high" context layer and a fast "low" context layer,
each a leaky integrator with its own per-step Gaussian latent variables:

    u_t = (1 - 1/tau) u_{t-1} + (1/tau) (W_rec h_{t-1} + W_adj h'_{t-1}
                                          + W_z z_t + b)
    h_t = tanh(u_t)
    z_t = mu_t + exp(log_sigma_t) * eps_t

Proprio and extero predictions are read from the low layer through tanh
output heads. The objective is squared prediction error on both streams plus
a per-layer weighted KL of the adaptive posteriors against N(0, I); the `w`
weight per layer sets how strongly latents are pulled to the prior and hence
how stochastic the dynamics stay.

Everything here is plain float64 numpy. The unroll and backward pass carry a
batch dimension internally so training and multi-episode evaluation stay
vectorized; the public single-sequence operations wrap batch size 1.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream

LOG_SIGMA_MIN = -10.0
LOG_SIGMA_MAX = 5.0


@dataclass(frozen=True)
class LayerConfig:
    n_units: int
    tau: float       # integration timescale in steps, >= 1
    n_latent: int
    w: float = 0.0   # KL weight ("meta-prior") for this layer

    def __post_init__(self) -> None:
        if self.n_units < 1 or self.n_latent < 1:
            raise ValueError("n_units and n_latent must be >= 1")
        if self.tau < 1.0:
            raise ValueError("tau must be >= 1")
        if self.w < 0.0:
            raise ValueError("w must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    """Two context layers, slow ("high") over fast ("low"), and 6-DoF heads."""

    high: LayerConfig = LayerConfig(n_units=10, tau=10.0, n_latent=2)
    low: LayerConfig = LayerConfig(n_units=30, tau=2.0, n_latent=4)
    dof: int = 6

    def __post_init__(self) -> None:
        if self.high.tau <= self.low.tau:
            raise ValueError("high layer must be slower than low layer")
        if self.dof < 1:
            raise ValueError("dof must be >= 1")

    def with_weights(self, w_high: float, w_low: float) -> "ModelConfig":
        return ModelConfig(
            high=LayerConfig(self.high.n_units, self.high.tau,
                             self.high.n_latent, w_high),
            low=LayerConfig(self.low.n_units, self.low.tau,
                            self.low.n_latent, w_low),
            dof=self.dof,
        )


# (rows, cols) per weight, in a fixed order; cols double as fan-in.
def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    nh, nl = cfg.high.n_units, cfg.low.n_units
    kh, kl = cfg.high.n_latent, cfg.low.n_latent
    d = cfg.dof
    return {
        "rec_high": (nh, nh),       # high <- high
        "rec_low": (nl, nl),        # low <- low
        "top_down": (nl, nh),       # low <- high
        "bottom_up": (nh, nl),      # high <- low
        "lat_high": (nh, kh),       # high <- z_high
        "lat_low": (nl, kl),        # low <- z_low
        "bias_high": (nh,),
        "bias_low": (nl,),
        "out_proprio": (d, nl),     # proprio head <- low
        "out_extero": (d, nl),      # extero head <- low
        "bias_proprio": (d,),
        "bias_extero": (d,),
    }


class Parameters:
    """All learnable weights, keyed by role; shapes audited on construction."""

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        shapes = _param_shapes(config)
        if set(arrays) != set(shapes):
            raise ValueError(f"parameter names mismatch: {sorted(arrays)}")
        for name, shape in shapes.items():
            a = arrays[name]
            if a.shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name}: non-finite entries")
        self.config = config
        self.arrays = {n: np.asarray(arrays[n], dtype=np.float64)
                       for n in shapes}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @classmethod
    def zeros(cls, config: ModelConfig) -> "Parameters":
        return cls(config, {n: np.zeros(s) for n, s in
                            _param_shapes(config).items()})

    def copy(self) -> "Parameters":
        return Parameters(self.config,
                          {n: a.copy() for n, a in self.arrays.items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def from_vector(self, vec: np.ndarray) -> "Parameters":
        out, i = {}, 0
        for n, a in self.arrays.items():
            out[n] = vec[i:i + a.size].reshape(a.shape).copy()
            i += a.size
        if i != vec.size:
            raise ValueError("vector length mismatch")
        return Parameters(self.config, out)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for n, a in self.arrays.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


def init_parameters(config: ModelConfig, rng: RngStream) -> Parameters:
    """Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; biases zero."""
    arrays = {}
    for name, shape in _param_shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, *shape)
    return Parameters(config, arrays)


@dataclass
class LatentPosterior:
    """Adaptive per-step Gaussian posterior for one sequence (steps 1..T)."""

    mu_high: np.ndarray         # (T, k_high)
    log_sigma_high: np.ndarray
    mu_low: np.ndarray          # (T, k_low)
    log_sigma_low: np.ndarray

    def __post_init__(self) -> None:
        if (self.mu_high.shape != self.log_sigma_high.shape
                or self.mu_low.shape != self.log_sigma_low.shape
                or self.mu_high.shape[0] != self.mu_low.shape[0]):
            raise ValueError("posterior shape mismatch")

    @property
    def horizon(self) -> int:
        return self.mu_high.shape[0]

    @classmethod
    def zeros(cls, config: ModelConfig, horizon: int) -> "LatentPosterior":
        return cls(
            mu_high=np.zeros((horizon, config.high.n_latent)),
            log_sigma_high=np.zeros((horizon, config.high.n_latent)),
            mu_low=np.zeros((horizon, config.low.n_latent)),
            log_sigma_low=np.zeros((horizon, config.low.n_latent)),
        )

    def copy(self) -> "LatentPosterior":
        return LatentPosterior(self.mu_high.copy(), self.log_sigma_high.copy(),
                               self.mu_low.copy(), self.log_sigma_low.copy())

    def clamp(self) -> None:
        np.clip(self.log_sigma_high, LOG_SIGMA_MIN, LOG_SIGMA_MAX,
                out=self.log_sigma_high)
        np.clip(self.log_sigma_low, LOG_SIGMA_MIN, LOG_SIGMA_MAX,
                out=self.log_sigma_low)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.mu_high.ravel(),
                               self.log_sigma_high.ravel(),
                               self.mu_low.ravel(),
                               self.log_sigma_low.ravel()])

    def from_vector(self, vec: np.ndarray) -> "LatentPosterior":
        parts, i = [], 0
        for a in (self.mu_high, self.log_sigma_high,
                  self.mu_low, self.log_sigma_low):
            parts.append(vec[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        if i != vec.size:
            raise ValueError("vector length mismatch")
        return LatentPosterior(*parts)


@dataclass(frozen=True)
class LayerState:
    u: np.ndarray  # membrane potential
    h: np.ndarray  # activation, tanh(u)

    @classmethod
    def zeros(cls, n_units: int) -> "LayerState":
        return cls(u=np.zeros(n_units), h=np.zeros(n_units))


@dataclass(frozen=True)
class StepOutput:
    proprio: np.ndarray  # (dof,), in [-1, 1]
    extero: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    pe_proprio: float
    pe_extero: float
    kl_high: float
    kl_low: float
    total: float


def sample_latent(mu: np.ndarray, log_sigma: np.ndarray,
                  eps: np.ndarray) -> np.ndarray:
    """Reparameterized draw z = mu + exp(log_sigma) * eps."""
    return mu + np.exp(log_sigma) * eps


def kl_unit_gaussian(mu: np.ndarray, log_sigma: np.ndarray) -> float:
    """Closed-form KL( N(mu, sigma^2) || N(0, 1) ), summed over entries."""
    mu = np.asarray(mu, dtype=np.float64)
    s = np.asarray(log_sigma, dtype=np.float64)
    if mu.shape != s.shape:
        raise ValueError("mu and log_sigma must have equal shape")
    return float(np.sum(0.5 * (mu ** 2 + np.exp(2.0 * s) - 1.0 - 2.0 * s)))


def forward_step(params: Parameters, prev_high: LayerState,
                 prev_low: LayerState, z_high: np.ndarray,
                 z_low: np.ndarray) -> tuple[LayerState, LayerState, StepOutput]:
    """One leaky-integrator update of both layers plus the output heads."""
    cfg = params.config
    if prev_high.u.shape != (cfg.high.n_units,) \
            or prev_low.u.shape != (cfg.low.n_units,):
        raise ValueError("state dimensions do not match config")
    if z_high.shape != (cfg.high.n_latent,) \
            or z_low.shape != (cfg.low.n_latent,):
        raise ValueError("latent dimensions do not match config")
    p = params.arrays
    a_high = (p["rec_high"] @ prev_high.h + p["bottom_up"] @ prev_low.h
              + p["lat_high"] @ z_high + p["bias_high"])
    a_low = (p["rec_low"] @ prev_low.h + p["top_down"] @ prev_high.h
             + p["lat_low"] @ z_low + p["bias_low"])
    u_high = (1.0 - 1.0 / cfg.high.tau) * prev_high.u + a_high / cfg.high.tau
    u_low = (1.0 - 1.0 / cfg.low.tau) * prev_low.u + a_low / cfg.low.tau
    high = LayerState(u=u_high, h=np.tanh(u_high))
    low = LayerState(u=u_low, h=np.tanh(u_low))
    out = StepOutput(
        proprio=np.tanh(p["out_proprio"] @ low.h + p["bias_proprio"]),
        extero=np.tanh(p["out_extero"] @ low.h + p["bias_extero"]),
    )
    return high, low, out


# ---------------------------------------------------------------------------
# batched core (internal): arrays carry a leading batch dimension B


@dataclass
class BatchCache:
    """Forward-pass quantities kept for the backward pass."""

    h_high: np.ndarray   # (B, T+1, nh), row 0 = state entering the unroll
    h_low: np.ndarray    # (B, T+1, nl)
    z_high: np.ndarray   # (B, T, kh)
    z_low: np.ndarray
    y_proprio: np.ndarray  # (B, T, dof)
    y_extero: np.ndarray
    u_high_last: np.ndarray = field(default=None)  # type: ignore[assignment]
    u_low_last: np.ndarray = field(default=None)   # type: ignore[assignment]


def unroll_batch(params: Parameters, mu_h: np.ndarray, ls_h: np.ndarray,
                 mu_l: np.ndarray, ls_l: np.ndarray, eps_h: np.ndarray,
                 eps_l: np.ndarray, u0_high: np.ndarray | None = None,
                 u0_low: np.ndarray | None = None) -> BatchCache:
    """Run the dynamics for a batch; initial potentials default to zero."""
    cfg = params.config
    p = params.arrays
    B, T, _ = mu_h.shape
    nh, nl = cfg.high.n_units, cfg.low.n_units
    ch, cl = 1.0 / cfg.high.tau, 1.0 / cfg.low.tau

    z_h = mu_h + np.exp(ls_h) * eps_h
    z_l = mu_l + np.exp(ls_l) * eps_l

    u_high = np.zeros((B, nh)) if u0_high is None else u0_high.copy()
    u_low = np.zeros((B, nl)) if u0_low is None else u0_low.copy()
    h_high = np.empty((B, T + 1, nh))
    h_low = np.empty((B, T + 1, nl))
    h_high[:, 0] = np.tanh(u_high)
    h_low[:, 0] = np.tanh(u_low)

    rec_h_t, rec_l_t = p["rec_high"].T, p["rec_low"].T
    td_t, bu_t = p["top_down"].T, p["bottom_up"].T
    lat_h_t, lat_l_t = p["lat_high"].T, p["lat_low"].T

    for t in range(T):
        hh, hl = h_high[:, t], h_low[:, t]
        a_h = hh @ rec_h_t + hl @ bu_t + z_h[:, t] @ lat_h_t + p["bias_high"]
        a_l = hl @ rec_l_t + hh @ td_t + z_l[:, t] @ lat_l_t + p["bias_low"]
        u_high = (1.0 - ch) * u_high + ch * a_h
        u_low = (1.0 - cl) * u_low + cl * a_l
        h_high[:, t + 1] = np.tanh(u_high)
        h_low[:, t + 1] = np.tanh(u_low)

    y_p = np.tanh(np.einsum("btn,dn->btd", h_low[:, 1:], p["out_proprio"])
                  + p["bias_proprio"])
    y_x = np.tanh(np.einsum("btn,dn->btd", h_low[:, 1:], p["out_extero"])
                  + p["bias_extero"])
    return BatchCache(h_high=h_high, h_low=h_low, z_high=z_h, z_low=z_l,
                      y_proprio=y_p, y_extero=y_x,
                      u_high_last=u_high, u_low_last=u_low)


def loss_batch(params: Parameters, cache: BatchCache, target_p: np.ndarray,
               target_x: np.ndarray, mu_h: np.ndarray, ls_h: np.ndarray,
               mu_l: np.ndarray, ls_l: np.ndarray,
               stream_mask: tuple[float, float] = (1.0, 1.0)) -> dict[str, np.ndarray]:
    """Per-sequence loss terms, each an array of shape (B,).

    pe terms are averaged per step and per dimension, kl terms per step and
    per latent, so the layer weights stay comparable across sizes.
    """
    cfg = params.config
    T = target_p.shape[1]
    c_pe = 1.0 / (T * cfg.dof)
    c_kh = 1.0 / (T * cfg.high.n_latent)
    c_kl = 1.0 / (T * cfg.low.n_latent)
    pe_p = stream_mask[0] * c_pe * 0.5 * np.sum(
        (cache.y_proprio - target_p) ** 2, axis=(1, 2))
    pe_x = stream_mask[1] * c_pe * 0.5 * np.sum(
        (cache.y_extero - target_x) ** 2, axis=(1, 2))
    kl_h = c_kh * np.sum(
        0.5 * (mu_h ** 2 + np.exp(2 * ls_h) - 1.0 - 2.0 * ls_h), axis=(1, 2))
    kl_l = c_kl * np.sum(
        0.5 * (mu_l ** 2 + np.exp(2 * ls_l) - 1.0 - 2.0 * ls_l), axis=(1, 2))
    total = pe_p + pe_x + cfg.high.w * kl_h + cfg.low.w * kl_l
    return {"pe_proprio": pe_p, "pe_extero": pe_x,
            "kl_high": kl_h, "kl_low": kl_l, "total": total}


def backward_batch(params: Parameters, cache: BatchCache, target_p: np.ndarray,
                   target_x: np.ndarray, mu_h: np.ndarray, ls_h: np.ndarray,
                   mu_l: np.ndarray, ls_l: np.ndarray, eps_h: np.ndarray,
                   eps_l: np.ndarray, coef: np.ndarray,
                   stream_mask: tuple[float, float] = (1.0, 1.0),
                   wrt_params: bool = True):
    """Reverse-mode gradients of sum_b coef[b] * total_b.

    Returns (param_grads dict or None, dmu_h, dls_h, dmu_l, dls_l). The eps
    draws are held fixed, so gradients flow to mu directly and to log_sigma
    through exp(log_sigma) * eps plus the KL term.
    """
    cfg = params.config
    p = params.arrays
    B, T, _ = mu_h.shape
    c_pe = 1.0 / (T * cfg.dof)
    c_kh = 1.0 / (T * cfg.high.n_latent)
    c_kl = 1.0 / (T * cfg.low.n_latent)
    ch, cl = 1.0 / cfg.high.tau, 1.0 / cfg.low.tau
    co = coef[:, None, None]  # (B,1,1)

    # output heads: gradient at the pre-activation of each head
    do_p = (co * (stream_mask[0] * c_pe)) * (cache.y_proprio - target_p) \
        * (1.0 - cache.y_proprio ** 2)
    do_x = (co * (stream_mask[1] * c_pe)) * (cache.y_extero - target_x) \
        * (1.0 - cache.y_extero ** 2)

    # deltas d(objective)/d(u_t) per layer, collected over the reverse sweep
    d_high = np.zeros((B, T, cfg.high.n_units))
    d_low = np.zeros((B, T, cfg.low.n_units))
    delta_h = np.zeros((B, cfg.high.n_units))
    delta_l = np.zeros((B, cfg.low.n_units))
    for t in range(T - 1, -1, -1):
        dh_l = do_p[:, t] @ p["out_proprio"] + do_x[:, t] @ p["out_extero"]
        if t < T - 1:
            dh_l = dh_l + cl * (delta_l @ p["rec_low"]) \
                + ch * (delta_h @ p["bottom_up"])
            dh_h = ch * (delta_h @ p["rec_high"]) + cl * (delta_l @ p["top_down"])
        else:
            dh_h = np.zeros((B, cfg.high.n_units))
        hh, hl = cache.h_high[:, t + 1], cache.h_low[:, t + 1]
        delta_h = dh_h * (1.0 - hh ** 2) + (1.0 - ch) * delta_h
        delta_l = dh_l * (1.0 - hl ** 2) + (1.0 - cl) * delta_l
        d_high[:, t] = delta_h
        d_low[:, t] = delta_l

    grads = None
    if wrt_params:
        grads = {
            "rec_high": ch * np.einsum("btn,btm->nm", d_high, cache.h_high[:, :-1]),
            "rec_low": cl * np.einsum("btn,btm->nm", d_low, cache.h_low[:, :-1]),
            "top_down": cl * np.einsum("btn,btm->nm", d_low, cache.h_high[:, :-1]),
            "bottom_up": ch * np.einsum("btn,btm->nm", d_high, cache.h_low[:, :-1]),
            "lat_high": ch * np.einsum("btn,btk->nk", d_high, cache.z_high),
            "lat_low": cl * np.einsum("btn,btk->nk", d_low, cache.z_low),
            "bias_high": ch * d_high.sum(axis=(0, 1)),
            "bias_low": cl * d_low.sum(axis=(0, 1)),
            "out_proprio": np.einsum("btd,btn->dn", do_p, cache.h_low[:, 1:]),
            "out_extero": np.einsum("btd,btn->dn", do_x, cache.h_low[:, 1:]),
            "bias_proprio": do_p.sum(axis=(0, 1)),
            "bias_extero": do_x.sum(axis=(0, 1)),
        }

    dz_h = ch * np.einsum("btn,nk->btk", d_high, p["lat_high"])
    dz_l = cl * np.einsum("btn,nk->btk", d_low, p["lat_low"])
    dmu_h = dz_h + (co * cfg.high.w * c_kh) * mu_h
    dmu_l = dz_l + (co * cfg.low.w * c_kl) * mu_l
    dls_h = dz_h * np.exp(ls_h) * eps_h \
        + (co * cfg.high.w * c_kh) * (np.exp(2.0 * ls_h) - 1.0)
    dls_l = dz_l * np.exp(ls_l) * eps_l \
        + (co * cfg.low.w * c_kl) * (np.exp(2.0 * ls_l) - 1.0)
    return grads, dmu_h, dls_h, dmu_l, dls_l


def _as_batch(posterior: LatentPosterior, eps: "EpsDraws"):
    return (posterior.mu_high[None], posterior.log_sigma_high[None],
            posterior.mu_low[None], posterior.log_sigma_low[None],
            eps.high[None], eps.low[None])


@dataclass(frozen=True)
class EpsDraws:
    """Per-step reparameterization noise, matching the posterior's shapes."""

    high: np.ndarray  # (T, k_high)
    low: np.ndarray   # (T, k_low)

    @classmethod
    def zeros(cls, config: ModelConfig, horizon: int) -> "EpsDraws":
        return cls(high=np.zeros((horizon, config.high.n_latent)),
                   low=np.zeros((horizon, config.low.n_latent)))

    @classmethod
    def sample(cls, config: ModelConfig, horizon: int,
               rng: RngStream) -> "EpsDraws":
        return cls(high=rng.standard_normal(horizon, config.high.n_latent),
                   low=rng.standard_normal(horizon, config.low.n_latent))


def _breakdown(terms: dict[str, np.ndarray], b: int = 0) -> LossBreakdown:
    return LossBreakdown(
        pe_proprio=float(terms["pe_proprio"][b]),
        pe_extero=float(terms["pe_extero"][b]),
        kl_high=float(terms["kl_high"][b]),
        kl_low=float(terms["kl_low"][b]),
        total=float(terms["total"][b]),
    )


def sequence_loss(params: Parameters, posterior: LatentPosterior,
                  target_proprio: np.ndarray, target_extero: np.ndarray,
                  eps: EpsDraws) -> LossBreakdown:
    """Unrolled prediction-error + weighted-KL objective for one sequence."""
    T = target_proprio.shape[0]
    if posterior.horizon != T:
        raise ValueError(f"posterior horizon {posterior.horizon} != target {T}")
    mu_h, ls_h, mu_l, ls_l, eps_h, eps_l = _as_batch(posterior, eps)
    cache = unroll_batch(params, mu_h, ls_h, mu_l, ls_l, eps_h, eps_l)
    terms = loss_batch(params, cache, target_proprio[None], target_extero[None],
                       mu_h, ls_h, mu_l, ls_l)
    return _breakdown(terms)


def bptt_gradients(params: Parameters, posterior: LatentPosterior,
                   target_proprio: np.ndarray, target_extero: np.ndarray,
                   eps: EpsDraws):
    """Exact gradients of the sequence objective.

    Returns (param gradients as Parameters, posterior gradients as
    LatentPosterior, LossBreakdown).
    """
    T = target_proprio.shape[0]
    if posterior.horizon != T:
        raise ValueError(f"posterior horizon {posterior.horizon} != target {T}")
    mu_h, ls_h, mu_l, ls_l, eps_h, eps_l = _as_batch(posterior, eps)
    cache = unroll_batch(params, mu_h, ls_h, mu_l, ls_l, eps_h, eps_l)
    terms = loss_batch(params, cache, target_proprio[None], target_extero[None],
                       mu_h, ls_h, mu_l, ls_l)
    g, dmu_h, dls_h, dmu_l, dls_l = backward_batch(
        params, cache, target_proprio[None], target_extero[None],
        mu_h, ls_h, mu_l, ls_l, eps_h, eps_l, coef=np.ones(1))
    grad_params = Parameters(params.config, g)
    grad_post = LatentPosterior(dmu_h[0], dls_h[0], dmu_l[0], dls_l[0])
    return grad_params, grad_post, _breakdown(terms)
