"""Test-time inference: sliding-window prediction-error minimization.

Weights are frozen; only the posterior means and log-sigmas of the most
recent ``window`` steps are re-optimized against the observed proprio/extero
streams, by plain gradient descent with step-size halving whenever a step
would increase the windowed objective. Propagation inside inference is
posterior-mean (eps = 0), so action generation is deterministic.

The batched runner advances many independent episodes in lockstep (one row
per episode); :class:`AgentState` wraps a single row and is the unit the
experiment protocols reason about.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    LatentPosterior,
    LayerState,
    Parameters,
    StepOutput,
    backward_batch,
    loss_batch,
    unroll_batch,
)
from .numerics import RngStream

VALID_STREAMS = ("proprio", "extero")


@dataclass(frozen=True)
class PemConfig:
    window: int = 10
    iterations: int = 30          # 0 = posterior frozen (passive generation)
    step_size: float = 0.1
    streams: tuple[str, ...] = ("proprio", "extero")
    max_halvings: int = 5

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.iterations < 0 or self.step_size <= 0 or self.max_halvings < 0:
            raise ValueError("invalid iterations/step_size/max_halvings")
        if not self.streams or any(s not in VALID_STREAMS for s in self.streams):
            raise ValueError(f"streams must be a non-empty subset of {VALID_STREAMS}")

    @classmethod
    def disabled(cls, window: int = 10) -> "PemConfig":
        return cls(window=window, iterations=0)

    def stream_mask(self) -> tuple[float, float]:
        return (1.0 if "proprio" in self.streams else 0.0,
                1.0 if "extero" in self.streams else 0.0)


@dataclass
class PemTraceRow:
    step: int
    pe_windowed: np.ndarray      # (B,)
    kl_windowed: np.ndarray      # (B,)
    iterations_used: np.ndarray  # (B,) ints


class BatchedPemRunner:
    """B independent sliding-window inference loops advanced in lockstep."""

    def __init__(self, params: Parameters, pem: PemConfig, batch: int):
        cfg = params.config
        self.params = params
        self.pem = pem
        self.batch = batch
        self.clock = 0
        kh, kl = cfg.high.n_latent, cfg.low.n_latent
        self.mu_h = np.zeros((batch, 0, kh))
        self.ls_h = np.zeros((batch, 0, kh))
        self.mu_l = np.zeros((batch, 0, kl))
        self.ls_l = np.zeros((batch, 0, kl))
        self.obs_p = np.zeros((batch, 0, cfg.dof))
        self.obs_x = np.zeros((batch, 0, cfg.dof))
        self.entry_u_h = np.zeros((batch, cfg.high.n_units))
        self.entry_u_l = np.zeros((batch, cfg.low.n_units))
        self.archived: list[tuple[np.ndarray, ...]] = []
        self.trace: list[PemTraceRow] = []

    @property
    def window_len(self) -> int:
        return self.mu_h.shape[1]

    def observe(self, proprio: np.ndarray, extero: np.ndarray) -> None:
        """Append one observed step; slide the window once it is full."""
        cfg = self.params.config
        if proprio.shape != (self.batch, cfg.dof) \
                or extero.shape != (self.batch, cfg.dof):
            raise ValueError("observation shape mismatch")
        if self.window_len == self.pem.window:
            # retire the oldest step: advance the entry state through it
            # (posterior-mean propagation), then archive it as immutable
            cache = unroll_batch(
                self.params,
                self.mu_h[:, :1], self.ls_h[:, :1],
                self.mu_l[:, :1], self.ls_l[:, :1],
                np.zeros_like(self.mu_h[:, :1]), np.zeros_like(self.mu_l[:, :1]),
                u0_high=self.entry_u_h, u0_low=self.entry_u_l)
            self.entry_u_h = cache.u_high_last
            self.entry_u_l = cache.u_low_last
            self.archived.append((self.mu_h[:, 0].copy(), self.ls_h[:, 0].copy(),
                                  self.mu_l[:, 0].copy(), self.ls_l[:, 0].copy()))
            self.mu_h = self.mu_h[:, 1:]
            self.ls_h = self.ls_h[:, 1:]
            self.mu_l = self.mu_l[:, 1:]
            self.ls_l = self.ls_l[:, 1:]
            self.obs_p = self.obs_p[:, 1:]
            self.obs_x = self.obs_x[:, 1:]
        zh = np.zeros((self.batch, 1, self.mu_h.shape[2]))
        zl = np.zeros((self.batch, 1, self.mu_l.shape[2]))
        self.mu_h = np.concatenate([self.mu_h, zh], axis=1)
        self.ls_h = np.concatenate([self.ls_h, zh.copy()], axis=1)
        self.mu_l = np.concatenate([self.mu_l, zl], axis=1)
        self.ls_l = np.concatenate([self.ls_l, zl.copy()], axis=1)
        self.obs_p = np.concatenate([self.obs_p, proprio[:, None, :]], axis=1)
        self.obs_x = np.concatenate([self.obs_x, extero[:, None, :]], axis=1)
        self.clock += 1

    def _eval(self, mu_h, ls_h, mu_l, ls_l):
        """Windowed objective and its posterior gradients at eps = 0."""
        eps_h = np.zeros_like(mu_h)
        eps_l = np.zeros_like(mu_l)
        cache = unroll_batch(self.params, mu_h, ls_h, mu_l, ls_l, eps_h, eps_l,
                             u0_high=self.entry_u_h, u0_low=self.entry_u_l)
        mask = self.pem.stream_mask()
        terms = loss_batch(self.params, cache, self.obs_p, self.obs_x,
                           mu_h, ls_h, mu_l, ls_l, stream_mask=mask)
        _, dmu_h, dls_h, dmu_l, dls_l = backward_batch(
            self.params, cache, self.obs_p, self.obs_x,
            mu_h, ls_h, mu_l, ls_l, eps_h, eps_l,
            coef=np.ones(self.batch), stream_mask=mask, wrt_params=False)
        return terms, (dmu_h, dls_h, dmu_l, dls_l)

    def pem_update(self) -> None:
        """Descend the windowed objective on the window posteriors only.

        Per-row step sizes halve on any iteration that would increase that
        row's objective (at most ``max_halvings`` per call), so the accepted
        trajectory is non-increasing row by row.
        """
        if self.window_len == 0:
            return
        cfg = self.params.config
        terms, grads = self._eval(self.mu_h, self.ls_h, self.mu_l, self.ls_l)
        total = terms["total"].copy()
        alpha = np.full(self.batch, self.pem.step_size)
        halvings = np.zeros(self.batch, dtype=np.int64)
        used = np.zeros(self.batch, dtype=np.int64)

        for _ in range(self.pem.iterations):
            a = alpha[:, None, None]
            cand = (
                self.mu_h - a * grads[0],
                np.clip(self.ls_h - a * grads[1], LOG_SIGMA_MIN, LOG_SIGMA_MAX),
                self.mu_l - a * grads[2],
                np.clip(self.ls_l - a * grads[3], LOG_SIGMA_MIN, LOG_SIGMA_MAX),
            )
            new_terms, new_grads = self._eval(*cand)
            new_total = new_terms["total"]
            accept = new_total <= total
            if np.any(accept):
                for cur, new in zip((self.mu_h, self.ls_h, self.mu_l, self.ls_l),
                                    cand):
                    cur[accept] = new[accept]
                for g_cur, g_new in zip(grads, new_grads):
                    g_cur[accept] = g_new[accept]
                total[accept] = new_total[accept]
                for k in terms:
                    terms[k][accept] = new_terms[k][accept]
                used[accept] += 1
            reject = ~accept
            halve = reject & (halvings < self.pem.max_halvings)
            alpha[halve] *= 0.5
            halvings[halve] += 1

        self._record_trace(terms, used)

    def record_passive_trace(self) -> None:
        """Trace entry for frozen-posterior agents (iterations = 0)."""
        if self.window_len == 0:
            return
        terms, _ = self._eval(self.mu_h, self.ls_h, self.mu_l, self.ls_l)
        self._record_trace(terms, np.zeros(self.batch, dtype=np.int64))

    def _record_trace(self, terms, used) -> None:
        cfg = self.params.config
        pe = terms["pe_proprio"] + terms["pe_extero"]
        kl = cfg.high.w * terms["kl_high"] + cfg.low.w * terms["kl_low"]
        self.trace.append(PemTraceRow(step=self.clock + 1,
                                      pe_windowed=np.asarray(pe, dtype=np.float64),
                                      kl_windowed=np.asarray(kl, dtype=np.float64),
                                      iterations_used=used))

    def update(self) -> None:
        """One inference round: descend if enabled, else log the passive PE."""
        if self.pem.iterations > 0:
            self.pem_update()
        else:
            self.record_passive_trace()

    def generate_next(self) -> tuple[np.ndarray, np.ndarray]:
        """Posterior-mean rollout through the window plus one prior-mean step.

        Returns (proprio, extero) action/prediction arrays of shape (B, dof);
        the proprio stream is the motor command.
        """
        mu_h = np.concatenate(
            [self.mu_h, np.zeros((self.batch, 1, self.mu_h.shape[2]))], axis=1)
        ls_h = np.concatenate(
            [self.ls_h, np.zeros((self.batch, 1, self.ls_h.shape[2]))], axis=1)
        mu_l = np.concatenate(
            [self.mu_l, np.zeros((self.batch, 1, self.mu_l.shape[2]))], axis=1)
        ls_l = np.concatenate(
            [self.ls_l, np.zeros((self.batch, 1, self.ls_l.shape[2]))], axis=1)
        cache = unroll_batch(self.params, mu_h, ls_h, mu_l, ls_l,
                             np.zeros_like(mu_h), np.zeros_like(mu_l),
                             u0_high=self.entry_u_h, u0_low=self.entry_u_l)
        return cache.y_proprio[:, -1].copy(), cache.y_extero[:, -1].copy()


class AgentState:
    """One frozen-weight agent: sliding inference window plus history."""

    def __init__(self, params: Parameters, pem: PemConfig):
        self.pem = pem
        self._core = BatchedPemRunner(params, pem, batch=1)
        self.history_proprio: list[np.ndarray] = []
        self.history_extero: list[np.ndarray] = []

    @property
    def params(self) -> Parameters:
        return self._core.params

    @property
    def clock(self) -> int:
        return self._core.clock

    @property
    def entry_state(self) -> tuple[LayerState, LayerState]:
        u_h = self._core.entry_u_h[0]
        u_l = self._core.entry_u_l[0]
        return (LayerState(u=u_h.copy(), h=np.tanh(u_h)),
                LayerState(u=u_l.copy(), h=np.tanh(u_l)))

    @property
    def window_posterior(self) -> LatentPosterior:
        c = self._core
        return LatentPosterior(c.mu_h[0].copy(), c.ls_h[0].copy(),
                               c.mu_l[0].copy(), c.ls_l[0].copy())

    @property
    def archived_posteriors(self) -> list[tuple[np.ndarray, ...]]:
        return [tuple(a[0] for a in row) for row in self._core.archived]

    @property
    def trace(self) -> list[tuple[int, float, float, int]]:
        return [(r.step, float(r.pe_windowed[0]), float(r.kl_windowed[0]),
                 int(r.iterations_used[0])) for r in self._core.trace]


def observe(agent: AgentState, proprio: np.ndarray, extero: np.ndarray) -> None:
    """Record one executed/observed step and slide the window."""
    proprio = np.asarray(proprio, dtype=np.float64)
    extero = np.asarray(extero, dtype=np.float64)
    agent.history_proprio.append(proprio)
    agent.history_extero.append(extero)
    agent._core.observe(proprio[None], extero[None])


def pem_update(agent: AgentState) -> AgentState:
    """Re-optimize the window posteriors against the windowed observations.

    The observation window is the tail of the recorded history (length
    min(clock, window)); weights are never touched. ``iterations = 0`` is a
    legal no-op that still logs the passive windowed PE.
    """
    agent._core.update()
    return agent


def generate_next(agent: AgentState) -> StepOutput:
    """One-step prediction past the window; proprio is the motor command."""
    p, x = agent._core.generate_next()
    return StepOutput(proprio=p[0], extero=x[0])


def prior_rollout(params: Parameters, horizon: int,
                  rng: RngStream | None = None,
                  stochastic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Generate from the prior: z ~ N(0, I) if stochastic, else z = 0.

    No observations are consumed. Returns (proprio, extero) arrays of shape
    (horizon, dof).
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    cfg = params.config
    kh, kl = cfg.high.n_latent, cfg.low.n_latent
    if stochastic:
        if rng is None:
            raise ValueError("stochastic rollout needs an RngStream")
        eps_h = rng.standard_normal(1, horizon, kh)
        eps_l = rng.standard_normal(1, horizon, kl)
    else:
        eps_h = np.zeros((1, horizon, kh))
        eps_l = np.zeros((1, horizon, kl))
    zero_h = np.zeros((1, horizon, kh))
    zero_l = np.zeros((1, horizon, kl))
    cache = unroll_batch(params, zero_h, zero_h.copy(), zero_l, zero_l.copy(),
                         eps_h, eps_l)
    return cache.y_proprio[0], cache.y_extero[0]


def write_pem_trace(trace: list[tuple[int, float, float, int]],
                    path: str | Path) -> None:
    """CSV export: step, pe_windowed, kl_windowed, iterations_used."""
    with open(path, "w") as fh:
        fh.write("step,pe_windowed,kl_windowed,iterations_used\n")
        for step, pe, kl, used in trace:
            fh.write(f"{step},{pe:.12g},{kl:.12g},{used}\n")
