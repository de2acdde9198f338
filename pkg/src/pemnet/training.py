"""Joint optimization of weights and per-sequence posteriors, plus checkpoints.

Training is whole-corpus batch gradient descent with adaptive moments: every
epoch resamples one set of reparameterization noise per sequence, runs the
batched unroll, and takes a single clipped Adam step on the concatenation of
all weights and all posterior variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .gestures import Corpus
from .model import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    LatentPosterior,
    LossBreakdown,
    ModelConfig,
    Parameters,
    backward_batch,
    init_parameters,
    loss_batch,
    unroll_batch,
)
from .numerics import RngStream

CHECKPOINT_FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """The training objective became non-finite."""


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 1500
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0


class Adam:
    """Adaptive-moment gradient descent on a flat parameter vector."""

    def __init__(self, n: int, schedule: TrainSchedule):
        self.schedule = schedule
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def update(self, grad: np.ndarray) -> np.ndarray:
        """Returns the step to subtract from the parameter vector."""
        s = self.schedule
        self.t += 1
        self.m = s.beta1 * self.m + (1.0 - s.beta1) * grad
        self.v = s.beta2 * self.v + (1.0 - s.beta2) * grad ** 2
        m_hat = self.m / (1.0 - s.beta1 ** self.t)
        v_hat = self.v / (1.0 - s.beta2 ** self.t)
        return s.lr * m_hat / (np.sqrt(v_hat) + s.adam_eps)


def clip_by_global_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm > 0 and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


@dataclass
class TrainResult:
    params: Parameters
    posteriors: list[LatentPosterior]
    curve: list[LossBreakdown]


def _stack_targets(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    lengths = {g.proprio.shape[0] for g in corpus.gestures}
    if len(lengths) != 1:
        raise ValueError(f"training requires uniform sequence length, got {lengths}")
    tp = np.stack([g.proprio for g in corpus.gestures])
    tx = np.stack([g.extero for g in corpus.gestures])
    return tp, tx


def train(corpus: Corpus, config: ModelConfig, schedule: TrainSchedule,
          rng: RngStream) -> TrainResult:
    """Fit weights and one posterior per sequence; returns the loss curve.

    The curve holds one loss breakdown per epoch, averaged over sequences.
    A non-finite total aborts with :class:`TrainingDiverged`.
    """
    if not corpus.gestures:
        raise ValueError("corpus is empty")
    target_p, target_x = _stack_targets(corpus)
    B, T, _ = target_p.shape
    kh, kl = config.high.n_latent, config.low.n_latent

    params = init_parameters(config, rng.child(0))
    mu_h = np.zeros((B, T, kh))
    ls_h = np.zeros((B, T, kh))
    mu_l = np.zeros((B, T, kl))
    ls_l = np.zeros((B, T, kl))

    n_param = params.to_vector().size
    sizes = [n_param, mu_h.size, ls_h.size, mu_l.size, ls_l.size]
    bounds = np.cumsum(sizes)
    opt = Adam(int(bounds[-1]), schedule)
    eps_root = rng.child(1)
    coef = np.full(B, 1.0 / B)
    curve: list[LossBreakdown] = []

    for epoch in range(1, schedule.epochs + 1):
        erng = eps_root.child(epoch)
        eps_h = erng.standard_normal(B, T, kh)
        eps_l = erng.standard_normal(B, T, kl)

        cache = unroll_batch(params, mu_h, ls_h, mu_l, ls_l, eps_h, eps_l)
        terms = loss_batch(params, cache, target_p, target_x,
                           mu_h, ls_h, mu_l, ls_l)
        mean_total = float(terms["total"].mean())
        if not np.isfinite(mean_total):
            raise TrainingDiverged(
                f"total loss became non-finite at epoch {epoch} "
                f"(lr={schedule.lr})")
        curve.append(LossBreakdown(
            pe_proprio=float(terms["pe_proprio"].mean()),
            pe_extero=float(terms["pe_extero"].mean()),
            kl_high=float(terms["kl_high"].mean()),
            kl_low=float(terms["kl_low"].mean()),
            total=mean_total,
        ))

        g, dmu_h, dls_h, dmu_l, dls_l = backward_batch(
            params, cache, target_p, target_x, mu_h, ls_h, mu_l, ls_l,
            eps_h, eps_l, coef=coef)
        flat = np.concatenate([
            Parameters(config, g).to_vector(),
            dmu_h.ravel(), dls_h.ravel(), dmu_l.ravel(), dls_l.ravel(),
        ])
        flat = clip_by_global_norm(flat, schedule.clip_norm)
        step = opt.update(flat)

        theta = np.concatenate([
            params.to_vector(),
            mu_h.ravel(), ls_h.ravel(), mu_l.ravel(), ls_l.ravel(),
        ]) - step
        params = params.from_vector(theta[:bounds[0]])
        mu_h = theta[bounds[0]:bounds[1]].reshape(mu_h.shape)
        ls_h = theta[bounds[1]:bounds[2]].reshape(ls_h.shape)
        mu_l = theta[bounds[2]:bounds[3]].reshape(mu_l.shape)
        ls_l = theta[bounds[3]:bounds[4]].reshape(ls_l.shape)
        np.clip(ls_h, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=ls_h)
        np.clip(ls_l, LOG_SIGMA_MIN, LOG_SIGMA_MAX, out=ls_l)

    posteriors = [
        LatentPosterior(mu_h[b].copy(), ls_h[b].copy(),
                        mu_l[b].copy(), ls_l[b].copy())
        for b in range(B)
    ]
    return TrainResult(params=params, posteriors=posteriors, curve=curve)


# ---------------------------------------------------------------------------
# checkpoint file: one npz holding config, weights, and per-sequence posteriors


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Parameters
    posteriors: list[LatentPosterior]


def _config_to_json(config: ModelConfig) -> str:
    return json.dumps({
        "high": {"n_units": config.high.n_units, "tau": config.high.tau,
                 "n_latent": config.high.n_latent, "w": config.high.w},
        "low": {"n_units": config.low.n_units, "tau": config.low.tau,
                "n_latent": config.low.n_latent, "w": config.low.w},
        "dof": config.dof,
    })


def _config_from_json(text: str) -> ModelConfig:
    from .model import LayerConfig
    d = json.loads(text)
    return ModelConfig(high=LayerConfig(**d["high"]),
                       low=LayerConfig(**d["low"]), dof=d["dof"])


def save_checkpoint(path: str | Path, params: Parameters,
                    posteriors: list[LatentPosterior]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload: dict[str, np.ndarray] = {
        "format_version": np.asarray(CHECKPOINT_FORMAT_VERSION),
        "config_json": np.asarray(_config_to_json(params.config)),
        "n_sequences": np.asarray(len(posteriors)),
    }
    for name, arr in params.arrays.items():
        payload[f"param__{name}"] = arr
    for i, post in enumerate(posteriors):
        payload[f"post_{i:04d}__mu_high"] = post.mu_high
        payload[f"post_{i:04d}__log_sigma_high"] = post.log_sigma_high
        payload[f"post_{i:04d}__mu_low"] = post.mu_low
        payload[f"post_{i:04d}__log_sigma_low"] = post.log_sigma_low
    np.savez(path, **payload)
    # np.savez appends .npz when missing; keep the caller's path authoritative
    actual = path if path.suffix == ".npz" else path.with_suffix(path.suffix + ".npz")
    if actual != path:
        actual.rename(path)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = _config_from_json(str(data["config_json"]))
        arrays = {name[len("param__"):]: data[name]
                  for name in data.files if name.startswith("param__")}
        params = Parameters(config, arrays)
        n = int(data["n_sequences"])
        posteriors = [
            LatentPosterior(
                mu_high=data[f"post_{i:04d}__mu_high"],
                log_sigma_high=data[f"post_{i:04d}__log_sigma_high"],
                mu_low=data[f"post_{i:04d}__mu_low"],
                log_sigma_low=data[f"post_{i:04d}__log_sigma_low"],
            )
            for i in range(n)
        ]
    return Checkpoint(config=config, params=params, posteriors=posteriors)
