"""The two experiment protocols and their reports.

1. Imitation benchmark: five (w_high, w_low) training conditions x
   {PEM, no-PEM} x {short, long} test data. The agent watches a fresh noisy
   rendition of a known gesture on its extero stream, executes its proprio
   prediction, and is scored by the zero-lag correlation between the observed
   gesture and the executed one, past a calibration prefix.

2. Coupled two-agent loop: both agents exchange executed actions in lockstep
   for a fixed number of steps over several trials; each resulting trajectory
   is classified as a fixed point, a limit cycle (with period), or emergent
   (neither), from its exported values alone.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .gestures import (
    Corpus,
    Role,
    synth_gesture,
    write_trajectory_csv,
)
from .inference import BatchedPemRunner, PemConfig, write_pem_trace
from .model import ModelConfig, Parameters
from .numerics import ZeroVarianceError, derive_stream, pearson
from .training import (
    TrainSchedule,
    load_checkpoint,
    save_checkpoint,
    train,
)

# stream ids under a benchmark master seed
_TRAIN_STREAM = 0
_EVAL_STREAM = 1
# stream id for per-trial motor noise under an interaction master seed
_RRI_TRIAL_STREAM = 2


@dataclass(frozen=True)
class Condition:
    id: int
    w_high: float
    w_low: float


CONDITION_GRID: tuple[Condition, ...] = (
    Condition(1, 0.0, 0.0),
    Condition(2, 1e-4, 1e-4),
    Condition(3, 1e-2, 1e-2),
    Condition(4, 1e-2, 1e-4),
    Condition(5, 1e-4, 1e-2),
)


class MissingCheckpointError(FileNotFoundError):
    """A benchmark condition has no trained checkpoint to load."""


@dataclass(frozen=True)
class ImitationResult:
    condition_id: int
    pem: bool
    length: str              # "short" | "long"
    seed: int
    score: float             # mean of per_gesture
    per_gesture: tuple[float, ...]


@dataclass(frozen=True)
class EvalSettings:
    short_len: int = 100
    long_len: int = 300


def checkpoint_name(seed: int, condition_id: int) -> str:
    return f"ckpt_seed{seed}_cond{condition_id}.npz"


def imitation_episode_batch(params: Parameters, pem: PemConfig,
                            extero_seq: np.ndarray,
                            pem_mode: str) -> tuple[np.ndarray, BatchedPemRunner]:
    """Run B imitation episodes in lockstep against prerecorded partners.

    ``extero_seq`` is (B, T, dof): the partner's gesture, observed on the
    extero stream. The executed action at each step is the agent's proprio
    prediction and doubles as its proprio observation. ``pem_mode`` is
    "full" (inference at every step) or "prefix" (inference only during the
    first ``window`` steps, then passive generation).
    """
    if pem_mode not in ("full", "prefix"):
        raise ValueError(f"unknown pem_mode {pem_mode!r}")
    B, T, dof = extero_seq.shape
    core = BatchedPemRunner(params, pem, batch=B)
    executed = np.empty((B, T, dof))
    for t in range(T):
        step = t + 1
        if step > 1:
            if pem_mode == "full" or step <= pem.window:
                core.update()
            else:
                core.record_passive_trace()
        action, _ = core.generate_next()
        executed[:, t] = action
        core.observe(action, extero_seq[:, t])
    return executed, core


def score_imitation(extero_seq: np.ndarray, executed: np.ndarray,
                    skip: int) -> np.ndarray:
    """Per-episode mean-over-DoF correlation past the calibration prefix.

    A constant stream on either side of a pair contributes 0 (no imitation).
    """
    B, T, dof = extero_seq.shape
    scores = np.empty(B)
    for b in range(B):
        vals = []
        for d in range(dof):
            try:
                vals.append(pearson(extero_seq[b, skip:, d],
                                    executed[b, skip:, d]))
            except ZeroVarianceError:
                vals.append(0.0)
        scores[b] = float(np.mean(vals))
    return scores


def _eval_renditions(corpus: Corpus, seed: int, length: int) -> np.ndarray:
    """Fresh-noise renditions of every (spec, role); returns (B, length, dof)
    extero streams (the partner's side of each seat)."""
    streams = []
    for spec in corpus.specs:
        for j, role in enumerate((Role.LEADER, Role.FOLLOWER)):
            rng = derive_stream(seed, _EVAL_STREAM).child(spec.id).child(j)
            g = synth_gesture(spec, role, rng, length=length)
            streams.append(g.extero)
    return np.stack(streams)


def train_or_load(corpus: Corpus, base_config: ModelConfig,
                  condition: Condition, schedule: TrainSchedule, seed: int,
                  checkpoint_dir: str | Path,
                  require_existing: bool = False) -> Parameters:
    """One training per (seed, condition); cached as a checkpoint file."""
    path = Path(checkpoint_dir) / checkpoint_name(seed, condition.id)
    if path.exists():
        return load_checkpoint(path).params
    if require_existing:
        raise MissingCheckpointError(
            f"no checkpoint for seed {seed}, condition {condition.id}: {path}")
    config = base_config.with_weights(condition.w_high, condition.w_low)
    result = train(corpus, config, schedule, derive_stream(seed, _TRAIN_STREAM))
    save_checkpoint(path, result.params, result.posteriors)
    return result.params


def _benchmark_unit(args) -> list[ImitationResult]:
    (corpus, base_config, condition, schedule, seed, pem, settings,
     checkpoint_dir, require_existing) = args
    params = train_or_load(corpus, base_config, condition, schedule, seed,
                           checkpoint_dir, require_existing)
    results = []
    for length_name, length in (("short", settings.short_len),
                                ("long", settings.long_len)):
        extero = _eval_renditions(corpus, seed, length)
        for use_pem in (True, False):
            executed, _ = imitation_episode_batch(
                params, pem, extero, pem_mode="full" if use_pem else "prefix")
            scores = score_imitation(extero, executed, skip=pem.window)
            results.append(ImitationResult(
                condition_id=condition.id, pem=use_pem, length=length_name,
                seed=seed, score=float(scores.mean()),
                per_gesture=tuple(float(s) for s in scores)))
    return results


def run_imitation_benchmark(corpus: Corpus, grid: tuple[Condition, ...],
                            seeds: list[int], base_config: ModelConfig,
                            schedule: TrainSchedule, pem: PemConfig,
                            settings: EvalSettings,
                            checkpoint_dir: str | Path,
                            require_existing: bool = False,
                            jobs: int = 1) -> list[ImitationResult]:
    """The full condition grid; always 4 cells per condition per seed.

    Work units are (seed, condition) pairs; results are keyed, so the job
    count never changes any output value.
    """
    units = [
        (corpus, base_config, condition, schedule, seed, pem, settings,
         checkpoint_dir, require_existing)
        for seed in seeds for condition in grid
    ]
    if jobs <= 1:
        chunks = [_benchmark_unit(u) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_benchmark_unit, units))
    results = [r for chunk in chunks for r in chunk]
    results.sort(key=lambda r: (r.seed, r.condition_id, r.length, not r.pem))
    return results


def write_imitation_csv(results: list[ImitationResult], path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("condition_id,pem,length,seed,score\n")
        for r in results:
            fh.write(f"{r.condition_id},{int(r.pem)},{r.length},{r.seed},"
                     f"{r.score:.6f}\n")


def read_imitation_csv(path: str | Path) -> list[ImitationResult]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        cid, pem, length, seed, score = line.split(",")
        out.append(ImitationResult(
            condition_id=int(cid), pem=bool(int(pem)), length=length,
            seed=int(seed), score=float(score), per_gesture=()))
    return out


def render_imitation_table(results: list[ImitationResult],
                           grid: tuple[Condition, ...] = CONDITION_GRID) -> str:
    """Text table: conditions across, (length x pem) down, per seed + mean."""
    seeds = sorted({r.seed for r in results})
    by_key = {(r.seed, r.condition_id, r.length, r.pem): r.score
              for r in results}
    lines = ["Imitation benchmark: mean correlation, observed gesture vs executed gesture", ""]
    header = f"{'':24s}" + "".join(f"{c.id:>9d}" for c in grid)
    lines.append(header)
    lines.append(f"{'w_high':24s}" + "".join(f"{c.w_high:>9g}" for c in grid))
    lines.append(f"{'w_low':24s}" + "".join(f"{c.w_low:>9g}" for c in grid))

    def block(title: str, fetch) -> None:
        lines.append(title)
        for length in ("short", "long"):
            for pem in (False, True):
                tag = f"  {length:5s} {'pem' if pem else 'no-pem':6s}"
                row = ""
                for c in grid:
                    v = fetch(c.id, length, pem)
                    row += f"{v:>9.3f}" if v is not None else f"{'-':>9s}"
                lines.append(f"{tag:24s}" + row)

    for seed in seeds:
        block(f"seed {seed}",
              lambda cid, ln, pm, s=seed: by_key.get((s, cid, ln, pm)))

    def mean_fetch(cid, ln, pm):
        vals = [by_key[(s, cid, ln, pm)] for s in seeds
                if (s, cid, ln, pm) in by_key]
        return float(np.mean(vals)) if vals else None

    block(f"mean over {len(seeds)} seeds", mean_fetch)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# coupled two-agent interaction


@dataclass(frozen=True)
class RriAgentSpec:
    checkpoint: str | Path
    pem: PemConfig | None        # None = passive generation (no inference)
    stream_id: int               # labels this agent's motor-noise streams


@dataclass(frozen=True)
class RriConfig:
    agent_a: RriAgentSpec
    agent_b: RriAgentSpec
    steps: int = 1000
    trials: int = 10
    motor_noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.steps < 2 or self.trials < 1 or self.motor_noise_sigma < 0:
            raise ValueError("invalid steps/trials/motor_noise_sigma")


@dataclass
class RriRun:
    config: RriConfig
    master_seed: int
    executed_a: np.ndarray       # (trials, steps, dof), quantized as exported
    executed_b: np.ndarray
    runner_a: BatchedPemRunner
    runner_b: BatchedPemRunner


def _motor_noise(master_seed: int, spec: RriAgentSpec, trials: int,
                 steps: int, dof: int, sigma: float) -> np.ndarray:
    if sigma == 0.0:
        return np.zeros((trials, steps, dof))
    draws = [
        derive_stream(master_seed, _RRI_TRIAL_STREAM)
        .child(trial).child(spec.stream_id)
        .standard_normal(steps, dof)
        for trial in range(trials)
    ]
    return sigma * np.stack(draws)


def run_rri(config: RriConfig, master_seed: int) -> RriRun:
    """Lockstep interaction: all trials advance together, one row per trial.

    At step t, each agent re-infers from the exchange history through t-1
    (if inference is enabled), generates its action, and both actions are
    exchanged simultaneously. Step 1 actions come from the prior-mean
    rollout. Executed actions are quantized to the export precision before
    being recorded or observed, so every downstream decision is reproducible
    from the CSVs alone.
    """
    ckpt_a = load_checkpoint(config.agent_a.checkpoint)
    ckpt_b = load_checkpoint(config.agent_b.checkpoint)
    pem_a = config.agent_a.pem or PemConfig.disabled()
    pem_b = config.agent_b.pem or PemConfig.disabled()
    B = config.trials
    dof = ckpt_a.config.dof
    core_a = BatchedPemRunner(ckpt_a.params, pem_a, batch=B)
    core_b = BatchedPemRunner(ckpt_b.params, pem_b, batch=B)
    noise_a = _motor_noise(master_seed, config.agent_a, B, config.steps, dof,
                           config.motor_noise_sigma)
    noise_b = _motor_noise(master_seed, config.agent_b, B, config.steps, dof,
                           config.motor_noise_sigma)
    executed_a = np.empty((B, config.steps, dof))
    executed_b = np.empty((B, config.steps, dof))

    for t in range(config.steps):
        if t > 0:
            core_a.update()
            core_b.update()
        act_a, _ = core_a.generate_next()
        act_b, _ = core_b.generate_next()
        exec_a = np.round(np.clip(act_a + noise_a[:, t], -1.0, 1.0), 6)
        exec_b = np.round(np.clip(act_b + noise_b[:, t], -1.0, 1.0), 6)
        executed_a[:, t] = exec_a
        executed_b[:, t] = exec_b
        core_a.observe(exec_a, exec_b)
        core_b.observe(exec_b, exec_a)

    return RriRun(config=config, master_seed=master_seed,
                  executed_a=executed_a, executed_b=executed_b,
                  runner_a=core_a, runner_b=core_b)


def export_rri(run: RriRun, directory: str | Path) -> list[Path]:
    """Trajectory and PEM-trace CSVs, one pair per (trial, agent)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    dof = run.executed_a.shape[2]
    for label, executed, runner in (("A", run.executed_a, run.runner_a),
                                    ("B", run.executed_b, run.runner_b)):
        for k in range(run.config.trials):
            path = directory / f"rri_trial{k + 1}_agent{label}.csv"
            cols = {f"p{d}": executed[k, :, d] for d in range(dof)}
            write_trajectory_csv(path, cols)
            written.append(path)
            tpath = directory / f"pem_trace_trial{k + 1}_agent{label}.csv"
            trace = [(r.step, float(r.pe_windowed[k]), float(r.kl_windowed[k]),
                      int(r.iterations_used[k])) for r in runner.trace]
            write_pem_trace(trace, tpath)
            written.append(tpath)
    return written


# ---------------------------------------------------------------------------
# trajectory classification


@dataclass(frozen=True)
class ClassifierConfig:
    window: int = 500
    fixed_std: float = 0.01      # per-DoF std below which nothing moves
    peak: float = 0.9            # summed-autocorrelation peak for a cycle
    min_lag: int = 4
    multiple_tol: int = 2        # peak recurrence tolerance, steps


@dataclass(frozen=True)
class DynamicsLabel:
    kind: str                    # "fixed_point" | "limit_cycle" | "emergent"
    period: int | None = None

    @classmethod
    def fixed_point(cls) -> "DynamicsLabel":
        return cls("fixed_point")

    @classmethod
    def limit_cycle(cls, period: int) -> "DynamicsLabel":
        return cls("limit_cycle", period)

    @classmethod
    def emergent(cls) -> "DynamicsLabel":
        return cls("emergent")


def _acf_profile(seg: np.ndarray, max_lag: int) -> np.ndarray:
    """Mean-centered autocorrelation summed over channels, lags 0..max_lag."""
    x = seg - seg.mean(axis=0)
    denom = float(np.sum(x * x))
    out = np.empty(max_lag + 1)
    out[0] = 1.0
    for lag in range(1, max_lag + 1):
        out[lag] = float(np.sum(x[:-lag] * x[lag:])) / denom
    return out


def classify_dynamics(trajectory: np.ndarray,
                      cfg: ClassifierConfig = ClassifierConfig()) -> DynamicsLabel:
    """Label the tail of a (T, dof) trajectory.

    Fixed point: every DoF's std under ``fixed_std`` (absolute, in normalized
    joint units). Limit cycle: the summed autocorrelation has a local peak
    >= ``peak`` at some lag in [min_lag, window/2] whose multiples (within
    +-multiple_tol) also reach ``peak``. Anything else is emergent.
    """
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 2:
        raise ValueError("trajectory must be (T, dof)")
    if trajectory.shape[0] < cfg.window:
        raise ValueError(
            f"trajectory length {trajectory.shape[0]} < window {cfg.window}")
    seg = trajectory[-cfg.window:]
    stds = seg.std(axis=0)
    if np.all(stds < cfg.fixed_std):
        return DynamicsLabel.fixed_point()

    max_lag = cfg.window // 2
    acf = _acf_profile(seg, max_lag)
    for p in range(cfg.min_lag, max_lag + 1):
        if acf[p] < cfg.peak:
            continue
        left = acf[p - 1] if p - 1 >= 0 else -np.inf
        right = acf[p + 1] if p + 1 <= max_lag else -np.inf
        if not (acf[p] >= left and acf[p] >= right):
            continue
        recurs = True
        for m in range(2 * p, max_lag + 1, p):
            lo = max(0, m - cfg.multiple_tol)
            hi = min(max_lag, m + cfg.multiple_tol)
            if np.max(acf[lo:hi + 1]) < cfg.peak:
                recurs = False
                break
        if recurs:
            return DynamicsLabel.limit_cycle(p)
    return DynamicsLabel.emergent()


@dataclass
class RriSummary:
    rows: list[tuple[int, str, DynamicsLabel]]   # (trial 1-based, agent, label)
    counts: dict[str, Counter]                   # per agent: kind -> n
    joint: Counter                               # (kind_a, kind_b) -> n


def summarize_rri(run: RriRun,
                  cfg: ClassifierConfig = ClassifierConfig()) -> RriSummary:
    """Classify every (trial, agent) trajectory; every trial gets a label."""
    rows: list[tuple[int, str, DynamicsLabel]] = []
    counts = {"A": Counter(), "B": Counter()}
    joint: Counter = Counter()
    for k in range(run.config.trials):
        la = classify_dynamics(run.executed_a[k], cfg)
        lb = classify_dynamics(run.executed_b[k], cfg)
        rows.append((k + 1, "A", la))
        rows.append((k + 1, "B", lb))
        counts["A"][la.kind] += 1
        counts["B"][lb.kind] += 1
        joint[(la.kind, lb.kind)] += 1
    return RriSummary(rows=rows, counts=counts, joint=joint)


def write_rri_summary_csv(summary: RriSummary, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("trial,agent,label,period_if_any\n")
        for trial, agent, label in summary.rows:
            period = "" if label.period is None else str(label.period)
            fh.write(f"{trial},{agent},{label.kind},{period}\n")


def render_rri_summary(summary: RriSummary) -> str:
    lines = ["Two-agent interaction: dynamics labels", ""]
    for agent in ("A", "B"):
        parts = ", ".join(f"{kind}: {n}"
                          for kind, n in sorted(summary.counts[agent].items()))
        lines.append(f"agent {agent}: {parts}")
    lines.append("")
    lines.append("joint (A, B):")
    for (ka, kb), n in sorted(summary.joint.items()):
        lines.append(f"  ({ka}, {kb}): {n}")
    return "\n".join(lines) + "\n"
