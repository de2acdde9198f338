"""Synthetic 6-DoF gesture corpus with leader/follower roles.

Each gesture task is a per-joint sum of at most three sinusoids plus a resting
offset. The leader performs the pattern; the follower reproduces it after a
fixed lag (holding the initial posture during the lag), and both streams carry
independent observation noise. A corpus pairs every task with both seats, so
one task yields two sequences whose (proprio, extero) matrices are exact
mirrors of each other.

All trajectory values are quantized to 6 decimals at generation time, which
makes the CSV round trip bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .numerics import RngStream, derive_stream

FORMAT_VERSION = 1
DOF = 6
CSV_DECIMALS = 6

# stream ids under the corpus master seed
_SPEC_PARAM_STREAM = 0
_NOISE_STREAM_BASE = 1


class Role(Enum):
    LEADER = "leader"
    FOLLOWER = "follower"


class CorpusFormatError(ValueError):
    """A corpus file failed to parse; message names file, line and column."""


@dataclass(frozen=True)
class Sinusoid:
    amplitude: float
    period: float  # steps
    phase: float   # radians


@dataclass(frozen=True)
class GestureSpec:
    """Parameters of one gesture task.

    ``components[d]`` are the sinusoids of joint ``d`` and ``offsets[d]`` its
    resting posture. Amplitudes are scaled so the clean signal stays within
    [-0.9, 0.9], leaving headroom for noise inside [-1, 1].
    """

    id: int
    components: tuple[tuple[Sinusoid, ...], ...]
    offsets: tuple[float, ...]
    noise_sigma: float = 0.05
    follower_lag: int = 5
    length: int = 300

    def __post_init__(self) -> None:
        if len(self.components) != DOF or len(self.offsets) != DOF:
            raise ValueError(f"expected {DOF} joints")
        if self.noise_sigma < 0 or self.follower_lag < 0 or self.length < 1:
            raise ValueError("invalid noise/lag/length")
        for comps, off in zip(self.components, self.offsets):
            if len(comps) > 3:
                raise ValueError("at most 3 sinusoids per joint")
            total = abs(off) + sum(abs(c.amplitude) for c in comps)
            if total > 0.9 + 1e-9:
                raise ValueError(f"clean signal exceeds [-0.9, 0.9]: {total}")
            for c in comps:
                if c.period < 8:
                    raise ValueError("periods must be >= 8 steps")

    def clean_signal(self, length: int | None = None) -> np.ndarray:
        """Noise-free leader trajectory, shape (length, 6)."""
        n = self.length if length is None else length
        t = np.arange(n, dtype=np.float64)
        out = np.empty((n, DOF), dtype=np.float64)
        for d in range(DOF):
            sig = np.full(n, self.offsets[d], dtype=np.float64)
            for c in self.components[d]:
                sig += c.amplitude * np.sin(2.0 * np.pi * t / c.period + c.phase)
            out[:, d] = sig
        return out


@dataclass(frozen=True)
class Gesture:
    spec_id: int
    role: Role
    proprio: np.ndarray  # (T, 6), own action
    extero: np.ndarray   # (T, 6), other's action

    def __post_init__(self) -> None:
        if self.proprio.shape != self.extero.shape or self.proprio.shape[1] != DOF:
            raise ValueError("streams must be (T, 6) and equal shape")
        for arr in (self.proprio, self.extero):
            if np.abs(arr).max(initial=0.0) > 1.0:
                raise ValueError("values must lie in [-1, 1]")


@dataclass(frozen=True)
class Corpus:
    gestures: tuple[Gesture, ...]
    specs: tuple[GestureSpec, ...]
    master_seed: int


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, -1.0, 1.0), CSV_DECIMALS)


def synth_gesture(spec: GestureSpec, role: Role, rng: RngStream,
                  length: int | None = None) -> Gesture:
    """Realize one gesture recording from the given seat.

    The leader stream is the clean pattern plus observation noise; the
    follower stream is the clean pattern delayed by ``follower_lag`` (initial
    posture held during the lag) plus independent noise. Two calls with
    identically seeded streams and opposite roles therefore produce exactly
    mirrored (proprio, extero) pairs.
    """
    n = spec.length if length is None else length
    clean = spec.clean_signal(n)
    delayed = np.empty_like(clean)
    lag = min(spec.follower_lag, n)
    delayed[:lag] = clean[0]
    delayed[lag:] = clean[: n - lag]

    leader = clean + spec.noise_sigma * rng.standard_normal(n, DOF)
    follower = delayed + spec.noise_sigma * rng.standard_normal(n, DOF)
    leader = _quantize(leader)
    follower = _quantize(follower)

    if role is Role.LEADER:
        proprio, extero = leader, follower
    else:
        proprio, extero = follower, leader
    return Gesture(spec_id=spec.id, role=role, proprio=proprio, extero=extero)


def _derive_spec(spec_id: int, rng: RngStream, length: int, noise_sigma: float,
                 follower_lag: int, period_range: tuple[int, int]) -> GestureSpec:
    """Draw one task's parameters: a shared base rhythm, per-joint amplitude,
    phase and optional half-period harmonic."""
    lo, hi = period_range
    base_period = float(rng.integers(lo, hi + 1))
    components: list[tuple[Sinusoid, ...]] = []
    offsets: list[float] = []
    for _ in range(DOF):
        offset = float(rng.uniform(-0.15, 0.15))
        n_comp = int(rng.integers(1, 3))  # 1 or 2
        amps = [float(rng.uniform(0.25, 0.6))]
        periods = [base_period]
        if n_comp == 2:
            amps.append(float(rng.uniform(0.1, 0.3)))
            periods.append(max(8.0, base_period / 2.0))
        phases = [float(rng.uniform(0.0, 2.0 * np.pi)) for _ in range(n_comp)]
        headroom = 0.9 - abs(offset)
        total = sum(amps)
        if total > headroom:
            amps = [a * headroom / total for a in amps]
        components.append(tuple(
            Sinusoid(a, p, ph) for a, p, ph in zip(amps, periods, phases)
        ))
        offsets.append(offset)
    return GestureSpec(
        id=spec_id,
        components=tuple(components),
        offsets=tuple(offsets),
        noise_sigma=noise_sigma,
        follower_lag=follower_lag,
        length=length,
    )


def build_corpus(master_seed: int, n_specs: int = 31, length: int = 300,
                 noise_sigma: float = 0.05, follower_lag: int = 5,
                 period_range: tuple[int, int] = (24, 60)) -> Corpus:
    """Build ``n_specs`` tasks x 2 roles (default 31 x 2 = 62 sequences).

    Task parameters and noise realizations derive deterministically from the
    master seed; both roles of a task share one noise stream so their streams
    mirror exactly.
    """
    param_rng = derive_stream(master_seed, _SPEC_PARAM_STREAM)
    specs = [
        _derive_spec(i, param_rng.child(i), length, noise_sigma, follower_lag,
                     period_range)
        for i in range(1, n_specs + 1)
    ]
    gestures: list[Gesture] = []
    for spec in specs:
        for role in (Role.LEADER, Role.FOLLOWER):
            noise_rng = derive_stream(master_seed, _NOISE_STREAM_BASE + spec.id)
            gestures.append(synth_gesture(spec, role, noise_rng))
    return Corpus(gestures=tuple(gestures), specs=tuple(specs),
                  master_seed=master_seed)


def corpus_equal(a: Corpus, b: Corpus) -> bool:
    """Exact equality of metadata, specs, and trajectory values."""
    if a.master_seed != b.master_seed or a.specs != b.specs:
        return False
    if len(a.gestures) != len(b.gestures):
        return False
    return all(
        ga.spec_id == gb.spec_id and ga.role is gb.role
        and np.array_equal(ga.proprio, gb.proprio)
        and np.array_equal(ga.extero, gb.extero)
        for ga, gb in zip(a.gestures, b.gestures)
    )


# ---------------------------------------------------------------------------
# persistence: one CSV per sequence + corpus.meta

CSV_HEADER = "step," + ",".join(f"p{d}" for d in range(DOF)) \
    + "," + ",".join(f"x{d}" for d in range(DOF))


def gesture_filename(spec_id: int, role: Role) -> str:
    return f"gesture_{spec_id}_{role.value}.csv"


def write_trajectory_csv(path: Path, columns: dict[str, np.ndarray]) -> None:
    """Fixed-point CSV writer shared by corpus and experiment exports."""
    names = list(columns)
    arrays = [np.asarray(columns[n]) for n in names]
    n = arrays[0].shape[0]
    with open(path, "w") as fh:
        fh.write("step," + ",".join(names) + "\n")
        for t in range(n):
            row = ",".join(f"{a[t]:.{CSV_DECIMALS}f}" for a in arrays)
            fh.write(f"{t},{row}\n")


def save_corpus(corpus: Corpus, directory: str | Path) -> list[Path]:
    """Write one CSV per sequence plus ``corpus.meta``; returns written paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for g in corpus.gestures:
        path = directory / gesture_filename(g.spec_id, g.role)
        cols: dict[str, np.ndarray] = {}
        for d in range(DOF):
            cols[f"p{d}"] = g.proprio[:, d]
        for d in range(DOF):
            cols[f"x{d}"] = g.extero[:, d]
        write_trajectory_csv(path, cols)
        written.append(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "master_seed": corpus.master_seed,
        "specs": [
            {
                "id": s.id,
                "noise_sigma": s.noise_sigma,
                "follower_lag": s.follower_lag,
                "length": s.length,
                "offsets": list(s.offsets),
                "components": [
                    [[c.amplitude, c.period, c.phase] for c in comps]
                    for comps in s.components
                ],
            }
            for s in corpus.specs
        ],
    }
    meta_path = directory / "corpus.meta"
    meta_path.write_text(json.dumps(meta, indent=1) + "\n")
    written.append(meta_path)
    return written


def read_trajectory_csv(path: str | Path, expected_columns: int) -> np.ndarray:
    """Parse a step-indexed CSV into (T, expected_columns); strict format."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise CorpusFormatError(f"{path}: cannot read ({e})") from e
    if not lines:
        raise CorpusFormatError(f"{path}:1:1: empty file")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != expected_columns + 1:
            raise CorpusFormatError(
                f"{path}:{lineno}:1: expected {expected_columns + 1} fields, "
                f"got {len(fields)}")
        vals = []
        for col, field in enumerate(fields[1:], start=2):
            try:
                vals.append(float(field))
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}:{col}: not a number: {field!r}") from None
        rows.append(vals)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), expected_columns)


def load_corpus(directory: str | Path) -> Corpus:
    directory = Path(directory)
    meta_path = directory / "corpus.meta"
    try:
        meta = json.loads(meta_path.read_text())
    except OSError as e:
        raise CorpusFormatError(f"{meta_path}: cannot read ({e})") from e
    except json.JSONDecodeError as e:
        raise CorpusFormatError(
            f"{meta_path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CorpusFormatError(
            f"{meta_path}: unsupported format_version {meta.get('format_version')}")
    specs = tuple(
        GestureSpec(
            id=s["id"],
            components=tuple(
                tuple(Sinusoid(*c) for c in comps) for comps in s["components"]
            ),
            offsets=tuple(s["offsets"]),
            noise_sigma=s["noise_sigma"],
            follower_lag=s["follower_lag"],
            length=s["length"],
        )
        for s in meta["specs"]
    )
    gestures: list[Gesture] = []
    for spec in specs:
        for role in (Role.LEADER, Role.FOLLOWER):
            path = directory / gesture_filename(spec.id, role)
            data = read_trajectory_csv(path, 2 * DOF)
            gestures.append(Gesture(
                spec_id=spec.id, role=role,
                proprio=data[:, :DOF], extero=data[:, DOF:],
            ))
    return Corpus(gestures=tuple(gestures), specs=specs,
                  master_seed=meta["master_seed"])
