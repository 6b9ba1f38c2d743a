"""Simulated biomedical sensors: 12-bit ADC pulse/GSR streams and their
conversion to the (conductance reading, BPM) features the pipeline consumes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Optional, Sequence

import numpy as np

ADC_MAX = 4095  # 12-bit converter
BPM_MIN = 30.0  # sensor measuring floor
BPM_MAX = 240.0  # validation ceiling; refractory period enforces it too

# Calendar origin for synthetic corpora; arbitrary but fixed so that a seed
# fully determines the generated records.
DEFAULT_EPOCH_MS = 1_639_178_600_000  # 2021-12-10 23:23:20 UTC


class SensorRangeError(ValueError):
    """A physical quantity fell outside its measurable range."""


class InsufficientSignalError(ValueError):
    """Too few detectable beats in the window to estimate a rate."""


@dataclass(frozen=True)
class PulseSample:
    """One raw ADC reading from the pulse channel."""

    t_ms: int
    amplitude: int

    def __post_init__(self) -> None:
        if self.t_ms < 0:
            raise ValueError(f"t_ms must be non-negative, got {self.t_ms}")
        if not 0 <= self.amplitude <= ADC_MAX:
            raise ValueError(f"amplitude {self.amplitude} outside [0, {ADC_MAX}]")


@dataclass(frozen=True)
class GsrSample:
    """One raw ADC reading from the skin-conductance channel."""

    t_ms: int
    adc: int

    def __post_init__(self) -> None:
        if self.t_ms < 0:
            raise ValueError(f"t_ms must be non-negative, got {self.t_ms}")
        if not 0 <= self.adc <= ADC_MAX:
            raise ValueError(f"adc {self.adc} outside [0, {ADC_MAX}]")


@dataclass(frozen=True)
class EmotionRegime:
    """Per-emotion distribution of conductance readings and heart rate."""

    label: str
    gsr_mean: float
    gsr_std: float
    bpm_mean: float
    bpm_std: float

    def __post_init__(self) -> None:
        if self.gsr_std <= 0 or self.bpm_std <= 0:
            raise ValueError("regime stds must be positive")
        if not BPM_MIN <= self.bpm_mean <= BPM_MAX:
            raise SensorRangeError(
                f"regime bpm_mean {self.bpm_mean} outside [{BPM_MIN}, {BPM_MAX}]"
            )


# High-arousal states run sweatier and faster; values are configuration,
# chosen so the three clusters separate in the (gsr, bpm) plane.
DEFAULT_REGIMES: dict[str, EmotionRegime] = {
    "Angry": EmotionRegime("Angry", gsr_mean=2700.0, gsr_std=150.0, bpm_mean=110.0, bpm_std=6.0),
    "Happy": EmotionRegime("Happy", gsr_mean=1400.0, gsr_std=150.0, bpm_mean=85.0, bpm_std=6.0),
    "Sad": EmotionRegime("Sad", gsr_mean=2000.0, gsr_std=150.0, bpm_mean=72.0, bpm_std=6.0),
}


@dataclass(frozen=True)
class SensorRecord:
    """One 1 Hz observation: conductance reading, BPM, optional mood label.

    Timestamps are stored as epoch milliseconds; ``date``/``time`` render
    the wire shape ("MM/DD/YYYY", "HH:MM:SS", UTC).
    """

    participant_id: str
    gsr: float
    bpm: float
    epoch_ms: int
    mood: Optional[str] = None

    def __post_init__(self) -> None:
        if self.gsr < 0 or not math.isfinite(self.gsr):
            raise ValueError(f"gsr reading must be finite and >= 0, got {self.gsr}")
        if not BPM_MIN <= self.bpm <= BPM_MAX:
            raise SensorRangeError(f"bpm {self.bpm} outside [{BPM_MIN}, {BPM_MAX}]")
        if not self.participant_id:
            raise ValueError("participant_id must be non-empty")

    @property
    def date(self) -> str:
        return datetime.fromtimestamp(self.epoch_ms / 1000, tz=timezone.utc).strftime("%m/%d/%Y")

    @property
    def time(self) -> str:
        return datetime.fromtimestamp(self.epoch_ms / 1000, tz=timezone.utc).strftime("%H:%M:%S")

    def to_json_obj(self) -> dict:
        """Wire shape: GSR/BPM/Mood/Date/Time plus the routing participant."""
        obj: dict = {"GSR": self.gsr, "BPM": self.bpm}
        if self.mood is not None:
            obj["Mood"] = self.mood
        obj["Date"] = self.date
        obj["Time"] = self.time
        obj["Participant"] = self.participant_id
        return obj


def generate_pulse_wave(
    bpm: float,
    duration_ms: int,
    sample_rate_hz: float = 100.0,
    noise_std: float = 0.0,
    seed: int = 0,
    baseline: int = 1100,
    pulse_height: int = 2500,
) -> list[PulseSample]:
    """Synthesize a pulse-channel ADC stream with one systolic peak per beat.

    The waveform is a narrow Gaussian bump repeated every 60000/bpm ms on a
    flat baseline, plus additive Gaussian noise, quantized and clamped to
    the 12-bit range.
    """
    if not BPM_MIN <= bpm <= BPM_MAX:
        raise SensorRangeError(f"bpm {bpm} outside [{BPM_MIN}, {BPM_MAX}]")
    if not 50 <= sample_rate_hz <= 1000:
        raise ValueError(f"sample_rate_hz {sample_rate_hz} outside [50, 1000]")
    if duration_ms <= 0:
        raise ValueError("duration_ms must be positive")

    period_ms = 60000.0 / bpm
    n = int(duration_ms * sample_rate_hz / 1000.0)
    t = np.arange(n) * (1000.0 / sample_rate_hz)
    phase = (t % period_ms) / period_ms
    # Peak at 30% of the cycle, width 6% of the cycle: narrow enough that
    # the threshold detector sees one crossing per beat at any valid rate.
    bump = np.exp(-0.5 * ((phase - 0.3) / 0.06) ** 2)
    wave = baseline + pulse_height * bump
    if noise_std > 0:
        rng = np.random.default_rng(seed)
        wave = wave + rng.normal(0.0, noise_std, size=n)
    adc = np.clip(np.rint(wave), 0, ADC_MAX).astype(int)
    return [PulseSample(t_ms=int(round(ti)), amplitude=int(a)) for ti, a in zip(t, adc)]


def extract_bpm(
    samples: Sequence[PulseSample],
    window_ms: int = 2000,
    refractory_ms: int = 250,
    min_swing: int = 50,
) -> float:
    """Estimate beats per minute from a raw pulse stream.

    Beats are upward crossings of an adaptive threshold (midpoint of the
    running min/max over a trailing ``window_ms`` window), at least
    ``refractory_ms`` apart. BPM = 60000 / mean inter-beat interval.
    Windows whose min-max swing stays under ``min_swing`` ADC counts are
    treated as no signal.
    """
    if len(samples) < 3:
        raise InsufficientSignalError("need at least 3 samples")

    t = np.array([s.t_ms for s in samples], dtype=float)
    a = np.array([s.amplitude for s in samples], dtype=float)

    beat_times: list[float] = []
    lo_q: deque[int] = deque()  # monotonic index queues over the trailing window
    hi_q: deque[int] = deque()
    prev_above = False
    last_beat = -math.inf
    for i in range(len(samples)):
        while lo_q and t[lo_q[0]] <= t[i] - window_ms:
            lo_q.popleft()
        while hi_q and t[hi_q[0]] <= t[i] - window_ms:
            hi_q.popleft()
        while lo_q and a[lo_q[-1]] >= a[i]:
            lo_q.pop()
        while hi_q and a[hi_q[-1]] <= a[i]:
            hi_q.pop()
        lo_q.append(i)
        hi_q.append(i)

        lo, hi = a[lo_q[0]], a[hi_q[0]]
        if hi - lo < min_swing:
            prev_above = False
            continue
        threshold = (lo + hi) / 2.0
        above = a[i] > threshold
        if above and not prev_above and t[i] - last_beat >= refractory_ms:
            beat_times.append(t[i])
            last_beat = t[i]
        prev_above = above

    if len(beat_times) < 3:
        raise InsufficientSignalError(
            f"only {len(beat_times)} beats detected, need at least 3"
        )
    intervals = np.diff(beat_times)
    bpm = 60000.0 / float(np.mean(intervals))
    if not BPM_MIN <= bpm <= BPM_MAX:
        raise SensorRangeError(f"computed bpm {bpm:.1f} outside [{BPM_MIN}, {BPM_MAX}]")
    return bpm


@dataclass(frozen=True)
class GsrConverter:
    """ADC-to-reading conversion for a voltage-divider skin sensor.

    The ADC voltage implies a skin resistance through the divider; the
    reading is ``scale / resistance`` so more sweat (lower resistance)
    gives a higher reading. Constants are configuration; the pipeline only
    relies on the conversion being monotone and deterministic.
    """

    divider_r_ohm: float = 10_000.0
    vcc_volts: float = 3.3
    scale: float = 2.0e7
    reading_min: float = 0.0
    reading_max: float = 10_000.0

    def reading(self, sample: GsrSample) -> float:
        adc = sample.adc
        if adc <= 0:
            return self.reading_min  # open circuit: infinite resistance
        if adc >= ADC_MAX:
            return self.reading_max  # short circuit: divider saturated
        volts = adc / ADC_MAX * self.vcc_volts
        resistance = self.divider_r_ohm * (self.vcc_volts - volts) / volts
        value = self.scale / resistance
        return min(max(value, self.reading_min), self.reading_max)


def gsr_reading(sample: GsrSample, converter: GsrConverter | None = None) -> float:
    """Convert a raw GSR sample to a conductance-proportional reading."""
    return (converter or GsrConverter()).reading(sample)


def simulate_session(
    regime: EmotionRegime,
    participant_id: str,
    duration_s: int,
    warmup_s: int = 5,
    seed: int = 0,
    start_epoch_ms: int = DEFAULT_EPOCH_MS,
    rng: np.random.Generator | None = None,
    labeled: bool = True,
) -> list[SensorRecord]:
    """Emit one record per second drawn from the regime's distributions.

    The first ``warmup_s`` records are settling noise and are discarded,
    so exactly ``duration_s - warmup_s`` records come back. Session length
    is restricted to the 30 s - 5 min stimulus range.
    """
    if not 30 <= duration_s <= 300:
        raise SensorRangeError(f"duration_s {duration_s} outside [30, 300]")
    if not 0 <= warmup_s < duration_s:
        raise ValueError(f"warmup_s {warmup_s} must be in [0, duration_s)")
    if rng is None:
        rng = np.random.default_rng(seed)

    records = []
    for i in range(duration_s):
        gsr = max(0.0, float(rng.normal(regime.gsr_mean, regime.gsr_std)))
        bpm = float(np.clip(rng.normal(regime.bpm_mean, regime.bpm_std), BPM_MIN, BPM_MAX))
        if i < warmup_s:
            continue  # anomalous settling data at stimulus onset
        records.append(
            SensorRecord(
                participant_id=participant_id,
                gsr=gsr,
                bpm=bpm,
                epoch_ms=start_epoch_ms + i * 1000,
                mood=regime.label if labeled else None,
            )
        )
    return records


def generate_corpus(
    regimes: Sequence[EmotionRegime],
    participant_id: str,
    per_class: int,
    seed: int = 0,
    warmup_s: int = 5,
    start_epoch_ms: int = DEFAULT_EPOCH_MS,
) -> list[SensorRecord]:
    """Build a balanced labeled corpus: ``per_class`` records per regime,
    collected session by session and shuffled deterministically."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    corpus: list[SensorRecord] = []
    epoch = start_epoch_ms
    for regime in regimes:
        collected: list[SensorRecord] = []
        while len(collected) < per_class:
            need = per_class - len(collected)
            duration = min(300, max(30, need + warmup_s))
            session = simulate_session(
                regime,
                participant_id,
                duration_s=duration,
                warmup_s=warmup_s,
                rng=rng,
                start_epoch_ms=epoch,
            )
            epoch += duration * 1000
            collected.extend(session)
        corpus.extend(collected[:per_class])
    order = rng.permutation(len(corpus))
    return [corpus[i] for i in order]
