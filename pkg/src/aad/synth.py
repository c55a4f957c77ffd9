"""
Synthetic cohort generator for aad.
Seeded wristband sessions with agitation episodes, written in the same E4
archive and label formats the ingest layer reads.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
from scipy.signal import lfilter

from aad.errors import ConfigError, InfeasibleTargets, InvalidSpan, OverlappingEpisodes
from aad.ingest import LABEL_FILE_NAME, write_e4_archive, write_labels
from aad.models import ChannelName, ChannelSeries, LabelClass, LabelSet, LabelSpan, SessionRecording
from aad.seeding import expand_seed
from aad.storage import write_json


logger = logging.getLogger(__name__)

# Native E4 rates
ACC_RATE = 32.0
BVP_RATE = 64.0
EDA_RATE = 4.0
TEMP_RATE = 4.0

ACC_GRAVITY_COUNTS = 64.0
ACC_NOISE_COUNTS = 2.0
ACC_LIMIT_COUNTS = 128
BASELINE_BURST_RATE = 0.5      # SCR events per minute
EDA_RANGE = (1.0, 4.0)         # microsiemens
BASE_TEMP = 33.0
MIN_EPISODE_SECONDS = 120.0
MAX_EPISODE_SECONDS = 217 * 60.0
DEFAULT_START_TIME = 1600000000.0
SESSION_SPACING_SECONDS = 86400.0


@dataclass(frozen=True)
class EpisodeSpec:
    """One agitation episode, offsets relative to session start."""
    start: float
    duration: float
    hr_delta: float = 25.0
    acc_var_multiplier: float = 5.0
    eda_burst_rate: float = BASELINE_BURST_RATE * 4
    temp_delta: float = 0.3

    def __post_init__(self) -> None:
        if self.start < 0:
            raise InvalidSpan(f"Episode start {self.start} is before the session start")
        if not MIN_EPISODE_SECONDS <= self.duration <= MAX_EPISODE_SECONDS:
            raise InvalidSpan(
                f"Episode duration {self.duration} s outside [{MIN_EPISODE_SECONDS}, {MAX_EPISODE_SECONDS}]"
            )

    @property
    def end(self) -> float:
        return self.start + self.duration

    def to_dict(self) -> Dict[str, Any]:
        return {"start": self.start, "duration": self.duration, "hr_delta": self.hr_delta,
                "acc_var_multiplier": self.acc_var_multiplier, "eda_burst_rate": self.eda_burst_rate,
                "temp_delta": self.temp_delta}


@dataclass(frozen=True)
class ParticipantBaseline:
    resting_hr: float = 70.0      # bpm
    eda_level: float = 2.0        # microsiemens
    temp_offset: float = 0.0      # degC
    bvp_amplitude: float = 50.0

    def to_dict(self) -> Dict[str, Any]:
        return {"resting_hr": self.resting_hr, "eda_level": self.eda_level,
                "temp_offset": self.temp_offset, "bvp_amplitude": self.bvp_amplitude}


@dataclass(frozen=True)
class CohortSpec:
    """Cohort shape; minute targets default to a 1/10 scale of the clinical cohort."""
    n_participants: int = 14
    n_labeled: int = 5
    normal_minutes: int = 1880
    agitation_minutes: int = 148
    unlabeled_minutes: int = 3746
    seed: int = 0
    min_episode_minutes: int = 2
    max_episode_minutes: int = 12
    hr_delta: float = 25.0
    acc_var_multiplier: float = 5.0
    eda_burst_multiplier: float = 4.0
    temp_delta: float = 0.3
    start_time: float = DEFAULT_START_TIME

    def __post_init__(self) -> None:
        if self.n_participants < 1 or not 1 <= self.n_labeled <= self.n_participants:
            raise ConfigError("synth needs 1 <= n_labeled <= n_participants")
        if min(self.normal_minutes, self.agitation_minutes) <= 0 or self.unlabeled_minutes < 0:
            raise ConfigError("synth minute targets must be positive")
        if not 2 <= self.min_episode_minutes <= self.max_episode_minutes <= 217:
            raise ConfigError("synth episode bounds must satisfy 2 <= min <= max <= 217 minutes")

    @property
    def n_unlabeled(self) -> int:
        return self.n_participants - self.n_labeled

    def episode(self, start_minute: int, minutes: int) -> EpisodeSpec:
        return EpisodeSpec(
            start=start_minute * 60.0,
            duration=minutes * 60.0,
            hr_delta=self.hr_delta,
            acc_var_multiplier=self.acc_var_multiplier,
            eda_burst_rate=BASELINE_BURST_RATE * self.eda_burst_multiplier,
            temp_delta=self.temp_delta,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_participants": self.n_participants,
            "n_labeled": self.n_labeled,
            "normal_minutes": self.normal_minutes,
            "agitation_minutes": self.agitation_minutes,
            "unlabeled_minutes": self.unlabeled_minutes,
            "seed": self.seed,
            "min_episode_minutes": self.min_episode_minutes,
            "max_episode_minutes": self.max_episode_minutes,
            "hr_delta": self.hr_delta,
            "acc_var_multiplier": self.acc_var_multiplier,
            "eda_burst_multiplier": self.eda_burst_multiplier,
            "temp_delta": self.temp_delta,
            "start_time": self.start_time,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CohortSpec":
        return cls(**data)


@dataclass(frozen=True)
class SessionPlan:
    """Ground truth for one generated session."""
    participant_id: str
    session_id: str
    start_time: float
    duration: float
    episodes: Tuple[EpisodeSpec, ...]
    fully_labeled: bool
    seed: int
    baseline: ParticipantBaseline

    @property
    def agitation_minutes(self) -> float:
        return sum(e.duration for e in self.episodes) / 60.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "participant_id": self.participant_id,
            "session_id": self.session_id,
            "start_time": self.start_time,
            "duration": self.duration,
            "fully_labeled": self.fully_labeled,
            "seed": self.seed,
            "baseline": self.baseline.to_dict(),
            "episodes": [e.to_dict() for e in self.episodes],
        }


def _check_episodes(episodes: Sequence[EpisodeSpec], duration: float) -> List[EpisodeSpec]:
    ordered = sorted(episodes, key=lambda e: e.start)
    for e in ordered:
        if e.end > duration:
            raise InvalidSpan(f"Episode ({e.start}, {e.end}) runs past the session end {duration}")
    for a, b in zip(ordered, ordered[1:]):
        if b.start < a.end:
            raise OverlappingEpisodes(f"Episodes ({a.start}, {a.end}) and ({b.start}, {b.end}) overlap")
    return ordered


def _episode_profile(times: np.ndarray, episodes: Sequence[EpisodeSpec], attribute: str,
                     baseline: float) -> np.ndarray:
    """Per-sample value of an episode attribute, baseline outside episodes."""
    out = np.full(len(times), baseline, dtype=np.float64)
    for e in episodes:
        inside = (times >= e.start) & (times < e.end)
        out[inside] = getattr(e, attribute)
    return out


def _slow_noise(rng: np.random.Generator, n: int, rate: float, pole: float, scale: float) -> np.ndarray:
    """AR(1) noise at 1 Hz interpolated to the channel rate."""
    seconds = int(math.ceil(n / rate)) + 2
    walk = lfilter([1.0], [1.0, -pole], rng.normal(0.0, scale, seconds))
    return np.interp(np.arange(n) / rate, np.arange(seconds), walk)


def generate_session(seed: int, duration: float, episodes: Sequence[EpisodeSpec] = (),
                     participant_id: str = "P01", session_id: str = "S1",
                     start_time: float = DEFAULT_START_TIME, fully_labeled: bool = True,
                     baseline: ParticipantBaseline = ParticipantBaseline()
                     ) -> Tuple[SessionRecording, LabelSet]:
    """One seeded session; label spans equal the episode intervals when fully labeled."""
    episodes = _check_episodes(episodes, duration)
    rng = np.random.default_rng(seed)

    # BVP: pulse train integrated from a jittered heart rate
    n_bvp = int(round(duration * BVP_RATE))
    t_bvp = np.arange(n_bvp) / BVP_RATE
    hr = (baseline.resting_hr + _slow_noise(rng, n_bvp, BVP_RATE, 0.95, 0.6)
          + _episode_profile(t_bvp, episodes, "hr_delta", 0.0))
    phase = np.cumsum(hr / 60.0) / BVP_RATE + rng.uniform()
    pulse = np.sin(2 * np.pi * phase) + 0.25 * np.sin(4 * np.pi * phase)
    bvp = baseline.bvp_amplitude * (pulse + rng.normal(0.0, 0.05, n_bvp))

    # ACC: integer counts around gravity
    n_acc = int(round(duration * ACC_RATE))
    t_acc = np.arange(n_acc) / ACC_RATE
    acc_std = ACC_NOISE_COUNTS * np.sqrt(_episode_profile(t_acc, episodes, "acc_var_multiplier", 1.0))
    gravity = np.array([0.0, 0.0, ACC_GRAVITY_COUNTS])
    acc = {}
    for axis, name in enumerate((ChannelName.ACC_X, ChannelName.ACC_Y, ChannelName.ACC_Z)):
        counts = np.clip(np.round(gravity[axis] + acc_std * rng.standard_normal(n_acc)),
                         -ACC_LIMIT_COUNTS, ACC_LIMIT_COUNTS)
        acc[name] = counts / ACC_GRAVITY_COUNTS

    # EDA: tonic drift plus sparse phasic responses
    n_eda = int(round(duration * EDA_RATE))
    t_eda = np.arange(n_eda) / EDA_RATE
    tonic = np.clip(baseline.eda_level + _slow_noise(rng, n_eda, EDA_RATE, 0.999, 0.02), *EDA_RANGE)
    burst_rate = _episode_profile(t_eda, episodes, "eda_burst_rate", BASELINE_BURST_RATE)
    events = rng.random(n_eda) < burst_rate / 60.0 / EDA_RATE
    impulses = np.where(events, rng.uniform(0.05, 0.3, n_eda), 0.0)
    kernel_t = np.arange(int(30 * EDA_RATE)) / EDA_RATE
    kernel = (1.0 - np.exp(-kernel_t / 0.75)) * np.exp(-kernel_t / 4.0)
    phasic = np.convolve(impulses, kernel / kernel.max())[:n_eda]
    eda = np.round(tonic + phasic, 6)

    # TEMP
    n_temp = int(round(duration * TEMP_RATE))
    t_temp = np.arange(n_temp) / TEMP_RATE
    temp = (BASE_TEMP + baseline.temp_offset + 0.3 * np.sin(2 * np.pi * t_temp / 7200.0 + rng.uniform(0, 2 * np.pi))
            + _episode_profile(t_temp, episodes, "temp_delta", 0.0) + rng.normal(0.0, 0.02, n_temp))

    def series(name: ChannelName, rate: float, values: np.ndarray) -> ChannelSeries:
        return ChannelSeries(name=name, start_time=start_time, sample_rate=rate, values=values)

    channels = {name: series(name, ACC_RATE, values) for name, values in acc.items()}
    channels[ChannelName.BVP] = series(ChannelName.BVP, BVP_RATE, np.round(bvp, 2))
    channels[ChannelName.EDA] = series(ChannelName.EDA, EDA_RATE, eda)
    channels[ChannelName.TEMP] = series(ChannelName.TEMP, TEMP_RATE, np.round(temp, 2))
    rec = SessionRecording(participant_id=participant_id, session_id=session_id, channels=channels)

    spans: Tuple[LabelSpan, ...] = ()
    if fully_labeled:
        spans = tuple(LabelSpan(start_time + e.start, start_time + e.end, LabelClass.AGITATION)
                      for e in episodes)
    labels = LabelSet(participant_id=participant_id, session_id=session_id, spans=spans,
                      fully_labeled=fully_labeled)
    return rec, labels


def _share(total: int, n: int) -> List[int]:
    """Split total into n integers differing by at most one."""
    base, extra = divmod(total, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def _episode_lengths(minutes: int, spec: CohortSpec, rng: np.random.Generator) -> List[int]:
    lo, hi = spec.min_episode_minutes, spec.max_episode_minutes
    if minutes == 0:
        return []
    if minutes < lo:
        raise InfeasibleTargets(f"{minutes} agitation minutes cannot form an episode of at least {lo} minutes")
    fewest, most = math.ceil(minutes / hi), minutes // lo
    if fewest > most:
        raise InfeasibleTargets(f"{minutes} agitation minutes cannot be split into {lo}-{hi} minute episodes")
    k = int(rng.integers(fewest, most + 1))
    lengths = lo + rng.multinomial(minutes - lo * k, np.full(k, 1.0 / k))
    while lengths.max() > hi:
        over = int(np.argmax(lengths))
        under = int(np.argmin(lengths))
        lengths[over] -= 1
        lengths[under] += 1
    return [int(v) for v in lengths]


def _place_episodes(lengths: List[int], session_minutes: int, spec: CohortSpec,
                    rng: np.random.Generator) -> Tuple[EpisodeSpec, ...]:
    """Minute-aligned placement with at least one minute between episodes."""
    if not lengths:
        return ()
    free = session_minutes - sum(lengths) - (len(lengths) - 1)
    if free < 0:
        raise InfeasibleTargets(
            f"{sum(lengths)} agitation minutes in {len(lengths)} episodes do not fit a {session_minutes}-minute session"
        )
    slack = rng.multinomial(free, np.full(len(lengths) + 1, 1.0 / (len(lengths) + 1)))
    episodes = []
    minute = int(slack[0])
    for i, length in enumerate(lengths):
        episodes.append(spec.episode(minute, length))
        minute += length + 1 + int(slack[i + 1])
    return tuple(episodes)


def plan_cohort(spec: CohortSpec = CohortSpec()) -> List[SessionPlan]:
    """Session durations, baselines and episode placement for every participant.

    Unlabeled participants also carry episodes; they are hidden from their
    label files and kept here as ground truth.
    """
    labeled_minutes = spec.normal_minutes + spec.agitation_minutes
    if spec.unlabeled_minutes > 0 and spec.n_unlabeled == 0:
        raise InfeasibleTargets("Unlabeled minutes requested but every participant is labeled")
    rng = np.random.default_rng(expand_seed(spec.seed, 1)[0])
    session_seeds = expand_seed(spec.seed + 1, spec.n_participants)
    agitation_fraction = spec.agitation_minutes / labeled_minutes

    durations = _share(labeled_minutes, spec.n_labeled)
    agitation = _share(spec.agitation_minutes, spec.n_labeled)
    if spec.n_unlabeled:
        unlabeled = _share(spec.unlabeled_minutes, spec.n_unlabeled)
        durations += unlabeled
        agitation += [int(round(m * agitation_fraction)) for m in unlabeled]
    for minutes in durations:
        if minutes < 1:
            raise InfeasibleTargets("Every session needs at least one minute of recording")

    plans = []
    for i in range(spec.n_participants):
        baseline = ParticipantBaseline(
            resting_hr=float(rng.uniform(62.0, 78.0)),
            eda_level=float(rng.uniform(1.5, 3.0)),
            temp_offset=float(rng.uniform(-0.3, 0.3)),
            bvp_amplitude=float(rng.uniform(40.0, 60.0)),
        )
        minutes = agitation[i]
        if i >= spec.n_labeled and minutes < spec.min_episode_minutes:
            minutes = 0
        episodes = _place_episodes(_episode_lengths(minutes, spec, rng), durations[i], spec, rng)
        plans.append(SessionPlan(
            participant_id=f"P{i + 1:02d}",
            session_id="S1",
            start_time=spec.start_time + i * SESSION_SPACING_SECONDS,
            duration=durations[i] * 60.0,
            episodes=episodes,
            fully_labeled=i < spec.n_labeled,
            seed=session_seeds[i],
            baseline=baseline,
        ))
    return plans


def generate_planned(plan: SessionPlan) -> Tuple[SessionRecording, LabelSet]:
    return generate_session(plan.seed, plan.duration, plan.episodes, plan.participant_id,
                            plan.session_id, plan.start_time, plan.fully_labeled, plan.baseline)


def iter_cohort(spec: CohortSpec = CohortSpec()) -> Iterator[Tuple[SessionRecording, LabelSet]]:
    """Sessions one at a time, in participant order."""
    for plan in plan_cohort(spec):
        logger.info("Generating %s/%s: %.0f min, %d episode(s)%s", plan.participant_id, plan.session_id,
                    plan.duration / 60.0, len(plan.episodes), "" if plan.fully_labeled else " (hidden)")
        yield generate_planned(plan)


def generate_cohort(spec: CohortSpec = CohortSpec()) -> List[Tuple[SessionRecording, LabelSet]]:
    return list(iter_cohort(spec))


def write_cohort(spec: CohortSpec, root: Union[str, Path]) -> List[Path]:
    """Archives and label files under root/<participant>/<session>/ plus plan.json.

    Unlabeled sessions get no label file.
    """
    root = Path(root)
    written = []
    plans = plan_cohort(spec)
    for plan in plans:
        rec, labels = generate_planned(plan)
        session_dir = write_e4_archive(rec, root / plan.participant_id / plan.session_id)
        if plan.fully_labeled:
            write_labels(labels, session_dir / LABEL_FILE_NAME)
        written.append(session_dir)
        logger.info("Wrote %s", session_dir)
    write_json(root / "plan.json", {"spec": spec.to_dict(), "sessions": [p.to_dict() for p in plans]})
    return written
