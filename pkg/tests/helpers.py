"""
Builders shared by the test modules.
"""

from typing import Dict, Optional, Tuple

import numpy as np

from aad.models import ChannelName, ChannelSeries, FeatureMatrix, SessionRecording, WindowLabel


T0 = 1600000000.0

NATIVE_RATES: Dict[ChannelName, float] = {
    ChannelName.ACC_X: 32.0,
    ChannelName.ACC_Y: 32.0,
    ChannelName.ACC_Z: 32.0,
    ChannelName.BVP: 64.0,
    ChannelName.EDA: 4.0,
    ChannelName.TEMP: 4.0,
}


def make_recording(duration: float = 300.0, start: float = T0, acc: Tuple[float, float, float] = (0.0, 0.0, 1.0),
                   bvp_hz: float = 1.2, eda: float = 2.0, temp: float = 33.0,
                   participant_id: str = "P01", session_id: str = "S1",
                   starts: Optional[Dict[ChannelName, float]] = None) -> SessionRecording:
    """Constant ACC/EDA/TEMP and a pure BVP sinusoid."""
    starts = starts or {}
    channels = {}
    for name, rate in NATIVE_RATES.items():
        n = int(round(duration * rate))
        t = np.arange(n) / rate
        if name is ChannelName.BVP:
            values = 50.0 * np.sin(2 * np.pi * bvp_hz * t)
        elif name is ChannelName.EDA:
            values = np.full(n, eda)
        elif name is ChannelName.TEMP:
            values = np.full(n, temp)
        else:
            axis = (ChannelName.ACC_X, ChannelName.ACC_Y, ChannelName.ACC_Z).index(name)
            values = np.full(n, acc[axis])
        channels[name] = ChannelSeries(name=name, start_time=starts.get(name, start), sample_rate=rate,
                                       values=values)
    return SessionRecording(participant_id=participant_id, session_id=session_id, channels=channels)


def make_matrix(values: np.ndarray, labels: np.ndarray, participant_ids=None, prefix: str = "f") -> FeatureMatrix:
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    if participant_ids is None:
        participant_ids = ["P01"] * n
    return FeatureMatrix(
        column_names=tuple(f"{prefix}{i}" for i in range(values.shape[1])),
        values=values,
        participant_ids=participant_ids,
        session_ids=["S1"] * n,
        window_starts=T0 + 60.0 * np.arange(n),
        labels=labels,
    )


def blob_matrix(seed: int = 0, n_per_class: int = 60, n_unlabeled: int = 80, d: int = 4,
                separation: float = 3.0) -> Tuple[FeatureMatrix, np.ndarray]:
    """Two Gaussian blobs; returns the matrix and the hidden truth of every row."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_class + n_unlabeled
    truth = np.r_[np.zeros(n_per_class), np.ones(n_per_class),
                  rng.integers(0, 2, n_unlabeled)].astype(np.int8)
    values = rng.normal(0.0, 1.0, (n, d)) + separation * truth[:, None]
    labels = truth.copy()
    labels[2 * n_per_class:] = WindowLabel.UNLABELED
    pids = [f"P{1 + i % 4:02d}" for i in range(n)]
    return make_matrix(values, labels, participant_ids=pids), truth


SMALL_CONFIG_TOML = """
[synth]
n_participants = 3
n_labeled = 2
normal_minutes = 20
agitation_minutes = 6
unlabeled_minutes = 10
max_episode_minutes = 3

[vae]
hidden_dims = [16, 8]
latent_dim = 4
epochs = 2
batch_size = 16

[forest]
n_trees = 5

[boosted]
n_rounds = 5

[selftrain]
max_iter = 3

[pipeline]
seed = 0
"""
