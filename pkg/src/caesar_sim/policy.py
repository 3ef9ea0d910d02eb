"""Per-round control decisions: compression ratios and batch sizes.

Download ratios shrink with staleness, upload ratios grow with a device's
rank by data importance, and batch sizes are fitted so that every participant
finishes roughly when the fastest one does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .codec import gradient_payload_bits_for, model_payload_bits_for
from .core import UsageError

DEFAULT_LAMBDA = 0.5

# absorbs rounding in (M_l - M_d - M_u) / (tau * mu) for devices equal to the fastest
_FLOOR_EPS = 1e-9


@dataclass
class DeviceProfile:
    id: int
    sample_volume: int
    label_distribution: np.ndarray
    download_bw: float  # bits / s
    upload_bw: float  # bits / s
    per_sample_time: float  # s / sample
    importance: float = 0.0

    def __post_init__(self):
        self.label_distribution = np.asarray(self.label_distribution, dtype=np.float64)
        if abs(self.label_distribution.sum() - 1.0) > 1e-9:
            raise UsageError(f"device {self.id}: label distribution does not sum to 1")
        if min(self.download_bw, self.upload_bw, self.per_sample_time) <= 0:
            raise UsageError(f"device {self.id}: rates and per-sample time must be positive")
        if not 0.0 <= self.importance <= 1.0:
            raise UsageError(f"device {self.id}: importance {self.importance} outside [0, 1]")


@dataclass
class StalenessRecord:
    last_round: int = 0  # 0 => never participated


@dataclass
class ParticipantPlan:
    download_ratio: float
    upload_ratio: float
    batch_size: int
    download_time: float = 0.0
    upload_time: float = 0.0
    compute_time: float = 0.0

    @property
    def total_time(self) -> float:
        return self.download_time + self.upload_time + self.compute_time


@dataclass
class CompressionPlan:
    entries: dict[int, ParticipantPlan] = field(default_factory=dict)

    def __getitem__(self, device_id: int) -> ParticipantPlan:
        return self.entries[device_id]

    def __iter__(self):
        return iter(sorted(self.entries))

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# model download


def staleness(t: int, rec: StalenessRecord) -> int:
    if t <= rec.last_round or rec.last_round < 0:
        raise UsageError(f"round {t} is not after last participation {rec.last_round}")
    return t - rec.last_round


def download_ratio(delta: int, t: int, theta_d_max: float) -> float:
    if not 1 <= delta <= t:
        raise UsageError(f"staleness {delta} outside [1, {t}]")
    return (1.0 - delta / t) * theta_d_max


def cluster_download_ratios(
    participants: Sequence[tuple[int, int]], t: int, k: int, theta_d_max: float
) -> dict[int, float]:
    """Group participants by staleness into ``k`` contiguous, near-equal groups.

    Each group gets the download ratio of its mean staleness, rounded half up.
    ``participants`` holds ``(device_id, staleness)`` pairs. Devices with
    staleness ``t`` have no local model and are pinned to ratio 0 outside the
    groups.
    """
    if k < 1:
        raise UsageError("cluster count must be at least 1")
    if not participants:
        raise UsageError("no participants to cluster")
    ratios = {dev: download_ratio(d, t, theta_d_max) for dev, d in participants if d == t}
    ordered = sorted((p for p in participants if p[1] != t), key=lambda p: (p[1], p[0]))
    if not ordered:
        return ratios
    k = min(k, len(ordered))
    for group in np.array_split(np.arange(len(ordered)), k):
        deltas = [ordered[j][1] for j in group]
        mean_delta = int(math.floor(sum(deltas) / len(deltas) + 0.5))
        ratio = download_ratio(mean_delta, t, theta_d_max)
        for j in group:
            ratios[ordered[j][0]] = ratio
    return ratios


# ---------------------------------------------------------------------------
# gradient upload


def kl_divergence(phi_i, phi_0) -> float:
    phi_i = np.asarray(phi_i, dtype=np.float64)
    phi_0 = np.asarray(phi_0, dtype=np.float64)
    if phi_i.shape != phi_0.shape:
        raise UsageError("distributions have different lengths")
    support = phi_i > 0
    if np.any(phi_0[support] <= 0):
        raise UsageError("reference distribution is zero where the device distribution is positive")
    p = phi_i[support]
    return max(0.0, float(np.sum(p * np.log(p / phi_0[support]))))


def uniform_distribution(h: int) -> np.ndarray:
    return np.full(h, 1.0 / h)


def importance(a_i: float, a_max: float, d_i: float, lam: float = DEFAULT_LAMBDA) -> float:
    if a_max <= 0:
        raise UsageError("maximum sample volume must be positive")
    if not 0 <= a_i <= a_max:
        raise UsageError(f"sample volume {a_i} outside [0, {a_max}]")
    if d_i < 0 or not 0.0 <= lam <= 1.0:
        raise UsageError("divergence must be non-negative and lambda in [0, 1]")
    return lam * a_i / a_max + (1.0 - lam) * math.exp(-d_i)


def upload_ratios(importances: Mapping[int, float], theta_u_min: float, theta_u_max: float) -> dict[int, float]:
    """Rank every device by importance (rank 0 = most important) and map rank to ratio."""
    if not importances:
        raise UsageError("empty device set")
    if not theta_u_min < theta_u_max:
        raise UsageError("theta_u_min must be below theta_u_max")
    ranked = sorted(importances, key=lambda i: (-importances[i], i))
    step = (theta_u_max - theta_u_min) / len(ranked)
    return {dev: theta_u_min + step * rank for rank, dev in enumerate(ranked)}


# ---------------------------------------------------------------------------
# latency model and batch sizes


def transfer_times(profile: DeviceProfile, theta_d: float, theta_u: float, n: int) -> tuple[float, float]:
    m_d = model_payload_bits_for(n, theta_d) / profile.download_bw
    m_u = gradient_payload_bits_for(n, theta_u) / profile.upload_bw
    return m_d, m_u


def predict_times(
    profile: DeviceProfile, theta_d: float, theta_u: float, b: int, tau: int, n: int
) -> tuple[float, float, float]:
    """Download, upload and compute seconds for one round of one device."""
    m_d, m_u = transfer_times(profile, theta_d, theta_u, n)
    return m_d, m_u, tau * b * profile.per_sample_time


def _round_time_at(profile, theta_d, theta_u, b, tau, n) -> float:
    return sum(predict_times(profile, theta_d, theta_u, b, tau, n))


def pick_fastest(
    participants: Sequence[tuple[DeviceProfile, float, float]], b_max: int, tau: int, n: int
) -> int:
    """Id of the participant with the shortest round time at batch size ``b_max``.

    ``participants`` holds ``(profile, theta_d, theta_u)`` triples.
    """
    best_id, best = None, math.inf
    for profile, theta_d, theta_u in sorted(participants, key=lambda p: p[0].id):
        m = _round_time_at(profile, theta_d, theta_u, b_max, tau, n)
        if m < best:
            best_id, best = profile.id, m
    return best_id


def batch_sizes(
    participants: Sequence[tuple[DeviceProfile, float, float]], fastest: int, b_max: int, tau: int, n: int
) -> dict[int, int]:
    """Largest batch per device whose round time stays within the fastest device's."""
    by_id = {p[0].id: p for p in participants}
    profile, theta_d, theta_u = by_id[fastest]
    m_l = _round_time_at(profile, theta_d, theta_u, b_max, tau, n)
    out = {}
    for dev, (profile, theta_d, theta_u) in by_id.items():
        if dev == fastest:
            out[dev] = b_max
            continue
        m_d, m_u = transfer_times(profile, theta_d, theta_u, n)
        b = math.floor((m_l - m_d - m_u) / (tau * profile.per_sample_time) + _FLOOR_EPS)
        out[dev] = int(min(b_max, max(1, b)))
    return out


def caesar_plan(
    participants: Sequence[tuple[DeviceProfile, int]],
    t: int,
    upload: Mapping[int, float],
    *,
    theta_d_max: float,
    clusters: int,
    b_max: int,
    tau: int,
    n: int,
) -> CompressionPlan:
    """Full round plan for ``(profile, staleness)`` participants."""
    down = cluster_download_ratios([(p.id, d) for p, d in participants], t, clusters, theta_d_max)
    triples = [(p, down[p.id], upload[p.id]) for p, _ in participants]
    fastest = pick_fastest(triples, b_max, tau, n)
    sizes = batch_sizes(triples, fastest, b_max, tau, n)
    plan = CompressionPlan()
    for p, theta_d, theta_u in triples:
        b = sizes[p.id]
        m_d, m_u, m_c = predict_times(p, theta_d, theta_u, b, tau, n)
        plan.entries[p.id] = ParticipantPlan(theta_d, theta_u, b, m_d, m_u, m_c)
    return plan
