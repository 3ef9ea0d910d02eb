"""Synchronous federated training over simulated devices.

Each round the server samples participants, plans compression ratios and
batch sizes, ships the (compressed) global model, lets every participant
train locally, collects Top-K sparsified updates and averages them. Time is
simulated from payload sizes, bandwidths and per-sample compute cost; nothing
sleeps.

Strategies:

``caesar``  staleness-aware hybrid model download with recovery, importance
            ranked gradient ratios, batch sizes fitted to the fastest device.
``fedavg``  no compression, fixed batch size.
``fic``     one fixed ratio for model and gradient, Top-K model download.
``cac``     ratios spread over ``cac_range`` by device capability, Top-K
            model download.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import codec
from .core import PARAM_DTYPE, ProtocolError, UsageError, make_rng
from .datagen import PartitionSpec, SynthSpec, dirichlet_partition, label_distribution, synth_dataset
from .learner import DatasetShard, LrSchedule, ModelSpec, evaluate, init_model, local_train, lr_at
from .policy import (
    CompressionPlan,
    DeviceProfile,
    ParticipantPlan,
    StalenessRecord,
    caesar_plan,
    importance,
    kl_divergence,
    staleness,
    uniform_distribution,
    upload_ratios,
)

STRATEGIES = ("caesar", "fedavg", "fic", "cac")
THREADS_ENV = "CAESAR_SIM_THREADS"

# stream ids for make_rng(master_seed, stream, ...)
_INIT, _SELECT, _TRAIN, _PROFILE, _JITTER = 1, 2, 3, 4, 5


@dataclass(frozen=True)
class LinkProfile:
    """Static device capabilities from a profile table."""

    download_bw: float
    upload_bw: float
    per_sample_time: float


@dataclass(frozen=True)
class ProfileRanges:
    """Generator for heterogeneous devices.

    Compute cost and link bandwidth are each laid on a log-spaced grid that
    covers its range end to end, and grid positions are shuffled across
    devices independently.
    """

    per_sample_time: tuple[float, float] = (5e-4, 5e-3)
    bandwidth: tuple[float, float] = (1e6, 3e7)


@dataclass(frozen=True)
class SimConfig:
    strategy: str
    model: ModelSpec
    data: SynthSpec
    partition: PartitionSpec
    alpha: float
    tau: int
    profiles: Union[ProfileRanges, tuple[LinkProfile, ...]] = ProfileRanges()
    theta_d_max: float = 0.6
    theta_u_min: float = 0.1
    theta_u_max: float = 0.6
    fic_ratio: float = 0.35
    cac_range: tuple[float, float] = (0.1, 0.6)
    lam: float = 0.5
    clusters: int = 3
    b_max: int = 32
    b_fixed: int = 32
    adaptive_batch: bool = True  # caesar only; False => every participant uses b_fixed
    lr: LrSchedule = LrSchedule()
    target_acc: Optional[float] = None
    max_rounds: Optional[int] = None
    jitter: float = 0.0
    jitter_period: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0 < self.alpha <= 1:
            raise UsageError("alpha must be in (0, 1]")
        if self.tau < 0:
            raise UsageError("tau must be non-negative")
        if not 0 <= self.theta_d_max < 1:
            raise UsageError("theta_d_max must be in [0, 1)")
        if not 0 <= self.theta_u_min <= self.theta_u_max < 1:
            raise UsageError("need 0 <= theta_u_min <= theta_u_max < 1")
        if not 0 <= self.fic_ratio < 1 or not 0 <= self.cac_range[0] <= self.cac_range[1] < 1:
            raise UsageError("baseline ratios must lie in [0, 1)")
        if self.target_acc is None and self.max_rounds is None:
            raise UsageError("set target_acc, max_rounds, or both")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise UsageError("max_rounds must be >= 1")
        if min(self.b_max, self.b_fixed, self.clusters, self.jitter_period) < 1:
            raise UsageError("b_max, b_fixed, clusters and jitter_period must be >= 1")
        if not 0 <= self.jitter < 1:
            raise UsageError("jitter must be in [0, 1)")
        if self.model.input_dim != self.data.dim or self.model.classes != self.data.classes:
            raise UsageError("model input/classes do not match the dataset")
        if isinstance(self.profiles, tuple) and len(self.profiles) != self.partition.n_devices:
            raise UsageError("profile table length differs from n_devices")

    @property
    def n_devices(self) -> int:
        return self.partition.n_devices


@dataclass
class DeviceState:
    profile: DeviceProfile
    shard: DatasetShard
    staleness: StalenessRecord = field(default_factory=StalenessRecord)
    local_model: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ParticipantRecord:
    id: int
    download_ratio: float
    upload_ratio: float
    batch_size: int
    round_time: float


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    accuracy: float
    round_time: float
    cum_time: float
    download_bits: int
    upload_bits: int
    cum_download_bits: int
    cum_upload_bits: int
    avg_wait: float
    participants: tuple[ParticipantRecord, ...]

    @property
    def round_traffic_bits(self) -> int:
        return self.download_bits + self.upload_bits

    @property
    def cum_traffic_bits(self) -> int:
        return self.cum_download_bits + self.cum_upload_bits


@dataclass
class SimEnv:
    """Everything a round needs besides the model and the device states."""

    config: SimConfig
    test: DatasetShard
    upload: dict[int, float]
    base_profiles: list[DeviceProfile]
    executor: Optional[ThreadPoolExecutor] = None

    @property
    def n_params(self) -> int:
        return self.config.model.n_params


# ---------------------------------------------------------------------------
# setup


def make_link_profiles(n: int, ranges: ProfileRanges, seed: int) -> list[LinkProfile]:
    rng = make_rng(seed, _PROFILE)

    def grid(lo, hi):
        if n == 1:
            return np.array([math.sqrt(lo * hi)])
        return lo * (hi / lo) ** (rng.permutation(n) / (n - 1))

    mu = grid(*ranges.per_sample_time)
    bw = grid(*ranges.bandwidth)
    return [LinkProfile(float(bw[i]), float(bw[i]), float(mu[i])) for i in range(n)]


def build_devices(config: SimConfig, train: DatasetShard) -> list[DeviceState]:
    shards = dirichlet_partition(train, config.partition)
    if isinstance(config.profiles, ProfileRanges):
        links = make_link_profiles(config.n_devices, config.profiles, config.seed)
    else:
        links = list(config.profiles)
    h = config.model.classes
    a_max = max(len(s) for s in shards)
    phi_0 = uniform_distribution(h)
    states = []
    for i, (shard, link) in enumerate(zip(shards, links)):
        phi = label_distribution(shard, h)
        c = importance(len(shard), a_max, kl_divergence(phi, phi_0), config.lam)
        profile = DeviceProfile(
            id=i,
            sample_volume=len(shard),
            label_distribution=phi,
            download_bw=link.download_bw,
            upload_bw=link.upload_bw,
            per_sample_time=link.per_sample_time,
            importance=c,
        )
        states.append(DeviceState(profile, shard))
    return states


def select_participants(device_ids: Sequence[int], alpha: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of ``max(1, round(alpha * n))`` ids, sorted."""
    if not 0 < alpha <= 1:
        raise UsageError("alpha must be in (0, 1]")
    ids = np.asarray(device_ids)
    size = max(1, int(round(alpha * ids.size)))
    return sorted(int(i) for i in rng.choice(ids, size=size, replace=False))


def jitter_profiles(
    profiles: Sequence[DeviceProfile], rng: np.random.Generator, fraction: float
) -> list[DeviceProfile]:
    """Scale every rate by an independent factor drawn from ``[1 - fraction, 1 + fraction]``."""
    if not 0 <= fraction < 1:
        raise UsageError("jitter fraction must be in [0, 1)")
    if fraction == 0:
        return list(profiles)
    out = []
    for p in profiles:
        f = rng.uniform(1 - fraction, 1 + fraction, size=3)
        out.append(
            replace(
                p,
                download_bw=p.download_bw * f[0],
                upload_bw=p.upload_bw * f[1],
                per_sample_time=p.per_sample_time * f[2],
            )
        )
    return out


def profiles_at(env: SimEnv, t: int) -> list[DeviceProfile]:
    """Device profiles in force during round ``t``; constant within each jitter window."""
    cfg = env.config
    window = (t - 1) // cfg.jitter_period
    return jitter_profiles(env.base_profiles, make_rng(cfg.seed, _JITTER, window), cfg.jitter)


# ---------------------------------------------------------------------------
# planning


def _uses_topk_download(strategy: str) -> bool:
    return strategy in ("fic", "cac")


def download_bits_for(strategy: str, n: int, theta_d: float) -> int:
    if _uses_topk_download(strategy):
        return codec.sparse_model_payload_bits_for(n, theta_d)
    return codec.model_payload_bits_for(n, theta_d)


def _timed(profile: DeviceProfile, strategy, theta_d, theta_u, b, tau, n) -> ParticipantPlan:
    m_d = download_bits_for(strategy, n, theta_d) / profile.download_bw
    m_u = codec.gradient_payload_bits_for(n, theta_u) / profile.upload_bw
    return ParticipantPlan(theta_d, theta_u, b, m_d, m_u, tau * b * profile.per_sample_time)


def capability_scores(profiles: Sequence[DeviceProfile]) -> dict[int, float]:
    """Normalized compute speed plus normalized mean bandwidth, each in [0, 1]."""
    speed = np.array([1.0 / p.per_sample_time for p in profiles])
    bw = np.array([(p.download_bw + p.upload_bw) / 2 for p in profiles])
    score = speed / speed.max() + bw / bw.max()
    return {p.id: float(s) for p, s in zip(profiles, score)}


def baseline_plan(strategy: str, participants: Sequence[DeviceProfile], config: SimConfig) -> CompressionPlan:
    n, tau, b = config.model.n_params, config.tau, config.b_fixed
    if strategy == "fedavg":
        ratios = {p.id: 0.0 for p in participants}
    elif strategy == "fic":
        ratios = {p.id: config.fic_ratio for p in participants}
    elif strategy == "cac":
        lo, hi = config.cac_range
        scores = capability_scores(participants)
        weakest_first = sorted(scores, key=lambda i: (scores[i], i))
        if len(weakest_first) == 1:
            ratios = {weakest_first[0]: (lo + hi) / 2}
        else:
            step = (hi - lo) / (len(weakest_first) - 1)
            ratios = {dev: hi - step * rank for rank, dev in enumerate(weakest_first)}
    else:
        raise UsageError(f"no baseline plan for strategy {strategy!r}")
    plan = CompressionPlan()
    for p in participants:
        plan.entries[p.id] = _timed(p, strategy, ratios[p.id], ratios[p.id], b, tau, n)
    return plan


def plan_round(env: SimEnv, states: Sequence[DeviceState], participants: Sequence[int], t: int,
               profiles: Sequence[DeviceProfile]) -> CompressionPlan:
    cfg = env.config
    if cfg.strategy != "caesar":
        return baseline_plan(cfg.strategy, [profiles[i] for i in participants], cfg)
    pairs = [(profiles[i], staleness(t, states[i].staleness)) for i in participants]
    plan = caesar_plan(
        pairs,
        t,
        env.upload,
        theta_d_max=cfg.theta_d_max,
        clusters=cfg.clusters,
        b_max=cfg.b_max,
        tau=cfg.tau,
        n=env.n_params,
    )
    if not cfg.adaptive_batch:
        for i in participants:
            e = plan[i]
            plan.entries[i] = _timed(profiles[i], cfg.strategy, e.download_ratio, e.upload_ratio, cfg.b_fixed,
                                     cfg.tau, env.n_params)
    return plan


# ---------------------------------------------------------------------------
# rounds


def _device_update(env: SimEnv, state: DeviceState, message, entry: ParticipantPlan, t: int):
    cfg = env.config
    if _uses_topk_download(cfg.strategy):
        start = codec.decode_sparse_model(message)
    else:
        start = codec.recover_model(message, state.local_model)
    rng_seed = np.random.SeedSequence(cfg.seed, spawn_key=(_TRAIN, state.profile.id, t))
    w_tau, g = local_train(
        start, cfg.model, state.shard, entry.batch_size, cfg.tau, lr_at(cfg.lr, t - 1), rng_seed
    )
    return w_tau, codec.encode_gradient(g, entry.upload_ratio)


def run_round(w: np.ndarray, states: list[DeviceState], env: SimEnv, t: int) -> tuple[np.ndarray, RoundMetrics]:
    """Execute round ``t`` (1-based). Updates participants' states in place."""
    if t < 1:
        raise UsageError("rounds are numbered from 1")
    cfg = env.config
    n = env.n_params
    participants = select_participants(range(len(states)), cfg.alpha, make_rng(cfg.seed, _SELECT, t))
    profiles = profiles_at(env, t)
    plan = plan_round(env, states, participants, t, profiles)

    # one encode per distinct ratio
    messages = {}
    for i in participants:
        ratio = plan[i].download_ratio
        if ratio not in messages:
            if _uses_topk_download(cfg.strategy):
                messages[ratio] = codec.encode_sparse_model(w, ratio)
            else:
                messages[ratio] = codec.encode_model(w, ratio)
        if cfg.strategy == "caesar" and states[i].local_model is None and ratio > 0:
            raise ProtocolError(f"device {i} has no local model but was planned ratio {ratio}")

    jobs = [(states[i], messages[plan[i].download_ratio], plan[i], t) for i in participants]
    if env.executor is not None:
        results = list(env.executor.map(lambda job: _device_update(env, *job), jobs))
    else:
        results = [_device_update(env, *job) for job in jobs]

    total = np.zeros(n, dtype=np.float64)
    down_bits = up_bits = 0
    records = []
    for i, (w_tau, sg) in zip(participants, results):
        total += codec.decode_gradient(sg)
        state = states[i]
        state.staleness = StalenessRecord(last_round=t)
        state.local_model = w_tau
        msg = messages[plan[i].download_ratio]
        d_bits = (
            codec.sparse_model_payload_bits(msg) if _uses_topk_download(cfg.strategy) else codec.model_payload_bits(msg)
        )
        u_bits = codec.gradient_payload_bits(sg)
        down_bits += d_bits
        up_bits += u_bits
        p = profiles[i]
        entry = plan[i]
        m_i = float(d_bits / p.download_bw + u_bits / p.upload_bw + cfg.tau * entry.batch_size * p.per_sample_time)
        records.append(
            ParticipantRecord(i, float(entry.download_ratio), float(entry.upload_ratio), int(entry.batch_size), m_i)
        )

    w_next = (w.astype(np.float64) - total / len(participants)).astype(PARAM_DTYPE)
    round_time = float(max(r.round_time for r in records))
    avg_wait = float(np.mean([round_time - r.round_time for r in records]))
    metrics = RoundMetrics(
        round=t,
        accuracy=evaluate(w_next, cfg.model, env.test),
        round_time=round_time,
        cum_time=round_time,
        download_bits=down_bits,
        upload_bits=up_bits,
        cum_download_bits=down_bits,
        cum_upload_bits=up_bits,
        avg_wait=avg_wait,
        participants=tuple(records),
    )
    return w_next, metrics


def _accumulate(prev: Optional[RoundMetrics], cur: RoundMetrics) -> RoundMetrics:
    if prev is None:
        return cur
    return replace(
        cur,
        cum_time=prev.cum_time + cur.round_time,
        cum_download_bits=prev.cum_download_bits + cur.download_bits,
        cum_upload_bits=prev.cum_upload_bits + cur.upload_bits,
    )


def thread_count(threads: Optional[int] = None) -> int:
    if threads is None:
        raw = os.environ.get(THREADS_ENV)
        threads = int(raw) if raw else (os.cpu_count() or 1)
    return max(1, int(threads))


def setup(config: SimConfig, executor: Optional[ThreadPoolExecutor] = None):
    """Build ``(w0, device states, env)`` for ``config``."""
    train, test = synth_dataset(config.data)
    states = build_devices(config, train)
    if config.theta_u_min < config.theta_u_max:
        scores = {s.profile.id: s.profile.importance for s in states}
        upload = upload_ratios(scores, config.theta_u_min, config.theta_u_max)
    else:
        upload = {s.profile.id: config.theta_u_min for s in states}
    env = SimEnv(config, test, upload, [s.profile for s in states], executor)
    w0 = init_model(config.model, np.random.SeedSequence(config.seed, spawn_key=(_INIT,)))
    return w0, states, env


def run_experiment(config: SimConfig, threads: Optional[int] = None) -> list[RoundMetrics]:
    """Train from round 1 until the target accuracy or ``max_rounds`` is reached."""
    workers = thread_count(threads)
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        w, states, env = setup(config, executor)
        history: list[RoundMetrics] = []
        t = 1
        while True:
            w, m = run_round(w, states, env, t)
            m = _accumulate(history[-1] if history else None, m)
            history.append(m)
            if config.target_acc is not None and m.accuracy >= config.target_acc:
                break
            if config.max_rounds is not None and t >= config.max_rounds:
                break
            t += 1
        return history
    finally:
        if executor is not None:
            executor.shutdown()
