"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import spearmanr

from caesar_sim import cli, codec, datagen, learner, policy, sim
from caesar_sim.core import mse
from caesar_sim.datagen import PartitionSpec
from caesar_sim.learner import ModelSpec
from caesar_sim.policy import DeviceProfile
from oracles import gradient_check_case

ROOT = Path(__file__).resolve().parents[1]
DESK = ROOT / "demos" / "desk_experiment.json"

# tolerances and thresholds, fixed by the acceptance criteria
CODEC_CASES, CODEC_MAX_N, CODEC_BUDGET_S = 1000, 4096, 5.0
UNIT_TOL = 1e-9
GRAD_CASES, GRAD_MAX_N, GRAD_REL_TOL, GRAD_BUDGET_S = 20, 200, 1e-4, 30.0
DRIFT_TRIALS, DRIFT_RHO, DRIFT_BUDGET_S = 100, 0.9, 60.0
DESK_SEEDS, DESK_STRATEGIES = (0, 1, 2, 3, 4), ("caesar", "fedavg", "fic", "cac")
ACC_GAP_POINTS, FIC_SAVING, CAC_SAVING, WAIT_SAVING, MIN_SEEDS = 2.0, 0.15, 0.10, 0.50, 4
DESK_BUDGET_S = 15 * 60
PARTITION_CASES, KL_SEEDS = 50, 20

# recovery drift process: random walk whose per-round step is the median relative
# change of the desk global model between consecutive rounds (measured: 0.014)
DRIFT_STEP = 0.014
DRIFT_STALENESS = (1, 2, 4, 8, 16, 32, 64)
DRIFT_THETAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def report(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} [{number}] {detail}")


def desk_config(seed, strategy, **overrides):
    doc = json.loads(DESK.read_text())
    doc.update(overrides)
    return cli.parse_config(doc, seed=seed, strategy=strategy)


# ---------------------------------------------------------------------------


def test_1_codec_exactness(capsys):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    bad = 0
    for _ in range(CODEC_CASES):
        n = int(rng.integers(1, CODEC_MAX_N + 1))
        w = (rng.standard_normal(n) * 10 ** rng.uniform(-3, 3)).astype(np.float32)
        local = rng.standard_normal(n).astype(np.float32)
        got_w = codec.recover_model(codec.encode_model(w, 0.0), local)
        got_g = codec.decode_gradient(codec.encode_gradient(w, 0.0))
        bad += got_w.tobytes() != w.tobytes() or got_g.tobytes() != w.tobytes()
    elapsed = time.perf_counter() - start
    ok = bad == 0 and elapsed < CODEC_BUDGET_S
    report(capsys, 1, ok, f"codec exactness at theta=0: {bad}/{CODEC_CASES} mismatches, {elapsed:.2f}s (< {CODEC_BUDGET_S}s)")
    assert ok


def test_2_worked_recovery_example(capsys):
    w = np.array([0.9, -0.3, 1.5, -1.2, 0.2, -0.7, 1.1, 0.5, 0.8], dtype=np.float32)
    local = np.array([0.0, 0.25, 0.0, 0.0, 0.18, -0.65, 0.0, 0.45, 0.95], dtype=np.float32)
    cm = codec.encode_model(w, 5 / 9)
    out = codec.recover_model(cm, local)
    ok = (
        cm.avg_abs == np.float32(0.5)
        and cm.max_abs == np.float32(0.8)
        and out[1] == np.float32(-0.5)  # sign flip
        and out[8] == np.float32(0.5)  # over max
    )
    report(capsys, 2, ok, f"worked example: avg={cm.avg_abs} max={cm.max_abs} flip->{out[1]} over-max->{out[8]}")
    assert ok


def test_3_formula_units(capsys):
    checks = {}
    checks["download ratio (t=10, delta=5) = 0.3"] = abs(policy.download_ratio(5, 10, 0.6) - 0.3) <= UNIT_TOL
    kl = policy.kl_divergence(np.eye(10)[0], policy.uniform_distribution(10))
    checks["KL(one-hot || uniform), H=10 = ln 10"] = abs(kl - math.log(10)) <= UNIT_TOL
    checks["importance(A=Amax, D=0, lambda=0.5) = 1"] = abs(policy.importance(7, 7, 0.0, 0.5) - 1.0) <= UNIT_TOL
    up = policy.upload_ratios({0: 4.0, 1: 3.0, 2: 2.0, 3: 1.0}, 0.1, 0.6)
    checks["upload ratios |N|=4 = {0.1,0.225,0.35,0.475}"] = np.allclose(
        [up[i] for i in range(4)], [0.1, 0.225, 0.35, 0.475], rtol=0, atol=UNIT_TOL
    )
    # M_l = 100 s, M_d + M_u = 40 s, tau = 30, mu = 0.5  ->  b = 4
    n, tau = 10, 30
    bd, bu = codec.model_payload_bits_for(n, 0.0), codec.gradient_payload_bits_for(n, 0.0)
    fast = DeviceProfile(0, 1, [1.0], bd / 10, bu / 10, 1 / 3)
    slow = DeviceProfile(1, 1, [1.0], bd / 20, bu / 20, 0.5)
    sizes = policy.batch_sizes([(fast, 0.0, 0.0), (slow, 0.0, 0.0)], 0, 8, tau, n)
    checks["batch size (M_l=100, M_d+M_u=40, tau=30, mu=0.5) = 4"] = sizes[1] == 4
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(capsys, 3, ok, f"formula units: {len(checks) - len(failed)}/{len(checks)} exact" + (f"; failed {failed}" if failed else ""))
    assert ok


def _random_spec(rng):
    while True:
        d, h = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        if rng.random() < 0.4:
            spec = ModelSpec("softmax-regression", d, h)
        else:
            hidden = tuple(int(x) for x in rng.integers(1, 9, size=int(rng.integers(1, 3))))
            spec = ModelSpec("mlp", d, h, hidden)
        if spec.n_params <= GRAD_MAX_N:
            return spec


def test_4_gradient_check(capsys):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    worst = 0.0
    for case in range(GRAD_CASES):
        spec = _random_spec(rng)
        w, shard, fd = gradient_check_case(spec, int(rng.integers(2**31)))
        g = learner.grad(w, spec, shard.features, shard.labels)
        rel = np.abs(g - fd) / np.maximum(1e-8, np.abs(g) + np.abs(fd))
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = worst < GRAD_REL_TOL and elapsed < GRAD_BUDGET_S
    report(capsys, 4, ok, f"gradient vs central differences: max rel err {worst:.2e} (< {GRAD_REL_TOL}) over {GRAD_CASES} cases, {elapsed:.1f}s")
    assert ok


def test_5_recovery_error_monotone(capsys):
    rng = np.random.default_rng(5)
    thetas, deltas = np.array(DRIFT_THETAS), np.array(DRIFT_STALENESS)
    start = time.perf_counter()
    rho_theta, rho_delta, mean_err = [], [], 0.0
    for _ in range(DRIFT_TRIALS):
        w = rng.standard_normal(1000).astype(np.float32)
        walk = np.cumsum(DRIFT_STEP * rng.standard_normal((deltas[-1], w.size)), axis=0)
        scale = float(np.mean(w.astype(np.float64) ** 2))
        err = np.array(
            [
                [mse(codec.recover_model(codec.encode_model(w, th), (w + walk[d - 1]).astype(np.float32)), w) / scale for th in thetas]
                for d in deltas
            ]
        )
        mean_err = mean_err + err / DRIFT_TRIALS
        rho_theta.append(np.mean([spearmanr(thetas, row)[0] for row in err]))
        rho_delta.append(np.mean([spearmanr(deltas, col)[0] for col in err.T]))
    elapsed = time.perf_counter() - start
    # the gate is the rank correlation; exact monotonicity of the mean curve is reported
    # alongside because at theta=0.1 it flattens once drift reaches the masked magnitudes
    dips = np.diff(mean_err, axis=0)
    worst_dip = float(dips.min()) if dips.size else 0.0
    mono_theta = bool(np.all(np.diff(mean_err, axis=1) >= 0))
    r_t, r_d = float(np.mean(rho_theta)), float(np.mean(rho_delta))
    ok = r_t > DRIFT_RHO and r_d > DRIFT_RHO and elapsed < DRIFT_BUDGET_S
    report(
        capsys,
        5,
        ok,
        f"recovery error rank correlation (need > {DRIFT_RHO}): vs theta rho={r_t:.3f}, vs staleness rho={r_d:.3f}; "
        f"mean curve non-decreasing in theta={mono_theta}, largest step down in staleness {min(worst_dip, 0.0):.1e}; "
        f"{elapsed:.1f}s",
    )
    assert ok


def test_6_degenerate_caesar_equals_fedavg(capsys):
    common = dict(theta_d_max=0.0, theta_u_min=0.0, theta_u_max=0.0, adaptive_batch=False, max_rounds=60)
    mismatched = []
    for seed in (0, 1):
        a = sim.run_experiment(desk_config(seed, "caesar", **common), threads=1)
        b = sim.run_experiment(desk_config(seed, "fedavg", **common), threads=1)
        if [m.accuracy for m in a] != [m.accuracy for m in b]:
            mismatched.append(seed)
    ok = not mismatched
    report(capsys, 6, ok, f"degenerate caesar vs fedavg accuracy trajectories identical on seeds 0,1 (mismatched: {mismatched})")
    assert ok


# ---------------------------------------------------------------------------
# desk-scale end to end


@pytest.fixture(scope="module")
def desk_runs():
    start = time.perf_counter()
    runs = {
        (seed, s): sim.run_experiment(desk_config(seed, s), threads=1) for seed in DESK_SEEDS for s in DESK_STRATEGIES
    }
    return runs, time.perf_counter() - start


def _traffic_at(history, target):
    for m in history:
        if m.accuracy >= target:
            return m.cum_traffic_bits
    return None


def test_7a_accuracy_close_to_fedavg(capsys, desk_runs):
    runs, elapsed = desk_runs
    gaps = [100 * (runs[seed, "fedavg"][-1].accuracy - runs[seed, "caesar"][-1].accuracy) for seed in DESK_SEEDS]
    good = sum(g <= ACC_GAP_POINTS for g in gaps)
    ok = good >= MIN_SEEDS and elapsed < DESK_BUDGET_S
    report(
        capsys,
        "7a",
        ok,
        f"final accuracy gap fedavg-caesar (points): {[round(g, 2) for g in gaps]}; within {ACC_GAP_POINTS} on "
        f"{good}/{len(DESK_SEEDS)} seeds (need {MIN_SEEDS}); desk runs took {elapsed:.0f}s",
    )
    assert ok


def test_7b_traffic_to_accuracy(capsys, desk_runs):
    runs, _ = desk_runs
    good, rows = 0, []
    for seed in DESK_SEEDS:
        target = min(max(m.accuracy for m in runs[seed, s]) for s in DESK_STRATEGIES)
        t = {s: _traffic_at(runs[seed, s], target) for s in DESK_STRATEGIES}
        vs_fic = 1 - t["caesar"] / t["fic"]
        vs_cac = 1 - t["caesar"] / t["cac"]
        good += vs_fic >= FIC_SAVING and vs_cac >= CAC_SAVING
        rows.append(f"seed {seed} @acc {target:.3f}: saving {100 * vs_fic:+.1f}% vs fic, {100 * vs_cac:+.1f}% vs cac")
    ok = good >= MIN_SEEDS
    report(
        capsys,
        "7b",
        ok,
        f"traffic-to-accuracy savings (need >= {100 * FIC_SAVING:.0f}% vs fic and >= {100 * CAC_SAVING:.0f}% vs cac "
        f"on {MIN_SEEDS}/{len(DESK_SEEDS)} seeds): {good} seeds; " + "; ".join(rows),
    )
    assert ok


def test_7c_waiting_time(capsys, desk_runs):
    runs, _ = desk_runs
    savings = []
    for seed in DESK_SEEDS:
        c = np.mean([m.avg_wait for m in runs[seed, "caesar"]])
        f = np.mean([m.avg_wait for m in runs[seed, "fedavg"]])
        savings.append(1 - c / f)
    ok = all(s >= WAIT_SAVING for s in savings)
    report(capsys, "7c", ok, f"mean waiting time reduction vs fixed-batch fedavg: {[f'{100 * s:.1f}%' for s in savings]} (need >= {100 * WAIT_SAVING:.0f}% each)")
    assert ok


# ---------------------------------------------------------------------------


def _cli_run(out_dir, threads):
    env = {**os.environ, sim.THREADS_ENV: str(threads)}
    cmd = [sys.executable, "-m", "caesar_sim", "run", "--config", str(DESK), "--seed", "3", "--out", str(out_dir), "--quiet"]
    subprocess.run(cmd, check=True, env=env, capture_output=True)
    run_dir = out_dir / "seed_3"
    return (run_dir / "metrics.csv").read_bytes(), (run_dir / "participants.csv").read_bytes()


def test_8_determinism(capsys, tmp_path):
    one_a = _cli_run(tmp_path / "a", 1)
    one_b = _cli_run(tmp_path / "b", 1)
    eight = _cli_run(tmp_path / "c", 8)
    ok = one_a == one_b == eight
    report(capsys, 8, ok, f"byte-identical CSVs across reruns and {sim.THREADS_ENV}=1 vs 8: {ok}")
    assert ok


def test_9_partition_properties(capsys):
    train, _ = datagen.synth_dataset(desk_config(0, "caesar").data)
    rng = np.random.default_rng(9)
    broken = 0
    for _ in range(PARTITION_CASES):
        p = float(rng.choice([0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0]))
        seed = int(rng.integers(2**31))
        parts = datagen.partition_indices(train.labels, PartitionSpec(50, p=p, min_per_device=64, seed=seed))
        joined = np.concatenate(parts)
        broken += not (joined.size == len(train) and np.array_equal(np.sort(joined), np.arange(len(train))))
    uniform = policy.uniform_distribution(10)

    def mean_kl(p, seed):
        shards = datagen.dirichlet_partition(train, PartitionSpec(50, p=p, min_per_device=64, seed=seed))
        return np.mean([policy.kl_divergence(datagen.label_distribution(s, 10), uniform) for s in shards])

    kl1 = np.mean([mean_kl(1.0, s) for s in range(KL_SEEDS)])
    kl10 = np.mean([mean_kl(10.0, s) for s in range(KL_SEEDS)])
    ok = broken == 0 and kl10 > kl1
    report(capsys, 9, ok, f"disjoint cover broken in {broken}/{PARTITION_CASES} cases; mean KL p=10 {kl10:.3f} > p=1 {kl1:.3f}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
