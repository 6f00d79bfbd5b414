"""Acceptance criteria.

One test per criterion; each prints a single `ACCEPTANCE <name>: PASS` line
with the measured numbers (run with -s or look at captured output).  The
heavy criteria drive the CLI harness end to end and share one experiment
directory; everything downstream of a seed is deterministic, so the
measured numbers are identical on every run.

Desk-scale grid: two dataset families x three seeds, noise levels
{4, 8, 12} * pi/40, training 60 epochs, TTT = 10 plain-gradient steps at
learning rate 0.1 (the library defaults).
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from qttt import _engine, cli, grad
from qttt.circuits import ArchitectureConfig, QtttParams, realize_noise
from qttt.statevec import (
    GateOp,
    StateVector,
    apply_gate,
    apply_ops,
    fidelity_mixed,
    fidelity_pure,
    partial_trace,
)

pytestmark = pytest.mark.acceptance

NOISE_EPS = [4 * math.pi / 40, 8 * math.pi / 40, 12 * math.pi / 40]

BASE_CONFIG = {
    "datasets": {"families": ["linearly-separable", "two-curves"], "d_x": 5, "seeds": [0, 1, 2]},
    "train": {"epochs": 60},
    "ttt": {"epochs": 10, "learning_rate": 0.1, "optimizer": "sgd"},
    "ttt_online": {"epochs": 10, "learning_rate": 0.1, "optimizer": "sgd"},
}


def _write_config(path: Path, extra: dict) -> Path:
    cfg = json.loads(json.dumps(BASE_CONFIG))
    cfg.update(extra)
    path.write_text(json.dumps(cfg))
    return path


def _read_rows(csv_path: Path) -> list[dict]:
    lines = csv_path.read_text().strip().split("\n")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        for key in ("accuracy", "l_ae_before", "l_ae_after", "epsilon_theta", "corruption_level"):
            row[key] = float(row[key])
        rows.append(row)
    return rows


def _mean_acc(rows, variant, **filters):
    vals = [
        r["accuracy"]
        for r in rows
        if r["variant"] == variant and all(abs(r[k] - v) < 1e-9 for k, v in filters.items())
    ]
    assert vals, f"no rows for {variant} {filters}"
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def harness_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def noise_rows(harness_dir):
    cfg = _write_config(
        harness_dir / "noise.json", {"sweep": {"noise_epsilons": NOISE_EPS}}
    )
    out = harness_dir / "out"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    cfg_obj = cli.ExperimentConfig.from_file(cfg)
    return _read_rows(out / f"metrics_{cfg_obj.config_hash}.csv")


@pytest.fixture(scope="session")
def corruption_rows(harness_dir):
    cfg = _write_config(
        harness_dir / "corruption.json",
        {
            "datasets": {"families": ["linearly-separable"], "d_x": 5, "seeds": [0, 1, 2]},
            "sweep": {"corruptions": [{"kind": "gaussian", "levels": [0.0, 0.3, 0.6]}]},
        },
    )
    out = harness_dir / "out"
    assert cli.main(["sweep", "--config", str(cfg), "--out", str(out)]) == 0
    cfg_obj = cli.ExperimentConfig.from_file(cfg)
    return _read_rows(out / f"metrics_{cfg_obj.config_hash}.csv")


@pytest.fixture(scope="session")
def ablation_rows(harness_dir):
    # Same desk-scale structure (2 families x 3 seeds x 3 noise levels); the
    # family pair includes hidden-manifold because the re-uploading ablation
    # is only meaningful on data whose decision boundary needs circuit depth
    # (the reference results average over all families, several of which do).
    cfg = _write_config(
        harness_dir / "ablation.json",
        {
            "datasets": {
                "families": ["linearly-separable", "hidden-manifold"],
                "d_x": 5,
                "seeds": [0, 1, 2],
            },
            "ablation": {"noise_epsilons": NOISE_EPS},
        },
    )
    out = harness_dir / "out"
    assert cli.main(["ablation", "--config", str(cfg), "--out", str(out)]) == 0
    cfg_obj = cli.ExperimentConfig.from_file(cfg)
    return _read_rows(out / f"ablation_{cfg_obj.config_hash}.csv")


# ---------------------------------------------------------------------------
# criterion 1: simulator correctness (< 1 min)
# ---------------------------------------------------------------------------

def test_simulator_correctness_suite():
    start = time.time()
    rng = np.random.default_rng(12345)

    def random_state(n):
        a = rng.normal(size=2**n) + 1j * rng.normal(size=2**n)
        return StateVector(n, a / np.linalg.norm(a))

    def random_gate(n):
        kind = rng.choice(["u3", "rx", "ry", "rz", "cnot", "swap"])
        if kind in ("cnot", "swap"):
            q = rng.choice(n, size=2, replace=False)
            return GateOp(kind, (int(q[0]), int(q[1])))
        n_ang = 3 if kind == "u3" else 1
        return GateOp(kind, (int(rng.integers(n)),), tuple(rng.uniform(-np.pi, np.pi, n_ang)))

    # norm preservation, <= 100 gates on <= 6 qubits
    worst_norm = 0.0
    for _ in range(25):
        n = int(rng.integers(2, 7))
        state = apply_ops(random_state(n), [random_gate(n) for _ in range(100)])
        worst_norm = max(worst_norm, abs(state.norm() - 1.0))
    assert worst_norm < 1e-10

    # unitarity round trip
    worst_rt = 0.0
    for _ in range(25):
        n = int(rng.integers(2, 6))
        state = random_state(n)
        ops = [random_gate(n) for _ in range(60)]
        back = apply_ops(apply_ops(state, ops), [g.inverse() for g in reversed(ops)])
        worst_rt = max(worst_rt, float(np.max(np.abs(back.amplitudes - state.amplitudes))))
    assert worst_rt < 1e-10

    # partial-trace and fidelity oracles
    bell = StateVector(2, np.array([1, 0, 0, 1]) / np.sqrt(2))
    assert np.allclose(partial_trace(bell, [0]).matrix, np.eye(2) / 2, atol=1e-12)
    state = random_state(3)
    outer = np.outer(state.amplitudes, state.amplitudes.conj())
    assert np.allclose(partial_trace(state, [0, 1, 2]).matrix, outer, atol=1e-12)
    worst_fid = 0.0
    for _ in range(50):
        a, b = random_state(2), random_state(2)
        mixed = fidelity_mixed(partial_trace(a, [0, 1]), partial_trace(b, [0, 1]))
        worst_fid = max(worst_fid, abs(mixed - fidelity_pure(a, b)))
    assert worst_fid < 1e-10
    assert apply_gate(StateVector.from_bits("0"), GateOp("ry", (0,), (np.pi,))).amplitudes[1] == pytest.approx(1.0)

    elapsed = time.time() - start
    assert elapsed < 60
    print(
        f"\nACCEPTANCE simulator-correctness: PASS "
        f"(norm dev {worst_norm:.1e}, roundtrip {worst_rt:.1e}, "
        f"fidelity oracle {worst_fid:.1e}, {elapsed:.1f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 2: gradient suite (< 5 min)
# ---------------------------------------------------------------------------

def test_gradient_suite():
    """Shift rule vs central differences on >= 200 random (parameter,
    instance) pairs of N_q=3, L=4 circuits.

    Agreement is |ps - fd| <= 1e-5 |fd| + 1e-7: the absolute floor covers
    near-zero derivatives where a relative comparison of the FD oracle is
    numerically meaningless; the pure relative error is also reported over
    the pairs with |fd| > 1e-3.
    """
    start = time.time()
    rng = np.random.default_rng(777)
    pairs = 0
    max_excess = 0.0
    max_rel_large = 0.0
    for instance in range(4):
        n_t = instance % 2
        arch = ArchitectureConfig(d_x=5, N_t=n_t)
        params = QtttParams.init(arch, seed=100 + instance)
        noise = realize_noise(arch, 0.25, seed=instance) if instance % 2 else None
        x = rng.normal(size=5)
        y = np.zeros(2)
        y[rng.integers(2)] = 1.0
        kind = ("mt", "ae", "total")[instance % 3]
        segs = ("theta_E", "theta_M") if kind == "mt" else ("theta_E", "theta_D", "theta_M")
        ps = grad.grad_parameter_shift(kind, x, y, params, noise, segments=segs)
        fd = grad.grad_finite_difference(kind, x, y, params, noise, segments=segs, h=1e-5)
        diff = np.abs(ps.values - fd.values)
        excess = diff - (1e-5 * np.abs(fd.values) + 1e-7)
        max_excess = max(max_excess, float(excess.max()))
        large = np.abs(fd.values) > 1e-3
        if large.any():
            max_rel_large = max(
                max_rel_large, float((diff[large] / np.abs(fd.values[large])).max())
            )
        pairs += ps.values.size
    assert pairs >= 200
    assert max_excess <= 0.0
    assert max_rel_large < 1e-5
    elapsed = time.time() - start
    assert elapsed < 300
    print(
        f"\nACCEPTANCE gradient-suite: PASS ({pairs} pairs, max rel err "
        f"(|fd|>1e-3) {max_rel_large:.2e}, tolerance excess {max_excess:.2e}, {elapsed:.0f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 3: one-step-descent probe (< 10 min)
# ---------------------------------------------------------------------------

def test_theorem_probe(harness_dir):
    start = time.time()
    cfg = _write_config(
        harness_dir / "theorem.json",
        {"theorem": {"n_probes": 260, "train_epochs": 25, "eta_scale": 0.01}},
    )
    out = harness_dir / "out"
    assert cli.main(["theorem", "--config", str(cfg), "--out", str(out)]) == 0
    cfg_obj = cli.ExperimentConfig.from_file(cfg)
    blob = json.loads((out / f"theorem_{cfg_obj.config_hash}.json").read_text())
    assert blob["n_aligned"] >= 100, f"only {blob['n_aligned']} aligned probes"
    assert blob["descent_rate"] >= 0.95
    assert blob["estimate_within_5pct_rate"] >= 0.95
    elapsed = time.time() - start
    assert elapsed < 600
    print(
        f"\nACCEPTANCE theorem-probe: PASS ({blob['n_aligned']} aligned probes, "
        f"descent rate {blob['descent_rate']:.3f}, estimate-within-5% "
        f"{blob['estimate_within_5pct_rate']:.3f}, {elapsed:.0f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 4: noise-mitigation trend (< 2 h target)
# ---------------------------------------------------------------------------

def test_noise_mitigation_trend(noise_rows):
    top = NOISE_EPS[-1]
    base_top = _mean_acc(noise_rows, "baseline-no-ttt", epsilon_theta=top)
    batch_top = _mean_acc(noise_rows, "qttt-batch", epsilon_theta=top)
    batch_mean = float(np.mean([_mean_acc(noise_rows, "qttt-batch", epsilon_theta=e) for e in NOISE_EPS]))
    online_mean = float(np.mean([_mean_acc(noise_rows, "qttt-online", epsilon_theta=e) for e in NOISE_EPS]))
    assert batch_top >= base_top + 2.5, (
        f"batch TTT at 12pi/40 gained only {batch_top - base_top:.2f} points"
    )
    assert batch_mean >= online_mean
    print(
        f"\nACCEPTANCE noise-mitigation-trend: PASS (at 12pi/40 baseline {base_top:.2f} "
        f"-> batch {batch_top:.2f} (+{batch_top - base_top:.2f} >= 2.5); sweep means "
        f"batch {batch_mean:.2f} >= online {online_mean:.2f})"
    )


# ---------------------------------------------------------------------------
# criterion 5: corruption-robustness trend (< 1 h)
# ---------------------------------------------------------------------------

def test_corruption_robustness_trend(corruption_rows):
    """Gaussian corruption on linearly-separable: batch-TTT drop (level 0 ->
    0.6) strictly smaller than the no-TTT drop, averaged over 3 seeds.

    KNOWN-RED. This criterion is structurally unattainable in this
    architecture once training converges, and the tie below is the honest
    measurement. Mechanism (see the decisions ledger for the full record):
    the trainable linear layer plus the QAE co-converge so that every
    feature vector in the span of the learned input map reconstructs
    near-perfectly (QAE loss ~1e-4 on clean *and* corrupted inputs), and
    i.i.d. gaussian corruption never leaves that span, so the
    self-supervised TTT objective is already globally minimized and TTT is
    a no-op; independently, the trained baseline already sits at the Bayes
    accuracy of the corrupted task (measured within a point), so no
    test-time adaptation of any kind could beat it. The paper's own
    ablation shows gaussian as by far its weakest TTT column (+2.2 points
    at ~50% accuracy). Systematic (affine) corruptions are the mechanism
    TTT-through-the-linear-layer can invert; i.i.d. gaussian is not.
    """
    base_drop = _mean_acc(corruption_rows, "baseline-no-ttt", corruption_level=0.0) - _mean_acc(
        corruption_rows, "baseline-no-ttt", corruption_level=0.6
    )
    batch_drop = _mean_acc(corruption_rows, "qttt-batch", corruption_level=0.0) - _mean_acc(
        corruption_rows, "qttt-batch", corruption_level=0.6
    )
    print(
        f"\nACCEPTANCE corruption-robustness-trend: measured drops: "
        f"baseline {base_drop:.2f}, qttt-batch {batch_drop:.2f} "
        f"(criterion: batch strictly smaller)"
    )
    assert batch_drop < base_drop, (
        f"batch drop {batch_drop:.2f} is not strictly smaller than baseline drop "
        f"{base_drop:.2f}; see docstring: the self-supervised loss carries no "
        f"gaussian-corruption signal at the trained optimum and the baseline is "
        f"already Bayes-level, so the strict inequality cannot be met honestly"
    )
    print("ACCEPTANCE corruption-robustness-trend: PASS")


# ---------------------------------------------------------------------------
# criterion 6: TTT descent contract
# ---------------------------------------------------------------------------

def test_ttt_descent_contract(noise_rows, corruption_rows, ablation_rows):
    checked = 0
    worst = -np.inf
    for rows in (noise_rows, corruption_rows, ablation_rows):
        for r in rows:
            if r["variant"] in ("qttt-batch", "qttt-nt1", "qttt-nt2", "ablation-no-linear",
                                "ablation-no-reupload", "ablation-no-multitask"):
                checked += 1
                worst = max(worst, r["l_ae_after"] - r["l_ae_before"])
                assert r["l_ae_after"] <= r["l_ae_before"] + 1e-9, r
    assert checked > 0
    print(
        f"\nACCEPTANCE ttt-descent-contract: PASS ({checked} batch-TTT runs, "
        f"max l_ae increase {worst:.2e} <= 1e-9)"
    )


# ---------------------------------------------------------------------------
# criterion 7: complexity accounting (< 5 min)
# ---------------------------------------------------------------------------

def test_complexity_accounting():
    start = time.time()
    rng = np.random.default_rng(5)
    ratios = []
    for l_m in (4, 8, 16):
        arch = ArchitectureConfig(d_x=5, L_M=l_m)
        report = grad.count_gates(arch, n_train=240, n_test=60)
        factor = report.measured_ratio / report.asymptotic_ratio
        assert 0.5 < factor < 2.0, f"L_M={l_m}: factor {factor:.3f} outside [0.5, 2]"
        ratios.append(report.measured_ratio)
        # the formula must equal the instrumented counter of a real pass
        params = QtttParams.init(arch, seed=0)
        x = rng.normal(size=(2, 5))
        y = np.zeros((2, 2))
        y[np.arange(2), rng.integers(0, 2, 2)] = 1.0
        c_train = _engine.GateCounter()
        grad.total_grad_batch(x, y, params, None, counter=c_train)
        c_ttt = _engine.GateCounter()
        grad.ae_grad_batch(x, params, None, ("theta_L", "theta_E", "theta_D"), counter=c_ttt)
        check = grad.count_gates(arch, 2, 2)
        assert c_train.total == check.training_gates
        assert c_ttt.total == check.ttt_gates
    assert ratios[0] > ratios[1] > ratios[2]
    elapsed = time.time() - start
    assert elapsed < 300
    print(
        f"\nACCEPTANCE complexity-accounting: PASS (ratios {ratios[0]:.4f} > "
        f"{ratios[1]:.4f} > {ratios[2]:.4f}, instrumented == formula, {elapsed:.0f}s)"
    )


# ---------------------------------------------------------------------------
# criterion 8: ablation structure and ordering
# ---------------------------------------------------------------------------

def test_ablation_structure_and_ordering(ablation_rows):
    variants = {r["variant"] for r in ablation_rows}
    assert variants == set(cli.ABLATION_VARIANTS), variants
    means = {
        v: float(np.mean([r["accuracy"] for r in ablation_rows if r["variant"] == v]))
        for v in sorted(variants)
    }
    default = means["qttt-batch"]
    for rival in ("ablation-no-ttt", "ablation-no-linear", "ablation-no-reupload"):
        assert default >= means[rival], (
            f"default {default:.2f} < {rival} {means[rival]:.2f}"
        )
    detail = ", ".join(f"{v} {means[v]:.2f}" for v in sorted(means))
    print(f"\nACCEPTANCE ablation-ordering: PASS ({detail})")
