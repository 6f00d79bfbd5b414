"""Branch losses, the multi-task objective, and prediction.

The key oracle here rebuilds each circuit as explicit dense 2^n x 2^n
matrices via Kronecker products and simulates the full density matrix, a
path that shares nothing with the stride-based simulator.
"""
import numpy as np
import pytest

from qttt import model
from qttt.circuits import (
    ArchitectureConfig,
    QtttParams,
    decoder_ops,
    encoder_ops,
    initial_state,
    linear_preprocess,
    realize_noise,
    reupload_ops,
    run_encoder,
)
from qttt.statevec import GateOp, gate_matrix

RNG = np.random.default_rng(99)


def nonzero_vec(d, rng=RNG):
    while True:
        x = rng.normal(size=d)
        if np.linalg.norm(x) > 1e-6:
            return x


# -- dense-matrix oracle ------------------------------------------------------

def dense_gate(g: GateOp, n: int) -> np.ndarray:
    """Full 2^n x 2^n matrix of one gate via Kronecker products."""
    if g.kind in ("cnot", "swap"):
        dim = 2**n
        m = np.zeros((dim, dim), dtype=complex)
        a, b = g.qubits
        for idx in range(dim):
            bits = [(idx >> (n - 1 - q)) & 1 for q in range(n)]
            if g.kind == "cnot":
                if bits[a]:
                    bits[b] ^= 1
            else:
                bits[a], bits[b] = bits[b], bits[a]
            j = sum(bit << (n - 1 - q) for q, bit in enumerate(bits))
            m[j, idx] = 1.0
        return m
    mats = [np.eye(2, dtype=complex)] * n
    mats[g.qubits[0]] = gate_matrix(g)
    out = mats[0]
    for m2 in mats[1:]:
        out = np.kron(out, m2)
    return out


def dense_unitary(ops, n: int) -> np.ndarray:
    u = np.eye(2**n, dtype=complex)
    for g in ops:
        u = dense_gate(g, n) @ u
    return u


def dense_partial_trace(rho: np.ndarray, n: int, keep: list[int]) -> np.ndarray:
    rest = [q for q in range(n) if q not in keep]
    perm = keep + rest
    t = rho.reshape([2] * (2 * n))
    t = np.transpose(t, perm + [n + q for q in perm])
    k, r = len(keep), len(rest)
    t = t.reshape(2**k, 2**r, 2**k, 2**r)
    return np.einsum("iaja->ij", t)


def oracle_qae_loss(x, params, noise=None) -> float:
    arch = params.arch
    xp = linear_preprocess(x, params)
    n = arch.n_qubits
    psi0 = initial_state(xp, arch).amplitudes
    rho = np.outer(psi0, psi0.conj())
    u = dense_unitary(encoder_ops(params, noise) + decoder_ops(params, noise), n)
    rho_out = u @ rho @ u.conj().T
    reduced = dense_partial_trace(rho_out, n, list(range(arch.N_q)))
    target = initial_state(xp, ArchitectureConfig(d_x=arch.d_x, N_q=arch.N_q)).amplitudes
    target = target[: 2**arch.N_q]
    return 1.0 - float(np.real(target.conj() @ reduced @ target))


def oracle_fidelities(x, params, noise=None) -> np.ndarray:
    arch = params.arch
    xp = linear_preprocess(x, params)
    n = arch.n_qubits
    psi0 = initial_state(xp, arch).amplitudes
    rho = np.outer(psi0, psi0.conj())
    u = dense_unitary(encoder_ops(params, noise) + reupload_ops(xp, params, noise), n)
    rho_out = u @ rho @ u.conj().T
    labels = model.label_states(arch.C)
    f = np.empty((arch.C, arch.N_q))
    for q in range(arch.N_q):
        rq = dense_partial_trace(rho_out, n, [q])
        f[:, q] = [float(np.real(np.trace(labels[c] @ rq))) for c in range(arch.C)]
    return f


# -- tests --------------------------------------------------------------------

class TestLabelStates:
    @pytest.mark.parametrize("n_classes", [2, 3, 4, 5, 6])
    def test_pure_unit_trace_hermitian(self, n_classes):
        rhos = model.label_states(n_classes)
        for rho in rhos:
            assert abs(np.trace(rho).real - 1.0) < 1e-12
            np.testing.assert_allclose(rho, rho.conj().T, atol=1e-12)
            np.testing.assert_allclose(rho @ rho, rho, atol=1e-10)  # rank one

    def test_two_classes_orthogonal(self):
        rhos = model.label_states(2)
        np.testing.assert_allclose(rhos[0], np.diag([1.0, 0.0]), atol=1e-12)
        np.testing.assert_allclose(rhos[1], np.diag([0.0, 1.0]), atol=1e-12)

    @pytest.mark.parametrize("n_classes", [3, 4, 5, 6])
    def test_pairwise_overlaps_spread(self, n_classes):
        rhos = model.label_states(n_classes)
        overlaps = [
            float(np.real(np.trace(rhos[a] @ rhos[b])))
            for a in range(n_classes)
            for b in range(a + 1, n_classes)
        ]
        assert max(overlaps) < 1.0 - 1e-6
        # the known maximal-spread overlap values
        expected = {3: 0.25, 4: 1 / 3, 5: 0.5, 6: 0.5}
        assert max(overlaps) == pytest.approx(expected[n_classes], abs=1e-9)

    def test_unsupported_class_count(self):
        with pytest.raises(ValueError):
            model.label_states(7)


class TestQaeLoss:
    def test_perfect_reconstruction_at_zero_angles_basis_input(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.zeros(arch)
        x = np.zeros(5)
        x[0] = 2.5
        assert model.qae_loss(x, p) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_output_gives_one(self):
        # zero angles, basis input e0; flip the first qubit inside the decoder
        # by a crafted theta_D first layer: RY(pi) on every qubit
        arch = ArchitectureConfig(d_x=4, N_q=2, L_D=1, L_E=1)
        p = QtttParams.zeros(arch)
        sl = p.seg_slice("theta_D")
        layer = np.zeros((2, 3))
        layer[:, 0] = np.pi  # theta of U3 = RY angle
        p.values[sl] = layer.ravel()
        x = np.zeros(4)
        x[0] = 1.0
        # encoder with zero angles fixes |00>; decoder RY(pi)xRY(pi) maps to |11>
        assert model.qae_loss(x, p) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n_t", [0, 1])
    def test_matches_dense_matrix_oracle(self, n_t):
        arch = ArchitectureConfig(d_x=5, N_t=n_t)
        for trial in range(5):
            p = QtttParams.init(arch, seed=trial)
            noise = realize_noise(arch, 0.2, seed=trial) if trial % 2 else None
            x = nonzero_vec(5)
            assert model.qae_loss(x, p, noise) == pytest.approx(
                oracle_qae_loss(x, p, noise), abs=1e-10
            )

    def test_in_unit_interval(self):
        arch = ArchitectureConfig(d_x=5, N_t=1)
        for trial in range(10):
            p = QtttParams.init(arch, seed=trial)
            assert 0.0 <= model.qae_loss(nonzero_vec(5), p) <= 1.0


class TestClassFidelities:
    def test_identity_branch_on_zero_state(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.zeros(arch)
        x = np.zeros(5)
        x[0] = 1.0
        f = model.class_fidelities(x, p)
        np.testing.assert_allclose(f[0], 1.0, atol=1e-12)  # rho_1 = |0><0|
        np.testing.assert_allclose(f[1], 0.0, atol=1e-12)  # rho_2 = |1><1|

    def test_binary_fidelities_sum_to_one(self):
        arch = ArchitectureConfig(d_x=5)
        for trial in range(10):
            p = QtttParams.init(arch, seed=trial)
            f = model.class_fidelities(nonzero_vec(5), p)
            np.testing.assert_allclose(f.sum(axis=0), 1.0, atol=1e-10)

    def test_matches_dense_matrix_oracle(self):
        arch = ArchitectureConfig(d_x=5, N_t=1)
        for trial in range(5):
            p = QtttParams.init(arch, seed=10 + trial)
            noise = realize_noise(arch, 0.15, seed=trial) if trial % 2 else None
            x = nonzero_vec(5)
            np.testing.assert_allclose(
                model.class_fidelities(x, p, noise), oracle_fidelities(x, p, noise), atol=1e-10
            )


class TestMainTaskLoss:
    def test_zero_when_weighted_fidelity_hits_target(self):
        f = np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
        alpha = np.ones((2, 3))
        y = np.array([1.0, 0.0])
        assert model.main_task_loss_from_fid(f, y, alpha) == 0.0

    def test_all_zero_fidelities_give_nq_over_two(self):
        n_q = 3
        f = np.zeros((2, n_q))
        alpha = RNG.normal(size=(2, n_q))
        y = np.array([0.0, 1.0])
        assert model.main_task_loss_from_fid(f, y, alpha) == pytest.approx(n_q / 2)

    def test_matches_direct_recomputation(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.init(arch, seed=4)
        x = nonzero_vec(5)
        y = np.array([1.0, 0.0])
        f = model.class_fidelities(x, p)
        expected = 0.5 * sum(
            (p.alpha[c, q] * f[c, q] - y[c]) ** 2
            for c in range(2)
            for q in range(arch.N_q)
        )
        assert model.main_task_loss(x, y, p) == pytest.approx(expected, abs=1e-12)

    def test_malformed_one_hot_rejected(self):
        p = QtttParams.init(ArchitectureConfig(d_x=5), seed=0)
        with pytest.raises(ValueError):
            model.main_task_loss(nonzero_vec(5), np.array([1.0, 1.0]), p)
        with pytest.raises(ValueError):
            model.main_task_loss(nonzero_vec(5), np.array([0.5, 0.5]), p)


class TestTotalLoss:
    def test_unit_sigmas_average_the_losses(self):
        p = QtttParams.init(ArchitectureConfig(d_x=5), seed=1)
        x, y = nonzero_vec(5), np.array([0.0, 1.0])
        b = model.total_loss(x, y, p)
        assert (b.sigma_mt, b.sigma_ae) == (1.0, 1.0)
        assert b.l_total == pytest.approx((b.l_mt + b.l_ae) / 2, abs=1e-12)

    def test_breakdown_recomposes_exactly(self):
        p = QtttParams.init(ArchitectureConfig(d_x=5), seed=2)
        p.values[p.seg_slice("sigma")] = [0.3, -0.4]
        b = model.total_loss(nonzero_vec(5), np.array([1.0, 0.0]), p)
        recomposed = (
            b.l_mt / (2 * b.sigma_mt**2)
            + b.l_ae / (2 * b.sigma_ae**2)
            + np.log(b.sigma_mt * b.sigma_ae)
        )
        assert b.l_total == recomposed

    def test_large_sigma_mt_limit(self):
        p = QtttParams.init(ArchitectureConfig(d_x=5), seed=2)
        x, y = nonzero_vec(5), np.array([1.0, 0.0])
        p.values[p.seg_slice("sigma")] = [10.0, 0.0]
        b = model.total_loss(x, y, p)
        assert b.l_total == pytest.approx(10.0 + b.l_ae / 2, abs=1e-6)


class TestPredict:
    def test_argmax_of_weighted_scores(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.init(arch, seed=5)
        x = nonzero_vec(5)
        f = model.class_fidelities(x, p)
        scores = (p.alpha * f).sum(axis=1)
        assert model.predict(x, p) == int(np.argmax(scores))

    def test_tie_breaks_to_lowest_index(self):
        scores = np.array([0.7, 0.7])
        assert int(np.argmax(scores)) == 0

    def test_scaling_alpha_of_one_class_changes_only_its_score(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.init(arch, seed=6)
        x = nonzero_vec(5)
        f = model.class_fidelities(x, p)
        base = model.class_scores(f, p.alpha)
        scaled_alpha = p.alpha.copy()
        scaled_alpha[1] *= 3.0
        scaled = model.class_scores(f, scaled_alpha)
        assert scaled[0] == base[0]
        assert scaled[1] == pytest.approx(3.0 * base[1])

    def test_argmax_invariant_under_monotone_transform(self):
        arch = ArchitectureConfig(d_x=5)
        p = QtttParams.init(arch, seed=7)
        for trial in range(10):
            x = nonzero_vec(5)
            f = model.class_fidelities(x, p)
            scores = model.class_scores(f, p.alpha)
            transformed = np.exp(2.0 * scores) + 1.0
            assert int(np.argmax(scores)) == int(np.argmax(transformed))


class TestBatchEvaluation:
    def test_batch_matches_single_sample_path(self):
        arch = ArchitectureConfig(d_x=5, N_t=1)
        p = QtttParams.init(arch, seed=8)
        noise = realize_noise(arch, 0.25, seed=2)
        X = np.stack([nonzero_vec(5) for _ in range(6)])
        Y = np.zeros((6, 2))
        Y[np.arange(6), RNG.integers(0, 2, 6)] = 1.0
        res = model.evaluate_batch(X, Y, p, noise)
        preds = [model.predict(x, p, noise) for x in X]
        np.testing.assert_array_equal(res.predictions, preds)
        l_mt = np.mean([model.main_task_loss(x, y, p, noise) for x, y in zip(X, Y)])
        l_ae = np.mean([model.qae_loss(x, p, noise) for x in X])
        assert res.l_mt == pytest.approx(l_mt, abs=1e-12)
        assert res.l_ae == pytest.approx(l_ae, abs=1e-12)
        truth = np.argmax(Y, axis=1)
        assert res.accuracy == pytest.approx(100.0 * np.mean(preds == truth))
