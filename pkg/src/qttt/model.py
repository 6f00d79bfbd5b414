"""Branch losses, the multi-task objective, and the prediction rule.

Per-datum functions run on the readable single-state path; `evaluate_batch`
routes whole feature matrices through the batched engine (both paths are
cross-checked in the tests).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _engine
from .circuits import (
    NoiseSpec,
    QtttParams,
    linear_preprocess,
    run_decoder,
    run_encoder,
    run_main_branch,
)
from .statevec import ReducedDensity, amplitude_encode, fidelity_mixed, fidelity_pure, partial_trace

# Bloch vectors of maximal-spread pure label states, up to six classes.
# Two classes are the poles (orthogonal); 3 = equilateral triangle in the
# x-z plane, 4 = tetrahedron, 5 = triangular bipyramid, 6 = octahedron.
_SQ2, _SQ3 = np.sqrt(2.0), np.sqrt(3.0)
_BLOCH_TABLE = {
    2: [(0, 0, 1), (0, 0, -1)],
    3: [(0, 0, 1), (_SQ3 / 2, 0, -0.5), (-_SQ3 / 2, 0, -0.5)],
    4: [
        (0, 0, 1),
        (2 * _SQ2 / 3, 0, -1 / 3),
        (-_SQ2 / 3, np.sqrt(2 / 3), -1 / 3),
        (-_SQ2 / 3, -np.sqrt(2 / 3), -1 / 3),
    ],
    5: [(0, 0, 1), (0, 0, -1), (1, 0, 0), (-0.5, _SQ3 / 2, 0), (-0.5, -_SQ3 / 2, 0)],
    6: [(0, 0, 1), (0, 0, -1), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)],
}

_PAULI = np.array(
    [
        [[0, 1], [1, 0]],
        [[0, -1j], [1j, 0]],
        [[1, 0], [0, -1]],
    ],
    dtype=np.complex128,
)


def label_states(n_classes: int) -> np.ndarray:
    """(C, 2, 2) pure single-qubit density matrices rho_c = (I + v.sigma)/2."""
    if n_classes not in _BLOCH_TABLE:
        raise ValueError(f"label states defined for 2..6 classes, got {n_classes}")
    out = np.empty((n_classes, 2, 2), dtype=np.complex128)
    for c, v in enumerate(_BLOCH_TABLE[n_classes]):
        out[c] = 0.5 * (np.eye(2) + sum(v[k] * _PAULI[k] for k in range(3)))
    return out


@dataclass(frozen=True)
class LossBreakdown:
    l_mt: float
    l_ae: float
    l_total: float
    sigma_mt: float
    sigma_ae: float


def _check_one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n_classes,) or not np.all((y == 0) | (y == 1)) or y.sum() != 1:
        raise ValueError(f"label must be one-hot of length {n_classes}")
    return y


def qae_loss(
    x: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> float:
    """1 - Tr[rho_x' rho~_x'] where rho~ is the decoded state reduced onto the
    data register (pure-state fidelity when there are no trash qubits)."""
    arch = params.arch
    xp = linear_preprocess(x, params)
    target = amplitude_encode(xp, arch.N_q)
    out = run_decoder(run_encoder(xp, params, noise), params, noise)
    if arch.N_t == 0:
        fid = fidelity_pure(target, out)
    else:
        reduced = partial_trace(out, keep=list(range(arch.N_q)))
        proj = ReducedDensity(arch.N_q, np.outer(target.amplitudes, target.amplitudes.conj()))
        fid = fidelity_mixed(proj, reduced)
    return 1.0 - fid


def class_fidelities(
    x: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> np.ndarray:
    """f[c, q] = Tr[rho_c rho_{y~,q}] from per-qubit reduced states of the main branch."""
    arch = params.arch
    xp = linear_preprocess(x, params)
    out = run_main_branch(xp, params, noise)
    rhos = label_states(arch.C)
    f = np.empty((arch.C, arch.N_q))
    for q in range(arch.N_q):
        rho_q = partial_trace(out, keep=[q]).matrix
        f[:, q] = np.real(np.einsum("cij,ji->c", rhos, rho_q))
    return np.clip(f, 0.0, 1.0)


def main_task_loss_from_fid(f: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """(1/2) sum_{c,q} (alpha_{c,q} f_{c,q} - y_c)^2."""
    resid = alpha * f - y[:, None]
    return 0.5 * float(np.sum(resid**2))


def main_task_loss(
    x: np.ndarray, y: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> float:
    y = _check_one_hot(y, params.arch.C)
    f = class_fidelities(x, params, noise)
    return main_task_loss_from_fid(f, y, params.alpha)


def total_loss_from_parts(l_mt: float, l_ae: float, params: QtttParams) -> LossBreakdown:
    s_mt, s_ae = params.segment("sigma")
    sig_mt, sig_ae = float(np.exp(s_mt)), float(np.exp(s_ae))
    total = l_mt / (2 * sig_mt**2) + l_ae / (2 * sig_ae**2) + float(np.log(sig_mt * sig_ae))
    return LossBreakdown(l_mt, l_ae, total, sig_mt, sig_ae)


def total_loss(
    x: np.ndarray, y: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> LossBreakdown:
    return total_loss_from_parts(
        main_task_loss(x, y, params, noise), qae_loss(x, params, noise), params
    )


def class_scores(f: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return np.sum(alpha * f, axis=1)


def predict(
    x: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> int:
    """argmax_c sum_q alpha_{c,q} f_{c,q}; ties resolve to the lowest class index."""
    scores = class_scores(class_fidelities(x, params, noise), params.alpha)
    return int(np.argmax(scores))


# ---------------------------------------------------------------------------
# batched evaluation (engine-backed)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalResult:
    accuracy: float      # percent
    l_mt: float          # mean main-task loss
    l_ae: float          # mean QAE loss
    l_total: float       # mean multi-task loss at the current sigmas
    predictions: np.ndarray


def batch_fidelities(
    features: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    counter: _engine.GateCounter | None = None,
) -> np.ndarray:
    arch = params.arch
    xp = np.asarray(features, dtype=np.float64) @ params.linear_map.T + params.linear_bias
    states, _ = _engine.run_grid(
        _engine.main_program(arch), xp, params.values, None, noise, counter
    )
    return _engine.class_fidelity_rows(states[:, 0], label_states(arch.C), arch)


def batch_qae_losses(
    features: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    counter: _engine.GateCounter | None = None,
) -> np.ndarray:
    arch = params.arch
    xp = np.asarray(features, dtype=np.float64) @ params.linear_map.T + params.linear_bias
    states, xps = _engine.run_grid(
        _engine.qae_program(arch), xp, params.values, None, noise, counter
    )
    return _engine.qae_losses(states[:, 0], xps[:, 0])


def evaluate_batch(
    features: np.ndarray,
    labels: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
) -> EvalResult:
    """Accuracy and mean losses over a feature matrix (one-hot label rows)."""
    f = batch_fidelities(features, params, noise)
    scores = np.einsum("cq,rcq->rc", params.alpha, f)
    preds = np.argmax(scores, axis=1)
    truth = np.argmax(labels, axis=1)
    accuracy = 100.0 * float(np.mean(preds == truth))
    resid = params.alpha[None] * f - labels[:, :, None]
    l_mt = 0.5 * float(np.mean(np.sum(resid**2, axis=(1, 2))))
    l_ae = float(np.mean(batch_qae_losses(features, params, noise)))
    breakdown = total_loss_from_parts(l_mt, l_ae, params)
    return EvalResult(accuracy, l_mt, l_ae, breakdown.l_total, preds)
