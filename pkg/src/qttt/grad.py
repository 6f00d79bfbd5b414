"""Gradients for every parameter segment, plus gate-count accounting.

Three routes, chosen by what each segment is:
  * circuit angles (theta_E, theta_D, theta_M): two-term shift rule on each
    U3 input angle, g = [L(a + pi/2) - L(a - pi/2)] / 2.  The main-task loss
    is quadratic in the per-qubit fidelities, so the rule is applied to the
    fidelities (which are exactly degree-1 trigonometric in each angle) and
    chained through the quadratic; applying the two-term rule to the squared
    loss directly would be wrong.  Data-layer weights get the extra chain
    factor d(angle)/d(w_j) = x'_j.
  * theta_L (linear layer): central finite differences on x' (probed through
    the bias, which shifts x' exactly), chained onto M and b analytically;
    the amplitude-encoding normalization has no shift rule.
  * alpha, sigma: closed-form expressions from the loss definitions.

Shifted evaluations are independent, so each gradient is one batched engine
pass per branch over a (sample x variant) grid.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _engine
from .circuits import ArchitectureConfig, NoiseSpec, QtttParams, SEGMENT_NAMES
from .model import (
    batch_fidelities,
    batch_qae_losses,
    label_states,
    main_task_loss_from_fid,
    total_loss_from_parts,
)

ANGLE_SEGMENTS = ("theta_E", "theta_D", "theta_M")
DEFAULT_FD_STEP = 1e-5


class UnsupportedSegmentError(ValueError):
    """Raised when the shift rule is asked for a non-angle segment."""


@dataclass(frozen=True)
class GradientVector:
    """Gradient over the requested segments, concatenated in canonical order."""

    segments: tuple[str, ...]
    values: np.ndarray
    method: str  # parameter-shift | finite-difference | analytic

    def segment(self, params: QtttParams, name: str) -> np.ndarray:
        lengths = params.arch.segment_lengths()
        start = 0
        for seg in self.segments:
            if seg == name:
                return self.values[start : start + lengths[seg]]
            start += lengths[seg]
        raise KeyError(f"{name!r} not among {self.segments}")


def _canonical(segments) -> tuple[str, ...]:
    segs = tuple(s for s in SEGMENT_NAMES if s in set(segments))
    unknown = set(segments) - set(SEGMENT_NAMES)
    if unknown:
        raise KeyError(f"unknown segments {sorted(unknown)}")
    return segs


def _gather_segments(params: QtttParams, full: np.ndarray, segments: tuple[str, ...]) -> np.ndarray:
    return np.concatenate([full[params.seg_slice(s)] for s in segments]) if segments else np.zeros(0)


def _angle_indices(params: QtttParams, segments, program) -> list[int]:
    """Flat indices of masked angle parameters that appear in this branch."""
    idx = []
    for seg in segments:
        sl = params.seg_slice(seg)
        idx.extend(p for p in range(sl.start, sl.stop) if p in program.angle_col_of_param)
    return idx


def _grid_for(
    params: QtttParams, program, segments: tuple[str, ...], h: float
) -> tuple[_engine.GridSpec, list[int]]:
    angle_segs = tuple(s for s in segments if s in ANGLE_SEGMENTS)
    angle_idx = _angle_indices(params, angle_segs, program)
    shifts = []
    for a in angle_idx:
        col = program.angle_col_of_param[a]
        shifts.append((col, np.pi / 2))
        shifts.append((col, -np.pi / 2))
    fd_feats = tuple(range(params.arch.d_x)) if "theta_L" in segments else ()
    return _engine.GridSpec(tuple(shifts), fd_feats, h), angle_idx


def _scatter_theta_l(
    grads: np.ndarray, dldxp: np.ndarray, X: np.ndarray, params: QtttParams
) -> None:
    """Chain d L / d x' onto theta_L = [Flatten(M), b]: dL/dM_jk = dL/dx'_j x_k."""
    d = params.arch.d_x
    sl = params.seg_slice("theta_L")
    grads[:, sl.start : sl.start + d * d] = np.einsum("sj,sk->sjk", dldxp, X).reshape(
        X.shape[0], d * d
    )
    grads[:, sl.start + d * d : sl.stop] = dldxp


def _scatter_angles(
    grads: np.ndarray,
    per_angle: np.ndarray,
    angle_idx: list[int],
    program,
    xp_base: np.ndarray,
) -> None:
    for i, a in enumerate(angle_idx):
        g = per_angle[:, i]
        j = program.data_x_of_param.get(a)
        if j is not None:
            g = g * xp_base[:, j]
        grads[:, a] = g


# ---------------------------------------------------------------------------
# batched gradients (used by training, TTT, and the public per-datum ops)
# ---------------------------------------------------------------------------

def mt_grad_batch(
    X: np.ndarray,
    Y: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None,
    segments: tuple[str, ...],
    h: float = DEFAULT_FD_STEP,
    counter: _engine.GateCounter | None = None,
):
    """Per-sample gradients of the raw main-task loss.

    Returns (grads (S, P) over the full flat vector, f_base (S, C, N_q),
    l_mt (S,)).  Segments outside the mask stay zero.
    """
    arch = params.arch
    program = _engine.main_program(arch)
    grid, angle_idx = _grid_for(params, program, segments, h)
    xp_base = X @ params.linear_map.T + params.linear_bias
    states, _ = _engine.run_grid(program, xp_base, params.values, grid, noise, counter)
    f = _engine.class_fidelity_rows(states, label_states(arch.C), arch)
    s = X.shape[0]
    alpha = params.alpha
    f_base = f[:, 0]
    resid = alpha[None] * f_base - Y[:, :, None]
    l_mt = 0.5 * np.sum(resid**2, axis=(1, 2))
    grads = np.zeros((s, params.values.size))
    k = len(angle_idx)
    if k:
        df = (f[:, 1 : 1 + 2 * k : 2] - f[:, 2 : 2 + 2 * k : 2]) / 2.0
        per_angle = np.einsum("scq,skcq->sk", resid * alpha[None], df)
        _scatter_angles(grads, per_angle, angle_idx, program, xp_base)
    if grid.fd_features:
        f_fd = f[:, 1 + 2 * k :]
        resid_fd = alpha[None, None] * f_fd - Y[:, None, :, None]
        l_fd = 0.5 * np.sum(resid_fd**2, axis=(2, 3)).reshape(s, len(grid.fd_features), 2)
        dldxp = (l_fd[:, :, 0] - l_fd[:, :, 1]) / (2 * h)
        _scatter_theta_l(grads, dldxp, X, params)
    return grads, f_base, l_mt


def ae_grad_batch(
    X: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None,
    segments: tuple[str, ...],
    h: float = DEFAULT_FD_STEP,
    counter: _engine.GateCounter | None = None,
):
    """Per-sample gradients of the QAE loss; returns (grads (S, P), l_ae (S,))."""
    arch = params.arch
    program = _engine.qae_program(arch)
    grid, angle_idx = _grid_for(params, program, segments, h)
    xp_base = X @ params.linear_map.T + params.linear_bias
    states, xps = _engine.run_grid(program, xp_base, params.values, grid, noise, counter)
    l = _engine.qae_losses(states, xps)
    s = X.shape[0]
    grads = np.zeros((s, params.values.size))
    k = len(angle_idx)
    if k:
        per_angle = (l[:, 1 : 1 + 2 * k : 2] - l[:, 2 : 2 + 2 * k : 2]) / 2.0
        _scatter_angles(grads, per_angle, angle_idx, program, xp_base)
    if grid.fd_features:
        l_fd = l[:, 1 + 2 * k :].reshape(s, len(grid.fd_features), 2)
        dldxp = (l_fd[:, :, 0] - l_fd[:, :, 1]) / (2 * h)
        _scatter_theta_l(grads, dldxp, X, params)
    return grads, l[:, 0]


def heads_grad_from_forward(
    f_base: np.ndarray, Y: np.ndarray, l_mt: np.ndarray, l_ae: np.ndarray, params: QtttParams
) -> np.ndarray:
    """Mean total-loss gradient over (alpha, sigma) from forward quantities."""
    alpha = params.alpha
    s_mt, s_ae = params.segment("sigma")
    g = np.zeros(params.values.size)
    resid = alpha[None] * f_base - Y[:, :, None]
    d_alpha = np.mean(resid * f_base, axis=0) / (2 * np.exp(2 * s_mt))
    g[params.seg_slice("alpha")] = d_alpha.ravel()
    sig = params.seg_slice("sigma")
    g[sig.start] = -float(np.mean(l_mt)) * np.exp(-2 * s_mt) + 1.0
    g[sig.start + 1] = -float(np.mean(l_ae)) * np.exp(-2 * s_ae) + 1.0
    return g


def total_grad_batch(
    X: np.ndarray,
    Y: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    frozen_segments: tuple[str, ...] = (),
    h: float = DEFAULT_FD_STEP,
    counter: _engine.GateCounter | None = None,
):
    """Mean multi-task-loss gradient over a batch, full flat vector.

    Returns (grad (P,), metrics dict with mean l_mt / l_ae / l_total).
    """
    frozen = set(frozen_segments)
    circuit_segs = tuple(
        s for s in ("theta_L", "theta_E", "theta_D", "theta_M") if s not in frozen
    )
    mt_segs = tuple(s for s in circuit_segs if s != "theta_D")
    ae_segs = tuple(s for s in circuit_segs if s != "theta_M")
    g_mt, f_base, l_mt = mt_grad_batch(X, Y, params, noise, mt_segs, h, counter)
    g_ae, l_ae = ae_grad_batch(X, params, noise, ae_segs, h, counter)
    sig_mt, sig_ae = params.sigma
    grad = np.mean(g_mt, axis=0) / (2 * sig_mt**2) + np.mean(g_ae, axis=0) / (2 * sig_ae**2)
    heads = heads_grad_from_forward(f_base, Y, l_mt, l_ae, params)
    if "alpha" in frozen:
        heads[params.seg_slice("alpha")] = 0.0
    if "sigma" in frozen:
        heads[params.seg_slice("sigma")] = 0.0
    grad = grad + heads
    breakdown = total_loss_from_parts(float(np.mean(l_mt)), float(np.mean(l_ae)), params)
    metrics = {
        "l_mt": breakdown.l_mt,
        "l_ae": breakdown.l_ae,
        "l_total": breakdown.l_total,
    }
    return grad, metrics


# ---------------------------------------------------------------------------
# public per-datum operations
# ---------------------------------------------------------------------------

def _single_loss_grads(
    loss_kind: str,
    x: np.ndarray,
    y: np.ndarray | None,
    params: QtttParams,
    noise: NoiseSpec | None,
    segments: tuple[str, ...],
    h: float,
) -> np.ndarray:
    """Full-length gradient of one loss for one datum (shift + theta_L FD mix)."""
    X = np.asarray(x, dtype=np.float64)[None]
    if loss_kind not in ("mt", "ae", "total"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss_kind in ("mt", "total"):
        if y is None:
            raise ValueError("main-task loss needs a label")
        Y = np.asarray(y, dtype=np.float64)[None]
    if loss_kind == "mt":
        g, _, _ = mt_grad_batch(X, Y, params, noise, segments, h)
        return g[0]
    if loss_kind == "ae":
        g, _ = ae_grad_batch(X, params, noise, segments, h)
        return g[0]
    mt_segs = tuple(s for s in segments if s != "theta_D")
    ae_segs = tuple(s for s in segments if s != "theta_M")
    g_mt, f_base, l_mt = mt_grad_batch(X, Y, params, noise, mt_segs, h)
    g_ae, l_ae = ae_grad_batch(X, params, noise, ae_segs, h)
    sig_mt, sig_ae = params.sigma
    grad = g_mt[0] / (2 * sig_mt**2) + g_ae[0] / (2 * sig_ae**2)
    heads = heads_grad_from_forward(f_base, Y, l_mt, l_ae, params)
    for name in ("alpha", "sigma"):
        if name in segments:
            sl = params.seg_slice(name)
            grad[sl] = heads[sl]
    return grad


def grad_parameter_shift(
    loss_kind: str,
    x: np.ndarray,
    y: np.ndarray | None,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    segments=ANGLE_SEGMENTS,
) -> GradientVector:
    """Shift-rule gradient over circuit-angle segments for one datum."""
    segs = _canonical(segments)
    bad = [s for s in segs if s not in ANGLE_SEGMENTS]
    if bad:
        raise UnsupportedSegmentError(
            f"parameter-shift applies to circuit angles only, not {bad}"
        )
    full = _single_loss_grads(loss_kind, x, y, params, noise, segs, DEFAULT_FD_STEP)
    return GradientVector(segs, _gather_segments(params, full, segs), "parameter-shift")


def grad_finite_difference(
    loss_kind: str,
    x: np.ndarray,
    y: np.ndarray | None,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    segments=("theta_L",),
    h: float = DEFAULT_FD_STEP,
) -> GradientVector:
    """Central-difference gradient over any segments for one datum.

    Evaluates the loss at p +- h per masked parameter through the plain
    forward path; this is the independent oracle for the shift rule.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    segs = _canonical(segments)
    if loss_kind not in ("mt", "ae", "total"):
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss_kind != "ae" and y is None:
        raise ValueError("main-task loss needs a label")
    fd_idx = [i for s in segs for i in range(params.seg_slice(s).start, params.seg_slice(s).stop)]
    X = np.asarray(x, dtype=np.float64)
    base = params.values

    def loss_at(vec: np.ndarray) -> float:
        p = QtttParams(params.arch, vec)
        if loss_kind == "ae":
            return float(batch_qae_losses(X[None], p, noise)[0])
        f = batch_fidelities(X[None], p, noise)[0]
        l_mt = main_task_loss_from_fid(f, np.asarray(y, dtype=np.float64), p.alpha)
        if loss_kind == "mt":
            return l_mt
        l_ae = float(batch_qae_losses(X[None], p, noise)[0])
        return total_loss_from_parts(l_mt, l_ae, p).l_total

    vals = np.zeros(len(fd_idx))
    for i, a in enumerate(fd_idx):
        plus, minus = base.copy(), base.copy()
        plus[a] += h
        minus[a] -= h
        vals[i] = (loss_at(plus) - loss_at(minus)) / (2 * h)
    return GradientVector(segs, vals, "finite-difference")


def grad_analytic_heads(
    x: np.ndarray,
    y: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
) -> GradientVector:
    """Closed-form d l_MT / d alpha and d l_total / d log-sigma for one datum."""
    X = np.asarray(x, dtype=np.float64)[None]
    Y = np.asarray(y, dtype=np.float64)[None]
    f = batch_fidelities(X, params, noise)
    l_ae = batch_qae_losses(X, params, noise)
    alpha = params.alpha
    resid = alpha[None] * f - Y[:, :, None]
    l_mt = 0.5 * np.sum(resid**2, axis=(1, 2))
    d_alpha = (resid * f)[0]
    s_mt, s_ae = params.segment("sigma")
    d_sigma = np.array(
        [
            -float(l_mt[0]) * np.exp(-2 * s_mt) + 1.0,
            -float(l_ae[0]) * np.exp(-2 * s_ae) + 1.0,
        ]
    )
    return GradientVector(
        ("alpha", "sigma"), np.concatenate([d_alpha.ravel(), d_sigma]), "analytic"
    )


# ---------------------------------------------------------------------------
# gate-count accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GateCountReport:
    shots: int
    n_train: int
    n_test: int
    N_q: int
    L_E: int
    L_D: int
    L_M: int
    training_gates: int
    ttt_gates: int
    measured_ratio: float
    asymptotic_ratio: float

    def to_dict(self) -> dict:
        return {
            "shots": self.shots,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "N_q": self.N_q,
            "L_E": self.L_E,
            "L_D": self.L_D,
            "L_M": self.L_M,
            "training_gates": self.training_gates,
            "ttt_gates": self.ttt_gates,
            "measured_ratio": self.measured_ratio,
            "asymptotic_ratio": self.asymptotic_ratio,
        }


def grid_rows(n_angles: int, n_fd_features: int) -> int:
    """Circuit evaluations per datum: base + two shifts per angle + two FD rows."""
    return 1 + 2 * n_angles + 2 * n_fd_features


def count_gates(
    arch: ArchitectureConfig, n_train: int, n_test: int, shots: int = 1
) -> GateCountReport:
    """Gate applications of one full training-gradient pass vs one TTT pass.

    Mirrors exactly what the batched gradient code evaluates (noise-free);
    the instrumented counter of a real pass must reproduce these numbers.
    """
    params = QtttParams.zeros(arch)
    main = _engine.main_program(arch)
    qae = _engine.qae_program(arch)
    k_mt = len(_angle_indices(params, ("theta_E", "theta_M"), main))
    k_ae = len(_angle_indices(params, ("theta_E", "theta_D"), qae))
    per_datum_train = grid_rows(k_mt, arch.d_x) * main.gates_per_forward(False) + grid_rows(
        k_ae, arch.d_x
    ) * qae.gates_per_forward(False)
    per_datum_ttt = grid_rows(k_ae, arch.d_x) * qae.gates_per_forward(False)
    training = shots * n_train * per_datum_train
    ttt = shots * n_test * per_datum_ttt
    asym = (n_test / n_train) * (arch.L_E + arch.L_D) ** 2 / (arch.L_E + arch.L_D + arch.L_M) ** 2
    return GateCountReport(
        shots=shots,
        n_train=n_train,
        n_test=n_test,
        N_q=arch.N_q,
        L_E=arch.L_E,
        L_D=arch.L_D,
        L_M=arch.L_M,
        training_gates=training,
        ttt_gates=ttt,
        measured_ratio=ttt / training,
        asymptotic_ratio=asym,
    )
