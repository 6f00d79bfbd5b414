"""Batched circuit evaluation.

The public single-state path in `statevec`/`circuits` is the readable
reference; everything hot (training, shift-rule sweeps, dataset evaluation)
runs here on a (sample x variant) grid of independent circuit evaluations.

The grid exploits the structure of a gradient pass: most variants share the
base angles, so each U3 layer is applied as one constant (or per-sample, for
data layers) 2^N_q-dimensional operator, and only the few rows whose shifted
angle lives in that layer are recomputed from their pre-layer state.  CNOT
ladders and trash-qubit SWAPs are basis permutations, noise slots are fixed
single-qubit rotations, so both collapse to cached constant operations.
theta_L derivatives enter as finite-difference rows on the *bias* (an exact
probe of x', since x' = Mx + b), chained analytically onto M afterwards.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .circuits import ArchitectureConfig, NoiseSpec, SEGMENT_NAMES
from .statevec import DegenerateInputError


class GateCounter:
    """Counts logical gate applications: one per gate per evaluated circuit."""

    def __init__(self):
        self.total = 0

    def add(self, n: int):
        self.total += n


def segment_offsets(arch: ArchitectureConfig) -> dict[str, int]:
    lengths = arch.segment_lengths()
    out, start = {}, 0
    for name in SEGMENT_NAMES:
        out[name] = start
        start += lengths[name]
    return out


# ---------------------------------------------------------------------------
# program lowering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _U3Step:
    param_idx: tuple      # (N_q, 3) flat param indices, -1 for fixed-zero angles
    is_data: bool         # angles get multiplied by gathered x' features
    x_idx: tuple | None   # (N_q, 3) feature indices for data layers
    col_base: int         # first angle column of this layer


@dataclass(frozen=True)
class _PermStep:
    kind: str             # ladder | swap
    n_gates: int
    data_perm: tuple | None   # permutation of the 2^N_q data axis (ladder)
    full_perm: tuple | None   # permutation of the full 2^n basis (swap)


@dataclass(frozen=True)
class _NoiseStep:
    slot: int


@dataclass
class BranchProgram:
    """A branch circuit lowered to index arrays over the flat parameter vector."""

    arch: ArchitectureConfig
    steps: tuple
    n_angle_cols: int
    angle_col_of_param: dict[int, int]  # flat param index -> angle column
    data_x_of_param: dict[int, int]     # flat w index -> feature index (chain factor)
    col_step: dict[int, int]            # angle column -> index into steps

    def gates_per_forward(self, with_noise: bool) -> int:
        arch, n = self.arch, 0
        for s in self.steps:
            if isinstance(s, _U3Step):
                n += arch.N_q
            elif isinstance(s, _PermStep):
                n += s.n_gates
            elif isinstance(s, _NoiseStep) and with_noise:
                n += arch.N_q
        return n


def _ladder_perm(n_q: int) -> tuple:
    """Basis permutation of CNOT(0->1)...CNOT(k-1->0) on n_q bits (bit 0 = MSB)."""
    idx = np.arange(2**n_q)
    pairs = [(i, i + 1) for i in range(n_q - 1)] + [(n_q - 1, 0)]
    out = np.arange(2**n_q)
    for c, t in pairs:
        cbit = (out >> (n_q - 1 - c)) & 1
        out = out ^ (cbit << (n_q - 1 - t))
    # state'[j] = state[pre[j]] where pre is the inverse map of out
    pre = np.empty_like(idx)
    pre[out] = idx
    return tuple(int(v) for v in pre)


def _swap_perm(arch: ArchitectureConfig) -> tuple:
    n = arch.n_qubits
    idx = np.arange(2**n)
    out = idx.copy()
    for k in range(arch.N_t):
        a, b = arch.N_q - arch.N_t + k, arch.N_q + k
        abit = (out >> (n - 1 - a)) & 1
        bbit = (out >> (n - 1 - b)) & 1
        diff = abit ^ bbit
        out = out ^ (diff << (n - 1 - a)) ^ (diff << (n - 1 - b))
    pre = np.empty_like(idx)
    pre[out] = idx
    return tuple(int(v) for v in pre)


def _u3_layer(param_base: int, nq: int, col: int) -> _U3Step:
    idx = tuple(tuple(param_base + 3 * q + k for k in range(3)) for q in range(nq))
    return _U3Step(idx, False, None, col)


def _data_layer(w_base: int, dx: int, nq: int, col: int) -> _U3Step:
    pidx, xidx = [], []
    for q in range(nq):
        prow, xrow = [], []
        for k in range(3):
            j = 3 * q + k
            prow.append(w_base + j if j < dx else -1)
            xrow.append(j if j < dx else -1)
        pidx.append(tuple(prow))
        xidx.append(tuple(xrow))
    return _U3Step(tuple(pidx), True, tuple(xidx), col)


def _build(arch: ArchitectureConfig, branch: str) -> BranchProgram:
    off = segment_offsets(arch)
    nq, dx = arch.N_q, arch.d_x
    steps: list = []
    col = 0
    angle_col: dict[int, int] = {}
    data_x: dict[int, int] = {}
    col_step: dict[int, int] = {}
    ladder = _PermStep("ladder", nq, _ladder_perm(nq), None)
    swap = (
        _PermStep("swap", arch.N_t, None, _swap_perm(arch)) if arch.N_t else None
    )

    def push_u3(step: _U3Step):
        nonlocal col
        for q in range(nq):
            for k in range(3):
                p = step.param_idx[q][k]
                if p >= 0:
                    angle_col[p] = step.col_base + 3 * q + k
                    if step.is_data:
                        data_x[p] = step.x_idx[q][k]
                col_step[step.col_base + 3 * q + k] = len(steps)
        steps.append(step)
        col += 3 * nq

    for l in range(arch.L_E):
        push_u3(_u3_layer(off["theta_E"] + 3 * nq * l, nq, col))
        steps.append(ladder)
        steps.append(_NoiseStep(l))
    if swap:
        steps.append(swap)

    if branch == "qae":
        for l in range(arch.L_D):
            push_u3(_u3_layer(off["theta_D"] + 3 * nq * l, nq, col))
            steps.append(ladder)
            steps.append(_NoiseStep(arch.L_E + l))
    elif branch == "main":
        slot0 = arch.L_E + arch.L_D
        tm = off["theta_M"]
        if arch.data_reupload:
            per = 3 * nq + dx
            for l in range(arch.L_M):
                push_u3(_u3_layer(tm + per * l, nq, col))
                push_u3(_data_layer(tm + per * l + 3 * nq, dx, nq, col))
                steps.append(ladder)
                steps.append(_NoiseStep(slot0 + l))
            push_u3(_data_layer(tm + per * arch.L_M, dx, nq, col))
        else:
            # identical gate structure; data layers beyond the first are free
            for l in range(arch.L_M):
                if l == 0:
                    push_u3(_u3_layer(tm, nq, col))
                    push_u3(_data_layer(tm + 3 * nq, dx, nq, col))
                else:
                    base = 3 * nq + dx + (l - 1) * 6 * nq
                    push_u3(_u3_layer(tm + base, nq, col))
                    push_u3(_u3_layer(tm + base + 3 * nq, nq, col))
                steps.append(ladder)
                steps.append(_NoiseStep(slot0 + l))
            push_u3(_u3_layer(tm + 3 * nq + dx + (arch.L_M - 1) * 6 * nq, nq, col))
    else:
        raise ValueError(f"unknown branch {branch!r}")

    return BranchProgram(arch, tuple(steps), col, angle_col, data_x, col_step)


@lru_cache(maxsize=None)
def qae_program(arch: ArchitectureConfig) -> BranchProgram:
    return _build(arch, "qae")


@lru_cache(maxsize=None)
def main_program(arch: ArchitectureConfig) -> BranchProgram:
    return _build(arch, "main")


# ---------------------------------------------------------------------------
# small linear-algebra kernels
# ---------------------------------------------------------------------------

def u3_mats(ang: np.ndarray) -> np.ndarray:
    """(..., 3) angles -> (..., 2, 2) matrices of RZ(phi) RY(theta) RZ(lam)."""
    t, p, l = ang[..., 0], ang[..., 1], ang[..., 2]
    c, s = np.cos(t / 2), np.sin(t / 2)
    a = np.exp(-0.5j * (p + l))
    b = np.exp(-0.5j * (p - l))
    out = np.empty(ang.shape[:-1] + (2, 2), dtype=np.complex128)
    out[..., 0, 0] = a * c
    out[..., 0, 1] = -b * s
    out[..., 1, 0] = b.conjugate() * s
    out[..., 1, 1] = a.conjugate() * c
    return out


def kron_chain(mats: np.ndarray) -> np.ndarray:
    """(..., n_q, 2, 2) per-qubit matrices -> (..., 2^n_q, 2^n_q) tensor product."""
    k = mats[..., 0, :, :]
    dim = 2
    for q in range(1, mats.shape[-3]):
        k = np.einsum("...ij,...kl->...ikjl", k, mats[..., q, :, :]).reshape(
            mats.shape[:-3] + (dim * 2, dim * 2)
        )
        dim *= 2
    return k


_PAULI_ROT = {
    0: lambda t: np.array(
        [[np.cos(t / 2), -1j * np.sin(t / 2)], [-1j * np.sin(t / 2), np.cos(t / 2)]],
        dtype=np.complex128,
    ),
    1: lambda t: np.array(
        [[np.cos(t / 2), -np.sin(t / 2)], [np.sin(t / 2), np.cos(t / 2)]],
        dtype=np.complex128,
    ),
    2: lambda t: np.array(
        [[np.exp(-0.5j * t), 0], [0, np.exp(0.5j * t)]], dtype=np.complex128
    ),
}


def _noise_kron(noise: NoiseSpec, slot: int, n_q: int) -> np.ndarray:
    mats = np.stack([
        _PAULI_ROT[int(noise.axes[slot, q])](float(noise.angles[slot, q]))
        for q in range(n_q)
    ])
    return kron_chain(mats[None])[0]


_NOISE_CACHE: "weakref.WeakKeyDictionary[NoiseSpec, dict]" = weakref.WeakKeyDictionary()


def _noise_kron_cached(noise: NoiseSpec, slot: int, n_q: int) -> np.ndarray:
    per_spec = _NOISE_CACHE.setdefault(noise, {})
    key = (slot, n_q)
    k = per_spec.get(key)
    if k is None:
        k = _noise_kron(noise, slot, n_q)
        per_spec[key] = k
    return k


# ---------------------------------------------------------------------------
# grid evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Variant axis of a gradient pass.

    Variant order: [base, one row per (angle column, delta) in `shifts`,
    then (+h, -h) rows per feature index in `fd_features`].
    """

    shifts: tuple              # ((col, delta), ...)
    fd_features: tuple = ()    # feature indices probed by bias FD
    fd_step: float = 1e-5

    @property
    def n_variants(self) -> int:
        return 1 + len(self.shifts) + 2 * len(self.fd_features)


def _encode(xp: np.ndarray, arch: ArchitectureConfig) -> np.ndarray:
    """(R, d_x) -> (R, 2^N_q, 2^N_t) initial states (aux register |0>)."""
    r, dx = xp.shape
    norms = np.linalg.norm(xp, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError("amplitude encoding got an all-zero preprocessed vector")
    state = np.zeros((r, 2**arch.N_q, 2**arch.N_t), dtype=np.complex128)
    state[:, :dx, 0] = xp / norms[:, None]
    return state


def _layer_base_angles(step: _U3Step, params: np.ndarray, xp: np.ndarray | None) -> np.ndarray:
    """Base angles; (N_q, 3) for parameter layers, (S, N_q, 3) for data layers."""
    pidx = np.asarray(step.param_idx)
    ang = params[np.where(pidx < 0, 0, pidx)] * (pidx >= 0)
    if step.is_data:
        xidx = np.asarray(step.x_idx)
        feat = xp[:, np.where(xidx < 0, 0, xidx)] * (xidx >= 0)
        ang = ang[None] * feat
    return ang


def _apply_big(state: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Apply a 2^N_q operator to the data axis of (..., 2^N_q, 2^N_t) states."""
    if k.ndim == 2:
        return np.einsum("ij,...jt->...it", k, state)
    if k.ndim == 3 and state.ndim == 4:  # per-sample operator on (S, V, D, T)
        return np.einsum("sij,svjt->svit", k, state)
    return np.einsum("...ij,...jt->...it", k, state)


def run_grid(
    program: BranchProgram,
    xp_base: np.ndarray,
    params: np.ndarray,
    grid: GridSpec | None = None,
    noise: NoiseSpec | None = None,
    counter: GateCounter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the (sample, variant) grid.

    Returns (states (S, V, 2^n), xp (S, V, d_x)); V follows GridSpec order.
    """
    arch = program.arch
    s_n, dx = xp_base.shape
    nq, nt = arch.N_q, arch.N_t
    dim_d, dim_t = 2**nq, 2**nt
    shifts = grid.shifts if grid else ()
    fd_feats = grid.fd_features if grid else ()
    va = 1 + len(shifts)
    vb = 2 * len(fd_feats)

    # deviating variants per u3 step: step index -> [(variant, qubit, comp, delta)]
    devs: dict[int, list] = {}
    for i, (col, delta) in enumerate(shifts):
        step_i = program.col_step[col]
        step = program.steps[step_i]
        rel = col - step.col_base
        devs.setdefault(step_i, []).append((1 + i, rel // 3, rel % 3, delta))

    # ---- part A: base encoding, sparse angle deviations ----
    state_a = np.broadcast_to(_encode(xp_base, arch)[:, None], (s_n, va, dim_d, dim_t)).copy()
    for si, step in enumerate(program.steps):
        if isinstance(step, _U3Step):
            base_ang = _layer_base_angles(step, params, xp_base if step.is_data else None)
            dev = devs.get(si, ())
            pre = state_a[:, [v for v, *_ in dev]].copy() if dev else None
            k = kron_chain(u3_mats(base_ang))
            state_a = _apply_big(state_a, k)
            if dev:
                m_n = len(dev)
                v_idx = [v for v, *_ in dev]
                q_idx = np.array([q for _, q, _, _ in dev])
                c_idx = np.array([c for _, _, c, _ in dev])
                deltas = np.array([d for *_, d in dev])
                if step.is_data:  # base angles vary per sample
                    ang = np.broadcast_to(base_ang[:, None], (s_n, m_n, nq, 3)).copy()
                    ang[:, np.arange(m_n), q_idx, c_idx] += deltas
                    kd = kron_chain(u3_mats(ang))            # (S, M, D, D)
                    state_a[:, v_idx] = np.einsum("smij,smjt->smit", kd, pre)
                else:
                    ang = np.broadcast_to(base_ang, (m_n, nq, 3)).copy()
                    ang[np.arange(m_n), q_idx, c_idx] += deltas
                    kd = kron_chain(u3_mats(ang))            # (M, D, D)
                    state_a[:, v_idx] = np.einsum("mij,smjt->smit", kd, pre)
            if counter:
                counter.add(s_n * va * nq)
        elif isinstance(step, _PermStep):
            if step.data_perm is not None:
                state_a = state_a[:, :, step.data_perm, :]
            else:
                flat = state_a.reshape(s_n, va, dim_d * dim_t)
                state_a = flat[:, :, step.full_perm].reshape(s_n, va, dim_d, dim_t)
            if counter:
                counter.add(s_n * va * step.n_gates)
        elif isinstance(step, _NoiseStep) and noise is not None:
            state_a = _apply_big(state_a, _noise_kron_cached(noise, step.slot, nq))
            if counter:
                counter.add(s_n * va * nq)

    xp_a = np.broadcast_to(xp_base[:, None], (s_n, va, dx))
    if vb == 0:
        return state_a, xp_a.copy()

    # ---- part B: bias-perturbed rows (full per-row evaluation) ----
    h = grid.fd_step
    xp_b = np.broadcast_to(xp_base[:, None], (s_n, vb, dx)).copy()
    for j, feat in enumerate(fd_feats):
        xp_b[:, 2 * j, feat] += h
        xp_b[:, 2 * j + 1, feat] -= h
    rows = xp_b.reshape(s_n * vb, dx)
    state_b = _encode(rows, arch)
    for step in program.steps:
        if isinstance(step, _U3Step):
            ang = _layer_base_angles(step, params, rows if step.is_data else None)
            k = kron_chain(u3_mats(ang))
            state_b = _apply_big(state_b, k)
            if counter:
                counter.add(rows.shape[0] * nq)
        elif isinstance(step, _PermStep):
            if step.data_perm is not None:
                state_b = state_b[:, step.data_perm, :]
            else:
                flat = state_b.reshape(-1, dim_d * dim_t)
                state_b = flat[:, step.full_perm].reshape(-1, dim_d, dim_t)
            if counter:
                counter.add(rows.shape[0] * step.n_gates)
        elif isinstance(step, _NoiseStep) and noise is not None:
            state_b = _apply_big(state_b, _noise_kron_cached(noise, step.slot, nq))
            if counter:
                counter.add(rows.shape[0] * nq)

    states = np.concatenate([state_a, state_b.reshape(s_n, vb, dim_d, dim_t)], axis=1)
    xp_all = np.concatenate([xp_a, xp_b], axis=1)
    return states, xp_all


# ---------------------------------------------------------------------------
# observables
# ---------------------------------------------------------------------------

def qae_losses(states: np.ndarray, xps: np.ndarray) -> np.ndarray:
    """1 - <x'|rho_data|x'> per row; the target re-encodes each row's own x'.

    states: (..., 2^N_q, 2^N_t), xps: (..., d_x); returns (...)."""
    dx = xps.shape[-1]
    dim_d = states.shape[-2]
    target = np.zeros(xps.shape[:-1] + (dim_d,))
    target[..., :dx] = xps / np.linalg.norm(xps, axis=-1, keepdims=True)
    overlap = np.einsum("...d,...dt->...t", target, states)
    fid = np.sum(np.abs(overlap) ** 2, axis=-1)
    return 1.0 - np.clip(fid, 0.0, 1.0)


def class_fidelity_rows(states: np.ndarray, label_states: np.ndarray, arch: ArchitectureConfig) -> np.ndarray:
    """f[..., c, q] = Tr[rho_c rho_q] over the N_q data qubits.

    states: (..., 2^N_q, 2^N_t)."""
    lead = states.shape[:-2]
    flat = states.reshape((-1,) + states.shape[-2:])
    r = flat.shape[0]
    f = np.empty((r, label_states.shape[0], arch.N_q))
    for q in range(arch.N_q):
        sq = flat.reshape(r, 1 << q, 2, -1)
        rho = np.einsum("raib,rajb->rij", sq, sq.conj())
        f[:, :, q] = np.real(np.einsum("cij,rji->rc", label_states, rho))
    return np.clip(f, 0.0, 1.0).reshape(lead + (label_states.shape[0], arch.N_q))
