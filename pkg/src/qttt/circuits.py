"""Circuit topology: shared encoder, QAE decoder with trash-qubit SWAP, data
re-uploading main branch, and coherent noise injection.

Wire layout on N_q + N_t qubits: wires 0..N_q-1 are the data register
(amplitude-encoded), wires N_q..N_q+N_t-1 are the auxiliary reference
register prepared in |0>.  The SWAP block exchanges the last N_t data wires
(the trash qubits) with the auxiliary wires; it is applied in both branches.

Noise slots are enumerated one per layer repetition: encoder slots
0..L_E-1, decoder slots L_E..L_E+L_D-1, main-branch slots
L_E+L_D..L_E+L_D+L_M-1.  A realized NoiseSpec pins one rotation
(axis in {X,Y,Z}, angle in [0, eps)) per slot per data-register qubit and is
held fixed for a whole experiment.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .statevec import (
    GateOp,
    StateVector,
    amplitude_encode,
    apply_ops,
    ladder_ops,
)

SEGMENT_NAMES = ("theta_L", "theta_E", "theta_D", "theta_M", "alpha", "sigma")

_AXIS_GATE = {0: "rx", 1: "ry", 2: "rz"}
_AXIS_NAME = {0: "X", 1: "Y", 2: "Z"}


def derive_n_qubits(d_x: int) -> int:
    """Data-register size: max(ceil(d_x/3), ceil(log2 d_x))."""
    return max(math.ceil(d_x / 3), math.ceil(math.log2(d_x)) if d_x > 1 else 1)


@dataclass(frozen=True)
class ArchitectureConfig:
    d_x: int
    C: int = 2
    N_q: int = 0  # 0 means derive from d_x
    N_t: int = 0
    L_E: int = 4
    L_D: int = 4
    L_M: int = 4
    data_reupload: bool = True  # False: single data layer + plain variational layers

    def __post_init__(self):
        if self.N_q == 0:
            object.__setattr__(self, "N_q", derive_n_qubits(self.d_x))
        if self.d_x < 1:
            raise ValueError("d_x must be >= 1")
        if self.d_x > 2**self.N_q:
            raise ValueError(f"{self.d_x} features do not fit in {self.N_q} qubits")
        if not (2 <= self.C <= 6):
            raise ValueError("C must be in 2..6 (label-state table)")
        if not (0 <= self.N_t < self.N_q):
            raise ValueError("need 0 <= N_t < N_q")
        if min(self.L_E, self.L_D, self.L_M) < 1:
            raise ValueError("layer counts must be >= 1")

    @property
    def n_qubits(self) -> int:
        return self.N_q + self.N_t

    @property
    def n_data_layers(self) -> int:
        return self.L_M + 1 if self.data_reupload else 1

    @property
    def n_noise_slots(self) -> int:
        return self.L_E + self.L_D + self.L_M

    def segment_lengths(self) -> dict[str, int]:
        if self.data_reupload:
            theta_m = 3 * self.N_q * self.L_M + self.d_x * (self.L_M + 1)
        else:
            # same gate structure, but the data layers after the first carry
            # free angles instead of w * x' (controlled removal of re-uploading)
            theta_m = 3 * self.N_q * (2 * self.L_M) + self.d_x
        return {
            "theta_L": self.d_x * (self.d_x + 1),
            "theta_E": 3 * self.N_q * self.L_E,
            "theta_D": 3 * self.N_q * self.L_D,
            "theta_M": theta_m,
            "alpha": self.C * self.N_q,
            "sigma": 2,
        }

    def to_dict(self) -> dict:
        return {
            "d_x": self.d_x,
            "C": self.C,
            "N_q": self.N_q,
            "N_t": self.N_t,
            "L_E": self.L_E,
            "L_D": self.L_D,
            "L_M": self.L_M,
            "data_reupload": self.data_reupload,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


class QtttParams:
    """All trainable parameters as one flat vector with named segments.

    Layout: [theta_L | theta_E | theta_D | theta_M | alpha | sigma] with
      theta_L = [Flatten(M), b]                       (d_x*(d_x+1))
      theta_E = per layer, per qubit, (theta,phi,lam) (3*N_q*L_E)
      theta_D = same shape as theta_E for the decoder
      theta_M = interleaved [phi_1, w_1, ..., phi_L, w_L, w_{L+1}] where each
                phi_l has 3*N_q variational angles and each w_l has d_x
                data weights; without re-uploading the data slots after the
                first hold free angles: [phi_1, w_1, phi_2, v_2, ..., v_final]
      alpha   = class weights, row-major (C, N_q)
      sigma   = (s_MT, s_AE) stored as log(sigma) so sigma = exp(s) > 0
    """

    def __init__(self, arch: ArchitectureConfig, values: np.ndarray):
        self.arch = arch
        values = np.asarray(values, dtype=np.float64)
        total = sum(arch.segment_lengths().values())
        if values.shape != (total,):
            raise ValueError(f"flat vector has shape {values.shape}, expected ({total},)")
        self.values = values

    # -- segment addressing -------------------------------------------------
    def seg_slice(self, name: str) -> slice:
        lengths = self.arch.segment_lengths()
        if name not in lengths:
            raise KeyError(f"unknown segment {name!r}")
        start = 0
        for seg in SEGMENT_NAMES:
            if seg == name:
                return slice(start, start + lengths[seg])
            start += lengths[seg]
        raise AssertionError

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.seg_slice(name)]

    def segment_map(self) -> dict[str, list[int]]:
        out = {}
        for name in SEGMENT_NAMES:
            s = self.seg_slice(name)
            out[name] = [s.start, s.stop - s.start]
        return out

    def copy(self) -> "QtttParams":
        return QtttParams(self.arch, self.values.copy())

    # -- derived views ------------------------------------------------------
    @property
    def linear_map(self) -> np.ndarray:
        d = self.arch.d_x
        return self.segment("theta_L")[: d * d].reshape(d, d)

    @property
    def linear_bias(self) -> np.ndarray:
        d = self.arch.d_x
        return self.segment("theta_L")[d * d :]

    @property
    def alpha(self) -> np.ndarray:
        return self.segment("alpha").reshape(self.arch.C, self.arch.N_q)

    @property
    def sigma(self) -> np.ndarray:
        """(sigma_MT, sigma_AE), recovered as exp of the stored logs."""
        return np.exp(self.segment("sigma"))

    def encoder_layer(self, l: int) -> np.ndarray:
        """Angles of encoder layer l as an (N_q, 3) view."""
        nq = self.arch.N_q
        seg = self.segment("theta_E")
        return seg[3 * nq * l : 3 * nq * (l + 1)].reshape(nq, 3)

    def decoder_layer(self, l: int) -> np.ndarray:
        nq = self.arch.N_q
        seg = self.segment("theta_D")
        return seg[3 * nq * l : 3 * nq * (l + 1)].reshape(nq, 3)

    def _theta_m_offsets(self, l: int) -> tuple[int, int]:
        """(phi_l offset, data-slot offset) inside theta_M; l in 0..L_M-1.

        Re-uploading layout: [phi_1, w_1, ..., phi_L, w_L, w_{L+1}].
        Without re-uploading the data slots after the first hold free angles:
        [phi_1, w_1, phi_2, v_2, ..., phi_L, v_L, v_final].
        """
        nq, dx = self.arch.N_q, self.arch.d_x
        if self.arch.data_reupload:
            per_layer = 3 * nq + dx
            return per_layer * l, per_layer * l + 3 * nq
        if l == 0:
            return 0, 3 * nq
        base = 3 * nq + dx + (l - 1) * 6 * nq
        return base, base + 3 * nq

    def variational_layer(self, l: int) -> np.ndarray:
        off, _ = self._theta_m_offsets(l)
        return self.segment("theta_M")[off : off + 3 * self.arch.N_q].reshape(
            self.arch.N_q, 3
        )

    def data_weights(self, l: int) -> np.ndarray:
        """w_l for data layer l (0-based; l = L_M is the closing layer)."""
        arch = self.arch
        if not arch.data_reupload:
            if l != 0:
                raise IndexError("single data layer when re-uploading is off")
            return self.segment("theta_M")[3 * arch.N_q : 3 * arch.N_q + arch.d_x]
        if l < arch.L_M:
            _, off = self._theta_m_offsets(l)
        else:
            off = (3 * arch.N_q + arch.d_x) * arch.L_M
        return self.segment("theta_M")[off : off + arch.d_x]

    def free_data_layer(self, l: int) -> np.ndarray:
        """Free angles replacing data layer l (1..L_M) when re-uploading is off."""
        arch = self.arch
        if arch.data_reupload:
            raise IndexError("free data layers exist only without re-uploading")
        if not 1 <= l <= arch.L_M:
            raise IndexError(f"free data layer index {l} out of range")
        if l < arch.L_M:
            _, off = self._theta_m_offsets(l)
        else:
            off = 3 * arch.N_q + arch.d_x + (arch.L_M - 1) * 6 * arch.N_q
        return self.segment("theta_M")[off : off + 3 * arch.N_q].reshape(arch.N_q, 3)

    # -- construction / IO ----------------------------------------------------
    @classmethod
    def zeros(cls, arch: ArchitectureConfig) -> "QtttParams":
        p = cls(arch, np.zeros(sum(arch.segment_lengths().values())))
        d = arch.d_x
        p.values[p.seg_slice("theta_L")][: d * d] = np.eye(d).ravel()
        p.values[p.seg_slice("alpha")] = 1.0
        return p

    @classmethod
    def init(cls, arch: ArchitectureConfig, seed: int) -> "QtttParams":
        """Random init: identity linear layer, angles ~ Unif(-pi, pi), data
        weights ~ N(0,1), alpha = 1, log-sigma = 0."""
        rng = np.random.default_rng(seed)
        p = cls.zeros(arch)
        for name in ("theta_E", "theta_D"):
            sl = p.seg_slice(name)
            p.values[sl] = rng.uniform(-np.pi, np.pi, sl.stop - sl.start)
        sl = p.seg_slice("theta_M")
        theta_m = np.zeros(sl.stop - sl.start)
        nq, dx = arch.N_q, arch.d_x
        if arch.data_reupload:
            per = 3 * nq + dx
            for l in range(arch.L_M):
                theta_m[per * l : per * l + 3 * nq] = rng.uniform(-np.pi, np.pi, 3 * nq)
                theta_m[per * l + 3 * nq : per * (l + 1)] = rng.normal(0.0, 1.0, dx)
            theta_m[per * arch.L_M :] = rng.normal(0.0, 1.0, dx)
        else:
            theta_m[:] = rng.uniform(-np.pi, np.pi, theta_m.size)
            theta_m[3 * nq : 3 * nq + dx] = rng.normal(0.0, 1.0, dx)  # w_1
        p.values[sl] = theta_m
        return p

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "arch": self.arch.to_dict(),
            "values": self.values.tolist(),
            "segments": self.segment_map(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QtttParams":
        if d.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        arch = ArchitectureConfig.from_dict(d["arch"])
        p = cls(arch, np.array(d["values"], dtype=np.float64))
        if d.get("segments") != p.segment_map():
            raise ValueError("checkpoint segment map does not match architecture")
        return p


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """One fixed realization of coherent rotation noise.

    axes[slot, qubit] in {0,1,2} (X/Y/Z, equal probability), angles[slot,
    qubit] = epsilon_theta * Unif(0,1) draws.  Same seed => same axes and the
    same unit draws, so the realization scales linearly in epsilon_theta.
    """

    epsilon_theta: float
    seed: int
    axes: np.ndarray
    angles: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.axes.shape[0]

    def realization(self) -> list[tuple[int, int, str, float]]:
        """(layer slot, qubit, axis name, angle) tuples, one per slot x qubit."""
        out = []
        for s in range(self.axes.shape[0]):
            for q in range(self.axes.shape[1]):
                out.append((s, q, _AXIS_NAME[int(self.axes[s, q])], float(self.angles[s, q])))
        return out

    def slot_ops(self, slot: int) -> list[GateOp]:
        return [
            GateOp(
                _AXIS_GATE[int(self.axes[slot, q])],
                (q,),
                (float(self.angles[slot, q]),),
                origin=f"noise/slot{slot}/q{q}",
            )
            for q in range(self.axes.shape[1])
        ]


def realize_noise(arch: ArchitectureConfig, epsilon_theta: float, seed: int) -> NoiseSpec:
    if epsilon_theta < 0:
        raise ValueError("epsilon_theta must be >= 0")
    rng = np.random.default_rng(seed)
    shape = (arch.n_noise_slots, arch.N_q)
    axes = rng.integers(0, 3, size=shape)
    angles = epsilon_theta * rng.random(size=shape)
    return NoiseSpec(epsilon_theta, seed, axes, angles)


def linear_preprocess(x: np.ndarray, params: QtttParams) -> np.ndarray:
    """x' = M x + b."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.arch.d_x,):
        raise ValueError(f"feature vector has shape {x.shape}, expected ({params.arch.d_x},)")
    return params.linear_map @ x + params.linear_bias


# ---------------------------------------------------------------------------
# Gate-list builders (the reference execution path, and the JSON export)
# ---------------------------------------------------------------------------

def _u3_layer_ops(angles: np.ndarray, origin: str) -> list[GateOp]:
    return [
        GateOp("u3", (q,), tuple(float(a) for a in angles[q]), origin=f"{origin}/q{q}")
        for q in range(angles.shape[0])
    ]


def data_layer_angles(w: np.ndarray, x_prime: np.ndarray, n_q: int) -> np.ndarray:
    """(N_q, 3) angles: (w * x') grouped three per qubit, zero-padded."""
    prod = np.zeros(3 * n_q)
    prod[: w.size] = w * x_prime
    return prod.reshape(n_q, 3)


def _noise_ops(noise: NoiseSpec | None, slot: int) -> list[GateOp]:
    return noise.slot_ops(slot) if noise is not None else []


def _swap_ops(arch: ArchitectureConfig) -> list[GateOp]:
    return [
        GateOp("swap", (arch.N_q - arch.N_t + k, arch.N_q + k), origin=f"swap/t{k}")
        for k in range(arch.N_t)
    ]


def encoder_ops(
    params: QtttParams, noise: NoiseSpec | None = None, *, include_swap: bool = True
) -> list[GateOp]:
    arch = params.arch
    qubits = list(range(arch.N_q))
    ops: list[GateOp] = []
    for l in range(arch.L_E):
        ops += _u3_layer_ops(params.encoder_layer(l), f"encoder/layer{l}/u3")
        ops += [
            GateOp(g.kind, g.qubits, origin=f"encoder/layer{l}/entangle")
            for g in ladder_ops(qubits)
        ]
        ops += _noise_ops(noise, l)
    if include_swap:
        ops += _swap_ops(arch)
    return ops


def decoder_ops(params: QtttParams, noise: NoiseSpec | None = None) -> list[GateOp]:
    arch = params.arch
    qubits = list(range(arch.N_q))
    ops: list[GateOp] = []
    for l in range(arch.L_D):
        ops += _u3_layer_ops(params.decoder_layer(l), f"decoder/layer{l}/u3")
        ops += [
            GateOp(g.kind, g.qubits, origin=f"decoder/layer{l}/entangle")
            for g in ladder_ops(qubits)
        ]
        ops += _noise_ops(noise, arch.L_E + l)
    return ops


def reupload_ops(
    x_prime: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> list[GateOp]:
    """The main-task block after the shared encoder.

    Default: L_M repetitions of [variational U3 layer; data U3 layer +
    ladder entangler], closed by the final data layer without an entangler.
    With data_reupload off: one data layer + entangler, then L_M plain
    variational U3 layers.
    """
    arch = params.arch
    qubits = list(range(arch.N_q))
    slot0 = arch.L_E + arch.L_D
    ops: list[GateOp] = []
    if arch.data_reupload:
        for l in range(arch.L_M):
            ops += _u3_layer_ops(params.variational_layer(l), f"reupload/layer{l}/u3")
            ops += _u3_layer_ops(
                data_layer_angles(params.data_weights(l), x_prime, arch.N_q),
                f"reupload/layer{l}/data",
            )
            ops += [
                GateOp(g.kind, g.qubits, origin=f"reupload/layer{l}/entangle")
                for g in ladder_ops(qubits)
            ]
            ops += _noise_ops(noise, slot0 + l)
        ops += _u3_layer_ops(
            data_layer_angles(params.data_weights(arch.L_M), x_prime, arch.N_q),
            "reupload/final/data",
        )
    else:
        for l in range(arch.L_M):
            ops += _u3_layer_ops(params.variational_layer(l), f"reupload/layer{l}/u3")
            if l == 0:
                ops += _u3_layer_ops(
                    data_layer_angles(params.data_weights(0), x_prime, arch.N_q),
                    "reupload/layer0/data",
                )
            else:
                ops += _u3_layer_ops(params.free_data_layer(l), f"reupload/layer{l}/u3b")
            ops += [
                GateOp(g.kind, g.qubits, origin=f"reupload/layer{l}/entangle")
                for g in ladder_ops(qubits)
            ]
            ops += _noise_ops(noise, slot0 + l)
        ops += _u3_layer_ops(params.free_data_layer(arch.L_M), "reupload/final/u3b")
    return ops


def gate_list_json(ops: list[GateOp]) -> list[dict]:
    return [g.to_dict() for g in ops]


# ---------------------------------------------------------------------------
# Reference runners (single state; the batched engine cross-checks these)
# ---------------------------------------------------------------------------

def initial_state(x_prime: np.ndarray, arch: ArchitectureConfig) -> StateVector:
    """Amplitude-encode x' on the N_q data qubits; aux register stays |0>."""
    data = amplitude_encode(x_prime, arch.N_q)
    if arch.N_t == 0:
        return data
    amps = np.zeros(2**arch.n_qubits, dtype=np.complex128)
    amps[:: 2**arch.N_t] = data.amplitudes
    return StateVector(arch.n_qubits, amps)


def run_encoder(
    x_prime: np.ndarray,
    params: QtttParams,
    noise: NoiseSpec | None = None,
    *,
    include_swap: bool = True,
) -> StateVector:
    state = initial_state(x_prime, params.arch)
    return apply_ops(state, encoder_ops(params, noise, include_swap=include_swap))


def run_decoder(
    encoded: StateVector, params: QtttParams, noise: NoiseSpec | None = None
) -> StateVector:
    if encoded.n_qubits != params.arch.n_qubits:
        raise ValueError("encoded state has wrong qubit count")
    return apply_ops(encoded, decoder_ops(params, noise))


def run_main_branch(
    x_prime: np.ndarray, params: QtttParams, noise: NoiseSpec | None = None
) -> StateVector:
    state = run_encoder(x_prime, params, noise)
    return apply_ops(state, reupload_ops(x_prime, params, noise))
