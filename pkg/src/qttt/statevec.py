"""Dense state-vector simulator: gates, amplitude encoding, reduced densities, fidelities.

Conventions (fixed once, here):
  * qubit 0 is the most significant bit of the basis index, i.e. basis state
    |b0 b1 ... b_{n-1}> lives at index sum_q b_q * 2**(n-1-q).  This matches
    the top wire of a circuit diagram.
  * U3(theta, phi, lam) = RZ(phi) @ RY(theta) @ RZ(lam), global phase dropped,
    so every parameter is a plain Pauli-rotation angle.

Gates are applied by reshaping the amplitude vector and contracting 2x2
matrices over the target axis; no 2^n x 2^n matrices are ever built.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ATOL_NORM = 1e-10

GATE_KINDS = ("u3", "rx", "ry", "rz", "cnot", "swap")


class DegenerateInputError(ValueError):
    """Raised when an all-zero vector is handed to amplitude encoding."""


@dataclass(frozen=True)
class GateOp:
    """A single gate: rotation kinds carry angles, cnot/swap carry two qubits.

    qubits: (q,) for single-qubit kinds, (control, target) for cnot,
    (a, b) for swap.  angles: (theta, phi, lam) for u3, (theta,) for
    rx/ry/rz, () otherwise.
    """

    kind: str
    qubits: tuple[int, ...]
    angles: tuple[float, ...] = ()
    origin: str = ""

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ValueError(f"unknown gate kind {self.kind!r}")
        if self.kind in ("cnot", "swap"):
            if len(self.qubits) != 2:
                raise ValueError(f"{self.kind} needs two qubits, got {self.qubits}")
            if self.qubits[0] == self.qubits[1]:
                raise ValueError(f"{self.kind} qubits must be distinct, got {self.qubits}")
        elif len(self.qubits) != 1:
            raise ValueError(f"{self.kind} acts on one qubit, got {self.qubits}")
        n_ang = {"u3": 3, "rx": 1, "ry": 1, "rz": 1, "cnot": 0, "swap": 0}[self.kind]
        if len(self.angles) != n_ang:
            raise ValueError(f"{self.kind} takes {n_ang} angles, got {len(self.angles)}")

    def inverse(self) -> "GateOp":
        if self.kind == "u3":
            t, p, l = self.angles
            return GateOp("u3", self.qubits, (-t, -l, -p), self.origin)
        if self.kind in ("rx", "ry", "rz"):
            return GateOp(self.kind, self.qubits, (-self.angles[0],), self.origin)
        return self  # cnot and swap are self-inverse

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "qubits": list(self.qubits),
            "angles": list(self.angles),
            "origin": self.origin,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateOp":
        return cls(d["kind"], tuple(d["qubits"]), tuple(d["angles"]), d.get("origin", ""))


@dataclass
class StateVector:
    """Pure n-qubit state; amplitudes has length 2**n_qubits and unit norm."""

    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ValueError("need at least one qubit")
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (2**self.n_qubits,):
            raise ValueError(
                f"amplitude vector has length {self.amplitudes.shape}, "
                f"expected {2**self.n_qubits}"
            )
        norm = np.linalg.norm(self.amplitudes)
        if abs(norm - 1.0) > 1e-8:
            raise ValueError(f"state norm {norm} is not 1")

    @classmethod
    def zero(cls, n_qubits: int) -> "StateVector":
        amps = np.zeros(2**n_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(n_qubits, amps)

    @classmethod
    def from_bits(cls, bits: str) -> "StateVector":
        """Basis state from a bitstring, qubit 0 first ('10' -> |10>)."""
        n = len(bits)
        amps = np.zeros(2**n, dtype=np.complex128)
        amps[int(bits, 2)] = 1.0
        return cls(n, amps)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


@dataclass
class ReducedDensity:
    """Density matrix over n_qubits (Hermitian, unit trace, PSD)."""

    n_qubits: int
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.complex128)
        dim = 2**self.n_qubits
        if self.matrix.shape != (dim, dim):
            raise ValueError(f"matrix shape {self.matrix.shape}, expected ({dim},{dim})")
        if np.max(np.abs(self.matrix - self.matrix.conj().T)) > 1e-8:
            raise ValueError("density matrix is not Hermitian")
        tr = self.matrix.trace().real
        if abs(tr - 1.0) > 1e-8:
            raise ValueError(f"density matrix trace {tr} is not 1")


def _ry(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=np.complex128)


def _rz(theta: float) -> np.ndarray:
    e = np.exp(-0.5j * theta)
    return np.array([[e, 0], [0, e.conjugate()]], dtype=np.complex128)


def _rx(theta: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)


def u3_matrix(theta: float, phi: float, lam: float) -> np.ndarray:
    """RZ(phi) @ RY(theta) @ RZ(lam); covers SU(2) via the ZYZ Euler angles."""
    return _rz(phi) @ _ry(theta) @ _rz(lam)


def gate_matrix(g: GateOp) -> np.ndarray:
    if g.kind == "u3":
        return u3_matrix(*g.angles)
    if g.kind == "rx":
        return _rx(g.angles[0])
    if g.kind == "ry":
        return _ry(g.angles[0])
    if g.kind == "rz":
        return _rz(g.angles[0])
    raise ValueError(f"{g.kind} has no 2x2 matrix")


def _apply_1q(amps: np.ndarray, mat: np.ndarray, q: int) -> np.ndarray:
    """Contract a 2x2 matrix over axis q of the length-2^n amplitude vector."""
    a = amps.reshape(1 << q, 2, -1)
    return np.einsum("ij,ajb->aib", mat, a).reshape(-1)


def _apply_cnot(amps: np.ndarray, control: int, target: int, n: int) -> np.ndarray:
    s = amps.reshape([2] * n)
    out = s.copy()
    i1 = [slice(None)] * n
    i2 = [slice(None)] * n
    i1[control] = 1
    i2[control] = 1
    i1[target] = 0
    i2[target] = 1
    out[tuple(i1)] = s[tuple(i2)]
    out[tuple(i2)] = s[tuple(i1)]
    return out.reshape(-1)


def _apply_swap(amps: np.ndarray, a: int, b: int, n: int) -> np.ndarray:
    s = amps.reshape([2] * n)
    out = s.copy()
    i1 = [slice(None)] * n
    i2 = [slice(None)] * n
    i1[a] = 0
    i2[a] = 1
    i1[b] = 1
    i2[b] = 0
    out[tuple(i1)] = s[tuple(i2)]
    out[tuple(i2)] = s[tuple(i1)]
    return out.reshape(-1)


def apply_gate(state: StateVector, g: GateOp) -> StateVector:
    """Return U_g |psi> as a new state; the input is not mutated."""
    n = state.n_qubits
    for q in g.qubits:
        if not (0 <= q < n):
            raise IndexError(f"qubit {q} out of range for {n}-qubit state")
    if g.kind == "cnot":
        amps = _apply_cnot(state.amplitudes, g.qubits[0], g.qubits[1], n)
    elif g.kind == "swap":
        amps = _apply_swap(state.amplitudes, g.qubits[0], g.qubits[1], n)
    else:
        amps = _apply_1q(state.amplitudes, gate_matrix(g), g.qubits[0])
    return StateVector(n, amps)


def apply_ops(state: StateVector, ops: list[GateOp]) -> StateVector:
    for g in ops:
        state = apply_gate(state, g)
    return state


def ladder_ops(qubits: list[int] | tuple[int, ...]) -> list[GateOp]:
    """CNOT(q_i -> q_{i+1}) down the chain, then the wrap-around CNOT(q_last -> q_0)."""
    qs = list(qubits)
    if len(qs) < 2:
        raise ValueError("ladder entangler needs at least two qubits")
    ops = [GateOp("cnot", (qs[i], qs[i + 1])) for i in range(len(qs) - 1)]
    ops.append(GateOp("cnot", (qs[-1], qs[0])))
    return ops


def apply_ladder_entangler(state: StateVector, qubits: list[int]) -> StateVector:
    return apply_ops(state, ladder_ops(qubits))


def amplitude_encode(x: np.ndarray, n_qubits: int) -> StateVector:
    """Zero-pad x to length 2^n_qubits and normalize to a unit amplitude vector."""
    x = np.asarray(x, dtype=np.float64).ravel()
    dim = 2**n_qubits
    if x.size > dim:
        raise ValueError(f"{x.size} features do not fit in {n_qubits} qubits")
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise DegenerateInputError("cannot amplitude-encode an all-zero vector")
    amps = np.zeros(dim, dtype=np.complex128)
    amps[: x.size] = x / norm
    return StateVector(n_qubits, amps)


def partial_trace(state: StateVector, keep: list[int] | tuple[int, ...]) -> ReducedDensity:
    """Trace out everything but `keep` (axis order follows the keep list)."""
    keep = list(keep)
    n = state.n_qubits
    if not keep:
        raise ValueError("keep list must be non-empty")
    if len(set(keep)) != len(keep):
        raise ValueError("keep list has duplicates")
    for q in keep:
        if not (0 <= q < n):
            raise IndexError(f"qubit {q} out of range")
    rest = [q for q in range(n) if q not in keep]
    psi = state.amplitudes.reshape([2] * n)
    psi = np.transpose(psi, keep + rest)
    k = len(keep)
    psi = psi.reshape(2**k, -1)
    rho = psi @ psi.conj().T
    return ReducedDensity(k, rho)


def fidelity_pure(a: StateVector, b: StateVector) -> float:
    """|<a|b>|^2, clamped to [0, 1]."""
    if a.n_qubits != b.n_qubits:
        raise ValueError("qubit counts differ")
    f = abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2
    return float(min(max(f, 0.0), 1.0))


def fidelity_mixed(rho: ReducedDensity, sigma: ReducedDensity) -> float:
    """Relative fidelity Tr[rho sigma], clamped to [0, 1]."""
    if rho.n_qubits != sigma.n_qubits:
        raise ValueError("dimensions differ")
    val = np.trace(rho.matrix @ sigma.matrix)
    if abs(val.imag) > 1e-9:
        raise ValueError(f"Tr[rho sigma] has imaginary part {val.imag}")
    return float(min(max(val.real, 0.0), 1.0))
