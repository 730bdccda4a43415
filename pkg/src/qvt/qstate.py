"""Möttönen amplitude encoding on a small statevector simulator.

Conventions used throughout:

* qubit 0 is the least significant bit of a basis-state index;
* amplitudes are real and non-negative, so only RY rotations are needed;
* stage ``k`` of the preparation (k = 1..n) targets qubit ``n - k`` and is
  controlled by the ``k - 1`` more significant qubits already prepared.
  Stage 1 therefore splits the amplitude vector into its lower and upper
  halves, stage 2 splits each half again, and so on.

A uniformly controlled RY with ``m`` controls is lowered to ``2**m`` CNOT/RY
pairs walking a cyclic Gray code over the control register. Each pair is
emitted as CNOT first, then RY; the closing CNOT of the cycle is the first
CNOT of the stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

MAX_QUBITS = 20


class QStateError(ValueError):
    pass


class ZeroVector(QStateError):
    pass


class EmptyVector(QStateError):
    pass


class TooManyQubits(QStateError):
    pass


@dataclass(frozen=True)
class AmplitudeVector:
    values: np.ndarray
    n_qubits: int

    def __post_init__(self):
        if len(self.values) != 2**self.n_qubits:
            raise QStateError("length must be 2**n_qubits")
        if abs(float(np.dot(self.values, self.values)) - 1.0) > 1e-12:
            raise QStateError("amplitudes must have unit norm")


@dataclass(frozen=True)
class Gate:
    kind: Literal["RY", "CNOT"]
    target: int
    control: int | None = None
    angle: float = 0.0

    def qubits(self) -> tuple[int, ...]:
        return (self.target,) if self.control is None else (self.control, self.target)

    def to_dict(self) -> dict:
        if self.kind == "RY":
            return {"kind": "RY", "target": self.target, "angle": self.angle}
        return {"kind": "CNOT", "control": self.control, "target": self.target}


@dataclass
class QuantumCircuit:
    n_qubits: int
    gates: list[Gate] = field(default_factory=list)

    def ry(self, target: int, angle: float) -> None:
        self._check(target)
        self.gates.append(Gate("RY", target, None, float(angle)))

    def cnot(self, control: int, target: int) -> None:
        self._check(target)
        self._check(control)
        if control == target:
            raise QStateError("CNOT control and target must differ")
        self.gates.append(Gate("CNOT", target, control))

    def _check(self, q: int) -> None:
        if not 0 <= q < self.n_qubits:
            raise QStateError(f"qubit {q} out of range for {self.n_qubits}-qubit circuit")


@dataclass(frozen=True)
class CircuitStats:
    ry_count: int
    cnot_count: int
    depth: int


def prepare_amplitudes(raw) -> AmplitudeVector:
    """Zero-pad ``raw`` to the next power of two and L2-normalise it."""
    x = np.asarray(raw, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyVector("cannot encode an empty vector")
    n = max(0, math.ceil(math.log2(x.size))) if x.size > 1 else 0
    padded = np.zeros(2**n)
    padded[: x.size] = x
    norm = float(np.linalg.norm(padded))
    if norm == 0.0:
        raise ZeroVector("cannot encode the zero vector")
    return AmplitudeVector(padded / norm, n)


def mottonen_angles(a: AmplitudeVector) -> list[np.ndarray]:
    """Angle tree: entry ``k - 1`` holds the ``2**(k-1)`` stage-k RY angles.

    Block ``j`` of stage ``k`` covers the amplitudes whose top ``k - 1`` index
    bits equal ``j``; its angle is ``2 * atan2(|upper half|, |lower half|)``.
    """
    values = a.values
    stages = []
    for k in range(1, a.n_qubits + 1):
        blocks = values.reshape(2 ** (k - 1), 2, -1)
        lower = np.linalg.norm(blocks[:, 0, :], axis=1)
        upper = np.linalg.norm(blocks[:, 1, :], axis=1)
        stages.append(2.0 * np.arctan2(upper, lower))
    return stages


def _gray(i: int) -> int:
    return i ^ (i >> 1)


def _ucry_schedule(n_controls: int) -> tuple[list[int], np.ndarray]:
    """Control bit of each CNOT and the matrix mapping pair angles to block angles.

    Pair ``i`` is CNOT(control bit c_i) followed by RY(theta_i). After the
    first ``i + 1`` CNOTs the accumulated flip pattern is gray(i + 1), so
    block ``j`` sees ``sum_i (-1)**popcount(j & gray(i + 1)) * theta_i``.
    """
    size = 2**n_controls
    controls = []
    for i in range(size):
        changed = _gray(i) ^ _gray((i + 1) % size)
        controls.append(changed.bit_length() - 1)
    signs = np.empty((size, size))
    for j in range(size):
        for i in range(size):
            signs[j, i] = -1.0 if bin(j & _gray((i + 1) % size)).count("1") % 2 else 1.0
    return controls, signs


def build_mottonen_circuit(a: AmplitudeVector) -> QuantumCircuit:
    n = a.n_qubits
    circuit = QuantumCircuit(n)
    for k, alphas in enumerate(mottonen_angles(a), start=1):
        target = n - k
        if k == 1:
            circuit.ry(target, alphas[0])
            continue
        m = k - 1
        controls, signs = _ucry_schedule(m)
        # signs is a ±1 Hadamard-type matrix: signs.T @ signs = 2**m I
        thetas = signs.T @ alphas / 2**m
        for bit, theta in zip(controls, thetas):
            # control register bit b lives on qubit (target + 1 + b)
            circuit.cnot(target + 1 + bit, target)
            circuit.ry(target, theta)
    return circuit


def simulate(c: QuantumCircuit) -> np.ndarray:
    """Run ``c`` from |0...0> and return the complex statevector."""
    n = c.n_qubits
    if n > MAX_QUBITS:
        raise TooManyQubits(f"{n} qubits exceeds the {MAX_QUBITS}-qubit simulator cap")
    state = np.zeros(2**n, dtype=np.complex128)
    state[0] = 1.0
    for g in c.gates:
        view = state.reshape(-1, 2, 2**g.target)
        if g.kind == "RY":
            cos, sin = math.cos(g.angle / 2), math.sin(g.angle / 2)
            lo, hi = view[:, 0, :].copy(), view[:, 1, :].copy()
            view[:, 0, :] = cos * lo - sin * hi
            view[:, 1, :] = sin * lo + cos * hi
        else:
            idx = np.arange(state.size)
            flip = ((idx >> g.control) & 1 == 1) & ((idx >> g.target) & 1 == 0)
            src = idx[flip]
            dst = src | (1 << g.target)
            state[src], state[dst] = state[dst].copy(), state[src].copy()
    return state


def basis_probabilities(state: np.ndarray) -> np.ndarray:
    return np.abs(state) ** 2


def z_expectations(state: np.ndarray) -> np.ndarray:
    probs = basis_probabilities(state)
    n = int(round(math.log2(probs.size)))
    idx = np.arange(probs.size)
    return np.array([np.sum(np.where((idx >> q) & 1, -1.0, 1.0) * probs) for q in range(n)])


def circuit_stats(c: QuantumCircuit) -> CircuitStats:
    frontier = [0] * c.n_qubits
    ry = cnot = 0
    for g in c.gates:
        qs = g.qubits()
        layer = max(frontier[q] for q in qs) + 1
        for q in qs:
            frontier[q] = layer
        if g.kind == "RY":
            ry += 1
        else:
            cnot += 1
    return CircuitStats(ry, cnot, max(frontier, default=0))


def encode(raw, readout: str = "probabilities") -> np.ndarray:
    """prepare → build → simulate → read out, as used by the quantum encoder."""
    amps = prepare_amplitudes(raw)
    state = simulate(build_mottonen_circuit(amps))
    if readout == "probabilities":
        return basis_probabilities(state)
    if readout == "z_expectations":
        return z_expectations(state)
    raise ValueError(f"unknown readout {readout!r}")
