"""Enzyme records: JSONL ingestion, synthetic generation and stratified splitting."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mol_chem import MolChemError, parse_smiles

log = logging.getLogger(__name__)

N_CLASSES = 6
AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
SEQUENCE_ALPHABET = set(AMINO_ACIDS + "X")
EC_CLASS_NAMES = ("oxidoreductase", "transferase", "hydrolase", "lyase", "isomerase", "ligase")


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SchemaError(DatasetError):
    def __init__(self, line: int, field: str, message: str):
        super().__init__(f"line {line}: field {field!r}: {message}")
        self.line = line
        self.field = field


class EmptyDataset(DatasetError):
    pass


@dataclass(frozen=True)
class QuantumDescriptors:
    scf_total_energy: float
    nuclear_repulsion_energy: float
    gradient_magnitude: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.scf_total_energy, self.nuclear_repulsion_energy, self.gradient_magnitude)


@dataclass(frozen=True)
class EnzymeRecord:
    id: str
    sequence: str
    smiles: str
    selfies: str | None
    quantum: QuantumDescriptors
    ec_class: int

    @property
    def label(self) -> int:
        """Zero-based class index."""
        return self.ec_class - 1

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "sequence": self.sequence,
            "smiles": self.smiles,
            "selfies": self.selfies,
            "quantum": {
                "scf_total_energy": self.quantum.scf_total_energy,
                "nuclear_repulsion_energy": self.quantum.nuclear_repulsion_energy,
                "gradient_magnitude": self.quantum.gradient_magnitude,
            },
            "ec_class": self.ec_class,
        }


def record_from_json(obj, line: int = 0) -> EnzymeRecord:
    """Validate one decoded JSON object and build a record."""
    if not isinstance(obj, dict):
        raise SchemaError(line, "<record>", "expected a JSON object")

    def need(key, kind, where=obj, prefix=""):
        if key not in where:
            raise SchemaError(line, prefix + key, "missing")
        value = where[key]
        if kind is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaError(line, prefix + key, "expected a number")
            if not math.isfinite(value):
                raise SchemaError(line, prefix + key, "must be finite")
            return float(value)
        if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise SchemaError(line, prefix + key, "expected an integer")
        if kind is str and not isinstance(value, str):
            raise SchemaError(line, prefix + key, "expected a string")
        return value

    rid = need("id", str)
    sequence = need("sequence", str)
    if not set(sequence) <= SEQUENCE_ALPHABET:
        bad = sorted(set(sequence) - SEQUENCE_ALPHABET)
        raise SchemaError(line, "sequence", f"letters outside the amino-acid alphabet: {bad}")
    smiles = need("smiles", str)
    try:
        parse_smiles(smiles)
    except MolChemError as exc:
        raise SchemaError(line, "smiles", str(exc)) from exc
    selfies = obj.get("selfies")
    if selfies is not None and not isinstance(selfies, str):
        raise SchemaError(line, "selfies", "expected a string or null")
    q = need("quantum", dict)
    if not isinstance(q, dict):
        raise SchemaError(line, "quantum", "expected an object")
    quantum = QuantumDescriptors(
        need("scf_total_energy", float, q, "quantum."),
        need("nuclear_repulsion_energy", float, q, "quantum."),
        need("gradient_magnitude", float, q, "quantum."),
    )
    ec = need("ec_class", int)
    if not 1 <= ec <= N_CLASSES:
        raise SchemaError(line, "ec_class", f"must be in 1..{N_CLASSES}, got {ec}")
    return EnzymeRecord(rid, sequence, smiles, selfies, quantum, ec)


def load_dataset(path) -> list[EnzymeRecord]:
    """Read JSONL records. All invalid lines are logged; the first one is raised."""
    records, errors = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                errors.append(ParseError(lineno, exc.msg))
                continue
            try:
                records.append(record_from_json(obj, lineno))
            except DatasetError as exc:
                errors.append(exc)
    for err in errors:
        log.error("%s: %s", path, err)
    if errors:
        raise errors[0]
    return records


def save_dataset(records: Iterable[EnzymeRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


# -------------------------------------------------------------- synthetic

# Each class gets its own scaffold; {0} and {1} are substituent slots.
SCAFFOLDS = {
    1: "Oc1ccc({0})cc1{1}",
    2: "CC(=O)OC({0}){1}",
    3: "NC(=O)C({0})N{1}",
    4: "C1CC({0})CC(C1){1}",
    5: "C=CC({0})=C{1}",
    6: "OP(=O)(O)OC({0})C{1}",
}
SUBSTITUENTS = ("C", "CC", "O", "N", "F", "Cl", "Br", "C(=O)O", "OC", "C#N", "CO", "S", "CCC", "C=O")
MOTIFS = {1: "HCYW", 2: "KRDE", 3: "GSTN", 4: "PMFL", 5: "YWQI", 6: "CHKM"}

# per-class descriptor means (Hartree, Hartree, Hartree/Bohr) and shared spreads
_SCF = (-275.0, -25.0, 30.0)
_NUC = (135.0, 15.0, 20.0)
_GRAD = (0.014, 0.004, 0.006)


def generate_synthetic_dataset(n_per_class: int, seed: int = 0) -> list[EnzymeRecord]:
    """Learnable toy records: per-class sequence motif, SMILES scaffold and
    descriptor means (with overlapping spreads)."""
    import selfies

    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    rng = np.random.default_rng(seed)
    letters = np.array(list(AMINO_ACIDS))
    records = []
    for c in range(1, N_CLASSES + 1):
        for i in range(n_per_class):
            length = int(rng.integers(40, 71))
            body = "".join(rng.choice(letters, size=length - 4))
            at = int(rng.integers(0, length - 3))
            sequence = body[:at] + MOTIFS[c] + body[at:]
            r1, r2 = rng.choice(len(SUBSTITUENTS), size=2)
            smiles = SCAFFOLDS[c].format(SUBSTITUENTS[r1], SUBSTITUENTS[r2])
            quantum = QuantumDescriptors(
                float(rng.normal(_SCF[0] + _SCF[1] * c, _SCF[2])),
                float(rng.normal(_NUC[0] + _NUC[1] * c, _NUC[2])),
                float(abs(rng.normal(_GRAD[0] + _GRAD[1] * c, _GRAD[2]))),
            )
            records.append(EnzymeRecord(f"syn-{c}-{i:04d}", sequence, smiles, selfies.encoder(smiles), quantum, c))
    return records


# -------------------------------------------------------------- splitting

@dataclass
class DatasetSplit:
    train: list[EnzymeRecord]
    validation: list[EnzymeRecord]
    test: list[EnzymeRecord]

    def parts(self) -> tuple[list[EnzymeRecord], list[EnzymeRecord], list[EnzymeRecord]]:
        return self.train, self.validation, self.test

    def digest(self) -> str:
        """Hash of the id lists of all three parts, for comparing splits."""
        h = hashlib.sha256()
        for part in self.parts():
            h.update(("|".join(r.id for r in part) + "\n").encode())
        return h.hexdigest()


def _largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    ideal = [n * r for r in ratios]
    counts = [math.floor(x + 1e-9) for x in ideal]
    leftover = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(ideal[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def stratified_split(records: Sequence[EnzymeRecord], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    if not records:
        raise EmptyDataset("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[EnzymeRecord]] = {}
    for r in records:
        by_class.setdefault(r.ec_class, []).append(r)
    train, val, test = [], [], []
    for c in sorted(by_class):
        members = by_class[c]
        if len(members) < 3:
            warnings.warn(f"class {c} has only {len(members)} record(s); all placed in train", stacklevel=2)
            train.extend(members)
            continue
        members = [members[i] for i in rng.permutation(len(members))]
        n_train, n_val, _ = _largest_remainder(len(members), ratios)
        train.extend(members[:n_train])
        val.extend(members[n_train : n_train + n_val])
        test.extend(members[n_train + n_val :])
    return DatasetSplit(train, val, test)
