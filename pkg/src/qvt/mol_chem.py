"""SMILES/SELFIES tokenisation, SMILES → molecular graph, fingerprints and 2D depictions.

The SMILES dialect covers the organic subset (B C N O P S F Cl Br I and the
aromatic b c n o p s) plus bracket atoms with isotope, explicit H count and
charge. Stereo markers (``@``, ``@@``, ``/``, ``\\``) are tokenised and then
ignored. Aromaticity is read from lowercase symbols as written; there is no
kekulisation and no valence model.
"""

from __future__ import annotations

import re
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H")
ATOMIC_NUMBER = {"H": 1, "B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53}
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
BOND_ORDERS = ("single", "double", "triple", "aromatic")
_BOND_SYMBOL = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}
_BOND_CODE = {"single": 1, "double": 2, "triple": 3, "aromatic": 4}

# centre intensity of the 3x3 atom stamp in rendered images
ELEMENT_INTENSITY = {
    "H": 0.15, "B": 0.25, "C": 0.35, "N": 0.45, "O": 0.55, "F": 0.6,
    "P": 0.65, "S": 0.7, "Cl": 0.8, "Br": 0.9, "I": 1.0,
}


class MolChemError(ValueError):
    pass


class EmptyInput(MolChemError):
    pass


class UnknownCharacter(MolChemError):
    def __init__(self, position: int, char: str = ""):
        super().__init__(f"unknown character {char!r} at position {position}")
        self.position = position


class UnmatchedRingBond(MolChemError):
    def __init__(self, digit: str):
        super().__init__(f"ring bond {digit} is never closed")
        self.digit = digit


class UnbalancedParenthesis(MolChemError):
    pass


class MalformedBracket(MolChemError):
    def __init__(self, position: int):
        super().__init__(f"malformed bracket token at position {position}")
        self.position = position


class LengthMismatch(MolChemError):
    pass


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    explicit_h: int = 0
    isotope: int | None = None

    def __post_init__(self):
        if self.element not in ELEMENTS:
            raise MolChemError(f"unsupported element {self.element!r}")
        if self.explicit_h < 0:
            raise MolChemError("explicit_h must be non-negative")


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: str = "single"

    @property
    def endpoints(self) -> tuple[int, int]:
        return self.begin, self.end


@dataclass
class MolecularGraph:
    atoms: list[Atom]
    bonds: list[Bond] = field(default_factory=list)

    def __post_init__(self):
        if not self.atoms:
            raise MolChemError("a molecular graph needs at least one atom")
        seen = set()
        for b in self.bonds:
            if b.order not in BOND_ORDERS:
                raise MolChemError(f"unknown bond order {b.order!r}")
            if b.begin == b.end:
                raise MolChemError(f"self-loop on atom {b.begin}")
            if not (0 <= b.begin < len(self.atoms) and 0 <= b.end < len(self.atoms)):
                raise MolChemError(f"bond {b.endpoints} references a missing atom")
            key = frozenset(b.endpoints)
            if key in seen:
                raise MolChemError(f"duplicate bond between atoms {sorted(key)}")
            seen.add(key)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self) -> list[list[tuple[int, str]]]:
        adj: list[list[tuple[int, str]]] = [[] for _ in self.atoms]
        for b in self.bonds:
            adj[b.begin].append((b.end, b.order))
            adj[b.end].append((b.begin, b.order))
        return adj

    def degrees(self) -> list[int]:
        return [len(n) for n in self.neighbors()]

    def permuted(self, perm: Sequence[int]) -> MolecularGraph:
        """Relabel atoms so that old atom ``i`` becomes new atom ``perm[i]``."""
        atoms: list[Atom | None] = [None] * len(self.atoms)
        for old, new in enumerate(perm):
            atoms[new] = self.atoms[old]
        bonds = [Bond(perm[b.begin], perm[b.end], b.order) for b in self.bonds]
        return MolecularGraph(atoms, bonds)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        return {
            "atoms": [
                {"element": a.element, "aromatic": a.aromatic, "formal_charge": a.formal_charge,
                 "explicit_h": a.explicit_h, "isotope": a.isotope}
                for a in self.atoms
            ],
            "bonds": [{"endpoints": [b.begin, b.end], "order": b.order} for b in self.bonds],
        }


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[int, ...]
    vocab: tuple[str, ...]

    def __post_init__(self):
        if any(t < 0 or t >= len(self.vocab) for t in self.tokens):
            raise MolChemError("token index outside vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def lexemes(self) -> list[str]:
        return [self.vocab[t] for t in self.tokens]


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray  # bool, shape (n_bits,)

    @property
    def n_bits(self) -> int:
        return int(self.bits.size)

    def popcount(self) -> int:
        return int(self.bits.sum())

    def on_bits(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.bits)]


@dataclass(frozen=True)
class MolecularImage:
    pixels: np.ndarray  # float64, shape (size, size), values in [0, 1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


# ------------------------------------------------------------ tokenisers

_SMILES_TOKEN = re.compile(
    r"""
    (?P<bracket>\[[^\[\]]*\])
  | (?P<atom>Cl|Br|[BCNOPSFI]|[bcnops])
  | (?P<ring>%\d\d|\d)
  | (?P<bond>[-=\#:/\\])
  | (?P<dot>\.)
  | (?P<branch>[()])
    """,
    re.VERBOSE,
)


def smiles_lexemes(text: str) -> list[str]:
    """Split SMILES into lexemes; joining them returns ``text`` unchanged."""
    if not text:
        raise EmptyInput("empty SMILES string")
    out, pos = [], 0
    while pos < len(text):
        m = _SMILES_TOKEN.match(text, pos)
        if m is None:
            raise UnknownCharacter(pos, text[pos])
        out.append(m.group())
        pos = m.end()
    return out


def selfies_lexemes(text: str) -> list[str]:
    if not text:
        raise EmptyInput("empty SELFIES string")
    out, pos = [], 0
    while pos < len(text):
        if text[pos] != "[":
            raise MalformedBracket(pos)
        close = text.find("]", pos + 1)
        if close == -1 or "[" in text[pos + 1 : close] or close == pos + 1:
            raise MalformedBracket(pos)
        out.append(text[pos : close + 1])
        pos = close + 1
    return out


def _to_sequence(lexemes: list[str], vocab: Sequence[str] | None, unknown: str | None) -> TokenSequence:
    if vocab is None:
        vocab = list(dict.fromkeys(lexemes))
    index = {s: i for i, s in enumerate(vocab)}
    tokens = []
    for lex in lexemes:
        if lex in index:
            tokens.append(index[lex])
        elif unknown is not None and unknown in index:
            tokens.append(index[unknown])
        else:
            raise KeyError(f"token {lex!r} not in vocabulary")
    return TokenSequence(tuple(tokens), tuple(vocab))


def tokenize_smiles(text: str, vocab: Sequence[str] | None = None, unknown: str | None = "<unk>") -> TokenSequence:
    """Tokenise SMILES. Without ``vocab`` the vocabulary is the distinct
    lexemes in order of first appearance."""
    return _to_sequence(smiles_lexemes(text), vocab, unknown)


def tokenize_selfies(text: str, vocab: Sequence[str] | None = None, unknown: str | None = "<unk>") -> TokenSequence:
    return _to_sequence(selfies_lexemes(text), vocab, unknown)


def build_vocab(corpus: Iterable[list[str]], specials: Sequence[str] = ("<unk>",)) -> tuple[str, ...]:
    """Vocabulary of ``specials`` followed by corpus lexemes in sorted order."""
    symbols = set()
    for lexemes in corpus:
        symbols.update(lexemes)
    return tuple(specials) + tuple(sorted(symbols - set(specials)))


def one_hot_encode(seq: TokenSequence, max_len: int) -> np.ndarray:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    out = np.zeros((max_len, len(seq.vocab)))
    for i, t in enumerate(seq.tokens[:max_len]):
        out[i, t] = 1.0
    return out


# ---------------------------------------------------------------- parser

_BRACKET = re.compile(
    r"^\[(?P<isotope>\d+)?(?P<symbol>Cl|Br|[BCNOPSFIH]|[bcnops])(?P<chiral>@@?)?"
    r"(?P<hcount>H\d*)?(?P<charge>[+-]+\d*)?(?::\d+)?\]$"
)


def _parse_bracket(lex: str) -> Atom:
    m = _BRACKET.match(lex)
    if m is None:
        raise MolChemError(f"unsupported bracket atom {lex}")
    symbol = m.group("symbol")
    aromatic = symbol in AROMATIC_SYMBOLS
    element = AROMATIC_SYMBOLS.get(symbol, symbol)
    h = m.group("hcount")
    explicit_h = 0 if h is None else (int(h[1:]) if len(h) > 1 else 1)
    charge_text = m.group("charge")
    charge = 0
    if charge_text:
        sign = 1 if charge_text[0] == "+" else -1
        digits = charge_text.lstrip("+-")
        charge = sign * (int(digits) if digits else len(charge_text))
    isotope = int(m.group("isotope")) if m.group("isotope") else None
    return Atom(element, aromatic, charge, explicit_h, isotope)


def parse_smiles(text: str) -> MolecularGraph:
    lexemes = smiles_lexemes(text)
    atoms: list[Atom] = []
    bonds: dict[frozenset, Bond] = {}
    branch_stack: list[int | None] = []
    open_rings: dict[str, tuple[int, str | None]] = {}
    prev: int | None = None
    pending: str | None = None

    def connect(a: int, b: int, order: str | None) -> None:
        if a == b:
            raise MolChemError(f"ring bond closes on its own atom {a}")
        key = frozenset((a, b))
        if key in bonds:
            raise MolChemError(f"duplicate bond between atoms {a} and {b}")
        if order is None:
            order = "aromatic" if atoms[a].aromatic and atoms[b].aromatic else "single"
        bonds[key] = Bond(a, b, order)

    for lex in lexemes:
        c = lex[0]
        if c == "[" or lex in ELEMENTS or lex in AROMATIC_SYMBOLS:
            if c == "[":
                atom = _parse_bracket(lex)
            elif lex in AROMATIC_SYMBOLS:
                atom = Atom(AROMATIC_SYMBOLS[lex], aromatic=True)
            else:
                atom = Atom(lex)
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                connect(prev, idx, pending)
            prev, pending = idx, None
        elif c.isdigit() or c == "%":
            if prev is None:
                raise MolChemError(f"ring bond {lex} before any atom")
            if lex in open_rings:
                other, order = open_rings.pop(lex)
                if order is not None and pending is not None and order != pending:
                    raise MolChemError(f"conflicting bond orders on ring bond {lex}")
                connect(other, prev, pending or order)
            else:
                open_rings[lex] = (prev, pending)
            pending = None
        elif lex in _BOND_SYMBOL:
            pending = _BOND_SYMBOL[lex]
        elif lex in "/\\":
            pending = "single"  # directional bond; the stereo part is dropped
        elif lex == ".":
            prev, pending = None, None
        elif lex == "(":
            if prev is None:
                raise UnbalancedParenthesis("branch opened before any atom")
            branch_stack.append(prev)
        elif lex == ")":
            if not branch_stack:
                raise UnbalancedParenthesis("')' without matching '('")
            prev, pending = branch_stack.pop(), None
    if branch_stack:
        raise UnbalancedParenthesis("'(' is never closed")
    if open_rings:
        raise UnmatchedRingBond(next(iter(open_rings)))
    if not atoms:
        raise EmptyInput("no atoms in SMILES")
    return MolecularGraph(atoms, list(bonds.values()))


# ----------------------------------------------------------- fingerprints

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(values: Iterable[int]) -> int:
    """FNV-1a over each value packed as an unsigned little-endian 64-bit word."""
    h = _FNV_OFFSET
    for v in values:
        for byte in struct.pack("<Q", v & _MASK64):
            h ^= byte
            h = (h * _FNV_PRIME) & _MASK64
    return h


def atom_invariants(g: MolecularGraph) -> list[int]:
    degrees = g.degrees()
    return [
        fnv1a_64((ATOMIC_NUMBER[a.element], int(a.aromatic), degrees[i], a.formal_charge, a.explicit_h))
        for i, a in enumerate(g.atoms)
    ]


def morgan_fingerprint(g: MolecularGraph, radius: int = 2, n_bits: int = 1024) -> Fingerprint:
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if n_bits < 1 or n_bits & (n_bits - 1):
        raise ValueError("n_bits must be a power of two")
    bits = np.zeros(n_bits, dtype=bool)
    adj = g.neighbors()
    current = atom_invariants(g)
    for inv in current:
        bits[inv % n_bits] = True
    for r in range(1, radius + 1):
        nxt = []
        for i, inv in enumerate(current):
            env = sorted((_BOND_CODE[order], current[j]) for j, order in adj[i])
            nxt.append(fnv1a_64([r, inv] + [x for pair in env for x in pair]))
        current = nxt
        for inv in current:
            bits[inv % n_bits] = True
    return Fingerprint(bits)


def _check_lengths(a: Fingerprint, b: Fingerprint) -> None:
    if a.n_bits != b.n_bits:
        raise LengthMismatch(f"fingerprints of {a.n_bits} and {b.n_bits} bits")


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    _check_lengths(a, b)
    union = int(np.sum(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.sum(a.bits & b.bits)) / union


def dice(a: Fingerprint, b: Fingerprint) -> float:
    _check_lengths(a, b)
    total = int(a.bits.sum()) + int(b.bits.sum())
    if total == 0:
        return 1.0
    return 2 * int(np.sum(a.bits & b.bits)) / total


# ----------------------------------------------------------- depiction

LAYOUT_STEPS = 200
LAYOUT_SEED = 0


def _components(g: MolecularGraph) -> list[list[int]]:
    adj = g.neighbors()
    seen, comps = set(), []
    for start in range(g.n_atoms):
        if start in seen:
            continue
        order, queue = [], deque([start])
        seen.add(start)
        while queue:
            v = queue.popleft()
            order.append(v)
            for u, _ in adj[v]:
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        comps.append(order)
    return comps


def _bfs_placement(g: MolecularGraph, comp: list[int], pos: np.ndarray) -> None:
    adj = g.neighbors()
    root = comp[0]
    pos[root] = 0.0
    heading = {root: 0.0}
    placed = {root}
    queue = deque([root])
    while queue:
        v = queue.popleft()
        children = [u for u, _ in adj[v] if u not in placed]
        if not children:
            continue
        base = heading[v]
        spread = 2 * np.pi / (len(children) + 1) if v == root else np.pi / 3
        for i, u in enumerate(children):
            if v == root:
                angle = base + spread * (i + 1)
            else:
                angle = base + spread * (i - (len(children) - 1) / 2)
                if len(children) == 1:
                    angle = base + (np.pi / 6 if len(placed) % 2 else -np.pi / 6)
            pos[u] = pos[v] + np.array([np.cos(angle), np.sin(angle)])
            heading[u] = angle
            placed.add(u)
            queue.append(u)


def layout_2d(g: MolecularGraph) -> np.ndarray:
    """Deterministic 2D coordinates in [0.1, 0.9]², one row per atom.

    BFS places each connected component as a tree with unit bond lengths;
    a fixed number of spring/repulsion relaxation steps then closes rings.
    """
    n = g.n_atoms
    if n == 1:
        return np.array([[0.5, 0.5]])
    pos = np.zeros((n, 2))
    offset = 0.0
    for comp in _components(g):
        _bfs_placement(g, comp, pos)
        span = pos[comp, 0].max() - pos[comp, 0].min()
        pos[comp, 0] += offset - pos[comp, 0].min()
        offset += span + 2.0
    rng = np.random.default_rng(LAYOUT_SEED)
    pos += rng.normal(scale=1e-3, size=pos.shape)

    edges = np.array([b.endpoints for b in g.bonds], dtype=np.int64).reshape(-1, 2)
    for _ in range(LAYOUT_STEPS):
        delta = pos[:, None, :] - pos[None, :, :]
        dist2 = (delta**2).sum(-1) + np.eye(n)
        force = (delta / dist2[..., None] ** 1.5).sum(1) * 0.2
        if len(edges):
            d = pos[edges[:, 0]] - pos[edges[:, 1]]
            length = np.linalg.norm(d, axis=1, keepdims=True) + 1e-12
            pull = (length - 1.0) * d / length
            np.add.at(force, edges[:, 0], -pull)
            np.add.at(force, edges[:, 1], pull)
        step = np.clip(force * 0.1, -0.2, 0.2)
        pos += step

    lo, hi = pos.min(0), pos.max(0)
    extent = float((hi - lo).max())
    centre = (lo + hi) / 2
    return 0.5 + (pos - centre) * (0.8 / extent)


_BOND_LINES = {"single": (0.0,), "aromatic": (0.0,), "double": (-0.9, 0.9), "triple": (-1.4, 0.0, 1.4)}


def _draw_segment(img: np.ndarray, p: np.ndarray, q: np.ndarray) -> None:
    size = img.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    pts = np.stack([xs, ys], -1).astype(np.float64)
    d = q - p
    denom = float(d @ d)
    t = np.zeros(xs.shape) if denom == 0 else np.clip(((pts - p) @ d) / denom, 0.0, 1.0)
    closest = p + t[..., None] * d
    dist = np.linalg.norm(pts - closest, axis=-1)
    np.maximum(img, np.clip(1.0 - dist, 0.0, 1.0), out=img)


def render_image(g: MolecularGraph, size: int = 32) -> MolecularImage:
    """Rasterise the 2D layout: anti-aliased bond lines, then 3x3 atom stamps."""
    if size < 8:
        raise ValueError("image size must be at least 8")
    img = np.zeros((size, size))
    coords = layout_2d(g) * (size - 1)
    for b in g.bonds:
        p, q = coords[b.begin], coords[b.end]
        d = q - p
        normal = np.array([-d[1], d[0]]) / (np.linalg.norm(d) + 1e-12)
        for off in _BOND_LINES[b.order]:
            _draw_segment(img, p + off * normal, q + off * normal)
    for atom, (x, y) in zip(g.atoms, coords):
        cx, cy = int(round(x)), int(round(y))
        centre = ELEMENT_INTENSITY[atom.element]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                px, py = cx + dx, cy + dy
                if 0 <= px < size and 0 <= py < size:
                    img[py, px] = centre if dx == dy == 0 else 0.5 * centre
    return MolecularImage(np.clip(img, 0.0, 1.0))
