"""Modality encoders: sequence transformer, message-passing GNN, CNN, quantum and fingerprint.

Each encoder has a batched forward (``*_forward``) used in training and a
single-input wrapper (``encode_*``) returning a :class:`ModalityEmbedding`.
Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, so
the same dict can be serialised, optimised and shared by every module.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import qstate
from . import tensor_core as tc
from .mol_chem import (
    BOND_ORDERS,
    ELEMENTS,
    Fingerprint,
    LengthMismatch,
    MolecularGraph,
    MolecularImage,
    TokenSequence,
    morgan_fingerprint,
    parse_smiles,
    render_image,
    selfies_lexemes,
    smiles_lexemes,
)
from .tensor_core import Tensor

MODALITIES = ("sequence", "graph", "image", "quantum", "fingerprint")
TEXT_SOURCES = ("smiles", "selfies", "protein")
QUANTUM_FIELDS = ("scf_total_energy", "nuclear_repulsion_energy", "gradient_magnitude")
EPS_FLOOR = 1e-6
N_NODE_FEATURES = len(ELEMENTS) + 2
GNN_LAYERS = 3
CONV_KERNEL = 3
CONV_STRIDE = 2
MASK_VALUE = -1e9

Params = dict[str, Tensor]


class EncoderError(ValueError):
    pass


class EmptySequence(EncoderError):
    pass


class ImageTooSmall(EncoderError):
    pass


class NonFiniteDescriptor(EncoderError):
    pass


class MissingModality(EncoderError):
    def __init__(self, tag: str):
        super().__init__(f"record is missing modality {tag!r}")
        self.tag = tag


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    max_seq_len: int = 128
    ffn_dim: int = 128
    gnn_hidden: int = 64
    cnn_channels: tuple[int, int, int] = (8, 16, 32)
    image_size: int = 32
    quantum_readout: str = "probabilities"
    quantum_features: int = 3
    fp_radius: int = 2
    fp_bits: int = 1024
    text_source: str = "smiles"

    def __post_init__(self):
        self.cnn_channels = tuple(int(c) for c in self.cnn_channels)
        if len(self.cnn_channels) != 3:
            raise ValueError("cnn_channels needs exactly three widths")
        counts = [self.d_model, self.n_heads, self.max_seq_len, self.ffn_dim, self.gnn_hidden,
                  self.quantum_features, self.fp_bits, *self.cnn_channels]
        if any(c < 1 for c in counts) or self.n_blocks < 0:
            raise ValueError("encoder sizes must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.quantum_readout not in ("probabilities", "z_expectations"):
            raise ValueError(f"unknown quantum_readout {self.quantum_readout!r}")
        if self.text_source not in TEXT_SOURCES:
            raise ValueError(f"text_source must be one of {TEXT_SOURCES}")
        conv_output_size(self.image_size)

    @property
    def n_qubits(self) -> int:
        return max(0, math.ceil(math.log2(self.quantum_features))) if self.quantum_features > 1 else 0

    @property
    def quantum_width(self) -> int:
        return 2**self.n_qubits if self.quantum_readout == "probabilities" else self.n_qubits

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> EncoderConfig:
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown encoder settings {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModalityEmbedding:
    modality: str
    vector: Tensor


def conv_output_size(size: int) -> list[int]:
    """Spatial sizes after each of the three stride-2 3x3 convolutions."""
    sizes = []
    for _ in range(3):
        if size < CONV_KERNEL:
            raise ImageTooSmall("image too small for three 3x3 stride-2 convolutions (need >= 15)")
        size = (size - CONV_KERNEL) // CONV_STRIDE + 1
        sizes.append(size)
    return sizes


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ------------------------------------------------------------ featurisation

@dataclass
class QuantumNormalizer:
    """Per-descriptor min/max from the training split; maps descriptors to
    non-negative values in roughly [0, 1] plus a small floor."""

    minimum: tuple[float, float, float]
    maximum: tuple[float, float, float]

    @classmethod
    def fit(cls, triples: Sequence[Sequence[float]]) -> QuantumNormalizer:
        arr = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
        if arr.size == 0:
            return cls((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
        return cls(tuple(arr.min(0).tolist()), tuple(arr.max(0).tolist()))

    def shift(self, triple: Sequence[float]) -> np.ndarray:
        x = np.asarray(triple, dtype=np.float64)
        if x.shape != (3,) or not np.all(np.isfinite(x)):
            raise NonFiniteDescriptor(f"quantum descriptors must be three finite numbers, got {triple}")
        lo, hi = np.asarray(self.minimum), np.asarray(self.maximum)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.maximum((x - lo) / span, 0.0) + EPS_FLOOR

    def to_dict(self) -> dict:
        return {"minimum": list(self.minimum), "maximum": list(self.maximum)}


def expand_descriptors(shifted: np.ndarray, width: int) -> np.ndarray:
    """First ``width`` monomials of the shifted descriptors in graded order
    (x1, x2, x3, x1², x1x2, ...). Width 3 is the descriptors themselves."""
    out: list[float] = []
    degree = 1
    while len(out) < width:
        for combo in _monomials(3, degree):
            out.append(float(np.prod(shifted[list(combo)])))
            if len(out) == width:
                break
        degree += 1
    return np.array(out)


def _monomials(n: int, degree: int, start: int = 0):
    if degree == 0:
        yield ()
        return
    for i in range(start, n):
        for rest in _monomials(n, degree - 1, i):
            yield (i,) + rest


def quantum_readout(triple: Sequence[float], normalizer: QuantumNormalizer, config: EncoderConfig) -> np.ndarray:
    features = expand_descriptors(normalizer.shift(triple), config.quantum_features)
    return qstate.encode(features, config.quantum_readout)


def text_lexemes(record, source: str) -> list[str]:
    if source == "smiles":
        return smiles_lexemes(record.smiles)
    if source == "selfies":
        if not record.selfies:
            raise MissingModality("sequence")
        return selfies_lexemes(record.selfies)
    return list(record.sequence)


def node_features(g: MolecularGraph) -> np.ndarray:
    feats = np.zeros((g.n_atoms, N_NODE_FEATURES))
    degrees = g.degrees()
    for i, atom in enumerate(g.atoms):
        feats[i, ELEMENTS.index(atom.element)] = 1.0
        feats[i, len(ELEMENTS)] = float(atom.aromatic)
        feats[i, len(ELEMENTS) + 1] = float(degrees[i])
    return feats


@dataclass
class GraphInput:
    x: np.ndarray  # [n_atoms, N_NODE_FEATURES]
    edges: dict[str, np.ndarray]  # bond order -> [n_directed, 2] (src, dst)

    @classmethod
    def from_graph(cls, g: MolecularGraph) -> GraphInput:
        edges: dict[str, list[tuple[int, int]]] = {o: [] for o in BOND_ORDERS}
        for b in g.bonds:
            edges[b.order] += [(b.begin, b.end), (b.end, b.begin)]
        return cls(node_features(g), {o: np.array(e, dtype=np.int64).reshape(-1, 2) for o, e in edges.items()})

    @property
    def n_atoms(self) -> int:
        return self.x.shape[0]

    @property
    def n_directed_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())


@dataclass
class RecordFeatures:
    tokens: np.ndarray | None = None
    graph: GraphInput | None = None
    image: np.ndarray | None = None
    quantum: np.ndarray | None = None
    fingerprint: np.ndarray | None = None


@dataclass
class Featurizer:
    """Turns records into parameter-free numeric inputs, with a cache."""

    config: EncoderConfig
    vocab: tuple[str, ...]
    normalizer: QuantumNormalizer
    modalities: tuple[str, ...] = MODALITIES
    _cache: dict = field(default_factory=dict, repr=False)

    def __call__(self, record) -> RecordFeatures:
        key = (record, self.modalities)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = self._compute(record)
        return hit

    def _compute(self, record) -> RecordFeatures:
        cfg = self.config
        feats = RecordFeatures()
        graph = None
        if {"graph", "image", "fingerprint"} & set(self.modalities):
            graph = parse_smiles(record.smiles)
        if "sequence" in self.modalities:
            lexemes = text_lexemes(record, cfg.text_source)[: cfg.max_seq_len]
            if not lexemes:
                raise EmptySequence("empty text input")
            index = {s: i for i, s in enumerate(self.vocab)}
            feats.tokens = np.array([index.get(s, 0) for s in lexemes], dtype=np.int64)
        if "graph" in self.modalities:
            feats.graph = GraphInput.from_graph(graph)
        if "image" in self.modalities:
            feats.image = render_image(graph, cfg.image_size).pixels
        if "quantum" in self.modalities:
            feats.quantum = quantum_readout(record.quantum.as_tuple(), self.normalizer, cfg)
        if "fingerprint" in self.modalities:
            feats.fingerprint = morgan_fingerprint(graph, cfg.fp_radius, cfg.fp_bits).bits.astype(np.float64)
        return feats


# --------------------------------------------------------- parameter init

def init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return tc.parameter(rng.uniform(-bound, bound, size=shape))


def init_linear(params: Params, rng: np.random.Generator, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}.w"] = init_weight(rng, (n_in, n_out), n_in)
    params[f"{name}.b"] = tc.parameter(np.zeros(n_out))


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def init_layer_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.g"] = tc.parameter(np.ones(dim))
    params[f"{name}.b"] = tc.parameter(np.zeros(dim))


def affine_layer_norm(params: Params, name: str, x: Tensor) -> Tensor:
    return tc.layer_norm(x) * params[f"{name}.g"] + params[f"{name}.b"]


def init_attention(params: Params, rng: np.random.Generator, name: str, d: int) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.{proj}", d, d)


def multi_head_attention(params: Params, name: str, x: Tensor, n_heads: int, key_mask: np.ndarray | None = None):
    """Self-attention over ``x`` of shape [B, T, d]; returns (output, weights [B, h, T, T])."""
    B, T, d = x.shape
    dh = d // n_heads

    def heads(t: Tensor) -> Tensor:
        return tc.transpose(tc.reshape(t, (B, T, n_heads, dh)), (0, 2, 1, 3))

    q = heads(linear(params, f"{name}.q", x))
    k = heads(linear(params, f"{name}.k", x))
    v = heads(linear(params, f"{name}.v", x))
    scores = (q @ tc.transpose(k)) * (1.0 / math.sqrt(dh))
    if key_mask is not None:
        scores = scores + np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
    weights = tc.softmax(scores, axis=-1)
    ctx = tc.reshape(tc.transpose(weights @ v, (0, 2, 1, 3)), (B, T, d))
    return linear(params, f"{name}.o", ctx), weights.data


# ------------------------------------------------------------ sequence

def init_sequence(params: Params, rng: np.random.Generator, cfg: EncoderConfig, vocab_size: int, prefix: str = "seq") -> None:
    d = cfg.d_model
    params[f"{prefix}.embed"] = init_weight(rng, (vocab_size, d), 1)
    for i in range(cfg.n_blocks):
        blk = f"{prefix}.block{i}"
        init_attention(params, rng, f"{blk}.attn", d)
        init_layer_norm(params, f"{blk}.ln1", d)
        init_linear(params, rng, f"{blk}.ff1", d, cfg.ffn_dim)
        init_linear(params, rng, f"{blk}.ff2", cfg.ffn_dim, d)
        init_layer_norm(params, f"{blk}.ln2", d)


def sequence_forward(params: Params, cfg: EncoderConfig, ids: np.ndarray, mask: np.ndarray,
                     prefix: str = "seq", attention: list | None = None) -> Tensor:
    """ids, mask: [B, L]. Returns mean-pooled [B, d_model]."""
    B, L = ids.shape
    if L == 0 or not mask.any(axis=1).all():
        raise EmptySequence("every sequence needs at least one token")
    x = tc.embedding_lookup(params[f"{prefix}.embed"], ids) + positional_encoding(L, cfg.d_model)
    for i in range(cfg.n_blocks):
        blk = f"{prefix}.block{i}"
        attn, w = multi_head_attention(params, f"{blk}.attn", x, cfg.n_heads, mask)
        if attention is not None:
            attention.append(w)
        x = affine_layer_norm(params, f"{blk}.ln1", x + attn)
        ff = linear(params, f"{blk}.ff2", tc.relu(linear(params, f"{blk}.ff1", x)))
        x = affine_layer_norm(params, f"{blk}.ln2", x + ff)
    m = mask.astype(np.float64)
    pooled = tc.sum(x * m[:, :, None], axis=1)
    return pooled * (1.0 / m.sum(axis=1, keepdims=True))


def pad_tokens(seqs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    L = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), L), dtype=np.int64)
    mask = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def encode_sequence(tokens: TokenSequence, params: Params, cfg: EncoderConfig, prefix: str = "seq",
                    attention: list | None = None) -> ModalityEmbedding:
    if len(tokens) == 0:
        raise EmptySequence("cannot encode an empty token sequence")
    n_vocab = params[f"{prefix}.embed"].shape[0]
    if max(tokens.tokens) >= n_vocab:
        raise EncoderError("token index exceeds embedding table")
    ids = np.array(tokens.tokens[: cfg.max_seq_len], dtype=np.int64)[None]
    out = sequence_forward(params, cfg, ids, np.ones_like(ids, dtype=bool), prefix, attention)
    return ModalityEmbedding("sequence", tc.reshape(out, (cfg.d_model,)))


# ---------------------------------------------------------------- graph

def init_graph(params: Params, rng: np.random.Generator, cfg: EncoderConfig) -> None:
    h = cfg.gnn_hidden
    init_linear(params, rng, "graph.in", N_NODE_FEATURES, h)
    for layer in range(GNN_LAYERS):
        params[f"graph.layer{layer}.self"] = init_weight(rng, (h, h), h)
        for order in BOND_ORDERS:
            params[f"graph.layer{layer}.{order}"] = init_weight(rng, (h, h), h)
        params[f"graph.layer{layer}.b"] = tc.parameter(np.zeros(h))
    init_linear(params, rng, "graph.out", h, cfg.d_model)


def batch_graphs(graphs: Sequence[GraphInput]) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """Stack graphs into one disjoint union: node features, typed edges, node→graph index."""
    xs, owner, offset = [], [], 0
    edges: dict[str, list[np.ndarray]] = {o: [] for o in BOND_ORDERS}
    for gi, g in enumerate(graphs):
        xs.append(g.x)
        owner.append(np.full(g.n_atoms, gi, dtype=np.int64))
        for order, e in g.edges.items():
            edges[order].append(e + offset)
        offset += g.n_atoms
    merged = {o: np.concatenate(e).reshape(-1, 2) if e else np.zeros((0, 2), np.int64) for o, e in edges.items()}
    return np.concatenate(xs), merged, np.concatenate(owner)


def graph_forward(params: Params, cfg: EncoderConfig, x: np.ndarray, edges: dict[str, np.ndarray],
                  owner: np.ndarray, n_graphs: int) -> Tensor:
    n = x.shape[0]
    h = linear(params, "graph.in", tc.tensor(x))
    for layer in range(GNN_LAYERS):
        pre = h @ params[f"graph.layer{layer}.self"] + params[f"graph.layer{layer}.b"]
        for order in BOND_ORDERS:
            e = edges[order]
            if len(e) == 0:
                continue
            msg = tc.embedding_lookup(h, e[:, 0]) @ params[f"graph.layer{layer}.{order}"]
            pre = pre + tc.index_add(msg, e[:, 1], n)
        h = tc.relu(pre) + h
    counts = np.bincount(owner, minlength=n_graphs).astype(np.float64)
    pooled = tc.index_add(h, owner, n_graphs) * (1.0 / counts[:, None])
    return linear(params, "graph.out", pooled)


def encode_graph(g: MolecularGraph, params: Params, cfg: EncoderConfig) -> ModalityEmbedding:
    x, edges, owner = batch_graphs([GraphInput.from_graph(g)])
    out = graph_forward(params, cfg, x, edges, owner, 1)
    return ModalityEmbedding("graph", tc.reshape(out, (cfg.d_model,)))


# ---------------------------------------------------------------- image

def init_image(params: Params, rng: np.random.Generator, cfg: EncoderConfig) -> None:
    c_in = 1
    for i, c_out in enumerate(cfg.cnn_channels):
        fan_in = c_in * CONV_KERNEL * CONV_KERNEL
        params[f"image.conv{i}.w"] = init_weight(rng, (c_out, c_in, CONV_KERNEL, CONV_KERNEL), fan_in)
        params[f"image.conv{i}.b"] = tc.parameter(np.zeros(c_out))
        c_in = c_out
    side = conv_output_size(cfg.image_size)[-1]
    init_linear(params, rng, "image.out", cfg.cnn_channels[-1] * side * side, cfg.d_model)


def image_forward(params: Params, cfg: EncoderConfig, pixels: np.ndarray) -> Tensor:
    """pixels: [B, S, S] → [B, d_model]."""
    B = pixels.shape[0]
    x = tc.tensor(pixels[:, None, :, :])
    for i in range(3):
        x = tc.conv2d(x, params[f"image.conv{i}.w"], CONV_STRIDE)
        x = tc.relu(x + tc.reshape(params[f"image.conv{i}.b"], (-1, 1, 1)))
    return linear(params, "image.out", tc.reshape(x, (B, -1)))


def encode_image(img: MolecularImage, params: Params, cfg: EncoderConfig) -> ModalityEmbedding:
    if img.height != img.width:
        raise EncoderError("image must be square")
    if img.height < 8:
        raise ImageTooSmall("image must be at least 8x8")
    conv_output_size(img.height)
    out = image_forward(params, cfg, img.pixels[None])
    return ModalityEmbedding("image", tc.reshape(out, (cfg.d_model,)))


# ------------------------------------------------------- quantum / fingerprint

def init_quantum(params: Params, rng: np.random.Generator, cfg: EncoderConfig) -> None:
    init_linear(params, rng, "quantum", cfg.quantum_width, cfg.d_model)


def quantum_forward(params: Params, readout: np.ndarray) -> Tensor:
    return tc.relu(linear(params, "quantum", tc.tensor(readout)))


def encode_quantum(descriptors: Sequence[float], params: Params, cfg: EncoderConfig,
                   normalizer: QuantumNormalizer) -> ModalityEmbedding:
    readout = quantum_readout(descriptors, normalizer, cfg)
    return ModalityEmbedding("quantum", tc.reshape(quantum_forward(params, readout[None]), (cfg.d_model,)))


def init_fingerprint(params: Params, rng: np.random.Generator, cfg: EncoderConfig) -> None:
    init_linear(params, rng, "fingerprint", cfg.fp_bits, cfg.d_model)


def fingerprint_forward(params: Params, bits: np.ndarray) -> Tensor:
    return tc.relu(linear(params, "fingerprint", tc.tensor(bits)))


def encode_fingerprint(fp: Fingerprint, params: Params, cfg: EncoderConfig) -> ModalityEmbedding:
    if fp.n_bits != cfg.fp_bits:
        raise LengthMismatch(f"fingerprint has {fp.n_bits} bits, encoder expects {cfg.fp_bits}")
    out = fingerprint_forward(params, fp.bits.astype(np.float64)[None])
    return ModalityEmbedding("fingerprint", tc.reshape(out, (cfg.d_model,)))


INITIALIZERS = {
    "graph": init_graph,
    "image": init_image,
    "quantum": init_quantum,
    "fingerprint": init_fingerprint,
}
