import math

import numpy as np
import pytest

from qvt import tensor_core as tc
from qvt.data import EnzymeRecord, QuantumDescriptors
from qvt.encoders import (
    EPS_FLOOR,
    MODALITIES,
    EmptySequence,
    EncoderError,
    EncoderConfig,
    Featurizer,
    ImageTooSmall,
    MissingModality,
    NonFiniteDescriptor,
    QuantumNormalizer,
    conv_output_size,
    encode_fingerprint,
    encode_graph,
    encode_image,
    encode_quantum,
    encode_sequence,
    expand_descriptors,
    init_fingerprint,
    init_graph,
    init_image,
    init_quantum,
    init_sequence,
    linear,
    multi_head_attention,
    init_attention,
    node_features,
    positional_encoding,
    quantum_readout,
    text_lexemes,
)
from qvt.mol_chem import (
    Fingerprint,
    LengthMismatch,
    MolecularImage,
    TokenSequence,
    morgan_fingerprint,
    parse_smiles,
    render_image,
    tokenize_smiles,
)

from conftest import load_corpus, tiny_encoder


def fresh(init, cfg, *args, seed=0):
    params = {}
    init(params, np.random.default_rng(seed), cfg, *args)
    return params


# ---------------------------------------------------------------- config

def test_config_validation():
    EncoderConfig()
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(quantum_readout="phase")
    with pytest.raises(ValueError):
        EncoderConfig(gnn_hidden=0)
    with pytest.raises(ImageTooSmall):
        EncoderConfig(image_size=8)
    cfg = EncoderConfig(quantum_features=16)
    assert cfg.n_qubits == 4 and cfg.quantum_width == 16
    assert EncoderConfig(quantum_features=3, quantum_readout="z_expectations").quantum_width == 2
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        EncoderConfig.from_dict({"bogus": 1})


def test_conv_sizes():
    assert conv_output_size(32) == [15, 7, 3]
    assert conv_output_size(15) == [7, 3, 1]
    with pytest.raises(ImageTooSmall):
        conv_output_size(14)


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[2, 0] == pytest.approx(math.sin(2.0))
    assert pe[2, 3] == pytest.approx(math.cos(2.0 / 100.0))


# -------------------------------------------------------------- sequence

def test_sequence_shape_and_attention_rows():
    cfg = tiny_encoder()
    params = fresh(init_sequence, cfg, 12)
    for length in (1, 5, cfg.max_seq_len):
        toks = TokenSequence(tuple(np.arange(length) % 12), tuple(f"t{i}" for i in range(12)))
        assert encode_sequence(toks, params, cfg).vector.shape == (cfg.d_model,)
    attn = []
    toks = TokenSequence(tuple(np.random.default_rng(3).integers(0, 12, size=10)), tuple(f"t{i}" for i in range(12)))
    encode_sequence(toks, params, cfg, attention=attn)
    w = attn[0]
    assert w.shape == (1, cfg.n_heads, 10, 10)
    assert np.max(np.abs(w.sum(-1) - 1.0)) <= 1e-12


def test_sequence_degenerate_no_blocks():
    cfg = tiny_encoder(n_blocks=0)
    params = fresh(init_sequence, cfg, 5)
    ids = [3, 1, 4, 1]
    out = encode_sequence(TokenSequence(tuple(ids), tuple("abcde")), params, cfg).vector.data
    expect = (params["seq.embed"].data[ids] + positional_encoding(4, cfg.d_model)).mean(0)
    assert np.allclose(out, expect, atol=1e-14)


def test_sequence_zero_sublayers_reduce_to_layer_norm():
    cfg = tiny_encoder(n_blocks=1)
    params = fresh(init_sequence, cfg, 5)
    for name, p in params.items():
        if ".attn." in name or ".ff" in name:
            p.data = np.zeros_like(p.data)
    ids = [0, 2, 2, 4]
    out = encode_sequence(TokenSequence(tuple(ids), tuple("abcde")), params, cfg).vector.data
    x = params["seq.embed"].data[ids] + positional_encoding(4, cfg.d_model)

    def ln(v):
        c = v - v.mean(-1, keepdims=True)
        return c / np.sqrt((c * c).mean(-1, keepdims=True) + 1e-5)

    assert np.allclose(out, ln(ln(x)).mean(0), atol=1e-12)


def test_sequence_order_matters():
    cfg = tiny_encoder()
    params = fresh(init_sequence, cfg, 4)
    a = encode_sequence(TokenSequence((0, 1, 2, 3), tuple("abcd")), params, cfg).vector.data
    b = encode_sequence(TokenSequence((1, 0, 2, 3), tuple("abcd")), params, cfg).vector.data
    assert np.max(np.abs(a - b)) > 1e-6


def test_sequence_errors():
    cfg = tiny_encoder()
    params = fresh(init_sequence, cfg, 3)
    with pytest.raises(EmptySequence):
        encode_sequence(TokenSequence((), ("a",)), params, cfg)
    with pytest.raises(EncoderError):
        encode_sequence(TokenSequence((4,), tuple("abcde")), params, cfg)


def test_padding_mask_ignored_positions():
    """A padded batch row gives the same embedding as the unpadded sequence."""
    from qvt.encoders import pad_tokens, sequence_forward

    cfg = tiny_encoder()
    params = fresh(init_sequence, cfg, 6)
    short, long = np.array([1, 2, 3]), np.array([5, 4, 3, 2, 1, 0])
    ids, mask = pad_tokens([short, long])
    batch = sequence_forward(params, cfg, ids, mask).data
    alone = sequence_forward(params, cfg, short[None], np.ones((1, 3), bool)).data
    assert np.allclose(batch[0], alone[0], atol=1e-12)


def test_attention_key_mask_zeroes_weights(rng):
    params = {}
    init_attention(params, rng, "a", 8)
    x = tc.tensor(rng.normal(size=(1, 4, 8)))
    mask = np.array([[True, True, False, False]])
    _, w = multi_head_attention(params, "a", x, 2, mask)
    assert np.all(w[..., 2:] < 1e-300)


# ----------------------------------------------------------------- graph

def test_node_features():
    g = parse_smiles("c1ccccc1O")
    x = node_features(g)
    assert x.shape == (7, 13)
    assert x[0, 11] == 1.0 and x[6, 11] == 0.0  # aromatic flag
    assert x[5, 12] == 3.0  # ring atom carrying the O


def test_graph_single_atom_self_path_only():
    cfg = tiny_encoder()
    params = fresh(init_graph, cfg)
    base = encode_graph(parse_smiles("C"), params, cfg).vector.data
    for name in params:
        if any(name.endswith(o) for o in ("single", "double", "triple", "aromatic")):
            params[name].data = params[name].data * 0 + 7.0
    assert np.array_equal(encode_graph(parse_smiles("C"), params, cfg).vector.data, base)


def test_graph_hand_computed_two_nodes():
    cfg = tiny_encoder(gnn_hidden=2, d_model=2, n_heads=1)
    params = fresh(init_graph, cfg)
    w_in = np.zeros((13, 2))
    w_in[1, 0] = 0.5   # carbon
    w_in[3, 1] = -0.3  # oxygen
    w_in[12, :] = [0.1, 0.2]  # degree
    params["graph.in.w"].data = w_in
    params["graph.in.b"].data = np.array([0.05, -0.02])
    hand = {}
    for layer in range(3):
        ws = np.array([[0.3 + layer * 0.1, -0.2], [0.4, 0.1]])
        wsingle = np.array([[-0.5, 0.6], [0.2, 0.3 - layer * 0.05]])
        params[f"graph.layer{layer}.self"].data = ws
        params[f"graph.layer{layer}.single"].data = wsingle
        params[f"graph.layer{layer}.b"].data = np.array([0.01, -0.03])
        hand[layer] = (ws, wsingle, np.array([0.01, -0.03]))
    params["graph.out.w"].data = np.array([[1.0, -1.0], [0.5, 2.0]])
    params["graph.out.b"].data = np.array([0.1, 0.0])

    # manual forward for C-O
    feats = [np.zeros(13), np.zeros(13)]
    feats[0][1] = 1
    feats[0][12] = 1
    feats[1][3] = 1
    feats[1][12] = 1
    h = [f @ w_in + np.array([0.05, -0.02]) for f in feats]
    for layer in range(3):
        ws, wsingle, b = hand[layer]
        new = []
        for v, u in ((0, 1), (1, 0)):
            pre = h[v] @ ws + h[u] @ wsingle + b
            new.append(np.maximum(pre, 0) + h[v])
        h = new
    expect = ((h[0] + h[1]) / 2) @ params["graph.out.w"].data + params["graph.out.b"].data
    got = encode_graph(parse_smiles("CO"), params, cfg).vector.data
    assert np.max(np.abs(got - expect)) < 1e-12


def test_graph_permutation_invariance_cco():
    cfg = tiny_encoder()
    params = fresh(init_graph, cfg)
    g = parse_smiles("CCO")
    ref = encode_graph(g, params, cfg).vector.data
    for perm in ([2, 1, 0], [1, 2, 0], [0, 2, 1]):
        assert np.max(np.abs(encode_graph(g.permuted(perm), params, cfg).vector.data - ref)) < 1e-9


def test_bond_order_changes_graph_embedding():
    cfg = tiny_encoder()
    params = fresh(init_graph, cfg)
    a = encode_graph(parse_smiles("CC"), params, cfg).vector.data
    b = encode_graph(parse_smiles("C#C"), params, cfg).vector.data
    assert np.max(np.abs(a - b)) > 1e-6


# ----------------------------------------------------------------- image

def test_image_zero_and_shapes():
    cfg = EncoderConfig(d_model=16, n_heads=4)
    params = fresh(init_image, cfg)
    out = encode_image(MolecularImage(np.zeros((32, 32))), params, cfg).vector
    assert out.shape == (16,) and np.all(out.data == 0.0)
    assert params["image.out.w"].shape == (32 * 3 * 3, 16)


def test_image_shift_changes_embedding():
    cfg = tiny_encoder()
    params = fresh(init_image, cfg)
    for p in params.values():
        if p.ndim == 1:
            p.data = p.data + 0.1  # make relu pass for a lone pixel
    a, b = np.zeros((15, 15)), np.zeros((15, 15))
    a[7, 7], b[7, 8] = 1.0, 1.0
    ea = encode_image(MolecularImage(a), params, cfg).vector.data
    eb = encode_image(MolecularImage(b), params, cfg).vector.data
    assert np.max(np.abs(ea - eb)) > 1e-9


def test_image_errors():
    cfg = tiny_encoder()
    params = fresh(init_image, cfg)
    with pytest.raises(ImageTooSmall):
        encode_image(MolecularImage(np.zeros((7, 7))), params, cfg)
    with pytest.raises(ImageTooSmall):
        encode_image(MolecularImage(np.zeros((12, 12))), params, cfg)


# --------------------------------------------------------------- quantum

def test_normalizer_boundary_case():
    norm = QuantumNormalizer.fit([(-300.0, 100.0, 0.01), (-200.0, 180.0, 0.05)])
    shifted = norm.shift((-300.0, 100.0, 0.01))
    assert shifted.tolist() == [EPS_FLOOR] * 3
    readout = quantum_readout((-300.0, 100.0, 0.01), norm, EncoderConfig())
    assert np.allclose(readout, [1 / 3, 1 / 3, 1 / 3, 0.0], atol=1e-10)
    # below the training minimum clamps to the floor
    assert norm.shift((-400.0, 100.0, 0.01))[0] == EPS_FLOOR
    with pytest.raises(NonFiniteDescriptor):
        norm.shift((float("nan"), 1.0, 1.0))


def test_quantum_readout_round_trip():
    norm = QuantumNormalizer.fit([(-300.0, 100.0, 0.01), (-200.0, 180.0, 0.05)])
    desc = (-250.0, 170.0, 0.02)
    shifted = norm.shift(desc)
    readout = quantum_readout(desc, norm, EncoderConfig())
    target = np.append(shifted, 0.0) ** 2 / np.sum(shifted**2)
    assert np.max(np.abs(readout - target)) < 1e-10
    assert abs(readout.sum() - 1.0) < 1e-12


def test_expand_descriptors_monomials():
    x = np.array([2.0, 3.0, 5.0])
    assert expand_descriptors(x, 3).tolist() == [2, 3, 5]
    assert expand_descriptors(x, 2).tolist() == [2, 3]
    assert expand_descriptors(x, 8).tolist() == [2, 3, 5, 4, 6, 10, 9, 15]
    assert len(expand_descriptors(x, 16)) == 16


def test_encode_quantum_shape():
    cfg = tiny_encoder()
    params = fresh(init_quantum, cfg)
    norm = QuantumNormalizer.fit([(0, 0, 0), (1, 1, 1)])
    e = encode_quantum((0.2, 0.4, 0.9), params, cfg, norm)
    assert e.modality == "quantum" and e.vector.shape == (cfg.d_model,)
    assert np.all(e.vector.data >= 0)


# ----------------------------------------------------------- fingerprint

def test_fingerprint_encoder():
    cfg = tiny_encoder()
    params = fresh(init_fingerprint, cfg)
    zero = Fingerprint(np.zeros(cfg.fp_bits, dtype=bool))
    pre = linear(params, "fingerprint", tc.tensor(zero.bits.astype(float)[None])).data
    assert np.all(pre == 0.0)
    assert encode_fingerprint(zero, params, cfg).vector.shape == (cfg.d_model,)
    with pytest.raises(LengthMismatch):
        encode_fingerprint(Fingerprint(np.zeros(32, dtype=bool)), params, cfg)


def test_fingerprint_single_bit_linearity():
    cfg = tiny_encoder()
    params = fresh(init_fingerprint, cfg)
    bits = morgan_fingerprint(parse_smiles("CCO"), 2, cfg.fp_bits).bits.astype(float)
    off = int(np.flatnonzero(bits == 0)[0])
    flipped = bits.copy()
    flipped[off] = 1.0
    pa = linear(params, "fingerprint", tc.tensor(bits[None])).data[0]
    pb = linear(params, "fingerprint", tc.tensor(flipped[None])).data[0]
    assert np.allclose(pb - pa, params["fingerprint.w"].data[off], atol=1e-14)
    ea = encode_fingerprint(Fingerprint(bits > 0), params, cfg).vector.data
    eb = encode_fingerprint(Fingerprint(flipped > 0), params, cfg).vector.data
    assert np.array_equal(eb - ea, np.maximum(pb, 0) - np.maximum(pa, 0))


# ------------------------------------------------------------- featurizer

def make_record(smiles="CC(=O)O", selfies="[C][C][=Branch1][C][=O][O]", sequence="MKTAY"):
    return EnzymeRecord("r1", sequence, smiles, selfies, QuantumDescriptors(-250.0, 150.0, 0.02), 3)


def test_text_sources():
    r = make_record()
    assert text_lexemes(r, "smiles") == ["C", "C", "(", "=", "O", ")", "O"]
    assert text_lexemes(r, "selfies")[0] == "[C]"
    assert text_lexemes(r, "protein") == list("MKTAY")
    with pytest.raises(MissingModality):
        text_lexemes(make_record(selfies=None), "selfies")


def test_all_encoders_finite_same_width():
    cfg = tiny_encoder()
    vocab = ("<unk>", "(", ")", "=", "C", "O", "N", "c", "1")
    norm = QuantumNormalizer.fit([(-300.0, 100.0, 0.01), (-200.0, 180.0, 0.05)])
    params = {}
    rng = np.random.default_rng(0)
    init_sequence(params, rng, cfg, len(vocab))
    for init in (init_graph, init_image, init_quantum, init_fingerprint):
        init(params, rng, cfg)
    feat = Featurizer(cfg, vocab, norm)
    for mol in load_corpus()[:10]:
        r = make_record(smiles=mol["smiles"])
        f = feat(r)
        g = parse_smiles(r.smiles)
        vecs = [
            encode_sequence(tokenize_smiles(r.smiles, vocab), params, cfg),
            encode_graph(g, params, cfg),
            encode_image(render_image(g, cfg.image_size), params, cfg),
            encode_quantum(r.quantum.as_tuple(), params, cfg, norm),
            encode_fingerprint(morgan_fingerprint(g, cfg.fp_radius, cfg.fp_bits), params, cfg),
        ]
        assert [v.modality for v in vecs] == list(MODALITIES)
        for v in vecs:
            assert v.vector.shape == (cfg.d_model,) and np.all(np.isfinite(v.vector.data))
        assert f.tokens is not None and f.graph is not None and f.image.shape == (15, 15)
        assert feat(r) is f  # cached


def test_embeddings_deterministic():
    cfg = tiny_encoder()
    params = fresh(init_graph, cfg)
    g = parse_smiles("c1ccccc1CN")
    a = encode_graph(g, params, cfg).vector.data
    b = encode_graph(parse_smiles("c1ccccc1CN"), params, cfg).vector.data
    assert a.tobytes() == b.tobytes()
