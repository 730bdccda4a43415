"""Metrics, the incremental-modality ablation harness and the cost profiler."""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import qstate
from . import tensor_core as tc
from .data import EC_CLASS_NAMES, EnzymeRecord, stratified_split
from .encoders import CONV_KERNEL, GNN_LAYERS, N_NODE_FEATURES, EncoderConfig, RecordFeatures, conv_output_size
from .fusion_model import ModelConfig, QVTModel, predict_proba
from .training import TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_ROWS = (
    ("SMILES/SELFIES + Quantum Descriptors", ("sequence", "quantum")),
    ("+ Molecular Graphs", ("sequence", "quantum", "graph")),
    ("+ 2D Molecular Images", ("sequence", "quantum", "graph", "image")),
    ("+ Molecular Fingerprints", ("sequence", "quantum", "graph", "image", "fingerprint")),
)
AUC_REFERENCE_BAND = 0.78
SWEEP_WIDTHS = (2, 4, 8, 16)


# ------------------------------------------------------------------ metrics

@dataclass
class MetricsReport:
    top1: float
    topk: dict[int, float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: list[tuple[float, float, float, int]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topk"] = {str(k): v for k, v in self.topk.items()}
        d["per_class"] = [
            {"precision": p, "recall": r, "f1": f, "support": s} for p, r, f, s in self.per_class
        ]
        return d


@dataclass
class RocSummary:
    per_class_auc: list[float | None]
    macro_auc: float | None


def _check_rows(probabilities, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or y.shape != (probs.shape[0],):
        raise tc.ShapeMismatch(f"probabilities {probs.shape} do not match labels {y.shape}")
    return probs, y


def top_k_accuracy(probabilities, labels, k: int) -> float:
    """Fraction of rows whose label is among the k largest scores;
    equal scores rank the lower class index first."""
    probs, y = _check_rows(probabilities, labels)
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k must be in 1..{probs.shape[1]}")
    if len(y) == 0:
        return 0.0
    ranking = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(ranking == y[:, None], axis=1)))


def confusion(predictions, labels, n_classes: int) -> np.ndarray:
    """counts[true, predicted]."""
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return counts


def macro_prf(predictions, labels, n_classes: int) -> dict:
    pred = np.asarray(predictions, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    per_class = []
    for c in range(n_classes):
        tp = int(np.sum((pred == c) & (y == c)))
        fp = int(np.sum((pred == c) & (y != c)))
        fn = int(np.sum((pred != c) & (y == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class.append((precision, recall, f1, tp + fn))
    counted = [row for row in per_class if row[3] > 0]

    def avg(i):
        return float(np.mean([row[i] for row in counted])) if counted else 0.0

    return {"macro_precision": avg(0), "macro_recall": avg(1), "macro_f1": avg(2), "per_class": per_class}


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    sorted_x = x[order]
    ranks = np.empty(len(x))
    start = 0
    while start < len(x):
        end = start
        while end + 1 < len(x) and sorted_x[end + 1] == sorted_x[start]:
            end += 1
        ranks[order[start : end + 1]] = (start + end) / 2 + 1
        start = end + 1
    return ranks


def binary_auc(scores, positives) -> float | None:
    """Mann–Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auc_roc_ovr(probabilities, labels, n_classes: int) -> RocSummary:
    probs, y = _check_rows(probabilities, labels)
    per_class = [binary_auc(probs[:, c], y == c) for c in range(n_classes)]
    defined = [a for a in per_class if a is not None]
    return RocSummary(per_class, float(np.mean(defined)) if defined else None)


def metrics_report(probabilities, labels, n_classes: int, ks: Sequence[int] = (1, 2, 3)) -> MetricsReport:
    probs, y = _check_rows(probabilities, labels)
    pred = np.argsort(-probs, axis=1, kind="stable")[:, 0] if len(y) else np.zeros(0, np.int64)
    prf = macro_prf(pred, y, n_classes)
    ks = [k for k in ks if k <= n_classes]
    return MetricsReport(
        top1=top_k_accuracy(probs, y, 1),
        topk={k: top_k_accuracy(probs, y, k) for k in ks},
        macro_precision=prf["macro_precision"],
        macro_recall=prf["macro_recall"],
        macro_f1=prf["macro_f1"],
        per_class=prf["per_class"],
    )


def evaluate_model(model: QVTModel, records: Sequence[EnzymeRecord]) -> dict:
    """Full evaluation payload: metrics, confusion matrix and AUC summary."""
    n = model.config.n_classes
    probs = predict_proba(model, records)
    y = np.array([r.label for r in records], dtype=np.int64)
    report = metrics_report(probs, y, n)
    pred = np.argsort(-probs, axis=1, kind="stable")[:, 0] if len(y) else np.zeros(0, np.int64)
    roc = auc_roc_ovr(probs, y, n)
    out = report.to_dict()
    out["n_records"] = len(records)
    out["confusion_matrix"] = confusion(pred, y, n).tolist()
    out["auc"] = {"per_class": roc.per_class_auc, "macro": roc.macro_auc}
    return out


def confusion_csv(matrix: Sequence[Sequence[int]]) -> str:
    n = len(matrix)
    names = [f"EC{c + 1}" for c in range(n)]
    lines = ["true\\pred," + ",".join(names)]
    for name, row in zip(names, matrix):
        lines.append(name + "," + ",".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"


def metrics_table(payload: dict) -> str:
    lines = []
    for k, v in payload["topk"].items():
        lines.append(f"top-{k} accuracy   {v * 100:6.2f}%")
    lines.append(f"macro precision  {payload['macro_precision'] * 100:6.2f}%")
    lines.append(f"macro recall     {payload['macro_recall'] * 100:6.2f}%")
    lines.append(f"macro F1         {payload['macro_f1'] * 100:6.2f}%")
    if payload.get("auc", {}).get("macro") is not None:
        lines.append(f"macro AUC-ROC    {payload['auc']['macro']:.4f}")
    lines.append("")
    lines.append(f"{'class':<18}{'precision':>10}{'recall':>10}{'f1':>10}{'support':>9}")
    for c, row in enumerate(payload["per_class"]):
        name = f"EC{c + 1} {EC_CLASS_NAMES[c]}" if c < len(EC_CLASS_NAMES) else f"class {c + 1}"
        lines.append(f"{name:<18}{row['precision']:>10.3f}{row['recall']:>10.3f}{row['f1']:>10.3f}{row['support']:>9d}")
    return "\n".join(lines) + "\n"


def write_report(path, payload: dict, table: str, confusion_matrix=None) -> None:
    """JSON at ``path``, aligned text table next to it, optional confusion CSV."""
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    path.with_suffix(".txt").write_text(table, encoding="utf-8")
    if confusion_matrix is not None:
        path.with_suffix(".confusion.csv").write_text(confusion_csv(confusion_matrix), encoding="utf-8")


# ----------------------------------------------------------------- ablation

@dataclass
class AblationReport:
    rows: list[tuple[str, MetricsReport]]
    modalities: list[tuple[str, ...]]
    seeds: list[int]
    split_digests: dict[int, str] = field(default_factory=dict)
    per_seed_top1: list[list[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "split_digests": {str(k): v for k, v in self.split_digests.items()},
            "rows": [
                {
                    "label": label,
                    "modalities": list(mods),
                    "top1": m.top1,
                    "macro_precision": m.macro_precision,
                    "macro_recall": m.macro_recall,
                    "macro_f1": m.macro_f1,
                    "per_seed_top1": seeds,
                }
                for (label, m), mods, seeds in zip(self.rows, self.modalities, self.per_seed_top1)
            ],
        }

    def table(self) -> str:
        width = max(len(label) for label, _ in self.rows) + 2
        head = f"{'Model Variant':<{width}}| {'Top-1 Acc':>9} | {'Precision':>9} | {'Recall':>9} | {'F1-Score':>9}"
        rule = "-" * len(head)
        lines = [rule, head, rule]
        for label, m in self.rows:
            lines.append(
                f"{label:<{width}}| {m.top1 * 100:>9.1f} | {m.macro_precision * 100:>9.1f} | "
                f"{m.macro_recall * 100:>9.1f} | {m.macro_f1 * 100:>9.1f}"
            )
        lines.append(rule)
        lines.append("Metrics are macro-averaged across enzyme classes; mean over seeds " + ", ".join(map(str, self.seeds)))
        return "\n".join(lines) + "\n"


def _mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    ks = reports[0].topk.keys()
    n_classes = len(reports[0].per_class)
    per_class = []
    for c in range(n_classes):
        rows = [r.per_class[c] for r in reports]
        per_class.append(tuple(float(np.mean([row[i] for row in rows])) for i in range(3)) + (int(np.sum([row[3] for row in rows])),))
    return MetricsReport(
        top1=float(np.mean([r.top1 for r in reports])),
        topk={k: float(np.mean([r.topk[k] for r in reports])) for k in ks},
        macro_precision=float(np.mean([r.macro_precision for r in reports])),
        macro_recall=float(np.mean([r.macro_recall for r in reports])),
        macro_f1=float(np.mean([r.macro_f1 for r in reports])),
        per_class=per_class,
    )


def run_ablation(base_config: TrainConfig, data: Sequence[EnzymeRecord], seeds: Sequence[int],
                 rows=ABLATION_ROWS) -> AblationReport:
    """Train and test each incremental modality set with identical
    hyperparameters, sharing one stratified split per seed."""
    if not data:
        raise ValueError("ablation needs data")
    per_row: list[list[MetricsReport]] = [[] for _ in rows]
    digests = {}
    for seed in seeds:
        split = stratified_split(data, base_config.split_ratios, seed)
        digests[seed] = split.digest()
        y = np.array([r.label for r in split.test])
        for i, (label, mods) in enumerate(rows):
            cfg = base_config.with_modalities(mods)
            cfg.seed = seed
            result = train(cfg, data, split)
            if split.digest() != digests[seed]:
                raise RuntimeError("training modified the shared split")
            probs = predict_proba(result.model, split.test)
            per_row[i].append(metrics_report(probs, y, cfg.n_classes))
            log.info("ablation seed %d row %r top1 %.4f", seed, label, per_row[i][-1].top1)
    return AblationReport(
        rows=[(label, _mean_reports(reports)) for (label, _), reports in zip(rows, per_row)],
        modalities=[tuple(m) for _, m in rows],
        seeds=list(seeds),
        split_digests=digests,
        per_seed_top1=[[r.top1 for r in reports] for reports in per_row],
    )


def run_feature_sweep(base_config: TrainConfig, data: Sequence[EnzymeRecord], seeds: Sequence[int],
                      widths: Sequence[int] = SWEEP_WIDTHS) -> dict:
    """Macro AUC-ROC of the configured model as the quantum feature width
    (and hence qubit count) varies."""
    out = []
    for width in widths:
        aucs = []
        for seed in seeds:
            cfg = copy.deepcopy(base_config)
            cfg.seed = seed
            cfg.encoder = EncoderConfig.from_dict({**cfg.encoder.to_dict(), "quantum_features": width})
            split = stratified_split(data, cfg.split_ratios, seed)
            result = train(cfg, data, split)
            probs = predict_proba(result.model, split.test)
            roc = auc_roc_ovr(probs, [r.label for r in split.test], cfg.n_classes)
            aucs.append(roc.macro_auc)
        out.append({"quantum_features": width, "n_qubits": cfg.encoder.n_qubits,
                    "macro_auc": float(np.mean(aucs)), "per_seed_auc": aucs})
    return {
        "operationalization": "quantum descriptor width swept by graded monomial expansion of the three descriptors",
        "reference_auc_band": AUC_REFERENCE_BAND,
        "widths": out,
    }


def sweep_table(sweep: dict) -> str:
    lines = [f"{'features':>8} {'qubits':>6} {'macro AUC':>10}"]
    for row in sweep["widths"]:
        lines.append(f"{row['quantum_features']:>8} {row['n_qubits']:>6} {row['macro_auc']:>10.4f}")
    lines.append(f"reference band: {sweep['reference_auc_band']:.2f}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------ cost model

@dataclass(frozen=True)
class InputShape:
    """Sizes of one record's inputs, which determine its forward-pass cost."""

    seq_len: int = 32
    n_atoms: int = 12
    n_bonds: int = 12

    @classmethod
    def from_features(cls, feats: RecordFeatures) -> InputShape:
        seq_len = len(feats.tokens) if feats.tokens is not None else 0
        if feats.graph is not None:
            return cls(seq_len, feats.graph.n_atoms, feats.graph.n_directed_edges // 2)
        return cls(seq_len, 0, 0)


def linear_macs(n_in: int, n_out: int, rows: int = 1) -> int:
    return rows * n_in * n_out


def conv2d_macs(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return c_out * c_in * k * k * h_out * w_out


def attention_macs(tokens: int, d: int) -> int:
    """Q, K, V and output projections plus the two score matmuls."""
    return 4 * tokens * d * d + 2 * tokens * tokens * d


def modality_macs(modality: str, enc: EncoderConfig, shape: InputShape) -> int:
    d = enc.d_model
    if modality == "sequence":
        L = min(shape.seq_len, enc.max_seq_len)
        per_block = attention_macs(L, d) + linear_macs(d, enc.ffn_dim, L) + linear_macs(enc.ffn_dim, d, L)
        return enc.n_blocks * per_block
    if modality == "graph":
        h, n, e = enc.gnn_hidden, shape.n_atoms, 2 * shape.n_bonds
        return linear_macs(N_NODE_FEATURES, h, n) + GNN_LAYERS * (n + e) * h * h + linear_macs(h, d)
    if modality == "image":
        total, c_in, size = 0, 1, enc.image_size
        for c_out, out in zip(enc.cnn_channels, conv_output_size(enc.image_size)):
            total += conv2d_macs(c_in, c_out, CONV_KERNEL, out, out)
            c_in, size = c_out, out
        return total + linear_macs(c_in * size * size, d)
    if modality == "quantum":
        return linear_macs(enc.quantum_width, d)
    if modality == "fingerprint":
        return linear_macs(enc.fp_bits, d)
    raise ValueError(f"unknown modality {modality!r}")


def count_macs(config: ModelConfig | TrainConfig, shape: InputShape | None = None) -> int:
    """Closed-form multiply-accumulates for one record's forward pass."""
    if isinstance(config, TrainConfig):
        config = config.model_config()
    shape = shape or InputShape()
    enc = config.encoder
    d, m = enc.d_model, len(config.modalities)
    total = sum(modality_macs(mod, enc, shape) for mod in config.modalities)
    total += m * d * d + attention_macs(m + 1, d)
    total += linear_macs(d, d) + linear_macs(d, config.n_classes)
    return total


# -------------------------------------------------------------- profiling

@dataclass
class ProfileReport:
    mac_ops: int
    circuit_depth: int
    ry_count: int
    cnot_count: int
    n_qubits: int
    param_count: int
    param_memory_bytes: int
    train_minutes: float
    top1: float

    def table(self) -> str:
        rows = [
            ("Accuracy (%)", f"{self.top1 * 100:.1f}"),
            ("MAC (Ops)", f"{self.mac_ops:.3e}"),
            ("Circuit Depth", str(self.circuit_depth)),
            ("Training Time (min)", f"{self.train_minutes:.2f}"),
            ("Memory (MB)", f"{self.param_memory_bytes / 2**20:.3f}"),
        ]
        lines = [f"{'Models':<22}| {'QVT (this build)':>16}", "-" * 40]
        lines += [f"{name:<22}| {value:>16}" for name, value in rows]
        return "\n".join(lines) + "\n"


def param_memory_bytes(params) -> int:
    return 8 * sum(int(np.prod(p.shape)) for p in params.values())


def encoder_circuit_stats(enc: EncoderConfig) -> qstate.CircuitStats:
    # the gate list depends only on the qubit count, so a uniform vector is representative
    amps = qstate.prepare_amplitudes(np.ones(enc.quantum_features))
    return qstate.circuit_stats(qstate.build_mottonen_circuit(amps))


def profile(config: TrainConfig, data: Sequence[EnzymeRecord]) -> ProfileReport:
    start = time.perf_counter()
    result = train(config, data)
    minutes = (time.perf_counter() - start) / 60.0
    model = result.model
    shapes = [InputShape.from_features(model.featurizer(r)) for r in data]
    macs = [count_macs(model.config, s) for s in shapes]
    stats = encoder_circuit_stats(config.encoder)
    test = result.split.test or result.split.validation
    probs = predict_proba(model, test)
    acc = top_k_accuracy(probs, [r.label for r in test], 1) if len(test) else 0.0
    return ProfileReport(
        mac_ops=int(round(float(np.mean(macs)))),
        circuit_depth=stats.depth,
        ry_count=stats.ry_count,
        cnot_count=stats.cnot_count,
        n_qubits=config.encoder.n_qubits,
        param_count=model.n_parameters(),
        param_memory_bytes=param_memory_bytes(model.params),
        train_minutes=minutes,
        top1=acc,
    )
