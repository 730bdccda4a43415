"""Command-line entry point: ``qvt <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or validation error.
Structured output is JSON (files or stdout); logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import qstate
from .data import DatasetError, generate_synthetic_dataset, load_dataset, save_dataset, stratified_split
from .evaluation import (
    SWEEP_WIDTHS,
    evaluate_model,
    metrics_table,
    profile,
    run_ablation,
    run_feature_sweep,
    sweep_table,
    write_report,
)
from .fusion_model import load_checkpoint, save_checkpoint
from .mol_chem import MolChemError, morgan_fingerprint, parse_smiles, smiles_lexemes
from .training import TrainConfig, grid_search, train

log = logging.getLogger("qvt")


class UsageError(Exception):
    def __init__(self, message: str, usage: str = ""):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _load_config(path: str | None) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


def _override(config: TrainConfig, args) -> TrainConfig:
    d = config.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    qf = getattr(args, "quantum_features", None)
    if isinstance(qf, int):
        d["encoder"]["quantum_features"] = qf
    return TrainConfig.from_dict(d)


def _parse_grid(items: list[str]) -> dict[str, list]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--grid expects key=v1,v2 but got {item!r}")
        key, values = item.split("=", 1)
        grid[key.strip()] = [json.loads(v) for v in values.split(",")]
    return grid


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    records = generate_synthetic_dataset(args.n_per_class, args.seed)
    save_dataset(records, args.out)
    log.info("wrote %d records to %s", len(records), args.out)
    return 0


def cmd_train(args) -> int:
    config = _override(_load_config(args.config), args)
    data = load_dataset(args.data)
    if args.grid:
        config, results = grid_search(config, data, _parse_grid(args.grid))
        Path(args.out).with_suffix(".grid.json").write_text(_dump(results) + "\n", encoding="utf-8")
    result = train(config, data)
    save_checkpoint(result.model, args.out)
    history_path = Path(args.history) if args.history else Path(args.out).with_suffix(".history.json")
    history_path.write_text(_dump(result.history) + "\n", encoding="utf-8")
    log.info("saved model to %s (best epoch %s)", args.out, result.model.meta.get("best_epoch"))
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.model)
    data = load_dataset(args.data)
    records = data
    if args.split != "all":
        cfg = TrainConfig.from_dict(model.meta["train_config"]) if "train_config" in model.meta else TrainConfig()
        split = stratified_split(data, cfg.split_ratios, cfg.seed)
        records = {"test": split.test, "validation": split.validation, "train": split.train}[args.split]
    payload = evaluate_model(model, records)
    payload["split"] = args.split
    write_report(args.report, payload, metrics_table(payload), payload["confusion_matrix"])
    print(_dump({"top1": payload["top1"], "macro_f1": payload["macro_f1"], "n_records": payload["n_records"]}))
    return 0


def cmd_ablate(args) -> int:
    config = _override(_load_config(args.config), args)
    data = load_dataset(args.data)
    seeds = _int_list(args.seeds)
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    report = run_ablation(config, data, seeds)
    payload = report.to_dict()
    table = report.table()
    if args.quantum_features:
        sweep = run_feature_sweep(config, data, seeds, args.quantum_features)
        payload["feature_sweep"] = sweep
        table += "\n" + sweep_table(sweep)
    write_report(args.report, payload, table)
    sys.stdout.write(table)
    return 0


def cmd_profile(args) -> int:
    config = _override(_load_config(args.config), args)
    data = load_dataset(args.data) if args.data else generate_synthetic_dataset(args.n_per_class, config.seed)
    rep = profile(config, data)
    payload = dict(rep.__dict__)
    write_report(args.report, payload, rep.table())
    sys.stdout.write(rep.table())
    return 0


def cmd_inspect_mol(args) -> int:
    g = parse_smiles(args.smiles)
    fp = morgan_fingerprint(g, args.radius, args.n_bits)
    out = {
        "smiles": args.smiles,
        "n_atoms": g.n_atoms,
        "n_bonds": len(g.bonds),
        "n_aromatic_atoms": sum(a.aromatic for a in g.atoms),
        "graph": g.to_dict(),
        "tokens": smiles_lexemes(args.smiles),
        "fingerprint": {"radius": args.radius, "n_bits": args.n_bits, "popcount": fp.popcount(),
                        "on_bits": fp.on_bits()},
    }
    print(_dump(out))
    return 0


def cmd_inspect_quantum(args) -> int:
    if args.input is not None:
        try:
            values = json.loads(args.input)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--input expects a JSON array, got {args.input!r}") from exc
        if not isinstance(values, list) or not all(isinstance(v, (int, float)) for v in values):
            raise UsageError(f"--input expects a JSON array of numbers, got {args.input!r}")
        values = [float(v) for v in values]
    else:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError as exc:
            raise UsageError(f"--values expects comma-separated numbers, got {args.values!r}") from exc
    amps = qstate.prepare_amplitudes(values)
    circuit = qstate.build_mottonen_circuit(amps)
    state = qstate.simulate(circuit)
    stats = qstate.circuit_stats(circuit)
    out = {
        "input": values,
        "n_qubits": amps.n_qubits,
        "amplitudes": amps.values.tolist(),
        "angles": [stage.tolist() for stage in qstate.mottonen_angles(amps)],
        "gates": [g.to_dict() for g in circuit.gates],
        "stats": {"ry_count": stats.ry_count, "cnot_count": stats.cnot_count, "depth": stats.depth},
        "probabilities": qstate.basis_probabilities(state).tolist(),
        "z_expectations": qstate.z_expectations(state).tolist(),
    }
    print(_dump(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qvt", description="Multimodal quantum vision transformer for EC class prediction")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history JSON path (default: next to the checkpoint)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--quantum-features", type=int)
    p.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="grid-search a config key (repeatable; dotted keys reach the encoder)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("test", "validation", "train", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="incremental-modality ablation")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--report", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--quantum-features", type=_int_list, default=None,
                   help=f"also sweep quantum feature widths, e.g. {','.join(map(str, SWEEP_WIDTHS))}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("profile", help="cost profile of the configured model")
    p.add_argument("--config")
    p.add_argument("--report", required=True)
    p.add_argument("--data")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("inspect-mol", help="parse a SMILES string")
    p.add_argument("--smiles", required=True)
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--n-bits", type=int, default=1024)
    p.set_defaults(func=cmd_inspect_mol)

    p = sub.add_parser("inspect-quantum", help="encode a vector with the Möttönen circuit")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--values", help='comma-separated numbers, e.g. "0.6,0.8"')
    src.add_argument("--input", help="the same vector as a JSON array")
    p.set_defaults(func=cmd_inspect_quantum)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        sys.stderr.write(f"qvt: error: {exc}\n{exc.usage or parser.format_usage()}")
        return 1
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"qvt: error: {exc}\n")
        return 1
    except (DatasetError, MolChemError, qstate.QStateError, ValueError, KeyError, OSError) as exc:
        sys.stderr.write(f"qvt: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
