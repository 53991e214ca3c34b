"""``lipidlm`` command-line entry point.

Exit codes: 0 success, 2 config or input error, 3 generation failure,
4 training abort, 5 checkpoint incompatibility.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .analysis import (HEAD, TAIL, AmbiguousConnectingAtom, NoConnectingAtom, count_tails,
                       find_connecting_atom, tail_chains)
from .chem import SmilesError, canonicalize, parse_smiles, relabel
from .corpus import (ConfigError, GenConfig, GenerationBudgetExceeded, LipidRecord, generate_corpus,
                     read_corpus, read_manifest)
from .model import (PRESETS, ChecksumMismatch, IoFailure, ModelConfig, VersionMismatch,
                    embed_cls, load_checkpoint, preset)
from .projection import pca_project
from .tokenizer import SINGLE_LEN, Vocab, build_vocab, encode_single
from .training import (FINETUNE_OVERRIDES, PRETRAIN_TASKS, TRAIN_PRESETS, EmptyDataset, IncompatibleCheckpoint,
                       LabelOutOfRange, MaskingConfig, NonFiniteGradient, TrainConfig, compute_pearson,
                       compute_r2, evaluate, finetune, predict, pretrain, scaling_sweep, TaskDataset,
                       train_preset)

log = logging.getLogger("lipidlm")

EXIT_OK, EXIT_CONFIG, EXIT_GENERATION, EXIT_TRAINING, EXIT_CHECKPOINT = 0, 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

def _strict(cls, d: Mapping, section: str):
    if not isinstance(d, Mapping):
        raise CliError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise CliError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class TokenizerSection:
    vocab: str | None = None  # prebuilt vocab file; built from the corpus when absent


@dataclass
class ModelSection:
    preset: str = "desk"
    overrides: dict = field(default_factory=dict)

    def build(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise CliError(f"unknown model preset {self.preset!r}")
        try:
            cfg = preset(self.preset, **self.overrides)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad model config: {exc}") from exc
        return cfg


@dataclass
class TrainingSection:
    preset: str = "desk"
    pretrain: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=lambda: dict(FINETUNE_OVERRIDES))
    masking: dict = field(default_factory=dict)
    finetune_split: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def _cfg(self, overrides: Mapping) -> TrainConfig:
        if self.preset not in TRAIN_PRESETS:
            raise CliError(f"unknown training preset {self.preset!r}")
        try:
            cfg = train_preset(self.preset, **overrides)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad training config: {exc}") from exc
        return cfg

    def pretrain_cfg(self) -> TrainConfig:
        return self._cfg(self.pretrain)

    def finetune_cfg(self) -> TrainConfig:
        return self._cfg(self.finetune)

    def masking_cfg(self) -> MaskingConfig:
        try:
            cfg = MaskingConfig.from_dict(self.masking)
            cfg.validate()
        except (TypeError, ValueError) as exc:
            raise CliError(f"bad masking config: {exc}") from exc
        return cfg


@dataclass
class IoSection:
    log_level: str = "INFO"
    threads: int | None = None


@dataclass
class RunConfig:
    generator: GenConfig = field(default_factory=GenConfig)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    io: IoSection = field(default_factory=IoSection)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        if not isinstance(d, Mapping):
            raise CliError("config must be a JSON object")
        sections = {"generator": GenConfig, "tokenizer": TokenizerSection, "model": ModelSection,
                    "training": TrainingSection, "io": IoSection}
        unknown = set(d) - set(sections)
        if unknown:
            raise CliError(f"unknown config sections: {sorted(unknown)}")
        try:
            gen = GenConfig.from_dict(d.get("generator", {}))
            gen.validate()
        except (TypeError, ConfigError) as exc:
            raise CliError(f"bad generator config: {exc}") from exc
        out = cls(generator=gen, **{name: _strict(sections[name], d.get(name, {}), name)
                                    for name in ("tokenizer", "model", "training", "io")})
        out.model.build()
        out.training.pretrain_cfg()
        out.training.finetune_cfg()
        out.training.masking_cfg()
        return out

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict({})
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def write_resolved(cfg: RunConfig, out: Path, extra: Mapping | None = None) -> Path:
    """Echo the resolved config next to an output as ``<out>.resolved.json``."""
    path = Path(str(out).rstrip("/") + ".resolved.json")
    doc = cfg.to_dict()
    if extra:
        doc = {**doc, "_command": dict(extra)}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _corpus_paths(corpus: str) -> tuple[Path, Path]:
    p = Path(corpus)
    if p.is_dir():
        return p / "corpus.jsonl", p / "split.json"
    return p, p.with_name("split.json")


def _load_corpus(corpus: str):
    cpath, mpath = _corpus_paths(corpus)
    try:
        records = read_corpus(cpath)
        manifest = read_manifest(mpath)
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read corpus {corpus}: {exc}") from exc
    if not records:
        raise CliError(f"corpus {corpus} is empty")
    return records, manifest


def _vocab(cfg: RunConfig, records: Sequence[LipidRecord]) -> Vocab:
    if cfg.tokenizer.vocab:
        try:
            return Vocab.load(cfg.tokenizer.vocab)
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read vocab {cfg.tokenizer.vocab}: {exc}") from exc
    return build_vocab(r.canonical_smiles for r in records)


def _read_labeled(path: str) -> tuple[list[str], list[float]]:
    smiles, values = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                smiles.append(str(obj["smiles"]))
                values.append(float(obj["value"]))
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"cannot read labeled data {path}: {exc}") from exc
    if not smiles:
        raise CliError(f"EmptyDataset: {path} has no rows")
    return smiles, values


def _read_inputs(path: str) -> list[tuple[str, Any]]:
    """(id, SMILES or record dict) per non-empty line of a text or JSONL file."""
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            for n, line in enumerate(fh):
                text = line.strip()
                if not text:
                    continue
                if text.startswith("{"):
                    try:
                        obj = json.loads(text)
                    except json.JSONDecodeError:
                        out.append((str(n), text))
                        continue
                    out.append((str(obj.get("id", n)), obj))
                else:
                    out.append((str(n), text))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    return out


def _smiles_of(item: Any) -> str:
    if isinstance(item, dict):
        return str(item.get("canonical_smiles") or item.get("smiles") or "")
    return item


def _load_bundle(path: str, max_len: int | None = None):
    try:
        return load_checkpoint(path, max_len)
    except (IoFailure, VersionMismatch, ChecksumMismatch, ValueError, KeyError) as exc:
        raise CliError(f"incompatible checkpoint {path}: {exc}", EXIT_CHECKPOINT) from exc


def _parse_tasks(text: str) -> tuple[str, ...]:
    tasks = tuple(t.strip() for t in text.split(",") if t.strip())
    unknown = set(tasks) - set(PRETRAIN_TASKS)
    if unknown:
        raise CliError(f"unknown tasks: {sorted(unknown)}; choose from {','.join(PRETRAIN_TASKS)}")
    if "mlm" not in tasks:
        raise CliError("--tasks must include mlm")
    return tasks


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args, cfg: RunConfig) -> int:
    if args.seed is not None:
        cfg.generator.seed = args.seed
    if cfg.io.threads:
        cfg.generator.workers = cfg.io.threads
    out = Path(args.out)
    write_resolved(cfg, out)
    try:
        corpus_path, manifest_path = generate_corpus(cfg.generator, out)
    except GenerationBudgetExceeded as exc:
        raise CliError(f"generation failed: {exc}", EXIT_GENERATION) from exc
    except OSError as exc:
        raise CliError(f"IoFailure: {exc}", EXIT_GENERATION) from exc
    print(f"records: {cfg.generator.n_lipids}")
    print(f"corpus: {corpus_path}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    tasks = _parse_tasks(args.tasks)
    records, manifest = _load_corpus(args.corpus)
    vocab = _vocab(cfg, records)
    out = Path(args.out)
    write_resolved(cfg, out, {"tasks": list(tasks), "corpus": str(args.corpus)})
    try:
        result = pretrain(records, manifest, vocab, cfg.model.build(), tasks,
                          cfg.training.pretrain_cfg(), cfg.training.masking_cfg(), out_dir=out)
    except NonFiniteGradient as exc:
        raise CliError(f"training aborted: {exc}", EXIT_TRAINING) from exc
    except (LabelOutOfRange, EmptyDataset) as exc:
        raise CliError(str(exc)) from exc
    s = result.report.summary
    print(f"best epoch: {s['best_epoch']} validation total loss: {s['best_validation_total']:.4f}")
    print(f"checkpoint: {out / 'checkpoint'}")
    print(f"metrics: {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    smiles, values = _read_labeled(args.data)
    out = Path(args.out)
    tcfg = cfg.training.finetune_cfg()
    if args.sweep:
        if not args.corpus:
            raise CliError("--sweep needs --corpus to pre-train at each size")
        try:
            sizes = [int(x) for x in args.sweep.split(",") if x.strip()]
        except ValueError as exc:
            raise CliError(f"bad --sweep list: {exc}") from exc
        tasks = _parse_tasks(args.tasks)
        records, manifest = _load_corpus(args.corpus)
        vocab = _vocab(cfg, records)
        write_resolved(cfg, out, {"sweep": sizes, "tasks": list(tasks), "corpus": str(args.corpus)})
        try:
            rows = scaling_sweep(records, manifest, vocab, sizes, cfg.model.build(), tasks,
                                 cfg.training.pretrain_cfg(), tcfg, smiles, values, out_dir=out)
        except NonFiniteGradient as exc:
            raise CliError(f"training aborted: {exc}", EXIT_TRAINING) from exc
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        for row in rows:
            print(f"size {row['size']}: best validation R2 {row['best_r2']:.4f}")
        return EXIT_OK
    if not args.checkpoint:
        raise CliError("finetune needs --checkpoint (or --sweep with --corpus)")
    bundle = _load_bundle(args.checkpoint)
    write_resolved(cfg, out, {"checkpoint": str(args.checkpoint), "data": str(args.data)})
    try:
        result = finetune(bundle, smiles, values, tcfg, fractions=cfg.training.finetune_split, out_dir=out)
    except IncompatibleCheckpoint as exc:
        raise CliError(f"incompatible checkpoint: {exc}", EXIT_CHECKPOINT) from exc
    except EmptyDataset as exc:
        raise CliError(f"EmptyDataset: {exc}") from exc
    except NonFiniteGradient as exc:
        raise CliError(f"training aborted: {exc}", EXIT_TRAINING) from exc
    print(f"best validation R2: {result.report.summary['best_r2']:.4f}")
    print(f"checkpoint: {out / 'checkpoint'}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    bundle = _load_bundle(args.checkpoint)
    if "regression" in bundle.cfg.heads:
        if not args.data:
            raise CliError("a fine-tuned checkpoint is evaluated on --data")
        smiles, values = _read_labeled(args.data)
        try:
            pred = predict(bundle, smiles)
        except ValueError as exc:
            raise CliError(str(exc), EXIT_CHECKPOINT) from exc
        report: dict = {"n": len(values)}
        try:
            report["r2"] = compute_r2(pred, values)
            report["pearson"] = compute_pearson(pred, values)
        except ValueError as exc:
            report["error"] = str(exc)
    else:
        if not args.corpus:
            raise CliError("a pre-trained checkpoint is evaluated on --corpus")
        records, manifest = _load_corpus(args.corpus)
        split = manifest.get(args.split)
        if split is None:
            raise CliError(f"corpus manifest has no split {args.split!r}")
        keep = set(split)
        tasks = tuple(h for h in bundle.cfg.heads if h != "regression")
        try:
            data = TaskDataset([r for r in records if r.id in keep], bundle.vocab, tasks,
                               cfg.training.masking_cfg(), cfg.training.pretrain_cfg().seed,
                               bundle.cfg.n_pos_classes, bundle.cfg.n_tail_classes)
        except (LabelOutOfRange, EmptyDataset) as exc:
            raise CliError(str(exc)) from exc
        ev = evaluate(bundle.params, bundle.cfg, data.batches(0, 256, False, 1))
        report = {"split": args.split, "n": len(data), "loss": ev["loss"], "accuracy": ev["accuracy"]}
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def analyze_one(item: Any) -> dict:
    """Canonical form, tail count and, where determinable, the connecting atom."""
    smiles = _smiles_of(item)
    g = parse_smiles(smiles)
    form = canonicalize(g)
    cg = relabel(g, form.atom_order)
    row: dict = {"input": smiles, "canonical_smiles": form.smiles, "n_tails": count_tails(cg)}
    regions = None
    if isinstance(item, dict) and item.get("atom_regions") and \
            item.get("canonical_smiles") == form.smiles:
        regions = list(item["atom_regions"])
    if regions is None:
        # without provenance, call the tail chains "tail" and everything else "head"
        tails = {i for chain in tail_chains(cg) for i in chain}
        guess = [TAIL if i in tails else HEAD for i in range(len(cg.atoms))]
        try:
            row["connecting_atom"] = find_connecting_atom(cg, guess)
        except (NoConnectingAtom, AmbiguousConnectingAtom):
            row["connecting_atom"] = None
        row["atom_regions"] = None
    else:
        row["connecting_atom"] = find_connecting_atom(cg, regions)
        row["atom_regions"] = "".join(regions)
    return row


def cmd_analyze(args, cfg: RunConfig) -> int:
    if args.smiles:
        items = [(str(i), s) for i, s in enumerate(args.smiles)]
    elif args.file:
        items = _read_inputs(args.file)
    else:
        raise CliError("analyze needs --smiles or --file")
    ok = 0
    for ident, item in items:
        try:
            row = {"id": ident, **analyze_one(item)}
            ok += 1
        except (SmilesError, ValueError) as exc:
            row = {"id": ident, "input": _smiles_of(item), "error": f"{type(exc).__name__}: {exc}"}
        if args.json:
            print(json.dumps(row, sort_keys=True))
        elif "error" in row:
            print(f"{ident}\terror\t{row['error']}")
        else:
            conn = "-" if row["connecting_atom"] is None else row["connecting_atom"]
            regions = row["atom_regions"] or "-"
            print(f"{ident}\t{row['canonical_smiles']}\t{row['n_tails']}\t{conn}\t{regions}")
    return EXIT_OK if ok or not items else EXIT_CONFIG


def cmd_embed(args, cfg: RunConfig) -> int:
    bundle = _load_bundle(args.checkpoint)
    items = _read_inputs(args.file)
    if not items:
        raise CliError(f"{args.file} has no inputs")
    out = Path(args.out)
    write_resolved(cfg, out, {"checkpoint": str(args.checkpoint), "file": str(args.file)})
    try:
        encs = [encode_single(_smiles_of(item), bundle.vocab, bundle.cfg.max_len) for _, item in items]
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    emb = embed_cls(bundle.params, bundle.cfg, encs)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"e{i}" for i in range(emb.shape[1])])
        for (ident, _), row in zip(items, emb):
            writer.writerow([ident] + [repr(float(v)) for v in row])
    print(f"embeddings: {len(items)} rows x {emb.shape[1]} -> {out}")
    return EXIT_OK


def cmd_project(args, cfg: RunConfig) -> int:
    try:
        with open(args.embeddings, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        ids = [r[0] for r in rows[1:]]
        x = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    except (OSError, ValueError, IndexError) as exc:
        raise CliError(f"cannot read embeddings {args.embeddings}: {exc}") from exc
    if not ids:
        raise CliError("no embedding rows to project")
    coords = pca_project(x, 2)
    out = Path(args.out)
    write_resolved(cfg, out, {"embeddings": str(args.embeddings)})
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y"])
        for ident, (a, b) in zip(ids, coords):
            writer.writerow([ident, repr(float(a)), repr(float(b))])
    print(f"projection: {len(ids)} rows -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lipidlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run config JSON")
        p.set_defaults(func=func)
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a labeled lipid corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = add("pretrain", cmd_pretrain, "pre-train the encoder")
    p.add_argument("--corpus", required=True, help="corpus directory or corpus.jsonl")
    p.add_argument("--tasks", default="mlm", help="comma list from " + ",".join(PRETRAIN_TASKS))
    p.add_argument("--out", required=True)

    p = add("finetune", cmd_finetune, "fine-tune a regression head")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True, help="JSONL of {smiles, value}")
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", help="comma list of pre-training corpus sizes")
    p.add_argument("--corpus", help="corpus for --sweep pre-training")
    p.add_argument("--tasks", default="mlm", help="pre-training tasks for --sweep")

    p = add("evaluate", cmd_evaluate, "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus")
    p.add_argument("--split", default="test")
    p.add_argument("--data")

    p = add("analyze", cmd_analyze, "structural report per molecule")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--smiles", nargs="+")
    group.add_argument("--file")
    p.add_argument("--json", action="store_true")

    p = add("embed", cmd_embed, "export [CLS] embeddings as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--file", required=True)
    p.add_argument("--out", required=True)

    p = add("project", cmd_project, "2-D principal-component projection of embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    try:
        cfg = load_run_config(args.config)
        if cfg.io.threads is None and os.environ.get("LIPIDLM_THREADS"):
            cfg.io.threads = int(os.environ["LIPIDLM_THREADS"])
        logging.basicConfig(level=getattr(logging, cfg.io.log_level.upper(), logging.INFO),
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
