"""Fragment-assembly generator for a labeled synthetic ionizable-lipid corpus."""

from __future__ import annotations

import json
import logging
import math
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .analysis import (HEAD, TAIL, find_connecting_atom, label_head_tail, tail_chains)
from .chem import BondOrder, MolGraph, canonicalize, parse_smiles, relabel

log = logging.getLogger(__name__)

# Each head ends with the junction nitrogen, which takes two tail-bearing arms.
HEAD_TEMPLATES = (
    "OCCCCN",
    "OCCN",
    "OCCCN",
    "COCCN",
    "CN(C)CCN",
    "OCC(O)CN",
    "CN1CCC(CC1)N",
    "OCCOCCN",
    "CC(O)CN",
    "CSCCN",
    "c1ccncc1CCN",
)

RING_UNITS = ("C1CC1", "C1CCC(CC1)", "c1ccc(cc1)")
# linkages between an arm and a tail chain; esters dominate
LINKAGES = ("OC(=O)", "C(=O)O", "OC(=O)O", "NC(=O)", "C(=O)N")
LINKAGE_WEIGHTS = (0.35, 0.35, 0.1, 0.1, 0.1)

# synthetic target: weights over normalized structural features, summing to 1
PROPERTY_WEIGHTS = {
    "n_tails": 0.50,
    "mean_tail_len": 0.15,
    "esters": 0.20,
    "rings": 0.05,
    "hetero_fraction": 0.10,
}
PROPERTY_RANGE = 1.0


class ConfigError(ValueError):
    pass


class GenerationBudgetExceeded(RuntimeError):
    pass


@dataclass
class GenConfig:
    n_lipids: int = 5000
    tails_distribution: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)  # weights for 2..6 tails
    tail_len_range: tuple[int, int] = (5, 10)
    branch_prob: float = 0.25
    ester_prob: float = 0.5
    ring_prob: float = 0.15
    head_templates: tuple[str, ...] = HEAD_TEMPLATES
    seed: int = 0
    max_smiles_len: int = 96
    stem_len_range: tuple[int, int] = (2, 5)
    min_tail_len: int = 4
    property_noise_sd: float = 0.05
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    max_retries: int = 200
    workers: int = 1

    def __post_init__(self):
        for name in ("tails_distribution", "tail_len_range", "head_templates", "split",
                     "stem_len_range"):
            setattr(self, name, tuple(getattr(self, name)))

    def validate(self) -> None:
        if self.n_lipids < 1:
            raise ConfigError("n_lipids must be >= 1")
        w = self.tails_distribution
        if len(w) != 5 or any(x < 0 for x in w) or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
            raise ConfigError("tails_distribution needs 5 non-negative weights summing to 1")
        lo, hi = self.tail_len_range
        if not (self.min_tail_len <= lo <= hi):
            raise ConfigError(f"tail_len_range must satisfy {self.min_tail_len} <= min <= max")
        if not 1 <= self.stem_len_range[0] <= self.stem_len_range[1]:
            raise ConfigError("stem_len_range must be positive and ordered")
        for name in ("branch_prob", "ester_prob", "ring_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.head_templates:
            raise ConfigError("at least one head template is required")
        if not 0 < self.max_smiles_len <= 126:
            raise ConfigError("max_smiles_len must be in (0, 126]")
        if len(self.split) != 3 or not math.isclose(sum(self.split), 1.0) or min(self.split) < 0:
            raise ConfigError("split must be three fractions summing to 1")
        if self.property_noise_sd < 0:
            raise ConfigError("property_noise_sd must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LipidRecord:
    id: str
    canonical_smiles: str
    n_tails: int
    connecting_atom: int
    atom_regions: list[str]
    provenance: dict
    synth_property: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "LipidRecord":
        return cls(**{f.name: d[f.name] for f in fields(cls)})


# ---------------------------------------------------------------------------
# structure features and the synthetic property
# ---------------------------------------------------------------------------

def count_esters(g: MolGraph) -> int:
    n = 0
    for i, atom in enumerate(g.atoms):
        if atom.element != "C":
            continue
        carbonyl = [j for j in g.adjacency[i]
                    if g.atoms[j].element == "O" and g.bond(i, j).order is BondOrder.DOUBLE]
        single_o = [j for j in g.adjacency[i]
                    if g.atoms[j].element == "O" and g.bond(i, j).order is BondOrder.SINGLE
                    and g.degree(j) == 2]
        if carbonyl and single_o:
            n += 1
    return n


def count_rings(g: MolGraph) -> int:
    return len(g.bonds) - len(g.atoms) + 1


def structure_features(g: MolGraph) -> dict[str, float]:
    chains = tail_chains(g)
    heavy = len(g.atoms)
    hetero = sum(1 for a in g.atoms if a.element != "C")
    return {
        "n_tails": float(len(chains)),
        "mean_tail_len": float(np.mean([len(c) for c in chains])) if chains else 0.0,
        "esters": float(count_esters(g)),
        "rings": float(count_rings(g)),
        "hetero_fraction": hetero / heavy,
    }


def _normalized(feats: dict[str, float]) -> dict[str, float]:
    clip = lambda x: min(max(x, 0.0), 1.0)
    return {
        "n_tails": clip((feats["n_tails"] - 2) / 4),
        "mean_tail_len": clip((feats["mean_tail_len"] - 4) / 10),
        "esters": clip(feats["esters"] / 6),
        "rings": clip(feats["rings"] / 4),
        "hetero_fraction": clip(feats["hetero_fraction"] / 0.25),
    }


def property_value(g: MolGraph) -> float:
    """Noiseless structure function, in [0, PROPERTY_RANGE]."""
    x = _normalized(structure_features(g))
    return math.fsum(PROPERTY_WEIGHTS[k] * x[k] for k in PROPERTY_WEIGHTS)


def synth_property(g: MolGraph, noise_sd: float = 0.0, seed: int = 0) -> float:
    value = property_value(g)
    if noise_sd > 0:
        value += float(np.random.default_rng(seed).normal(0.0, noise_sd * PROPERTY_RANGE))
    return value


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

class _Builder:
    """Concatenates SMILES pieces while remembering which fragment wrote each char."""

    def __init__(self):
        self.parts: list[str] = []
        self.owner: list[int] = []

    def add(self, text: str, frag: int) -> None:
        self.parts.append(text)
        self.owner.extend([frag] * len(text))

    @property
    def smiles(self) -> str:
        return "".join(self.parts)


def _tail_fragment(rng: random.Random, cfg: GenConfig) -> str:
    parts = []
    if rng.random() < cfg.ester_prob:
        parts.append(rng.choices(LINKAGES, weights=LINKAGE_WEIGHTS)[0])
    if rng.random() < cfg.ring_prob:
        parts.append("C" * rng.randint(0, 2) + rng.choice(RING_UNITS))
    if rng.random() < cfg.branch_prob:
        parts.append(rng.choice(("C(C)", "C(CC)")))
    parts.append("C" * rng.randint(*cfg.tail_len_range))
    return "".join(parts)


def _arm(rng: random.Random, cfg: GenConfig, n_tails: int) -> str:
    stem = "C" * rng.randint(*cfg.stem_len_range)
    frags = [_tail_fragment(rng, cfg) for _ in range(n_tails)]
    if n_tails == 1:
        return stem + frags[0]
    hub = "C" + "".join(f"({f})" for f in frags[:-1])
    return stem + hub + frags[-1]


def _split_tails(rng: random.Random, k: int) -> tuple[int, int]:
    options = [(a, k - a) for a in (1, 2, 3) if 1 <= k - a <= 3]
    return rng.choice(options)


def _sample_n_tails(rng: random.Random, cfg: GenConfig) -> int:
    return rng.choices(range(2, 7), weights=cfg.tails_distribution)[0]


def assemble_lipid(cfg: GenConfig, seed: int, record_id: str | None = None,
                   n_tails: int | None = None) -> LipidRecord:
    """Build one lipid from a head template and two tail-bearing arms.

    The tail count is drawn first and kept fixed while structural retries
    hunt for a SMILES within ``max_smiles_len``.
    """
    rng = random.Random(seed)
    k = n_tails if n_tails is not None else _sample_n_tails(rng, cfg)
    for _ in range(cfg.max_retries):
        head_idx = rng.randrange(len(cfg.head_templates))
        arms = _split_tails(rng, k)
        b = _Builder()
        b.add(cfg.head_templates[head_idx], 0)
        b.add("(", 1)
        b.add(_arm(rng, cfg, arms[0]), 1)
        b.add(")", 1)
        b.add(_arm(rng, cfg, arms[1]), 2)
        if len(b.smiles) > cfg.max_smiles_len + 8:
            continue
        g = parse_smiles(b.smiles)
        form = canonicalize(g)
        if len(form.smiles) > cfg.max_smiles_len:
            continue
        junction = len(cfg.head_templates[head_idx]) - 1
        junction_atom = next(i for i, a in enumerate(g.atoms) if a.offset == junction)
        fragments = [b.owner[g.atoms[old].offset] for old in form.atom_order]
        regions = [HEAD if f == 0 else TAIL for f in fragments]
        canon_graph = relabel(g, form.atom_order)
        value = synth_property(canon_graph, cfg.property_noise_sd, seed)
        return LipidRecord(
            id=record_id or f"L{seed}",
            canonical_smiles=form.smiles,
            n_tails=k,
            connecting_atom=form.ordinal_of(junction_atom),
            atom_regions=regions,
            provenance={
                "seed": seed,
                "head": cfg.head_templates[head_idx],
                "arm_tails": list(arms),
                "fragments": fragments,
            },
            synth_property=value,
        )
    raise GenerationBudgetExceeded(
        f"no {k}-tail lipid within {cfg.max_smiles_len} chars after {cfg.max_retries} tries")


def audit_record(rec: LipidRecord, min_tail_len: int = 4) -> list[str]:
    """Recompute every stored label from the SMILES graph; return mismatches."""
    problems = []
    g = parse_smiles(rec.canonical_smiles)
    if canonicalize(g).smiles != rec.canonical_smiles:
        problems.append("canonical_smiles is not canonical")
    chains = tail_chains(g, min_tail_len)
    if len(chains) != rec.n_tails:
        problems.append(f"n_tails {rec.n_tails} != recomputed {len(chains)}")
    regions = label_head_tail(rec)
    if regions != rec.atom_regions:
        problems.append("atom_regions disagree with provenance")
    if len(regions) != len(g.atoms):
        problems.append("atom_regions do not cover every atom")
        return problems
    if any(regions[i] != TAIL for c in chains for i in c):
        problems.append("a tail chain atom is labeled head")
    try:
        junction = find_connecting_atom(g, regions)
        if junction != rec.connecting_atom:
            problems.append(f"connecting_atom {rec.connecting_atom} != recomputed {junction}")
    except ValueError as exc:
        problems.append(f"connecting atom: {exc}")
    return problems


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

def record_seed(root: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([root, index, attempt]).generate_state(1)[0])


def _first_draft(args: tuple[GenConfig, int]) -> LipidRecord:
    cfg, i = args
    return assemble_lipid(cfg, record_seed(cfg.seed, i), f"L{i:06d}")


def split_manifest(ids: Sequence[str], fractions: Sequence[float], seed: int) -> dict[str, list[str]]:
    n = len(ids)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(fractions[0] * n + 1e-9))
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    pick = lambda idx: sorted(ids[i] for i in idx)
    return {
        "train": pick(order[:n_train]),
        "validation": pick(order[n_train:n_train + n_val]),
        "test": pick(order[n_train + n_val:]),
    }


def build_corpus(cfg: GenConfig) -> list[LipidRecord]:
    """Generate ``cfg.n_lipids`` unique records, identical for any worker count."""
    cfg.validate()
    jobs = [(cfg, i) for i in range(cfg.n_lipids)]
    workers = max(1, min(cfg.workers, int(os.environ.get("LIPIDLM_THREADS", cfg.workers))))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            drafts = list(pool.map(_first_draft, jobs, chunksize=64))
    else:
        drafts = [_first_draft(job) for job in jobs]
    seen: set[str] = set()
    records = []
    for i, rec in enumerate(drafts):
        attempt = 0
        while rec.canonical_smiles in seen:
            attempt += 1
            if attempt > cfg.max_retries:
                raise GenerationBudgetExceeded(f"could not find a unique lipid for index {i}")
            rec = assemble_lipid(cfg, record_seed(cfg.seed, i, attempt), rec.id, rec.n_tails)
        seen.add(rec.canonical_smiles)
        records.append(rec)
    return records


def write_jsonl(records: Iterable, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write((rec.to_json() if hasattr(rec, "to_json") else json.dumps(rec)) + "\n")


def read_corpus(path: str | os.PathLike) -> list[LipidRecord]:
    with open(path, encoding="utf-8") as fh:
        return [LipidRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def read_manifest(path: str | os.PathLike) -> dict[str, list[str]]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def generate_corpus(cfg: GenConfig, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    """Write ``corpus.jsonl`` and ``split.json`` under ``out_dir``; return both paths."""
    records = build_corpus(cfg)
    for rec in records:
        problems = audit_record(rec, cfg.min_tail_len)
        if problems:
            raise GenerationBudgetExceeded(f"{rec.id} failed label audit: {problems}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus_path = out / "corpus.jsonl"
    manifest_path = out / "split.json"
    write_jsonl(records, corpus_path)
    manifest = split_manifest([r.id for r in records], cfg.split, cfg.seed)
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    log.info("wrote %d records to %s", len(records), corpus_path)
    return corpus_path, manifest_path
