"""Structural labels for ionizable lipids: tails, head/tail regions, junction atom,
and rearranged/decoy SMILES pairs."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Sequence

from .chem import (BondOrder, CanonicalForm, MolGraph, SmilesError, canonicalize,
                   parse_smiles, write_smiles)

HEAD = "H"
TAIL = "T"
DEFAULT_MIN_TAIL_LEN = 4


class LipidAnalysisError(ValueError):
    pass


class NoConnectingAtom(LipidAnalysisError):
    pass


class AmbiguousConnectingAtom(LipidAnalysisError):
    pass


class MissingProvenance(LipidAnalysisError):
    pass


class ExhaustedRetries(LipidAnalysisError):
    pass


class NoValidDecoy(LipidAnalysisError):
    pass


@dataclass(frozen=True)
class SmilesPair:
    first: str
    second: str
    label: bool  # True when both strings denote the same molecule


def _is_chain_carbon(g: MolGraph, i: int) -> bool:
    atom = g.atoms[i]
    return atom.element == "C" and not atom.aromatic and atom.charge == 0


def tail_chains(g: MolGraph, min_tail_len: int = DEFAULT_MIN_TAIL_LEN) -> list[list[int]]:
    """Maximal terminal unbranched carbon paths with at least ``min_tail_len`` carbons.

    Each path starts at a degree-1 carbon and runs through degree-2 carbons
    until it meets a branch point, a ring atom or a heteroatom.
    """
    if min_tail_len < 1:
        raise ValueError("min_tail_len must be >= 1")
    chains = []
    seen_paths: set[frozenset[int]] = set()
    for start in range(len(g.atoms)):
        if g.degree(start) != 1 or not _is_chain_carbon(g, start):
            continue
        path = [start]
        prev, cur = start, g.adjacency[start][0]
        while _is_chain_carbon(g, cur) and g.degree(cur) <= 2:
            path.append(cur)
            if g.degree(cur) == 1:
                break
            nxt = g.adjacency[cur][0] if g.adjacency[cur][0] != prev else g.adjacency[cur][1]
            prev, cur = cur, nxt
        key = frozenset(path)
        if len(path) >= min_tail_len and key not in seen_paths:
            seen_paths.add(key)
            chains.append(path)
    return chains


def count_tails(g: MolGraph, min_tail_len: int = DEFAULT_MIN_TAIL_LEN) -> int:
    return len(tail_chains(g, min_tail_len))


def find_connecting_atom(g: MolGraph, region: Sequence[str],
                         canonical: CanonicalForm | None = None) -> int:
    """The single head atom whose removal cuts every tail atom off from the head.

    The index is in ``g``'s atom order, which is the canonical ordinal when
    ``g`` was parsed from a canonical SMILES.  Pass ``canonical`` to map the
    result through its ``atom_order`` instead.
    """
    if len(region) != len(g.atoms):
        raise ValueError("region labels must cover every atom")
    heads = {i for i, r in enumerate(region) if r == HEAD}
    tails = {i for i, r in enumerate(region) if r == TAIL}
    if not heads or not tails:
        raise NoConnectingAtom("molecule needs both head and tail atoms")
    candidates = [i for i in sorted(heads) if any(j in tails for j in g.adjacency[i])]
    found = []
    for c in candidates:
        # flood the head side with c removed; no tail atom may be reached
        stack = [h for h in heads if h != c]
        seen = set(stack) | {c}
        ok = True
        while stack and ok:
            for nb in g.adjacency[stack.pop()]:
                if nb in seen:
                    continue
                if nb in tails:
                    ok = False
                    break
                seen.add(nb)
                stack.append(nb)
        if ok:
            found.append(c)
    if not found:
        raise NoConnectingAtom("no head atom separates the tails from the head")
    if len(found) > 1:
        raise AmbiguousConnectingAtom(f"{len(found)} candidate connecting atoms: {found}")
    atom = found[0]
    return canonical.ordinal_of(atom) if canonical is not None else atom


def _provenance(record: Any) -> dict | None:
    if isinstance(record, dict):
        return record.get("provenance")
    return getattr(record, "provenance", None)


def label_head_tail(record: Any) -> list[str]:
    """Per-atom head/tail labels from the generator's fragment membership.

    Fragment 0 is the head (it contains the junction nitrogen); every other
    fragment is tail.
    """
    prov = _provenance(record)
    if not prov or "fragments" not in prov:
        raise MissingProvenance("record carries no per-atom fragment membership")
    return [HEAD if frag == 0 else TAIL for frag in prov["fragments"]]


def _as_form(c: CanonicalForm | str) -> CanonicalForm:
    if isinstance(c, CanonicalForm):
        return c
    return canonicalize(parse_smiles(c))


def make_rearranged(c: CanonicalForm | str, seed: int, max_attempts: int = 64) -> str:
    """A non-canonical SMILES of the same molecule, traversed from another start atom."""
    c = _as_form(c)
    g = parse_smiles(c.smiles)
    n = len(g.atoms)
    if n < 2:
        raise ExhaustedRetries("a single atom has no alternative SMILES")
    rng = random.Random(seed)
    for _ in range(max_attempts):
        # atom 0 of the re-parsed canonical string is the canonical root
        start = rng.randrange(1, n)
        s = write_smiles(g, start, rng=rng)
        if s != c.smiles:
            return s
    raise ExhaustedRetries(f"every emission matched the canonical text after {max_attempts} tries")


def _carbonyl_carbon(g: MolGraph, i: int) -> bool:
    return g.atoms[i].element == "C" and any(
        g.atoms[j].element == "O" and g.bond(i, j).order is BondOrder.DOUBLE
        for j in g.adjacency[i])


def _is_ester_oxygen(g: MolGraph, i: int) -> bool:
    nbrs = g.adjacency[i]
    return (g.atoms[i].element == "O" and len(nbrs) == 2
            and all(g.atoms[j].element == "C" for j in nbrs)
            and any(_carbonyl_carbon(g, j) for j in nbrs))


def decoy_candidates(smiles: str) -> list[tuple[int, int]]:
    """(tier, char offset) of swappable adjacent atom characters.

    Tier 0 is an ester oxygen next to a carbon, tier 1 any other C/O pair,
    tier 2 a C/N pair.
    """
    g = parse_smiles(smiles)
    plain = {}
    for idx, atom in enumerate(g.atoms):
        if not atom.bracket and not atom.aromatic and atom.element in ("C", "N", "O"):
            plain[atom.offset] = idx
    out = []
    for off, idx in plain.items():
        nxt = plain.get(off + 1)
        if nxt is None:
            continue
        pair = {g.atoms[idx].element, g.atoms[nxt].element}
        if pair == {"C", "O"}:
            oxygen = idx if g.atoms[idx].element == "O" else nxt
            out.append((0 if _is_ester_oxygen(g, oxygen) else 1, off))
        elif pair == {"C", "N"}:
            out.append((2, off))
    return sorted(out)


def make_decoy(c: CanonicalForm | str, seed: int) -> str:
    """Swap one adjacent C/O (or C/N) character pair so the string names a different molecule."""
    c = _as_form(c)
    rng = random.Random(seed)
    by_tier: dict[int, list[int]] = {}
    for tier, off in decoy_candidates(c.smiles):
        by_tier.setdefault(tier, []).append(off)
    for tier in sorted(by_tier):
        offsets = by_tier[tier]
        rng.shuffle(offsets)
        for off in offsets:
            s = c.smiles
            swapped = s[:off] + s[off + 1] + s[off] + s[off + 2:]
            try:
                other = canonicalize(parse_smiles(swapped)).smiles
            except SmilesError:
                continue
            if other != c.smiles:
                return swapped
    raise NoValidDecoy(f"no single transposition of {c.smiles!r} gives a distinct valid molecule")


def make_pair(c: CanonicalForm | str, seed: int, same: bool) -> SmilesPair:
    c = _as_form(c)
    second = make_rearranged(c, seed) if same else make_decoy(c, seed)
    return SmilesPair(c.smiles, second, same)
