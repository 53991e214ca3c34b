"""
SMILES parsing and writing, plus a library-free canonical form.

Canonical SMILES are computed by iterative invariant refinement followed by
an individualization search over remaining ties; the lexicographically
smallest emitted string wins.  Automorphisms discovered during the search
prune branches that cannot produce a new string.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

__all__ = [
    "Atom",
    "Bond",
    "BondOrder",
    "MolGraph",
    "CanonicalForm",
    "SmilesError",
    "SmilesSyntaxError",
    "UnbalancedParenthesis",
    "UnclosedRingBond",
    "UnknownElement",
    "ValenceViolation",
    "InvalidAromaticity",
    "DisconnectedGraph",
    "parse_smiles",
    "write_smiles",
    "canonicalize",
    "canonical_smiles",
    "relabel",
    "atom_positions",
]


class SmilesError(ValueError):
    """Base class for SMILES parse errors; ``offset`` is the character index."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class SmilesSyntaxError(SmilesError):
    pass


class UnbalancedParenthesis(SmilesError):
    pass


class UnclosedRingBond(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class ValenceViolation(SmilesError):
    pass


class InvalidAromaticity(SmilesError):
    pass


class DisconnectedGraph(ValueError):
    pass


class BondOrder(IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self) -> int:
        return 1 if self is BondOrder.AROMATIC else int(self)


BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE,
                ":": BondOrder.AROMATIC, "/": BondOrder.SINGLE, "\\": BondOrder.SINGLE}

ELEMENTS = ("C", "N", "O", "P", "S", "F", "Cl", "Br")
# valence electrons, used to derive allowed valences for charged atoms
_VALENCE_ELECTRONS = {"C": 4, "N": 5, "O": 6, "F": 7, "P": 5, "S": 6, "Cl": 7, "Br": 7}
_PERIOD_TWO = {"C", "N", "O", "F"}
_AROMATIC_ELEMENTS = {"c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
# element order used by the canonical invariant
_ELEMENT_RANK = {e: i for i, e in enumerate(ELEMENTS)}

_BRACKET_RE = re.compile(
    r"(?P<isotope>\d+)?"
    r"(?P<element>Cl|Br|[A-Z][a-z]?|[a-z])"
    r"(?P<chiral>@@|@)?"
    r"(?P<hcount>H\d?)?"
    r"(?P<charge>\+\+|--|[+-]\d*)?"
    r"(?::\d+)?$"
)


def allowed_valences(element: str, charge: int = 0) -> tuple[int, ...]:
    electrons = _VALENCE_ELECTRONS[element] - charge
    if electrons in (1, 7):
        return (1,)
    if electrons in (2, 6):
        return (2,) if element in _PERIOD_TWO or charge else (2, 4, 6)
    if electrons in (3, 5):
        return (3,) if element in _PERIOD_TWO or charge else (3, 5)
    if electrons == 4:
        return (4,)
    return (0,)


@dataclass
class Atom:
    element: str
    charge: int = 0
    aromatic: bool = False
    explicit_h: int = 0
    implicit_h: int = 0
    bracket: bool = False
    chirality: str | None = field(default=None, compare=False)
    offset: int = field(default=-1, compare=False)

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h


@dataclass
class Bond:
    a: int
    b: int
    order: BondOrder = BondOrder.SINGLE
    stereo: str | None = field(default=None, compare=False)

    def other(self, i: int) -> int:
        return self.b if i == self.a else self.a


@dataclass
class MolGraph:
    atoms: list[Atom]
    bonds: list[Bond]
    adjacency: list[list[int]] = field(init=False, repr=False)

    def __post_init__(self):
        n = len(self.atoms)
        self.adjacency = [[] for _ in range(n)]
        self._bond_at: dict[tuple[int, int], Bond] = {}
        for bond in self.bonds:
            a, b = bond.a, bond.b
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise ValueError(f"bad bond endpoints {a}-{b}")
            key = (min(a, b), max(a, b))
            if key in self._bond_at:
                raise ValueError(f"duplicate bond {a}-{b}")
            self._bond_at[key] = bond
            self.adjacency[a].append(b)
            self.adjacency[b].append(a)
        self._ring_flags: list[bool] | None = None

    def __len__(self) -> int:
        return len(self.atoms)

    def bond(self, i: int, j: int) -> Bond | None:
        return self._bond_at.get((min(i, j), max(i, j)))

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def is_connected(self) -> bool:
        if not self.atoms:
            return False
        seen = {0}
        stack = [0]
        while stack:
            for nb in self.adjacency[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        return len(seen) == len(self.atoms)

    def ring_flags(self) -> list[bool]:
        """Per-atom flag: True when the atom lies on a cycle."""
        if self._ring_flags is None:
            self._ring_flags = _ring_atoms(self)
        return self._ring_flags

    def bond_valence(self, i: int) -> int:
        return sum(self.bond(i, j).order.valence for j in self.adjacency[i])


def _ring_atoms(g: MolGraph) -> list[bool]:
    # an atom is in a ring iff it touches a non-bridge edge
    n = len(g.atoms)
    disc = [-1] * n
    low = [0] * n
    in_ring = [False] * n
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(g.adjacency[root]))]
        while stack:
            v, parent, it = stack[-1]
            advanced = False
            for w in it:
                if w == parent:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, v, iter(g.adjacency[w])))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if advanced:
                continue
            stack.pop()
            if parent != -1:
                low[parent] = min(low[parent], low[v])
                if low[v] <= disc[parent]:
                    in_ring[v] = in_ring[parent] = True
    return in_ring


def _implicit_h(element: str, aromatic: bool, bond_valence: int) -> int | None:
    """Hydrogens an organic-subset atom carries; None when no valence fits."""
    valences = allowed_valences(element)
    if aromatic:
        needed = bond_valence + (0 if element in ("O", "S") else 1)
        for v in valences:
            if v >= needed:
                return v - needed
        return 0 if bond_valence <= max(valences) else None
    for v in valences:
        if v >= bond_valence:
            return v - bond_valence
    return None


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _parse_bracket(s: str, start: int) -> tuple[Atom, int]:
    end = s.find("]", start)
    if end == -1:
        raise SmilesSyntaxError("unterminated bracket atom", start)
    body = s[start + 1:end]
    m = _BRACKET_RE.match(body)
    if m is None:
        elem = re.match(r"\d*([A-Za-z][a-z]?)", body)
        if elem and elem.group(1) not in ELEMENTS and elem.group(1) not in _AROMATIC_ELEMENTS:
            raise UnknownElement(f"unknown element {elem.group(1)!r}", start + 1)
        raise SmilesSyntaxError(f"malformed bracket atom [{body}]", start)
    if m.group("isotope"):
        raise SmilesSyntaxError("isotopes are not supported", start + 1)
    sym = m.group("element")
    if sym in _AROMATIC_ELEMENTS:
        element, aromatic = _AROMATIC_ELEMENTS[sym], True
    elif sym in ELEMENTS:
        element, aromatic = sym, False
    else:
        raise UnknownElement(f"unknown element {sym!r}", start + 1)
    hcount = m.group("hcount")
    h = 0 if not hcount else (int(hcount[1:]) if len(hcount) > 1 else 1)
    charge_txt = m.group("charge") or ""
    if charge_txt in ("++", "--"):
        charge = 2 if charge_txt == "++" else -2
    elif charge_txt:
        mag = int(charge_txt[1:]) if len(charge_txt) > 1 else 1
        charge = mag if charge_txt[0] == "+" else -mag
    else:
        charge = 0
    atom = Atom(element, charge=charge, aromatic=aromatic, explicit_h=h, bracket=True,
                chirality=m.group("chiral"), offset=start + 1 + m.start("element"))
    return atom, end + 1


def parse_smiles(s: str) -> MolGraph:
    """Parse a single-fragment SMILES string.

    Atoms are numbered in the left-to-right order of their tokens.  Every
    failure raises a :class:`SmilesError` subclass carrying a character offset.
    """
    if not isinstance(s, str):
        raise TypeError("SMILES must be str")
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    pairs: set[tuple[int, int]] = set()
    prev: int | None = None
    pending: tuple[str, int] | None = None
    branches: list[tuple[int, int]] = []
    rings: dict[int, tuple[int, str | None, int]] = {}
    last_open_paren = False

    def add_bond(a: int, b: int, symbol: str | None, offset: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b or key in pairs:
            raise SmilesSyntaxError("duplicate or self bond", offset)
        pairs.add(key)
        if symbol is None:
            order = (BondOrder.AROMATIC if atoms[a].aromatic and atoms[b].aromatic
                     else BondOrder.SINGLE)
            stereo = None
        else:
            order = BOND_SYMBOLS[symbol]
            stereo = symbol if symbol in "/\\" else None
        bonds.append(Bond(a, b, order, stereo))

    i = 0
    n = len(s)
    if n == 0:
        raise SmilesSyntaxError("empty SMILES", 0)
    while i < n:
        ch = s[i]
        atom = None
        if ch == "[":
            atom, nxt = _parse_bracket(s, i)
        elif ch in "CNOPSFBcnops" or ch.isalpha():
            if s.startswith("Cl", i) or s.startswith("Br", i):
                atom, nxt = Atom(s[i:i + 2], offset=i), i + 2
            elif ch in "CNOPSF":
                atom, nxt = Atom(ch, offset=i), i + 1
            elif ch in _AROMATIC_ELEMENTS:
                atom, nxt = Atom(_AROMATIC_ELEMENTS[ch], aromatic=True, offset=i), i + 1
            else:
                raise UnknownElement(f"unknown element {ch!r}", i)
        if atom is not None:
            idx = len(atoms)
            atoms.append(atom)
            if prev is not None:
                add_bond(prev, idx, pending[0] if pending else None,
                         pending[1] if pending else atom.offset)
            pending = None
            prev = idx
            last_open_paren = False
            i = nxt
            continue
        if ch == "(":
            if prev is None or pending is not None:
                raise SmilesSyntaxError("branch without a preceding atom", i)
            branches.append((prev, i))
            last_open_paren = True
        elif ch == ")":
            if not branches:
                raise UnbalancedParenthesis("unmatched ')'", i)
            if pending is not None or last_open_paren:
                raise SmilesSyntaxError("empty branch or dangling bond", i)
            prev = branches.pop()[0]
        elif ch in BOND_SYMBOLS:
            if prev is None or pending is not None:
                raise SmilesSyntaxError(f"unexpected bond symbol {ch!r}", i)
            pending = (ch, i)
            last_open_paren = False
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise SmilesSyntaxError("ring closure without a preceding atom", i)
            if ch == "%":
                if i + 2 >= n or not s[i + 1:i + 3].isdigit():
                    raise SmilesSyntaxError("malformed %nn ring closure", i)
                num, width = int(s[i + 1:i + 3]), 3
            else:
                num, width = int(ch), 1
            symbol = pending[0] if pending else None
            if num in rings:
                other, other_symbol, _ = rings.pop(num)
                if symbol and other_symbol and BOND_SYMBOLS[symbol] != BOND_SYMBOLS[other_symbol]:
                    raise SmilesSyntaxError("conflicting ring-closure bond orders", i)
                add_bond(other, prev, symbol or other_symbol, i)
            else:
                rings[num] = (prev, symbol, i)
            pending = None
            i += width
            continue
        elif ch == ".":
            raise SmilesSyntaxError("multi-fragment SMILES are not supported", i)
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r}", i)
        i += 1

    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol", pending[1])
    if branches:
        raise UnbalancedParenthesis("unclosed '('", branches[-1][1])
    if rings:
        raise UnclosedRingBond("unclosed ring bond", min(off for _, _, off in rings.values()))

    g = MolGraph(atoms, bonds)
    for idx, atom in enumerate(atoms):
        valence = g.bond_valence(idx)
        if atom.bracket:
            limit = max(allowed_valences(atom.element, atom.charge))
            if valence + atom.explicit_h > limit:
                raise ValenceViolation(f"valence of {atom.element} exceeds {limit}", atom.offset)
        else:
            h = _implicit_h(atom.element, atom.aromatic, valence)
            if h is None:
                raise ValenceViolation(f"valence of {atom.element} exceeds "
                                       f"{max(allowed_valences(atom.element))}", atom.offset)
            atom.implicit_h = h
    ring = g.ring_flags()
    for idx, atom in enumerate(atoms):
        if atom.aromatic and not ring[idx]:
            raise InvalidAromaticity("aromatic atom outside a ring", atom.offset)
    for bond in bonds:
        if bond.order is BondOrder.AROMATIC and not (atoms[bond.a].aromatic and atoms[bond.b].aromatic):
            raise InvalidAromaticity("aromatic bond between non-aromatic atoms",
                                     atoms[bond.b].offset)
    return g


def atom_positions(s: str) -> list[int]:
    """Character offset of each atom's element symbol, in atom order."""
    return [a.offset for a in parse_smiles(s).atoms]


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _atom_token(g: MolGraph, i: int) -> str:
    atom = g.atoms[i]
    sym = atom.element.lower() if atom.aromatic else atom.element
    if atom.charge == 0:
        h = _implicit_h(atom.element, atom.aromatic, g.bond_valence(i))
        if h is not None and h == atom.total_h:
            return sym
    parts = ["[", sym]
    h = atom.total_h
    if h:
        parts.append("H" if h == 1 else f"H{h}")
    if atom.charge:
        sign = "+" if atom.charge > 0 else "-"
        parts.append(sign if abs(atom.charge) == 1 else f"{sign}{abs(atom.charge)}")
    parts.append("]")
    return "".join(parts)


def _bond_token(g: MolGraph, i: int, j: int) -> str:
    bond = g.bond(i, j)
    both_aromatic = g.atoms[i].aromatic and g.atoms[j].aromatic
    if bond.order is BondOrder.SINGLE:
        return "-" if both_aromatic else ""
    if bond.order is BondOrder.AROMATIC:
        return "" if both_aromatic else ":"
    return "=" if bond.order is BondOrder.DOUBLE else "#"


def _ring_label(d: int) -> str:
    return str(d) if d < 10 else f"%{d:02d}"


def _emit(g: MolGraph, start: int, neighbors: Callable[[int], Sequence[int]],
          atom_tokens: Sequence[str] | None = None) -> tuple[str, list[int]]:
    n = len(g.atoms)
    if atom_tokens is None:
        atom_tokens = [_atom_token(g, i) for i in range(n)]
    visited = [False] * n
    order: list[int] = []
    children: list[list[int]] = [[] for _ in range(n)]
    ring_opens: list[list[int]] = [[] for _ in range(n)]
    ring_closes: list[list[int]] = [[] for _ in range(n)]
    parent = [-1] * n
    closed: set[tuple[int, int]] = set()

    # pass 1: spanning tree and ring-closure edges
    visited[start] = True
    order.append(start)
    stack = [(start, iter(neighbors(start)))]
    while stack:
        v, it = stack[-1]
        for w in it:
            if w == parent[v]:
                continue
            if visited[w]:
                key = (min(v, w), max(v, w))
                if key not in closed:
                    closed.add(key)
                    ring_opens[w].append(v)
                    ring_closes[v].append(w)
                continue
            visited[w] = True
            parent[w] = v
            children[v].append(w)
            order.append(w)
            stack.append((w, iter(neighbors(w))))
            break
        else:
            stack.pop()
    if len(order) != n:
        raise DisconnectedGraph("graph is not connected")

    # pass 2: emit in visit order, allocating the lowest free ring digit
    position = {a: k for k, a in enumerate(order)}
    digits: dict[tuple[int, int], int] = {}
    in_use: set[int] = set()
    out: list[str] = []

    def emit_atom(v: int) -> None:
        out.append(atom_tokens[v])
        closes = sorted(ring_closes[v], key=position.__getitem__)
        opens = sorted(ring_opens[v], key=position.__getitem__)
        freed = []
        for w in closes:
            d = digits.pop((w, v))
            out.append(_bond_token(g, v, w) + _ring_label(d))
            freed.append(d)
        for w in opens:
            d = 1
            while d in in_use:
                d += 1
            in_use.add(d)
            digits[(v, w)] = d
            out.append(_ring_label(d))
        in_use.difference_update(freed)

    work: list = [start]
    while work:
        item = work.pop()
        if isinstance(item, str):
            out.append(item)
            continue
        emit_atom(item)
        kids = children[item]
        # push in reverse so the first child is emitted first
        for k, w in reversed(list(enumerate(kids))):
            bond = _bond_token(g, item, w)
            if k < len(kids) - 1:
                work.append(")")
                work.append(w)
                work.append("(" + bond)
            else:
                work.append(w)
                if bond:
                    work.append(bond)
    return "".join(out), order


def write_smiles(g: MolGraph, start_atom: int = 0, rank: Sequence[int] | None = None,
                 rng: random.Random | None = None) -> str:
    """Emit a SMILES string by depth-first traversal from ``start_atom``.

    Neighbors are visited in ascending ``rank`` (atom index by default); when
    ``rng`` is given they are shuffled instead.  Stereo marks are not written.
    """
    if not 0 <= start_atom < len(g.atoms):
        raise IndexError(f"start atom {start_atom} out of range")
    if rng is not None:
        def neighbors(v):
            nbrs = list(g.adjacency[v])
            rng.shuffle(nbrs)
            return nbrs
    else:
        key = rank.__getitem__ if rank is not None else None
        sorted_adj = [sorted(nbrs, key=key) for nbrs in g.adjacency]
        neighbors = sorted_adj.__getitem__
    return _emit(g, start_atom, neighbors)[0]


# ---------------------------------------------------------------------------
# canonical form
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CanonicalForm:
    smiles: str
    atom_order: tuple[int, ...]  # canonical ordinal -> original atom index

    def ordinal_of(self, atom: int) -> int:
        return self.atom_order.index(atom)


def _dense_rank(keys: list) -> list[int]:
    lookup = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [lookup[k] for k in keys]


class _Canonicalizer:
    def __init__(self, g: MolGraph):
        self.g = g
        n = len(g.atoms)
        ring = g.ring_flags()
        inv = []
        for i, atom in enumerate(g.atoms):
            inv.append((g.degree(i), _ELEMENT_RANK[atom.element], atom.charge, ring[i],
                        atom.total_h, atom.aromatic))
        self.initial = _dense_rank(inv)
        self.nbrs = [[(j, int(g.bond(i, j).order)) for j in g.adjacency[i]] for i in range(n)]
        self.best: str | None = None
        self.best_order: list[int] | None = None
        self.automorphisms: list[list[int]] = []
        self.atom_tokens = [_atom_token(g, i) for i in range(n)]

    def refine(self, ranks: list[int]) -> list[int]:
        n_classes = len(set(ranks))
        nbrs = self.nbrs
        n = len(ranks)
        while n_classes < n:
            stride = n + 1
            keys = [(ranks[i], tuple(sorted(b * stride + ranks[j] for j, b in nbrs[i])))
                    for i in range(n)]
            ranks = _dense_rank(keys)
            k = ranks and max(ranks) + 1
            if k == n_classes:
                break
            n_classes = k
        return ranks

    def leaf(self, ranks: list[int]) -> None:
        g = self.g
        start = ranks.index(0)
        sorted_adj = [sorted(nbrs, key=ranks.__getitem__) for nbrs in g.adjacency]
        smiles, order = _emit(g, start, sorted_adj.__getitem__, self.atom_tokens)
        if self.best is None or smiles < self.best:
            self.best, self.best_order = smiles, order
        elif smiles == self.best:
            perm = [0] * len(order)
            for a, b in zip(self.best_order, order):
                perm[a] = b
            if any(p != i for i, p in enumerate(perm)):
                self.automorphisms.append(perm)

    def _orbit_root(self, fixed: list[int]):
        parent = list(range(len(self.initial)))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for perm in self.automorphisms:
            if all(perm[v] == v for v in fixed):
                for a, b in enumerate(perm):
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[ra] = rb
        return find

    def search(self, ranks: list[int], path: list[int]) -> None:
        ranks = self.refine(ranks)
        n = len(ranks)
        cells: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            cells.setdefault(r, []).append(i)
        if len(cells) == n:
            self.leaf(ranks)
            return
        # smallest non-trivial cell, lowest rank first
        target = min((len(c), r) for r, c in cells.items() if len(c) > 1)[1]
        explored: list[int] = []
        for v in cells[target]:
            if explored:
                find = self._orbit_root(path)
                if any(find(u) == find(v) for u in explored):
                    continue
            explored.append(v)
            child = _dense_rank([(r, i != v) for i, r in enumerate(ranks)])
            self.search(child, path + [v])

    def run(self) -> CanonicalForm:
        self.search(self.initial, [])
        return CanonicalForm(self.best, tuple(self.best_order))


def canonicalize(g: MolGraph) -> CanonicalForm:
    """Deterministic canonical SMILES and atom ordering for a connected graph."""
    if not g.atoms or not g.is_connected():
        raise DisconnectedGraph("canonicalization requires a connected, non-empty graph")
    return _Canonicalizer(g).run()


def canonical_smiles(s: str) -> str:
    return canonicalize(parse_smiles(s)).smiles


def relabel(g: MolGraph, order: Sequence[int]) -> MolGraph:
    """Graph whose atom ``k`` is atom ``order[k]`` of ``g``."""
    new_index = {old: new for new, old in enumerate(order)}
    if len(new_index) != len(g.atoms):
        raise ValueError("order must be a permutation of atom indices")
    atoms = [Atom(**{f: getattr(g.atoms[old], f) for f in Atom.__dataclass_fields__})
             for old in order]
    bonds = [Bond(new_index[b.a], new_index[b.b], b.order, b.stereo) for b in g.bonds]
    return MolGraph(atoms, bonds)
