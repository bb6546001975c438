"""Molecular graphs over a small organic alphabet.

Hydrogens are implicit everywhere: a node's implicit H count is its
element's maximum valence minus the sum of its incident bond orders.
Only kekulized, uncharged molecules over C, N, O and F are supported.

Restricted SMILES grammar accepted by :func:`parse_smiles`::

    smiles    ::= atom chain*
    chain     ::= bond? atom | bond? ring | "(" bond? atom chain* ")"
    atom      ::= "C" | "N" | "O" | "F"
    bond      ::= "-" | "=" | "#"
    ring      ::= digit | "%" digit digit
"""

from __future__ import annotations

import enum
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ALPHABET",
    "ELEMENTS",
    "BondOrder",
    "Element",
    "Fingerprint",
    "MolecularGraph",
    "MoleculeError",
    "RingClosureError",
    "SmilesSyntaxError",
    "UnsupportedElementError",
    "ValenceError",
    "morgan_fingerprint",
    "murcko_scaffold",
    "pairwise_tanimoto",
    "parse_smiles",
    "tanimoto_distance",
    "write_smiles",
]


@dataclass(frozen=True)
class Element:
    symbol: str
    max_valence: int
    atomic_weight: float


ELEMENTS: dict[str, Element] = {
    "C": Element("C", 4, 12.011),
    "N": Element("N", 3, 14.007),
    "O": Element("O", 2, 15.999),
    "F": Element("F", 1, 18.998),
}
ALPHABET: tuple[str, ...] = tuple(ELEMENTS)


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3


BOND_SYMBOLS = {1: "", 2: "=", 3: "#"}
_SYMBOL_ORDERS = {"-": 1, "=": 2, "#": 3}

# caps the individualization search in canonicalization
MAX_CANON_LEAVES = 5000


class MoleculeError(ValueError):
    """Base class for invalid molecules and malformed SMILES."""


class ValenceError(MoleculeError):
    pass


class SmilesSyntaxError(MoleculeError):
    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class RingClosureError(SmilesSyntaxError):
    pass


class UnsupportedElementError(SmilesSyntaxError):
    pass


@dataclass(frozen=True)
class MolecularGraph:
    """Immutable, validated molecular graph.

    ``atoms`` holds element symbols, ``bonds`` holds ``(i, j, order)``
    triples with ``i < j``.  Construction raises :class:`MoleculeError`
    (or :class:`ValenceError`) when any invariant is violated.
    """

    atoms: tuple[str, ...]
    bonds: tuple[tuple[int, int, int], ...] = ()
    charges: tuple[int, ...] = field(default=(), compare=True)

    def __post_init__(self):
        atoms = tuple(self.atoms)
        bonds = tuple(sorted((int(min(i, j)), int(max(i, j)), int(o)) for i, j, o in self.bonds))
        charges = tuple(self.charges) if self.charges else (0,) * len(atoms)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "bonds", bonds)
        object.__setattr__(self, "charges", charges)

        n = len(atoms)
        if n == 0:
            raise MoleculeError("a molecule needs at least one atom")
        if len(charges) != n:
            raise MoleculeError("charges must align with atoms")
        for a in atoms:
            if a not in ELEMENTS:
                raise UnsupportedElementError(f"unsupported element {a!r}")
        seen = set()
        for i, j, o in bonds:
            if i == j:
                raise MoleculeError(f"self-loop on atom {i}")
            if j >= n or i < 0:
                raise MoleculeError(f"bond ({i}, {j}) references a missing atom")
            if o not in BOND_SYMBOLS:
                raise MoleculeError(f"unsupported bond order {o}")
            if (i, j) in seen:
                raise MoleculeError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
        used = self.bond_sums
        for idx, (a, s) in enumerate(zip(atoms, used)):
            if s > ELEMENTS[a].max_valence:
                raise ValenceError(
                    f"atom {idx} ({a}) has bond order sum {s} > max valence {ELEMENTS[a].max_valence}"
                )
        if not self._connected():
            raise MoleculeError("molecule is not connected")

    # ------------------------------------------------------------------
    # structure

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @cached_property
    def neighbors(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the ``(neighbor, order)`` pairs sorted by neighbor index."""
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for i, j, o in self.bonds:
            adj[i].append((j, o))
            adj[j].append((i, o))
        return tuple(tuple(sorted(a)) for a in adj)

    @cached_property
    def bond_sums(self) -> tuple[int, ...]:
        sums = [0] * len(self.atoms)
        for i, j, o in self.bonds:
            sums[i] += o
            sums[j] += o
        return tuple(sums)

    @property
    def degrees(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.neighbors)

    @cached_property
    def implicit_hydrogens(self) -> tuple[int, ...]:
        return tuple(ELEMENTS[a].max_valence - s for a, s in zip(self.atoms, self.bond_sums))

    def free_valence(self, i: int) -> int:
        return self.implicit_hydrogens[i]

    def bond_order(self, i: int, j: int) -> int:
        for k, o in self.neighbors[i]:
            if k == j:
                return o
        return 0

    def _connected(self) -> bool:
        n = len(self.atoms)
        adj = [[] for _ in range(n)]
        for i, j, _ in self.bonds:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == n

    @cached_property
    def bridges(self) -> frozenset[tuple[int, int]]:
        """Bonds whose removal disconnects the molecule, as ``(i, j)`` with ``i < j``."""
        n = len(self.atoms)
        disc = [-1] * n
        low = [0] * n
        out = set()
        timer = 0
        # iterative Tarjan; stack items are (vertex, parent, neighbor iterator)
        for root in range(n):
            if disc[root] != -1:
                continue
            disc[root] = low[root] = timer
            timer += 1
            stack = [(root, -1, iter(self.neighbors[root]))]
            while stack:
                v, parent, it = stack[-1]
                advanced = False
                for w, _ in it:
                    if w == parent:
                        continue
                    if disc[w] == -1:
                        disc[w] = low[w] = timer
                        timer += 1
                        stack.append((w, v, iter(self.neighbors[w])))
                        advanced = True
                        break
                    low[v] = min(low[v], disc[w])
                if not advanced:
                    stack.pop()
                    if parent != -1:
                        low[parent] = min(low[parent], low[v])
                        if low[v] > disc[parent]:
                            out.add((min(v, parent), max(v, parent)))
        return frozenset(out)

    @cached_property
    def ring_atoms(self) -> frozenset[int]:
        bridges = self.bridges
        return frozenset(
            k for i, j, _ in self.bonds if (i, j) not in bridges for k in (i, j)
        )

    @property
    def is_cyclic(self) -> bool:
        return len(self.bonds) > len(self.atoms) - 1

    # ------------------------------------------------------------------
    # features

    @cached_property
    def node_features(self) -> np.ndarray:
        """``N x (len(ALPHABET) + 2)``: one-hot element, atomic weight, formal charge."""
        k = len(ALPHABET)
        x = np.zeros((len(self.atoms), k + 2))
        for i, (a, c) in enumerate(zip(self.atoms, self.charges)):
            x[i, ALPHABET.index(a)] = 1.0
            x[i, k] = ELEMENTS[a].atomic_weight
            x[i, k + 1] = c
        x.setflags(write=False)
        return x

    @cached_property
    def edge_features(self) -> np.ndarray:
        """``E x 3`` one-hot bond order, rows aligned with ``bonds``."""
        u = np.zeros((len(self.bonds), len(BOND_SYMBOLS)))
        for e, (_, _, o) in enumerate(self.bonds):
            u[e, o - 1] = 1.0
        u.setflags(write=False)
        return u

    # ------------------------------------------------------------------
    # canonical forms

    @cached_property
    def _canonical(self) -> tuple[str, tuple[int, ...]]:
        return _canonicalize(self)

    @property
    def canonical_smiles(self) -> str:
        return self._canonical[0]

    @property
    def canonical_order(self) -> tuple[int, ...]:
        """Atom indices in canonical (written) order."""
        return self._canonical[1]

    @cached_property
    def canonical(self) -> "MolecularGraph":
        """Isomorphic copy whose atoms are numbered in canonical order."""
        order = self.canonical_order
        if order == tuple(range(len(order))):
            return self
        return self.relabel(order)

    def relabel(self, order: Sequence[int]) -> "MolecularGraph":
        """Return a copy where new atom ``k`` is old atom ``order[k]``."""
        inv = {old: new for new, old in enumerate(order)}
        if len(inv) != len(self.atoms):
            raise ValueError("order must be a permutation of atom indices")
        return MolecularGraph(
            atoms=tuple(self.atoms[o] for o in order),
            bonds=tuple((inv[i], inv[j], b) for i, j, b in self.bonds),
            charges=tuple(self.charges[o] for o in order),
        )

    def is_isomorphic(self, other: "MolecularGraph") -> bool:
        return self.canonical_smiles == other.canonical_smiles

    def __repr__(self) -> str:
        return f"MolecularGraph({self.canonical_smiles!r})"


# ----------------------------------------------------------------------
# parsing


def parse_smiles(text: str) -> MolecularGraph:
    """Parse a restricted, kekulized SMILES string into a :class:`MolecularGraph`.

    Raises :class:`SmilesSyntaxError` (with ``position``), :class:`RingClosureError`,
    :class:`UnsupportedElementError` or :class:`ValenceError`.
    """
    atoms: list[str] = []
    bonds: dict[tuple[int, int], int] = {}
    branch_stack: list[int] = []
    open_rings: dict[int, tuple[int, int | None, int]] = {}
    prev: int | None = None
    pending: int | None = None
    pending_pos = 0
    pos = 0
    n = len(text)

    def add_bond(a: int, b: int, order: int, where: int) -> None:
        key = (min(a, b), max(a, b))
        if a == b:
            raise RingClosureError("ring closure bonds an atom to itself", where)
        if key in bonds:
            raise RingClosureError("ring closure duplicates an existing bond", where)
        bonds[key] = order

    while pos < n:
        ch = text[pos]
        if ch.isupper():
            sym = ch
            if pos + 1 < n and text[pos + 1].islower():
                sym = text[pos : pos + 2]
            if sym not in ELEMENTS:
                raise UnsupportedElementError(f"unsupported element {sym!r}", pos)
            idx = len(atoms)
            atoms.append(sym)
            if prev is not None:
                add_bond(prev, idx, pending or 1, pos)
            elif pending is not None:
                raise SmilesSyntaxError("bond symbol without a preceding atom", pending_pos)
            prev = idx
            pending = None
            pos += len(sym)
        elif ch.islower():
            raise SmilesSyntaxError(f"aromatic atom {ch!r} not supported; kekulize the input", pos)
        elif ch in _SYMBOL_ORDERS:
            if prev is None:
                raise SmilesSyntaxError("bond symbol without a preceding atom", pos)
            if pending is not None:
                raise SmilesSyntaxError("two consecutive bond symbols", pos)
            pending = _SYMBOL_ORDERS[ch]
            pending_pos = pos
            pos += 1
        elif ch == "(":
            if prev is None:
                raise SmilesSyntaxError("branch opened before any atom", pos)
            if pending is not None:
                raise SmilesSyntaxError("bond symbol before '('", pos)
            branch_stack.append(prev)
            pos += 1
        elif ch == ")":
            if not branch_stack:
                raise SmilesSyntaxError("unmatched ')'", pos)
            if pending is not None:
                raise SmilesSyntaxError("dangling bond symbol before ')'", pos)
            if text[pos - 1] == "(":
                raise SmilesSyntaxError("empty branch", pos)
            prev = branch_stack.pop()
            pos += 1
        elif ch.isdigit() or ch == "%":
            start = pos
            if ch == "%":
                digits = text[pos + 1 : pos + 3]
                if len(digits) != 2 or not digits.isdigit():
                    raise SmilesSyntaxError("'%' must be followed by two digits", pos)
                label = int(digits)
                pos += 3
            else:
                label = int(ch)
                pos += 1
            if prev is None:
                raise SmilesSyntaxError("ring closure before any atom", start)
            if label == 0:
                raise RingClosureError("ring closure label 0 is not allowed", start)
            if label in open_rings:
                atom, order, _ = open_rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise RingClosureError(f"conflicting bond orders on ring closure {label}", start)
                add_bond(atom, prev, pending or order or 1, start)
            else:
                open_rings[label] = (prev, pending, start)
            pending = None
        elif ch == "[":
            raise SmilesSyntaxError("bracket atoms (charges, isotopes, explicit H) not supported", pos)
        elif ch == ".":
            raise SmilesSyntaxError("disconnected fragments not supported", pos)
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r}", pos)

    if not atoms:
        raise SmilesSyntaxError("empty SMILES", 0)
    if pending is not None:
        raise SmilesSyntaxError("dangling bond symbol at end of input", pending_pos)
    if branch_stack:
        raise SmilesSyntaxError("unclosed branch '('", n)
    if open_rings:
        label, (_, _, where) = next(iter(sorted(open_rings.items())))
        raise RingClosureError(f"unmatched ring closure {label}", where)
    return MolecularGraph(atoms=tuple(atoms), bonds=tuple((i, j, o) for (i, j), o in bonds.items()))


# ----------------------------------------------------------------------
# canonicalization and writing


def write_smiles(g: MolecularGraph) -> str:
    """Canonical SMILES: isomorphic graphs give identical strings."""
    return g.canonical_smiles


def _dense_rank(keys: list) -> list[int]:
    uniq = {k: r for r, k in enumerate(sorted(set(keys)))}
    return [uniq[k] for k in keys]


def _refine(colors: list[int], adj) -> list[int]:
    n_classes = len(set(colors))
    while True:
        keys = [(colors[i], tuple(sorted((colors[j], o) for j, o in adj[i]))) for i in range(len(colors))]
        new = _dense_rank(keys)
        k = len(set(new))
        if k == n_classes:
            return new
        colors, n_classes = new, k


def _canonicalize(g: MolecularGraph) -> tuple[str, tuple[int, ...]]:
    adj = g.neighbors
    n = g.n_atoms
    init = [
        (ALPHABET.index(a), len(adj[i]), g.bond_sums[i], g.charges[i])
        for i, a in enumerate(g.atoms)
    ]
    colors = _refine(_dense_rank(init), adj)

    best: list = [None, None]
    leaves = [0]

    def search(colors: list[int]) -> None:
        if leaves[0] >= MAX_CANON_LEAVES:
            return
        if len(set(colors)) == n:
            leaves[0] += 1
            s, order = _write_ranked(g, colors)
            if best[0] is None or s < best[0]:
                best[0], best[1] = s, order
            return
        counts: dict[int, int] = {}
        for c in colors:
            counts[c] = counts.get(c, 0) + 1
        target = min(c for c, k in counts.items() if k > 1)
        members = [i for i in range(n) if colors[i] == target]
        # non-adjacent atoms with identical neighbourhoods are interchangeable
        tried: set = set()
        for v in members:
            sig = adj[v]
            if sig in tried:
                continue
            tried.add(sig)
            split = _dense_rank([(c, 0 if i == v else 1) for i, c in enumerate(colors)])
            search(_refine(split, adj))

    search(colors)
    if leaves[0] >= MAX_CANON_LEAVES:
        warnings.warn(
            f"canonicalization search truncated at {MAX_CANON_LEAVES} leaves; "
            "string may not be canonical for this highly symmetric graph",
            RuntimeWarning,
        )
    return best[0], best[1]


def _write_ranked(g: MolecularGraph, rank: list[int]) -> tuple[str, tuple[int, ...]]:
    """Depth-first SMILES walk visiting neighbours in ``rank`` order."""
    adj = [sorted(nb, key=lambda t: rank[t[0]]) for nb in g.neighbors]
    start = min(range(g.n_atoms), key=lambda i: rank[i])

    # pass 1: spanning tree and ring-closure edges
    parent = {start: -1}
    children: dict[int, list[tuple[int, int]]] = {i: [] for i in range(g.n_atoms)}
    openings: dict[int, list[tuple[int, int]]] = {i: [] for i in range(g.n_atoms)}
    closings: dict[int, list[tuple[int, int]]] = {i: [] for i in range(g.n_atoms)}
    closure_seen: set = set()
    order: list[int] = []
    stack = [(start, iter(adj[start]))]
    order.append(start)
    while stack:
        v, it = stack[-1]
        for w, o in it:
            if w == parent[v]:
                continue
            if w in parent:
                key = (min(v, w), max(v, w))
                if key not in closure_seen:
                    closure_seen.add(key)
                    # w is an ancestor of v: w opens, v closes
                    openings[w].append((v, o))
                    closings[v].append((w, o))
                continue
            parent[w] = v
            children[v].append((w, o))
            order.append(w)
            stack.append((w, iter(adj[w])))
            break
        else:
            stack.pop()

    position = {a: k for k, a in enumerate(order)}
    out: list[str] = []
    free = list(range(1, 100))
    label_of: dict[tuple[int, int], int] = {}

    def ring_token(label: int) -> str:
        return str(label) if label < 10 else f"%{label:02d}"

    # pass 2: emit, iteratively to stay off the recursion limit
    work: list = [("atom", start, 0)]
    while work:
        item = work.pop()
        if item[0] == "text":
            out.append(item[1])
            continue
        _, v, bond = item
        out.append(BOND_SYMBOLS.get(bond, "") + g.atoms[v])
        release = []
        for w, o in sorted(closings[v], key=lambda t: position[t[0]]):
            label = label_of.pop((w, v))
            out.append(ring_token(label))
            release.append(label)
        for w, o in sorted(openings[v], key=lambda t: position[t[0]]):
            label = free.pop(0)
            label_of[(v, w)] = label
            out.append(BOND_SYMBOLS[o] + ring_token(label))
        for label in release:
            free.append(label)
        free.sort()
        kids = children[v]
        # push in reverse so the first child is emitted first
        todo: list = []
        for k, (w, o) in enumerate(kids):
            if k < len(kids) - 1:
                todo.append(("text", "("))
                todo.append(("atom", w, o))
                todo.append(("text", ")"))
            else:
                todo.append(("atom", w, o))
        work.extend(reversed(todo))
    return "".join(out), tuple(order)


# ----------------------------------------------------------------------
# fingerprints


def _hash_ints(values: Iterable[int]) -> int:
    vals = list(values)
    return zlib.crc32(struct.pack(f"<{len(vals)}q", *vals))


@dataclass(frozen=True)
class Fingerprint:
    on_bits: frozenset[int]
    nbits: int = 1024
    radius: int = 2

    def to_array(self) -> np.ndarray:
        arr = np.zeros(self.nbits, dtype=bool)
        if self.on_bits:
            arr[list(self.on_bits)] = True
        return arr

    def __len__(self) -> int:
        return self.nbits


def morgan_fingerprint(g: MolecularGraph, radius: int = 2, nbits: int = 1024) -> Fingerprint:
    """Hashed circular-environment fingerprint (ECFP style)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if nbits < 64:
        raise ValueError("nbits must be >= 64")
    ring = g.ring_atoms
    ids = [
        _hash_ints(
            (ALPHABET.index(a), len(g.neighbors[i]), g.implicit_hydrogens[i], g.charges[i], int(i in ring))
        )
        for i, a in enumerate(g.atoms)
    ]
    bits = {h % nbits for h in ids}
    for r in range(1, radius + 1):
        ids = [
            _hash_ints(
                [r, ids[i]] + [x for pair in sorted((o, ids[j]) for j, o in g.neighbors[i]) for x in pair]
            )
            for i in range(g.n_atoms)
        ]
        bits.update(h % nbits for h in ids)
    return Fingerprint(frozenset(bits), nbits=nbits, radius=radius)


def tanimoto_distance(a: Fingerprint, b: Fingerprint) -> float:
    """Jaccard distance ``1 - |A & B| / |A | B|``; 0 when both are empty."""
    if a.nbits != b.nbits:
        raise ValueError(f"fingerprint length mismatch: {a.nbits} vs {b.nbits}")
    union = len(a.on_bits | b.on_bits)
    if union == 0:
        return 0.0
    return 1.0 - len(a.on_bits & b.on_bits) / union


def pairwise_tanimoto(queries: Sequence[Fingerprint], refs: Sequence[Fingerprint]) -> np.ndarray:
    """Dense ``len(queries) x len(refs)`` Tanimoto distance matrix."""
    if not queries or not refs:
        return np.zeros((len(queries), len(refs)))
    nbits = {f.nbits for f in queries} | {f.nbits for f in refs}
    if len(nbits) != 1:
        raise ValueError("fingerprint length mismatch")
    q = np.stack([f.to_array() for f in queries]).astype(np.float64)
    r = np.stack([f.to_array() for f in refs]).astype(np.float64)
    inter = q @ r.T
    union = q.sum(1)[:, None] + r.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - inter / union
    d[union == 0] = 0.0
    return d


# ----------------------------------------------------------------------
# scaffolds

ACYCLIC = "ACYCLIC"


def murcko_scaffold(g: MolecularGraph) -> str:
    """Canonical SMILES of the ring systems plus linkers, or ``"ACYCLIC"``."""
    if not g.is_cyclic:
        return ACYCLIC
    alive = set(range(g.n_atoms))
    degree = list(g.degrees)
    leaves = [i for i in alive if degree[i] <= 1]
    while leaves:
        nxt = []
        for v in leaves:
            if v not in alive:
                continue
            alive.discard(v)
            for w, _ in g.neighbors[v]:
                if w in alive:
                    degree[w] -= 1
                    if degree[w] == 1:
                        nxt.append(w)
        leaves = nxt
    return _subgraph(g, sorted(alive)).canonical_smiles


def _subgraph(g: MolecularGraph, keep: list[int]) -> MolecularGraph:
    index = {old: new for new, old in enumerate(keep)}
    return MolecularGraph(
        atoms=tuple(g.atoms[i] for i in keep),
        bonds=tuple((index[i], index[j], o) for i, j, o in g.bonds if i in index and j in index),
        charges=tuple(g.charges[i] for i in keep),
    )
