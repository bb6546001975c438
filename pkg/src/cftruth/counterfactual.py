"""Counterfactual candidates by exhaustive graph-edit enumeration.

Every candidate is exactly one valence-preserving edit away from the
original molecule; candidates are ranked by how far the model's
prediction moves and optionally filtered by calibrated uncertainty.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .molgraph import ALPHABET, ELEMENTS, MolecularGraph

__all__ = [
    "EDIT_KINDS",
    "CandidateLimitError",
    "CounterfactualRecord",
    "EditOp",
    "apply_edit",
    "enumerate_1_edit",
    "enumerate_edit_ops",
    "enumerate_k_edit",
    "filter_by_uncertainty",
    "rank_counterfactuals",
    "read_records_jsonl",
    "write_records_jsonl",
]

EDIT_KINDS = (
    "add_atom_with_bond",
    "delete_leaf_atom",
    "add_bond",
    "delete_bond",
    "change_bond_order",
    "substitute_atom",
)
BOND_ORDERS = (1, 2, 3)
DEFAULT_CANDIDATE_CAP = 100_000
RECORD_SCHEMA = "cftruth.counterfactual/1"


class CandidateLimitError(RuntimeError):
    pass


@dataclass(frozen=True)
class EditOp:
    kind: str
    atoms: tuple[int, ...]
    element: str | None = None
    order: int | None = None


def enumerate_edit_ops(
    g: MolecularGraph,
    kinds: Iterable[str] | None = None,
    alphabet: Sequence[str] = ALPHABET,
) -> list[EditOp]:
    """All single edits of ``g`` that yield a valid, connected molecule."""
    kinds = set(EDIT_KINDS if kinds is None else kinds)
    unknown = kinds - set(EDIT_KINDS)
    if unknown:
        raise ValueError(f"unknown edit kinds: {sorted(unknown)}")
    n = g.n_atoms
    free = g.implicit_hydrogens
    ops: list[EditOp] = []

    if "add_atom_with_bond" in kinds:
        for i in range(n):
            for e in alphabet:
                for o in BOND_ORDERS:
                    if o <= free[i] and o <= ELEMENTS[e].max_valence:
                        ops.append(EditOp("add_atom_with_bond", (i,), e, o))
    if "delete_leaf_atom" in kinds and n > 1:
        for i, nb in enumerate(g.neighbors):
            if len(nb) == 1:
                ops.append(EditOp("delete_leaf_atom", (i,)))
    if "add_bond" in kinds:
        for i in range(n):
            if free[i] == 0:
                continue
            bonded = {j for j, _ in g.neighbors[i]}
            for j in range(i + 1, n):
                if j in bonded:
                    continue
                for o in BOND_ORDERS:
                    if o <= free[i] and o <= free[j]:
                        ops.append(EditOp("add_bond", (i, j), order=o))
    if "delete_bond" in kinds:
        bridges = g.bridges
        for i, j, _ in g.bonds:
            if (i, j) not in bridges:
                ops.append(EditOp("delete_bond", (i, j)))
    if "change_bond_order" in kinds:
        for i, j, o in g.bonds:
            for o2 in BOND_ORDERS:
                if o2 == o:
                    continue
                delta = o2 - o
                if delta <= free[i] and delta <= free[j]:
                    ops.append(EditOp("change_bond_order", (i, j), order=o2))
    if "substitute_atom" in kinds:
        for i, a in enumerate(g.atoms):
            for e in alphabet:
                if e != a and g.bond_sums[i] <= ELEMENTS[e].max_valence:
                    ops.append(EditOp("substitute_atom", (i,), e))
    return ops


def apply_edit(g: MolecularGraph, op: EditOp) -> MolecularGraph:
    atoms = list(g.atoms)
    bonds = list(g.bonds)
    kind = op.kind
    if kind == "add_atom_with_bond":
        (i,) = op.atoms
        atoms.append(op.element)
        bonds.append((i, len(g.atoms), op.order))
    elif kind == "delete_leaf_atom":
        (i,) = op.atoms
        del atoms[i]
        bonds = [
            (a - (a > i), b - (b > i), o) for a, b, o in bonds if a != i and b != i
        ]
    elif kind == "add_bond":
        i, j = op.atoms
        bonds.append((i, j, op.order))
    elif kind == "delete_bond":
        i, j = op.atoms
        bonds = [(a, b, o) for a, b, o in bonds if (a, b) != (i, j)]
    elif kind == "change_bond_order":
        i, j = op.atoms
        bonds = [(a, b, op.order if (a, b) == (i, j) else o) for a, b, o in bonds]
    elif kind == "substitute_atom":
        (i,) = op.atoms
        atoms[i] = op.element
    else:
        raise ValueError(f"unknown edit kind {kind!r}")
    return MolecularGraph(atoms=tuple(atoms), bonds=tuple(bonds))


def enumerate_1_edit(
    g: MolecularGraph,
    kinds: Iterable[str] | None = None,
    alphabet: Sequence[str] = ALPHABET,
) -> list[MolecularGraph]:
    """Distinct molecules one edit away from ``g``, sorted by canonical SMILES."""
    own = g.canonical_smiles
    found: dict[str, MolecularGraph] = {}
    for op in enumerate_edit_ops(g, kinds, alphabet):
        h = apply_edit(g, op)
        key = h.canonical_smiles
        if key != own and key not in found:
            found[key] = h
    return [found[k] for k in sorted(found)]


def enumerate_k_edit(
    g: MolecularGraph,
    k: int,
    kinds: Iterable[str] | None = None,
    alphabet: Sequence[str] = ALPHABET,
    cap: int = DEFAULT_CANDIDATE_CAP,
) -> list[MolecularGraph]:
    """Breadth-first union of the 1..k edit shells around ``g`` (``g`` excluded)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    kinds = None if kinds is None else tuple(kinds)
    own = g.canonical_smiles
    seen: dict[str, MolecularGraph] = {}
    frontier = [g]
    for depth in range(k):
        nxt = []
        for h in frontier:
            for c in enumerate_1_edit(h, kinds, alphabet):
                key = c.canonical_smiles
                if key == own or key in seen:
                    continue
                seen[key] = c
                nxt.append(c)
                if len(seen) > cap:
                    raise CandidateLimitError(
                        f"{depth + 1}-edit neighbourhood exceeds {cap} candidates; raise cap or lower k"
                    )
        frontier = nxt
    return [seen[key] for key in sorted(seen)]


@dataclass(frozen=True)
class CounterfactualRecord:
    """One ranked counterfactual; ``sigma2``/``sigma2_prime`` are calibrated values."""

    original_smiles: str
    smiles: str
    y_hat: float
    y_hat_prime: float
    divergence: float
    y: float | None = None
    sigma2: float | None = None
    sigma2_prime: float | None = None
    y_prime: float | None = None
    truthful: bool | None = None
    kept: bool | None = None
    sigma2_raw: float | None = None
    sigma2_prime_raw: float | None = None

    def to_json(self) -> str:
        return json.dumps({"schema": RECORD_SCHEMA, **asdict(self)}, sort_keys=True)


def rank_counterfactuals(
    model: Callable[[Sequence[MolecularGraph]], np.ndarray],
    g: MolecularGraph,
    candidates: Sequence[MolecularGraph],
    top_k: int = 10,
    mode: str = "absolute",
) -> list[CounterfactualRecord]:
    """Rank ``candidates`` by prediction divergence from ``g`` and keep ``top_k``.

    ``model`` maps a list of graphs to an array of predictions.  ``mode``
    is ``"absolute"`` (largest ``|y'_hat - y_hat|``), ``"increase"`` or
    ``"decrease"`` (only candidates moving the prediction that way).
    Ties are broken by canonical SMILES.
    """
    if not candidates:
        raise ValueError("no candidates to rank")
    if mode not in ("absolute", "increase", "decrease"):
        raise ValueError(f"unknown ranking mode {mode!r}")
    preds = np.asarray(model([g, *candidates]), dtype=float)
    y_hat = float(preds[0])
    records = []
    for c, p in zip(candidates, preds[1:]):
        shift = float(p) - y_hat
        if mode == "increase" and shift <= 0:
            continue
        if mode == "decrease" and shift >= 0:
            continue
        records.append(
            CounterfactualRecord(
                original_smiles=g.canonical_smiles,
                smiles=c.canonical_smiles,
                y_hat=y_hat,
                y_hat_prime=float(p),
                divergence=abs(shift),
            )
        )
    records.sort(key=lambda r: (-r.divergence, r.smiles))
    return records[:top_k]


def filter_by_uncertainty(records: Sequence[CounterfactualRecord], xi: float) -> list[CounterfactualRecord]:
    """Keep records whose calibrated uncertainty is at most ``xi`` (stable order)."""
    if any(r.sigma2_prime is None for r in records):
        raise ValueError("all records need a calibrated sigma2_prime before filtering")
    return [r for r in records if r.sigma2_prime <= xi]


def with_fields(record: CounterfactualRecord, **changes) -> CounterfactualRecord:
    return replace(record, **changes)


def write_records_jsonl(records: Iterable[CounterfactualRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records_jsonl(path) -> list[CounterfactualRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            schema = row.pop("schema", RECORD_SCHEMA)
            if schema != RECORD_SCHEMA:
                raise ValueError(f"unsupported counterfactual schema {schema!r}")
            out.append(CounterfactualRecord(**row))
    return out
