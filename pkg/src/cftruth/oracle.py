"""Deterministic additive logP oracle and synthetic labelled datasets.

The oracle types every heavy atom into one class of a reduced
Crippen-style scheme and sums the class contributions plus one
contribution per implicit hydrogen (by parent element).  Dataset
molecules come from random edit walks started at small seed molecules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .counterfactual import EDIT_KINDS, apply_edit, enumerate_edit_ops
from .molgraph import MolecularGraph, parse_smiles

__all__ = [
    "DEFAULT_SEEDS",
    "DEFAULT_WALK_WEIGHTS",
    "ContributionTable",
    "InsufficientDiversityError",
    "LabeledSample",
    "atom_class",
    "atom_contributions",
    "crippen_logp",
    "generate_dataset",
    "load_contribution_table",
    "load_jsonl",
    "load_smiles_file",
    "random_molecule",
    "save_jsonl",
]

TABLE_FILE = "contributions_v1.txt"
DATASET_SCHEMA = "cftruth.dataset/1"

DEFAULT_SEEDS = ("C", "C1=CC=CC=C1", "CC(=O)O")

# Edit-kind weights for dataset walks.  Uniform weighting over all valid
# edits is dominated by ring closures in larger molecules.
DEFAULT_WALK_WEIGHTS = {
    "add_atom_with_bond": 0.55,
    "substitute_atom": 0.2,
    "change_bond_order": 0.1,
    "delete_leaf_atom": 0.07,
    "add_bond": 0.04,
    "delete_bond": 0.04,
}


class InsufficientDiversityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContributionTable:
    values: Mapping[str, float]
    version: int = 1

    def __getitem__(self, key: str) -> float:
        return self.values[key]


def _parse_table(text: str) -> ContributionTable:
    values = {}
    version = 1
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("version"):
                version = int(body.split()[1])
            continue
        name, value = line.split()
        values[name] = float(value)
    return ContributionTable(values=values, version=version)


@lru_cache(maxsize=None)
def load_contribution_table(path: str | None = None) -> ContributionTable:
    if path is None:
        text = resources.files("cftruth").joinpath("data", TABLE_FILE).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return _parse_table(text)


_HETERO = frozenset("NOF")


def atom_class(g: MolecularGraph, i: int) -> str:
    """Contribution class of heavy atom ``i``."""
    el = g.atoms[i]
    nbrs = g.neighbors[i]
    orders = [o for _, o in nbrs]
    n_double = orders.count(2)
    has_triple = 3 in orders
    h = g.implicit_hydrogens[i]
    if el == "C":
        if has_triple or n_double >= 2:
            return "C_sp"
        if n_double == 1:
            partner = next(g.atoms[j] for j, o in nbrs if o == 2)
            return "C_sp2_x" if partner in _HETERO else "C_sp2"
        n_het = sum(g.atoms[j] in _HETERO for j, _ in nbrs)
        if n_het == 0:
            return "C_sp3_a" if len(nbrs) <= 2 else "C_sp3_b"
        return "C_sp3_x_h" if h >= 2 else "C_sp3_x"
    if el == "N":
        if has_triple:
            return "N_sp"
        if n_double:
            return "N_sp2"
        return "N_sp3_h2" if h >= 2 else f"N_sp3_h{h}"
    if el == "O":
        if n_double:
            return "O_carbonyl"
        return "O_hydroxyl" if h >= 1 else "O_ether"
    return el


def atom_contributions(g: MolecularGraph, table: ContributionTable | None = None) -> np.ndarray:
    """Per heavy atom: its class contribution plus those of its implicit hydrogens."""
    table = table or load_contribution_table()
    return np.array(
        [
            table[atom_class(g, i)] + g.implicit_hydrogens[i] * table[f"H_{g.atoms[i]}"]
            for i in range(g.n_atoms)
        ]
    )


def crippen_logp(g: MolecularGraph, table: ContributionTable | None = None) -> float:
    """Additive logP of ``g``; invariant under atom relabelling."""
    # summing in canonical order makes the float result labelling-independent
    contrib = atom_contributions(g, table)
    return float(sum(contrib[k] for k in g.canonical_order))


@dataclass(frozen=True)
class LabeledSample:
    graph: MolecularGraph
    y: float

    @property
    def smiles(self) -> str:
        return self.graph.canonical_smiles


def random_molecule(
    seed_graph: MolecularGraph,
    steps: int,
    rng: np.random.Generator,
    kind_weights: Mapping[str, float] | None = None,
) -> MolecularGraph:
    """Random walk of ``steps`` valid single edits starting at ``seed_graph``.

    Without ``kind_weights`` each step draws uniformly over all valid edits.
    With weights, an edit kind is drawn first (among kinds that have at
    least one valid edit, renormalized) and then an edit of that kind
    uniformly.  The walk stops early if no valid edit exists.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    g = seed_graph
    for _ in range(steps):
        ops = enumerate_edit_ops(g)
        if not ops:
            break
        if kind_weights is None:
            op = ops[int(rng.integers(len(ops)))]
        else:
            by_kind = {k: [op for op in ops if op.kind == k] for k in EDIT_KINDS}
            kinds = [k for k in EDIT_KINDS if by_kind[k] and kind_weights.get(k, 0.0) > 0]
            if not kinds:
                break
            w = np.array([kind_weights[k] for k in kinds], dtype=float)
            kind = kinds[int(rng.choice(len(kinds), p=w / w.sum()))]
            pool = by_kind[kind]
            op = pool[int(rng.integers(len(pool)))]
        g = apply_edit(g, op)
    return g


def generate_dataset(
    n: int,
    max_steps: int,
    rng: np.random.Generator,
    seeds: Sequence[MolecularGraph | str] = DEFAULT_SEEDS,
    kind_weights: Mapping[str, float] | None = DEFAULT_WALK_WEIGHTS,
    max_attempts: int | None = None,
) -> list[LabeledSample]:
    """``n`` unique molecules labelled by :func:`crippen_logp`."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed_graphs = [parse_smiles(s) if isinstance(s, str) else s for s in seeds]
    max_attempts = max_attempts if max_attempts is not None else 50 * n + 100
    out: list[LabeledSample] = []
    seen: set[str] = set()
    for _ in range(max_attempts):
        seed = seed_graphs[int(rng.integers(len(seed_graphs)))]
        steps = int(rng.integers(max_steps + 1))
        g = random_molecule(seed, steps, rng, kind_weights).canonical
        key = g.canonical_smiles
        if key in seen:
            continue
        seen.add(key)
        out.append(LabeledSample(g, crippen_logp(g)))
        if len(out) == n:
            return out
    raise InsufficientDiversityError(
        f"only {len(out)} unique molecules after {max_attempts} attempts (wanted {n}); "
        "increase max_steps or add seeds"
    )


def label_graphs(graphs: Iterable[MolecularGraph]) -> list[LabeledSample]:
    return [LabeledSample(g, crippen_logp(g)) for g in graphs]


def save_jsonl(samples: Iterable[LabeledSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({"schema": DATASET_SCHEMA, "smiles": s.smiles, "y": s.y}) + "\n")


def load_jsonl(path) -> list[LabeledSample]:
    """Read ``{smiles, y}`` lines; the stored label is kept as given."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                out.append(LabeledSample(parse_smiles(row["smiles"]), float(row["y"])))
    return out


def load_smiles_file(path) -> list[LabeledSample]:
    """One SMILES per line; labels computed by the oracle."""
    with open(path, encoding="utf-8") as fh:
        smiles = [line.split()[0] for line in fh if line.strip() and not line.startswith("#")]
    return label_graphs(parse_smiles(s) for s in smiles)
