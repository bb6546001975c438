import json

import numpy as np
import pytest
from hypothesis import given, settings

from cftruth.counterfactual import (
    CandidateLimitError,
    CounterfactualRecord,
    enumerate_1_edit,
    enumerate_k_edit,
    filter_by_uncertainty,
    rank_counterfactuals,
    read_records_jsonl,
    write_records_jsonl,
)
from cftruth.molgraph import MoleculeError, MolecularGraph, parse_smiles

from graphs import molecules, random_graph

ALPHABET = ("C", "N", "O", "F")


def _try(atoms, bonds):
    try:
        return MolecularGraph(tuple(atoms), tuple(bonds))
    except MoleculeError:
        return None


def brute_force_neighbours(g: MolecularGraph) -> set[str]:
    """Every (kind, operand, element, order) tuple, kept when the constructor accepts it."""
    n = g.n_atoms
    atoms = list(g.atoms)
    bonds = list(g.bonds)
    bonded = {(i, j) for i, j, _ in bonds}
    out = []
    for i in range(n):
        for e in ALPHABET:
            for o in (1, 2, 3):
                out.append(_try(atoms + [e], bonds + [(i, n, o)]))
    for i in range(n):
        if n > 1 and sum(i in (a, b) for a, b, _ in bonds) == 1:
            keep = [k for k in range(n) if k != i]
            idx = {old: new for new, old in enumerate(keep)}
            out.append(_try([atoms[k] for k in keep], [(idx[a], idx[b], o) for a, b, o in bonds if i not in (a, b)]))
    for i in range(n):
        for j in range(i + 1, n):
            if (i, j) not in bonded:
                for o in (1, 2, 3):
                    out.append(_try(atoms, bonds + [(i, j, o)]))
    for k, (i, j, o) in enumerate(bonds):
        out.append(_try(atoms, bonds[:k] + bonds[k + 1 :]))
        for o2 in (1, 2, 3):
            if o2 != o:
                out.append(_try(atoms, bonds[:k] + [(i, j, o2)] + bonds[k + 1 :]))
    for i in range(n):
        for e in ALPHABET:
            if e != atoms[i]:
                out.append(_try(atoms[:i] + [e] + atoms[i + 1 :], bonds))
    return {h.canonical_smiles for h in out if h is not None} - {g.canonical_smiles}


def test_methane_has_12_neighbours():
    neigh = enumerate_1_edit(parse_smiles("C"))
    assert len(neigh) == 12
    expected = {"CC", "CN", "CO", "CF", "C=C", "C=N", "C=O", "C#C", "C#N", "N", "O", "F"}
    assert {g.canonical_smiles for g in neigh} == {parse_smiles(s).canonical_smiles for s in expected}


def test_fluorine_atom_has_7_neighbours():
    assert len(enumerate_1_edit(parse_smiles("F"))) == 7


def test_matches_brute_force_on_random_small_graphs():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g = random_graph(rng, 5)
        got = [h.canonical_smiles for h in enumerate_1_edit(g)]
        assert len(got) == len(set(got))
        assert set(got) == brute_force_neighbours(g)


@settings(max_examples=40, deadline=None)
@given(molecules(max_atoms=7))
def test_output_valid_sorted_and_excludes_input(g):
    neigh = enumerate_1_edit(g)
    keys = [h.canonical_smiles for h in neigh]
    assert keys == sorted(keys)
    assert g.canonical_smiles not in keys
    for h in neigh:
        assert abs(h.n_atoms - g.n_atoms) <= 1


def test_kind_toggle():
    only_sub = enumerate_1_edit(parse_smiles("C"), kinds=["substitute_atom"])
    assert {g.canonical_smiles for g in only_sub} == {"N", "O", "F"}
    with pytest.raises(ValueError):
        enumerate_1_edit(parse_smiles("C"), kinds=["teleport"])


class TestKEdit:
    def test_k1_equals_1_edit(self):
        g = parse_smiles("CO")
        assert [h.canonical_smiles for h in enumerate_k_edit(g, 1)] == [
            h.canonical_smiles for h in enumerate_1_edit(g)
        ]

    def test_k2_superset(self):
        g = parse_smiles("C")
        one = {h.canonical_smiles for h in enumerate_1_edit(g)}
        two = {h.canonical_smiles for h in enumerate_k_edit(g, 2)}
        assert one < two
        assert g.canonical_smiles not in two

    def test_cap(self):
        with pytest.raises(CandidateLimitError):
            enumerate_k_edit(parse_smiles("CCO"), 2, cap=50)

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            enumerate_k_edit(parse_smiles("C"), 0)


def _stub(values):
    """Model returning fixed predictions keyed by canonical SMILES."""
    return lambda graphs: np.array([values[g.canonical_smiles] for g in graphs])


class TestRanking:
    def setup_method(self):
        self.g = parse_smiles("C")
        self.cands = [parse_smiles(s) for s in ("CC", "CO", "CF", "N")]
        self.preds = {"C": 0.0, "CC": 3.0, "CO": -1.0, "CF": 2.0, "N": 0.0}

    def test_order_by_divergence(self):
        recs = rank_counterfactuals(_stub(self.preds), self.g, self.cands, top_k=10)
        assert [r.divergence for r in recs] == [3.0, 2.0, 1.0, 0.0]
        assert recs[-1].smiles == "N"

    def test_top_k(self):
        recs = rank_counterfactuals(_stub(self.preds), self.g, self.cands, top_k=2)
        assert [r.smiles for r in recs] == ["CC", "CF"]

    def test_ties_by_smiles(self):
        preds = {"C": 0.0, "CC": 1.0, "CO": -1.0, "CF": 1.0, "N": 1.0}
        recs = rank_counterfactuals(_stub(preds), self.g, self.cands)
        assert [r.smiles for r in recs] == sorted(r.smiles for r in recs)

    def test_directional_modes(self):
        up = rank_counterfactuals(_stub(self.preds), self.g, self.cands, mode="increase")
        down = rank_counterfactuals(_stub(self.preds), self.g, self.cands, mode="decrease")
        assert [r.smiles for r in up] == ["CC", "CF"]
        assert [r.smiles for r in down] == ["CO"]

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            rank_counterfactuals(_stub(self.preds), self.g, [])


def _rec(s2):
    return CounterfactualRecord("C", "CC", 0.0, 1.0, 1.0, sigma2_prime=s2)


class TestFilter:
    def test_threshold_inclusive_and_stable(self):
        recs = [_rec(0.5), _rec(0.1), _rec(0.3)]
        assert [r.sigma2_prime for r in filter_by_uncertainty(recs, 0.3)] == [0.1, 0.3]

    def test_extremes(self):
        recs = [_rec(0.1), _rec(0.5)]
        assert filter_by_uncertainty(recs, float("inf")) == recs
        assert filter_by_uncertainty(recs, 0.05) == []

    def test_missing_uncertainty(self):
        with pytest.raises(ValueError):
            filter_by_uncertainty([CounterfactualRecord("C", "CC", 0.0, 1.0, 1.0)], 1.0)


def test_jsonl_round_trip(tmp_path):
    recs = [
        CounterfactualRecord("C", "CC", 0.1, 1.0, 0.9, y=0.6, sigma2=0.2, sigma2_prime=0.3, y_prime=1.0, truthful=True),
        CounterfactualRecord("C", "N", 0.1, 0.0, 0.1),
    ]
    write_records_jsonl(recs, tmp_path / "cf.jsonl")
    assert read_records_jsonl(tmp_path / "cf.jsonl") == recs
    first = json.loads((tmp_path / "cf.jsonl").read_text().splitlines()[0])
    assert first["schema"] == "cftruth.counterfactual/1"
