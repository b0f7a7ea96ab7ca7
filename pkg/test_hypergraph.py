"""
Test molecule <-> hypergraph conversion and canonical codes
"""

import networkx as nx
import numpy as np
import pytest

from errors import EmptyInput, InvalidHypergraph, NonterminalRemaining
from hypergraph import (Hyperedge, Hypergraph, Symbol, canonical_form, canonicalize,
                        to_hypergraph, to_molecule)
from molgraph import Atom, parse_smiles, permute_atoms, write_smiles


count_cases = [
    ('CC', 2, 1),
    ('C', 1, 0),
    ('c1ccccc1', 6, 6),
]


@pytest.mark.parametrize('smiles,edges,nodes', count_cases)
def test_to_hypergraph_counts(smiles, edges, nodes):
    h = to_hypergraph(parse_smiles(smiles))
    assert len(h.hyperedges) == edges
    assert len(h.hypernodes) == nodes
    assert h.is_terminal_only
    h.check()


def test_benzene_atoms_touch_two_hypernodes():
    h = to_hypergraph(parse_smiles('c1ccccc1'))
    assert all(len(e.incidence) == 2 for e in h.hyperedges)
    assert set(h.hypernodes) == {':'}


def test_every_hypernode_has_two_attachments(corpus):
    for m in corpus:
        h = to_hypergraph(m)
        assert all(count == 2 for count in h.attachment_counts())


def test_to_molecule_inverts_to_hypergraph(corpus):
    for m in corpus:
        back = to_molecule(to_hypergraph(m))
        assert canonical_form(to_hypergraph(back)) == canonical_form(to_hypergraph(m))
        assert nx.is_isomorphic(
            back.to_networkx(), m.to_networkx(),
            node_match=lambda a, b: a['label'] == b['label'],
            edge_match=lambda a, b: a['order'] == b['order'])


def test_to_molecule_rejects_nonterminals():
    h = Hypergraph(('-',), (
        Hyperedge(Symbol.terminal(Atom('C', explicit_h_count=3)), (0,)),
        Hyperedge(Symbol.nonterminal(['-']), (0,)),
    ))
    with pytest.raises(NonterminalRemaining):
        to_molecule(h)


def test_to_molecule_rejects_empty():
    with pytest.raises(EmptyInput):
        to_molecule(Hypergraph((), ()))


def test_hypergraph_rejects_bad_incidence():
    atom = Symbol.terminal(Atom('C'))
    with pytest.raises(InvalidHypergraph):
        Hypergraph(('-',), (Hyperedge(atom, (0, 0)),))
    with pytest.raises(InvalidHypergraph):
        Hypergraph(('-',), (Hyperedge(atom, (1,)),))
    with pytest.raises(InvalidHypergraph):
        Hypergraph(('-',), (Hyperedge(Symbol.nonterminal(['=']), (0,)),))


def test_check_counts_externals_once():
    h = Hypergraph(('-', '-'), (Hyperedge(Symbol.terminal(Atom('O')), (0, 1)),))
    h.check(externals=(0, 1))
    with pytest.raises(InvalidHypergraph):
        h.check()


def test_canonical_form_ignores_atom_order():
    assert canonical_form(to_hypergraph(parse_smiles('CCO'))) == \
        canonical_form(to_hypergraph(parse_smiles('OCC')))


def test_canonical_form_separates_propane_and_cyclopropane():
    assert canonical_form(to_hypergraph(parse_smiles('CCC'))) != \
        canonical_form(to_hypergraph(parse_smiles('C1CC1')))


def test_canonical_form_is_stable_bytes():
    code = canonical_form(to_hypergraph(parse_smiles('CC=O')))
    assert code == canonical_form(to_hypergraph(parse_smiles('O=CC')))
    assert code.hex() == canonical_form(to_hypergraph(parse_smiles('CC=O'))).hex()


def test_canonical_codes_separate_corpus_molecules(corpus):
    codes = {canonical_form(to_hypergraph(m)) for m in corpus}
    assert len(codes) == len({write_smiles(m) for m in corpus})
    assert len(codes) > 0.95 * len(corpus)


def test_canonical_form_permutation_invariant(corpus):
    rng = np.random.default_rng(3)
    for m in corpus[::8]:
        code = canonical_form(to_hypergraph(m))
        for _ in range(3):
            relabeled = permute_atoms(m, rng.permutation(m.num_atoms).tolist())
            assert canonical_form(to_hypergraph(relabeled)) == code


def test_canonicalize_keeps_code_and_externals():
    h = Hypergraph(('-', '='), (
        Hyperedge(Symbol.terminal(Atom('C', explicit_h_count=1)), (0, 1)),
    ))
    reordered, externals, code, edge_map = canonicalize(h, (1, 0))
    assert code == canonical_form(h, (1, 0))
    assert canonical_form(reordered, externals) == code
    assert [reordered.hypernodes[n] for n in externals] == ['=', '-']
    assert edge_map == [0]
