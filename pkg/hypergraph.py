"""
Molecular Hypergraphs
Atoms become terminal hyperedges, bonds become degree-2 hypernodes labeled by bond order
"""

import enum
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from canonical import canonical_labeling
from errors import EmptyInput, InvalidHypergraph, NonterminalRemaining
from molgraph import Atom, Bond, BondOrder, Molecule


class SymbolKind(str, enum.Enum):
    TERMINAL = 'terminal'
    NONTERMINAL = 'nonterminal'
    START = 'start'


@dataclass(frozen=True)
class Symbol:
    kind: SymbolKind
    atom: Optional[Atom] = None
    signature: Tuple[str, ...] = ()

    @classmethod
    def terminal(cls, atom: Atom) -> 'Symbol':
        # ring membership is derived from the finished molecule, never carried
        return cls(SymbolKind.TERMINAL, atom=replace(atom, in_ring=False))

    @classmethod
    def nonterminal(cls, signature: Sequence[str]) -> 'Symbol':
        return cls(SymbolKind.NONTERMINAL, signature=tuple(signature))

    @classmethod
    def start(cls) -> 'Symbol':
        return cls(SymbolKind.START)

    @property
    def is_terminal(self) -> bool:
        return self.kind is SymbolKind.TERMINAL

    @property
    def nonterminal_id(self) -> str:
        if self.kind is SymbolKind.START:
            return 'S'
        return 'N[' + ''.join(self.signature) + ']'

    def label(self) -> str:
        if self.kind is SymbolKind.TERMINAL:
            return 't' + self.atom.label()
        if self.kind is SymbolKind.NONTERMINAL:
            return 'n' + ''.join(self.signature)
        return 's'


@dataclass(frozen=True)
class Hyperedge:
    symbol: Symbol
    incidence: Tuple[int, ...]


@dataclass(frozen=True, order=True)
class CanonicalCode:
    data: bytes

    def hex(self) -> str:
        return self.data.hex()


@dataclass(frozen=True)
class Hypergraph:
    hypernodes: Tuple[str, ...]
    hyperedges: Tuple[Hyperedge, ...]

    def __post_init__(self):
        for edge in self.hyperedges:
            if len(set(edge.incidence)) != len(edge.incidence):
                raise InvalidHypergraph('hyperedge lists the same hypernode twice')
            for node in edge.incidence:
                if not 0 <= node < len(self.hypernodes):
                    raise InvalidHypergraph(f'incidence index {node} out of range')
            if edge.symbol.kind is SymbolKind.NONTERMINAL:
                labels = tuple(self.hypernodes[n] for n in edge.incidence)
                if labels != edge.symbol.signature:
                    raise InvalidHypergraph(
                        f'nonterminal signature {edge.symbol.signature} does not match {labels}')
            if edge.symbol.kind is SymbolKind.START and edge.incidence:
                raise InvalidHypergraph('start symbol has arity 0')

    def attachment_counts(self) -> List[int]:
        counts = [0] * len(self.hypernodes)
        for edge in self.hyperedges:
            for node in edge.incidence:
                counts[node] += 1
        return counts

    def check(self, externals: Sequence[int] = ()):
        """
        Enforce the two-hyperedge hypernode invariant
        External hypernodes of a rule body carry one attachment; the host supplies the other
        """
        external_set = set(externals)
        for node, count in enumerate(self.attachment_counts()):
            expected = 1 if node in external_set else 2
            if count != expected:
                raise InvalidHypergraph(
                    f'hypernode {node} has {count} attachments, expected {expected}')

    def nonterminal_indices(self) -> List[int]:
        return [i for i, e in enumerate(self.hyperedges) if not e.symbol.is_terminal]

    @property
    def is_terminal_only(self) -> bool:
        return all(e.symbol.is_terminal for e in self.hyperedges)


def to_hypergraph(m: Molecule) -> Hypergraph:
    """One terminal hyperedge per atom, one hypernode per bond"""
    hypernodes = tuple(bond.order.value for bond in m.bonds)
    incident: List[List[int]] = [[] for _ in m.atoms]
    for index, bond in enumerate(m.bonds):
        incident[bond.begin].append(index)
        incident[bond.end].append(index)
    hyperedges = tuple(
        Hyperedge(Symbol.terminal(atom), tuple(incident[i])) for i, atom in enumerate(m.atoms)
    )
    return Hypergraph(hypernodes, hyperedges)


def to_molecule(h: Hypergraph, name: Optional[str] = None) -> Molecule:
    """Drop the hypernodes of a terminal-only hypergraph and read off the molecule"""
    if not h.hyperedges:
        raise EmptyInput('hypergraph has no hyperedges')
    if not h.is_terminal_only:
        raise NonterminalRemaining(
            f'{len(h.nonterminal_indices())} nonterminal hyperedge(s) remain; derivation incomplete')
    h.check()

    ends: Dict[int, List[int]] = {node: [] for node in range(len(h.hypernodes))}
    for index, edge in enumerate(h.hyperedges):
        for node in edge.incidence:
            ends[node].append(index)

    atoms = [edge.symbol.atom for edge in h.hyperedges]
    bonds = [Bond(ends[node][0], ends[node][1], BondOrder(label))
             for node, label in enumerate(h.hypernodes)]
    return Molecule.build(atoms, bonds, name=name)


def _labeled_graph(h: Hypergraph, externals: Sequence[int]):
    position = {node: k for k, node in enumerate(externals)}
    labels = []
    for node, label in enumerate(h.hypernodes):
        text = 'h' + label
        if node in position:
            text += f'@{position[node]}'
        labels.append(text)
    offset = len(h.hypernodes)
    edges = []
    for index, edge in enumerate(h.hyperedges):
        labels.append('e' + edge.symbol.label())
        ordered = not edge.symbol.is_terminal
        for slot, node in enumerate(edge.incidence):
            edges.append((offset + index, node, slot + 1 if ordered else 0))
    return labels, edges


def canonical_form(h: Hypergraph, externals: Sequence[int] = ()) -> CanonicalCode:
    """Relabeling-invariant code; external hypernodes are distinguished by position"""
    labels, edges = _labeled_graph(h, externals)
    _, code = canonical_labeling(labels, edges)
    return CanonicalCode(code)


def canonicalize(h: Hypergraph, externals: Sequence[int] = ()
                 ) -> Tuple[Hypergraph, Tuple[int, ...], CanonicalCode, List[int]]:
    """
    Reorder h into its canonical layout

    Returns:
        (reordered hypergraph, reordered externals, code,
         new index of every original hyperedge)
    """
    labels, edges = _labeled_graph(h, externals)
    positions, code = canonical_labeling(labels, edges)

    n_nodes = len(h.hypernodes)
    node_order = sorted(range(n_nodes), key=lambda v: positions[v])
    node_map = {old: new for new, old in enumerate(node_order)}
    edge_order = sorted(range(len(h.hyperedges)), key=lambda e: positions[n_nodes + e])
    edge_map = [0] * len(h.hyperedges)
    for new, old in enumerate(edge_order):
        edge_map[old] = new

    hyperedges = []
    for old in edge_order:
        edge = h.hyperedges[old]
        incidence = [node_map[n] for n in edge.incidence]
        if edge.symbol.is_terminal:
            incidence.sort()
        hyperedges.append(Hyperedge(edge.symbol, tuple(incidence)))

    reordered = Hypergraph(tuple(h.hypernodes[old] for old in node_order), tuple(hyperedges))
    return reordered, tuple(node_map[n] for n in externals), CanonicalCode(code), edge_map


def hyperedge_ranks(h: Hypergraph) -> List[int]:
    """Canonical position of every hyperedge (the atom ranks for a molecular hypergraph)"""
    labels, edges = _labeled_graph(h, ())
    positions, _ = canonical_labeling(labels, edges)
    offset = len(h.hypernodes)
    return [positions[offset + e] for e in range(len(h.hyperedges))]
