"""
Molecular Graph Model
Atoms, bonds and molecules; SMILES-subset reader/writer; categorical featurization
"""

import enum
import re
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from canonical import canonical_labeling
from errors import (DataError, DisconnectedInput, InvalidMolecule, SmilesSyntaxError,
                    UnsupportedElement, UnsupportedFeature)
from fileutil import atomic_write_text

# Supported alphabet, ordered by atomic number
ELEMENTS = ['H', 'B', 'C', 'N', 'O', 'F', 'P', 'S', 'Cl', 'Br', 'I']

ATOMIC_NUMBER = {
    'H': 1, 'B': 5, 'C': 6, 'N': 7, 'O': 8, 'F': 9,
    'P': 15, 'S': 16, 'Cl': 17, 'Br': 35, 'I': 53,
}

ATOMIC_MASS = {
    'H': 1.008, 'B': 10.81, 'C': 12.011, 'N': 14.007, 'O': 15.999, 'F': 18.998,
    'P': 30.974, 'S': 32.06, 'Cl': 35.45, 'Br': 79.904, 'I': 126.904,
}

# Lowest valid valence wins when resolving implicit hydrogens
VALENCES = {
    'H': (1,), 'B': (3,), 'C': (4,), 'N': (3,), 'O': (2,), 'F': (1,),
    'P': (3, 5), 'S': (2, 4, 6), 'Cl': (1,), 'Br': (1,), 'I': (1,),
}

ORGANIC_SUBSET = {'B', 'C', 'N', 'O', 'P', 'S', 'F', 'Cl', 'Br', 'I'}
AROMATIC_SUBSET = {'b': 'B', 'c': 'C', 'n': 'N', 'o': 'O', 'p': 'P', 's': 'S'}


class BondOrder(str, enum.Enum):
    SINGLE = '-'
    DOUBLE = '='
    TRIPLE = '#'
    AROMATIC = ':'

    @property
    def valence(self) -> int:
        return {'-': 1, '=': 2, '#': 3, ':': 1}[self.value]

    @property
    def index(self) -> int:
        return ['-', '=', '#', ':'].index(self.value)


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    aromatic: bool = False
    explicit_h_count: int = 0
    in_ring: bool = False

    def label(self) -> str:
        """Attribute label without the derived ring flag"""
        return f'{self.element},{self.formal_charge},{int(self.aromatic)},{self.explicit_h_count}'


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class Molecule:
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]
    name: Optional[str] = None

    @classmethod
    def build(cls, atoms: Sequence[Atom], bonds: Sequence[Bond],
              name: Optional[str] = None) -> 'Molecule':
        """Validate invariants and derive ring membership"""
        atoms = tuple(atoms)
        bonds = tuple(bonds)
        if not atoms:
            raise InvalidMolecule('molecule has no atoms')

        for atom in atoms:
            if atom.element not in ATOMIC_NUMBER:
                raise UnsupportedElement(f'unsupported element: {atom.element}')
            if atom.explicit_h_count < 0:
                raise InvalidMolecule('negative hydrogen count')

        seen = set()
        for bond in bonds:
            if not (0 <= bond.begin < len(atoms) and 0 <= bond.end < len(atoms)):
                raise InvalidMolecule(f'bond endpoint out of range: {bond}')
            if bond.begin == bond.end:
                raise InvalidMolecule(f'self-bond on atom {bond.begin}')
            pair = frozenset((bond.begin, bond.end))
            if pair in seen:
                raise InvalidMolecule(f'duplicate bond between {bond.begin} and {bond.end}')
            seen.add(pair)
            if bond.order is BondOrder.AROMATIC and not (
                    atoms[bond.begin].aromatic and atoms[bond.end].aromatic):
                raise InvalidMolecule('aromatic bond between non-aromatic atoms')

        graph = nx.Graph()
        graph.add_nodes_from(range(len(atoms)))
        graph.add_edges_from((b.begin, b.end) for b in bonds)
        if not nx.is_connected(graph):
            raise DisconnectedInput('molecule is not connected')

        bridges = {frozenset(edge) for edge in nx.bridges(graph)}
        ring_atoms = set()
        for bond in bonds:
            if frozenset((bond.begin, bond.end)) not in bridges:
                ring_atoms.update((bond.begin, bond.end))

        atoms = tuple(replace(atom, in_ring=(i in ring_atoms)) for i, atom in enumerate(atoms))
        return cls(atoms=atoms, bonds=bonds, name=name)

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self, atom: int) -> List[Tuple[int, BondOrder]]:
        return [(b.other(atom), b.order) for b in self.bonds if atom in (b.begin, b.end)]

    def bond_in_ring(self) -> List[bool]:
        graph = self.to_networkx()
        bridges = {frozenset(edge) for edge in nx.bridges(graph)}
        return [frozenset((b.begin, b.end)) not in bridges for b in self.bonds]

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        for i, atom in enumerate(self.atoms):
            graph.add_node(i, label=atom.label())
        for b in self.bonds:
            graph.add_edge(b.begin, b.end, order=b.order.value)
        return graph


@dataclass(frozen=True)
class FeatureVectors:
    atom_features: np.ndarray   # (num_atoms, 9) categorical indices
    bond_features: np.ndarray   # (num_bonds, 3) categorical indices


HYBRIDIZATIONS = ['UNSPECIFIED', 'S', 'SP', 'SP2', 'SP3', 'SP3D', 'SP3D2']

# atomic-number bucket, chirality, degree, formal charge, H count, radicals,
# hybridization, aromatic, in ring
ATOM_FEATURE_CARDINALITIES = [len(ELEMENTS), 4, 11, 11, 9, 5, len(HYBRIDIZATIONS), 2, 2]

# bond order, stereo, conjugated
BOND_FEATURE_CARDINALITIES = [4, 6, 2]


def implicit_h_count(element: str, aromatic: bool, orders: Iterable[BondOrder]) -> int:
    """Hydrogens implied for an organic-subset atom from the valence table"""
    orders = list(orders)
    total = sum(order.valence for order in orders)
    valences = VALENCES[element]
    if aromatic:
        return max(0, valences[0] - (total + 1))
    for valence in valences:
        if valence >= total:
            return valence - total
    return 0


# ---------------------------------------------------------------------------
# SMILES reading
# ---------------------------------------------------------------------------

_BRACKET_RE = re.compile(
    r'^(?P<isotope>\d+)?(?P<element>[A-Z][a-z]?|[a-z])(?P<chiral>@+)?'
    r'(?P<hydrogens>H\d*)?(?P<charge>[+-]+\d*)?(?P<klass>:\d+)?$'
)


def _parse_bracket(content: str) -> Tuple[str, bool, int, int]:
    match = _BRACKET_RE.match(content)
    if not match:
        raise SmilesSyntaxError(f'malformed bracket atom: [{content}]')
    if match.group('isotope'):
        raise UnsupportedFeature(f'isotopes are not supported: [{content}]')
    if match.group('chiral'):
        raise UnsupportedFeature(f'stereo centers are not supported: [{content}]')
    if match.group('klass'):
        raise UnsupportedFeature(f'atom classes are not supported: [{content}]')

    symbol = match.group('element')
    if symbol in AROMATIC_SUBSET:
        element, aromatic = AROMATIC_SUBSET[symbol], True
    elif symbol in ATOMIC_NUMBER:
        element, aromatic = symbol, False
    else:
        raise UnsupportedElement(f'unsupported element: {symbol}')

    hydrogens = match.group('hydrogens')
    h_count = 0
    if hydrogens:
        h_count = int(hydrogens[1:]) if len(hydrogens) > 1 else 1

    charge_text = match.group('charge')
    charge = 0
    if charge_text:
        signs = charge_text.rstrip('0123456789')
        digits = charge_text[len(signs):]
        if len(set(signs)) != 1 or (digits and len(signs) != 1):
            raise SmilesSyntaxError(f'malformed charge: [{content}]')
        magnitude = int(digits) if digits else len(signs)
        charge = magnitude if signs[0] == '+' else -magnitude

    return element, aromatic, charge, h_count


def _tokenize(text: str):
    i = 0
    while i < len(text):
        char = text[i]
        if char == '[':
            end = text.find(']', i)
            if end < 0:
                raise SmilesSyntaxError(f'unclosed bracket at position {i}')
            yield 'bracket', text[i + 1:end]
            i = end + 1
        elif text[i:i + 2] in ('Cl', 'Br'):
            yield 'atom', text[i:i + 2]
            i += 2
        elif char in ORGANIC_SUBSET or char in AROMATIC_SUBSET:
            yield 'atom', char
            i += 1
        elif char in '-=#:':
            yield 'bond', char
            i += 1
        elif char in '/\\':
            raise UnsupportedFeature(f'directional bonds are not supported: {char}')
        elif char == '$':
            raise UnsupportedFeature('quadruple bonds are not supported')
        elif char == '.':
            raise DisconnectedInput('multi-fragment SMILES are not supported')
        elif char == '(':
            yield 'open', char
            i += 1
        elif char == ')':
            yield 'close', char
            i += 1
        elif char.isdigit():
            yield 'ring', int(char)
            i += 1
        elif char == '%':
            digits = text[i + 1:i + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise SmilesSyntaxError(f'malformed ring number at position {i}')
            yield 'ring', int(digits)
            i += 3
        elif char == '*':
            raise UnsupportedElement('wildcard atoms are not supported')
        else:
            raise SmilesSyntaxError(f'unexpected character {char!r} at position {i}')


def parse_smiles(text: str, name: Optional[str] = None) -> Molecule:
    """
    Parse a SMILES-subset string into a Molecule

    Implicit hydrogens of organic-subset atoms are resolved with the valence
    table; bracket atoms carry exactly the hydrogens they list.
    """
    if text is None or not text.strip():
        raise SmilesSyntaxError('empty SMILES')
    text = text.strip()

    # element, aromatic, charge, explicit hydrogens (None => implicit)
    atoms: List[List] = []
    bonds: Dict[frozenset, Tuple[int, int, BondOrder, bool]] = {}
    anchor: Optional[int] = None
    pending: Optional[BondOrder] = None
    branches: List[Optional[int]] = []
    rings: Dict[int, Tuple[int, Optional[BondOrder]]] = {}

    def add_bond(a: int, b: int, order: Optional[BondOrder]):
        key = frozenset((a, b))
        if a == b:
            raise SmilesSyntaxError(f'atom {a} bonded to itself')
        if key in bonds:
            raise SmilesSyntaxError(f'duplicate bond between atoms {a} and {b}')
        implicit = order is None
        if implicit:
            both_aromatic = atoms[a][1] and atoms[b][1]
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        bonds[key] = (a, b, order, implicit)

    last_kind = None
    for kind, value in _tokenize(text):
        if kind in ('atom', 'bracket'):
            if kind == 'atom':
                if value in AROMATIC_SUBSET:
                    atoms.append([AROMATIC_SUBSET[value], True, 0, None])
                else:
                    atoms.append([value, False, 0, None])
            else:
                element, aromatic, charge, h_count = _parse_bracket(value)
                atoms.append([element, aromatic, charge, h_count])
            index = len(atoms) - 1
            if anchor is not None:
                add_bond(anchor, index, pending)
            elif last_kind == 'open' or pending is not None:
                raise SmilesSyntaxError('bond or branch without a preceding atom')
            pending = None
            anchor = index
        elif kind == 'bond':
            if anchor is None or pending is not None:
                raise SmilesSyntaxError(f'misplaced bond symbol {value!r}')
            pending = BondOrder(value)
        elif kind == 'open':
            if anchor is None or pending is not None:
                raise SmilesSyntaxError('branch without a preceding atom')
            branches.append(anchor)
        elif kind == 'close':
            if not branches or last_kind == 'open' or pending is not None:
                raise SmilesSyntaxError('unbalanced or empty branch')
            anchor = branches.pop()
        elif kind == 'ring':
            if anchor is None:
                raise SmilesSyntaxError('ring closure before any atom')
            if value in rings:
                partner, opened_order = rings.pop(value)
                if pending is not None and opened_order is not None and pending != opened_order:
                    raise SmilesSyntaxError(f'conflicting bond orders on ring closure {value}')
                add_bond(partner, anchor, pending if pending is not None else opened_order)
            else:
                rings[value] = (anchor, pending)
            pending = None
        last_kind = kind

    if branches:
        raise SmilesSyntaxError('unclosed branch')
    if rings:
        raise SmilesSyntaxError(f'unclosed ring closures: {sorted(rings)}')
    if pending is not None:
        raise SmilesSyntaxError('dangling bond at end of SMILES')

    graph = nx.Graph()
    graph.add_nodes_from(range(len(atoms)))
    graph.add_edges_from(tuple(k) for k in bonds)
    if not nx.is_connected(graph):
        raise DisconnectedInput('SMILES describes more than one fragment')
    bridges = {frozenset(edge) for edge in nx.bridges(graph)}

    bond_list = []
    for key, (a, b, order, implicit) in bonds.items():
        # an unmarked bond between aromatic atoms outside any ring is a single bond
        if implicit and order is BondOrder.AROMATIC and key in bridges:
            order = BondOrder.SINGLE
        bond_list.append(Bond(a, b, order))

    ring_atoms = {atom for key in bonds if key not in bridges for atom in key}
    atom_list = []
    for i, (element, aromatic, charge, h_count) in enumerate(atoms):
        if aromatic and i not in ring_atoms:
            raise SmilesSyntaxError(f'aromatic atom {i} is not in a ring')
        if h_count is None:
            orders = [b.order for b in bond_list if i in (b.begin, b.end)]
            h_count = implicit_h_count(element, aromatic, orders)
        atom_list.append(Atom(element, charge, aromatic, h_count))

    return Molecule.build(atom_list, bond_list, name=name)


# ---------------------------------------------------------------------------
# Canonical ranks and SMILES writing
# ---------------------------------------------------------------------------

def canonical_ranks(m: Molecule) -> List[int]:
    """Canonical position of every atom (automorphic atoms are interchangeable)"""
    labels = [atom.label() for atom in m.atoms]
    edges = [(b.begin, b.end, b.order.index) for b in m.bonds]
    ranks, _ = canonical_labeling(labels, edges)
    return ranks


def _atom_token(m: Molecule, index: int) -> str:
    atom = m.atoms[index]
    orders = [order for _, order in m.neighbors(index)]
    symbol = atom.element.lower() if atom.aromatic else atom.element
    organic = (
        atom.formal_charge == 0
        and atom.element in ORGANIC_SUBSET
        and atom.explicit_h_count == implicit_h_count(atom.element, atom.aromatic, orders)
    )
    if organic:
        return symbol

    text = '[' + symbol
    if atom.explicit_h_count:
        text += 'H' + (str(atom.explicit_h_count) if atom.explicit_h_count > 1 else '')
    if atom.formal_charge:
        sign = '+' if atom.formal_charge > 0 else '-'
        magnitude = abs(atom.formal_charge)
        text += sign + (str(magnitude) if magnitude > 1 else '')
    return text + ']'


def _bond_token(m: Molecule, order: BondOrder, a: int, b: int, in_ring: bool) -> str:
    both_aromatic = m.atoms[a].aromatic and m.atoms[b].aromatic
    if order is BondOrder.SINGLE:
        return '-' if both_aromatic else ''
    if order is BondOrder.AROMATIC:
        return '' if in_ring else ':'
    return order.value


def _ring_label(digit: int) -> str:
    return str(digit) if digit < 10 else f'%{digit:02d}'


def write_smiles(m: Molecule) -> str:
    """Deterministic SMILES for m: DFS from the lowest canonical rank, neighbors in rank order"""
    ranks = canonical_ranks(m)
    ring_flags = m.bond_in_ring()
    bond_info = {}
    adjacency: List[List[int]] = [[] for _ in m.atoms]
    for bond, in_ring in zip(m.bonds, ring_flags):
        bond_info[frozenset((bond.begin, bond.end))] = (bond.order, in_ring)
        adjacency[bond.begin].append(bond.end)
        adjacency[bond.end].append(bond.begin)
    for neighbors in adjacency:
        neighbors.sort(key=lambda v: ranks[v])

    root = min(range(m.num_atoms), key=lambda v: ranks[v])

    # first pass: spanning tree and ring-closure pairs (ancestor, descendant)
    visited = [False] * m.num_atoms
    children: List[List[int]] = [[] for _ in m.atoms]
    opens: List[List[int]] = [[] for _ in m.atoms]
    closes: List[List[int]] = [[] for _ in m.atoms]
    closure_keys = set()

    def explore(u: int, parent: Optional[int]):
        visited[u] = True
        for v in adjacency[u]:
            if v == parent:
                continue
            key = frozenset((u, v))
            if visited[v]:
                if key not in closure_keys:
                    closure_keys.add(key)
                    opens[v].append(u)
                    closes[u].append(v)
            else:
                children[u].append(v)
                explore(v, u)

    explore(root, None)

    # second pass: emit
    free_digits = list(range(1, 100))
    open_digit: Dict[frozenset, int] = {}
    parts: List[str] = []

    def emit(u: int):
        parts.append(_atom_token(m, u))
        released = []
        for v in closes[u]:
            key = frozenset((u, v))
            digit = open_digit.pop(key)
            parts.append(_ring_label(digit))
            released.append(digit)
        for v in sorted(opens[u], key=lambda w: ranks[w]):
            key = frozenset((u, v))
            order, in_ring = bond_info[key]
            digit = free_digits.pop(0)
            open_digit[key] = digit
            parts.append(_bond_token(m, order, u, v, in_ring) + _ring_label(digit))
        free_digits.extend(released)
        free_digits.sort()

        for position, v in enumerate(children[u]):
            order, in_ring = bond_info[frozenset((u, v))]
            branch = position < len(children[u]) - 1
            if branch:
                parts.append('(')
            parts.append(_bond_token(m, order, u, v, in_ring))
            emit(v)
            if branch:
                parts.append(')')

    emit(root)
    return ''.join(parts)


# ---------------------------------------------------------------------------
# Featurization
# ---------------------------------------------------------------------------

def _hybridization(m: Molecule, index: int) -> str:
    atom = m.atoms[index]
    if atom.element == 'H':
        return 'S'
    if atom.aromatic:
        return 'SP2'
    orders = [order for _, order in m.neighbors(index)]
    triples = sum(1 for o in orders if o is BondOrder.TRIPLE)
    doubles = sum(1 for o in orders if o is BondOrder.DOUBLE)
    if triples or doubles >= 2:
        return 'SP'
    if doubles == 1:
        return 'SP2'
    return 'SP3'


def _conjugated(m: Molecule) -> List[bool]:
    unsaturated = [False] * m.num_atoms
    for bond in m.bonds:
        if bond.order is not BondOrder.SINGLE:
            unsaturated[bond.begin] = unsaturated[bond.end] = True

    flags = []
    for i, bond in enumerate(m.bonds):
        if bond.order is BondOrder.AROMATIC:
            flags.append(True)
            continue

        def other_unsaturated(atom: int) -> bool:
            return any(
                other.order is not BondOrder.SINGLE
                for j, other in enumerate(m.bonds)
                if j != i and atom in (other.begin, other.end)
            )

        if bond.order is BondOrder.SINGLE:
            flags.append(other_unsaturated(bond.begin) and other_unsaturated(bond.end))
        else:
            flags.append(other_unsaturated(bond.begin) or other_unsaturated(bond.end))
    return flags


def featurize(m: Molecule) -> FeatureVectors:
    """9 categorical indices per atom and 3 per bond; stereo slots are always 0"""
    atom_rows = []
    for i, atom in enumerate(m.atoms):
        if atom.element not in ELEMENTS:
            raise UnsupportedElement(f'unsupported element: {atom.element}')
        degree = len(m.neighbors(i))
        atom_rows.append([
            ELEMENTS.index(atom.element),
            0,
            min(degree, 10),
            min(max(atom.formal_charge, -5), 5) + 5,
            min(atom.explicit_h_count, 8),
            0,
            HYBRIDIZATIONS.index(_hybridization(m, i)),
            int(atom.aromatic),
            int(atom.in_ring),
        ])

    conjugated = _conjugated(m)
    bond_rows = [[bond.order.index, 0, int(conjugated[i])] for i, bond in enumerate(m.bonds)]

    return FeatureVectors(
        atom_features=np.array(atom_rows, dtype=np.int64).reshape(-1, 9),
        bond_features=np.array(bond_rows, dtype=np.int64).reshape(-1, 3),
    )


# ---------------------------------------------------------------------------
# Helpers: relabeling, computed properties, corpus files
# ---------------------------------------------------------------------------

def permute_atoms(m: Molecule, permutation: Sequence[int]) -> Molecule:
    """Relabel atoms: atom i of m becomes atom permutation[i]"""
    if sorted(permutation) != list(range(m.num_atoms)):
        raise InvalidMolecule('permutation does not cover every atom exactly once')
    atoms: List[Optional[Atom]] = [None] * m.num_atoms
    for old, new in enumerate(permutation):
        atoms[new] = m.atoms[old]
    bonds = [Bond(permutation[b.begin], permutation[b.end], b.order) for b in m.bonds]
    return Molecule.build(atoms, bonds, name=m.name)


def molecular_weight(m: Molecule) -> float:
    heavy = sum(ATOMIC_MASS[a.element] for a in m.atoms)
    hydrogens = sum(a.explicit_h_count for a in m.atoms) * ATOMIC_MASS['H']
    return heavy + hydrogens


def ring_count(m: Molecule) -> int:
    """Cyclomatic number of the (connected) molecular graph"""
    return len(m.bonds) - m.num_atoms + 1


def read_corpus(path: str) -> List[Tuple[Molecule, Optional[float]]]:
    """
    Read a `SMILES<TAB>value` file (value optional, blank lines ignored)
    Errors carry the 1-based line number of the offending record
    """
    records = []
    with open(path, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip('\n').rstrip('\r')
            if not line.strip():
                continue
            fields = line.split('\t')
            try:
                molecule = parse_smiles(fields[0], name=f'{path}:{lineno}')
                value = float(fields[1]) if len(fields) > 1 and fields[1].strip() else None
            except ValueError as e:
                raise SmilesSyntaxError(f'line {lineno}: bad property value ({e})') from e
            except DataError as e:
                raise type(e)(f'line {lineno}: {e}') from e
            records.append((molecule, value))
    return records


def write_corpus(path: str, molecules: Sequence[Molecule],
                 values: Optional[Sequence[Optional[float]]] = None):
    lines = []
    for i, molecule in enumerate(molecules):
        line = write_smiles(molecule)
        if values is not None and values[i] is not None:
            line += f'\t{float(values[i])!r}'
        lines.append(line + '\n')
    atomic_write_text(path, ''.join(lines))
