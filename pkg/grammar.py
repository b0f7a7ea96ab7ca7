"""
Molecular Hypergraph Grammar
Rule extraction from a molecule corpus, leftmost derivation, parsing and decode masks
"""

import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from errors import (EmptyCorpus, EmptyFrontier, GrammarFormatError, InvalidHypergraph,
                    IncompleteDerivation, NoMatch, ParseError)
from fileutil import atomic_write_text
from hypergraph import (CanonicalCode, Hyperedge, Hypergraph, Symbol, SymbolKind,
                        canonical_form, canonicalize, hyperedge_ranks, to_hypergraph,
                        to_molecule)
from molgraph import Atom, Molecule

FORMAT_VERSION = 1

LhsKey = Tuple[str, Tuple[str, ...]]


def lhs_key(symbol: Symbol) -> LhsKey:
    return symbol.kind.value, symbol.signature


# ---------------------------------------------------------------------------
# Tree decomposition
# ---------------------------------------------------------------------------

@dataclass
class Bag:
    index: int
    atoms: Tuple[int, ...]
    hypernodes: FrozenSet[int]
    owned_atoms: Tuple[int, ...]
    parent: Optional[int] = None
    articulation: Optional[int] = None
    children: List[int] = field(default_factory=list)


@dataclass
class DecompositionTree:
    bags: List[Bag]
    root: int
    atom_ranks: List[int]

    def preorder(self) -> List[int]:
        order, stack = [], [self.root]
        while stack:
            index = stack.pop()
            order.append(index)
            stack.extend(reversed(self.bags[index].children))
        return order


def _bond_ends(h: Hypergraph) -> List[Tuple[int, int]]:
    ends: List[List[int]] = [[] for _ in h.hypernodes]
    for index, edge in enumerate(h.hyperedges):
        for node in edge.incidence:
            ends[node].append(index)
    return [(a, b) for a, b in ends]


def tree_decompose(h: Hypergraph) -> DecompositionTree:
    """
    Junction tree over biconnected components: every ring system and every
    bridge bond is a bag; the root bag holds the lowest-ranked atom
    """
    ranks = hyperedge_ranks(h)
    n_atoms = len(h.hyperedges)
    ends = _bond_ends(h)

    if not ends:
        bag = Bag(0, (0,), frozenset(), (0,))
        return DecompositionTree([bag], 0, ranks)

    graph = nx.Graph()
    graph.add_nodes_from(range(n_atoms))
    graph.add_edges_from(ends)

    blocks = []
    for component in nx.biconnected_component_edges(graph):
        atoms = sorted({atom for edge in component for atom in edge}, key=lambda a: ranks[a])
        blocks.append(tuple(atoms))
    blocks.sort(key=lambda atoms: sorted(ranks[a] for a in atoms))

    incident: List[List[int]] = [[] for _ in range(n_atoms)]
    for node, (a, b) in enumerate(ends):
        incident[a].append(node)
        incident[b].append(node)

    atom_blocks: Dict[int, List[int]] = {a: [] for a in range(n_atoms)}
    for index, atoms in enumerate(blocks):
        for atom in atoms:
            atom_blocks[atom].append(index)

    def hypernodes_of(atoms: Iterable[int]) -> FrozenSet[int]:
        return frozenset(node for atom in atoms for node in incident[atom])

    lowest = min(range(n_atoms), key=lambda a: ranks[a])
    root_block = atom_blocks[lowest][0]

    bags: List[Bag] = []
    block_to_bag: Dict[int, int] = {}

    def make_bag(block: int, parent: Optional[int], articulation: Optional[int]) -> int:
        atoms = blocks[block]
        owned = tuple(a for a in atoms if a != articulation)
        bag = Bag(len(bags), atoms, hypernodes_of(atoms), owned, parent, articulation)
        bags.append(bag)
        block_to_bag[block] = bag.index
        return bag.index

    def expand(bag_index: int):
        bag = bags[bag_index]
        for atom in bag.owned_atoms:
            for block in atom_blocks[atom]:
                if block not in block_to_bag:
                    bag.children.append(make_bag(block, bag_index, atom))
        for child in list(bag.children):
            expand(child)

    root = make_bag(root_block, None, None)
    expand(root)
    return DecompositionTree(bags, root, ranks)


# ---------------------------------------------------------------------------
# Rules, sequences, grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProductionRule:
    id: int
    lhs: Symbol
    rhs: Hypergraph
    externals: Tuple[int, ...]

    def __post_init__(self):
        if self.lhs.kind is SymbolKind.TERMINAL:
            raise GrammarFormatError('rule left-hand side must be start or nonterminal')
        labels = tuple(self.rhs.hypernodes[n] for n in self.externals)
        if labels != self.lhs.signature:
            raise GrammarFormatError(
                f'rule {self.id}: externals {labels} do not match lhs signature {self.lhs.signature}')
        try:
            self.rhs.check(self.externals)
        except InvalidHypergraph as e:
            raise GrammarFormatError(f'rule {self.id}: {e}') from e

    @property
    def code(self) -> CanonicalCode:
        return canonical_form(self.rhs, self.externals)

    def child_symbols(self) -> List[Symbol]:
        return [e.symbol for e in self.rhs.hyperedges if not e.symbol.is_terminal]

    @property
    def introduces_nonterminals(self) -> bool:
        return bool(self.child_symbols())


@dataclass(frozen=True)
class RuleSequence:
    rule_ids: Tuple[int, ...]

    @classmethod
    def checked(cls, rule_ids: Sequence[int], grammar: 'Grammar') -> 'RuleSequence':
        """Build a sequence, replaying it from the start symbol (NoMatch on failure)"""
        state = DerivationState.initial()
        for rule_id in rule_ids:
            state = apply_rule(state, grammar.rule(rule_id))
        return cls(tuple(rule_ids))

    def __len__(self) -> int:
        return len(self.rule_ids)

    def __iter__(self):
        return iter(self.rule_ids)


@dataclass(frozen=True)
class DerivationState:
    current: Hypergraph
    frontier: Tuple[int, ...]   # stack of nonterminal hyperedge indices, top last
    step_count: int = 0

    @classmethod
    def initial(cls) -> 'DerivationState':
        start = Hypergraph((), (Hyperedge(Symbol.start(), ()),))
        return cls(start, (0,), 0)

    @property
    def leftmost(self) -> Optional[Hyperedge]:
        if not self.frontier:
            return None
        return self.current.hyperedges[self.frontier[-1]]

    @property
    def is_complete(self) -> bool:
        return not self.frontier


def apply_rule(s: DerivationState, r: ProductionRule) -> DerivationState:
    """Replace the leftmost nonterminal with r's right-hand side, gluing externals in order"""
    if not s.frontier:
        raise EmptyFrontier('no nonterminal left to rewrite')
    top = s.frontier[-1]
    target = s.current.hyperedges[top]
    if lhs_key(target.symbol) != lhs_key(r.lhs):
        raise NoMatch(f'rule {r.id} expects {r.lhs.nonterminal_id}, '
                      f'frontier holds {target.symbol.nonterminal_id}')

    hypernodes = list(s.current.hypernodes)
    node_map: Dict[int, int] = {ext: target.incidence[k] for k, ext in enumerate(r.externals)}
    for local, label in enumerate(r.rhs.hypernodes):
        if local not in node_map:
            node_map[local] = len(hypernodes)
            hypernodes.append(label)

    kept = [e for i, e in enumerate(s.current.hyperedges) if i != top]
    frontier = [i if i < top else i - 1 for i in s.frontier[:-1]]

    base = len(kept)
    added = [Hyperedge(e.symbol, tuple(node_map[n] for n in e.incidence)) for e in r.rhs.hyperedges]
    new_nonterminals = [base + j for j, e in enumerate(added) if not e.symbol.is_terminal]
    frontier.extend(reversed(new_nonterminals))

    current = Hypergraph(tuple(hypernodes), tuple(kept + added))
    return DerivationState(current, tuple(frontier), s.step_count + 1)


class Grammar:
    def __init__(self, rules: Sequence[ProductionRule]):
        self.rules: List[ProductionRule] = list(rules)
        for index, rule in enumerate(self.rules):
            if rule.id != index:
                raise GrammarFormatError(f'rule at position {index} has id {rule.id}')

        self.start_rule_ids = [r.id for r in self.rules if r.lhs.kind is SymbolKind.START]
        self.rules_by_lhs: Dict[LhsKey, List[int]] = {}
        for rule in self.rules:
            self.rules_by_lhs.setdefault(lhs_key(rule.lhs), []).append(rule.id)

        self.dedup_index: Dict[Tuple[LhsKey, CanonicalCode], int] = {}
        for rule in self.rules:
            key = (lhs_key(rule.lhs), rule.code)
            if key in self.dedup_index:
                raise GrammarFormatError(f'rules {self.dedup_index[key]} and {rule.id} are duplicates')
            self.dedup_index[key] = rule.id

        for rule in self.rules:
            for symbol in rule.child_symbols():
                if lhs_key(symbol) not in self.rules_by_lhs:
                    raise GrammarFormatError(
                        f'rule {rule.id} introduces {symbol.nonterminal_id}, which no rule rewrites')

        self.label_alphabet = sorted({label for r in self.rules for label in r.rhs.hypernodes})
        self._lhs_masks = {}
        for key, ids in self.rules_by_lhs.items():
            mask = np.zeros(len(self.rules), dtype=bool)
            mask[ids] = True
            self._lhs_masks[key] = mask
        self.min_completion_cost = self._completion_costs()
        self.rule_cost = np.array([
            1 + sum(self.min_completion_cost[lhs_key(s)] for s in r.child_symbols())
            for r in self.rules
        ], dtype=float)

    def __len__(self) -> int:
        return len(self.rules)

    def rule(self, rule_id: int) -> ProductionRule:
        """Look up a rule by id; ids outside 0..len-1 raise ParseError"""
        if not 0 <= rule_id < len(self.rules):
            raise ParseError(f'rule id {rule_id} outside 0..{len(self.rules) - 1}')
        return self.rules[rule_id]


    def _completion_costs(self) -> Dict[LhsKey, float]:
        """Fewest rule applications that turn each nonterminal into terminals"""
        cost = {key: float('inf') for key in self.rules_by_lhs}
        changed = True
        while changed:
            changed = False
            for rule in self.rules:
                total = 1 + sum(cost[lhs_key(s)] for s in rule.child_symbols())
                key = lhs_key(rule.lhs)
                if total < cost[key]:
                    cost[key] = total
                    changed = True
        return cost

    def applicable_rules(self, s: DerivationState) -> np.ndarray:
        target = s.leftmost
        if target is None:
            return np.zeros(len(self.rules), dtype=bool)
        mask = self._lhs_masks.get(lhs_key(target.symbol))
        if mask is None:
            return np.zeros(len(self.rules), dtype=bool)
        return mask.copy()

    def budget_mask(self, s: DerivationState, remaining: int) -> np.ndarray:
        """
        Applicable rules that still leave a terminal completion within `remaining` steps
        With remaining equal to the frontier size this admits only rules without new nonterminals
        """
        mask = self.applicable_rules(s)
        if not s.frontier:
            return mask
        pending = sum(self.min_completion_cost[lhs_key(s.current.hyperedges[i].symbol)]
                      for i in s.frontier[:-1])
        return mask & (self.rule_cost + pending <= remaining)

    def parse(self, m: Molecule) -> RuleSequence:
        """Rule sequence of m under this (frozen) grammar"""
        drafts, order = _molecule_rules(m)
        ids = []
        for position in order:
            key = drafts[position][0]
            if key not in self.dedup_index:
                raise ParseError(f'no rule in the grammar covers a fragment of {m.name or "molecule"}')
            ids.append(self.dedup_index[key])
        return RuleSequence(tuple(ids))

    # -- serialization -----------------------------------------------------

    def to_text(self) -> str:
        payload = {
            'format_version': FORMAT_VERSION,
            'label_alphabet': self.label_alphabet,
            'rules': [_rule_to_json(r) for r in self.rules],
            'start_rule_ids': self.start_rule_ids,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + '\n'

    @classmethod
    def from_text(cls, text: str) -> 'Grammar':
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as e:
            raise GrammarFormatError(f'grammar file is not valid JSON: {e}') from e
        if payload.get('format_version') != FORMAT_VERSION:
            raise GrammarFormatError(f'unsupported grammar format: {payload.get("format_version")}')
        try:
            rules = [_rule_from_json(item) for item in payload['rules']]
        except (KeyError, TypeError, ValueError) as e:
            raise GrammarFormatError(f'malformed rule entry: {e}') from e
        grammar = cls(rules)
        if grammar.start_rule_ids != list(payload.get('start_rule_ids', [])):
            raise GrammarFormatError('start_rule_ids do not match the rules')
        return grammar

    def fingerprint(self) -> str:
        """sha256 of the serialized grammar; equals grammar_hash of the saved file"""
        return hashlib.sha256(self.to_text().encode('utf-8')).hexdigest()


def _atom_to_json(atom: Atom) -> Dict:
    return {
        'element': atom.element,
        'formal_charge': atom.formal_charge,
        'aromatic': atom.aromatic,
        'explicit_h_count': atom.explicit_h_count,
    }


def _symbol_to_json(symbol: Symbol) -> Dict:
    if symbol.kind is SymbolKind.TERMINAL:
        return {'kind': 'terminal', 'atom': _atom_to_json(symbol.atom)}
    return {'kind': symbol.kind.value, 'signature': list(symbol.signature)}


def _symbol_from_json(item: Dict) -> Symbol:
    kind = SymbolKind(item['kind'])
    if kind is SymbolKind.TERMINAL:
        a = item['atom']
        return Symbol.terminal(Atom(a['element'], int(a['formal_charge']), bool(a['aromatic']),
                                    int(a['explicit_h_count'])))
    if kind is SymbolKind.START:
        return Symbol.start()
    return Symbol.nonterminal(item['signature'])


def _rule_to_json(rule: ProductionRule) -> Dict:
    return {
        'id': rule.id,
        'lhs': {'kind': rule.lhs.kind.value, 'signature': list(rule.lhs.signature)},
        'rhs': {
            'hypernodes': list(rule.rhs.hypernodes),
            'hyperedges': [{'symbol': _symbol_to_json(e.symbol), 'incidence': list(e.incidence)}
                           for e in rule.rhs.hyperedges],
            'externals': list(rule.externals),
        },
    }


def _rule_from_json(item: Dict) -> ProductionRule:
    lhs = _symbol_from_json(item['lhs'])
    rhs = item['rhs']
    hyperedges = tuple(Hyperedge(_symbol_from_json(e['symbol']), tuple(e['incidence']))
                       for e in rhs['hyperedges'])
    hypergraph = Hypergraph(tuple(rhs['hypernodes']), hyperedges)
    return ProductionRule(int(item['id']), lhs, hypergraph, tuple(rhs['externals']))


def save_grammar(grammar: Grammar, path: str):
    atomic_write_text(path, grammar.to_text())


def load_grammar(path: str) -> Grammar:
    with open(path, 'r', encoding='utf-8') as f:
        return Grammar.from_text(f.read())


def grammar_hash(path: str) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

RuleDraft = Tuple[Tuple[LhsKey, CanonicalCode], Symbol, Hypergraph, Tuple[int, ...]]


def _molecule_rules(m: Molecule) -> Tuple[List[RuleDraft], List[int]]:
    """
    One canonical rule per bag of m's decomposition, plus the leftmost
    derivation order of those rules (indices into the draft list)
    """
    h = to_hypergraph(m)
    tree = tree_decompose(h)
    ends = _bond_ends(h)
    ranks = tree.atom_ranks

    subtree: Dict[int, set] = {}
    for index in reversed(tree.preorder()):
        bag = tree.bags[index]
        atoms = set(bag.owned_atoms)
        for child in bag.children:
            atoms |= subtree[child]
        subtree[index] = atoms

    def crossing(index: int) -> List[int]:
        inside = subtree[index]
        nodes = [n for n, (a, b) in enumerate(ends) if (a in inside) != (b in inside)]
        inner = {n: (ends[n][0] if ends[n][0] in inside else ends[n][1]) for n in nodes}
        return sorted(nodes, key=lambda n: ranks[inner[n]])

    drafts: List[RuleDraft] = []
    child_order: Dict[int, List[int]] = {}
    draft_of: Dict[int, int] = {}

    for index in tree.preorder():
        bag = tree.bags[index]
        externals = crossing(index) if bag.parent is not None else []
        inside = subtree[index]
        child_sets = [subtree[c] for c in bag.children]
        internal = [
            n for n, (a, b) in enumerate(ends)
            if a in inside and b in inside and not any(a in s and b in s for s in child_sets)
        ]
        local = {node: k for k, node in enumerate(externals + internal)}
        labels = tuple(h.hypernodes[n] for n in externals + internal)

        hyperedges = []
        for atom in bag.owned_atoms:
            incidence = tuple(sorted(local[n] for n in h.hyperedges[atom].incidence))
            hyperedges.append(Hyperedge(h.hyperedges[atom].symbol, incidence))
        nonterminal_slot = {}
        for child in bag.children:
            child_nodes = crossing(child)
            nonterminal_slot[child] = len(hyperedges)
            hyperedges.append(Hyperedge(
                Symbol.nonterminal([h.hypernodes[n] for n in child_nodes]),
                tuple(local[n] for n in child_nodes),
            ))

        rhs = Hypergraph(labels, tuple(hyperedges))
        ext_local = tuple(range(len(externals)))
        rhs, ext_local, code, edge_map = canonicalize(rhs, ext_local)
        lhs = Symbol.nonterminal([h.hypernodes[n] for n in externals]) \
            if bag.parent is not None else Symbol.start()

        draft_of[index] = len(drafts)
        drafts.append(((lhs_key(lhs), code), lhs, rhs, ext_local))
        child_order[index] = sorted(bag.children, key=lambda c: edge_map[nonterminal_slot[c]])

    order: List[int] = []

    def visit(index: int):
        order.append(draft_of[index])
        for child in child_order[index]:
            visit(child)

    visit(tree.root)
    return drafts, order


def extract_grammar(corpus: Sequence[Molecule]) -> Tuple[Grammar, List[RuleSequence]]:
    """
    Induce a grammar from a corpus

    Returns the grammar and, aligned with the corpus, each molecule's rule sequence.
    Rule ids follow canonical-code order, so the result does not depend on corpus order.
    """
    if not corpus:
        raise EmptyCorpus('cannot extract a grammar from an empty corpus')

    unique: Dict[Tuple[LhsKey, CanonicalCode], RuleDraft] = {}
    per_molecule: List[List[Tuple[LhsKey, CanonicalCode]]] = []
    for molecule in corpus:
        drafts, order = _molecule_rules(molecule)
        for draft in drafts:
            unique.setdefault(draft[0], draft)
        per_molecule.append([drafts[i][0] for i in order])

    ordered_keys = sorted(unique, key=lambda k: (k[1].data, k[0]))
    ids = {key: rule_id for rule_id, key in enumerate(ordered_keys)}
    rules = []
    for key in ordered_keys:
        _, lhs, rhs, externals = unique[key]
        rules.append(ProductionRule(ids[key], lhs, rhs, externals))

    grammar = Grammar(rules)
    sequences = [RuleSequence(tuple(ids[k] for k in keys)) for keys in per_molecule]
    return grammar, sequences


# ---------------------------------------------------------------------------
# Derivation
# ---------------------------------------------------------------------------

def applicable_rules(s: DerivationState, g: Grammar) -> np.ndarray:
    return g.applicable_rules(s)


def derive(seq: Iterable[int], g: Grammar, name: Optional[str] = None) -> Molecule:
    """Replay a rule sequence from the start symbol into a molecule"""
    state = DerivationState.initial()
    for rule_id in seq:
        state = apply_rule(state, g.rule(rule_id))
    if state.frontier:
        raise IncompleteDerivation(
            f'{len(state.frontier)} nonterminal(s) left after {state.step_count} rule(s)')
    return to_molecule(state.current, name=name)


def random_rollout(g: Grammar, rng: np.random.Generator, max_steps: int = 200
                   ) -> Tuple[Optional[Molecule], RuleSequence, DerivationState]:
    """
    Uniform random frontier-respecting derivation kept within max_steps
    Returns (molecule or None when no completion fits the budget, sequence, final state)
    """
    state = DerivationState.initial()
    ids: List[int] = []
    while state.frontier:
        mask = g.budget_mask(state, max_steps - state.step_count)
        choices = np.flatnonzero(mask)
        if len(choices) == 0:
            return None, RuleSequence(tuple(ids)), state
        rule_id = int(rng.choice(choices))
        state = apply_rule(state, g.rules[rule_id])
        ids.append(rule_id)
    return to_molecule(state.current), RuleSequence(tuple(ids)), state
