"""
Canonical labeling of small labeled graphs
Iterative neighborhood-label refinement, then branch-and-minimize over the
smallest ambiguous cell. Automorphisms found between equal leaves prune
equivalent branches. Exact, and deterministic across runs (no hashing).
"""

from typing import Dict, List, Optional, Sequence, Tuple

Edge = Tuple[int, int, int]


def _refine(colors: List[int], adjacency: List[List[Tuple[int, int]]]) -> List[int]:
    """Refine a coloring until stable; colors come back as dense ranks"""
    n = len(colors)
    distinct = len(set(colors))
    while True:
        signatures = [
            (colors[v], tuple(sorted((label, colors[u]) for label, u in adjacency[v])))
            for v in range(n)
        ]
        ranking = {sig: rank for rank, sig in enumerate(sorted(set(signatures)))}
        refined = [ranking[sig] for sig in signatures]
        if len(ranking) == distinct:
            return refined
        colors = refined
        distinct = len(ranking)


def _individualize(colors: List[int], vertex: int) -> List[int]:
    cell = colors[vertex]
    return [2 * c + (1 if c == cell and u != vertex else 0) for u, c in enumerate(colors)]


def _leaf_code(colors: List[int], labels: Sequence[str], edges: Sequence[Edge]):
    order = [0] * len(colors)
    for v, c in enumerate(colors):
        order[c] = v
    ordered_labels = tuple(labels[v] for v in order)
    ordered_edges = tuple(sorted(
        (min(colors[u], colors[v]), max(colors[u], colors[v]), label)
        for u, v, label in edges
    ))
    return ordered_labels, ordered_edges


def _common_prefix(a: Tuple[int, ...], b: Tuple[int, ...]) -> int:
    depth = 0
    for x, y in zip(a, b):
        if x != y:
            break
        depth += 1
    return depth


class _Search:
    """Depth-first individualization search keeping the smallest leaf code"""

    def __init__(self, labels: Sequence[str], edges: Sequence[Edge],
                 adjacency: List[List[Tuple[int, int]]]):
        self.labels = labels
        self.edges = edges
        self.adjacency = adjacency
        self.first = None       # (code, colors, prefix)
        self.best = None
        self.automorphisms: List[List[int]] = []

    def _record(self, reference: List[int], colors: List[int]):
        at_position = [0] * len(reference)
        for v, c in enumerate(reference):
            at_position[c] = v
        mapping = [at_position[c] for c in colors]
        if any(v != w for v, w in enumerate(mapping)):
            self.automorphisms.append(mapping)

    def _leaf(self, colors: List[int], prefix: Tuple[int, ...]) -> Optional[int]:
        code = _leaf_code(colors, self.labels, self.edges)
        if self.first is None:
            self.first = self.best = (code, colors, prefix)
            return None
        for reference in (self.first, self.best):
            if code == reference[0]:
                self._record(reference[1], colors)
                # this subtree mirrors one already explored
                return _common_prefix(prefix, reference[2])
        if code < self.best[0]:
            self.best = (code, colors, prefix)
        return None

    def _orbit_roots(self, prefix: Tuple[int, ...]) -> List[int]:
        n = len(self.labels)
        parent = list(range(n))

        def find(v: int) -> int:
            while parent[v] != v:
                parent[v] = parent[parent[v]]
                v = parent[v]
            return v

        for mapping in self.automorphisms:
            if all(mapping[p] == p for p in prefix):
                for v, w in enumerate(mapping):
                    a, b = find(v), find(w)
                    if a != b:
                        parent[max(a, b)] = min(a, b)
        return [find(v) for v in range(n)]

    def run(self, colors: List[int], prefix: Tuple[int, ...] = ()) -> Optional[int]:
        """Returns the depth to unwind to, or None to keep exploring"""
        colors = _refine(colors, self.adjacency)
        if len(set(colors)) == len(colors):
            return self._leaf(colors, prefix)

        cells: Dict[int, List[int]] = {}
        for v, c in enumerate(colors):
            cells.setdefault(c, []).append(v)
        # smallest ambiguous cell, lowest color on ties
        target = min((len(members), c) for c, members in cells.items() if len(members) > 1)[1]

        explored: List[int] = []
        for vertex in cells[target]:
            if explored:
                roots = self._orbit_roots(prefix)
                if roots[vertex] in {roots[v] for v in explored}:
                    continue
            explored.append(vertex)
            jump = self.run(_individualize(colors, vertex), prefix + (vertex,))
            if jump is not None and jump < len(prefix):
                return jump
        return None


def canonical_labeling(labels: Sequence[str], edges: Sequence[Edge]) -> Tuple[List[int], bytes]:
    """
    Canonically label an undirected graph with vertex and edge labels

    Args:
        labels: one string label per vertex
        edges: (u, v, edge_label) triples, edge_label an int

    Returns:
        (position of each vertex in the canonical order, canonical code bytes).
        Two graphs get equal codes exactly when they are isomorphic.
    """
    n = len(labels)
    if n == 0:
        return [], b''

    adjacency: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    for u, v, label in edges:
        adjacency[u].append((label, v))
        adjacency[v].append((label, u))

    label_rank = {label: rank for rank, label in enumerate(sorted(set(labels)))}
    start = [label_rank[label] for label in labels]

    search = _Search(labels, edges, adjacency)
    search.run(start)
    (ordered_labels, ordered_edges), colors, _ = search.best

    text = '|'.join(ordered_labels) + ';' + ';'.join(f'{a},{b},{l}' for a, b, l in ordered_edges)
    return colors, text.encode('utf-8')
