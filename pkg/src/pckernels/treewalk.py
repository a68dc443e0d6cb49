"""Tree structures, tree-walk labellings, subtree patterns and the
extension graph that drives the dynamic program, plus the graphical
model attached to a tree structure.

Depth conventions: a tree structure of "depth budget" gamma has at most
gamma generations (a single node is one generation); a subtree pattern
has at most beta generations.  Arity bounds are inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations, combinations_with_replacement

from .covkernels import DecomposableModel

__all__ = [
    "PatternExplosionError",
    "WalkParams",
    "TreeStructure",
    "SubtreePattern",
    "AugmentedGraph",
    "enumerate_tree_structures",
    "penalization",
    "enumerate_labellings",
    "build_patterns",
    "build_augmented_graph",
    "tree_equivalent",
    "build_model_for_tree",
]


class PatternExplosionError(RuntimeError):
    """The subtree-pattern set exceeded the configured cap."""


@dataclass(frozen=True)
class WalkParams:
    """Structural and penalization parameters of the tree-walk kernel.

    alpha: maximum children per node; beta: distinctness order (a node's
    label and those of its descendants up to beta generations must be
    pairwise distinct); gamma: maximum generations per tree-walk;
    lam / nu: per-node and per-leaf penalization weights.
    """

    alpha: int = 1
    beta: int = 1
    gamma: int = 1
    lam: float = 1.0
    nu: float = 0.1

    def __post_init__(self):
        if self.alpha < 1 or self.beta < 1 or self.gamma < 1:
            raise ValueError("alpha, beta, gamma must all be >= 1")
        if self.lam <= 0 or self.nu <= 0:
            raise ValueError("lam and nu must be > 0")


class TreeStructure:
    """Rooted unordered tree over nodes 0..n-1, parents preceding children."""

    __slots__ = ("parents", "children", "depths", "canonical_code")

    def __init__(self, parents):
        parents = tuple(int(p) for p in parents)
        if not parents or parents[0] != -1:
            raise ValueError("node 0 must be the root (parent -1)")
        for i, p in enumerate(parents[1:], start=1):
            if not 0 <= p < i:
                raise ValueError("parents must precede children in node order")
        self.parents = parents
        children = [[] for _ in parents]
        for i, p in enumerate(parents[1:], start=1):
            children[p].append(i)
        self.children = tuple(tuple(c) for c in children)
        depths = [0] * len(parents)
        for i, p in enumerate(parents[1:], start=1):
            depths[i] = depths[p] + 1
        self.depths = tuple(depths)
        self.canonical_code = self._code(0)

    def _code(self, node):
        return "(" + "".join(sorted(self._code(c) for c in self.children[node])) + ")"

    def __len__(self):
        return len(self.parents)

    @property
    def generations(self):
        return max(self.depths) + 1

    @property
    def n_leaves(self):
        return sum(1 for c in self.children if not c)

    def max_arity(self):
        return max((len(c) for c in self.children), default=0)

    def subtree_depths(self):
        """Per node, the number of generations strictly below it."""
        out = [0] * len(self.parents)
        for i in range(len(self.parents) - 1, 0, -1):
            p = self.parents[i]
            out[p] = max(out[p], out[i] + 1)
        return out

    def automorphism_count(self):
        """Order of the automorphism group of the rooted unordered tree.

        Equals the number of node relabelings that realize the same
        unordered tree; used to convert between per-map and per-object
        counting of labelled tree-walks.
        """
        import math as _math

        def rec(node):
            codes, total = [], 1
            for c in self.children[node]:
                code, aut = rec(c)
                codes.append(code)
                total *= aut
            counts = {}
            for code in codes:
                counts[code] = counts.get(code, 0) + 1
            for m in counts.values():
                total *= _math.factorial(m)
            return "(" + "".join(sorted(codes)) + ")", total

        return rec(0)[1]

    def family(self, node, span):
        """node together with its descendants up to `span` generations."""
        fam = [node]
        frontier = [node]
        for _ in range(span):
            nxt = []
            for u in frontier:
                nxt.extend(self.children[u])
            fam.extend(nxt)
            frontier = nxt
        return tuple(fam)

    @staticmethod
    def from_code(code):
        """Parse a canonical code back into a tree structure."""
        parents = []

        def parse(pos, parent):
            if pos >= len(code) or code[pos] != "(":
                raise ValueError(f"bad tree code {code!r}")
            me = len(parents)
            parents.append(parent)
            pos += 1
            while pos < len(code) and code[pos] == "(":
                pos = parse(pos, me)
            if pos >= len(code) or code[pos] != ")":
                raise ValueError(f"bad tree code {code!r}")
            return pos + 1

        end = parse(0, -1)
        if end != len(code):
            raise ValueError(f"trailing characters in tree code {code!r}")
        return TreeStructure(parents)

    def __eq__(self, other):
        if not isinstance(other, TreeStructure):
            return NotImplemented
        return self.parents == other.parents

    def __hash__(self):
        return hash(self.parents)

    def __repr__(self):
        return f"TreeStructure(n={len(self)}, code={self.canonical_code!r})"


def _shapes(alpha, gens):
    """Canonical nested-tuple shapes with <= gens generations, arity <= alpha."""
    if gens <= 0:
        return []
    smaller = _shapes(alpha, gens - 1)
    codes = {_shape_code(s): s for s in smaller}
    ordered = [codes[c] for c in sorted(codes)]
    out = [()]
    for size in range(1, alpha + 1):
        for combo in combinations_with_replacement(ordered, size):
            out.append(tuple(combo))
    # dedupe across sizes (shapes from smaller gens recur identically)
    seen, uniq = set(), []
    for s in out:
        c = _shape_code(s)
        if c not in seen:
            seen.add(c)
            uniq.append(s)
    return uniq


def _shape_code(shape):
    return "(" + "".join(sorted(_shape_code(c) for c in shape)) + ")"


def _shape_to_tree(shape):
    parents = []

    def walk(s, parent):
        me = len(parents)
        parents.append(parent)
        for child in s:
            walk(child, me)

    walk(shape, -1)
    return TreeStructure(parents)


def enumerate_tree_structures(alpha, gamma):
    """All tree structures with <= gamma generations and arity <= alpha.

    Exactly one representative per isomorphism class of rooted unordered
    trees, deterministically ordered by canonical code.
    """
    if alpha < 1 or gamma < 1:
        raise ValueError("alpha and gamma must be >= 1")
    trees = [_shape_to_tree(s) for s in _shapes(alpha, gamma)]
    trees.sort(key=lambda t: t.canonical_code)
    return trees


def penalization(tree, lam, nu):
    """Structure weight lam^(node count) * nu^(leaf count).

    A single-node tree counts one leaf, so extending a leaf by p children
    changes the leaf count by p - 1.
    """
    return float(lam) ** len(tree) * float(nu) ** tree.n_leaves


def _conflict_sets(tree, beta):
    """Per node, the earlier nodes whose labels must differ from its own.

    Two nodes conflict when their lowest common ancestor sees both within
    beta generations.
    """
    n = len(tree)
    ancestors = []
    for i in range(n):
        chain, u = {}, i
        d = tree.depths[i]
        while u != -1:
            chain[u] = d - tree.depths[u]
            u = tree.parents[u]
        ancestors.append(chain)
    conflicts = [[] for _ in range(n)]
    for k in range(n):
        for u in range(k):
            best = None
            for a, dk in ancestors[k].items():
                if a in ancestors[u]:
                    du = ancestors[u][a]
                    span = max(du, dk)
                    best = span if best is None else min(best, span)
            if best is not None and best <= beta:
                conflicts[k].append(u)
    return conflicts


def enumerate_labellings(tree, graph, beta):
    """All consistent labellings of a tree structure by graph vertices.

    Consistency: tree-neighbors map to graph-neighbors.  Distinctness:
    each node's label and the labels of its descendants up to beta
    generations are pairwise distinct.  Exhaustive; this is the oracle's
    enumeration path.
    """
    n = len(tree)
    conflicts = _conflict_sets(tree, beta)
    out = []
    labels = [0] * n

    def assign(k):
        if k == n:
            out.append(tuple(labels))
            return
        if k == 0:
            candidates = range(graph.n_vertices)
        else:
            candidates = graph.neighbors(labels[tree.parents[k]])
        for v in candidates:
            if any(labels[u] == v for u in conflicts[k]):
                continue
            labels[k] = v
            assign(k + 1)

    if graph.n_vertices:
        assign(0)
    return out


class SubtreePattern:
    """Rooted subtree of a graph with pairwise-distinct vertices.

    Slots are in depth-first order with siblings sorted by vertex id,
    which makes (parents, vertices) a canonical key for the unordered
    labelled pattern.
    """

    __slots__ = ("parents", "vertices", "depths", "shape_code")

    def __init__(self, parents, vertices):
        self.parents = tuple(int(p) for p in parents)
        self.vertices = tuple(int(v) for v in vertices)
        if len(self.parents) != len(self.vertices):
            raise ValueError("parents and vertices differ in length")
        if len(set(self.vertices)) != len(self.vertices):
            raise ValueError("pattern vertices must be distinct")
        depths = [0] * len(self.parents)
        for i, p in enumerate(self.parents[1:], start=1):
            depths[i] = depths[p] + 1
        self.depths = tuple(depths)
        children = [[] for _ in self.parents]
        for i, p in enumerate(self.parents[1:], start=1):
            children[p].append(i)
        self.shape_code = _pattern_code(tuple(tuple(c) for c in children), 0)

    @property
    def root(self):
        return self.vertices[0]

    @property
    def generations(self):
        return max(self.depths) + 1

    @property
    def vertex_set(self):
        return frozenset(self.vertices)

    def key(self):
        return (self.parents, self.vertices)

    def __len__(self):
        return len(self.vertices)

    def __eq__(self, other):
        if not isinstance(other, SubtreePattern):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"SubtreePattern(root={self.root}, vertices={self.vertices})"


def _pattern_code(children, node):
    return "(" + "".join(sorted(_pattern_code(children, c) for c in children[node])) + ")"


def build_patterns(graph, alpha, beta, cap=100000):
    """All rooted subtrees with <= beta generations and arity <= alpha.

    Includes every shallower pattern down to single vertices; one entry
    per distinct labelled pattern up to unordered-children equivalence.
    Aborts with PatternExplosionError beyond `cap` patterns.
    """
    if alpha < 1 or beta < 1:
        raise ValueError("alpha and beta must be >= 1")
    out = []

    def emit(parents, vertices):
        out.append(SubtreePattern(parents, vertices))
        if len(out) > cap:
            raise PatternExplosionError(
                f"more than {cap} subtree patterns; raise the cap to proceed"
            )

    def grow(parents, vertices, used, frontier, gens_left):
        # frontier: slots of the deepest generation, eligible for children
        emit(parents, vertices)
        if gens_left <= 1 or not frontier:
            return
        # choose children sets for each frontier slot, all fresh vertices
        # distinct across the extension
        def extend(slot_idx, cur_parents, cur_vertices, cur_used, new_slots):
            if slot_idx == len(frontier):
                if new_slots:
                    grow(cur_parents, cur_vertices, cur_used, new_slots,
                         gens_left - 1)
                return
            slot = frontier[slot_idx]
            cands = [v for v in graph.neighbors(vertices[slot]) if v not in cur_used]
            for size in range(0, min(alpha, len(cands)) + 1):
                for subset in combinations(cands, size):
                    if any(v in cur_used for v in subset):
                        continue
                    np_parents = list(cur_parents)
                    np_vertices = list(cur_vertices)
                    added = []
                    for v in subset:
                        added.append(len(np_vertices))
                        np_parents.append(slot)
                        np_vertices.append(v)
                    extend(slot_idx + 1, tuple(np_parents), tuple(np_vertices),
                           cur_used | set(subset), new_slots + added)

        extend(0, parents, vertices, used, [])

    for r in range(graph.n_vertices):
        grow((-1,), (r,), {r}, [0], beta)

    # canonicalize slot order (siblings by vertex id) and dedupe
    canon = {}
    for pat in out:
        cp = _canonical_pattern(pat)
        canon[cp.key()] = cp
    result = [canon[k] for k in sorted(canon)]
    return result


def _canonical_pattern(pat):
    children = [[] for _ in pat.parents]
    for i, p in enumerate(pat.parents[1:], start=1):
        children[p].append(i)
    order = []

    def walk(slot):
        order.append(slot)
        for c in sorted(children[slot], key=lambda s: pat.vertices[s]):
            walk(c)

    walk(0)
    new_index = {old: new for new, old in enumerate(order)}
    parents = [-1] * len(order)
    vertices = [0] * len(order)
    for old, new in new_index.items():
        vertices[new] = pat.vertices[old]
        p = pat.parents[old]
        parents[new] = -1 if p < 0 else new_index[p]
    return SubtreePattern(parents, vertices)


@dataclass(frozen=True)
class AugmentedGraph:
    """Directed graph over subtree patterns; an edge means "extends the
    pattern one generation further with fresh vertices"."""

    patterns: tuple
    edges: tuple
    out_neighbors: tuple

    def index_of(self, pattern):
        return self._index[pattern.key()]

    def __post_init__(self):
        object.__setattr__(
            self, "_index", {p.key(): i for i, p in enumerate(self.patterns)}
        )


def _complete_child_subtree(pat, child_slot):
    """Pattern slots of the complete subtree rooted at a child of the root."""
    children = [[] for _ in pat.parents]
    for i, p in enumerate(pat.parents[1:], start=1):
        children[p].append(i)
    slots = []

    def walk(s):
        slots.append(s)
        for c in children[s]:
            walk(c)

    walk(child_slot)
    new_index = {old: new for new, old in enumerate(slots)}
    parents = [-1] + [new_index[pat.parents[s]] for s in slots[1:]]
    vertices = [pat.vertices[s] for s in slots]
    return parents, vertices


def build_augmented_graph(patterns, graph, alpha, beta):
    """Extension edges between patterns of the same (graph, alpha, beta).

    R0 -> R1 holds when R1 consists of a complete root-child subtree of R0
    extended by one nonempty generation of fresh vertices (fresh with
    respect to all of R0).  For beta = 1 this is the directed version of
    the graph's edge relation.
    """
    index = {p.key(): i for i, p in enumerate(patterns)}
    edges = set()

    for i0, r0 in enumerate(patterns):
        banned = r0.vertex_set
        if beta == 1:
            for v in graph.neighbors(r0.root):
                key = ((-1,), (v,))
                if key in index:
                    edges.add((i0, index[key]))
            continue
        root_children = [s for s, p in enumerate(r0.parents) if p == 0]
        for c in root_children:
            parents, vertices = _complete_child_subtree(r0, c)
            sub = SubtreePattern(parents, vertices)
            frontier = [s for s, d in enumerate(sub.depths) if d == beta - 2]
            if not frontier:
                continue

            def attach(idx, cur_parents, cur_vertices, used, added_any):
                if idx == len(frontier):
                    if added_any:
                        cp = _canonical_pattern(
                            SubtreePattern(cur_parents, cur_vertices)
                        )
                        j = index.get(cp.key())
                        if j is not None:
                            edges.add((i0, j))
                    return
                slot = frontier[idx]
                cands = [
                    v
                    for v in graph.neighbors(sub.vertices[slot])
                    if v not in banned and v not in used
                ]
                for size in range(0, min(alpha, len(cands)) + 1):
                    for subset in combinations(cands, size):
                        np_p = list(cur_parents)
                        np_v = list(cur_vertices)
                        for v in subset:
                            np_p.append(slot)
                            np_v.append(v)
                        attach(idx + 1, tuple(np_p), tuple(np_v),
                               used | set(subset), added_any or bool(subset))

            attach(0, tuple(parents), tuple(vertices), set(), False)

    edge_list = tuple(sorted(edges))
    out = [[] for _ in patterns]
    for a, b in edge_list:
        out[a].append(b)
    return AugmentedGraph(tuple(patterns), edge_list, tuple(tuple(o) for o in out))


def _shape_code_of(obj):
    if isinstance(obj, TreeStructure):
        return obj.canonical_code
    if isinstance(obj, SubtreePattern):
        return obj.shape_code
    raise TypeError(f"cannot take a tree shape from {type(obj).__name__}")


def tree_equivalent(a, b):
    """True iff the two objects share the same rooted unordered tree shape."""
    return _shape_code_of(a) == _shape_code_of(b)


def build_model_for_tree(tree, beta):
    """Graphical model whose cliques are the tree's depth-beta families.

    Every node deep enough to own a full beta-generation family yields a
    maximal clique; shallower families are absorbed by an ancestor's.  The
    junction tree is rooted at the clique of the tree's root with parents
    following the tree top-down.
    """
    if beta < 1:
        raise ValueError("beta must be >= 1")
    stree = tree.subtree_depths()
    owners = [u for u in range(len(tree)) if stree[u] >= beta]
    if not owners:
        owners = [0]
    owner_pos = {u: i for i, u in enumerate(owners)}
    cliques = [tree.family(u, beta) for u in owners]
    parent = []
    for u in owners:
        if u == 0:
            parent.append(-1)
        else:
            parent.append(owner_pos[tree.parents[u]])
    return DecomposableModel(len(tree), cliques, parent)
