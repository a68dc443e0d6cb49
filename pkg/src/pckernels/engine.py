"""Tree-walk kernel evaluators and Gram-matrix computation.

Two independent routes compute the same kernel:

* brute_force_kernel enumerates every tree structure, every consistent
  labelling pair, and evaluates the factorized local kernel directly.
  It is the normative semantics, usable only on small graphs.

Each labelled tree-walk counts once as an unordered object: the sum over
labelling maps of a tree structure is normalized by the structure's
automorphism count, so that the penalization f(T) is exactly the weight
of every distinct tree-walk.  Per-map counting would instead weight each
tree-walk by the automorphism count of its shape, which no depth-local
recursion can reproduce.

* dp_kernel runs a dynamic program over matched "window" pairs: a window
  is the subtree pattern formed by a tree-walk node together with its
  next beta-1 generations, and a transition extends the window's deepest
  generation one step further with fresh vertices on both graphs at
  once.  Each extension contributes the conditional position kernel of
  the new generation given the window (the clique factor of the
  underlying graphical model) together with the per-node attribute and
  penalization factors; the clique of the tree-walk root contributes a
  plain Bhattacharyya factor, handled in the top-level assembly.  Values
  fill level by level in the remaining-depth budget, so the cost is
  linear in the depth and quadratic in the number of patterns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .covkernels import (
    KernelScaleParams,
    attribute_kernel,
    cholesky_pd,
    kernel_b_model,
    position_kernel_matrix,
)
from .treewalk import (
    PatternExplosionError,
    WalkParams,
    build_model_for_tree,
    enumerate_labellings,
    enumerate_tree_structures,
    penalization,
)

__all__ = [
    "KernelConfig",
    "GramMatrix",
    "brute_force_kernel",
    "dp_kernel",
    "dp_restricted_kernel",
    "gram_matrix",
    "gram_matrix_multi",
    "save_gram",
    "load_gram",
]

_LOG_DET_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class KernelConfig:
    """Everything needed to evaluate the kernel between two graphs."""

    walk: WalkParams = field(default_factory=WalkParams)
    scales: KernelScaleParams = field(default_factory=KernelScaleParams)
    normalize: bool = False
    pattern_cap: int = 100000
    reduced_patterns: bool = False


# ---------------------------------------------------------------------------
# brute-force oracle


def _batched_logdet(blocks):
    chol = np.linalg.cholesky(blocks)
    return 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)


def _side_clique_data(K, I_arr, model):
    """Per-labelling clique quantities of one side: root-block logdets and,
    per non-root clique, (conditional covariance, regression coefs, logdet)."""
    root = []
    conds = []
    for i, c in enumerate(model.cliques):
        if model.parent[i] < 0:
            rows = I_arr[:, list(c)]
            root.append(_batched_logdet(K[rows[:, :, None], rows[:, None, :]]))
        else:
            res = list(model.residual(i))
            sep = list(model.separator(i))
            rows_r = I_arr[:, res]
            rows_s = I_arr[:, sep]
            Kss = K[rows_s[:, :, None], rows_s[:, None, :]]
            Krs = K[rows_r[:, :, None], rows_s[:, None, :]]
            Krr = K[rows_r[:, :, None], rows_r[:, None, :]]
            X = np.linalg.solve(Kss, np.swapaxes(Krs, 1, 2))
            cond = Krr - Krs @ X
            cond = 0.5 * (cond + np.swapaxes(cond, 1, 2))
            conds.append((cond, np.swapaxes(X, 1, 2), _batched_logdet(cond)))
    return root[0], conds


def _pair_log_kernel(root_g, conds_g, root_h, conds_h, chunk, nJ):
    """log kernel_b of all labelling pairs in an I-chunk, vectorized."""
    out = 0.5 * root_g[chunk][:, None] + 0.5 * root_h[None, :]
    # root clique mean determinant
    KB = _PAIR_SCRATCH["KB"][chunk]
    LB = _PAIR_SCRATCH["LB"]
    mean = 0.5 * (KB[:, None] + LB[None, :])
    out = out - _batched_logdet(mean.reshape(-1, *mean.shape[2:])).reshape(
        len(chunk), nJ
    )
    for (ck, mk, ldk), (cl, ml, ldl) in zip(conds_g, conds_h):
        out = out + 0.5 * ldk[chunk][:, None] + 0.5 * ldl[None, :]
        diff = mk[chunk][:, None] - ml[None, :]
        denom = 0.5 * (ck[chunk][:, None] + cl[None, :]) + 0.25 * (
            diff @ np.swapaxes(diff, -1, -2)
        )
        ld = _batched_logdet(denom.reshape(-1, *denom.shape[2:]))
        out = out - np.maximum(ld, _LOG_DET_FLOOR).reshape(len(chunk), nJ)
    return out


_PAIR_SCRATCH = {}


def brute_force_kernel(graph_g, graph_h, cfg, max_vertices=12, max_gamma=4,
                       vectorized=True):
    """Exact triple sum over tree structures and labelling pairs.

    Guarded against explosion: both graphs must have at most max_vertices
    vertices and the depth budget at most max_gamma generations.  The
    vectorized path batches the labelling-pair double sum per tree; with
    vectorized=False every pair goes through the scalar covariance-kernel
    routines, which is the fully spelled-out reference route.
    """
    w = cfg.walk
    if graph_g.n_vertices > max_vertices or graph_h.n_vertices > max_vertices:
        raise ValueError(f"brute force guarded to {max_vertices} vertices")
    if w.gamma > max_gamma:
        raise ValueError(f"brute force guarded to gamma <= {max_gamma}")
    if graph_g.n_vertices == 0 or graph_h.n_vertices == 0:
        return 0.0

    K = position_kernel_matrix(graph_g, cfg.scales)
    L = position_kernel_matrix(graph_h, cfg.scales)
    ups = cfg.scales.upsilon
    tree_totals = []
    for tree in enumerate_tree_structures(w.alpha, w.gamma):
        labellings_g = enumerate_labellings(tree, graph_g, w.beta)
        if not labellings_g:
            continue
        labellings_h = enumerate_labellings(tree, graph_h, w.beta)
        if not labellings_h:
            continue
        model = build_model_for_tree(tree, w.beta)
        # per-object counting: labelling maps related by a shape
        # automorphism describe the same tree-walk
        pen = penalization(tree, w.lam, w.nu) / tree.automorphism_count()

        if not vectorized:
            terms = []
            for I in labellings_g:
                KI = K[np.ix_(I, I)]
                for J in labellings_h:
                    LJ = L[np.ix_(J, J)]
                    ka = 1.0
                    for p, q in zip(I, J):
                        ka *= attribute_kernel(
                            graph_g.attributes[p], graph_h.attributes[q], ups
                        )
                    terms.append(pen * kernel_b_model(KI, LJ, model) * ka)
            tree_totals.append(math.fsum(terms))
            continue

        I_arr = np.array(labellings_g, dtype=np.intp)
        J_arr = np.array(labellings_h, dtype=np.intp)
        nI, nJ = len(I_arr), len(J_arr)
        A = graph_g.attributes[I_arr]  # (nI, nT, da)
        B = graph_h.attributes[J_arr]
        sa = (A * A).sum(axis=(1, 2))
        sb = (B * B).sum(axis=(1, 2))
        inner = np.einsum("itd,jtd->ij", A, B)
        root_c = list(model.cliques[model.root])
        rows = I_arr[:, root_c]
        _PAIR_SCRATCH["KB"] = K[rows[:, :, None], rows[:, None, :]]
        rows = J_arr[:, root_c]
        _PAIR_SCRATCH["LB"] = L[rows[:, :, None], rows[:, None, :]]
        root_g, conds_g = _side_clique_data(K, I_arr, model)
        root_h, conds_h = _side_clique_data(L, J_arr, model)
        r = len(root_c)
        chunk_rows = max(1, 4_000_000 // max(nJ * r * r, 1))
        total = 0.0
        for start in range(0, nI, chunk_rows):
            chunk = np.arange(start, min(start + chunk_rows, nI))
            log_kb = _pair_log_kernel(root_g, conds_g, root_h, conds_h, chunk, nJ)
            log_ka = -ups * (sa[chunk][:, None] + sb[None, :] - 2.0 * inner[chunk])
            total += float(np.sum(np.exp(log_kb + log_ka)))
        _PAIR_SCRATCH.clear()
        tree_totals.append(pen * total)
    return math.fsum(tree_totals)


# ---------------------------------------------------------------------------
# dynamic program internals


def _canonical_matched(parents, gv, hv):
    """Reorder slots depth-first with siblings sorted by (g-vertex, h-vertex)."""
    children = [[] for _ in parents]
    for i, p in enumerate(parents):
        if p >= 0:
            children[p].append(i)
    order = []

    def walk(slot):
        order.append(slot)
        for c in sorted(children[slot], key=lambda s: (gv[s], hv[s])):
            walk(c)

    walk(0)
    new_index = {old: new for new, old in enumerate(order)}
    np_parents = tuple(-1 if parents[s] < 0 else new_index[parents[s]] for s in order)
    return np_parents, tuple(gv[s] for s in order), tuple(hv[s] for s in order)


def _depths(parents):
    out = [0] * len(parents)
    for i, p in enumerate(parents):
        if p >= 0:
            out[i] = out[p] + 1
    return tuple(out)


def _side_key(parents, labels):
    """Canonical (parents, labels) form of one side of a matched window."""
    children = [[] for _ in parents]
    for i, p in enumerate(parents):
        if p >= 0:
            children[p].append(i)
    order = []

    def walk(slot):
        order.append(slot)
        for c in sorted(children[slot], key=lambda s: labels[s]):
            walk(c)

    walk(0)
    new_index = {old: new for new, old in enumerate(order)}
    return (
        tuple(-1 if parents[s] < 0 else new_index[parents[s]] for s in order),
        tuple(labels[s] for s in order),
    )


class _SideCache:
    """Per-graph precomputation shared across all pairs involving the graph.

    Holds the position kernel matrix plus lazily filled caches of
    log-determinants of vertex-subset blocks and of conditional
    covariance data (Schur complement, regression coefficients) for
    (window, fresh-vertex) combinations.
    """

    def __init__(self, graph, scales):
        self.graph = graph
        self.K = position_kernel_matrix(graph, scales)
        self._logdets = {}
        self._conds = {}

    def logdet(self, idx):
        got = self._logdets.get(idx)
        if got is None:
            sub = self.K[np.ix_(idx, idx)]
            got = 2.0 * float(np.sum(np.log(np.diag(cholesky_pd(sub)))))
            self._logdets[idx] = got
        return got

    def conditional(self, window, fresh):
        """(cond covariance, regression coefficients, logdet) of fresh | window."""
        key = (window, fresh)
        got = self._conds.get(key)
        if got is None:
            R = list(window)
            D = list(fresh)
            Krd = self.K[np.ix_(R, D)]
            Lr = cholesky_pd(self.K[np.ix_(R, R)])
            W = np.linalg.solve(Lr, Krd)
            cond = self.K[np.ix_(D, D)] - W.T @ W
            cond = 0.5 * (cond + cond.T)
            M = np.linalg.solve(Lr.T, W).T  # K_DR K_RR^-1, one row per fresh vertex
            ld = 2.0 * float(np.sum(np.log(np.diag(cholesky_pd(cond)))))
            got = (cond, M, ld)
            self._conds[key] = got
        return got


def _attribute_kernel_matrix(graph_g, graph_h, upsilon):
    a = graph_g.attributes
    b = graph_h.attributes
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-upsilon * sq)


class _PairEngine:
    """All depth-independent work for one graph pair: matched windows,
    extension transitions with cached factors, and top-level terms."""

    def __init__(self, graph_g, graph_h, cfg, side_g=None, side_h=None):
        self.g = graph_g
        self.h = graph_h
        self.cfg = cfg
        w = cfg.walk
        self.alpha = w.alpha
        self.beta = w.beta
        self.lam = w.lam
        self.nu = w.nu
        self.side_g = side_g if side_g is not None else _SideCache(graph_g, cfg.scales)
        self.side_h = side_h if side_h is not None else _SideCache(graph_h, cfg.scales)
        self.KA = _attribute_kernel_matrix(graph_g, graph_h, cfg.scales.upsilon)
        # per-slot cap on extension width; the reduced-pattern mode keeps
        # only single-branch windows for beta >= 2
        if cfg.reduced_patterns and self.beta > 1:
            self.slot_cap = 1
        else:
            self.slot_cap = self.alpha

        self._state_ids = {}
        self._state_info = []
        self._transitions = []
        self._top_windows = []
        self._tops = []
        self._build()
        self._flatten()

    # -- window enumeration --------------------------------------------------

    def _pair_subsets(self, cands, used_g, used_h, max_k):
        """Sorted tuples of candidate pairs with distinct g- and h-vertices."""
        out = [()]

        def rec(start, acc, ug, uh):
            if len(acc) >= max_k:
                return
            for idx in range(start, len(cands)):
                x, y = cands[idx]
                if x in ug or y in uh:
                    continue
                nxt = acc + ((x, y),)
                out.append(nxt)
                rec(idx + 1, nxt, ug | {x}, uh | {y})

        rec(0, (), used_g, used_h)
        return out

    def _enum_windows(self, max_gens):
        """Canonical matched windows up to max_gens generations, each once."""
        windows = []

        def grow(parents, gv, hv, used_g, used_h, frontier, gens):
            windows.append((parents, gv, hv, gens))
            if gens >= max_gens or not frontier:
                return

            def extend(i, p, G, H, ug, uh, new_slots):
                if i == len(frontier):
                    if new_slots:
                        grow(p, G, H, ug, uh, new_slots, gens + 1)
                    return
                slot = frontier[i]
                cands = sorted(
                    (x, y)
                    for x in self.g.neighbors(gv[slot])
                    if x not in ug
                    for y in self.h.neighbors(hv[slot])
                    if y not in uh
                )
                for subset in self._pair_subsets(cands, ug, uh, self.slot_cap):
                    np_p, np_g, np_h = list(p), list(G), list(H)
                    added = []
                    for x, y in subset:
                        added.append(len(np_g))
                        np_p.append(slot)
                        np_g.append(x)
                        np_h.append(y)
                    extend(
                        i + 1,
                        tuple(np_p),
                        tuple(np_g),
                        tuple(np_h),
                        ug | {x for x, _ in subset},
                        uh | {y for _, y in subset},
                        new_slots + added,
                    )

            extend(0, parents, gv, hv, used_g, used_h, [])

        for u in range(self.g.n_vertices):
            for v in range(self.h.n_vertices):
                grow((-1,), (u,), (v,), {u}, {v}, [0], 1)
        return windows

    # -- transitions ---------------------------------------------------------

    def _state_id(self, parents, gv, hv):
        key = _canonical_matched(parents, gv, hv)
        got = self._state_ids.get(key)
        if got is None:
            got = len(self._state_info)
            if got + 1 > self.cfg.pattern_cap:
                raise PatternExplosionError(
                    f"more than {self.cfg.pattern_cap} matched pattern pairs"
                )
            self._state_ids[key] = got
            self._state_info.append(key)
            self._transitions.append(None)
        return got

    def _enum_choices(self, parents, gv, hv):
        """Extension choices at the window's frontier slots.

        Yields (fresh, z) where fresh lists (slot, g-vertex, h-vertex) for
        the new generation and z counts frontier slots left childless.
        Per slot, the new pairs form an unordered set enumerated in one
        canonical order, matching the per-object counting of tree-walks.
        """
        depths = _depths(parents)
        frontier = [s for s, d in enumerate(depths) if d == self.beta - 1]
        set_g, set_h = set(gv), set(hv)
        cand_per_slot = [
            sorted(
                (x, y)
                for x in self.g.neighbors(gv[s])
                if x not in set_g
                for y in self.h.neighbors(hv[s])
                if y not in set_h
            )
            for s in frontier
        ]
        choices = []
        assign = [()] * len(frontier)

        def rec(i, ug, uh):
            if i == len(frontier):
                fresh = []
                z = 0
                for s, tup in zip(frontier, assign):
                    if not tup:
                        z += 1
                    for x, y in tup:
                        fresh.append((s, x, y))
                choices.append((tuple(fresh), z))
                return
            cands = [(x, y) for x, y in cand_per_slot[i] if x not in ug and y not in uh]

            def tup_rec(start, acc, ux, uy):
                assign[i] = acc
                rec(i + 1, ux, uy)
                if len(acc) < self.slot_cap:
                    for idx in range(start, len(cands)):
                        x, y = cands[idx]
                        if x in ux or y in uy:
                            continue
                        tup_rec(idx + 1, acc + ((x, y),), ux | {x}, uy | {y})

            tup_rec(0, (), frozenset(ug), frozenset(uh))

        rec(0, frozenset(), frozenset())
        return frontier, choices

    def _conditional_factor(self, gv, hv, fresh_g, fresh_h):
        """Conditional position-kernel factor of the fresh generation given
        the window, combining both sides' cached conditional data."""
        ck, mk, ldk = self.side_g.conditional(gv, fresh_g)
        cl, ml, ldl = self.side_h.conditional(hv, fresh_h)
        diff = mk - ml
        denom = 0.5 * (ck + cl) + 0.25 * (diff @ diff.T)
        if denom.shape[0] == 1:
            d = denom[0, 0]
            ld_den = math.log(d) if d > 1e-300 else _LOG_DET_FLOOR
        else:
            ld_den = max(
                2.0 * float(np.sum(np.log(np.diag(cholesky_pd(denom))))),
                _LOG_DET_FLOOR,
            )
        return math.exp(0.5 * (ldk + ldl) - ld_den)

    def _choice_data(self, parents, gv, hv, fresh):
        """Extended window and the per-branch child states for one choice."""
        n0 = len(parents)
        ext_parents = list(parents)
        ext_gv = list(gv)
        ext_hv = list(hv)
        for slot, x, y in fresh:
            ext_parents.append(slot)
            ext_gv.append(x)
            ext_hv.append(y)
        children = [[] for _ in ext_parents]
        for i, p in enumerate(ext_parents):
            if p >= 0:
                children[p].append(i)
        kids = []
        for c in children[0]:
            branch = []
            stack = [c]
            while stack:
                s = stack.pop()
                branch.append(s)
                stack.extend(children[s])
            if all(s < n0 for s in branch):
                continue  # complete shallow branch, contributes factor 1
            branch.sort()
            reindex = {old: new for new, old in enumerate(branch)}
            b_parents = tuple(
                -1 if old == c else reindex[ext_parents[old]] for old in branch
            )
            b_gv = tuple(ext_gv[s] for s in branch)
            b_hv = tuple(ext_hv[s] for s in branch)
            kids.append(self._state_id(b_parents, b_gv, b_hv))
        return tuple(ext_gv), tuple(ext_hv), tuple(kids)

    def _build_transitions(self, sid):
        parents, gv, hv = self._state_info[sid]
        _, choices = self._enum_choices(parents, gv, hv)
        out = []
        for fresh, z in choices:
            factor = self.nu**z
            if not fresh:
                out.append((factor, ()))
                continue
            fresh_g = tuple(x for _, x, _ in fresh)
            fresh_h = tuple(y for _, _, y in fresh)
            factor *= self.lam ** len(fresh)
            for _, x, y in fresh:
                factor *= self.KA[x, y]
            factor *= self._conditional_factor(gv, hv, fresh_g, fresh_h)
            _, _, kids = self._choice_data(parents, gv, hv, fresh)
            out.append((factor, kids))
        return out

    # -- top level -----------------------------------------------------------

    def _root_position_factor(self, union_g, union_h):
        """Plain Bhattacharyya factor for the tree-walk root's clique."""
        ldk = self.side_g.logdet(union_g)
        ldl = self.side_h.logdet(union_h)
        mean = 0.5 * (
            self.side_g.K[np.ix_(union_g, union_g)]
            + self.side_h.K[np.ix_(union_h, union_h)]
        )
        ld_mean = 2.0 * float(np.sum(np.log(np.diag(cholesky_pd(mean)))))
        return math.exp(0.5 * (ldk + ldl) - ld_mean)

    def _build(self):
        beta, gamma = self.beta, self.cfg.walk.gamma
        for parents, gv, hv, gens in self._enum_windows(min(beta, gamma)):
            depths = _depths(parents)
            n_children = [0] * len(parents)
            for p in parents:
                if p >= 0:
                    n_children[p] += 1
            # leaves whose status the window itself already resolves
            l0 = sum(
                1
                for s in range(len(parents))
                if n_children[s] == 0 and depths[s] <= beta - 2
            )
            pre = self.lam ** len(parents) * self.nu**l0
            for s in range(len(parents)):
                pre *= self.KA[gv[s], hv[s]]
            self._top_windows.append((parents, gv, hv))
            if gens < beta:
                kb = self._root_position_factor(gv, hv)
                self._tops.append((gens, pre, ((1.0, kb, ()),)))
                continue
            _, choices = self._enum_choices(parents, gv, hv)
            packed = []
            for fresh, z in choices:
                cpre = self.nu**z
                if fresh:
                    cpre *= self.lam ** len(fresh)
                    for _, x, y in fresh:
                        cpre *= self.KA[x, y]
                    ext_gv, ext_hv, kids = self._choice_data(parents, gv, hv, fresh)
                else:
                    ext_gv, ext_hv, kids = gv, hv, ()
                kb = self._root_position_factor(ext_gv, ext_hv)
                packed.append((cpre, kb, kids))
            self._tops.append((gens, pre, tuple(packed)))
            self._state_id(parents, gv, hv)

        # close transitions over every reachable state
        sid = 0
        while sid < len(self._state_info):
            if self._transitions[sid] is None:
                self._transitions[sid] = self._build_transitions(sid)
            sid += 1

    def _flatten(self):
        """Flat arrays for the level sweeps and the top-level assembly."""
        t_state, t_factor, t_kids = [], [], []
        for sid, trans in enumerate(self._transitions):
            for factor, kids in trans:
                t_state.append(sid)
                t_factor.append(factor)
                t_kids.append(kids)
        max_k = max((len(k) for k in t_kids), default=0)
        self._t_state = np.array(t_state, dtype=np.intp)
        self._t_factor = np.array(t_factor)
        self._t_kids = np.full((len(t_kids), max_k), -1, dtype=np.intp)
        for row, kids in enumerate(t_kids):
            self._t_kids[row, : len(kids)] = kids

        c_gens, c_pre, c_kb, c_kids = [], [], [], []
        for (gens, pre, choices) in self._tops:
            for cpre, kb, kids in choices:
                c_gens.append(gens)
                c_pre.append(pre * cpre)
                c_kb.append(kb)
                c_kids.append(kids)
        max_k = max((len(k) for k in c_kids), default=0)
        self._c_gens = np.array(c_gens, dtype=np.intp)
        self._c_pre = np.array(c_pre)
        self._c_kb = np.array(c_kb)
        self._c_kids = np.full((len(c_kids), max_k), -1, dtype=np.intp)
        for row, kids in enumerate(c_kids):
            self._c_kids[row, : len(kids)] = kids

    def _value_tables(self, m_max):
        n = len(self._state_info)
        val = np.zeros((n, max(m_max, 0) + 1))
        if n == 0 or m_max < 0:
            return val
        childless = self._t_kids[:, 0] < 0 if self._t_kids.shape[1] else np.ones(
            len(self._t_state), dtype=bool
        )
        base = np.zeros(n)
        np.add.at(base, self._t_state[childless], self._t_factor[childless])
        val[:, 0] = base
        for m in range(1, m_max + 1):
            prev = val[:, m - 1]
            prod = np.ones(len(self._t_state))
            for col in range(self._t_kids.shape[1]):
                idx = self._t_kids[:, col]
                use = idx >= 0
                prod[use] *= prev[idx[use]]
            level = np.zeros(n)
            np.add.at(level, self._t_state, self._t_factor * prod)
            val[:, m] = level
        return val

    def evaluate_many(self, gammas):
        """Kernel values for several depth budgets sharing the level tables."""
        beta = self.beta
        m_needed = max((g - beta for g in gammas), default=-1)
        val = self._value_tables(m_needed)
        out = []
        for gamma in gammas:
            keep = self._c_gens <= gamma
            m0 = gamma - self._c_gens
            has_kids = (
                self._c_kids[:, 0] >= 0
                if self._c_kids.shape[1]
                else np.zeros(len(self._c_gens), dtype=bool)
            )
            keep &= ~has_kids | (m0 >= 1)
            terms = self._c_pre * self._c_kb
            if self._c_kids.shape[1]:
                m_idx = np.maximum(m0 - 1, 0)
                for col in range(self._c_kids.shape[1]):
                    idx = self._c_kids[:, col]
                    use = keep & (idx >= 0)
                    terms = terms.copy()
                    terms[use] *= val[idx[use], m_idx[use]]
            out.append(math.fsum(terms[keep]))
        return out

    def evaluate(self):
        return self.evaluate_many([self.cfg.walk.gamma])[0]


def _canonical_vertex_order(graph):
    """Relabel vertices by position/attribute/degree so the internal
    enumeration order does not depend on the input labelling."""
    n = graph.n_vertices
    keys = [
        (tuple(graph.positions[i]), tuple(graph.attributes[i]), graph.degree(i))
        for i in range(n)
    ]
    order = sorted(range(n), key=lambda i: keys[i])
    perm = [0] * n
    for new, old in enumerate(order):
        perm[old] = new
    return graph.relabel(perm)


def _graph_sort_key(graph):
    return (
        graph.n_vertices,
        graph.n_edges,
        graph.positions.tobytes(),
        graph.attributes.tobytes(),
        tuple(sorted(graph.edges)),
    )


def dp_kernel(graph_g, graph_h, cfg):
    """Tree-walk kernel via the dynamic program.

    Equals brute_force_kernel on all guarded instances.  Both graphs are
    brought to a canonical vertex order, and the pair itself to a
    canonical order, so the value is bitwise symmetric and invariant
    under vertex relabelings.
    """
    if graph_g.n_vertices == 0 or graph_h.n_vertices == 0:
        return 0.0
    a = _canonical_vertex_order(graph_g)
    b = _canonical_vertex_order(graph_h)
    if _graph_sort_key(b) < _graph_sort_key(a):
        a, b = b, a
    return _PairEngine(a, b, cfg).evaluate()


def dp_restricted_kernel(graph_g, graph_h, r0, s0, depth, cfg):
    """Kernel restricted to tree-walks whose root window is (r0, s0).

    r0 and s0 are subtree patterns of the two graphs in their original
    vertex ids; depth is the total generation budget.  Returns 0 when the
    patterns are not tree-equivalent.  With depth equal to the pattern's
    own generation count this reduces to the initialization value
    lam^|R| nu^leaves(R) k_A(A_R, B_S) k_B(K_R, L_S).
    """
    if r0.shape_code != s0.shape_code:
        return 0.0
    w = cfg.walk
    cfg_d = KernelConfig(
        walk=WalkParams(w.alpha, w.beta, depth, w.lam, w.nu),
        scales=cfg.scales,
        normalize=False,
        pattern_cap=cfg.pattern_cap,
        reduced_patterns=cfg.reduced_patterns,
    )
    engine = _PairEngine(graph_g, graph_h, cfg_d)
    key_g, key_h = r0.key(), s0.key()
    val = engine._value_tables(depth - w.beta)
    terms = []
    for (parents, gv, hv), (gens, pre, choices) in zip(
        engine._top_windows, engine._tops
    ):
        if gens > depth:
            continue
        if _side_key(parents, gv) != key_g or _side_key(parents, hv) != key_h:
            continue
        m0 = depth - gens
        for cpre, kb, kids in choices:
            if kids and m0 < 1:
                continue
            term = pre * cpre * kb
            for c in kids:
                term *= val[c, m0 - 1]
            terms.append(term)
    return math.fsum(terms)


# ---------------------------------------------------------------------------
# Gram matrices


@dataclass(frozen=True)
class GramMatrix:
    """Symmetric matrix of pairwise kernel values with item metadata."""

    matrix: np.ndarray
    ids: tuple
    labels: tuple

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("Gram matrix must be square")
        object.__setattr__(self, "matrix", m)

    @property
    def n(self):
        return self.matrix.shape[0]

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.T))[0])

    def check_psd(self, tol_factor=1e-8):
        """True when the minimum eigenvalue is >= -tol_factor * trace."""
        return self.min_eigenvalue() >= -tol_factor * float(np.trace(self.matrix))


_PAIR_GLOBALS = {}


def _pair_worker_init(graphs, cfg, gammas):
    _PAIR_GLOBALS["graphs"] = graphs
    _PAIR_GLOBALS["cfg"] = cfg
    _PAIR_GLOBALS["gammas"] = gammas
    _PAIR_GLOBALS["sides"] = {}


def _pair_worker(chunk):
    graphs = _PAIR_GLOBALS["graphs"]
    cfg = _PAIR_GLOBALS["cfg"]
    gammas = _PAIR_GLOBALS["gammas"]
    sides = _PAIR_GLOBALS["sides"]
    out = []
    for i, j in chunk:
        try:
            a, b = graphs[i], graphs[j]
            if _graph_sort_key(b) < _graph_sort_key(a):
                a, b = b, a
            for g in (a, b):
                if id(g) not in sides:
                    sides[id(g)] = _SideCache(g, cfg.scales)
            engine = _PairEngine(a, b, cfg, sides[id(a)], sides[id(b)])
            out.append((i, j, engine.evaluate_many(gammas)))
        except Exception as exc:  # noqa: BLE001 - reported with pair identity
            raise RuntimeError(f"kernel failed for pair ({i}, {j}): {exc}") from exc
    return out


def gram_matrix_multi(graphs, cfg, gammas, workers=1, labels=None, ids=None,
                      progress=None):
    """Gram matrices for several depth budgets sharing all other work.

    Returns a dict mapping each gamma to a GramMatrix.  Pairs are
    independent work units; worker count and scheduling do not affect
    the result.
    """
    graphs = list(graphs)
    if not graphs:
        raise ValueError("empty dataset")
    n = len(graphs)
    labels = tuple(labels) if labels is not None else tuple([0] * n)
    ids = tuple(ids) if ids is not None else tuple(range(n))
    gammas = list(gammas)
    canon = [_canonical_vertex_order(g) for g in graphs]
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    mats = {g: np.zeros((n, n)) for g in gammas}

    def consume(results):
        for i, j, vals in results:
            for g, v in zip(gammas, vals):
                mats[g][i, j] = v
                mats[g][j, i] = v

    if workers <= 1:
        _pair_worker_init(canon, cfg, gammas)
        try:
            done = 0
            for start in range(0, len(pairs), 512):
                chunk = pairs[start : start + 512]
                consume(_pair_worker(chunk))
                done += len(chunk)
                if progress:
                    progress(done, len(pairs))
        finally:
            _PAIR_GLOBALS.clear()
    else:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [pairs[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(
            max_workers=workers,
            initializer=_pair_worker_init,
            initargs=(canon, cfg, gammas),
        ) as pool:
            done = 0
            for results in pool.map(_pair_worker, chunks):
                consume(results)
                done += len(results)
                if progress:
                    progress(done, len(pairs))

    out = {}
    for g in gammas:
        mat = mats[g]
        if cfg.normalize:
            d = np.sqrt(np.diag(mat))
            if np.any(d <= 0):
                raise ValueError("normalization requires a positive diagonal")
            mat = mat / np.outer(d, d)
        out[g] = GramMatrix(mat, ids, labels)
    return out


def gram_matrix(graphs, cfg, workers=1, labels=None, ids=None, progress=None):
    """Gram matrix of dp_kernel over a dataset of graphs."""
    return gram_matrix_multi(
        graphs, cfg, [cfg.walk.gamma], workers, labels, ids, progress
    )[cfg.walk.gamma]


_FMT = "%.17g"


def save_gram(gram, path):
    """Write a Gram matrix in the `gram 1` text format."""
    lines = [f"gram 1 {gram.n}"]
    for row in gram.matrix:
        lines.append(" ".join(_FMT % x for x in row))
    lines.append("labels " + " ".join(str(l) for l in gram.labels))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_gram(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[0] != "gram" or head[1] != "1":
        raise ValueError(f"{path}: bad header {lines[0]!r}")
    n = int(head[2])
    if len(lines) != n + 2:
        raise ValueError(f"{path}: expected {n + 2} lines, found {len(lines)}")
    mat = np.array([[float(x) for x in lines[1 + i].split()] for i in range(n)])
    lab = lines[n + 1].split()
    if lab[0] != "labels" or len(lab) != n + 1:
        raise ValueError(f"{path}: bad labels line")
    labels = tuple(int(x) if x.lstrip("-").isdigit() else x for x in lab[1:])
    return GramMatrix(mat, tuple(range(n)), labels)
