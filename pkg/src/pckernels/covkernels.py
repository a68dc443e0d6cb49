"""Kernels between positive-definite matrices and their factorizations
over decomposable graphical models.

All determinant work happens in log space via Cholesky factors; a failed
Cholesky factorization is the operational definition of "not positive
definite".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NotPositiveDefiniteError",
    "KernelScaleParams",
    "DecomposableModel",
    "position_kernel_matrix",
    "attribute_kernel",
    "bhattacharyya",
    "conditional_covariance",
    "project_onto_model",
    "logdet_projection",
    "logdet_projection_rooted",
    "kernel_b0_model",
    "kernel_b_conditional",
    "kernel_b_model",
]

# Floor for the denominator determinant in conditional kernels; deep
# clique products otherwise underflow to a zero divide.
_DET_FLOOR_LOG = np.log(1e-300)

_SYM_RTOL = 1e-12


class NotPositiveDefiniteError(ValueError):
    """A matrix required to be positive definite failed its Cholesky."""


@dataclass(frozen=True)
class KernelScaleParams:
    """Scale parameters of the base kernels on positions and attributes.

    tau: bandwidth of the squared-exponential kernel on positions.
    kappa: ridge weight added on the diagonal of the position kernel matrix.
    upsilon: bandwidth of the squared-exponential kernel on attributes.
    """

    tau: float = 0.05
    kappa: float = 0.001
    upsilon: float = 0.05

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.kappa <= 0:
            raise ValueError("kappa must be > 0")
        if self.upsilon < 0:
            raise ValueError("upsilon must be >= 0")


def _symmetrize(M):
    return 0.5 * (M + M.T)


def _check_symmetric(M, what="matrix"):
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{what} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if M.size and float(np.abs(M - M.T).max()) > _SYM_RTOL * scale:
        raise ValueError(f"{what} is not symmetric to within {_SYM_RTOL} relative")


def cholesky_pd(M, what="matrix"):
    """Cholesky factor of a symmetric matrix; raises NotPositiveDefiniteError."""
    M = np.asarray(M, dtype=np.float64)
    _check_symmetric(M, what)
    try:
        return np.linalg.cholesky(_symmetrize(M))
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc


def logdet_pd(M, what="matrix"):
    """log-determinant of a positive-definite matrix via its Cholesky factor."""
    L = cholesky_pd(M, what)
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def position_kernel_matrix(graph, params):
    """Full kernel matrix on vertex positions.

    Entries exp(-tau * ||x_i - x_j||^2) plus kappa on the diagonal.  Raises
    NotPositiveDefiniteError when the result fails its Cholesky, which
    signals that kappa is too small for the point configuration.
    """
    if graph.n_vertices == 0:
        raise ValueError("graph has no vertices")
    x = graph.positions
    sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-params.tau * sq) + params.kappa * np.eye(len(x))
    cholesky_pd(K, "position kernel matrix")
    return K


def attribute_kernel(a, b, upsilon):
    """Squared-exponential kernel exp(-upsilon * ||a - b||^2) on attributes."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"attribute dimensions differ: {a.shape} vs {b.shape}")
    d = a - b
    return float(np.exp(-upsilon * float(d @ d)))


def bhattacharyya(K, L):
    """(Squared) Bhattacharyya kernel |K|^1/2 |L|^1/2 |(K+L)/2|^-1.

    Symmetric, valued in (0, 1], equal to 1 iff K == L.
    """
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape:
        raise ValueError(f"size mismatch: {K.shape} vs {L.shape}")
    ld_k = logdet_pd(K, "K")
    ld_l = logdet_pd(L, "L")
    ld_m = logdet_pd(0.5 * (K + L), "(K+L)/2")
    return float(np.exp(0.5 * ld_k + 0.5 * ld_l - ld_m))


def _as_index_list(C):
    return [int(c) for c in C]


def conditional_covariance(K, C, P):
    """Schur complement K_CC - K_CP K_PP^-1 K_PC for disjoint index sets."""
    K = np.asarray(K, dtype=np.float64)
    C = _as_index_list(C)
    P = _as_index_list(P)
    if set(C) & set(P):
        raise ValueError("conditioned and conditioning index sets overlap")
    n = K.shape[0]
    for idx in (*C, *P):
        if not 0 <= idx < n:
            raise ValueError(f"index {idx} out of range for size {n}")
    Kcc = K[np.ix_(C, C)]
    if not P:
        return Kcc
    Kcp = K[np.ix_(C, P)]
    Lp = cholesky_pd(K[np.ix_(P, P)], "conditioning block")
    # K_CP K_PP^-1 K_PC through triangular solves
    W = np.linalg.solve(Lp, Kcp.T)
    return _symmetrize(Kcc - W.T @ W)


@dataclass(frozen=True)
class DecomposableModel:
    """Triangulated graphical model given by its junction tree.

    cliques[i] is a vertex subset; parent[i] is the index of the parent
    clique in the rooted junction tree (-1 for the root).  Separators are
    the intersections with the parent clique.
    """

    n: int
    cliques: tuple = ()
    parent: tuple = ()

    def __init__(self, n, cliques, parent):
        object.__setattr__(self, "n", int(n))
        object.__setattr__(
            self, "cliques", tuple(tuple(sorted(int(v) for v in c)) for c in cliques)
        )
        object.__setattr__(self, "parent", tuple(int(p) for p in parent))
        self._validate()

    def _validate(self):
        if len(self.cliques) != len(self.parent):
            raise ValueError("cliques and parent lists differ in length")
        if not self.cliques:
            raise ValueError("model needs at least one clique")
        covered = set()
        for c in self.cliques:
            if not c:
                raise ValueError("empty clique")
            for v in c:
                if not 0 <= v < self.n:
                    raise ValueError(f"clique vertex {v} out of range")
            covered.update(c)
        if covered != set(range(self.n)):
            raise ValueError("cliques do not cover all vertices")
        roots = [i for i, p in enumerate(self.parent) if p < 0]
        if len(roots) != 1:
            raise ValueError("junction tree must have exactly one root")
        for i, p in enumerate(self.parent):
            if p >= 0 and not 0 <= p < len(self.cliques):
                raise ValueError(f"parent index {p} out of range")
        # acyclicity of the parent map
        for i in range(len(self.cliques)):
            seen, j = set(), i
            while j >= 0:
                if j in seen:
                    raise ValueError("cycle in junction-tree parent map")
                seen.add(j)
                j = self.parent[j]
        # running intersection: cliques containing any vertex form a subtree
        for v in covered:
            holders = {i for i, c in enumerate(self.cliques) if v in c}
            root_hits = 0
            for i in holders:
                p = self.parent[i]
                if p < 0 or p not in holders:
                    root_hits += 1
            if root_hits != 1:
                raise ValueError(
                    f"running-intersection property violated at vertex {v}"
                )

    @property
    def root(self):
        return self.parent.index(-1)

    def separator(self, i):
        """Separator of clique i (empty tuple for the root)."""
        p = self.parent[i]
        if p < 0:
            return ()
        return tuple(sorted(set(self.cliques[i]) & set(self.cliques[p])))

    def residual(self, i):
        """Vertices of clique i not shared with its parent clique."""
        return tuple(sorted(set(self.cliques[i]) - set(self.separator(i))))

    @property
    def separators(self):
        """All non-root separators, aligned with non-root cliques."""
        return tuple(
            self.separator(i) for i in range(len(self.cliques)) if self.parent[i] >= 0
        )

    def model_edges(self):
        """Undirected edges of the underlying triangulated graph."""
        edges = set()
        for c in self.cliques:
            for a in c:
                for b in c:
                    if a < b:
                        edges.add((a, b))
        return edges

    @staticmethod
    def complete(n):
        return DecomposableModel(n, [tuple(range(n))], [-1])

    @staticmethod
    def edgeless(n):
        cliques = [(i,) for i in range(n)]
        # star the singleton junction tree at clique 0 (all separators empty)
        return DecomposableModel(n, cliques, [-1] + [0] * (n - 1))

    @staticmethod
    def chain(n):
        """Markov chain 0-1-...-(n-1) rooted at the first edge clique."""
        if n == 1:
            return DecomposableModel(1, [(0,)], [-1])
        cliques = [(i, i + 1) for i in range(n - 1)]
        return DecomposableModel(n, cliques, [-1] + list(range(n - 2)))


def project_onto_model(K, Q):
    """Closest covariance factorizing in Q (Kullback-Leibler projection).

    Closed form for decomposable models: the precision matrix accumulates
    zero-padded clique inverse blocks minus separator inverse blocks.  The
    result keeps every clique marginal of K and has zero precision entries
    outside the model's edges.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.shape[0] != Q.n:
        raise ValueError("model size does not match matrix size")
    cholesky_pd(K, "input matrix")
    prec = np.zeros_like(K)
    for i, c in enumerate(Q.cliques):
        idx = np.array(c, dtype=np.intp)
        block = K[np.ix_(idx, idx)]
        Lc = cholesky_pd(block, "clique block")
        inv = np.linalg.solve(Lc.T, np.linalg.solve(Lc, np.eye(len(idx))))
        prec[np.ix_(idx, idx)] += inv
        sep = Q.separator(i)
        if sep:
            sidx = np.array(sep, dtype=np.intp)
            sblock = K[np.ix_(sidx, sidx)]
            Ls = cholesky_pd(sblock, "separator block")
            sinv = np.linalg.solve(Ls.T, np.linalg.solve(Ls, np.eye(len(sidx))))
            prec[np.ix_(sidx, sidx)] -= sinv
    Lp = cholesky_pd(prec, "projected precision")
    out = np.linalg.solve(Lp.T, np.linalg.solve(Lp, np.eye(Q.n)))
    return _symmetrize(out)


def logdet_projection(K, Q):
    """log |projection of K onto Q| from clique and separator blocks."""
    K = np.asarray(K, dtype=np.float64)
    if K.shape[0] != Q.n:
        raise ValueError("model size does not match matrix size")
    total = 0.0
    for i, c in enumerate(Q.cliques):
        idx = list(c)
        total += logdet_pd(K[np.ix_(idx, idx)], "clique block")
        sep = Q.separator(i)
        if sep:
            sidx = list(sep)
            total -= logdet_pd(K[np.ix_(sidx, sidx)], "separator block")
    return total


def logdet_projection_rooted(K, Q):
    """Same value as logdet_projection, accumulated along the rooted tree.

    The root clique contributes log |K_root|; every other clique
    contributes the log-determinant of the conditional covariance of its
    residual vertices given its separator.
    """
    K = np.asarray(K, dtype=np.float64)
    if K.shape[0] != Q.n:
        raise ValueError("model size does not match matrix size")
    total = 0.0
    for i, c in enumerate(Q.cliques):
        if Q.parent[i] < 0:
            idx = list(c)
            total += logdet_pd(K[np.ix_(idx, idx)], "root clique block")
        else:
            cond = conditional_covariance(K, Q.residual(i), Q.separator(i))
            total += logdet_pd(cond, "conditional block")
    return total


def kernel_b0_model(K, L, Q):
    """Clique/separator ratio of Bhattacharyya kernels.

    Product over cliques of bhattacharyya on the clique blocks divided by
    the same product over separators.  Positive definite as a kernel only
    when all separator marginals equal the identity; exposed mainly for
    testing that property.
    """
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape:
        raise ValueError("size mismatch between K and L")
    log_total = 0.0
    for i, c in enumerate(Q.cliques):
        idx = list(c)
        log_total += np.log(bhattacharyya(K[np.ix_(idx, idx)], L[np.ix_(idx, idx)]))
        sep = Q.separator(i)
        if sep:
            sidx = list(sep)
            log_total -= np.log(
                bhattacharyya(K[np.ix_(sidx, sidx)], L[np.ix_(sidx, sidx)])
            )
    return float(np.exp(log_total))


def _log_kernel_b_conditional(K, L, C, P):
    C = _as_index_list(C)
    P = _as_index_list(P)
    if not P:
        idx = C
        ld_k = logdet_pd(K[np.ix_(idx, idx)], "K block")
        ld_l = logdet_pd(L[np.ix_(idx, idx)], "L block")
        ld_m = logdet_pd(
            0.5 * (K[np.ix_(idx, idx)] + L[np.ix_(idx, idx)]), "mean block"
        )
        return 0.5 * ld_k + 0.5 * ld_l - ld_m
    if set(C) & set(P):
        raise ValueError("conditioned and conditioning index sets overlap")
    Kc = conditional_covariance(K, C, P)
    Lc = conditional_covariance(L, C, P)
    # regression coefficients K_CP K_P^-1 and L_CP L_P^-1
    Mk = np.linalg.solve(K[np.ix_(P, P)], K[np.ix_(P, C)]).T
    Ml = np.linalg.solve(L[np.ix_(P, P)], L[np.ix_(P, C)]).T
    D = Mk - Ml
    denom = 0.5 * Kc + 0.5 * Lc + 0.25 * (D @ D.T)
    ld_num = 0.5 * logdet_pd(Kc, "K conditional") + 0.5 * logdet_pd(
        Lc, "L conditional"
    )
    ld_den = max(logdet_pd(denom, "conditional denominator"), _DET_FLOOR_LOG)
    return ld_num - ld_den


def kernel_b_conditional(K, L, C, P):
    """Bhattacharyya kernel between conditional Gaussians of C given P.

    Uses the joint covariances obtained by putting an identity-covariance
    prior on the conditioning variables, which keeps the factor a positive
    kernel.  P empty reduces to the plain Bhattacharyya kernel on the C
    blocks.
    """
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape:
        raise ValueError("size mismatch between K and L")
    return float(np.exp(_log_kernel_b_conditional(K, L, C, P)))


def kernel_b_model(K, L, Q):
    """Kernel between covariance matrices factorized along a rooted model.

    The root clique contributes a plain Bhattacharyya factor; every other
    clique contributes kernel_b_conditional of its residual given its
    separator.  Factors accumulate in log space.  Positive-definite kernel
    on all covariance matrices (checked empirically by randomized Gram
    eigenvalue tests).
    """
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    if K.shape != L.shape:
        raise ValueError("size mismatch between K and L")
    log_total = 0.0
    for i, c in enumerate(Q.cliques):
        if Q.parent[i] < 0:
            log_total += _log_kernel_b_conditional(K, L, list(c), [])
        else:
            log_total += _log_kernel_b_conditional(
                K, L, list(Q.residual(i)), list(Q.separator(i))
            )
    return float(np.exp(log_total))
