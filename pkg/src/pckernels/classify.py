"""Kernel SVM classification and the evaluation protocol: one-vs-one
2-norm SVMs trained by pairwise coordinate ascent, nested 5-fold
cross-validation over a parameter grid, and a structure-blind RBF
baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SvmModel",
    "CvPlan",
    "LabelStore",
    "svm_train",
    "svm_decision",
    "ovo_train",
    "ovo_predict",
    "stratified_folds",
    "nested_cv",
    "rbf_baseline_gram",
]


@dataclass
class SvmModel:
    """Solution of one binary 2-norm SVM.

    alpha are the dual coefficients over the training items (box-free,
    nonnegative), bias the intercept of the decision function
    f(x) = sum_i alpha_i y_i k(x_i, x) + bias.
    """

    alpha: np.ndarray
    bias: float
    C: float
    labels: np.ndarray
    train_indices: np.ndarray
    kkt_residual: float
    class_pair: tuple = (1, -1)

    @property
    def support(self):
        return np.nonzero(self.alpha > 0)[0]


def svm_train(gram, y, C, tol=1e-6, max_iter=100000, train_indices=None,
              class_pair=(1, -1), validate=True):
    """2-norm SVM dual solved as a hard-margin problem on K + I/(2C).

    gram is the training-block kernel matrix, y the +/-1 labels.  Uses
    max-violating-pair coordinate ascent; the returned model's
    kkt_residual is the final violation gap.
    """
    gram = np.asarray(gram, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if gram.shape != (n, n):
        raise ValueError("gram block and label vector sizes differ")
    if not (np.any(y > 0) and np.any(y < 0)):
        raise ValueError("training labels must contain both classes")
    if C <= 0:
        raise ValueError("C must be > 0")
    if validate:
        w = np.linalg.eigvalsh(0.5 * (gram + gram.T))
        if w[0] < -1e-8 * max(np.trace(gram), 1.0):
            raise ValueError("gram matrix is not PSD within tolerance")

    Kt = gram + np.eye(n) / (2.0 * C)
    Q = (y[:, None] * y[None, :]) * Kt
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a Q a - sum(a)
    residual = np.inf
    for _ in range(max_iter):
        viol = -y * grad
        up = np.where(y > 0, True, alpha > 0)
        low = np.where(y < 0, True, alpha > 0)
        i = int(np.argmax(np.where(up, viol, -np.inf)))
        j = int(np.argmin(np.where(low, viol, np.inf)))
        residual = viol[i] - viol[j]
        if residual <= tol:
            break
        eta = Kt[i, i] + Kt[j, j] - 2.0 * Kt[i, j]
        step = residual / max(eta, 1e-300)
        if y[i] < 0:
            step = min(step, alpha[i])
        if y[j] > 0:
            step = min(step, alpha[j])
        alpha[i] += y[i] * step
        alpha[j] -= y[j] * step
        grad += step * (y[i] * Q[:, i] - y[j] * Q[:, j])

    viol = -y * grad
    up = np.where(y > 0, True, alpha > 0)
    low = np.where(y < 0, True, alpha > 0)
    m_up = float(np.max(np.where(up, viol, -np.inf)))
    m_low = float(np.min(np.where(low, viol, np.inf)))
    bias = 0.5 * (m_up + m_low)
    if train_indices is None:
        train_indices = np.arange(n)
    return SvmModel(
        alpha=alpha,
        bias=bias,
        C=C,
        labels=y,
        train_indices=np.asarray(train_indices),
        kkt_residual=float(max(residual, m_up - m_low)),
        class_pair=class_pair,
    )


def svm_dual_objective(model, gram):
    """Value of the maximized dual sum(a) - 1/2 a^T Q a on the ridged kernel."""
    Kt = gram + np.eye(len(model.alpha)) / (2.0 * model.C)
    ya = model.alpha * model.labels
    return float(np.sum(model.alpha) - 0.5 * ya @ Kt @ ya)


def svm_decision(model, kernel_columns):
    """Decision values from kernel columns k(x_train, x_test)."""
    cols = np.asarray(kernel_columns, dtype=np.float64)
    return (model.alpha * model.labels) @ cols + model.bias


def ovo_train(gram, labels, C, tol=1e-6, validate=False):
    """One binary SVM per unordered class pair.

    gram is the full training Gram matrix; labels may be any hashable
    class ids.  For the pair (a, b) with a < b, class a maps to +1.
    """
    labels = np.asarray(labels)
    classes = sorted(set(labels.tolist()))
    models = {}
    for ai in range(len(classes)):
        for bi in range(ai + 1, len(classes)):
            a, b = classes[ai], classes[bi]
            mask = (labels == a) | (labels == b)
            idx = np.nonzero(mask)[0]
            y = np.where(labels[idx] == a, 1.0, -1.0)
            sub = gram[np.ix_(idx, idx)]
            models[(a, b)] = svm_train(
                sub, y, C, tol=tol, train_indices=idx, class_pair=(a, b),
                validate=validate,
            )
    return models


def ovo_predict(models, kernel_columns):
    """Majority vote over pairwise decisions for each test column.

    kernel_columns has shape (n_train_total, n_test): kernel values
    between all training items (the Gram rows the models index into) and
    the test items.  Ties break by the highest summed decision margin,
    then by the lowest class id.
    """
    cols = np.asarray(kernel_columns, dtype=np.float64)
    n_test = cols.shape[1]
    classes = sorted({c for pair in models for c in pair})
    votes = {c: np.zeros(n_test) for c in classes}
    margin = {c: np.zeros(n_test) for c in classes}
    for (a, b), model in sorted(models.items()):
        dec = svm_decision(model, cols[model.train_indices, :])
        win_a = dec >= 0
        votes[a] += win_a
        votes[b] += ~win_a
        margin[a] += dec
        margin[b] -= dec
    out = []
    for t in range(n_test):
        ranked = sorted(
            classes, key=lambda c: (-votes[c][t], -margin[c][t], c)
        )
        out.append(ranked[0])
    return np.array(out)


@dataclass(frozen=True)
class CvPlan:
    """Nested cross-validation layout: 5 outer and 5 inner stratified
    folds by default, everything seeded for bit reproducibility."""

    outer_folds: int = 5
    inner_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.outer_folds < 2 or self.inner_folds < 2:
            raise ValueError("need at least 2 folds at both levels")


class LabelStore:
    """Label access wrapper that records which indices were read when.

    The phase attribute tags every read; tests use the log to audit that
    model selection never touches test-fold labels.
    """

    def __init__(self, labels):
        self._labels = np.asarray(labels)
        self.phase = "init"
        self.log = []

    def __len__(self):
        return len(self._labels)

    def take(self, indices):
        indices = np.asarray(indices)
        self.log.append((self.phase, tuple(int(i) for i in indices)))
        return self._labels[indices]


def stratified_folds(labels, n_folds, seed):
    """Class-stratified folds: seeded shuffle per class, round-robin deal."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(n_folds)]
    for cls in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == cls)[0]
        if len(idx) < n_folds:
            raise ValueError(
                f"class {cls!r} has {len(idx)} items, fewer than {n_folds} folds"
            )
        idx = idx[rng.permutation(len(idx))]
        for k, item in enumerate(idx):
            folds[k % n_folds].append(int(item))
    return [np.array(sorted(f)) for f in folds]


def _error_rate(predicted, truth):
    predicted = np.asarray(predicted)
    truth = np.asarray(truth)
    return float(np.mean(predicted != truth))


def nested_cv(gram_provider, param_points, c_grid, store, plan):
    """Outer/inner cross-validated error of the one-vs-one kernel SVM.

    gram_provider maps a parameter point to a full-dataset GramMatrix
    (kernel values never involve labels, so precomputing them leaks
    nothing).  For every outer fold, the inner folds select the
    (parameter point, C) pair with the lowest mean validation error over
    the training fold only; the winner retrains on the whole training
    fold and is scored once on the held-out fold.

    Returns (per-fold errors, mean, std, per-fold selections).
    """
    if not param_points or not c_grid:
        raise ValueError("empty parameter grid")
    store.phase = "select"
    all_labels_idx = np.arange(len(store))
    outer = stratified_folds(store.take(all_labels_idx), plan.outer_folds, plan.seed)
    grams = {p: gram_provider(p) for p in param_points}

    fold_errors = []
    selections = []
    for f, test_idx in enumerate(outer):
        store.phase = "select"
        train_idx = np.array(
            sorted(set(range(len(store))) - set(test_idx.tolist()))
        )
        y_train = store.take(train_idx)
        inner = stratified_folds(y_train, plan.inner_folds, plan.seed + 1 + f)
        best = None
        for p in param_points:
            mat = grams[p].matrix
            for C in c_grid:
                errs = []
                for val_local in inner:
                    fit_local = np.array(
                        sorted(set(range(len(train_idx))) - set(val_local.tolist()))
                    )
                    fit_idx = train_idx[fit_local]
                    val_idx = train_idx[val_local]
                    models = ovo_train(
                        mat[np.ix_(fit_idx, fit_idx)], y_train[fit_local], C
                    )
                    # model train_indices are local to fit_idx
                    cols = mat[np.ix_(fit_idx, val_idx)]
                    pred = ovo_predict(models, cols)
                    errs.append(_error_rate(pred, y_train[val_local]))
                score = float(np.mean(errs))
                key = (score, param_points.index(p), list(c_grid).index(C))
                if best is None or key < best[0]:
                    best = (key, p, C)
        _, p_star, c_star = best
        mat = grams[p_star].matrix
        models = ovo_train(mat[np.ix_(train_idx, train_idx)], y_train, c_star)
        cols = mat[np.ix_(train_idx, test_idx)]
        pred = ovo_predict(models, cols)
        store.phase = "score"
        fold_errors.append(_error_rate(pred, store.take(test_idx)))
        selections.append({"params": p_star, "C": c_star})

    errors = np.array(fold_errors)
    return errors, float(np.mean(errors)), float(np.std(errors, ddof=1)), selections


def rbf_baseline_gram(vectors, sigma):
    """Gaussian-RBF Gram matrix exp(-||u - v||^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    X = np.asarray(vectors, dtype=np.float64)
    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    return np.exp(-sq / (2.0 * sigma**2))
