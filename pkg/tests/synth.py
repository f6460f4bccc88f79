"""Deterministic synthetic instances shared by the test modules."""

from __future__ import annotations

import numpy as np

from hierglm.data import SparseColumnMatrix
from hierglm.objectives import ObjectiveSpec


def sparse_columns(n_rows, n_cols, nnz_per_col, rng, normalize=True,
                   value_scale=1.0):
    """Random sparse matrix with sorted unique row indices per column."""
    indptr = [0]
    rows = []
    vals = []
    for _ in range(n_cols):
        k = min(n_rows, nnz_per_col)
        idx = np.sort(rng.choice(n_rows, size=k, replace=False))
        val = rng.standard_normal(k) * value_scale
        if normalize:
            nrm = np.linalg.norm(val)
            if nrm > 0:
                val = val / nrm
        rows.extend(idx.tolist())
        vals.extend(val.tolist())
        indptr.append(len(rows))
    return SparseColumnMatrix(n_rows, np.asarray(indptr), np.asarray(rows),
                              np.asarray(vals))


def dual_instance(kind, n_examples, n_features, nnz, lam, seed,
                  label_bias=0.0):
    """Label-folded dual classification instance (columns = y_i x_i).

    Returns (matrix, spec, labels_pm1).
    """
    rng = np.random.default_rng(seed)
    x = sparse_columns(n_features, n_examples, nnz, rng)
    w_true = rng.standard_normal(n_features)
    scores = x.rmatvec(w_true) + label_bias
    y = np.where(scores + 0.3 * rng.standard_normal(n_examples) >= 0, 1.0, -1.0)
    folded = x.scale_columns(y)
    matrix = SparseColumnMatrix(folded.n_rows, folded.indptr, folded.rows,
                                folded.vals, labels=y, validate=False)
    spec = ObjectiveSpec(kind, lam, n_examples=n_examples,
                         n_features=n_features)
    return matrix, spec, y


def primal_instance(kind, n_examples, n_features, nnz, lam, seed,
                    noise=0.1):
    """Feature-major regression instance (columns = features, target b)."""
    rng = np.random.default_rng(seed)
    features = sparse_columns(n_examples, n_features, nnz, rng)
    coef = rng.standard_normal(n_features)
    coef[rng.random(n_features) < 0.5] = 0.0
    b = features.matvec(coef) + noise * rng.standard_normal(n_examples)
    spec = ObjectiveSpec(kind, lam, n_examples=n_examples,
                         n_features=n_features, target=b)
    return features, spec, b


def write_svmlight_file(path, n_examples, n_features, nnz, seed,
                        separable=False):
    """Random binary classification dataset on disk; returns the labels."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(n_features)
    lines = []
    labels = []
    for _ in range(n_examples):
        k = min(n_features, nnz)
        idx = np.sort(rng.choice(n_features, size=k, replace=False))
        val = rng.standard_normal(k)
        val /= max(np.linalg.norm(val), 1e-12)
        score = float(val @ w[idx])
        if separable:
            y = 1.0 if score >= 0 else -1.0
        else:
            y = 1.0 if score + 0.3 * rng.standard_normal() >= 0 else -1.0
        labels.append(y)
        feats = " ".join("%d:%.17g" % (i + 1, v) for i, v in zip(idx, val))
        lines.append("%+g %s" % (y, feats))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return np.asarray(labels)
