"""Versioned binary model files and prediction/metric helpers."""

from __future__ import annotations

import math
import struct

import numpy as np

from .objectives import KINDS, ObjectiveSpec

MODEL_MAGIC = b"GLMMODEL"
MODEL_VERSION = 1
# magic[8] version:u32 kind:u32 lam:f64 n_examples:u64 n_features:u64
# n_coords:u64 dim:u64
_MODEL_HEAD = struct.Struct("<8sIIdQQQQ")


class ModelFormatError(ValueError):
    pass


def save_model(path, spec, alpha, v):
    """Write kind, lambda, alpha and the shared vector v (bit-exact)."""
    alpha = np.ascontiguousarray(alpha, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEAD.pack(MODEL_MAGIC, MODEL_VERSION,
                                  KINDS.index(spec.kind), spec.lam,
                                  spec.n_examples, spec.n_features,
                                  len(alpha), len(v)))
        fh.write(alpha.tobytes())
        fh.write(v.tobytes())


def load_model(path):
    """Read a model file back into (spec-like info, alpha, v)."""
    with open(path, "rb") as fh:
        head = fh.read(_MODEL_HEAD.size)
        if len(head) < _MODEL_HEAD.size:
            raise ModelFormatError("truncated model header")
        magic, version, kind_id, lam, n_ex, n_ft, n, d = _MODEL_HEAD.unpack(head)
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"bad magic {magic!r}")
        if version != MODEL_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        buf = fh.read(8 * (n + d))
        if len(buf) < 8 * (n + d):
            raise ModelFormatError("truncated model body")
    alpha = np.frombuffer(buf, dtype="<f8", count=n).copy()
    v = np.frombuffer(buf, dtype="<f8", count=d, offset=8 * n).copy()
    kind = KINDS[kind_id]
    return {"kind": kind, "lam": lam, "n_examples": n_ex, "n_features": n_ft,
            "alpha": alpha, "v": v}


def primal_weights(model):
    """Feature weights: w = v / lambda for dual kinds, alpha for primal."""
    if model["kind"].startswith("dual_"):
        return model["v"] / model["lam"]
    return model["alpha"]


def decision_scores(example_matrix, w):
    """x^T w per example for an example-major matrix (rows = features).

    Test files may use fewer features than the model (implicit zeros); more
    features than the model is a dimension mismatch.
    """
    n_model = len(w)
    if example_matrix.n_rows > n_model:
        raise ValueError(
            f"test data has {example_matrix.n_rows} features, model has {n_model}")
    # rmatvec over example columns = per-example dot products
    return example_matrix.rmatvec(w[:example_matrix.n_rows])


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def normalize_binary_labels(y):
    """Map {-1,+1} or {0,1} labels onto {0,1}; reject anything else."""
    vals = np.unique(y)
    if not np.all(np.isin(vals, (-1.0, 0.0, 1.0))):
        raise ValueError(f"labels must be binary (+-1 or 0/1), got {vals}")
    if -1.0 in vals and 0.0 in vals:
        raise ValueError("labels mix -1 and 0 conventions")
    return np.where(y > 0.0, 1.0, 0.0)


def log_loss(prob, y01):
    """-mean[y log p + (1-y) log(1-p)] with probability clipping at 1e-15."""
    p = np.clip(prob, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(y01 * np.log(p) + (1.0 - y01) * np.log(1.0 - p)))


def accuracy(prob, y01):
    return float(np.mean((prob >= 0.5) == (y01 > 0.5)))


def mean_squared_error(pred, y):
    d = np.asarray(pred) - np.asarray(y)
    return float(np.mean(d * d))
