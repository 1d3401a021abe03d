"""Label propagation over a kNN cosine-similarity graph of patch embeddings.

The graph uses affinities ``max(cos, 0) ** gamma`` on the k nearest neighbors
of every node, symmetrized with an element-wise maximum and normalized as
``D^-1/2 W D^-1/2``. Class scores solve ``(I - alpha * W_norm) Z = Y`` with
conjugate gradient, one column per class.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import (
    DegenerateInput,
    DuplicateId,
    InvariantViolation,
    IoError,
    NonConvergence,
    ParseError,
)

BINARY_MAGIC = b"EMB1"
UNLABELED = "-"


@dataclass(frozen=True)
class PropagationConfig:
    k: int = 50
    affinity_gamma: float = 3.0
    alpha: float = 0.99
    cg_tol: float = 1e-6
    cg_max_iter: int = 200

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise InvariantViolation(f"k must be a positive integer, got {self.k}")
        if not 0 < self.alpha < 1:
            raise InvariantViolation(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.cg_tol > 0:
            raise InvariantViolation(f"cg_tol must be > 0, got {self.cg_tol}")
        if not self.affinity_gamma > 0:
            raise InvariantViolation(f"affinity_gamma must be > 0, got {self.affinity_gamma}")
        if int(self.cg_max_iter) != self.cg_max_iter or self.cg_max_iter < 1:
            raise InvariantViolation(f"cg_max_iter must be a positive integer, got {self.cg_max_iter}")


class EmbeddingTable:
    """Patch ids, unit-normalized embedding rows and optional species labels."""

    def __init__(self, ids, vectors, labels=None):
        ids = [str(i) for i in ids]
        vec = np.array(vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] != len(ids):
            raise InvariantViolation(f"expected {len(ids)} embedding rows, got array of shape {vec.shape}")
        if not np.isfinite(vec).all():
            raise InvariantViolation("embeddings contain non-finite values")
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise DuplicateId(f"duplicate embedding id {dup!r}")
        norms = np.linalg.norm(vec, axis=1)
        if len(ids) and norms.min() == 0:
            raise InvariantViolation(f"embedding {ids[int(np.argmin(norms))]!r} is the zero vector")
        if labels is None:
            labels = [None] * len(ids)
        labels = [None if (l is None or l == "" or l == UNLABELED) else str(l) for l in labels]
        if len(labels) != len(ids):
            raise InvariantViolation("labels and ids differ in length")
        self.ids = ids
        self.vectors = vec / norms[:, None] if len(ids) else vec
        self.labels = labels

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def classes(self) -> List[str]:
        return sorted({l for l in self.labels if l is not None})

    def label_matrix(self) -> Tuple[np.ndarray, List[str]]:
        """One-hot ``Y`` (zero rows for unlabeled ids) and its column classes."""
        classes = self.classes
        col = {c: k for k, c in enumerate(classes)}
        y = np.zeros((len(self), len(classes)))
        for i, l in enumerate(self.labels):
            if l is not None:
                y[i, col[l]] = 1.0
        return y, classes


@dataclass
class PseudoLabelSet:
    """Pseudo-labels for unlabeled ids: ``labels[id] = (species, certainty)``."""

    labels: Dict[str, Tuple[str, float]] = field(default_factory=dict)
    class_weights: Dict[str, float] = field(default_factory=dict)

    def weight(self, patch_id):
        species, certainty = self.labels[patch_id]
        return certainty * self.class_weights[species]


def affinity_matrix(emb: EmbeddingTable, cfg: PropagationConfig = PropagationConfig(), chunk=1024):
    """Symmetric kNN affinity ``W`` before normalization (CSR)."""
    n = len(emb)
    if n < 2:
        raise DegenerateInput(f"graph construction needs at least 2 embeddings, got {n}")
    k = min(cfg.k, n - 1)
    v = emb.vectors
    rows, cols, vals = [], [], []
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        sims = v[start:stop] @ v.T
        idx = np.arange(start, stop)
        sims[idx - start, idx] = -np.inf
        # stable sort: equal similarities keep ascending column order
        nn = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        s = np.take_along_axis(sims, nn, axis=1)
        rows.append(np.repeat(idx, k))
        cols.append(nn.ravel())
        vals.append(np.clip(s, 0.0, 1.0).ravel() ** cfg.affinity_gamma)
    w = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    w = w.maximum(w.T).tocsr()
    w.eliminate_zeros()
    w.sort_indices()
    return w


def normalize_affinity(w):
    """``D^-1/2 W D^-1/2``; nodes without edges keep all-zero rows."""
    w = sp.csr_matrix(w, dtype=np.float64)
    deg = np.asarray(w.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv)
    out = (d @ w @ d).tocsr()
    out.sort_indices()
    return out


def build_graph(emb: EmbeddingTable, cfg: PropagationConfig = PropagationConfig()):
    return normalize_affinity(affinity_matrix(emb, cfg))


def conjugate_gradient(apply_a, b, tol, max_iter):
    """Solve ``A X = B`` column by column for SPD ``A`` given as a matvec.

    Each column runs its own CG recurrence; a column stops updating once its
    residual 2-norm drops to ``tol``. Returns ``(X, residual_norms, iters)``.
    Raises :class:`NonConvergence` when some column is still above ``tol``
    after ``max_iter`` iterations.
    """
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = np.einsum("ij,ij->j", r, r)
    tol2 = tol * tol
    it = 0
    while True:
        active = rs > tol2
        if not active.any():
            break
        if it >= max_iter:
            res = float(np.sqrt(rs.max()))
            raise NonConvergence(
                f"conjugate gradient did not reach residual {tol:g} in {max_iter} iterations "
                f"(residual {res:.3g})",
                res,
            )
        ap = apply_a(p[:, active])
        pap = np.einsum("ij,ij->j", p[:, active], ap)
        step = rs[active] / pap
        x[:, active] += step * p[:, active]
        r[:, active] -= step * ap
        rs_new = np.einsum("ij,ij->j", r[:, active], r[:, active])
        p[:, active] = r[:, active] + (rs_new / rs[active]) * p[:, active]
        rs[active] = rs_new
        it += 1
    res = np.sqrt(rs)
    if squeeze:
        return x[:, 0], res, it
    return x, res, it


def diffuse(w_norm, y, cfg: PropagationConfig = PropagationConfig()):
    """Class score matrix ``Z`` solving ``(I - alpha W_norm) Z = Y``.

    The smallest eigenvalue of the system is at least ``1 - alpha``, so CG is
    run until every residual is below ``(1 - alpha) * cg_tol``; this bounds
    the 2-norm error of each column of ``Z`` (and the residual) by ``cg_tol``.
    """
    y = np.asarray(y, dtype=np.float64)
    w_norm = sp.csr_matrix(w_norm)
    if y.ndim != 2 or y.shape[0] != w_norm.shape[0]:
        raise InvariantViolation(f"label matrix shape {y.shape} does not fit graph {w_norm.shape}")
    alpha = cfg.alpha

    def apply_a(v):
        return v - alpha * (w_norm @ v)

    z, _, _ = conjugate_gradient(apply_a, y, (1.0 - alpha) * cfg.cg_tol, cfg.cg_max_iter)
    return z


def extract_pseudo_labels(z, emb: EmbeddingTable, classes=None) -> PseudoLabelSet:
    """Argmax species and entropy-based certainty for every unlabeled row of ``z``.

    Rows summing to zero (nodes unreachable from any label) get no pseudo
    label. Class weights are inverse pseudo-label frequencies scaled to mean 1.
    """
    z = np.asarray(z, dtype=np.float64)
    if classes is None:
        classes = emb.classes
    n_classes = len(classes)
    out = PseudoLabelSet()
    counts = {}
    for i, patch_id in enumerate(emb.ids):
        if emb.labels[i] is not None:
            continue
        row = np.clip(z[i], 0.0, None)
        total = row.sum()
        if not total > 0:
            continue
        probs = row / total
        best = int(np.argmax(probs))  # classes are sorted, so ties go to the smallest code
        if n_classes > 1:
            nz = probs[probs > 0]
            entropy = float(-(nz * np.log(nz)).sum())
            certainty = min(1.0, max(0.0, 1.0 - entropy / math.log(n_classes)))
        else:
            certainty = 1.0
        species = classes[best]
        out.labels[patch_id] = (species, certainty)
        counts[species] = counts.get(species, 0) + 1
    if counts:
        inv = {c: 1.0 / n for c, n in counts.items()}
        mean = sum(inv.values()) / len(inv)
        out.class_weights = {c: inv[c] / mean for c in sorted(inv)}
    return out


def propagate(emb: EmbeddingTable, cfg: PropagationConfig = PropagationConfig()) -> PseudoLabelSet:
    """Graph, diffusion and pseudo-label extraction in one call."""
    y, classes = emb.label_matrix()
    if not classes:
        raise DegenerateInput("label propagation needs at least one labeled embedding")
    z = diffuse(build_graph(emb, cfg), y, cfg)
    return extract_pseudo_labels(z, emb, classes)


# --- files -------------------------------------------------------------------

def load_embeddings(path) -> EmbeddingTable:
    """Read an embeddings table, text or binary (detected by the ``EMB1`` magic)."""
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc
    if magic == BINARY_MAGIC:
        return _load_embeddings_binary(path)
    return _load_embeddings_text(path)


def _load_embeddings_text(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if (header is None or len(header) != 3 or header[0] != "id" or not header[1].startswith("dim=")
                or header[2] != "label"):
            raise ParseError(f"{path}:1: expected header 'id,dim=<D>,label'")
        try:
            dim = int(header[1][4:])
        except ValueError:
            raise ParseError(f"{path}:1: bad dimension {header[1]!r}") from None
        ids, vecs, labels = [], [], []
        for row in reader:
            if not row:
                continue
            where = f"{path}:{reader.line_num}"
            if len(row) != dim + 2:
                raise ParseError(f"{where}: expected {dim + 2} fields, got {len(row)}")
            try:
                vecs.append([float(v) for v in row[1:-1]])
            except ValueError:
                raise ParseError(f"{where}: non-numeric embedding value") from None
            ids.append(row[0])
            labels.append(row[-1])
    try:
        return EmbeddingTable(ids, np.array(vecs).reshape(len(ids), dim), labels)
    except (InvariantViolation, DuplicateId) as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _load_embeddings_binary(path):
    data = Path(path).read_bytes()
    try:
        n, dim = struct.unpack_from("<II", data, 4)
        off = 12
        ids, labels = [], []
        vecs = np.empty((n, dim), dtype=np.float32)
        for i in range(n):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            ids.append(data[off:off + ln].decode("utf-8"))
            off += ln
            (ll,) = struct.unpack_from("<H", data, off)
            off += 2
            labels.append(data[off:off + ll].decode("utf-8") or None)
            off += ll
            vecs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
            off += 4 * dim
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: truncated or corrupt binary embeddings ({exc})") from None
    if off != len(data):
        raise ParseError(f"{path}: {len(data) - off} trailing bytes")
    return EmbeddingTable(ids, vecs, labels)


def save_embeddings(emb: EmbeddingTable, path, binary=False):
    """Write embeddings; the binary layout is documented in the README."""
    if binary:
        parts = [BINARY_MAGIC, struct.pack("<II", len(emb), emb.dim)]
        for i, patch_id in enumerate(emb.ids):
            b_id = patch_id.encode("utf-8")
            b_lab = (emb.labels[i] or "").encode("utf-8")
            parts += [struct.pack("<H", len(b_id)), b_id, struct.pack("<H", len(b_lab)), b_lab,
                      emb.vectors[i].astype("<f4").tobytes()]
        Path(path).write_bytes(b"".join(parts))
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", f"dim={emb.dim}", "label"])
        for i, patch_id in enumerate(emb.ids):
            w.writerow([patch_id] + [repr(float(v)) for v in emb.vectors[i]] + [emb.labels[i] or UNLABELED])


def save_pseudo_labels(pls: PseudoLabelSet, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "species", "certainty", "class_weight"])
        for patch_id in sorted(pls.labels):
            species, certainty = pls.labels[patch_id]
            w.writerow([patch_id, species, repr(certainty), repr(pls.class_weights[species])])


def load_pseudo_labels(path) -> PseudoLabelSet:
    out = PseudoLabelSet()
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "species", "certainty", "class_weight"]:
            raise ParseError(f"{path}:1: expected header 'id,species,certainty,class_weight'")
        for row in reader:
            if not row:
                continue
            where = f"{path}:{reader.line_num}"
            if len(row) != 4:
                raise ParseError(f"{where}: expected 4 fields, got {len(row)}")
            try:
                certainty, weight = float(row[2]), float(row[3])
            except ValueError:
                raise ParseError(f"{where}: non-numeric certainty or weight") from None
            if not 0 <= certainty <= 1 or not weight >= 0:
                raise InvariantViolation(f"{where}: certainty must lie in [0, 1] and weight be >= 0")
            if row[0] in out.labels:
                raise DuplicateId(f"{where}: duplicate id {row[0]!r}")
            out.labels[row[0]] = (row[1], certainty)
            prev = out.class_weights.setdefault(row[1], weight)
            if prev != weight:
                raise InvariantViolation(f"{where}: inconsistent class weight for {row[1]!r}")
    return out
