"""Test-time protocols on frozen embeddings: linear probe, cosine NN, one-class SVM.

Bank file layout (little-endian)::

    magic    b"DFEB"
    header   u32 version (= 1), u32 M, u32 d
    matrix   M*d float32, row-major
    labels   M uint8 (0 = real, 1 = fake)
    tags     u32 T, then T entries of (u16 byte length, UTF-8 bytes)
    tag_idx  M u16, index into the tag table per row

Classifier files are ``.npz`` archives whose ``meta`` entry is a JSON string
naming the kind, the format version and the hyperparameters; the arrays
needed to run the decision function sit next to it.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.svm import OneClassSVM

BANK_MAGIC = b"DFEB"
BANK_VERSION = 1
CLF_VERSION = 1
REAL, FAKE = 0, 1
REAL_TAG = "real"
UNIT_TOL = 1e-5

LINEAR_C = 0.316
LINEAR_MAX_ITER = 1500
OCSVM_NU = 0.1
OCSVM_DEGREE = 3
OCSVM_COEF0 = 1.0


@dataclass
class EmbeddingBank:
    vectors: np.ndarray
    labels: np.ndarray
    tags: list[str]

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.tags = list(self.tags)
        self.validate()

    def validate(self) -> None:
        m = len(self.vectors)
        if self.vectors.ndim != 2 or m == 0:
            raise ValueError("bank needs a non-empty (M, d) matrix")
        if len(self.labels) != m or len(self.tags) != m:
            raise ValueError("vectors, labels and tags must have the same length")
        if not np.isin(self.labels, (REAL, FAKE)).all():
            raise ValueError("labels must be 0 (real) or 1 (fake)")
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        if np.abs(norms - 1).max() > UNIT_TOL:
            raise ValueError("bank rows must be unit-norm")
        is_real_tag = np.array([t == REAL_TAG for t in self.tags])
        if (is_real_tag != (self.labels == REAL)).any():
            raise ValueError(f"tag {REAL_TAG!r} must coincide with label real")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def subset(self, mask) -> "EmbeddingBank":
        mask = np.asarray(mask)
        return EmbeddingBank(self.vectors[mask], self.labels[mask],
                             [t for t, keep in zip(self.tags, mask) if keep])

    def to_bytes(self) -> bytes:
        table = sorted(set(self.tags))
        index = {t: i for i, t in enumerate(table)}
        if len(table) > 0xFFFF:
            raise ValueError("too many distinct tags")
        m, d = self.vectors.shape
        out = io.BytesIO()
        out.write(BANK_MAGIC + struct.pack("<III", BANK_VERSION, m, d))
        out.write(self.vectors.astype("<f4").tobytes())
        out.write(self.labels.tobytes())
        out.write(struct.pack("<I", len(table)))
        for t in table:
            raw = t.encode()
            out.write(struct.pack("<H", len(raw)) + raw)
        out.write(np.array([index[t] for t in self.tags], dtype="<u2").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EmbeddingBank":
        if raw[:4] != BANK_MAGIC:
            raise ValueError("not an embedding bank")
        version, m, d = struct.unpack_from("<III", raw, 4)
        if version != BANK_VERSION:
            raise ValueError(f"unsupported bank version {version}")
        pos = 16
        vectors = np.frombuffer(raw, dtype="<f4", count=m * d, offset=pos).reshape(m, d)
        pos += 4 * m * d
        labels = np.frombuffer(raw, dtype=np.uint8, count=m, offset=pos)
        pos += m
        (n_tags,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        table = []
        for _ in range(n_tags):
            (length,) = struct.unpack_from("<H", raw, pos)
            table.append(raw[pos + 2:pos + 2 + length].decode())
            pos += 2 + length
        idx = np.frombuffer(raw, dtype="<u2", count=m, offset=pos)
        return cls(vectors.copy(), labels.copy(), [table[i] for i in idx])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingBank":
        return cls.from_bytes(Path(path).read_bytes())


def _two_classes(bank: EmbeddingBank) -> None:
    if len(np.unique(bank.labels)) < 2:
        raise ValueError("bank must contain both real and fake rows")


# -- linear probe ------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray
    bias: float

    def decision(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights + self.bias

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Probability of fake, ``sigmoid(w.x + b)``."""
        return 1.0 / (1.0 + np.exp(-self.decision(x)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.uint8)


def fit_linear(bank: EmbeddingBank, C: float = LINEAR_C, max_iter: int = LINEAR_MAX_ITER,
               balanced: bool = True, tol: float = 1e-8) -> LinearProbe:
    """L2-penalized logistic regression; balanced class weights ``M / (2 M_c)``."""
    _two_classes(bank)
    clf = LogisticRegression(C=C, max_iter=max_iter, tol=tol,
                             class_weight="balanced" if balanced else None)
    clf.fit(bank.vectors.astype(np.float64), bank.labels)
    return LinearProbe(clf.coef_[0].copy(), float(clf.intercept_[0]))


# -- nearest neighbor ----------------------------------------------------------------

def nn_index(bank: EmbeddingBank, queries: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Row of minimal cosine distance ``1 - v.q`` per query; ties go to the lowest index."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    out = np.empty(len(q), dtype=np.int64)
    for i in range(0, len(q), chunk):
        dist = 1.0 - q[i:i + chunk] @ bank.vectors.T
        out[i:i + chunk] = np.argmin(dist, axis=1)  # argmin returns the first minimum
    return out


def nn_predict(bank: EmbeddingBank, query: np.ndarray) -> int:
    return int(bank.labels[nn_index(bank, query)[0]])


def nn_predict_batch(bank: EmbeddingBank, queries: np.ndarray) -> np.ndarray:
    return bank.labels[nn_index(bank, queries)]


# -- one-class SVM -------------------------------------------------------------------

@dataclass
class OneClassModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray
    intercept: float
    gamma: float
    degree: int = OCSVM_DEGREE
    coef0: float = OCSVM_COEF0
    nu: float = OCSVM_NU
    train_max_signed_distance: float = 0.0
    params: dict = field(default_factory=dict)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Positive inside the boundary, negative outside."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        k = (self.gamma * x @ self.support_vectors.T + self.coef0) ** self.degree
        return k @ self.dual_coef + self.intercept

    def predict(self, x: np.ndarray) -> np.ndarray:
        """1 (fake) for points outside the boundary."""
        return (self.signed_distance(x) < 0).astype(np.uint8)


def fit_ocsvm(vectors: np.ndarray, nu: float = OCSVM_NU, degree: int = OCSVM_DEGREE,
              coef0: float = OCSVM_COEF0, gamma: float | None = None) -> OneClassModel:
    """Polynomial-kernel one-class boundary around ``vectors`` (the real rows)."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("one-class fit needs at least 2 rows")
    if not 0 < nu <= 1:
        raise ValueError("nu must be in (0, 1]")
    gamma = 1.0 / x.shape[1] if gamma is None else gamma
    svm = OneClassSVM(kernel="poly", degree=degree, coef0=coef0, gamma=gamma, nu=nu)
    svm.fit(x)
    model = OneClassModel(svm.support_vectors_.copy(), svm.dual_coef_[0].copy(), float(svm.intercept_[0]),
                          gamma, degree, coef0, nu)
    model.train_max_signed_distance = float(model.signed_distance(x).max())
    return model


def ocsvm_score(model: OneClassModel, query: np.ndarray) -> np.ndarray:
    """Signed distance minus the largest signed distance over the training reals."""
    return model.signed_distance(query) - model.train_max_signed_distance


# -- classifier files ------------------------------------------------------------------

def save_classifier(clf, path: str | Path) -> Path:
    """Write a linear probe, one-class model or NN bank as a self-describing ``.npz``."""
    if isinstance(clf, LinearProbe):
        meta = {"kind": "linear", "C": LINEAR_C, "max_iter": LINEAR_MAX_ITER, "class_weight": "balanced"}
        arrays = {"weights": clf.weights, "bias": np.array([clf.bias])}
    elif isinstance(clf, OneClassModel):
        meta = {"kind": "svm", "kernel": "poly", "degree": clf.degree, "coef0": clf.coef0, "gamma": clf.gamma,
                "nu": clf.nu, "train_max_signed_distance": clf.train_max_signed_distance,
                "intercept": clf.intercept}
        arrays = {"support_vectors": clf.support_vectors, "dual_coef": clf.dual_coef}
    elif isinstance(clf, EmbeddingBank):
        meta = {"kind": "nn", "metric": "cosine", "tie_break": "lowest_index", "tags": clf.tags}
        arrays = {"vectors": clf.vectors, "labels": clf.labels}
    else:
        raise TypeError(f"cannot save {type(clf).__name__}")
    meta["version"] = CLF_VERSION
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_classifier(path: str | Path):
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CLF_VERSION:
            raise ValueError(f"unsupported classifier version {meta.get('version')}")
        kind = meta["kind"]
        if kind == "linear":
            return LinearProbe(z["weights"].copy(), float(z["bias"][0]))
        if kind == "svm":
            return OneClassModel(z["support_vectors"].copy(), z["dual_coef"].copy(), meta["intercept"],
                                 meta["gamma"], meta["degree"], meta["coef0"], meta["nu"],
                                 meta["train_max_signed_distance"])
        if kind == "nn":
            return EmbeddingBank(z["vectors"].copy(), z["labels"].copy(), meta["tags"])
    raise ValueError(f"unknown classifier kind {kind!r}")


def classifier_kind(clf) -> str:
    return {LinearProbe: "linear", OneClassModel: "svm", EmbeddingBank: "nn"}[type(clf)]


def predict(clf, queries: np.ndarray) -> np.ndarray:
    """Hard labels (0 real, 1 fake) for any of the three classifier kinds."""
    if isinstance(clf, EmbeddingBank):
        return nn_predict_batch(clf, queries)
    return clf.predict(queries)


def fake_score(clf, queries: np.ndarray) -> np.ndarray:
    """Higher = more likely fake; the ranking used for AUC."""
    if isinstance(clf, LinearProbe):
        return clf.decision(queries)
    if isinstance(clf, OneClassModel):
        return -ocsvm_score(clf, queries)
    # NN: similarity to the nearest fake minus similarity to the nearest real
    sims = np.atleast_2d(queries) @ clf.vectors.T
    fake = clf.labels == FAKE
    return sims[:, fake].max(1) - sims[:, ~fake].max(1)
