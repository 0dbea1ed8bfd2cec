"""Plaintext side of the cancer-type classifier.

Mutation and copy-number records are turned into one feature per gene
(SNV block followed by CNV block, genes sorted within each block), filtered
with a chi-squared score and fed to an L1-regularised multinomial logistic
regression trained by proximal gradient descent.  A synthetic cohort
generator stands in for the controlled-access patient data.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax
from sklearn.model_selection import StratifiedKFold, train_test_split


class IngestionError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


SIFT_VALUES = {"deleterious": 1.0, "deleterious_lc": 0.75, "tolerated_lc": 0.5, "tolerated": 0.25}
IMPACT_VALUES = {"high": 1.0, "moderate": 0.4, "modifier": 0.7, "low": 0.1}
COPY_NUMBERS = (-2, -1, 0, 1, 2)
SNV_MODES = ("presence", "impact")


@dataclass(frozen=True)
class SnvRecord:
    sample_id: str
    gene: str
    sift_class: str = "tolerated"
    strength: float = 1.0
    impact_class: str = "modifier"

    def __post_init__(self):
        if self.sift_class not in SIFT_VALUES:
            raise IngestionError(f"unknown SIFT class {self.sift_class!r}")
        if self.impact_class not in IMPACT_VALUES:
            raise IngestionError(f"unknown impact class {self.impact_class!r}")
        s = float(self.strength)
        if not math.isfinite(s):
            raise IngestionError(f"non-finite strength for {self.sample_id}/{self.gene}")
        # strength range is unstated upstream; clamp into [0, 1]
        object.__setattr__(self, "strength", min(1.0, max(0.0, s)))

    @property
    def contribution(self) -> float:
        return SIFT_VALUES[self.sift_class] * self.strength * IMPACT_VALUES[self.impact_class]


@dataclass(frozen=True)
class CnvRecord:
    sample_id: str
    gene: str
    copy_number: int

    def __post_init__(self):
        try:
            c = int(self.copy_number)
        except (TypeError, ValueError) as e:
            raise IngestionError(f"bad copy number {self.copy_number!r}") from e
        if c not in COPY_NUMBERS or c != self.copy_number:
            raise IngestionError(f"copy number {self.copy_number!r} outside -2..2")
        object.__setattr__(self, "copy_number", c)


# --------------------------------------------------------------------------
# TSV ingestion

SNV_COLUMNS = ("sample_id", "gene", "sift_class", "strength", "impact_class")
CNV_COLUMNS = ("sample_id", "gene", "copy_number")


def _rows(path, columns):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        missing = set(columns) - set(reader.fieldnames or ())
        if missing:
            raise IngestionError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            yield lineno, row


def read_snv_tsv(path) -> list[SnvRecord]:
    out = []
    for lineno, row in _rows(path, SNV_COLUMNS):
        try:
            out.append(SnvRecord(row["sample_id"], row["gene"], row["sift_class"],
                                 float(row["strength"]), row["impact_class"]))
        except (IngestionError, ValueError) as e:
            raise IngestionError(f"{path}:{lineno}: {e}") from e
    return out


def read_cnv_tsv(path) -> list[CnvRecord]:
    out = []
    for lineno, row in _rows(path, CNV_COLUMNS):
        try:
            out.append(CnvRecord(row["sample_id"], row["gene"], int(row["copy_number"])))
        except (IngestionError, ValueError) as e:
            raise IngestionError(f"{path}:{lineno}: {e}") from e
    return out


def read_labels_tsv(path) -> dict[str, int]:
    return {row["sample_id"]: int(row["label"]) for _, row in _rows(path, ("sample_id", "label"))}


def write_snv_tsv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SNV_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.gene, r.sift_class, repr(r.strength), r.impact_class])


def write_cnv_tsv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CNV_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, r.gene, r.copy_number])


def write_labels_tsv(path, labels: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["sample_id", "label"])
        for s in sorted(labels):
            w.writerow([s, labels[s]])


# --------------------------------------------------------------------------
# gene ranking and encoding


def rank_genes_by_snv_frequency(records, labels: dict, top_k: int = 10000) -> list[str]:
    """Union over classes of each class's top_k genes by SNV count."""
    if not records:
        raise IngestionError("no SNV records")
    counts: dict[int, Counter] = defaultdict(Counter)
    for r in records:
        if r.sample_id in labels:
            counts[labels[r.sample_id]][r.gene] += 1
    missing = set(labels.values()) - set(counts)
    if missing:
        raise IngestionError(f"classes without SNV records: {sorted(missing)}")
    chosen = set()
    for k in sorted(counts):
        ranked = sorted(counts[k].items(), key=lambda kv: (-kv[1], kv[0]))
        chosen.update(g for g, _ in ranked[:top_k])
    return sorted(chosen)


def encode_snv(records, genes, mode: str = "impact") -> np.ndarray:
    """One sample's SNV features over ``genes`` (records outside are ignored)."""
    if mode not in SNV_MODES:
        raise ValueError(f"mode must be one of {SNV_MODES}")
    index = {g: i for i, g in enumerate(genes)}
    out = np.zeros(len(index))
    for r in records:
        i = index.get(r.gene)
        if i is None:
            continue
        if mode == "presence":
            out[i] = 1.0
        else:
            out[i] += r.contribution
    return out


def encode_cnv(records, genes) -> np.ndarray:
    """copy number + 2, so -2..2 maps to 0..4; absent genes are unaltered (2)."""
    index = {g: i for i, g in enumerate(genes)}
    out = np.full(len(index), 2.0)
    for r in records:
        i = index.get(r.gene)
        if i is not None:
            out[i] = r.copy_number + 2
    return out


@dataclass
class FeatureMatrix:
    values: np.ndarray  # samples x features
    feature_names: list
    sample_ids: list
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.sample_ids), len(self.feature_names)):
            raise ValueError("matrix shape does not match names")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    @property
    def shape(self):
        return self.values.shape

    def select(self, idx) -> "FeatureMatrix":
        idx = list(idx)
        return FeatureMatrix(self.values[:, idx], [self.feature_names[i] for i in idx],
                             list(self.sample_ids), self.labels)

    def rows(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(self.values[idx], list(self.feature_names),
                             [self.sample_ids[i] for i in idx],
                             None if self.labels is None else self.labels[idx])

    # "FMTX" | version u16 | rows u32 | cols u32 | has_labels u8 | values f64
    # | labels i32 | feature names then sample ids (u32 len + UTF-8)
    _HEAD = struct.Struct("<4sHIIB")

    def to_bytes(self) -> bytes:
        r, c = self.shape
        parts = [self._HEAD.pack(b"FMTX", 1, r, c, self.labels is not None),
                 self.values.astype("<f8").tobytes()]
        if self.labels is not None:
            parts.append(self.labels.astype("<i4").tobytes())
        for s in list(self.feature_names) + list(self.sample_ids):
            raw = str(s).encode()
            parts += [struct.pack("<I", len(raw)), raw]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureMatrix":
        magic, version, r, c, has_labels = cls._HEAD.unpack_from(data, 0)
        if magic != b"FMTX" or version != 1:
            raise IngestionError("not a feature matrix file")
        pos = cls._HEAD.size
        values = np.frombuffer(data, "<f8", r * c, pos).reshape(r, c).astype(np.float64)
        pos += 8 * r * c
        labels = None
        if has_labels:
            labels = np.frombuffer(data, "<i4", r, pos).astype(np.int64)
            pos += 4 * r
        names = []
        for _ in range(c + r):
            (size,) = struct.unpack_from("<I", data, pos)
            names.append(data[pos + 4:pos + 4 + size].decode())
            pos += 4 + size
        return cls(values, names[:c], names[c:], labels)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id"] + (["label"] if self.labels is not None else []) + self.feature_names)
            for i, s in enumerate(self.sample_ids):
                lab = [int(self.labels[i])] if self.labels is not None else []
                w.writerow([s] + lab + [repr(float(v)) for v in self.values[i]])


def build_feature_matrix(snvs, cnvs, labels: dict, snv_genes, cnv_genes=None,
                         mode: str = "impact") -> FeatureMatrix:
    """SNV block over ``snv_genes`` ++ CNV block, each sorted by gene symbol."""
    snv_genes = sorted(set(snv_genes))
    if cnv_genes is None:
        cnv_genes = {r.gene for r in cnvs}
    cnv_genes = sorted(set(cnv_genes))
    samples = sorted(labels)
    by_snv, by_cnv = defaultdict(list), defaultdict(list)
    for r in snvs:
        by_snv[r.sample_id].append(r)
    for r in cnvs:
        by_cnv[r.sample_id].append(r)
    rows = [np.concatenate([encode_snv(by_snv[s], snv_genes, mode), encode_cnv(by_cnv[s], cnv_genes)])
            for s in samples]
    values = np.array(rows).reshape(len(samples), len(snv_genes) + len(cnv_genes))
    names = [f"snv:{g}" for g in snv_genes] + [f"cnv:{g}" for g in cnv_genes]
    return FeatureMatrix(values, names, samples, np.array([labels[s] for s in samples]))


# --------------------------------------------------------------------------
# chi-squared selection


def chi2_scores(F, labels=None) -> np.ndarray:
    """Sum_k (O_k - E_k)^2 / E_k per feature.

    O_k is the feature total within class k and E_k the overall feature
    total times the share of samples in class k.  All-zero features score 0.
    """
    if isinstance(F, FeatureMatrix):
        labels = F.labels if labels is None else labels
        F = F.values
    X = np.asarray(F, dtype=np.float64)
    y = np.asarray(labels)
    if np.any(X < 0):
        raise ValueError("chi-squared scoring needs non-negative features")
    classes, y_idx = np.unique(y, return_inverse=True)
    onehot = np.eye(len(classes))[y_idx]
    observed = onehot.T @ X  # classes x features
    share = onehot.mean(axis=0)
    expected = np.outer(share, X.sum(axis=0))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (observed - expected) ** 2 / expected, 0.0)
    return terms.sum(axis=0)


def select_top_k(scores, k: int) -> list[int]:
    """Indices of the k largest scores (ties to the lower index), ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= scores.shape[0]:
        raise ValueError(f"cannot select {k} of {scores.shape[0]} features")
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    return sorted(int(i) for i in order[:k])


# --------------------------------------------------------------------------
# L1 multinomial logistic regression


@dataclass
class TrainedModel:
    W: np.ndarray  # K x f
    b: np.ndarray  # K
    lam: float
    feature_names: list = field(default_factory=list)
    history: list = field(default_factory=list, repr=False)
    epochs_run: int = 0

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]


def soft_threshold(w, thresh):
    return np.sign(w) * np.maximum(np.abs(w) - thresh, 0.0)


def smooth_loss_grad(W, b, X, Y):
    """Mean softmax cross-entropy and its gradient; Y is one-hot."""
    Z = X @ W.T + b
    lse = logsumexp(Z, axis=1)
    loss = float(np.mean(lse - np.sum(Z * Y, axis=1)))
    G = (np.exp(Z - lse[:, None]) - Y) / X.shape[0]
    return loss, G.T @ X, G.sum(axis=0)


def objective(W, b, X, Y, lam) -> float:
    return smooth_loss_grad(W, b, X, Y)[0] + lam * float(np.abs(W).sum())


def train_lr_l1(F, labels, lam: float, epochs: int = 10000, n_classes: int | None = None,
                tol: float = 1e-6, rtol: float = 1e-7, step: float = 1.0,
                accelerate: bool = True) -> TrainedModel:
    """Proximal gradient with a halving line search; the bias is unpenalised.

    With ``accelerate`` the extrapolated (monotone FISTA) variant is used:
    a candidate that would raise the objective is rejected in favour of the
    current iterate, so the recorded objective never increases.  Stops early
    once the gradient-mapping norm falls below ``tol`` or the objective has
    moved by less than ``rtol`` (relative) over the last 10 epochs.
    """
    names = list(F.feature_names) if isinstance(F, FeatureMatrix) else []
    X = np.asarray(F.values if isinstance(F, FeatureMatrix) else F, dtype=np.float64)
    y = np.asarray(labels)
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite features")
    K = int(n_classes or (y.max() + 1))
    if len(np.unique(y)) < 2 or K < 2:
        raise TrainingError("need at least two classes")
    Y = np.eye(K)[y]
    f = X.shape[1]
    W, b = np.zeros((K, f)), np.zeros(K)
    obj = objective(W, b, X, Y, lam)
    history = [obj]
    Vw, Vb = W, b  # extrapolated point
    theta = 1.0
    done = 0
    for epoch in range(epochs):
        v_loss, gW, gb = smooth_loss_grad(Vw, Vb, X, Y)
        while True:
            Zw = soft_threshold(Vw - step * gW, step * lam)
            Zb = Vb - step * gb
            dW, db = Zw - Vw, Zb - Vb
            z_loss = smooth_loss_grad(Zw, Zb, X, Y)[0]
            if not math.isfinite(z_loss):
                raise TrainingError("loss diverged")
            bound = v_loss + float(np.sum(gW * dW) + gb @ db) + (float(np.sum(dW ** 2)) + float(db @ db)) / (2 * step)
            if z_loss <= bound + 1e-12 * abs(bound):
                break
            step *= 0.5
            if step < 1e-12:
                raise TrainingError("line search failed")
        gmap = math.sqrt(float(np.sum(dW ** 2)) + float(db @ db)) / step
        z_obj = z_loss + lam * float(np.abs(Zw).sum())
        prev_w, prev_b = W, b
        if z_obj <= obj:
            W, b, obj = Zw, Zb, z_obj
        history.append(obj)
        done = epoch + 1
        if gmap < tol:
            break
        if len(history) > 10 and history[-11] - history[-1] <= rtol * max(1.0, abs(obj)):
            break
        if accelerate:
            theta_next = (1 + math.sqrt(1 + 4 * theta * theta)) / 2
            Vw = W + (theta / theta_next) * (Zw - W) + ((theta - 1) / theta_next) * (W - prev_w)
            Vb = b + (theta / theta_next) * (Zb - b) + ((theta - 1) / theta_next) * (b - prev_b)
            theta = theta_next
        else:
            Vw, Vb = W, b
            step *= 1.25  # let the step recover after conservative halvings
    return TrainedModel(W, b, lam, names, history, done)


def decision_scores(F, model: TrainedModel) -> np.ndarray:
    X = np.asarray(F.values if isinstance(F, FeatureMatrix) else F, dtype=np.float64)
    return X @ model.W.T + model.b


def predict(F, model: TrainedModel) -> np.ndarray:
    """argmax of Wx + b; ties go to the lowest class index."""
    return np.argmax(decision_scores(F, model), axis=1)


def predict_proba(F, model: TrainedModel) -> np.ndarray:
    return softmax(decision_scores(F, model), axis=1)


# --------------------------------------------------------------------------
# evaluation


def roc_curve_points(truth, score) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) from a descending threshold sweep; tied scores move together."""
    truth = np.asarray(truth, dtype=bool)
    score = np.asarray(score, dtype=np.float64)
    order = np.argsort(-score, kind="mergesort")
    s, t = score[order], truth[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(t)[last]
    fp = np.cumsum(~t)[last]
    P, N = truth.sum(), (~truth).sum()
    tpr = np.r_[0.0, tp / P] if P else np.zeros(last.size + 1)
    fpr = np.r_[0.0, fp / N] if N else np.zeros(last.size + 1)
    return fpr, tpr


def auc_trapezoid(fpr, tpr) -> float:
    return float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))


def _ratio(a, b) -> float:
    return float(a) / float(b) if b else 0.0


def evaluate(pred, truth, scores=None, n_classes: int | None = None) -> dict:
    """Accuracy, per-class precision/recall/F1 and (with scores) ROC AUCs.

    0/0 in any ratio is reported as 0; a class absent from ``truth`` has
    no ROC curve and its AUC is reported as None.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    K = int(n_classes or max(pred.max(), truth.max()) + 1)
    out = {"accuracy": float(np.mean(pred == truth)) if truth.size else 0.0, "per_class": []}
    for k in range(K):
        tp = int(np.sum((pred == k) & (truth == k)))
        fp = int(np.sum((pred == k) & (truth != k)))
        fn = int(np.sum((pred != k) & (truth == k)))
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        out["per_class"].append({"class": k, "precision": p, "recall": r,
                                 "f1": _ratio(2 * p * r, p + r), "support": int(np.sum(truth == k))})
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        onehot = np.eye(K, dtype=bool)[truth]
        roc = {}
        for k in range(K):
            has_both = onehot[:, k].any() and (~onehot[:, k]).any()
            fpr, tpr = roc_curve_points(onehot[:, k], scores[:, k])
            out["per_class"][k]["auc"] = auc_trapezoid(fpr, tpr) if has_both else None
            roc[str(k)] = (fpr, tpr)
        fpr, tpr = roc_curve_points(onehot.ravel(), scores.ravel())
        out["micro_auc"] = auc_trapezoid(fpr, tpr)
        roc["micro"] = (fpr, tpr)
        out["_roc"] = roc
    return out


def write_metrics(metrics: dict, json_path=None, roc_csv_path=None) -> None:
    if json_path is not None:
        clean = {k: v for k, v in metrics.items() if not k.startswith("_")}
        Path(json_path).write_text(json.dumps(clean, indent=2))
    if roc_csv_path is not None and "_roc" in metrics:
        with open(roc_csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["curve", "fpr", "tpr"])
            for name, (fpr, tpr) in metrics["_roc"].items():
                for a, b in zip(fpr, tpr):
                    w.writerow([name, repr(float(a)), repr(float(b))])


# --------------------------------------------------------------------------
# synthetic cohort


@dataclass(frozen=True)
class CohortConfig:
    """Generative knobs.

    Every gene has a background SNV rate drawn from [0.02, base_rate]; each
    class gets ``drivers`` genes whose rate rises by ``signal * driver_rate``
    and whose copy number shifts by one step (sign fixed per class) with
    probability ``signal``.  With signal 0 the classes are indistinguishable.
    """
    n_classes: int = 11
    n_genes: int = 400
    n_patients: int = 2000
    drivers: int = 8
    signal: float = 1.0
    base_rate: float = 0.15
    driver_rate: float = 1.5
    cnv_rate: float = 0.05
    seed: int = 0


def generate_synthetic_cohort(cfg: CohortConfig = CohortConfig()):
    """Deterministic (snv records, cnv records, labels) for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    genes = [f"G{i:05d}" for i in range(cfg.n_genes)]
    rate = rng.uniform(0.02, cfg.base_rate, cfg.n_genes)
    drivers = [rng.choice(cfg.n_genes, size=cfg.drivers, replace=False) for _ in range(cfg.n_classes)]
    cnv_sign = rng.choice([-1, 1], size=cfg.n_classes)
    labels_arr = np.arange(cfg.n_patients) % cfg.n_classes
    rng.shuffle(labels_arr)
    sift = list(SIFT_VALUES)
    impact = list(IMPACT_VALUES)
    snvs, cnvs, labels = [], [], {}
    for p in range(cfg.n_patients):
        sid = f"P{p:05d}"
        k = int(labels_arr[p])
        labels[sid] = k
        lam = rate.copy()
        lam[drivers[k]] += cfg.signal * cfg.driver_rate
        counts = rng.poisson(lam)
        for g in np.nonzero(counts)[0]:
            hot = cfg.signal > 0 and g in drivers[k]
            for _ in range(int(counts[g])):
                s_cls = sift[0] if hot and rng.random() < cfg.signal else sift[rng.integers(4)]
                i_cls = impact[0] if hot and rng.random() < cfg.signal else impact[rng.integers(4)]
                snvs.append(SnvRecord(sid, genes[g], s_cls, round(float(rng.random()), 6), i_cls))
        cn = np.zeros(cfg.n_genes, dtype=np.int64)
        alt = rng.random(cfg.n_genes) < cfg.cnv_rate
        cn[alt] = rng.choice([-2, -1, 1, 2], size=int(alt.sum()))
        shift = rng.random(cfg.drivers) < cfg.signal
        cn[drivers[k][shift]] = np.clip(cn[drivers[k][shift]] + cnv_sign[k], -2, 2)
        for g in np.nonzero(cn)[0]:
            cnvs.append(CnvRecord(sid, genes[g], int(cn[g])))
    return snvs, cnvs, labels


# --------------------------------------------------------------------------
# end-to-end training pipeline

LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 0.1)


def stratified_split(labels, test_size: float = 0.2, seed: int = 0):
    idx = np.arange(len(labels))
    return train_test_split(idx, test_size=test_size, stratify=labels, random_state=seed)


def cross_validate_lambda(X, y, grid=LAMBDA_GRID, folds: int = 5, seed: int = 0,
                          epochs: int = 10000, n_classes: int | None = None) -> tuple[float, dict]:
    """Pick lambda by mean validation accuracy (ties to the larger lambda)."""
    K = int(n_classes or y.max() + 1)
    skf = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
    splits = list(skf.split(X, y))
    scores = {}
    for lam in grid:
        accs = []
        for tr, va in splits:
            m = train_lr_l1(X[tr], y[tr], lam, epochs=epochs, n_classes=K)
            accs.append(float(np.mean(predict(X[va], m) == y[va])))
        scores[lam] = float(np.mean(accs))
    best = max(sorted(grid, reverse=True), key=lambda lam: scores[lam])
    return best, scores


@dataclass
class PipelineResult:
    model: TrainedModel
    selected: list  # feature names
    metrics: dict
    cv_scores: dict
    train_idx: np.ndarray
    test_idx: np.ndarray
    features: FeatureMatrix


def run_pipeline(snvs, cnvs, labels: dict, *, top_genes: int = 10000, n_features: int = 1000,
                 mode: str = "impact", grid=LAMBDA_GRID, folds: int = 5, seed: int = 0,
                 epochs: int = 10000, lam: float | None = None) -> PipelineResult:
    """Rank, encode, split, select on the training part, tune, train, test."""
    genes = rank_genes_by_snv_frequency(snvs, labels, top_genes)
    F = build_feature_matrix(snvs, cnvs, labels, genes, mode=mode)
    y = F.labels
    K = int(y.max() + 1)
    tr, te = stratified_split(y, seed=seed)
    k = min(n_features, F.shape[1])
    idx = select_top_k(chi2_scores(F.values[tr], y[tr]), k)
    Xtr, Xte = F.values[tr][:, idx], F.values[te][:, idx]
    if lam is None:
        lam, cv = cross_validate_lambda(Xtr, y[tr], grid, folds, seed, epochs, K)
    else:
        cv = {}
    model = train_lr_l1(Xtr, y[tr], lam, epochs=epochs, n_classes=K)
    model.feature_names = [F.feature_names[i] for i in idx]
    scores = predict_proba(Xte, model)
    metrics = evaluate(predict(Xte, model), y[te], scores, K)
    metrics["lambda"] = lam
    return PipelineResult(model, model.feature_names, metrics, cv, tr, te, F)
