"""Classification, regression and retrieval metrics plus study drivers.

Metric definitions: F1 thresholds logits at zero (sigmoid 0.5); AUROC is
the Mann-Whitney rank statistic with midrank ties, averaged over
attributes that have both classes; Spearman is Pearson on midranks;
NDCG@k uses binary relevance, a log2(i+1) discount and ideal
normalization over min(k, #relevant).

Study drivers: `invariance_study` measures embedding drift and decision
agreement under random GL(r) reparameterizations of increasing
strength; `ablation_study` trains the encoder variants on one
collection with identical seeds and compares test metrics.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .canon import apply_gl, sample_gl
from .errors import (
    DegenerateLabels,
    DimMismatch,
    EmptyGallery,
    ShapeMismatch,
    UnlabeledCollection,
    ZeroVariance,
)
from .interchange import LoraCheckpoint, load_collection

BOUNDED_METRICS = ("macro_f1", "micro_f1", "mauroc", "ndcg_at_k", "hit_at_1", "mrr")
CORRELATION_METRICS = ("pearson", "spearman")


@dataclass
class EvalReport:
    kind: str
    metrics: dict[str, float]
    per_attribute: dict | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.metrics.items():
            if name in BOUNDED_METRICS and not -1e-9 <= value <= 1 + 1e-9:
                raise ValueError(f"{name}={value} outside [0, 1]")
            if name in CORRELATION_METRICS and not -1 - 1e-9 <= value <= 1 + 1e-9:
                raise ValueError(f"{name}={value} outside [-1, 1]")

    def to_json(self) -> dict:
        doc = {"kind": self.kind, "metrics": self.metrics, "metadata": self.metadata}
        if self.per_attribute is not None:
            doc["per_attribute"] = self.per_attribute
        return doc


def write_report_json(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n")


def write_rows_csv(rows: list[dict], path) -> None:
    path = Path(path)
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)


def _binary_f1(pred: np.ndarray, true: np.ndarray) -> float:
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def _auroc_midrank(scores: np.ndarray, labels: np.ndarray) -> float | None:
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average midranks, 1-based
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(logits, labels) -> dict:
    """Macro/micro F1 (threshold at logit 0) and midrank AUROC averaged over attributes."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape != labels.shape or logits.ndim != 2 or logits.shape[0] < 1:
        raise ShapeMismatch(f"logits {logits.shape} vs labels {labels.shape}")
    pred = logits > 0
    true = labels == 1

    per_f1 = [_binary_f1(pred[:, k], true[:, k]) for k in range(labels.shape[1])]
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    micro = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0

    aurocs = [_auroc_midrank(logits[:, k], labels[:, k]) for k in range(labels.shape[1])]
    usable = [a for a in aurocs if a is not None]
    if not usable:
        raise DegenerateLabels("no attribute has both classes; AUROC undefined")
    return {
        "macro_f1": float(np.mean(per_f1)),
        "micro_f1": float(micro),
        "mauroc": float(np.mean(usable)),
        "auroc_excluded": len(aurocs) - len(usable),
        "per_attribute_f1": per_f1,
        "per_attribute_auroc": aurocs,
    }


def regression_metrics(preds, targets) -> dict:
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise ShapeMismatch(f"preds {preds.shape} vs targets {targets.shape}")
    if preds.shape[0] < 2:
        raise ZeroVariance("correlations need at least two samples")
    err = preds - targets
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    if preds.std() == 0 or targets.std() == 0:
        raise ZeroVariance("constant preds or targets make correlations undefined")
    pearson = float(np.corrcoef(preds, targets)[0, 1])
    spearman = float(np.corrcoef(rankdata(preds), rankdata(targets))[0, 1])
    return {"mae": mae, "rmse": rmse, "pearson": pearson, "spearman": spearman}


def retrieval_metrics(query_embs, gallery_embs, query_tasks, gallery_tasks, k: int = 10) -> dict:
    """Cosine-ranked retrieval with binary same-task relevance."""
    Q = np.asarray(query_embs, dtype=np.float64)
    G = np.asarray(gallery_embs, dtype=np.float64)
    if G.shape[0] == 0:
        raise EmptyGallery("gallery is empty")
    if Q.ndim != 2 or G.ndim != 2 or Q.shape[1] != G.shape[1]:
        raise DimMismatch(f"query {Q.shape} vs gallery {G.shape}")
    query_tasks = list(query_tasks)
    gallery_tasks = np.asarray(list(gallery_tasks))
    if len(query_tasks) != Q.shape[0] or len(gallery_tasks) != G.shape[0]:
        raise DimMismatch("task lists do not match embedding counts")

    Qn = Q / np.maximum(np.linalg.norm(Q, axis=1, keepdims=True), 1e-30)
    Gn = G / np.maximum(np.linalg.norm(G, axis=1, keepdims=True), 1e-30)
    sims = Qn @ Gn.T
    order = np.argsort(-sims, axis=1, kind="stable")

    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    ndcgs, hits, mrrs, missing = [], [], [], []
    by_task: dict = {}
    for qi, task in enumerate(query_tasks):
        rel = (gallery_tasks[order[qi]] == task).astype(np.float64)
        n_rel = int(rel.sum())
        if n_rel == 0:
            ndcg = 0.0
            hit = 0.0
            rr = 0.0
            missing.append(qi)
        else:
            dcg = float((rel[:k] * discounts[: min(k, rel.shape[0])]).sum())
            idcg = float(discounts[: min(k, n_rel)].sum())
            ndcg = dcg / idcg
            hit = float(rel[0])
            first = int(np.argmax(rel))
            rr = 1.0 / (first + 1)
        ndcgs.append(ndcg)
        hits.append(hit)
        mrrs.append(rr)
        by_task.setdefault(str(task), []).append(ndcg)

    return {
        "ndcg_at_k": float(np.mean(ndcgs)),
        "hit_at_1": float(np.mean(hits)),
        "mrr": float(np.mean(mrrs)),
        "k": k,
        "per_task_ndcg": {t: float(np.mean(v)) for t, v in sorted(by_task.items())},
        "queries_without_relevant": missing,
    }


def _resolve_collection(collection):
    if isinstance(collection, (str, Path)):
        return load_collection(collection)
    return collection


def _label_matrix(entries, schema):
    if schema == "multilabel":
        return np.stack([e.label.attributes for e in entries]).astype(np.int64)
    if schema == "regression":
        return np.asarray([e.label.score for e in entries], dtype=np.float64)
    raise UnlabeledCollection(f"cannot evaluate labels of schema {schema!r}")


def evaluate_model(model, collection, split: str = "test", target_override: dict | None = None) -> EvalReport:
    """Run the encoder over one split and score against its labels.

    `target_override` maps checkpoint id to a replacement regression
    target (used to score against noiseless ground truth).
    """
    manifest, accessor = _resolve_collection(collection)
    ids = accessor.split_ids(split) or accessor.ids()
    entries = {e.id: e for e in manifest.entries}
    preds = np.stack([model.predict(accessor[cid]) for cid in ids])
    if manifest.label_schema == "multilabel":
        labels = _label_matrix([entries[c] for c in ids], "multilabel")
        metrics = classification_metrics(preds, labels)
        kind = "multilabel"
    elif manifest.label_schema == "regression":
        targets = _label_matrix([entries[c] for c in ids], "regression")
        if target_override is not None:
            targets = np.asarray([target_override[c] for c in ids], dtype=np.float64)
        metrics = regression_metrics(preds[:, 0], targets)
        kind = "regression"
    else:
        raise UnlabeledCollection(f"cannot evaluate schema {manifest.label_schema!r}")
    per_attr = {
        k: metrics.pop(k) for k in ("per_attribute_f1", "per_attribute_auroc") if k in metrics
    } or None
    return EvalReport(
        kind=kind,
        metrics=metrics,
        per_attribute=per_attr,
        metadata={"split": split, "n": len(ids), "mode": model.config.mode},
    )


def _agreement(pred_a: np.ndarray, pred_b: np.ndarray, task: str) -> float:
    if task == "multilabel":
        return float(np.mean((pred_a > 0) == (pred_b > 0)))
    return float(np.mean(np.abs(pred_a - pred_b) <= 0.01))


def invariance_study(model, collection, alphas, transforms_per_alpha: int = 30, seed: int = 0) -> list[dict]:
    """Embedding drift (relative L2) and decision agreement per perturbation strength.

    Each row aggregates `transforms_per_alpha` random transforms: fresh
    G per position on a cycling, seeded choice of eval checkpoints; mean
    and 95% normal-approximation CI.
    """
    manifest, accessor = _resolve_collection(collection)
    pool = accessor.split_ids("test") or accessor.ids()
    rows = []
    for ai, alpha in enumerate(alphas):
        rng = np.random.default_rng([seed, 0xA1FA, ai])
        drifts, agreements = [], []
        for t in range(transforms_per_alpha):
            cid = pool[int(rng.integers(len(pool)))]
            ckpt = accessor[cid]
            transformed = LoraCheckpoint(
                id=ckpt.id,
                positions=[
                    (k, apply_gl(fp, sample_gl(ckpt.rank, alpha, rng)))
                    for k, fp in ckpt.positions
                ],
                label=ckpt.label,
            )
            h0 = model.encode(ckpt).astype(np.float64)
            h1 = model.encode(transformed).astype(np.float64)
            drifts.append(float(np.linalg.norm(h1 - h0) / max(np.linalg.norm(h0), 1e-30)))
            agreements.append(
                _agreement(model.predict(ckpt), model.predict(transformed), model.config.task)
            )
        drifts = np.asarray(drifts)
        agreements = np.asarray(agreements)
        n = len(drifts)
        se = lambda x: float(1.96 * x.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        rows.append(
            {
                "alpha": float(alpha),
                "mode": model.config.mode,
                "mean_relative_l2_drift": float(drifts.mean()),
                "ci95_relative_l2_drift": se(drifts),
                "mean_agreement": float(agreements.mean()),
                "ci95_agreement": se(agreements),
                "transforms": n,
            }
        )
    return rows


def ablation_study(collection, base_config, hyper, modes=("full", "no_canon", "no_rank_level", "no_pos_level")) -> list[dict]:
    """Train each encoder variant with identical seeds and score the test split."""
    from .encoder import train

    manifest, accessor = _resolve_collection(collection)
    rows = []
    for mode in modes:
        config = replace(base_config, mode=mode)
        model, log = train((manifest, accessor), config, hyper)
        report = evaluate_model(model, (manifest, accessor), split="test")
        row = {"mode": mode, **{k: v for k, v in report.metrics.items()
                                if isinstance(v, (int, float))}}
        row["final_train_loss"] = log[-1]["train_loss"] if log else float("nan")
        rows.append(row)
    return rows
