"""ROC/AUC/HTER metrics, evaluation protocols and ablation reports.

Scores are the live-class probabilities; a sample is accepted as live when
its score is >= the threshold. FAR is the fraction of spoof samples
accepted, FRR the fraction of live samples rejected. The HTER threshold
convention is unstated in the literature we follow, so reports carry both
the target-set EER threshold (headline) and a fixed 0.5.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError
from .model import AmelModel

STRATEGIES = ("dea", "average_voting", "expert_ensembling", "max_selection")


def _split_scores(scores: Sequence[tuple[float, int]]):
    arr = np.asarray(list(scores), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("scores must be (score, label) pairs")
    s, y = arr[:, 0], arr[:, 1].astype(int)
    live, spoof = s[y == 1], s[y == 0]
    if live.size == 0 or spoof.size == 0:
        raise ValueError("both classes must be present to sweep a ROC curve")
    return s, live, spoof


def _thresholds(s: np.ndarray) -> np.ndarray:
    distinct = np.unique(s)
    return np.concatenate([distinct, [distinct[-1] + 1.0]])


def _far_frr(live: np.ndarray, spoof: np.ndarray, thresholds: np.ndarray):
    far = (spoof[None, :] >= thresholds[:, None]).mean(axis=1)
    frr = (live[None, :] < thresholds[:, None]).mean(axis=1)
    return far, frr


def roc(scores: Sequence[tuple[float, int]]) -> list[tuple[float, float, float]]:
    """(threshold, FAR, FRR) at every distinct score plus a reject-all
    sentinel, in ascending threshold order."""
    s, live, spoof = _split_scores(scores)
    thr = _thresholds(s)
    far, frr = _far_frr(live, spoof, thr)
    return [(float(t), float(a), float(r)) for t, a, r in zip(thr, far, frr)]


def auc(scores: Sequence[tuple[float, int]]) -> float:
    """Area under TPR-over-FPR by the trapezoidal rule.

    Walking thresholds downward traces the curve from (0,0) to (1,1) with
    both coordinates non-decreasing, which keeps tied-FPR (vertical)
    segments zero-area.
    """
    points = roc(scores)[::-1]
    fpr = np.array([p[1] for p in points])
    tpr = 1.0 - np.array([p[2] for p in points])
    return float(np.trapezoid(tpr, fpr))


def hter(scores: Sequence[tuple[float, int]], threshold: float) -> float:
    """(FAR + FRR) / 2 at the given acceptance threshold."""
    _, live, spoof = _split_scores(scores)
    far = float((spoof >= threshold).mean())
    frr = float((live < threshold).mean())
    return 0.5 * (far + frr)


def eer_threshold(scores: Sequence[tuple[float, int]]) -> float:
    """Threshold minimizing |FAR - FRR|; ties resolve to the lower one."""
    s, live, spoof = _split_scores(scores)
    thr = _thresholds(s)
    far, frr = _far_frr(live, spoof, thr)
    return float(thr[np.argmin(np.abs(far - frr))])


@dataclass
class EvalReport:
    """Target-domain evaluation summary."""

    auc: float
    eer: float
    eer_thr: float
    hter_at: dict[str, float]
    roc_points: list[tuple[float, float, float]]
    mean_expert_weights: list[float]
    per_strategy: dict[str, dict[str, float]] = field(default_factory=dict)
    n_live: int = 0
    n_spoof: int = 0

    def to_json(self) -> str:
        payload = {
            "auc": self.auc,
            "eer": self.eer,
            "eer_threshold": self.eer_thr,
            "hter_at": self.hter_at,
            "mean_expert_weights": self.mean_expert_weights,
            "per_strategy": self.per_strategy,
            "n_live": self.n_live,
            "n_spoof": self.n_spoof,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def write(self, report_path, roc_path=None) -> None:
        with open(report_path, "w") as f:
            f.write(self.to_json())
            f.write("\n")
        if roc_path is not None:
            with open(roc_path, "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["threshold", "far", "frr"])
                for t, a, r in self.roc_points:
                    w.writerow([repr(t), repr(a), repr(r)])


def _forward_scores(
    model: AmelModel,
    images: np.ndarray,
    strategy: str = "dea",
    batch: int = 256,
):
    """Live-class probabilities (and DEA weights) over an image array."""
    scores = []
    weights = []
    for lo in range(0, images.shape[0], batch):
        x = Tensor(images[lo : lo + batch])
        logits, _, w = model.forward_with_strategy(x, strategy)
        scores.append(ops.softmax_rows(logits.data.astype(np.float64))[:, 1])
        weights.append(np.asarray(w.data, dtype=np.float64))
    return np.concatenate(scores), np.concatenate(weights)


def score_pairs(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, int]]:
    return [(float(s), int(y)) for s, y in zip(scores, labels)]


def summarize_scores(pairs: Sequence[tuple[float, int]]) -> tuple[float, float, float, float]:
    """(auc, eer, eer_threshold, hter at that threshold)."""
    thr = eer_threshold(pairs)
    h = hter(pairs, thr)
    _, live, spoof = _split_scores(pairs)
    far = float((spoof >= thr).mean())
    frr = float((live < thr).mean())
    eer = 0.5 * (far + frr)
    return auc(pairs), eer, thr, h


def evaluate_model(
    model: AmelModel,
    images: np.ndarray,
    labels: np.ndarray,
    strategies: Sequence[str] = (),
    batch: int = 256,
) -> EvalReport:
    """Full-aggregation evaluation on one target set, optionally adding
    aggregation-strategy ablation rows."""
    scores, weights = _forward_scores(model, images, "dea", batch)
    pairs = score_pairs(scores, labels)
    a, eer, thr, h_eer = summarize_scores(pairs)
    report = EvalReport(
        auc=a,
        eer=eer,
        eer_thr=thr,
        hter_at={"eer_threshold": h_eer, "fixed_0.5": hter(pairs, 0.5)},
        roc_points=roc(pairs),
        mean_expert_weights=[float(v) for v in weights.mean(axis=0)],
        n_live=int((labels == 1).sum()),
        n_spoof=int((labels == 0).sum()),
    )
    for strat in strategies:
        if strat == "dea":
            report.per_strategy["dea"] = {"auc": a, "hter": h_eer}
            continue
        s, _ = _forward_scores(model, images, strat, batch)
        p = score_pairs(s, labels)
        sa, _, _, sh = summarize_scores(p)
        report.per_strategy[strat] = {"auc": sa, "hter": sh}
    return report


def evaluate_backbone_only(
    model: AmelModel, images: np.ndarray, labels: np.ndarray, batch: int = 256
) -> EvalReport:
    """Baseline-variant evaluation: heads on the shared feature only."""
    scores = []
    for lo in range(0, images.shape[0], batch):
        logits, _ = model.forward_backbone_only(Tensor(images[lo : lo + batch]))
        scores.append(ops.softmax_rows(logits.data.astype(np.float64))[:, 1])
    pairs = score_pairs(np.concatenate(scores), labels)
    a, eer, thr, h_eer = summarize_scores(pairs)
    return EvalReport(
        auc=a,
        eer=eer,
        eer_thr=thr,
        hter_at={"eer_threshold": h_eer, "fixed_0.5": hter(pairs, 0.5)},
        roc_points=roc(pairs),
        mean_expert_weights=[],
        n_live=int((labels == 1).sum()),
        n_spoof=int((labels == 0).sum()),
    )


def ablate_aggregation(
    model: AmelModel, images: np.ndarray, labels: np.ndarray, batch: int = 256
) -> dict[str, dict[str, float]]:
    """AUC/HTER per aggregation strategy on one target set."""
    out: dict[str, dict[str, float]] = {}
    for strat in STRATEGIES:
        s, _ = _forward_scores(model, images, strat, batch)
        a, _, _, h = summarize_scores(score_pairs(s, labels))
        out[strat] = {"auc": a, "hter": h}
    return out


def ablate_inference(
    model: AmelModel, images: np.ndarray, labels: np.ndarray, batch: int = 256
) -> dict[str, dict[str, float]]:
    """Per-expert inference rows next to the aggregated row."""
    out: dict[str, dict[str, float]] = {}
    for k in range(len(model.experts)):
        scores = []
        for lo in range(0, images.shape[0], batch):
            logits, _ = model.forward_single_expert(Tensor(images[lo : lo + batch]), k)
            scores.append(ops.softmax_rows(logits.data.astype(np.float64))[:, 1])
        a, _, _, h = summarize_scores(score_pairs(np.concatenate(scores), labels))
        out[f"expert_{k}"] = {"auc": a, "hter": h}
    s, _ = _forward_scores(model, images, "dea", batch)
    a, _, _, h = summarize_scores(score_pairs(s, labels))
    out["aggregated"] = {"auc": a, "hter": h}
    return out


def dump_features(model: AmelModel, dataset, path, batch: int = 256) -> int:
    """Write per-sample pooled features and expert weights for external
    embedding tools; returns the row count."""
    C = model.config.channels
    K = len(model.experts)
    header = (
        ["domain_id", "label"]
        + [f"common_{i}" for i in range(C)]
        + [f"agg_{i}" for i in range(C)]
        + [f"w_{k}" for k in range(K)]
    )
    rows = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for d in range(dataset.num_domains):
            images, labels, _ = dataset.domain_arrays(d)
            spec_id = dataset.domains[d].spec.domain_id
            for lo in range(0, images.shape[0], batch):
                x = Tensor(images[lo : lo + batch])
                common = model.forward_common(x, train=False)
                feats = [model.forward_expert(k, common, train=False) for k in range(K)]
                agg = model.aggregate(common, feats)
                pooled_c = ops.global_avg_pool(common).data
                pooled_a = ops.global_avg_pool(agg.features).data
                for i in range(pooled_c.shape[0]):
                    w.writerow(
                        [spec_id, int(labels[lo + i])]
                        + [repr(float(v)) for v in pooled_c[i]]
                        + [repr(float(v)) for v in pooled_a[i]]
                        + [repr(float(v)) for v in agg.weights.data[i]]
                    )
                    rows += 1
    return rows


def run_protocol(
    dataset,
    model_config,
    train_config,
    protocol: str = "loo",
    target_domain: Optional[int] = None,
    train_mode: str = "full",
    strategies: Sequence[str] = (),
    seed: Optional[int] = None,
    limited_sources: Optional[Sequence[int]] = None,
) -> dict[str, EvalReport]:
    """Train-and-evaluate folds over the dataset's domains.

    ``loo`` holds each domain out in turn (or only ``target_domain`` when
    given) and trains on the rest; ``limited`` trains once on a small fixed
    source set (default: the first two domains) and evaluates every other
    domain as a target. Fully seeded: the fold seed drives model init,
    batching and episode splits.
    """
    from dataclasses import replace as dc_replace

    from .model import AmelModel
    from .training import train

    if protocol not in ("loo", "limited"):
        raise ConfigError("protocol", f"unknown protocol {protocol!r}")
    base_seed = train_config.seed if seed is None else seed
    reports: dict[str, EvalReport] = {}

    def run_fold(source_ids: list[int], target_ids: list[int], fold_seed: int):
        sub = dataset.subset(source_ids)
        cfg = dc_replace(model_config, num_domains=len(source_ids))
        tcfg = dc_replace(train_config, seed=fold_seed)
        model = AmelModel(cfg, np.random.default_rng(fold_seed))
        train(model, sub, tcfg, mode=train_mode)
        for t in target_ids:
            images, labels, _ = dataset.domain_arrays(t)
            if train_mode == "baseline":
                rep = evaluate_backbone_only(model, images, labels)
            else:
                rep = evaluate_model(model, images, labels, strategies=strategies)
            reports[f"target_{t}"] = rep

    if protocol == "loo":
        targets = list(range(dataset.num_domains)) if target_domain is None else [target_domain]
        for i, t in enumerate(targets):
            sources = [d for d in range(dataset.num_domains) if d != t]
            run_fold(sources, [t], base_seed + i)
    else:
        sources = list(limited_sources) if limited_sources else [0, 1]
        if len(sources) >= dataset.num_domains:
            raise ConfigError("limited_sources", "no target domains left to evaluate")
        targets = [d for d in range(dataset.num_domains) if d not in sources]
        run_fold(sources, targets, base_seed)
    return reports
