"""Evaluation metrics, ROI importance, and united-connectivity group statistics.

Classification scores are the positive-class softmax probabilities of the
fusion-stage classifier, thresholded at 0.5 for the confusion counts. AUC
is the trapezoidal area under the ROC curve computed in exact integer
arithmetic over tie groups, which coincides with the Mann-Whitney pair
count (ties credited one half).

Group comparison of united connectivity uses a Welch (unequal-variance)
two-sample t-test per edge with two-sided p-values from the Student-t
distribution at Welch-Satterthwaite degrees of freedom. ROI importance is
measured by shielding one region (zeroing its adjacency row/column and
feature row) at evaluation time and recording the drop in accuracy;
retraining per shielded region is available behind a flag.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats as sps

from . import autodiff as ad
from .data import Dataset, Subject
from .hpn import hpn_forward
from .model import encode_fv, gcn_forward
from .trainer import CvResult, Networks, SubjectTensors, TrainConfig, train_fold
from .prior import fit_prior


class SingleClassError(ValueError):
    """AUC is undefined when only one class is present."""


@dataclass
class Metrics:
    acc: float
    sen: float
    spe: float
    auc: float
    tp: int
    tn: int
    fp: int
    fn: int

    def to_dict(self):
        return {
            "acc": self.acc, "sen": self.sen, "spe": self.spe, "auc": self.auc,
            "tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
        }


@dataclass
class EdgeStats:
    p_values: np.ndarray          # (N, N) symmetric, unit diagonal
    significant_005: list         # [(i, j)] with p < 0.05, i < j
    significant_0001: list        # [(i, j)] with p < 0.001
    altered: np.ndarray           # group-mean difference on significant edges
    roi_frequency: np.ndarray     # (N,) significant-edge count per ROI
    mean_diff: np.ndarray         # unmasked group-mean difference


@dataclass
class NetworkStrength:
    """Altered-connection mass split by direction and intra/inter locus."""

    raw: dict                     # (direction, locus) -> summed |mass|
    normalized: dict              # same keys, max cell mapped to 1
    stage: str = ""


# ---------------------------------------------------------------------------
# model outputs
# ---------------------------------------------------------------------------

def subject_outputs(nets: Networks, subject: Subject):
    """Forward one subject through the best networks: (score, united connectivity)."""
    st = SubjectTensors(subject)
    z_hat = gcn_forward(nets.model.g1, st.adj, st.x)
    v_hat = encode_fv(nets.model.s, st.adj, st.v)
    m, logits = hpn_forward(nets.hpn, z_hat, v_hat)
    probs = ad.softmax_rows(logits).values[0]
    return float(probs[1]), m.values


def predict_scores(nets: Networks, subjects):
    return np.array([subject_outputs(nets, s)[0] for s in subjects])


def compute_metrics(labels, scores) -> Metrics:
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("both classes are required to compute AUC")

    pred = scores > 0.5
    tp = int(np.sum(pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))

    # Trapezoidal ROC area over tie groups in exact integer arithmetic:
    # area2 accumulates twice the unnormalized area.
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    area2 = 0
    tp_cum = 0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        d_tp = int(np.sum(sorted_labels[i:j] == 1))
        d_fp = (j - i) - d_tp
        area2 += (2 * tp_cum + d_tp) * d_fp
        tp_cum += d_tp
        i = j
    auc = area2 / (2 * n_pos * n_neg)

    return Metrics(
        acc=(tp + tn) / len(labels),
        sen=tp / (tp + fn),
        spe=tn / (tn + fp),
        auc=auc,
        tp=tp, tn=tn, fp=fp, fn=fn,
    )


def evaluate(nets: Networks, subjects) -> Metrics:
    labels = [s.label for s in subjects]
    return compute_metrics(labels, predict_scores(nets, subjects))


def evaluate_cv(cv: CvResult, ds: Dataset):
    """Per-fold test metrics on the best checkpoints, plus their means."""
    per_fold = []
    for state, (_, test_ids) in zip(cv.states, cv.splits):
        per_fold.append(evaluate(state.best_nets, [ds.subjects[i] for i in test_ids]))
    mean = {
        key: float(np.mean([getattr(m, key) for m in per_fold]))
        for key in ("acc", "sen", "spe", "auc")
    }
    return per_fold, mean


def uc_per_subject(cv: CvResult, ds: Dataset):
    """Out-of-fold united connectivity for every subject (index -> matrix)."""
    out = {}
    for state, (_, test_ids) in zip(cv.states, cv.splits):
        for i in test_ids:
            out[i] = subject_outputs(state.best_nets, ds.subjects[i])[1]
    return out


# ---------------------------------------------------------------------------
# ROI importance
# ---------------------------------------------------------------------------

def shield_roi(subject: Subject, roi: int) -> Subject:
    sc = subject.sc.copy()
    sc[roi, :] = 0.0
    sc[:, roi] = 0.0
    fts = subject.fts.copy()
    fts[roi, :] = 0.0
    return replace(subject, sc=sc, fts=fts)


def roi_importance(cv: CvResult, ds: Dataset, roi: int,
                   retrain: bool = False, cfg: TrainConfig | None = None) -> float:
    """One minus the mean cross-validated accuracy with the ROI shielded."""
    if not 0 <= roi < ds.n_rois:
        raise ValueError(f"roi {roi} out of range 0..{ds.n_rois - 1}")
    accs = []
    for state, (train_ids, test_ids) in zip(cv.states, cv.splits):
        test = [shield_roi(ds.subjects[i], roi) for i in test_ids]
        if retrain:
            if cfg is None:
                raise ValueError("retrain=True requires cfg")
            train = [shield_roi(ds.subjects[i], roi) for i in train_ids]
            train_ds = replace(ds, subjects=train)
            prior = None
            if cfg.prior_mode == "estimated":
                prior = fit_prior(train_ds, cfg.prior_m, ds.latent_dim, cfg.prior_seed_rois)
            seq = np.random.SeedSequence([cfg.seed, roi])
            retrained = train_fold(cfg, train, prior,
                                   (ds.n_rois, ds.fts_dim, ds.latent_dim), seed=seq)
            nets = retrained.best_nets
        else:
            nets = state.best_nets
        accs.append(evaluate(nets, test).acc)
    return 1.0 - float(np.mean(accs))


def roi_importance_all(cv: CvResult, ds: Dataset, retrain: bool = False,
                       cfg: TrainConfig | None = None):
    """Importance for every ROI plus the top-10 list (descending, index tiebreak)."""
    scores = np.array([roi_importance(cv, ds, r, retrain=retrain, cfg=cfg)
                       for r in range(ds.n_rois)])
    top = sorted(range(ds.n_rois), key=lambda r: (-scores[r], r))[:10]
    return scores, top


# ---------------------------------------------------------------------------
# edge statistics
# ---------------------------------------------------------------------------

def welch_t(a, b):
    """Welch two-sample t statistic and two-sided p-value."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each group needs at least 2 samples")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    se2 = va / na + vb / nb
    if se2 == 0.0:
        return 0.0, 1.0
    t = (a.mean() - b.mean()) / np.sqrt(se2)
    df = se2 ** 2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * sps.t.sf(abs(t), df)
    return float(t), float(p)


def edge_ttest(uc_group_a, uc_group_b) -> EdgeStats:
    """Per-edge Welch t-tests between two groups of united-connectivity matrices.

    Group a is conventionally the patient group, so positive ``mean_diff``
    entries are increased connections.
    """
    a = np.stack([np.asarray(m, dtype=np.float64) for m in uc_group_a])
    b = np.stack([np.asarray(m, dtype=np.float64) for m in uc_group_b])
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"group matrices disagree: {a.shape[1:]} vs {b.shape[1:]}")
    n = a.shape[1]
    p_values = np.ones((n, n))
    mean_diff = a.mean(axis=0) - b.mean(axis=0)
    np.fill_diagonal(mean_diff, 0.0)

    sig005, sig0001 = [], []
    for i in range(n):
        for j in range(i + 1, n):
            va = a[:, i, j].var(ddof=1)
            vb = b[:, i, j].var(ddof=1)
            if va / a.shape[0] + vb / b.shape[0] == 0.0:
                warnings.warn(f"degenerate edge ({i},{j}): zero variance in both groups")
                p = 1.0
            else:
                _, p = welch_t(a[:, i, j], b[:, i, j])
            p_values[i, j] = p_values[j, i] = p
            if p < 0.05:
                sig005.append((i, j))
            if p < 0.001:
                sig0001.append((i, j))

    altered = np.zeros((n, n))
    roi_frequency = np.zeros(n, dtype=int)
    for i, j in sig005:
        altered[i, j] = altered[j, i] = mean_diff[i, j]
        roi_frequency[i] += 1
        roi_frequency[j] += 1

    return EdgeStats(p_values, sig005, sig0001, altered, roi_frequency, mean_diff)


def altered_connections(uc_patients, uc_controls, stats: EdgeStats, partition,
                        stage: str = ""):
    """Altered-connection matrix plus direction/locus strength summary.

    Strengths sum increased (positive) and decreased (negative) mass over
    significant edges, split into intra-network (both endpoints in the same
    coarse region) and inter-network, then normalize so the largest
    absolute cell equals 1.
    """
    del uc_patients, uc_controls  # group means already folded into stats
    partition = np.asarray(partition, dtype=int)
    raw = {(d, l): 0.0 for d in ("increased", "decreased") for l in ("intra", "inter")}
    for i, j in stats.significant_005:
        delta = stats.altered[i, j]
        direction = "increased" if delta > 0 else "decreased"
        locus = "intra" if partition[i] == partition[j] else "inter"
        raw[(direction, locus)] += abs(delta)

    peak = max(raw.values())
    normalized = {k: (v / peak if peak > 0 else 0.0) for k, v in raw.items()}
    return stats.altered.copy(), NetworkStrength(raw=raw, normalized=normalized, stage=stage)


def export_edges(stats: EdgeStats, threshold: float, path) -> str:
    """CSV edge list (roi_i, roi_j, p, delta) below the p threshold, ascending p."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    n = stats.p_values.shape[0]
    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            p = stats.p_values[i, j]
            if p < threshold:
                rows.append((i, j, p, stats.mean_diff[i, j]))
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    with open(path, "w") as fh:
        fh.write("roi_i,roi_j,p,delta\n")
        for i, j, p, delta in rows:
            fh.write(f"{i},{j},{p!r},{delta!r}\n")
    return str(path)
