"""Latent prior estimation: diversity-based prototype ROIs, PCA, Gaussian KDE.

The prior over latent node representations is estimated from training
data in three steps. A prototype subset of ROIs is selected by greedy
MAP inference under a determinantal point process whose kernel is the
ridge-stabilized mean adjacency (plus self-loops), seeded with ROIs known
to be disease-related. The node features of the prototypes, pooled across
all training subjects, are projected to the latent dimension with PCA.
A diagonal-bandwidth Gaussian kernel density estimate over the projected
rows (Scott's rule per dimension) is the prior; latent matrices are drawn
row-wise from the resulting mixture.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .data import Dataset, read_matrix, write_matrix

RIDGE = 1e-3
MIN_BANDWIDTH = 1e-12


class PriorError(ValueError):
    pass


@dataclass
class PriorModel:
    prototypes: list            # selected ROI indices, |U0| = m
    pca_mean: np.ndarray        # (d,)
    pca_basis: np.ndarray       # (d, q), orthonormal columns
    kde_centers: np.ndarray     # (n_centers, q)
    bandwidth: np.ndarray       # (q,), strictly positive
    seed_rois: list


def dpp_select(kernel: np.ndarray, seed_rois, m: int):
    """Greedy max-determinant subset of size m containing ``seed_rois``.

    At each step the index with the largest det(kernel restricted to the
    selection) is added; ties break toward the lowest index.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    n = kernel.shape[0]
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise PriorError(f"kernel must be square, got {kernel.shape}")
    if not np.allclose(kernel, kernel.T, atol=1e-10):
        raise PriorError("kernel must be symmetric")
    seeds = sorted(set(int(r) for r in seed_rois))
    if any(r < 0 or r >= n for r in seeds):
        raise PriorError(f"seed ROI out of range 0..{n - 1}")
    if m > n:
        raise PriorError(f"m={m} exceeds kernel size {n}")
    if m < len(seeds):
        raise PriorError(f"m={m} smaller than seed set of size {len(seeds)}")

    selected = list(seeds)
    while len(selected) < m:
        best_idx = None
        best_logdet = -np.inf
        for cand in range(n):
            if cand in selected:
                continue
            sub = kernel[np.ix_(selected + [cand], selected + [cand])]
            sign, logdet = np.linalg.slogdet(sub)
            score = logdet if sign > 0 else -np.inf
            if score > best_logdet:
                best_logdet = score
                best_idx = cand
        if best_idx is None:
            # All candidate extensions are singular; fall back to the
            # lowest unselected index so the contract |U0| = m still holds.
            best_idx = min(i for i in range(n) if i not in selected)
        selected.append(best_idx)
    return sorted(selected)


def fit_prior(train: Dataset, m: int, q: int, seed_rois=()) -> PriorModel:
    """Estimate the latent prior from the training split (both classes pooled)."""
    if not train.subjects:
        raise PriorError("training set is empty")
    n = train.n_rois
    d = train.fts_dim

    adj_mean = np.zeros((n, n))
    for s in train.subjects:
        adj_mean += s.sc + np.eye(n)
    adj_mean /= len(train.subjects)
    kernel = adj_mean + RIDGE * np.eye(n)

    prototypes = dpp_select(kernel, seed_rois, m)

    rows = np.concatenate([s.fts[prototypes, :] for s in train.subjects], axis=0)
    n_rows = rows.shape[0]
    if q > min(n_rows - 1, d):
        raise PriorError(
            f"q={q} exceeds the rank bound min({n_rows}-1, {d}) of the pooled prototypes"
        )

    mean = rows.mean(axis=0)
    centered = rows - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = vt[:q].T
    centers = centered @ basis

    if centers.shape[0] > 1:
        sigma = centers.std(axis=0, ddof=1)
    else:
        sigma = np.ones(q)
    bandwidth = np.maximum(sigma * centers.shape[0] ** (-1.0 / (q + 4)), MIN_BANDWIDTH)

    return PriorModel(prototypes, mean, basis, centers, bandwidth, sorted(set(map(int, seed_rois))))


def density(p: PriorModel, z) -> float:
    """KDE density at a single latent point (length-q vector)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    diffs = (z[None, :] - p.kde_centers) / p.bandwidth[None, :]
    log_norm = np.log(p.bandwidth).sum() + 0.5 * len(z) * np.log(2.0 * np.pi)
    log_kernels = -0.5 * (diffs * diffs).sum(axis=1) - log_norm
    return float(np.exp(log_kernels).mean())


def sample_z(p: PriorModel, n_rows: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an (n_rows, q) latent matrix from the KDE mixture."""
    idx = rng.integers(0, p.kde_centers.shape[0], size=n_rows)
    noise = rng.standard_normal((n_rows, p.kde_centers.shape[1]))
    return p.kde_centers[idx] + noise * p.bandwidth[None, :]


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_prior(p: PriorModel, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    write_matrix(os.path.join(out_dir, "pca_mean.csv"), p.pca_mean)
    write_matrix(os.path.join(out_dir, "pca_basis.csv"), p.pca_basis)
    write_matrix(os.path.join(out_dir, "kde_centers.csv"), p.kde_centers)
    meta = {
        "prototypes": [int(i) for i in p.prototypes],
        "seed_rois": [int(i) for i in p.seed_rois],
        "bandwidth": [float(b) for b in p.bandwidth],
        "pca_mean_csv": "pca_mean.csv",
        "pca_basis_csv": "pca_basis.csv",
        "kde_centers_csv": "kde_centers.csv",
    }
    path = os.path.join(out_dir, "prior.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_prior(prior_dir) -> PriorModel:
    path = os.path.join(prior_dir, "prior.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        meta = json.load(fh)
    mean = read_matrix(os.path.join(prior_dir, meta["pca_mean_csv"])).ravel()
    basis = read_matrix(os.path.join(prior_dir, meta["pca_basis_csv"]))
    centers = read_matrix(os.path.join(prior_dir, meta["kde_centers_csv"]))
    return PriorModel(
        prototypes=[int(i) for i in meta["prototypes"]],
        pca_mean=mean,
        pca_basis=basis,
        kde_centers=centers,
        bandwidth=np.array(meta["bandwidth"], dtype=np.float64),
        seed_rois=[int(i) for i in meta["seed_rois"]],
    )
