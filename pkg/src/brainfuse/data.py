"""On-disk dataset formats, loaders, and seeded synthetic cohorts.

A subject bundles three modalities: a binary structural-connectivity
adjacency (``sc``), a per-node feature matrix (``fts``, min-max normalized
to [0, 1] at load time because the reconstruction losses are binary
cross-entropies), and a per-subject semantic vector (``fv``).

Matrices live in headerless CSV files written with full-precision float
repr so that save -> load round-trips are bit-exact; dataset metadata
lives in a JSON manifest.

``synthesize_cohort`` builds two-group cohorts with planted abnormal
connections: a stochastic block model for structural connectivity whose
edge probabilities are shifted on planted edges, a latent factor model for
node features with a correlated per-edge signal shift in the patient
group, and class-conditional Gaussian semantic vectors. Generation is a
pure function of the config, so cohorts are reproducible from the seed.

Each planted edge owns one feature column (``signal_column``): the shared
per-subject signal is written only to the two entries (i, col) and
(j, col), which keeps signals from distinct edges from cancelling on
shared nodes and makes every planted edge independently detectable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np


class DataError(Exception):
    """Base class for dataset loading/validation failures."""


class MissingFileError(DataError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {path}")


class MatrixShapeError(DataError):
    def __init__(self, what, expected, actual):
        super().__init__(f"{what}: expected shape {expected}, got {actual}")


class AsymmetricMatrixError(DataError):
    def __init__(self, what, i, j):
        self.index = (i, j)
        super().__init__(f"{what}: entry ({i},{j}) != ({j},{i})")


class NonFiniteDataError(DataError):
    def __init__(self, what):
        super().__init__(f"{what}: contains NaN or infinite values")


class InvalidValueError(DataError):
    pass


class InvalidConfigError(DataError):
    pass


# Standard 90-region AAL abbreviations (odd indices left, even right).
AAL90_NAMES = [
    "PreCG.L", "PreCG.R", "SFGdor.L", "SFGdor.R", "ORBsup.L", "ORBsup.R",
    "MFG.L", "MFG.R", "ORBmid.L", "ORBmid.R", "IFGoperc.L", "IFGoperc.R",
    "IFGtriang.L", "IFGtriang.R", "ORBinf.L", "ORBinf.R", "ROL.L", "ROL.R",
    "SMA.L", "SMA.R", "OLF.L", "OLF.R", "SFGmed.L", "SFGmed.R",
    "ORBsupmed.L", "ORBsupmed.R", "REC.L", "REC.R", "INS.L", "INS.R",
    "ACG.L", "ACG.R", "DCG.L", "DCG.R", "PCG.L", "PCG.R", "HIP.L", "HIP.R",
    "PHG.L", "PHG.R", "AMYG.L", "AMYG.R", "CAL.L", "CAL.R", "CUN.L", "CUN.R",
    "LING.L", "LING.R", "SOG.L", "SOG.R", "MOG.L", "MOG.R", "IOG.L", "IOG.R",
    "FFG.L", "FFG.R", "PoCG.L", "PoCG.R", "SPG.L", "SPG.R", "IPL.L", "IPL.R",
    "SMG.L", "SMG.R", "ANG.L", "ANG.R", "PCUN.L", "PCUN.R", "PCL.L", "PCL.R",
    "CAU.L", "CAU.R", "PUT.L", "PUT.R", "PAL.L", "PAL.R", "THA.L", "THA.R",
    "HES.L", "HES.R", "STG.L", "STG.R", "TPOsup.L", "TPOsup.R", "MTG.L",
    "MTG.R", "TPOmid.L", "TPOmid.R", "ITG.L", "ITG.R",
]

# Default coarse 5-region split of the AAL-90 atlas used for intra/inter
# network summaries: 0 frontal, 1 subcortical-central (insula, cingulate,
# basal ganglia, thalamus), 2 temporal, 3 occipital, 4 parietal. This is a
# plain lobe table, overridable through the manifest's "partition" field.
AAL90_LOBE_PARTITION = (
    [0] * 28                      # PreCG..REC: frontal
    + [1] * 8                     # INS, ACG, DCG, PCG: central
    + [2] * 6                     # HIP, PHG, AMYG: medial temporal
    + [3] * 12                    # CAL..IOG: occipital
    + [2] * 2                     # FFG
    + [4] * 14                    # PoCG..PCL: parietal
    + [1] * 8                     # CAU..THA: subcortical
    + [2] * 12                    # HES..ITG: temporal
)

DIRECTIONS = ("increased", "decreased")


@dataclass
class Subject:
    """One multimodal sample."""

    id: str
    sc: np.ndarray       # (N, N) binary symmetric, zero diagonal
    fts: np.ndarray      # (N, d) in [0, 1]
    fv: np.ndarray       # (q,)
    label: int           # 0 control, 1 patient


@dataclass
class Dataset:
    subjects: list
    n_rois: int
    fts_dim: int
    latent_dim: int
    roi_names: list
    network_partition: list                 # ROI index -> region id
    planted_edges: list | None = None       # [(i, j, direction)], i < j

    def by_label(self, label: int):
        return [s for s in self.subjects if s.label == label]

    def subset(self, indices) -> "Dataset":
        return replace(self, subjects=[self.subjects[i] for i in indices])


@dataclass
class SynthConfig:
    n_per_group: int
    seed: int
    n_altered: int = 8
    effect_size: float = 1.5
    block_sizes: tuple = (8, 8)
    noise_level: float = 0.5
    fts_dim: int = 24
    latent_dim: int = 8
    # Within/between-community edge probabilities of the block model and
    # the scale/spread of the per-edge node-feature signal. The spread is
    # kept below the base noise so positive shifts do not inflate the
    # per-subject min-max range and wash out under normalization.
    p_within: float = 0.6
    p_between: float = 0.1
    fts_signal_scale: float = 0.4
    fts_signal_noise: float = 0.5

    def validate(self):
        n = sum(self.block_sizes)
        if self.n_per_group < 1:
            raise InvalidConfigError("n_per_group must be >= 1")
        if not self.block_sizes or any(b < 1 for b in self.block_sizes):
            raise InvalidConfigError("block_sizes must be positive")
        if self.n_altered < 0 or self.n_altered > n * (n - 1) // 2:
            raise InvalidConfigError("n_altered must be in [0, N(N-1)/2]")
        if self.effect_size < 0:
            raise InvalidConfigError("effect_size must be >= 0")
        if self.noise_level < 0:
            raise InvalidConfigError("noise_level must be >= 0")
        if self.fts_dim < 1 or self.latent_dim < 1:
            raise InvalidConfigError("fts_dim and latent_dim must be >= 1")


# ---------------------------------------------------------------------------
# CSV helpers (full-precision, bit-exact round-trip)
# ---------------------------------------------------------------------------

def write_matrix(path, arr: np.ndarray):
    arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
    with open(path, "w") as fh:
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write("\n")


def read_matrix(path) -> np.ndarray:
    if not os.path.isfile(path):
        raise MissingFileError(path)
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.float64)


def _minmax_unit(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# load / save
# ---------------------------------------------------------------------------

def _validate_sc(sc: np.ndarray, who: str):
    if not np.all(np.isfinite(sc)):
        raise NonFiniteDataError(f"{who} sc")
    bad = np.argwhere(sc != sc.T)
    if bad.size:
        i, j = int(bad[0][0]), int(bad[0][1])
        raise AsymmetricMatrixError(f"{who} sc", i, j)
    if np.any(np.diag(sc) != 0):
        raise InvalidValueError(f"{who} sc: diagonal must be zero")
    if not np.all(np.isin(sc, (0.0, 1.0))):
        raise InvalidValueError(f"{who} sc: entries must be 0 or 1")


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset; per-subject fts is min-max normalized."""
    if not os.path.isfile(manifest_path):
        raise MissingFileError(manifest_path)
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"manifest is not valid JSON: {exc}") from exc

    for key in ("n_rois", "fts_dim", "latent_dim", "roi_names", "partition", "subjects"):
        if key not in manifest:
            raise InvalidConfigError(f"manifest missing key {key!r}")

    n = int(manifest["n_rois"])
    d = int(manifest["fts_dim"])
    q = int(manifest["latent_dim"])
    roi_names = list(manifest["roi_names"])
    partition = [int(p) for p in manifest["partition"]]
    if len(roi_names) != n:
        raise InvalidConfigError(f"roi_names has {len(roi_names)} entries, expected {n}")
    if len(partition) != n:
        raise InvalidConfigError(f"partition covers {len(partition)} ROIs, expected {n}")
    regions = sorted(set(partition))
    if regions and regions != list(range(len(regions))):
        raise InvalidValueError("partition region ids must be contiguous from 0")

    base = os.path.dirname(os.path.abspath(manifest_path))
    subjects = []
    for entry in manifest["subjects"]:
        sid = str(entry["id"])
        label = int(entry["label"])
        if label not in (0, 1):
            raise InvalidValueError(f"subject {sid}: label must be 0 or 1")

        sc = read_matrix(os.path.join(base, entry["sc_csv"]))
        if sc.shape != (n, n):
            raise MatrixShapeError(f"subject {sid} sc", (n, n), sc.shape)
        _validate_sc(sc, f"subject {sid}")

        fts = read_matrix(os.path.join(base, entry["fts_csv"]))
        if fts.shape != (n, d):
            raise MatrixShapeError(f"subject {sid} fts", (n, d), fts.shape)
        if not np.all(np.isfinite(fts)):
            raise NonFiniteDataError(f"subject {sid} fts")

        fv = read_matrix(os.path.join(base, entry["fv_csv"])).ravel()
        if fv.shape != (q,):
            raise MatrixShapeError(f"subject {sid} fv", (q,), fv.shape)
        if not np.all(np.isfinite(fv)):
            raise NonFiniteDataError(f"subject {sid} fv")

        subjects.append(Subject(sid, sc, _minmax_unit(fts), fv, label))

    planted = None
    if manifest.get("planted_edges") is not None:
        planted = []
        for i, j, direction in manifest["planted_edges"]:
            i, j = int(i), int(j)
            if not (0 <= i < j < n) or direction not in DIRECTIONS:
                raise InvalidValueError(f"invalid planted edge ({i},{j},{direction})")
            planted.append((i, j, direction))

    return Dataset(subjects, n, d, q, roi_names, partition, planted)


def save_dataset(ds: Dataset, out_dir) -> str:
    """Write per-subject CSVs plus a manifest; returns the manifest path.

    The manifest is written last (atomically via rename), so a failed run
    never leaves a readable but incomplete dataset behind.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for s in ds.subjects:
        names = {
            "sc_csv": f"{s.id}_sc.csv",
            "fts_csv": f"{s.id}_fts.csv",
            "fv_csv": f"{s.id}_fv.csv",
        }
        write_matrix(os.path.join(out_dir, names["sc_csv"]), s.sc)
        write_matrix(os.path.join(out_dir, names["fts_csv"]), s.fts)
        write_matrix(os.path.join(out_dir, names["fv_csv"]), s.fv)
        entries.append({"id": s.id, "label": int(s.label), **names})

    manifest = {
        "n_rois": ds.n_rois,
        "fts_dim": ds.fts_dim,
        "latent_dim": ds.latent_dim,
        "roi_names": list(ds.roi_names),
        "partition": [int(p) for p in ds.network_partition],
        "subjects": entries,
    }
    if ds.planted_edges is not None:
        manifest["planted_edges"] = [[i, j, d] for i, j, d in ds.planted_edges]

    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


# ---------------------------------------------------------------------------
# synthetic cohorts
# ---------------------------------------------------------------------------

def signal_column(edge_rank: int, fts_dim: int) -> int:
    """Feature column carrying the signal of the k-th planted edge (sorted order)."""
    return edge_rank % fts_dim


def synthesize_cohort(cfg: SynthConfig) -> Dataset:
    """Generate a two-group cohort with planted abnormal connections.

    Group 0 are controls, group 1 patients. Planted edges shift the
    patient group's structural edge probability by +-effect_size/2
    (clipped) and add a correlated node-feature signal whose group mean
    shift is +-effect_size along the edge's two rows.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = sum(cfg.block_sizes)
    d, q = cfg.fts_dim, cfg.latent_dim
    n_blocks = len(cfg.block_sizes)

    blocks = np.repeat(np.arange(n_blocks), cfg.block_sizes)

    # Planted edge set: distinct upper-triangle pairs with a direction each.
    iu, ju = np.triu_indices(n, k=1)
    pick = rng.choice(len(iu), size=cfg.n_altered, replace=False)
    directions = rng.integers(0, 2, size=cfg.n_altered)
    planted = sorted(
        (int(iu[p]), int(ju[p]), DIRECTIONS[directions[k]])
        for k, p in enumerate(pick)
    )

    # Edge probability matrices per group.
    same_block = blocks[:, None] == blocks[None, :]
    p_base = np.where(same_block, cfg.p_within, cfg.p_between)
    p_patient = p_base.copy()
    for i, j, direction in planted:
        shift = 0.5 * cfg.effect_size * (1.0 if direction == "increased" else -1.0)
        p_patient[i, j] = p_patient[j, i] = np.clip(p_base[i, j] + shift, 0.02, 0.98)

    signal_cols = [signal_column(k, d) for k in range(len(planted))]

    # Node-feature factor loadings shared by the whole cohort.
    loadings = np.where(blocks[:, None] == np.arange(n_blocks)[None, :], 1.0, 0.15)
    factors = rng.normal(size=(n_blocks, d))

    # Semantic-vector class means separated by effect_size.
    direction_fv = rng.normal(size=q)
    direction_fv /= np.linalg.norm(direction_fv)
    fv_means = (np.zeros(q), cfg.effect_size * direction_fv)

    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x))

    subjects = []
    for label, prefix in ((0, "c"), (1, "p")):
        probs = p_base if label == 0 else p_patient
        for idx in range(cfg.n_per_group):
            u = rng.random(size=(n, n))
            sc = (np.triu(u, k=1) < np.triu(probs, k=1)).astype(np.float64)
            sc = sc + sc.T

            fts = loadings @ factors + cfg.noise_level * rng.normal(size=(n, d))
            for (i, j, direction), col in zip(planted, signal_cols):
                sign = 1.0 if direction == "increased" else -1.0
                mean = sign * cfg.effect_size if label == 1 else 0.0
                g = rng.normal(loc=mean, scale=cfg.fts_signal_noise)
                fts[i, col] += cfg.fts_signal_scale * g
                fts[j, col] += cfg.fts_signal_scale * g
            fts = _minmax_unit(fts)

            fv = sigmoid(fv_means[label] + rng.normal(size=q))
            subjects.append(Subject(f"{prefix}{idx:03d}", sc, fts, fv, label))

    roi_names = [f"ROI{r:02d}" for r in range(n)]
    return Dataset(subjects, n, d, q, roi_names, [int(b) for b in blocks], planted)


# ---------------------------------------------------------------------------
# cross-validation splits
# ---------------------------------------------------------------------------

def kfold_split(ds: Dataset, k: int, seed: int):
    """Stratified k-fold split over subject indices.

    Folds are disjoint, cover all subjects, and per-class fold sizes
    differ by at most one.
    """
    if k < 2:
        raise InvalidConfigError("k must be >= 2")
    labels = np.array([s.label for s in ds.subjects])
    rng = np.random.default_rng(seed)
    test_folds = [[] for _ in range(k)]
    for cls in sorted(set(labels.tolist())):
        ids = np.flatnonzero(labels == cls)
        if len(ids) < k:
            raise InvalidConfigError(
                f"class {cls} has {len(ids)} subjects, fewer than k={k}"
            )
        ids = ids[rng.permutation(len(ids))]
        for pos, sid in enumerate(ids):
            test_folds[pos % k].append(int(sid))

    all_ids = set(range(len(ds.subjects)))
    splits = []
    for fold in test_folds:
        test = sorted(fold)
        train = sorted(all_ids.difference(test))
        splits.append((train, test))
    return splits
