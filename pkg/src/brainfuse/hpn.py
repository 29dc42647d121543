"""Hypergraph fusion of the two learned representations into united connectivity.

One hypergraph is built per representation: every node centers a hyperedge
containing itself and its k nearest neighbours in representation space
(Euclidean distance, ties toward the lower index), giving an N x N
incidence matrix per modality. Hyperedge features are aggregated with the
edge-degree normalization De^(-1/2) H^T De^(-1/2); both aggregates are
concatenated, mixed by a single linear map, and pushed back to vertices
through the averaged incidence with vertex-degree normalization. The fused
vertex features F yield the united connectivity M = sigmoid(F F^T), whose
row-major flattening feeds the downstream classifier.

Neighbour search happens on the current representation values each forward
pass and is treated as a constant within a backward pass (no gradient
flows through the incidence structure). With k = 0 both incidences are the
identity and the whole module reduces to a one-layer dense transform of
the concatenated representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import Mlp, glorot


@dataclass
class Hypergraph:
    incidence: np.ndarray      # (N, N): rows nodes, columns hyperedges
    edge_degree: np.ndarray    # (N,) column sums
    vertex_degree: np.ndarray  # (N,) row sums


class HpnParams:
    def __init__(self, n_rois, latent_dim, k, lam, rng, hidden_c2=32):
        if not 0 <= k < n_rois:
            raise ValueError(f"k must be in [0, {n_rois - 1}], got {k}")
        self.n_rois = n_rois
        self.latent_dim = latent_dim
        self.k = k
        self.lam = float(lam)
        self.fusion_w = ad.Tensor(glorot(rng, 2 * latent_dim, latent_dim),
                                  requires_grad=True, name="hpn.fusion_w")
        self.c2 = Mlp(n_rois * n_rois, hidden_c2, 2, rng, "c2")

    def named_params(self):
        yield self.fusion_w.name, self.fusion_w
        yield from self.c2.named_params()


def build_hypergraph(rep: np.ndarray, k: int) -> Hypergraph:
    """KNN hyperedges over representation rows; column e is the edge centered at e."""
    rep = np.asarray(rep, dtype=np.float64)
    n = rep.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the node count {n}")
    h = np.zeros((n, n))
    diffs = rep[:, None, :] - rep[None, :, :]
    dist = np.sqrt((diffs * diffs).sum(axis=2))
    np.fill_diagonal(dist, np.inf)  # the center joins explicitly, not via KNN
    for e in range(n):
        order = np.argsort(dist[:, e], kind="stable")
        h[order[:k], e] = 1.0
        h[e, e] = 1.0
    return Hypergraph(h, h.sum(axis=0), h.sum(axis=1))


def hyperedge_aggregate(hg: Hypergraph, rep: ad.Tensor) -> ad.Tensor:
    """Edge-degree normalized vertex-to-hyperedge aggregation."""
    if hg.incidence.shape[0] != rep.values.shape[0]:
        raise ValueError(
            f"incidence {hg.incidence.shape} does not match representation {rep.values.shape}"
        )
    d_inv = 1.0 / np.sqrt(hg.edge_degree)
    mat = d_inv[:, None] * hg.incidence.T * d_inv[None, :]
    return ad.matmul(ad.Tensor(mat), rep)


def fuse(hg_z: Hypergraph, hg_v: Hypergraph, z_e: ad.Tensor, v_e: ad.Tensor,
         fusion_w: ad.Tensor) -> ad.Tensor:
    """Mix both hyperedge aggregates and convolve back to vertex features."""
    h = 0.5 * (hg_z.incidence + hg_v.incidence)
    d_inv = 1.0 / np.sqrt(h.sum(axis=1))
    mat = d_inv[:, None] * h * d_inv[None, :]
    mixed = ad.matmul(ad.concat_cols(z_e, v_e), fusion_w)
    return ad.matmul(ad.Tensor(mat), mixed)


def united_connectivity(f: ad.Tensor) -> ad.Tensor:
    """M = sigmoid(F F^T): symmetric with entries in (0, 1)."""
    return ad.sigmoid(ad.matmul(f, ad.transpose(f)))


def classify_c2(params: HpnParams, m: ad.Tensor) -> ad.Tensor:
    n = params.n_rois
    return params.c2.forward(ad.reshape(m, 1, n * n))


def hpn_forward(params: HpnParams, z_hat: ad.Tensor, v_hat: ad.Tensor):
    """Full fusion pass: returns (united connectivity M, classifier logits)."""
    hg_z = build_hypergraph(z_hat.values, params.k)
    hg_v = build_hypergraph(v_hat.values, params.k)
    z_e = hyperedge_aggregate(hg_z, z_hat)
    v_e = hyperedge_aggregate(hg_v, v_hat)
    f = fuse(hg_z, hg_v, z_e, v_e, params.fusion_w)
    m = united_connectivity(f)
    return m, classify_c2(params, m)
