"""Trainable networks: GCN generators/encoders, classifier, pair discriminator.

All forward maps are pure functions of (parameters, inputs) built from the
autodiff primitives. Graph convolutions use the symmetric renormalized
adjacency with self-loops, Ahat = D^(-1/2) (A + I) D^(-1/2), which is
permutation-equivariant and precomputed per subject as a constant.

The pair discriminator scores a (data, representation) pair with three
subnetworks: the upper one contracts the data-domain matrix (N x d) to a
scalar, the lower one the representation (N x q), and the joint one a
learned projection of the data summed with the representation, coupling
the two domains. Each subnetwork is a three-stage contraction stack
(feature axis -> node axis -> full 16x16 contraction) ending in tanh, so
every subnetwork score lies strictly inside (-1, 1).
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import autodiff as ad
from .data import read_matrix, write_matrix

N_FILTERS = 16


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


def normalize_adjacency(a: np.ndarray) -> np.ndarray:
    """Symmetric renormalization with self-loops of a binary adjacency."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got {a.shape}")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :]


def adjacency_tensor(a: np.ndarray) -> ad.Tensor:
    return ad.Tensor(normalize_adjacency(a))


_ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "identity": lambda t: t,
}


class GcnLayer:
    def __init__(self, weight: ad.Tensor, activation: str):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = weight
        self.activation = activation

    def forward(self, adj_norm: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
        return _ACTIVATIONS[self.activation](ad.matmul(adj_norm, ad.matmul(x, self.weight)))


class GcnStack:
    """A short stack of graph-convolution layers (two, for every network here)."""

    def __init__(self, dims, activations, rng, name):
        self.name = name
        self.layers = [
            GcnLayer(
                ad.Tensor(glorot(rng, dims[i], dims[i + 1]), requires_grad=True,
                          name=f"{name}.l{i}.w"),
                activations[i],
            )
            for i in range(len(dims) - 1)
        ]

    def forward(self, adj_norm: ad.Tensor, x: ad.Tensor) -> ad.Tensor:
        h = x
        for layer in self.layers:
            h = layer.forward(adj_norm, h)
        return h

    def named_params(self):
        for layer in self.layers:
            yield layer.weight.name, layer.weight


class Mlp:
    """Two-layer perceptron on a single row vector, tanh hidden, linear output."""

    def __init__(self, in_dim, hidden, out_dim, rng, name):
        self.name = name
        self.w1 = ad.Tensor(glorot(rng, in_dim, hidden), requires_grad=True, name=f"{name}.w1")
        self.b1 = ad.Tensor(np.zeros((1, hidden)), requires_grad=True, name=f"{name}.b1")
        self.w2 = ad.Tensor(glorot(rng, hidden, out_dim), requires_grad=True, name=f"{name}.w2")
        self.b2 = ad.Tensor(np.zeros((1, out_dim)), requires_grad=True, name=f"{name}.b2")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        h = ad.tanh(ad.add(ad.matmul(x, self.w1), self.b1))
        return ad.add(ad.matmul(h, self.w2), self.b2)

    def named_params(self):
        for t in (self.w1, self.b1, self.w2, self.b2):
            yield t.name, t


class ContractionStack:
    """Three-stage contraction of an (n_nodes, in_dim) matrix to a tanh scalar."""

    def __init__(self, in_dim, n_nodes, rng, name):
        self.name = name
        self.w1 = ad.Tensor(glorot(rng, in_dim, N_FILTERS), requires_grad=True, name=f"{name}.w1")
        self.w2 = ad.Tensor(glorot(rng, n_nodes, N_FILTERS), requires_grad=True, name=f"{name}.w2")
        self.w3 = ad.Tensor(glorot(rng, N_FILTERS, N_FILTERS), requires_grad=True, name=f"{name}.w3")

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        h = ad.tanh(ad.matmul(x, self.w1))                  # (N, 16): feature axis
        h = ad.tanh(ad.matmul(ad.transpose(h), self.w2))    # (16, 16): node axis
        return ad.tanh(ad.sum(ad.mul(h, self.w3)))          # scalar

    def named_params(self):
        for t in (self.w1, self.w2, self.w3):
            yield t.name, t


class PairDiscriminator:
    """Scores (data N x d, representation N x q) pairs in (-1, 1).

    ``split=True`` disables the joint subnetwork (two independent critics),
    used to measure the value of the collaborative coupling.
    """

    def __init__(self, n_rois, fts_dim, latent_dim, rng, split=False):
        self.split = split
        self.data_proj = ad.Tensor(glorot(rng, fts_dim, latent_dim),
                                   requires_grad=True, name="d.proj")
        self.upper = ContractionStack(fts_dim, n_rois, rng, "d.upper")
        self.lower = ContractionStack(latent_dim, n_rois, rng, "d.lower")
        self.joint = ContractionStack(latent_dim, n_rois, rng, "d.joint")

    def score(self, data_item: ad.Tensor, rep_item: ad.Tensor) -> ad.Tensor:
        s_up = self.upper.forward(data_item)
        s_low = self.lower.forward(rep_item)
        if self.split:
            return ad.scalar_mul(ad.add(s_up, s_low), 0.5)
        s_joint = self.joint.forward(ad.add(ad.matmul(data_item, self.data_proj), rep_item))
        return ad.scalar_mul(ad.add(ad.add(s_up, s_low), s_joint), 1.0 / 3.0)

    def named_params(self):
        yield self.data_proj.name, self.data_proj
        for net in (self.upper, self.lower, self.joint):
            yield from net.named_params()


class ModelParams:
    """All trainable networks of the representation-learning stage."""

    def __init__(self, n_rois, fts_dim, latent_dim, rng,
                 hidden_c1=16, c1_axis="feature", split_discriminator=False):
        if c1_axis not in ("feature", "node"):
            raise ValueError(f"c1_axis must be 'feature' or 'node', got {c1_axis!r}")
        n, d, q = n_rois, fts_dim, latent_dim
        h = q  # hidden width of the graph convolutions
        self.n_rois, self.fts_dim, self.latent_dim = n, d, q
        self.c1_axis = c1_axis
        self.g1 = GcnStack([d, h, q], ["tanh", "tanh"], rng, "g1")
        self.g2 = GcnStack([q, h, d], ["tanh", "sigmoid"], rng, "g2")
        self.s = GcnStack([q, h, q], ["tanh", "tanh"], rng, "s")
        self.sp = GcnStack([q, h, q], ["tanh", "sigmoid"], rng, "sp")
        c1_in = n if c1_axis == "feature" else q
        self.c1 = Mlp(c1_in, hidden_c1, 2, rng, "c1")
        self.d = PairDiscriminator(n, d, q, rng, split=split_discriminator)

    def named_params(self):
        for net in (self.g1, self.g2, self.s, self.sp, self.c1, self.d):
            yield from net.named_params()

    def discriminator_names(self):
        return {name for name, _ in self.d.named_params()}


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def gcn_forward(stack: GcnStack, adj_norm: ad.Tensor, feats: ad.Tensor) -> ad.Tensor:
    return stack.forward(adj_norm, feats)


def encode_fv(s: GcnStack, adj_norm: ad.Tensor, v: ad.Tensor) -> ad.Tensor:
    """Broadcast the semantic row vector to every node, then graph-convolve."""
    n = adj_norm.values.shape[0]
    return s.forward(adj_norm, ad.broadcast_row(v, n))


def reconstruct(z_hat: ad.Tensor) -> ad.Tensor:
    """Adjacency reconstruction sigmoid(Z Z^T): symmetric, entries in (0, 1)."""
    return ad.sigmoid(ad.matmul(z_hat, ad.transpose(z_hat)))


def discriminate(d: PairDiscriminator, data_item: ad.Tensor, rep_item: ad.Tensor) -> ad.Tensor:
    return d.score(data_item, rep_item)


def classify_c1(params: ModelParams, rep: ad.Tensor) -> ad.Tensor:
    """Average the representation along the configured axis, then classify."""
    if params.c1_axis == "feature":
        pooled = ad.transpose(ad.row_mean(rep))   # (1, N)
    else:
        pooled = ad.col_mean(rep)                 # (1, q)
    return params.c1.forward(pooled)


# ---------------------------------------------------------------------------
# checkpoint IO (JSON index + one CSV per weight matrix, bit-exact)
# ---------------------------------------------------------------------------

def save_params(named_params, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    index = {}
    for name, tensor in named_params:
        fname = name.replace("/", "_") + ".csv"
        write_matrix(os.path.join(out_dir, fname), tensor.values)
        index[name] = {"file": fname, "shape": list(tensor.values.shape)}
    with open(os.path.join(out_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(named_params, in_dir):
    """Overwrite tensors in-place from a checkpoint directory."""
    index_path = os.path.join(in_dir, "index.json")
    if not os.path.isfile(index_path):
        raise FileNotFoundError(index_path)
    with open(index_path) as fh:
        index = json.load(fh)
    named = dict(named_params)
    if set(named) != set(index):
        missing = set(named).symmetric_difference(index)
        raise ValueError(f"checkpoint does not match model: mismatched params {sorted(missing)}")
    for name, tensor in named.items():
        values = read_matrix(os.path.join(in_dir, index[name]["file"]))
        if values.shape != tensor.values.shape:
            raise ValueError(
                f"checkpoint param {name}: shape {values.shape} != {tensor.values.shape}"
            )
        tensor.values = values
