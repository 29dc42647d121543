"""Differentiable loss terms: adversarial, reconstruction, classification, sparsity.

The adversarial pieces follow score-based critic conventions: the critic
loss rewards high scores on real pairs and low scores on generated ones,
and the generator loss is the negation of the generated-pair terms. The
real data item enters two of the three pairs, so its term carries weight
two; the combined adversarial objective is L_G + 0.1 L_D.

Reconstruction and classification are negated log-likelihoods (binary and
softmax cross-entropy), so every term is minimized. Predictions are
clamped to [1e-7, 1 - 1e-7] before logs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPS = 1e-7


@dataclass
class LossReport:
    """Per-step scalar summary of every loss term."""

    d_loss: float
    g_loss: float
    adv: float
    rec1: float
    rec2: float
    cls1: float
    cls2: float
    cls3: float
    sparse: float
    total: float

    @classmethod
    def build(cls, d_loss, g_loss, rec1, rec2, cls1, cls2, cls3, sparse, lam):
        adv = g_loss + 0.1 * d_loss
        total = adv + (rec1 + rec2) + (cls1 + cls2 + cls3) + lam * sparse
        return cls(d_loss, g_loss, adv, rec1, rec2, cls1, cls2, cls3, sparse, total)

    def to_dict(self):
        return {k: float(v) for k, v in self.__dict__.items()}


def adv_losses(d_z: ad.Tensor, d_x: ad.Tensor, d_gz: ad.Tensor,
               d_g1: ad.Tensor, d_s: ad.Tensor):
    """Critic loss, generator loss, and their 1 : 0.1 combination.

    Arguments are batch-mean discriminator scores: ``d_z``/``d_x`` on pairs
    containing the real representation/data, ``d_gz``/``d_g1``/``d_s`` on
    the pairs produced by the two generators and the encoder.
    """
    loss_d = ad.add(
        ad.add(ad.scalar_mul(d_z, -1.0), ad.scalar_mul(d_x, -2.0)),
        ad.add(ad.add(d_gz, d_g1), d_s),
    )
    loss_g = ad.scalar_mul(ad.add(ad.add(d_gz, d_g1), d_s), -1.0)
    loss_adv = ad.add(loss_g, ad.scalar_mul(loss_d, 0.1))
    return loss_d, loss_g, loss_adv


def bce(target, pred: ad.Tensor) -> ad.Tensor:
    """Mean negated binary cross-entropy of one target/prediction pair."""
    t = target.values if isinstance(target, ad.Tensor) else np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("bce: target entries must lie in [0, 1]")
    if t.shape != pred.values.shape:
        raise ad.ShapeMismatchError("bce", t.shape, pred.values.shape)
    p = ad.clip(pred, EPS, 1.0 - EPS)
    t_t = ad.Tensor(t)
    one_minus_t = ad.Tensor(1.0 - t)
    ll = ad.add(ad.mul(t_t, ad.log(p)),
                ad.mul(one_minus_t, ad.log(ad.sub(ad.Tensor(np.ones_like(t)), p))))
    return ad.scalar_mul(ad.sum(ll), -1.0 / t.size)


def rec_loss(x, x_rec, a, a_rec, v, v_rec) -> ad.Tensor:
    """Sum of the three reconstruction cross-entropies (features, adjacency, vector)."""
    return ad.add(ad.add(bce(x, x_rec), bce(a, a_rec)), bce(v, v_rec))


def cross_entropy(logits: ad.Tensor, label: int) -> ad.Tensor:
    """Softmax cross-entropy of a single logit row against an integer label."""
    n_classes = logits.values.shape[1]
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} out of range for {n_classes} classes")
    onehot = np.zeros((1, n_classes))
    onehot[0, label] = 1.0
    probs = ad.clip(ad.softmax_rows(logits), EPS, 1.0)
    return ad.scalar_mul(ad.sum(ad.mul(ad.Tensor(onehot), ad.log(probs))), -1.0)


def cls_loss(logits_c1_z: ad.Tensor, logits_c1_v: ad.Tensor,
             logits_c2: ad.Tensor, label: int) -> ad.Tensor:
    """Sum of the three classification cross-entropies."""
    return ad.add(
        ad.add(cross_entropy(logits_c1_z, label), cross_entropy(logits_c1_v, label)),
        cross_entropy(logits_c2, label),
    )


def sparse_loss(m: ad.Tensor) -> ad.Tensor:
    """L1 norm of the united connectivity matrix."""
    return ad.abs_sum(m)
