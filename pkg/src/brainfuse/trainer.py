"""Alternating adversarial optimization with a staged fusion schedule.

Each training step runs up to three phases on one mini-batch: a critic
update (momentum SGD on the critic loss, followed by weight clipping), a
main update of the generators/encoder/decoder/first classifier on the
generator, reconstruction, and representation-classification losses, and,
once the fusion stage is unlocked, an update of the fusion weights and the
downstream classifier on the classification + sparsity objective.

Learning-rate policy: the main rate drops from its initial value to the
late value at the phase breakpoint (epoch 100, or half the run for short
runs); the critic rate is constant; the fusion rate is zero before the
breakpoint and then follows polynomial decay (1 - iter/max_iter)^power
counted over post-breakpoint steps. Until the breakpoint the fusion
parameters are never touched.

``prior_mode`` selects where latent samples come from: ``estimated`` draws
from a fitted prior model, ``normal`` from a standard Gaussian, and
``none`` removes the adversarial machinery entirely (the critic is never
evaluated or updated).
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as lo
from .data import Dataset, Subject, kfold_split, read_matrix
from .hpn import HpnParams, hpn_forward
from .model import (
    ModelParams,
    adjacency_tensor,
    classify_c1,
    discriminate,
    encode_fv,
    gcn_forward,
    load_params,
    reconstruct,
    save_params,
)
from .prior import PriorModel, fit_prior, sample_z

PRIOR_MODES = ("none", "normal", "estimated")


class TrainingDivergedError(RuntimeError):
    """A loss term became non-finite; carries the name of the first bad tensor."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr_main: float = 1e-3
    lr_main_late: float = 1e-4
    lr_disc: float = 1e-4
    lr_hpn: float = 1e-3
    poly_power: float = 0.9
    momentum: float = 0.9
    clip: float = 0.05
    k: int = 4
    sparse_lambda: float = 1e-4
    prior_mode: str = "estimated"
    split_discriminator: bool = False
    c1_axis: str = "feature"
    hidden_c1: int = 16
    hidden_c2: int = 32
    prior_m: int = 10
    prior_seed_rois: tuple = ()
    folds: int = 10
    seed: int = 0

    @property
    def breakpoint_epoch(self) -> int:
        # Keeps the two-phase structure intact for short desk-scale runs.
        return min(100, self.epochs // 2)

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_main", "lr_main_late", "lr_disc", "lr_hpn", "momentum", "clip"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")

    def to_dict(self):
        d = asdict(self)
        d["prior_seed_rois"] = list(self.prior_seed_rois)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in d.items()})
        cfg.prior_seed_rois = tuple(cfg.prior_seed_rois)
        cfg.validate()
        return cfg


def lr_schedule(cfg: TrainConfig, epoch: int, iteration: int, max_iter: int):
    """(main, critic, fusion) learning rates for one step.

    ``iteration``/``max_iter`` count post-breakpoint steps, so the fusion
    rate starts at its initial value and decays polynomially to zero.
    """
    if not 0 <= iteration <= max(max_iter, 0):
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    bp = cfg.breakpoint_epoch
    main = cfg.lr_main if epoch < bp else cfg.lr_main_late
    if epoch < bp:
        hpn = 0.0
    else:
        hpn = cfg.lr_hpn * (1.0 - iteration / max_iter) ** cfg.poly_power
    return main, cfg.lr_disc, hpn


class Networks:
    """The full trainable parameter set (representation stage + fusion stage)."""

    def __init__(self, cfg: TrainConfig, n_rois, fts_dim, latent_dim, rng):
        self.dims = (n_rois, fts_dim, latent_dim)
        self.model = ModelParams(
            n_rois, fts_dim, latent_dim, rng,
            hidden_c1=cfg.hidden_c1, c1_axis=cfg.c1_axis,
            split_discriminator=cfg.split_discriminator,
        )
        self.hpn = HpnParams(n_rois, latent_dim, cfg.k, cfg.sparse_lambda, rng,
                             hidden_c2=cfg.hidden_c2)
        self._cfg = cfg

    def named_params(self):
        yield from self.model.named_params()
        yield from self.hpn.named_params()

    def clone(self) -> "Networks":
        twin = Networks(self._cfg, *self.dims, np.random.default_rng(0))
        mine = dict(self.named_params())
        for name, tensor in twin.named_params():
            tensor.values = mine[name].values.copy()
        return twin


class SubjectTensors:
    """Per-subject constant tensors, precomputed once per fold."""

    __slots__ = ("adj", "x", "v", "a", "label", "id")

    def __init__(self, s: Subject):
        self.adj = adjacency_tensor(s.sc)
        self.x = ad.Tensor(s.fts)
        self.v = ad.Tensor(s.fv.reshape(1, -1))
        self.a = ad.Tensor(s.sc)
        self.label = int(s.label)
        self.id = s.id


class TrainState:
    def __init__(self, cfg: TrainConfig, nets: Networks, rng: np.random.Generator):
        self.cfg = cfg
        self.nets = nets
        self.rng = rng
        self.velocity = {}
        self.epoch = 0
        self.history = []
        self.lr_trace = []
        self.best_loss = math.inf
        self.best_epoch = -1
        self.best_nets = nets.clone()

    def zero_grads(self):
        for _, t in self.nets.named_params():
            t.grad = None

    def _update_group(self, named, lr: float):
        mu = self.cfg.momentum
        for name, t in named:
            if t.grad is None:
                continue
            vel = self.velocity.get(name)
            if vel is None:
                vel = np.zeros_like(t.values)
            vel = mu * vel - lr * t.grad
            self.velocity[name] = vel
            t.values = t.values + vel

    def _clip_discriminator(self):
        c = self.cfg.clip
        for _, t in self.nets.model.d.named_params():
            np.clip(t.values, -c, c, out=t.values)


def _check_finite(name: str, t: ad.Tensor):
    if not np.all(np.isfinite(t.values)):
        raise TrainingDivergedError(f"non-finite loss tensor: {name}")


def _draw_latents(state: TrainState, batch, prior):
    mode = state.cfg.prior_mode
    n = state.nets.dims[0]
    q = state.nets.dims[2]
    if mode == "estimated":
        if prior is None:
            raise ValueError("prior_mode='estimated' requires a fitted PriorModel")
        return [ad.Tensor(sample_z(prior, n, state.rng)) for _ in batch]
    if mode == "normal":
        return [ad.Tensor(state.rng.standard_normal((n, q))) for _ in batch]
    return [None] * len(batch)


def train_step(state: TrainState, batch, prior, lrs) -> lo.LossReport:
    """One optimization step over a mini-batch of SubjectTensors."""
    cfg = state.cfg
    nets = state.nets
    model, hpn = nets.model, nets.hpn
    lr_main, lr_disc, lr_hpn = lrs
    mode = cfg.prior_mode

    zs = _draw_latents(state, batch, prior)
    d_loss_val = 0.0
    g_loss_val = 0.0

    # --- critic phase ---
    if mode != "none":
        state.zero_grads()
        reals, on_gz, on_g1, on_s = [], [], [], []
        for st, z in zip(batch, zs):
            z_hat = gcn_forward(model.g1, st.adj, st.x)
            v_hat = encode_fv(model.s, st.adj, st.v)
            x_hat = gcn_forward(model.g2, st.adj, z)
            reals.append(discriminate(model.d, st.x, z))
            on_gz.append(discriminate(model.d, x_hat, z))
            on_g1.append(discriminate(model.d, st.x, z_hat))
            on_s.append(discriminate(model.d, st.x, v_hat))
        d_real = ad.mean_of(reals)
        loss_d, _, _ = lo.adv_losses(d_real, d_real, ad.mean_of(on_gz),
                                     ad.mean_of(on_g1), ad.mean_of(on_s))
        _check_finite("d_loss", loss_d)
        ad.backward(loss_d)
        state._update_group(model.d.named_params(), lr_disc)
        state._clip_discriminator()
        d_loss_val = loss_d.item()

    # --- generator / encoder / decoder / first-classifier phase ---
    state.zero_grads()
    rec1s, rec2s, cls1s, cls2s = [], [], [], []
    on_gz, on_g1, on_s, reals = [], [], [], []
    for st, z in zip(batch, zs):
        z_hat = gcn_forward(model.g1, st.adj, st.x)
        v_hat = encode_fv(model.s, st.adj, st.v)
        x_rec = gcn_forward(model.g2, st.adj, z_hat)
        a_rec = reconstruct(z_hat)
        v_rec = ad.col_mean(gcn_forward(model.sp, st.adj, v_hat))
        rec1s.append(ad.add(lo.bce(st.x, x_rec), lo.bce(st.a, a_rec)))
        rec2s.append(lo.bce(st.v, v_rec))
        cls1s.append(lo.cross_entropy(classify_c1(model, z_hat), st.label))
        cls2s.append(lo.cross_entropy(classify_c1(model, v_hat), st.label))
        if mode != "none":
            x_hat = gcn_forward(model.g2, st.adj, z)
            reals.append(discriminate(model.d, st.x, z))
            on_gz.append(discriminate(model.d, x_hat, z))
            on_g1.append(discriminate(model.d, st.x, z_hat))
            on_s.append(discriminate(model.d, st.x, v_hat))

    rec1 = ad.mean_of(rec1s)
    rec2 = ad.mean_of(rec2s)
    cls1 = ad.mean_of(cls1s)
    cls2 = ad.mean_of(cls2s)
    objective = ad.add(ad.add(rec1, rec2), ad.add(cls1, cls2))
    if mode != "none":
        d_real = ad.mean_of(reals)
        _, loss_g, _ = lo.adv_losses(d_real, d_real, ad.mean_of(on_gz),
                                     ad.mean_of(on_g1), ad.mean_of(on_s))
        objective = ad.add(objective, loss_g)
        g_loss_val = loss_g.item()
    for name, tensor in (("rec1", rec1), ("rec2", rec2), ("cls1", cls1), ("cls2", cls2)):
        _check_finite(name, tensor)
    ad.backward(objective)
    main_group = []
    for net in (model.g1, model.g2, model.s, model.sp, model.c1):
        main_group.extend(net.named_params())
    state._update_group(main_group, lr_main)

    # --- fusion phase (inactive before the breakpoint) ---
    cls3_val = 0.0
    sparse_val = 0.0
    if lr_hpn > 0.0:
        state.zero_grads()
        cls3s, sparses = [], []
        for st in batch:
            z_hat = gcn_forward(model.g1, st.adj, st.x)
            v_hat = encode_fv(model.s, st.adj, st.v)
            m, logits2 = hpn_forward(hpn, z_hat, v_hat)
            cls3s.append(lo.cross_entropy(logits2, st.label))
            sparses.append(lo.sparse_loss(m))
        cls3 = ad.mean_of(cls3s)
        sparse = ad.mean_of(sparses)
        _check_finite("cls3", cls3)
        objective = ad.add(cls3, ad.scalar_mul(sparse, hpn.lam))
        ad.backward(objective)
        state._update_group(hpn.named_params(), lr_hpn)
        cls3_val = cls3.item()
        sparse_val = sparse.item()

    return lo.LossReport.build(
        d_loss=d_loss_val, g_loss=g_loss_val,
        rec1=rec1.item(), rec2=rec2.item(),
        cls1=cls1.item(), cls2=cls2.item(), cls3=cls3_val,
        sparse=sparse_val, lam=hpn.lam,
    )


def init_state(cfg: TrainConfig, n_rois, fts_dim, latent_dim, seed=None) -> TrainState:
    entropy = cfg.seed if seed is None else seed
    seq = entropy if isinstance(entropy, np.random.SeedSequence) else np.random.SeedSequence(entropy)
    init_seq, train_seq = seq.spawn(2)
    nets = Networks(cfg, n_rois, fts_dim, latent_dim, np.random.default_rng(init_seq))
    return TrainState(cfg, nets, np.random.default_rng(train_seq))


def train_fold(cfg: TrainConfig, train_subjects, prior, dims, seed=None) -> TrainState:
    """Run the full schedule on one training split; keeps the best-loss snapshot."""
    cfg.validate()
    if len(train_subjects) < cfg.batch_size:
        raise ValueError(
            f"need at least batch_size={cfg.batch_size} subjects, got {len(train_subjects)}"
        )
    n_rois, fts_dim, latent_dim = dims
    state = init_state(cfg, n_rois, fts_dim, latent_dim, seed)
    tensors = [SubjectTensors(s) for s in train_subjects]

    n = len(tensors)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    bp = cfg.breakpoint_epoch
    max_iter = max((cfg.epochs - bp) * steps_per_epoch, 1)
    hpn_iter = 0

    for epoch in range(cfg.epochs):
        order = state.rng.permutation(n)
        epoch_totals = []
        for start in range(0, n, cfg.batch_size):
            batch = [tensors[i] for i in order[start:start + cfg.batch_size]]
            lrs = lr_schedule(cfg, epoch, hpn_iter, max_iter)
            report = train_step(state, batch, prior, lrs)
            state.history.append(report)
            state.lr_trace.append((epoch, *lrs))
            epoch_totals.append(report.total)
            if epoch >= bp:
                hpn_iter += 1
        state.epoch = epoch + 1
        mean_total = float(np.mean(epoch_totals))
        if mean_total < state.best_loss:
            state.best_loss = mean_total
            state.best_epoch = epoch
            state.best_nets = state.nets.clone()
    return state


@dataclass
class CvResult:
    states: list
    splits: list = field(default_factory=list)


def run_cv(cfg: TrainConfig, ds: Dataset, prior: PriorModel | None = None,
           jobs: int = 1) -> CvResult:
    """Stratified k-fold training; per-fold priors are fit on the train split only."""
    cfg.validate()
    splits = kfold_split(ds, cfg.folds, cfg.seed)
    dims = (ds.n_rois, ds.fts_dim, ds.latent_dim)

    def one_fold(i):
        train_ids, _ = splits[i]
        train_ds = ds.subset(train_ids)
        fold_prior = prior
        if fold_prior is None and cfg.prior_mode == "estimated":
            fold_prior = fit_prior(train_ds, cfg.prior_m, ds.latent_dim, cfg.prior_seed_rois)
        seq = np.random.SeedSequence([cfg.seed, i])
        return train_fold(cfg, train_ds.subjects, fold_prior, dims, seed=seq)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            states = list(pool.map(one_fold, range(len(splits))))
    else:
        states = [one_fold(i) for i in range(len(splits))]
    return CvResult(states=states, splits=splits)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

def save_state(state: TrainState, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    save_params(state.nets.named_params(), os.path.join(out_dir, "final"))
    save_params(state.best_nets.named_params(), os.path.join(out_dir, "best"))
    vel_named = [(name, ad.Tensor(v)) for name, v in sorted(state.velocity.items())]
    save_params(vel_named, os.path.join(out_dir, "velocity"))
    meta = {
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_loss": state.best_loss,
        "dims": list(state.nets.dims),
        "config": state.cfg.to_dict(),
        "rng_state": state.rng.bit_generator.state,
    }
    with open(os.path.join(out_dir, "state.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_state(in_dir) -> TrainState:
    path = os.path.join(in_dir, "state.json")
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        meta = json.load(fh)
    cfg = TrainConfig.from_dict(meta["config"])
    dims = tuple(meta["dims"])
    state = init_state(cfg, *dims)
    load_params(state.nets.named_params(), os.path.join(in_dir, "final"))
    load_params(state.best_nets.named_params(), os.path.join(in_dir, "best"))
    vel_dir = os.path.join(in_dir, "velocity")
    if os.path.isfile(os.path.join(vel_dir, "index.json")):
        with open(os.path.join(vel_dir, "index.json")) as fh:
            idx = json.load(fh)
        state.velocity = {
            name: read_matrix(os.path.join(vel_dir, entry["file"])) for name, entry in idx.items()
        }
    state.epoch = meta["epoch"]
    state.best_epoch = meta["best_epoch"]
    state.best_loss = meta["best_loss"]
    state.rng.bit_generator.state = meta["rng_state"]
    return state
