"""Two-phase training pipeline, optimizer, schedule and checkpointing.

Phase 1 trains the convolutional blocks layer-locally against the
dimensionality-compression loss on projected outputs; phase 2 freezes them
and trains the linear head with cross-entropy on mean-squared per-copy
logits, reporting the best validation accuracy.  A backprop baseline reuses
the same scoring path end to end.

Every source of randomness is a keyed substream of one of four root seeds
(init, data, noise, projection), so a run is a pure function of its config
and the dataset bytes, and resuming from a checkpoint replays the exact
trajectory a straight run would have produced.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .dataio import AugmentSpec, Dataset, ZcaTransform, augment, batch_iterator, zca_apply
from .goodness import GoodnessConfig, ProjectionBasis, block_goodness, haar_basis, resolve_projection_dims
from .network import LinearHead, Network, NetworkConfig, build_network, features_forward
from .tensor import NumericError, Parameter, Tensor, softmax_cross_entropy

# substream tags (first entropy word after the root seed)
TAG_PHASE1 = 1
TAG_PHASE2 = 2
TAG_EVAL = 3
TAG_AUG = 4
TAG_CLS_DROP = 5
TAG_PROJ = 6
TAG_BP = 7
TAG_PROBE = 8
TAG_MASK = 103

CHECKPOINT_VERSION = 1

DATASET_AUG_DEFAULTS = {
    "mnist": AugmentSpec(crop_padding=2, hflip=False),
    "cifar10": AugmentSpec(crop_padding=4, hflip=True),
    "cifar100": AugmentSpec(crop_padding=4, hflip=True),
}


# -- configuration ---------------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    lr_min: float = 0.0
    phase1_t_max: int | None = None   # defaults to phase1_epochs
    phase2_t_max: int | None = None


@dataclass
class Seeds:
    init: int = 0
    data: int = 1
    noise: int = 2
    projection: int = 3


@dataclass
class DataConfig:
    dir: str = "data/mnist"
    augment: bool = True
    crop_padding: int | None = None   # None: dataset default (2 mnist, 4 cifar)
    hflip: bool | None = None
    zca: bool | None = None           # None: cifar only
    zca_epsilon: float = 1e-2
    train_subset: int | None = None
    val_subset: int | None = None


@dataclass
class RunConfig:
    dataset: str = "mnist"
    mode: str = "ff"                  # ff | bp
    channel_scale: float = 1.0
    goodness: GoodnessConfig = field(default_factory=GoodnessConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seeds: Seeds = field(default_factory=Seeds)
    phase1_epochs: int = 3
    phase2_epochs: int = 60
    batch_size: int = 128
    eval_batch_size: int = 256
    sequential_phase1: bool = False   # train each block to completion before the next

    def validate(self) -> "RunConfig":
        if self.dataset not in DATASET_AUG_DEFAULTS:
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.mode not in ("ff", "bp"):
            raise ValueError(f"mode must be ff or bp, got {self.mode!r}")
        if self.phase1_epochs < 1 or self.phase2_epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        self.goodness.validate()
        return self

    def network_config(self) -> NetworkConfig:
        return NetworkConfig.for_dataset(
            self.dataset,
            channel_scale=self.channel_scale,
            n_copies=self.goodness.n_copies,
            dropout_p=self.goodness.dropout_p,
        )

    def aug_spec(self) -> AugmentSpec:
        base = DATASET_AUG_DEFAULTS[self.dataset]
        pad = base.crop_padding if self.data.crop_padding is None else self.data.crop_padding
        flip = base.hflip if self.data.hflip is None else self.data.hflip
        return AugmentSpec(crop_padding=pad, hflip=flip)

    def use_zca(self) -> bool:
        if self.data.zca is None:
            return self.dataset.startswith("cifar")
        return self.data.zca

    def phase1_t_max(self) -> int:
        return self.schedule.phase1_t_max or self.phase1_epochs

    def phase2_t_max(self) -> int:
        return self.schedule.phase2_t_max or self.phase2_epochs

    def to_dict(self) -> dict:
        d = asdict(self)
        g = d["goodness"]
        if g["projection_dims"] is not None:
            g["projection_dims"] = list(g["projection_dims"])
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        g = dict(d.pop("goodness", {}))
        if g.get("projection_dims") is not None:
            g["projection_dims"] = tuple(g["projection_dims"])
        cfg = RunConfig(
            goodness=GoodnessConfig(**g),
            optimizer=OptimizerConfig(**d.pop("optimizer", {})),
            schedule=ScheduleConfig(**d.pop("schedule", {})),
            data=DataConfig(**d.pop("data", {})),
            seeds=Seeds(**d.pop("seeds", {})),
            **d,
        )
        return cfg.validate()


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for a (seed, context-key) pair."""
    return np.random.default_rng(np.random.SeedSequence((int(seed), *[int(k) for k in key])))


def copy_masks(seed: int, context: tuple[int, ...], ids: np.ndarray, n_copies: int,
               sample_shape: tuple[int, ...], p: float) -> np.ndarray:
    """Dropout masks keyed per example id, so batch order never matters."""
    masks = np.empty((len(ids), n_copies) + tuple(sample_shape), dtype=bool)
    for i, sid in enumerate(ids):
        gen = substream(seed, TAG_MASK, *context, int(sid))
        masks[i] = gen.random((n_copies,) + tuple(sample_shape)) >= p
    return masks


# -- optimizer and schedule ---------------------------------------------------------


class AdamWState:
    """First/second moments and step counts, keyed by parameter name."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}


def adamw_step(params: list[Parameter], state: AdamWState, lr_t: float,
               cfg: OptimizerConfig):
    """Decoupled weight decay: p -= lr*(m_hat/(sqrt(v_hat)+eps)) + lr*wd*p."""
    for p in params:
        if not p.trainable:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
            state.t[p.name] = 0
        state.t[p.name] += 1
        t = state.t[p.name]
        m = state.m[p.name]
        v = state.v[p.name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        arr = p.tensor.data
        arr -= lr_t * (m_hat / (np.sqrt(v_hat) + cfg.eps)) + lr_t * cfg.weight_decay * arr


def cosine_lr(step_epoch: int, t_max: int, lr_max: float = 0.001, lr_min: float = 0.0) -> float:
    """Per-epoch cosine annealing from lr_max (epoch 0) to lr_min (epoch t_max)."""
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if not 0 <= step_epoch <= t_max:
        raise ValueError(f"epoch {step_epoch} outside [0, {t_max}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step_epoch / t_max))


# -- metrics -----------------------------------------------------------------------


class MetricsWriter:
    """Appends deterministic CSV rows: epoch, phase, block, loss, lr, val_acc."""

    COLUMNS = ("epoch", "phase", "block", "loss", "lr", "val_acc")

    def __init__(self, path: str | None, append: bool = False):
        self.path = path
        if path and not append:
            with open(path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(self.COLUMNS)

    def row(self, epoch: int, phase: int, block: int, loss: float, lr: float,
            val_acc: float | None = None):
        if not self.path:
            return
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(
                [epoch, phase, block, repr(float(loss)), repr(float(lr)),
                 "" if val_acc is None else repr(float(val_acc))]
            )


# -- shared batch plumbing ------------------------------------------------------------


def prepare_images(images: np.ndarray, cfg: RunConfig, zca: ZcaTransform | None,
                   train: bool, aug_rng: np.random.Generator | None) -> np.ndarray:
    if train and cfg.data.augment:
        images = augment(images, cfg.aug_spec(), aug_rng)
    if zca is not None:
        images = zca_apply(zca, images)
    return images


def forward_features(net: Network, images: np.ndarray, cfg: RunConfig,
                     context: tuple[int, ...], ids: np.ndarray, *,
                     stop_at_block: int | None = None, train_block: int | None = None,
                     bp: bool = False, sample_noise: bool = True) -> Tensor:
    spec0 = net.config.blocks[0]
    stop = stop_at_block or net.n_blocks
    mask = None
    if sample_noise and spec0.dropout_p > 0:
        mask = copy_masks(cfg.seeds.noise, context, ids, spec0.n_copies,
                          images.shape[1:], spec0.dropout_p)
    return features_forward(net, Tensor(images), stop_at_block=stop,
                            train_block=train_block, bp=bp, mask=mask,
                            sample_noise=sample_noise)


def mean_square_scores(logits: Tensor) -> Tensor:
    """[B,N,C] per-copy logits -> [B,C] mean of squared outputs."""
    return (logits * logits).mean(axis=1)


# -- projection bases -----------------------------------------------------------------


def basis_seed(projection_seed: int, block_index: int) -> int:
    return int(np.random.SeedSequence((projection_seed, TAG_PROJ, block_index)).generate_state(1)[0])


def ensure_bases(net: Network, cfg: RunConfig):
    """Create the fixed per-block bases once, at the start of phase 1."""
    if net.bases is not None:
        return
    dims = resolve_projection_dims(cfg.goodness, cfg.dataset, net.config.n_classes,
                                   net.config.channels, cfg.seeds.projection)
    if dims is None:
        net.bases = [None] * net.n_blocks
        return
    net.bases = [
        haar_basis(dims[b], net.config.channels[b], basis_seed(cfg.seeds.projection, b), b)
        for b in range(net.n_blocks)
    ]


# -- phase 1 -----------------------------------------------------------------------


def phase1_schedule(cfg: RunConfig) -> list[tuple[int, int]]:
    """(epoch, block) units in execution order.

    Interleaved by default: all blocks once per epoch.  The sequential
    variant finishes each block's epochs before moving on.
    """
    epochs = range(cfg.phase1_epochs)
    blocks = range(3)
    if cfg.sequential_phase1:
        return [(e, b) for b in blocks for e in epochs]
    return [(e, b) for e in epochs for b in blocks]


def train_block(net: Network, block_index: int, train_data: Dataset, cfg: RunConfig,
                opt: AdamWState, *, epoch: int, lr: float,
                zca: ZcaTransform | None = None) -> list[float]:
    """One pass over the training set optimizing a single block's kernel."""
    ensure_bases(net, cfg)
    basis = net.bases[block_index]
    if basis is not None and basis.k > net.config.channels[block_index]:
        raise ValueError("projection dimension exceeds block channels")
    param = net.block_param(block_index)
    sample_noise = cfg.goodness.supervision != "sup"
    losses: list[float] = []
    it = batch_iterator(train_data, cfg.batch_size, shuffle=True, seed=cfg.seeds.data,
                        key=(TAG_PHASE1, epoch, block_index))
    for step, batch in enumerate(it):
        aug_rng = substream(cfg.seeds.data, TAG_AUG, TAG_PHASE1, epoch, block_index, step)
        images = prepare_images(batch.images, cfg, zca, True, aug_rng)
        acts = forward_features(net, images, cfg, (TAG_PHASE1, epoch, block_index),
                                batch.ids, stop_at_block=block_index + 1,
                                train_block=block_index, sample_noise=sample_noise)
        loss, _, _ = block_goodness(acts, basis, cfg.goodness, labels=batch.labels)
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(f"non-finite goodness loss at block {block_index + 1}, step {step}")
        param.zero_grad()
        loss.backward()
        adamw_step([param], opt, lr, cfg.optimizer)
        losses.append(val)
    return losses


def train_phase1(net: Network, train_data: Dataset, cfg: RunConfig, opt: AdamWState,
                 metrics: MetricsWriter | None = None, *, zca: ZcaTransform | None = None,
                 start_unit: int = 0, max_units: int | None = None,
                 on_unit_end=None) -> int:
    """Run phase-1 units from ``start_unit``; returns units completed so far."""
    ensure_bases(net, cfg)
    schedule = phase1_schedule(cfg)
    end = len(schedule) if max_units is None else min(len(schedule), max_units)
    t_max = cfg.phase1_t_max()
    for unit in range(start_unit, end):
        epoch, block = schedule[unit]
        lr = cosine_lr(epoch, t_max, cfg.optimizer.lr, cfg.schedule.lr_min)
        losses = train_block(net, block, train_data, cfg, opt, epoch=epoch, lr=lr, zca=zca)
        if metrics:
            metrics.row(epoch, 1, block + 1, float(np.mean(losses)), lr)
        if on_unit_end:
            on_unit_end(unit + 1)
    return end


# -- phase 2 and probes ----------------------------------------------------------------


def train_classifier(net: Network, head: LinearHead, train_data: Dataset, val_data: Dataset,
                     cfg: RunConfig, opt: AdamWState, *, stop_at_block: int | None = None,
                     epochs: int | None = None, t_max: int | None = None,
                     phase_tag: int = TAG_PHASE2, metrics: MetricsWriter | None = None,
                     zca: ZcaTransform | None = None, start_epoch: int = 0,
                     best: tuple[float, dict] | None = None,
                     on_epoch_end=None) -> tuple[float, dict]:
    """Cross-entropy on mean-squared per-copy logits over frozen features.

    Tracks the best validation accuracy; on return the head carries the best
    epoch's weights.  Shared by phase 2, per-block linear probes and the
    backprop baseline's classifier refresh.
    """
    from . import analysis  # evaluation lives there; import is cycle-free at call time

    stop = stop_at_block or net.n_blocks
    epochs = cfg.phase2_epochs if epochs is None else epochs
    t_max = t_max or cfg.phase2_t_max()
    best_acc, best_state = best if best is not None else (-1.0, {})
    for epoch in range(start_epoch, epochs):
        lr = cosine_lr(epoch, t_max, cfg.optimizer.lr, cfg.schedule.lr_min)
        losses = []
        it = batch_iterator(train_data, cfg.batch_size, shuffle=True, seed=cfg.seeds.data,
                            key=(phase_tag, stop, epoch))
        for step, batch in enumerate(it):
            aug_rng = substream(cfg.seeds.data, TAG_AUG, phase_tag, stop, epoch, step)
            images = prepare_images(batch.images, cfg, zca, True, aug_rng)
            feats = forward_features(net, images, cfg, (phase_tag, stop, epoch), batch.ids,
                                     stop_at_block=stop)
            drop_rng = substream(cfg.seeds.noise, TAG_CLS_DROP, phase_tag, stop, epoch, step)
            logits = head.forward(feats, mode="train", rng=drop_rng)
            loss = softmax_cross_entropy(mean_square_scores(logits), batch.labels)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite classifier loss at epoch {epoch}, step {step}")
            head.weight.zero_grad()
            head.bias.zero_grad()
            loss.backward()
            adamw_step(head.parameters(), opt, lr, cfg.optimizer)
            losses.append(val)
        acc = analysis.evaluate(net, val_data, "mean_square", cfg.seeds.noise,
                                batch_size=cfg.eval_batch_size, head=head,
                                stop_at_block=stop, zca=zca)
        if acc > best_acc:
            best_acc = acc
            best_state = {"weight": head.weight.data.copy(), "bias": head.bias.data.copy()}
        if metrics:
            metrics.row(epoch, 2, stop, float(np.mean(losses)), lr, acc)
        if on_epoch_end:
            on_epoch_end(epoch + 1, best_acc, best_state)
    if best_state:
        head.weight.data[...] = best_state["weight"]
        head.bias.data[...] = best_state["bias"]
    return best_acc, best_state


def train_phase2(net: Network, train_data: Dataset, val_data: Dataset, cfg: RunConfig,
                 opt: AdamWState, metrics: MetricsWriter | None = None, *,
                 zca: ZcaTransform | None = None, start_epoch: int = 0,
                 max_epochs: int | None = None, best: tuple[float, dict] | None = None,
                 on_epoch_end=None) -> tuple[float, dict]:
    epochs = cfg.phase2_epochs if max_epochs is None else min(cfg.phase2_epochs, max_epochs)
    return train_classifier(net, net.classifier, train_data, val_data, cfg, opt,
                            epochs=epochs, metrics=metrics, zca=zca,
                            start_epoch=start_epoch, best=best, on_epoch_end=on_epoch_end)


# -- backprop baseline ------------------------------------------------------------------


def train_bp_baseline(net: Network, train_data: Dataset, val_data: Dataset, cfg: RunConfig,
                      metrics: MetricsWriter | None = None, *,
                      zca: ZcaTransform | None = None) -> float:
    """End-to-end cross-entropy through all blocks, then a classifier refresh.

    Uses the identical architecture and scoring path (noisy copies included);
    the only difference from the layer-local pipeline is that no detach
    boundaries exist and all conv kernels update jointly.
    """
    opt = AdamWState()
    all_params = [net.block_param(i) for i in range(net.n_blocks)] + net.classifier.parameters()
    t_max = cfg.phase1_t_max()
    for epoch in range(cfg.phase1_epochs):
        lr = cosine_lr(epoch, t_max, cfg.optimizer.lr, cfg.schedule.lr_min)
        losses = []
        it = batch_iterator(train_data, cfg.batch_size, shuffle=True, seed=cfg.seeds.data,
                            key=(TAG_BP, epoch))
        for step, batch in enumerate(it):
            aug_rng = substream(cfg.seeds.data, TAG_AUG, TAG_BP, epoch, step)
            images = prepare_images(batch.images, cfg, zca, True, aug_rng)
            feats = forward_features(net, images, cfg, (TAG_BP, epoch), batch.ids, bp=True)
            drop_rng = substream(cfg.seeds.noise, TAG_CLS_DROP, TAG_BP, epoch, step)
            logits = net.classifier.forward(feats, mode="train", rng=drop_rng)
            loss = softmax_cross_entropy(mean_square_scores(logits), batch.labels)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(f"non-finite end-to-end loss at epoch {epoch}, step {step}")
            for p in all_params:
                p.zero_grad()
            loss.backward()
            adamw_step(all_params, opt, lr, cfg.optimizer)
            losses.append(val)
        if metrics:
            metrics.row(epoch, 1, 0, float(np.mean(losses)), lr)
    refresh_opt = AdamWState()
    best_acc, _ = train_phase2(net, train_data, val_data, cfg, refresh_opt, metrics, zca=zca)
    return best_acc


# -- checkpointing -----------------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict


def checkpoint_tensors(net: Network, opt: AdamWState,
                       best_state: dict | None = None) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in net.params.items():
        tensors[name] = p.data
    for i, bn in enumerate(net.bn_states):
        tensors[f"bn.block{i + 1}.mean"] = bn.running_mean
        tensors[f"bn.block{i + 1}.var"] = bn.running_var
    if net.bases is not None:
        for basis in net.bases:
            if basis is not None:
                tensors[f"proj.block{basis.block_index + 1}"] = basis.matrix
    for name in net.params:
        if name in opt.m:
            tensors[f"opt.{name}.m"] = opt.m[name]
            tensors[f"opt.{name}.v"] = opt.v[name]
    if best_state:
        tensors["best.classifier.weight"] = best_state["weight"]
        tensors["best.classifier.bias"] = best_state["bias"]
    return tensors


def save_checkpoint(net: Network, opt: AdamWState, cfg: RunConfig, path: str, *,
                    progress: dict | None = None, best_state: dict | None = None):
    """Binary container plus a sorted-keys JSON sidecar at ``path``.meta.json."""
    container.write_tensors(path, checkpoint_tensors(net, opt, best_state),
                            version=CHECKPOINT_VERSION)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "progress": progress or {},
        "opt_steps": {k: opt.t[k] for k in sorted(opt.t)},
        "basis_seeds": None if net.bases is None else [
            None if b is None else int(b.seed) for b in net.bases
        ],
    }
    with open(path + ".meta.json", "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_checkpoint(path: str) -> Checkpoint:
    tensors = container.read_tensors(path, expect_version=CHECKPOINT_VERSION)
    with open(path + ".meta.json") as f:
        meta = json.load(f)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise container.ContainerError(
            f"checkpoint version {meta.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    return Checkpoint(tensors=tensors, meta=meta)


def network_from_checkpoint(ckpt: Checkpoint) -> tuple[Network, RunConfig, AdamWState]:
    """Rebuild network, config and optimizer state exactly as saved."""
    cfg = RunConfig.from_dict(ckpt.meta["config"])
    net = build_network(cfg.network_config(), cfg.seeds.init)
    for name, p in net.params.items():
        p.data[...] = ckpt.tensors[name]
    for i, bn in enumerate(net.bn_states):
        bn.running_mean[...] = ckpt.tensors[f"bn.block{i + 1}.mean"]
        bn.running_var[...] = ckpt.tensors[f"bn.block{i + 1}.var"]
    seeds = ckpt.meta.get("basis_seeds")
    if seeds is not None:
        net.bases = []
        for i, seed in enumerate(seeds):
            key = f"proj.block{i + 1}"
            if seed is None or key not in ckpt.tensors:
                net.bases.append(None)
            else:
                net.bases.append(ProjectionBasis(matrix=ckpt.tensors[key], seed=seed, block_index=i))
    opt = AdamWState()
    for name, t in ckpt.meta.get("opt_steps", {}).items():
        opt.m[name] = ckpt.tensors[f"opt.{name}.m"].astype(net.params[name].data.dtype, copy=True)
        opt.v[name] = ckpt.tensors[f"opt.{name}.v"].astype(net.params[name].data.dtype, copy=True)
        opt.t[name] = int(t)
    return net, cfg, opt


# -- orchestration -------------------------------------------------------------------------


def load_run_data(cfg: RunConfig) -> tuple[Dataset, Dataset, ZcaTransform | None]:
    from .dataio import load_cifar, load_mnist

    if cfg.dataset == "mnist":
        train, val = load_mnist(cfg.data.dir)
    else:
        train, val = load_cifar(cfg.data.dir, "c10" if cfg.dataset == "cifar10" else "c100")
    if cfg.data.train_subset:
        train = train.subset(cfg.data.train_subset)
    if cfg.data.val_subset:
        val = val.subset(cfg.data.val_subset)
    zca = None
    if cfg.use_zca():
        from .dataio import zca_fit

        zca = zca_fit(train.images, cfg.data.zca_epsilon)
    return train, val, zca


def run_training(cfg: RunConfig, out_dir: str, *, resume_from: str | None = None,
                 max_phase1_units: int | None = None,
                 max_phase2_epochs: int | None = None) -> dict:
    """Full pipeline: data, phases, metrics CSV, checkpoints, best accuracy.

    Writes ``config.json`` (resolved config and seeds), ``metrics.csv`` and
    ``checkpoint.sffc`` (+ sidecar) into ``out_dir``.  ``resume_from`` picks
    up at the recorded phase/epoch with an identical future trajectory.
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.sffc")
    metrics_path = os.path.join(out_dir, "metrics.csv")

    progress = {"phase": 1, "phase1_units": 0, "phase2_epoch": 0, "best_val_acc": None}
    best_state: dict | None = None
    if resume_from:
        ckpt = load_checkpoint(resume_from)
        net, cfg, opt = network_from_checkpoint(ckpt)
        progress.update(ckpt.meta.get("progress", {}))
        if "best.classifier.weight" in ckpt.tensors:
            best_state = {"weight": ckpt.tensors["best.classifier.weight"].astype(net.classifier.weight.data.dtype),
                          "bias": ckpt.tensors["best.classifier.bias"].astype(net.classifier.bias.data.dtype)}
        metrics = MetricsWriter(metrics_path, append=os.path.exists(metrics_path))
    else:
        net = build_network(cfg.network_config(), cfg.seeds.init)
        opt = AdamWState()
        metrics = MetricsWriter(metrics_path)

    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")

    train, val, zca = load_run_data(cfg)

    def save(phase: int):
        save_checkpoint(net, opt, cfg, ckpt_path, progress=dict(progress, phase=phase),
                        best_state=best_state)

    if cfg.mode == "bp":
        best_acc = train_bp_baseline(net, train, val, cfg, metrics, zca=zca)
        progress.update(phase=3, best_val_acc=best_acc)
        save(3)
        return {"best_val_acc": best_acc, "checkpoint": ckpt_path, "metrics": metrics_path}

    if progress["phase"] <= 1:
        def unit_done(units):
            progress["phase1_units"] = units
            save(1)

        done = train_phase1(net, train, cfg, opt, metrics, zca=zca,
                            start_unit=progress["phase1_units"],
                            max_units=max_phase1_units, on_unit_end=unit_done)
        if done < len(phase1_schedule(cfg)):
            return {"best_val_acc": None, "checkpoint": ckpt_path, "metrics": metrics_path,
                    "stopped": "phase1"}
        progress["phase"] = 2
        opt = AdamWState()  # fresh optimizer for the classifier phase
        save(2)

    best_prev = None
    if progress["best_val_acc"] is not None and best_state:
        best_prev = (progress["best_val_acc"], best_state)

    def epoch_done(epoch, acc, state):
        nonlocal best_state
        progress["phase2_epoch"] = epoch
        progress["best_val_acc"] = acc
        best_state = state or best_state
        save(2)

    best_acc, _ = train_phase2(net, train, val, cfg, opt, metrics, zca=zca,
                               start_epoch=progress["phase2_epoch"],
                               max_epochs=max_phase2_epochs, best=best_prev,
                               on_epoch_end=epoch_done)
    finished = progress["phase2_epoch"] >= cfg.phase2_epochs
    progress["phase"] = 3 if finished else 2
    save(progress["phase"])
    out = {"best_val_acc": best_acc, "checkpoint": ckpt_path, "metrics": metrics_path}
    if not finished:
        out["stopped"] = "phase2"
    return out
