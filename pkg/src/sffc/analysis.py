"""Inference, evaluation and representation analysis over trained networks.

Covers the three inference strategies (mean squared per-copy logits, plain
mean, single clean pass), accuracy evaluation, the per-block effective
dimensionality / compression-ratio profile, linear probes on frozen block
outputs, and a Gaussian-mixture information breakdown of classifier scores
into linearly decodable, tuning-overlap and noise-correlation parts.

Evaluation noise is keyed per example id, so accuracy is exactly invariant
to dataset order for a fixed noise seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .dataio import Batch, Dataset, ZcaTransform, batch_iterator, zca_apply
from .network import LinearHead, Network, build_network, features_forward
from .trainer import (
    TAG_EVAL,
    TAG_PHASE2,
    TAG_PROBE,
    AdamWState,
    RunConfig,
    copy_masks,
    substream,
    train_classifier,
)

_ED_EPS = 1e-12


@dataclass
class ScoreTensor:
    scores: np.ndarray          # [B, n_classes]
    strategy: str               # mean_square | mean | direct


@dataclass
class GaussianClassModel:
    class_labels: np.ndarray    # [C]
    means: np.ndarray           # [C, k]
    covs: np.ndarray            # [C, k, k], regularized
    priors: np.ndarray          # [C]
    regularizer: float = 1e-6

    @property
    def dim(self) -> int:
        return self.means.shape[1]


@dataclass
class InfoBreakdown:
    i_tot: float
    i_lin: float
    i_sigsim: float
    i_cor: float
    mc_samples: int
    se_tot: float
    se_lin: float
    se_sigsim: float
    se_cor: float

    @property
    def i_lin_absorbed(self) -> float:
        return self.i_lin + self.i_sigsim


@dataclass
class LayerProfile:
    block: int
    ed_d: float
    ed_c_mean: float
    ed_c_std: float
    ratio: float
    projection_dim: int


# -- inference ---------------------------------------------------------------------


def predict_scores(net: Network, batch: Batch, strategy: str, noise_seed: int, *,
                   head: LinearHead | None = None, stop_at_block: int | None = None,
                   zca: ZcaTransform | None = None,
                   context: tuple[int, ...] = (TAG_EVAL, 0)) -> ScoreTensor:
    """Class scores for one batch under the chosen inference strategy.

    mean_square averages squared per-copy logits (the energy readout), mean
    averages the logits, direct runs a single pass with the sampler off.
    """
    if strategy not in ("mean_square", "mean", "direct"):
        raise ValueError(f"unknown inference strategy {strategy!r}")
    head = head or net.classifier
    stop = stop_at_block or net.n_blocks
    images = zca_apply(zca, batch.images) if zca is not None else batch.images
    spec0 = net.config.blocks[0]
    with T.no_grad():
        if strategy == "direct":
            feats = features_forward(net, T.Tensor(images), stop_at_block=stop,
                                     sample_noise=False)
            logits = head.forward(feats, mode="eval").data
            scores = logits[:, 0, :]
        else:
            mask = None
            if spec0.dropout_p > 0:
                mask = copy_masks(noise_seed, context, batch.ids, spec0.n_copies,
                                  images.shape[1:], spec0.dropout_p)
            feats = features_forward(net, T.Tensor(images), stop_at_block=stop, mask=mask)
            logits = head.forward(feats, mode="eval").data
            scores = np.mean(logits * logits, axis=1) if strategy == "mean_square" \
                else np.mean(logits, axis=1)
    return ScoreTensor(scores=scores, strategy=strategy)


def evaluate(net: Network, dataset: Dataset, strategy: str, noise_seed: int, *,
             batch_size: int = 256, head: LinearHead | None = None,
             stop_at_block: int | None = None, zca: ZcaTransform | None = None,
             eval_key: int = 0) -> float:
    """Fraction of correct argmax predictions over the split."""
    stop = stop_at_block or net.n_blocks
    context = (TAG_EVAL, stop, eval_key)
    correct = 0
    for batch in batch_iterator(dataset, batch_size):
        scores = predict_scores(net, batch, strategy, noise_seed, head=head,
                                stop_at_block=stop, zca=zca, context=context)
        correct += int(np.sum(np.argmax(scores.scores, axis=1) == batch.labels))
    return correct / len(dataset)


def collect_scores(net: Network, dataset: Dataset, strategy: str, noise_seed: int, *,
                   batch_size: int = 256, head: LinearHead | None = None,
                   stop_at_block: int | None = None, zca: ZcaTransform | None = None,
                   eval_key: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Scores and labels for a whole split, in dataset order."""
    stop = stop_at_block or net.n_blocks
    context = (TAG_EVAL, stop, eval_key)
    chunks, labels = [], []
    for batch in batch_iterator(dataset, batch_size):
        st = predict_scores(net, batch, strategy, noise_seed, head=head,
                            stop_at_block=stop, zca=zca, context=context)
        chunks.append(st.scores)
        labels.append(batch.labels)
    return np.concatenate(chunks), np.concatenate(labels)


# -- layer ED profile --------------------------------------------------------------


def layer_ed_profile(net: Network, dataset: Dataset, noise_seed: int, *,
                     batch_size: int = 256, zca: ZcaTransform | None = None,
                     eval_key: int = 1) -> list[LayerProfile]:
    """Per-block diversity/consistency EDs in the training projection spaces.

    Consistency EDs are computed per input (noisy copies and spatial
    positions as samples) and summarized as mean and standard deviation of
    the per-class means; the diversity ED pools copy-mean responses across
    the whole split.  The ratio ED_d / ED_c rises when within-input responses
    compress faster than across-input structure.
    """
    if net.bases is None:
        raise ValueError("network has no projection bases; run phase 1 first")
    nb = net.n_blocks
    spec0 = net.config.blocks[0]
    per_instance: list[list[np.ndarray]] = [[] for _ in range(nb)]
    labels_seen: list[np.ndarray] = []
    moment_sums = [None] * nb
    pooled_rows = [0] * nb
    context = (TAG_EVAL, 0, eval_key)
    for batch in batch_iterator(dataset, batch_size):
        images = zca_apply(zca, batch.images) if zca is not None else batch.images
        labels_seen.append(batch.labels)
        mask = None
        if spec0.dropout_p > 0:
            mask = copy_masks(noise_seed, context, batch.ids, spec0.n_copies,
                              images.shape[1:], spec0.dropout_p)
        with T.no_grad():
            h = T.Tensor(images)
            for bi in range(nb):
                from .network import block_forward

                h = block_forward(net, bi, h, mode="eval",
                                  **({"mask": mask} if bi == 0 else {}))
                acts = h.data.astype(np.float64)
                b, n, c, hh, ww = acts.shape
                x = acts.transpose(0, 1, 3, 4, 2).reshape(b, n * hh * ww, c)
                pooled = acts.mean(axis=1).transpose(0, 2, 3, 1).reshape(b * hh * ww, c)
                basis = net.bases[bi]
                if basis is not None:
                    x = x @ basis.matrix.T
                    pooled = pooled @ basis.matrix.T
                m = np.einsum("bsk,bsl->bkl", x, x) / x.shape[1]
                tr = np.trace(m, axis1=1, axis2=2)
                frob = np.sum(m * m, axis=(1, 2))
                per_instance[bi].append(tr * tr / (frob + _ED_EPS))
                if moment_sums[bi] is None:
                    moment_sums[bi] = pooled.T @ pooled
                else:
                    moment_sums[bi] += pooled.T @ pooled
                pooled_rows[bi] += pooled.shape[0]
    labels = np.concatenate(labels_seen)
    profiles = []
    for bi in range(nb):
        eds = np.concatenate(per_instance[bi])
        class_means = np.array([eds[labels == c].mean() for c in np.unique(labels)])
        md = moment_sums[bi] / pooled_rows[bi]
        ed_d = float(np.trace(md) ** 2 / (np.sum(md * md) + _ED_EPS))
        ed_c = float(class_means.mean())
        dim = net.bases[bi].k if net.bases[bi] is not None else net.config.channels[bi]
        profiles.append(LayerProfile(block=bi + 1, ed_d=ed_d, ed_c_mean=ed_c,
                                     ed_c_std=float(class_means.std()),
                                     ratio=ed_d / ed_c, projection_dim=dim))
    return profiles


# -- linear probes ------------------------------------------------------------------


def linear_probe(net: Network, block_index: int, train_data: Dataset, val_data: Dataset,
                 cfg: RunConfig, *, zca: ZcaTransform | None = None,
                 epochs: int | None = None, metrics=None) -> float:
    """Best validation accuracy of a fresh linear head on a frozen block.

    Probing the final block replays the classifier phase exactly (same head
    initialization and substream keys), so its result coincides with the
    standard pipeline's reported accuracy.
    """
    if not 0 <= block_index < net.n_blocks:
        raise ValueError(f"block_index must be in [0, {net.n_blocks})")
    stop = block_index + 1
    if block_index == net.n_blocks - 1:
        head = build_network(cfg.network_config(), cfg.seeds.init).classifier
        phase_tag = TAG_PHASE2
    else:
        c, h, w = net.block_shapes[block_index]
        head = LinearHead(c * h * w, net.config.n_classes,
                          substream(cfg.seeds.init, TAG_PROBE, block_index),
                          dropout_p=net.config.classifier_dropout_p,
                          name=f"probe{block_index + 1}")
        phase_tag = TAG_PROBE
    opt = AdamWState()
    best_acc, _ = train_classifier(net, head, train_data, val_data, cfg, opt,
                                   stop_at_block=stop, epochs=epochs,
                                   phase_tag=phase_tag, metrics=metrics, zca=zca)
    return best_acc


# -- Gaussian mixture information breakdown ----------------------------------------------


def fit_gaussian_classes(scores: np.ndarray, labels: np.ndarray,
                         regularizer: float = 1e-6) -> GaussianClassModel:
    """Per-class sample mean/covariance and empirical priors.

    Requires at least dim+1 examples per class so the covariance has full
    rank before regularization is even considered.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    k = scores.shape[1]
    classes = np.unique(labels)
    means, covs, priors = [], [], []
    for c in classes:
        rows = scores[labels == c]
        if rows.shape[0] < k + 1:
            raise ValueError(f"class {int(c)} has {rows.shape[0]} samples, need >= {k + 1}")
        means.append(rows.mean(axis=0))
        covs.append(np.cov(rows, rowvar=False) + regularizer * np.eye(k))
        priors.append(rows.shape[0] / scores.shape[0])
    model = GaussianClassModel(class_labels=classes, means=np.array(means),
                               covs=np.array(covs), priors=np.array(priors),
                               regularizer=regularizer)
    for c, cov in zip(classes, model.covs):
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"class {int(c)} covariance singular after regularization") from exc
    return model


def gaussian_entropy(cov: np.ndarray) -> float:
    """0.5 * log((2 pi e)^k det(cov)) in nats; cov must be positive definite."""
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    k = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance is not positive definite")
    return 0.5 * (k * np.log(2.0 * np.pi * np.e) + logdet)


def _mixture_params(model: GaussianClassModel, dims) -> tuple[np.ndarray, np.ndarray]:
    """Component (means, covs) for the joint, one marginal, or the
    independent-product variant whose components keep only diagonal terms."""
    if dims == "all":
        return model.means, model.covs
    if dims == "independent":
        covs = np.array([np.diag(np.diag(c)) for c in model.covs])
        return model.means, covs
    j = int(dims)
    means = model.means[:, j : j + 1]
    covs = model.covs[:, j : j + 1, j : j + 1]
    return means, covs


def gmm_entropy_mc(model: GaussianClassModel, dims, n_samples: int,
                   rng: np.random.Generator, chunk: int = 20000) -> tuple[float, float]:
    """Monte-Carlo differential entropy of a Gaussian mixture, with its SE.

    Stratified: ``n_samples`` draws from every component, log-density under
    the full mixture, prior-weighted average.  ``dims`` selects the joint
    ("all"), a single marginal (an int), or the independent-product model.
    """
    means, covs = _mixture_params(model, dims)
    n_comp, k = means.shape
    chols = np.linalg.cholesky(covs)
    inv_chols = np.array([np.linalg.inv(c) for c in chols])
    log_norms = np.array([
        -0.5 * k * np.log(2.0 * np.pi) - np.sum(np.log(np.diag(c))) for c in chols
    ])
    log_priors = np.log(model.priors)

    def log_mix(y: np.ndarray) -> np.ndarray:
        parts = np.empty((n_comp, y.shape[0]))
        for c in range(n_comp):
            z = (y - means[c]) @ inv_chols[c].T
            parts[c] = log_priors[c] + log_norms[c] - 0.5 * np.sum(z * z, axis=1)
        top = parts.max(axis=0)
        return top + np.log(np.sum(np.exp(parts - top), axis=0))

    comp_mean = np.empty(n_comp)
    comp_var = np.empty(n_comp)
    for c in range(n_comp):
        total = 0.0
        total_sq = 0.0
        drawn = 0
        while drawn < n_samples:
            take = min(chunk, n_samples - drawn)
            z = rng.standard_normal((take, k))
            y = means[c] + z @ chols[c].T
            lp = log_mix(y)
            total += lp.sum()
            total_sq += np.sum(lp * lp)
            drawn += take
        comp_mean[c] = total / n_samples
        comp_var[c] = max(0.0, total_sq / n_samples - comp_mean[c] ** 2) / n_samples
    h = -float(np.dot(model.priors, comp_mean))
    se = float(np.sqrt(np.dot(model.priors ** 2, comp_var)))
    return h, se


def info_breakdown(model: GaussianClassModel, rng: np.random.Generator,
                   n_samples: int = 100000) -> InfoBreakdown:
    """Mutual-information decomposition of the score readout.

    I_tot = h(y) - h(y|c); I_lin sums the per-component marginal terms;
    I_sigsim charges redundancy from tuning overlap via the independent-
    product model; I_cor is the exact remainder.  Conditional entropies are
    Gaussian closed forms; the mixture entropies are Monte-Carlo.  In the
    remainder the marginal entropies cancel algebraically, so its SE only
    carries the joint and independent-product estimates.
    """
    k = model.dim
    h_y, se_y = gmm_entropy_mc(model, "all", n_samples, rng)
    h_y_cond = float(np.dot(model.priors, [gaussian_entropy(c) for c in model.covs]))
    i_tot = h_y - h_y_cond

    h_marg = np.empty(k)
    se_marg = np.empty(k)
    for j in range(k):
        h_marg[j], se_marg[j] = gmm_entropy_mc(model, j, n_samples, rng)
    h_marg_cond = np.array([
        float(np.dot(model.priors, [gaussian_entropy(c[j, j]) for c in model.covs]))
        for j in range(k)
    ])
    i_lin = float(np.sum(h_marg - h_marg_cond))

    h_ind, se_ind = gmm_entropy_mc(model, "independent", n_samples, rng)
    i_sigsim = h_ind - float(np.sum(h_marg))
    i_cor = i_tot - i_lin - i_sigsim
    return InfoBreakdown(
        i_tot=i_tot, i_lin=i_lin, i_sigsim=i_sigsim, i_cor=i_cor,
        mc_samples=n_samples,
        se_tot=se_y,
        se_lin=float(np.sqrt(np.sum(se_marg ** 2))),
        se_sigsim=float(np.sqrt(se_ind ** 2 + np.sum(se_marg ** 2))),
        se_cor=float(np.sqrt(se_y ** 2 + se_ind ** 2)),
    )


# -- artifacts ----------------------------------------------------------------------------


def write_ed_profile_csv(path: str, profiles: list[LayerProfile]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["block", "ed_d", "ed_c_mean", "ed_c_std", "ratio"])
        for p in profiles:
            w.writerow([p.block, repr(float(p.ed_d)), repr(float(p.ed_c_mean)),
                        repr(float(p.ed_c_std)), repr(float(p.ratio))])


def write_info_csv(path: str, rows: list[tuple[int, InfoBreakdown]]):
    """block, i_tot, i_lin_absorbed, i_cor, se (of i_tot), i_tot_bits."""
    ln2 = np.log(2.0)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["block", "i_tot", "i_lin_absorbed", "i_cor", "se", "i_tot_bits"])
        for block, ib in rows:
            w.writerow([block, repr(float(ib.i_tot)), repr(float(ib.i_lin_absorbed)),
                        repr(float(ib.i_cor)), repr(float(ib.se_tot)),
                        repr(float(ib.i_tot / ln2))])


def write_probe_csv(path: str, rows: list[tuple[int, float]]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["block", "accuracy"])
        for block, acc in rows:
            w.writerow([block, repr(float(acc))])


def dump_scores(path: str, scores: np.ndarray, labels: np.ndarray):
    """Scores + labels in the checkpoint container format (labels as f32)."""
    container.write_tensors(path, {
        "scores": scores.astype(np.float32),
        "labels": labels.astype(np.float32),
    })
