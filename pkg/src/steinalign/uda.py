"""Desk-scale unsupervised domain adaptation with a Stein-discrepancy transfer loss.

A feature extractor ``g`` and classifier ``c`` are trained on labelled source
data while a model of the target feature distribution supplies the score for
the transfer loss. The loss is ``L_C + lambda(epoch) * tanh(L_D)`` where
``L_D`` is either the KSD V-statistic of the source features (kernelized) or
the critic's Stein objective (adversarial).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nnet
from .config import TrainConfig, resolved_dict
from .discrepancy import adversarial_stein_estimate, ksd_u_statistic, ksd_v_value_and_grad, stein_objective_and_grads
from .errors import DataError, EmptyDataset, MissingLabels, NonFiniteLoss
from .kernels import KernelSpec
from .numeric import make_rng
from .scores import GaussianModel, fit_gaussian, fit_gmm_em, gmm_sgd_step, init_vae, vae_elbo_step

# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    domain: str = "source"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError("features must be an n x d matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.features.shape[0],):
                raise DataError("one label per row required")
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be source or target, got {self.domain!r}")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, self.domain)


MOON_CENTROID = np.array([0.5, 0.25])


def _rotate(points, degrees, center):
    deg = math.fmod(float(degrees), 360.0)
    if deg == 0.0:
        return points
    th = math.radians(deg)
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    return (points - center) @ rot.T + center


def make_two_moons(n: int, noise: float, rotation_deg: float, rng, domain: str = "source") -> Dataset:
    """Two interleaved unit half-circles, ``n/2`` points each, rotated about the moons' centroid."""
    if n % 2 or n < 2:
        raise DataError("n must be a positive even number")
    if noise < 0:
        raise DataError("noise must be non-negative")
    half = n // 2
    t_up = rng.uniform(0.0, math.pi, half)
    t_lo = rng.uniform(0.0, math.pi, half)
    upper = np.column_stack([np.cos(t_up), np.sin(t_up)])
    lower = np.column_stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)])
    X = np.vstack([upper, lower])
    y = np.repeat([0, 1], half)
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    return Dataset(_rotate(X, rotation_deg, MOON_CENTROID), y, domain)


def make_blob_shift(n: int, d: int, mean_shift, cov_scale: float, classes: int, rng):
    """Class-conditional unit Gaussians; the target copy is shifted and rescaled."""
    if classes < 2:
        raise DataError("need at least two classes")
    counts = np.full(classes, n // classes)
    counts[: n % classes] += 1
    y = np.repeat(np.arange(classes), counts)
    centers = np.zeros((classes, d))
    centers[:, 0] = 4.0 * (np.arange(classes) - (classes - 1) / 2.0)
    shift = np.broadcast_to(np.asarray(mean_shift, dtype=np.float64), (d,))
    Xs = centers[y] + rng.standard_normal((n, d))
    Xt = centers[y] + shift + math.sqrt(cov_scale) * rng.standard_normal((n, d))
    return Dataset(Xs, y, "source"), Dataset(Xt, y.copy(), "target")


def subsample_size(n: int, percent: float, minimum: int) -> int:
    return min(max(math.ceil(percent * n), minimum), n)


def subsample_target(data: Dataset, percent: float, minimum: int, rng) -> Dataset:
    """Uniform subset of ``max(ceil(percent n), minimum)`` rows (capped at n), original order kept."""
    return split_target(data, percent, minimum, rng)[0]


def split_target(data: Dataset, percent: float, minimum: int, rng):
    """``(subsample, remainder)``; the remainder is empty when everything is kept."""
    n = len(data)
    if n == 0:
        raise EmptyDataset("cannot subsample an empty dataset")
    if not 0 < percent <= 1 or minimum < 1:
        raise DataError("percent must lie in (0, 1] and minimum must be at least 1")
    size = subsample_size(n, percent, minimum)
    if size == n:
        return data, data.take(np.arange(0))
    keep = np.zeros(n, dtype=bool)
    keep[rng.choice(n, size=size, replace=False)] = True
    return data.take(np.flatnonzero(keep)), data.take(np.flatnonzero(~keep))


# ---------------------------------------------------------------- CSV


def write_csv(path_or_buf, datasets):
    """Rows ``f0..f{d-1},label,domain``; unlabeled rows leave ``label`` empty."""
    datasets = list(datasets)
    d = datasets[0].dim
    own = isinstance(path_or_buf, (str, Path))
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label", "domain"])
        for ds in datasets:
            for i in range(len(ds)):
                label = "" if ds.labels is None else int(ds.labels[i])
                w.writerow([repr(float(v)) for v in ds.features[i]] + [label, ds.domain])
    finally:
        if own:
            fh.close()


def read_csv(path_or_text, text: bool = False) -> dict:
    """Parse a dataset CSV into ``{"source": Dataset, "target": Dataset}`` (present domains only)."""
    if text:
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="", encoding="utf-8")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset("empty CSV file") from None
        if len(header) < 3 or header[-2:] != ["label", "domain"]:
            raise DataError("header must be f0,...,f{d-1},label,domain")
        d = len(header) - 2
        if header[:d] != [f"f{i}" for i in range(d)]:
            raise DataError("feature columns must be named f0..f{d-1}")
        rows = {"source": ([], []), "target": ([], [])}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataError(f"row {lineno}: expected {d + 2} columns, got {len(row)}")
            feats = []
            for col, cell in enumerate(row[:d]):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {lineno}, column {header[col]!r}: non-numeric value {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"row {lineno}, column {header[col]!r}: non-finite value {cell!r}")
                feats.append(v)
            label, domain = row[d], row[d + 1]
            if domain not in rows:
                raise DataError(f"row {lineno}, column 'domain': expected source or target, got {domain!r}")
            if label == "":
                lab = None
            else:
                try:
                    lab = int(label)
                except ValueError:
                    raise DataError(f"row {lineno}, column 'label': non-integer label {label!r}") from None
            rows[domain][0].append(feats)
            rows[domain][1].append(lab)
    out = {}
    for domain, (feats, labels) in rows.items():
        if not feats:
            continue
        # partially labelled domains are treated as unlabelled
        labs = None if any(v is None for v in labels) else np.array(labels, dtype=np.int64)
        out[domain] = Dataset(np.array(feats, dtype=np.float64).reshape(len(feats), d), labs, domain)
    return out


# ---------------------------------------------------------------- schedule


def lambda_schedule(epoch: int, warmup: int, gamma: float, lam_max: float, total: int) -> float:
    """Zero during warm-up, then ``lam_max * (2 / (1 + exp(-gamma * progress)) - 1)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if epoch < warmup:
        return 0.0
    progress = (epoch - warmup) / max(total, 1)
    return lam_max * (2.0 / (1.0 + math.exp(-gamma * progress)) - 1.0)


# ---------------------------------------------------------------- model


@dataclass
class UdaModel:
    g: nnet.Mlp
    c: nnet.Mlp
    form: str = "kernelized"
    score_family: str = "gaussian"
    critic: nnet.Mlp | None = None
    kernel: KernelSpec | None = None
    score_model: object = None
    opt: nnet.SgdState | None = None
    critic_opt: nnet.SgdState | None = None
    buffer: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.c(self.g(X)), axis=1)

    def to_dict(self):
        doc = {"g": self.g.to_dict(), "c": self.c.to_dict(), "form": self.form, "score_family": self.score_family}
        if self.score_model is not None:
            doc["score_model"] = self.score_model.to_dict()
        return doc


def init_model(cfg: TrainConfig, in_dim: int) -> UdaModel:
    g = nnet.init_mlp([in_dim, cfg.hidden_dim, cfg.bottleneck_dim], ["tanh", cfg.feature_activation],
                      make_rng(cfg.seed, "init", "g"))
    c = nnet.init_mlp([cfg.bottleneck_dim, cfg.classes], ["identity"], make_rng(cfg.seed, "init", "c"))
    critic = None
    kernel = None
    if cfg.form == "adversarial":
        critic = nnet.init_mlp(
            [cfg.bottleneck_dim, cfg.critic_hidden_dim, cfg.critic_hidden_dim, cfg.bottleneck_dim],
            ["tanh", "tanh", "tanh"],
            make_rng(cfg.seed, "init", "critic"),
        )
    else:
        kernel = KernelSpec(cfg.kernel, cfg.bandwidth)
    opt = nnet.SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    critic_opt = nnet.SgdState(cfg.critic_lr, cfg.critic_momentum, cfg.critic_weight_decay)
    return UdaModel(g, c, cfg.form, cfg.score, critic, kernel, None, opt, critic_opt)


class _TargetStream:
    """Endless reshuffled passes over the target indices."""

    def __init__(self, m, rng):
        self.m = m
        self.rng = rng
        self.queue = np.empty(0, dtype=np.int64)

    def next(self, size):
        while self.queue.size < size:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.m)])
        out, self.queue = self.queue[:size], self.queue[size:]
        return out


def fit_target_gaussian(F, ridge: float = 0.0) -> GaussianModel:
    """``fit_gaussian`` plus ``ridge * trace(cov)/d`` on the diagonal.

    Bottleneck features are often close to a lower-dimensional set, and the
    score of a near-singular fit is dominated by its smallest eigenvalue.
    """
    q = fit_gaussian(F)
    if ridge == 0.0:
        return q
    d = q.dim
    return GaussianModel.from_moments(q.mean, q.cov + ridge * np.trace(q.cov) / d * np.eye(d))


def _update_score_model(model: UdaModel, cfg: TrainConfig, Ft, idx, rng):
    if model.score_family == "gaussian":
        for i, f in zip(idx.tolist(), Ft):
            model.buffer.pop(i, None)
            model.buffer[i] = f
        while len(model.buffer) > cfg.buffer_size:
            model.buffer.pop(next(iter(model.buffer)))
        feats = np.array(list(model.buffer.values()))
        if feats.shape[0] < 2:
            feats = Ft
        model.score_model = fit_target_gaussian(feats, cfg.score_ridge)
    elif model.score_family == "gmm":
        if model.score_model is None:
            k = min(cfg.gmm_k, Ft.shape[0])
            model.score_model = fit_gmm_em(Ft, k, 50, rng)
        else:
            model.score_model = gmm_sgd_step(model.score_model, Ft, cfg.gmm_lr)
    else:
        if model.score_model is None:
            model.score_model = init_vae(Ft.shape[1], cfg.vae_latent_dim, cfg.vae_hidden_dim, rng,
                                         n_samples=cfg.vae_samples)
        model.score_model, _ = vae_elbo_step(model.score_model, Ft, cfg.vae_lr, rng)


def _check_finite(value, what, epoch, batch):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite {what} at epoch {epoch}, batch {batch}",
                            {"epoch": epoch, "batch": batch, "quantity": what})


def _train_epoch(model: UdaModel, source: Dataset, target: Dataset | None, cfg: TrainConfig, epoch: int,
                 transfer: str):
    if source.labels is None:
        raise MissingLabels("source data must be labelled")
    n = len(source)
    lam = lambda_schedule(epoch, cfg.warmup_epochs, cfg.gamma, cfg.lambda_max, cfg.epochs - cfg.warmup_epochs)
    order = make_rng(cfg.seed, "batches", epoch).permutation(n)
    stream = None
    if transfer != "erm":
        stream = _TargetStream(len(target), make_rng(cfg.seed, "target", epoch))
    score_rng = make_rng(cfg.seed, "score-model", epoch)
    ksd_rng = make_rng(cfg.seed, "ksd", epoch)
    log = {"epoch": epoch, "lambda": lam, "loss_c": [], "loss_d_raw": [], "loss_d_scaled": []}
    starts = range(0, n - 1, cfg.batch_size)
    for b, start in enumerate(starts):
        idx = order[start:start + cfg.batch_size]
        if idx.size < 2:
            continue
        Xs, ys = source.features[idx], source.labels[idx]
        Fs, tape_g = nnet.mlp_forward(model.g, Xs)
        logits, tape_c = nnet.mlp_forward(model.c, Fs)
        loss_c, dlogits = nnet.softmax_cross_entropy(logits, ys)
        _check_finite(loss_c, "classification loss", epoch, b)
        grads_c, dFs = nnet.mlp_backward(model.c, tape_c, dlogits)
        if transfer != "erm":
            tidx = stream.next(cfg.batch_size)
            if b % cfg.score_update_every == 0 or model.score_model is None:
                Ft = model.g(target.features[tidx])
                _update_score_model(model, cfg, Ft, tidx, score_rng)
            if transfer == "kernelized":
                raw, dV = ksd_v_value_and_grad(model.kernel, model.score_model, Fs, ksd_rng)
                d_transfer = dV
            else:
                raw, model.critic = adversarial_stein_estimate(
                    model.score_model, model.critic, Fs, cfg.ascent_steps, model.critic_opt, ksd_rng)
                d_transfer = None
            _check_finite(raw, "transfer loss", epoch, b)
            scaled = math.tanh(raw)
            log["loss_d_raw"].append(raw)
            log["loss_d_scaled"].append(scaled)
            if lam != 0.0:
                if d_transfer is None:
                    S, vjp = model.score_model.score_with_vjp(Fs, ksd_rng)
                    _, _, dx, out = stein_objective_and_grads(model.score_model, model.critic, Fs, S)
                    d_transfer = dx + vjp(out) / Fs.shape[0]
                dFs = dFs + (lam * (1.0 - scaled * scaled)) * d_transfer
        grads_g, _ = nnet.mlp_backward(model.g, tape_g, dFs)
        grads = nnet.clip_gradients(grads_g + grads_c, cfg.clip_norm)
        params = nnet.sgd_step(model.opt, model.g.params() + model.c.params(), grads)
        ng = len(grads_g)
        model.g = model.g.with_params(params[:ng])
        model.c = model.c.with_params(params[ng:])
        log["loss_c"].append(loss_c)
    summary = {"epoch": epoch, "lambda": lam}
    for key in ("loss_c", "loss_d_raw", "loss_d_scaled"):
        vals = log[key]
        summary[key] = float(np.mean(vals)) if vals else None
    return model, summary


def train_epoch_kernelized(model, source, target, cfg, epoch=0):
    return _train_epoch(model, source, target, cfg, epoch, "kernelized")


def train_epoch_adversarial(model, source, target, cfg, epoch=0):
    if model.critic is None:
        raise DataError("adversarial training needs a critic")
    return _train_epoch(model, source, target, cfg, epoch, "adversarial")


def train_epoch_erm(model, source, target, cfg, epoch=0):
    return _train_epoch(model, source, None, cfg, epoch, "erm")


def evaluate(model: UdaModel, data: Dataset) -> tuple[float, float]:
    if data.labels is None:
        raise MissingLabels("evaluation needs labels")
    if len(data) == 0:
        raise EmptyDataset("nothing to evaluate")
    acc = float(np.mean(model.predict(data.features) == data.labels))
    return acc, 1.0 - acc


def feature_ksd(model: UdaModel, source: Dataset, target: Dataset, kernel: KernelSpec, seed: int,
                ridge: float = 0.0) -> float:
    """KSD U-statistic of source features against a Gaussian fitted to target features."""
    q = fit_target_gaussian(model.g(target.features), ridge)
    return ksd_u_statistic(kernel, q, model.g(source.features), rng=make_rng(seed, "trace")).value


def run_uda(source: Dataset, target_train: Dataset, target_test: Dataset, cfg: TrainConfig):
    """Train for ``cfg.epochs`` epochs; returns ``(result record, final model)``.

    The record keeps the best target-test accuracy over epochs, the per-epoch
    log and a KSD trace of the source features against the target features.
    """
    model = init_model(cfg, source.dim)
    step = {"kernelized": train_epoch_kernelized, "adversarial": train_epoch_adversarial,
            "erm": train_epoch_erm}[cfg.form]
    trace_kernel = KernelSpec(cfg.kernel, cfg.bandwidth)
    epochs = []
    best_epoch, best_acc = -1, -1.0
    for epoch in range(cfg.epochs):
        model, summary = step(model, source, target_train, cfg, epoch)
        acc, _ = evaluate(model, target_test)
        summary["target_acc"] = acc
        summary["ksd"] = feature_ksd(model, source, target_train, trace_kernel, cfg.seed, cfg.score_ridge)
        epochs.append(summary)
        if acc > best_acc:
            best_epoch, best_acc = epoch, acc
    result = {
        "config": resolved_dict(cfg),
        "epochs": epochs,
        "best_epoch": best_epoch,
        "best_acc": best_acc,
        "ksd_trace": [e["ksd"] for e in epochs],
    }
    return result, model
