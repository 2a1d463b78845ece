"""Learning method: reformulated ELBO with per-step reconstruction and KL
terms, terminal label likelihood, reparameterized gradients, Adam updates.

The objective is maximized; the trainer minimizes its negation. The
terminal step contributes its reconstruction term, minus the KL at that
step, plus the label log-likelihood; the prior/posterior label-head ratio
term vanishes because a single shared head plays both roles.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import SeriesDataset
from .model import (
    GaussianNoise,
    PhmmModel,
    UnrollResult,
    ZeroNoise,
    pyramid_unroll,
)
from .nn import GaussianParams
from .tensor import ContractError, DimensionError, Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericalError(RuntimeError):
    """Training produced a non-finite loss; ``term`` names the offender."""

    def __init__(self, term: str, detail: str = ""):
        self.term = term
        super().__init__(f"non-finite {term}" + (f" ({detail})" if detail else ""))


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    kl_weight: float = 1.0
    grad_clip_norm: float = 5.0
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_warmup: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.kl_weight < 0:
            raise ValueError("kl_weight must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class LossBreakdown:
    """Per-batch (or per-epoch) objective components, as batch means.

    ``kl_total`` is the beta-weighted KL sum, so elbo = head_ll +
    recon_ll - kl_total.
    """

    recon_ll: float
    kl_total: float
    head_ll: float
    elbo: float


def kl_diag_gaussian(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over all elements."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(f"KL dims {q.mean.shape} vs {p.mean.shape}")
    diff = q.mean - p.mean
    ratio = T.exp(q.log_var - p.log_var)
    quad = diff * diff * T.exp(-p.log_var)
    return 0.5 * T.tsum(ratio + quad - 1.0 + p.log_var - q.log_var)


def gaussian_log_density(x, g: GaussianParams) -> Tensor:
    """log N(x; mean, diag(exp(log_var))), summed over all elements."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape != g.mean.shape:
        raise DimensionError(f"density dims {x.shape} vs {g.mean.shape}")
    diff = x - g.mean
    quad = diff * diff * T.exp(-g.log_var)
    ll = -0.5 * T.tsum(g.log_var + quad)
    return ll + (-0.5 * LOG_2PI * x.data.size)


def _updates_by_step(result: UnrollResult) -> dict[int, list]:
    grouped = defaultdict(list)
    for u in result.updates:
        grouped[u.base_t].append(u)
    return grouped


def _recon_at(model: PhmmModel, result: UnrollResult, t: int, x_t) -> Tensor:
    layer1 = result.layer_updates(0)
    if t < 1 or t > len(layer1):
        raise ContractError(f"no layer-1 update recorded for step {t}")
    return gaussian_log_density(x_t, model.decode_step(layer1[t - 1].h))


def _kl_at(result: UnrollResult, t: int) -> Tensor | None:
    terms = None
    for u in _updates_by_step(result).get(t, []):
        if u.posterior is None:
            raise ContractError("KL needs a posterior-mode unroll")
        kl = kl_diag_gaussian(u.posterior, u.prior)
        terms = kl if terms is None else terms + kl
    return terms


def step_loss(model: PhmmModel, result: UnrollResult, t: int, x_t,
              beta: float = 1.0) -> Tensor:
    """Reconstruction log-likelihood at step t minus the beta-weighted KL
    of every layer update that fired at that step."""
    loss = _recon_at(model, result, t, x_t)
    kl = _kl_at(result, t)
    if kl is not None and beta != 0.0:
        loss = loss - beta * kl
    return loss


def head_log_likelihood(model: PhmmModel, final_hiddens, y) -> Tensor:
    """Label log-likelihood under the shared output head.

    Classifier: categorical log-probability of the true class; predictor:
    unit-variance Gaussian log-density of the target vector.
    """
    logits = model.head_logits(final_hiddens)
    if model.config.head == "classifier":
        y_arr = np.atleast_1d(np.asarray(y, dtype=np.int64))
        onehot = np.eye(model.config.num_classes)[y_arr]
        if logits.ndim == 1:
            onehot = onehot[0]
        return T.tsum(T.log_softmax_lastdim(logits) * Tensor(onehot))
    target = Tensor(np.asarray(y, dtype=np.float64))
    if target.shape != logits.shape:
        raise DimensionError(f"target {target.shape} vs head output {logits.shape}")
    diff = target - logits
    return -0.5 * T.tsum(diff * diff) + (-0.5 * LOG_2PI * target.data.size)


def terminal_loss(model: PhmmModel, result: UnrollResult, x_last, y,
                  beta: float = 1.0) -> Tensor:
    """Final-step loss: reconstruction, minus KL, plus the label term.

    The prior-vs-posterior label ratio term is identically zero because
    one head is shared, so it never appears.
    """
    if y is None:
        raise ContractError("terminal loss of a supervised run needs a label")
    t_last = len(result.layer_updates(0))
    loss = step_loss(model, result, t_last, x_last, beta)
    return loss + head_log_likelihood(model, result.final_hiddens(), y)


def elbo_batch(model: PhmmModel, xs: np.ndarray, ys, beta: float = 1.0,
               noise=None) -> tuple[Tensor, LossBreakdown]:
    """Objective for one batch of equal-length series.

    Returns the scalar objective tensor (mean ELBO over the batch; the
    trainer minimizes its negation) and the component breakdown.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    if xs.shape[0] < 1 or xs.shape[1] < 1:
        raise ContractError("elbo needs a nonempty batch of nonempty series")
    b, t_len, _ = xs.shape
    if noise is None:
        noise = ZeroNoise()
    result = pyramid_unroll(model, xs, noise, mode="posterior")

    recon = None
    for t in range(1, t_len + 1):
        term = _recon_at(model, result, t, xs[:, t - 1, :])
        recon = term if recon is None else recon + term
    kl = None
    for u in result.updates:
        term = kl_diag_gaussian(u.posterior, u.prior)
        kl = term if kl is None else kl + term
    head = head_log_likelihood(model, result.final_hiddens(), ys)

    inv_b = 1.0 / b
    objective = (recon + head) * inv_b
    if kl is not None and beta != 0.0:
        objective = objective - (beta * inv_b) * kl

    recon_v = float(recon.data) * inv_b
    kl_v = (beta * float(kl.data) * inv_b) if kl is not None else 0.0
    head_v = float(head.data) * inv_b
    for name, v in (("reconstruction term", recon_v), ("kl term", kl_v),
                    ("head term", head_v)):
        if not np.isfinite(v):
            raise NumericalError(name)
    return objective, LossBreakdown(recon_ll=recon_v, kl_total=kl_v,
                                    head_ll=head_v,
                                    elbo=head_v + recon_v - kl_v)


class Adam:
    """Adam with bias correction and optional global-norm gradient clipping."""

    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self._m = [np.zeros(p.shape) for p in params]
        self._v = [np.zeros(p.shape) for p in params]

    def _clipped_grads(self) -> list[np.ndarray]:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape)
                 for p in self.params]
        if self.clip_norm is not None and self.clip_norm > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
                grads = [g * scale for g in grads]
        return grads

    def step(self):
        self.t += 1
        grads = self._clipped_grads()
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def _length_grouped_batches(samples, batch_size: int,
                            rng: np.random.Generator) -> list[list[int]]:
    """Equal-length minibatches with a seeded shuffle, deterministic order."""
    by_len = defaultdict(list)
    for idx, s in enumerate(samples):
        by_len[s.length].append(idx)
    batches = []
    for length in sorted(by_len):
        idxs = np.array(by_len[length])
        rng.shuffle(idxs)
        for i in range(0, len(idxs), batch_size):
            batches.append([int(j) for j in idxs[i : i + batch_size]])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def _batch_arrays(samples, idxs, task: str):
    xs = np.stack([samples[i].trimmed() for i in idxs])
    if task == "classification":
        ys = np.array([samples[i].label for i in idxs], dtype=np.int64)
    else:
        ys = np.stack([np.asarray(samples[i].label).reshape(-1) for i in idxs])
    return xs, ys


def classification_accuracy(model: PhmmModel, samples,
                            batch_size: int = 64) -> float:
    """Accuracy of deterministic (mean-propagation) predictions."""
    if not samples:
        raise ContractError("accuracy of an empty sample list")
    by_len = defaultdict(list)
    for idx, s in enumerate(samples):
        by_len[s.length].append(idx)
    correct = 0
    for length in sorted(by_len):
        idxs = by_len[length]
        for i in range(0, len(idxs), batch_size):
            chunk = idxs[i : i + batch_size]
            xs = np.stack([samples[j].trimmed() for j in chunk])
            res = pyramid_unroll(model, xs, ZeroNoise(), mode="posterior")
            probs = model.predict_head(res.final_hiddens()).data
            preds = np.argmax(probs, axis=-1)
            correct += sum(int(preds[n]) == samples[j].label
                           for n, j in enumerate(chunk))
    return correct / len(samples)


def head_rmse(model: PhmmModel, samples, batch_size: int = 64) -> float:
    """RMSE of the predictor head against flattened continuation targets."""
    if not samples:
        raise ContractError("rmse of an empty sample list")
    sq_sum, count = 0.0, 0
    by_len = defaultdict(list)
    for idx, s in enumerate(samples):
        by_len[s.length].append(idx)
    for length in sorted(by_len):
        idxs = by_len[length]
        for i in range(0, len(idxs), batch_size):
            chunk = idxs[i : i + batch_size]
            xs = np.stack([samples[j].trimmed() for j in chunk])
            ys = np.stack([np.asarray(samples[j].label).reshape(-1) for j in chunk])
            res = pyramid_unroll(model, xs, ZeroNoise(), mode="posterior")
            pred = model.predict_head(res.final_hiddens()).data
            sq_sum += float(((pred - ys) ** 2).sum())
            count += ys.size
    return float(np.sqrt(sq_sum / count))


def _train_metric(model: PhmmModel, samples, task: str) -> float:
    if task == "classification":
        return classification_accuracy(model, samples)
    return head_rmse(model, samples)


def train(model: PhmmModel, dataset: SeriesDataset, cfg: TrainConfig,
          log_hook=None) -> list[dict]:
    """Adam on the negated ELBO; returns one log record per epoch.

    Deterministic given (model init, dataset, cfg.seed): batch order and
    reparameterization noise derive from the seed alone. Aborts with
    NumericalError when a loss term goes non-finite.
    """
    train_samples = dataset.train_samples
    if not train_samples:
        raise ContractError("dataset has no train split")
    if dataset.task == "forecasting":
        want = np.asarray(train_samples[0].label).size
        if model.config.head != "predictor" or model.config.head_dim != want:
            raise ContractError(
                f"forecasting data needs a predictor head with output_dim {want}")
    opt = Adam(model.parameters(), lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps,
               clip_norm=cfg.grad_clip_norm)
    warmup_epochs = max(1, int(np.ceil(0.1 * cfg.epochs))) if cfg.kl_warmup else 0
    log: list[dict] = []
    test_samples = dataset.test_samples
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        beta = cfg.kl_weight
        if warmup_epochs and epoch < warmup_epochs:
            beta = cfg.kl_weight * (epoch + 1) / warmup_epochs
        rng = np.random.default_rng([cfg.seed, 1 + epoch])
        batches = _length_grouped_batches(train_samples, cfg.batch_size, rng)
        sums = np.zeros(4)
        n_seen = 0
        for b_i, idxs in enumerate(batches):
            xs, ys = _batch_arrays(train_samples, idxs, dataset.task)
            noise = GaussianNoise([cfg.seed, 100 + epoch, b_i])
            model.zero_grad()
            try:
                with T.Tape():
                    objective, parts = elbo_batch(model, xs, ys, beta, noise)
                    loss = -1.0 * objective
                T.backward(loss)
            except NumericalError as e:
                raise NumericalError(e.term,
                                     f"epoch {epoch}, batch {b_i}") from e
            except T.DomainError as e:
                raise NumericalError(f"forward op: {e}",
                                     f"epoch {epoch}, batch {b_i}") from e
            opt.step()
            w = len(idxs)
            sums += w * np.array([parts.elbo, parts.recon_ll, parts.kl_total,
                                  parts.head_ll])
            n_seen += w
        means = sums / max(1, n_seen)
        train_metric = _train_metric(model, train_samples, dataset.task)
        val_metric = (_train_metric(model, test_samples, dataset.task)
                      if test_samples else None)
        record = {
            "epoch": epoch,
            "elbo": means[0],
            "recon_ll": means[1],
            "kl_total": means[2],
            "head_ll": means[3],
            "train_metric": train_metric,
            "val_metric": val_metric,
            "wall_time_ms": int((time.perf_counter() - start) * 1000),
        }
        log.append(record)
        if log_hook is not None:
            log_hook(record)
    return log
