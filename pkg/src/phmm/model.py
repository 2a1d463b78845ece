"""The pyramidal latent-chain model.

Layer 1 tracks the observations step by step (prior conditions on the
previous observation, posterior on the current one). Each layer above
advances once per k updates of the layer below, attending over the window
of the k lower-layer hiddens it consumes. All latent transitions are
diagonal Gaussians produced by GRU cells followed by mean/log-variance
heads; a two-layer decoder reconstructs observations from the layer-1
latent, and a single output head (softmax classifier or linear predictor)
consumes the concatenated final hiddens of all layers.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .nn import AttentionPool, FcLayer, GaussianParams, GruCell, gaussian_head, reparam_sample
from .tensor import ContractError, DimensionError, Tensor

CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Model/run configuration is inconsistent."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    k is the window length / stride base, m the number of stacked layers.
    ``stride_mode`` selects how layers above the first are scheduled:
    "geometric" advances layer i once per k updates of layer i-1 (stride
    k**(i-1) in base steps), "flat" advances every upper layer once per k
    base steps.
    """

    k: int = 2
    m: int = 2
    input_dim: int = 1
    hidden_dim: int = 8
    attn_dim: int = 8
    head: str = "classifier"
    num_classes: int = 2
    output_dim: int = 1
    decoder_hidden_dim: int = 8
    stride_mode: str = "geometric"

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise ConfigError(f"k and m must be >= 1, got k={self.k}, m={self.m}")
        for name in ("input_dim", "hidden_dim", "attn_dim", "decoder_hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.head not in ("classifier", "predictor"):
            raise ConfigError(f"head must be classifier or predictor, got {self.head!r}")
        if self.head == "classifier" and self.num_classes < 2:
            raise ConfigError("classifier needs num_classes >= 2")
        if self.head == "predictor" and self.output_dim < 1:
            raise ConfigError("predictor needs output_dim >= 1")
        if self.stride_mode not in ("geometric", "flat"):
            raise ConfigError(f"stride_mode must be geometric or flat")

    @property
    def head_dim(self) -> int:
        return self.num_classes if self.head == "classifier" else self.output_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class NoiseSource:
    """Supplies exogenous standard-normal draws for reparameterized sampling."""

    def draw(self, shape) -> Tensor:
        raise NotImplementedError


class GaussianNoise(NoiseSource):
    """Fresh seeded stream; recreating with the same seed replays the draws."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def draw(self, shape) -> Tensor:
        return Tensor(self._rng.standard_normal(shape))


class ZeroNoise(NoiseSource):
    """Zero noise: reparameterized samples collapse to the mean."""

    def draw(self, shape) -> Tensor:
        return Tensor(np.zeros(shape))


class _InputChain:
    """Layer-1 networks: observation-conditioned prior and posterior."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, h = cfg.input_dim, cfg.hidden_dim
        self.prior_gru = GruCell(d, h, rng=rng)
        self.prior_mean = FcLayer(h, h, rng=rng)
        self.prior_logvar = FcLayer(h, h, rng=rng)
        self.post_enc1 = FcLayer(d, h, activation="tanh", rng=rng)
        self.post_enc2 = FcLayer(h, h, activation="tanh", rng=rng)
        self.post_gru = GruCell(h, h, rng=rng)
        self.post_mean = FcLayer(h, h, rng=rng)
        self.post_logvar = FcLayer(h, h, rng=rng)

    def named_blocks(self):
        return [("prior_gru", self.prior_gru), ("prior_mean", self.prior_mean),
                ("prior_logvar", self.prior_logvar), ("post_enc1", self.post_enc1),
                ("post_enc2", self.post_enc2), ("post_gru", self.post_gru),
                ("post_mean", self.post_mean), ("post_logvar", self.post_logvar)]


class _MultistepChain:
    """Upper-layer networks: window attention, prior and posterior."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        h, a = cfg.hidden_dim, cfg.attn_dim
        # A single attention block serves both prior and posterior.
        self.attention = AttentionPool(h, h, a, rng=rng)
        self.prior_gru = GruCell(a, h, rng=rng)
        self.prior_mean = FcLayer(h, h, rng=rng)
        self.prior_logvar = FcLayer(h, h, rng=rng)
        self.post_enc1 = FcLayer(a, h, activation="tanh", rng=rng)
        self.post_enc2 = FcLayer(h, h, activation="tanh", rng=rng)
        self.post_gru = GruCell(h, h, rng=rng)
        self.post_mean = FcLayer(h, h, rng=rng)
        self.post_logvar = FcLayer(h, h, rng=rng)

    def named_blocks(self):
        return [("attention", self.attention), ("prior_gru", self.prior_gru),
                ("prior_mean", self.prior_mean), ("prior_logvar", self.prior_logvar),
                ("post_enc1", self.post_enc1), ("post_enc2", self.post_enc2),
                ("post_gru", self.post_gru), ("post_mean", self.post_mean),
                ("post_logvar", self.post_logvar)]


class PhmmModel:
    """Full pyramid: layer networks, decoder, output head, initial hiddens."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.input_chain = _InputChain(config, rng)
        self.multistep_chains = [
            _MultistepChain(config, rng) for _ in range(config.m - 1)
        ]
        h = config.hidden_dim
        self.dec_hidden = FcLayer(h, config.decoder_hidden_dim, activation="tanh", rng=rng)
        self.dec_mean = FcLayer(config.decoder_hidden_dim, config.input_dim, rng=rng)
        self.dec_logvar = FcLayer(config.decoder_hidden_dim, config.input_dim, rng=rng)
        self.head_layer = FcLayer(config.m * h, config.head_dim, rng=rng)
        self.h0 = [Tensor(np.zeros(h), requires_grad=True) for _ in range(config.m)]

    # -- parameter registry -------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for bname, block in self.input_chain.named_blocks():
            for pname, p in block.parameters():
                out.append((f"layer0.{bname}.{pname}", p))
        for i, chain in enumerate(self.multistep_chains):
            for bname, block in chain.named_blocks():
                for pname, p in block.parameters():
                    out.append((f"layer{i + 1}.{bname}.{pname}", p))
        for bname, block in [("dec_hidden", self.dec_hidden),
                             ("dec_mean", self.dec_mean),
                             ("dec_logvar", self.dec_logvar),
                             ("head", self.head_layer)]:
            for pname, p in block.parameters():
                out.append((f"{bname}.{pname}", p))
        for i, h0 in enumerate(self.h0):
            out.append((f"h0.{i}", h0))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- single-step conditionals --------------------------------------------
    def input_prior_step(self, h_prev: Tensor, x_prev: Tensor) -> GaussianParams:
        """p(h_t^1 | h_{t-1}^1, x_{t-1}) via the layer-1 prior GRU."""
        c = self.input_chain
        h = c.prior_gru.step(x_prev, h_prev)
        return gaussian_head(c.prior_mean, c.prior_logvar, h)

    def input_posterior_step(self, h_prev: Tensor, x_t: Tensor) -> GaussianParams:
        """q(h_t^1 | x_t, h_{t-1}^1): encode x_t, then the posterior GRU."""
        c = self.input_chain
        e = c.post_enc2(c.post_enc1(x_t))
        h = c.post_gru.step(e, h_prev)
        return gaussian_head(c.post_mean, c.post_logvar, h)

    def multistep_prior_step(self, layer: int, h_prev: Tensor,
                             window: list[Tensor]) -> GaussianParams:
        """p(h^i | h^i_prev, window of k lower hiddens), layer >= 2 (1-based)."""
        c = self._chain(layer)
        ctx = c.attention(window, h_prev)
        h = c.prior_gru.step(ctx, h_prev)
        return gaussian_head(c.prior_mean, c.prior_logvar, h)

    def multistep_posterior_step(self, layer: int, h_prev: Tensor,
                                 window: list[Tensor]) -> GaussianParams:
        c = self._chain(layer)
        ctx = c.attention(window, h_prev)
        e = c.post_enc2(c.post_enc1(ctx))
        h = c.post_gru.step(e, h_prev)
        return gaussian_head(c.post_mean, c.post_logvar, h)

    def _chain(self, layer: int) -> _MultistepChain:
        if not (2 <= layer <= self.config.m):
            raise ContractError(f"multistep layer index {layer} out of range")
        return self.multistep_chains[layer - 2]

    # -- decoder and head -----------------------------------------------------
    def decode_step(self, h1: Tensor) -> GaussianParams:
        """Diagonal Gaussian over the observation given the layer-1 latent."""
        feats = self.dec_hidden(h1)
        return gaussian_head(self.dec_mean, self.dec_logvar, feats)

    def head_logits(self, final_hiddens: list[Tensor]) -> Tensor:
        cat = T.concat_lastdim(final_hiddens)
        expected = self.config.m * self.config.hidden_dim
        if cat.shape[-1] != expected:
            raise DimensionError(f"head expects dim {expected}, got {cat.shape}")
        return self.head_layer(cat)

    def predict_head(self, final_hiddens: list[Tensor]) -> Tensor:
        """Class probabilities (classifier) or unconstrained values (predictor)."""
        logits = self.head_logits(final_hiddens)
        if self.config.head == "classifier":
            return T.softmax_lastdim(logits)
        return logits


@dataclass
class PyramidState:
    """Live unroll state: per-layer hidden, window buffers, update counters."""

    hiddens: list[Tensor]
    windows: list[deque]          # windows[i] buffers layer-(i-1) hiddens, i >= 1
    pending: list[int]            # lower-layer updates since layer i last advanced
    update_counts: list[int]
    t: int = 0                    # base steps consumed


@dataclass
class LayerUpdate:
    """One latent update: which layer, at which base step, with which params."""

    layer: int                    # 0-based
    base_t: int                   # 1-based base step at which the update fired
    prior: GaussianParams
    posterior: GaussianParams | None
    h: Tensor


@dataclass
class UnrollResult:
    updates: list[LayerUpdate]
    state: PyramidState

    @property
    def update_counts(self) -> list[int]:
        return self.state.update_counts

    def layer_updates(self, layer: int) -> list[LayerUpdate]:
        return [u for u in self.updates if u.layer == layer]

    def final_hiddens(self) -> list[Tensor]:
        return list(self.state.hiddens)


class PyramidStepper:
    """Advances the pyramid one base step at a time.

    Used by both the full unroll and the forecasting rollout (which keeps
    stepping the priors past the observed context).
    """

    def __init__(self, model: PhmmModel, noise: NoiseSource, batch: int | None):
        self.model = model
        self.noise = noise
        self.batch = batch
        cfg = model.config
        hiddens = [self._tile(model.h0[i]) for i in range(cfg.m)]
        self.state = PyramidState(
            hiddens=hiddens,
            windows=[deque(maxlen=cfg.k) for _ in range(cfg.m)],
            pending=[0] * cfg.m,
            update_counts=[0] * cfg.m,
        )
        self.updates: list[LayerUpdate] = []

    def _tile(self, v: Tensor) -> Tensor:
        if self.batch is None:
            return v
        return Tensor(np.zeros((self.batch, v.shape[-1]))) + v

    def _shape(self):
        h = self.model.config.hidden_dim
        return (h,) if self.batch is None else (self.batch, h)

    def advance(self, x_prev: Tensor, x_t: Tensor | None):
        """One base step: update layer 1 (posterior if x_t given), cascade up."""
        st = self.state
        st.t += 1
        model = self.model
        prior = model.input_prior_step(st.hiddens[0], x_prev)
        posterior = None
        if x_t is not None:
            posterior = model.input_posterior_step(st.hiddens[0], x_t)
        h_new = reparam_sample(posterior if posterior is not None else prior,
                               self.noise.draw(self._shape()))
        self._commit(0, prior, posterior, h_new)
        if model.config.stride_mode == "flat":
            self._cascade_flat(use_posterior=x_t is not None)
        else:
            self._cascade_geometric(use_posterior=x_t is not None)

    def _commit(self, layer: int, prior, posterior, h_new: Tensor):
        st = self.state
        st.hiddens[layer] = h_new
        st.update_counts[layer] += 1
        self.updates.append(LayerUpdate(layer, st.t, prior, posterior, h_new))
        if layer + 1 < self.model.config.m:
            st.windows[layer + 1].append(h_new)
            st.pending[layer + 1] += 1

    def _update_upper(self, layer: int, window: list[Tensor], use_posterior: bool):
        model = self.model
        st = self.state
        prior = model.multistep_prior_step(layer + 1, st.hiddens[layer], window)
        posterior = None
        if use_posterior:
            posterior = model.multistep_posterior_step(
                layer + 1, st.hiddens[layer], window)
        h_new = reparam_sample(posterior if posterior is not None else prior,
                               self.noise.draw(self._shape()))
        st.pending[layer] = 0
        self._commit(layer, prior, posterior, h_new)

    def _cascade_geometric(self, use_posterior: bool):
        cfg = self.model.config
        layer = 1
        while layer < cfg.m and self.state.pending[layer] == cfg.k:
            window = list(self.state.windows[layer])
            self._update_upper(layer, window, use_posterior)
            layer += 1

    def _cascade_flat(self, use_posterior: bool):
        cfg = self.model.config
        if self.state.t % cfg.k != 0:
            return
        for layer in range(1, cfg.m):
            window = list(self.state.windows[layer])
            pad = cfg.k - len(window)
            if pad > 0:
                window = [self._tile(self.model.h0[layer - 1])] * pad + window
            self._update_upper(layer, window, use_posterior)

    def result(self) -> UnrollResult:
        return UnrollResult(updates=self.updates, state=self.state)


def _as_step_tensors(xs: np.ndarray) -> tuple[list[Tensor], int | None]:
    """Split a (T, D) or (B, T, D) array into per-step constant tensors."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        return [Tensor(xs[t]) for t in range(xs.shape[0])], None
    if xs.ndim == 3:
        return [Tensor(xs[:, t, :]) for t in range(xs.shape[1])], xs.shape[0]
    raise DimensionError(f"series must be (T, D) or (B, T, D), got {xs.shape}")


def pyramid_unroll(model: PhmmModel, xs: np.ndarray, noise: NoiseSource,
                   mode: str = "posterior") -> UnrollResult:
    """Run the full temporal schedule over a series (or batch of series).

    In posterior mode every layer update records both prior and posterior
    parameters and samples the new hidden from the posterior; in prior
    mode only the priors are used (generation).
    """
    if mode not in ("posterior", "prior"):
        raise ContractError(f"mode must be posterior or prior, got {mode!r}")
    steps, batch = _as_step_tensors(xs)
    if not steps:
        raise ContractError("cannot unroll an empty series")
    if steps[0].shape[-1] != model.config.input_dim:
        raise DimensionError(
            f"series dim {steps[0].shape[-1]} != input_dim {model.config.input_dim}")
    stepper = PyramidStepper(model, noise, batch)
    d = model.config.input_dim
    zero = Tensor(np.zeros(d) if batch is None else np.zeros((batch, d)))
    for t, x_t in enumerate(steps):
        x_prev = steps[t - 1] if t > 0 else zero
        stepper.advance(x_prev, x_t if mode == "posterior" else None)
    return stepper.result()


def single_chain_unroll(model: PhmmModel, xs: np.ndarray, noise: NoiseSource,
                        mode: str = "posterior") -> UnrollResult:
    """Reference path for the flat (single-layer) latent chain.

    Bypasses the pyramid scheduler entirely; with m=1 configs it must
    reproduce ``pyramid_unroll`` bit for bit.
    """
    if model.config.m != 1:
        raise ContractError("single_chain_unroll requires an m=1 config")
    if mode not in ("posterior", "prior"):
        raise ContractError(f"mode must be posterior or prior, got {mode!r}")
    steps, batch = _as_step_tensors(xs)
    if not steps:
        raise ContractError("cannot unroll an empty series")
    stepper = PyramidStepper(model, noise, batch)
    st = stepper.state
    d = model.config.input_dim
    zero = Tensor(np.zeros(d) if batch is None else np.zeros((batch, d)))
    for t, x_t in enumerate(steps):
        x_prev = steps[t - 1] if t > 0 else zero
        st.t += 1
        prior = model.input_prior_step(st.hiddens[0], x_prev)
        posterior = (model.input_posterior_step(st.hiddens[0], x_t)
                     if mode == "posterior" else None)
        h_new = reparam_sample(posterior if posterior is not None else prior,
                               noise.draw(stepper._shape()))
        st.hiddens[0] = h_new
        st.update_counts[0] += 1
        stepper.updates.append(LayerUpdate(0, st.t, prior, posterior, h_new))
    return stepper.result()


def forecast_rollout(model: PhmmModel, context: np.ndarray, horizon: int,
                     noise: NoiseSource | None = None) -> np.ndarray:
    """Forecast ``horizon`` steps past the observed context.

    The context is absorbed with the posterior networks; each forecast
    step advances the priors, emits the decoder mean and feeds it back as
    the next observation. With the default zero noise the rollout is a
    deterministic function of the context.
    """
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 2 or context.shape[0] < 1:
        raise ContractError(f"context must be a nonempty (T, D) series")
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    if noise is None:
        noise = ZeroNoise()
    steps, _ = _as_step_tensors(context)
    stepper = PyramidStepper(model, noise, None)
    zero = Tensor(np.zeros(model.config.input_dim))
    for t, x_t in enumerate(steps):
        stepper.advance(steps[t - 1] if t > 0 else zero, x_t)
    out = np.zeros((horizon, model.config.input_dim))
    x_prev = steps[-1]
    for i in range(horizon):
        stepper.advance(x_prev, None)
        emission = model.decode_step(stepper.state.hiddens[0]).mean
        out[i] = emission.data
        x_prev = emission
    return out


def infer(model: PhmmModel, xs: np.ndarray):
    """Deterministic prediction: posterior mean propagation, then the head.

    Returns (predicted_class, probabilities) for classifiers and the
    predicted value vector for predictors. Accepts (T, D) or (B, T, D).
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim not in (2, 3) or xs.shape[-2] < 1:
        raise ContractError("inference needs a nonempty series")
    res = pyramid_unroll(model, xs, ZeroNoise(), mode="posterior")
    out = model.predict_head(res.final_hiddens())
    if model.config.head == "classifier":
        probs = out.data
        pred = np.argmax(probs, axis=-1)
        return pred, probs
    return out.data


# -- checkpoint persistence -------------------------------------------------

class CheckpointError(ValueError):
    """Checkpoint file is malformed, incompatible, or of unknown version."""


def save_checkpoint(path, model: PhmmModel, scaler: dict | None = None,
                    seed: int | None = None):
    """Write a self-describing JSON checkpoint (versioned, deterministic)."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "scaler": scaler,
        "seed": seed,
        "params": {
            name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in model.named_parameters()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[PhmmModel, dict | None, int | None]:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r} "
            f"(this build reads version {CHECKPOINT_VERSION})")
    try:
        config = ModelConfig.from_dict(payload["config"])
    except (KeyError, TypeError, ConfigError) as e:
        raise CheckpointError(f"bad config in checkpoint: {e}") from e
    model = PhmmModel(config, seed=0)
    stored = payload.get("params", {})
    for name, p in model.named_parameters():
        if name not in stored:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != p.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {shape}, config implies {p.shape}")
        p.data[:] = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    extra = set(stored) - {name for name, _ in model.named_parameters()}
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)}")
    return model, payload.get("scaler"), payload.get("seed")
