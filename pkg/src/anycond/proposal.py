"""Proposal network and its distribution family.

One shared trunk maps the concatenation of the zero-imputed encoding and the
bitmask to a wide head vector holding, for every feature dimension, either
mixture-of-Gaussians parameters (continuous) or categorical logits
(categorical), plus a per-dimension latent code consumed by the energy
network. Consumers index only the unobserved dimensions.

Mixture scales are parameterized as softplus(raw) + scale_floor, so they stay
above the floor for any raw network output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from . import nn
from .errors import ConfigError
from .schema import FeatureSchema

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# distribution family


@dataclass(frozen=True)
class MixtureParams:
    """Per-dimension mixture of Gaussians, broadcastable over leading axes."""

    logits: np.ndarray  # (..., K)
    means: np.ndarray  # (..., K)
    scales: np.ndarray  # (..., K), already floored

    @property
    def n_components(self) -> int:
        return self.logits.shape[-1]

    def log_weights(self) -> np.ndarray:
        return self.logits - logsumexp(self.logits, axis=-1, keepdims=True)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        return mog_sample(self, rng, size)

    def log_pdf(self, value) -> np.ndarray:
        return mog_log_pdf(self, value)

    def mean(self) -> np.ndarray:
        return mog_mean(self)


@dataclass(frozen=True)
class CategoricalParams:
    logits: np.ndarray  # (..., C)

    @property
    def n_categories(self) -> int:
        return self.logits.shape[-1]

    def log_probs(self) -> np.ndarray:
        return self.logits - logsumexp(self.logits, axis=-1, keepdims=True)

    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    def sample(self, rng: np.random.Generator) -> int:
        return int(categorical_sample(self.logits, rng))


def _component_logpdf(mix: MixtureParams, value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)[..., None]
    z = (v - mix.means) / mix.scales
    return -0.5 * z * z - np.log(mix.scales) - 0.5 * LOG_2PI


def mog_log_pdf(mix: MixtureParams, value) -> np.ndarray:
    """log sum_k pi_k N(value; mu_k, sigma_k^2) via log-sum-exp."""
    a = mix.log_weights() + _component_logpdf(mix, value)
    return logsumexp(a, axis=-1)


def mog_log_pdf_grads(mix: MixtureParams, value):
    """(log_pdf, d/dlogits, d/dmeans, d/dscales) of the mixture log density."""
    logw = mix.log_weights()
    a = logw + _component_logpdf(mix, value)
    total = logsumexp(a, axis=-1, keepdims=True)
    resp = np.exp(a - total)  # responsibilities, sum to 1
    pi = np.exp(logw)
    v = np.asarray(value, dtype=np.float64)[..., None]
    z = (v - mix.means) / mix.scales
    dlogits = resp - pi
    dmeans = resp * z / mix.scales
    dscales = resp * (z * z - 1.0) / mix.scales
    return np.squeeze(total, axis=-1), dlogits, dmeans, dscales


def mog_mean(mix: MixtureParams) -> np.ndarray:
    return np.sum(np.exp(mix.log_weights()) * mix.means, axis=-1)


def expand_for_samples(mix: MixtureParams) -> MixtureParams:
    """Insert a broadcast axis so (M,)-batched mixtures accept (M, S) values."""
    return MixtureParams(
        logits=mix.logits[..., None, :], means=mix.means[..., None, :], scales=mix.scales[..., None, :]
    )


def _categorical_from_uniform(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF categorical draw; u broadcasts over trailing sample axes."""
    cdf = np.cumsum(softmax(logits, axis=-1), axis=-1)
    return np.sum(u[..., None] > cdf[..., None, :], axis=-1)


def mog_sample(mix: MixtureParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Ancestral sampling: component by categorical, then Gaussian."""
    comp, eps = draw_mog_noise(mix, rng, size)
    return mog_from_noise(mix, comp, eps)


def draw_mog_noise(mix: MixtureParams, rng: np.random.Generator, size: int | None = None):
    """Raw randomness of a mixture draw: (component indices, standard normals).

    Kept separate from the value construction so samples can be regenerated
    under perturbed parameters with common random numbers.
    """
    lead = mix.logits.shape[:-1]
    shape = lead if size is None else lead + (size,)
    u = rng.random(shape)
    if size is None:
        comp = _categorical_from_uniform(mix.logits, u[..., None])[..., 0]
    else:
        comp = _categorical_from_uniform(mix.logits, u)
    eps = rng.standard_normal(shape)
    return comp, eps


def mog_from_noise(mix: MixtureParams, comp: np.ndarray, eps: np.ndarray) -> np.ndarray:
    if comp.ndim == mix.means.ndim:  # trailing sample axis
        means = np.take_along_axis(mix.means, comp, axis=-1)
        scales = np.take_along_axis(mix.scales, comp, axis=-1)
    else:
        means = np.take_along_axis(mix.means, comp[..., None], axis=-1)[..., 0]
        scales = np.take_along_axis(mix.scales, comp[..., None], axis=-1)[..., 0]
    return means + scales * eps


def categorical_sample(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = np.asarray(rng.random(logits.shape[:-1]))
    return _categorical_from_uniform(logits, u)


# ---------------------------------------------------------------------------
# head layout and network


@dataclass(frozen=True)
class HeadLayout:
    """Column layout of the proposal network's output vector.

    Continuous dimension: [logits(K), means(K), raw_scales(K), latent(L)].
    Categorical dimension: [logits(C), latent(L)].
    """

    schema: FeatureSchema
    n_components: int
    latent_dim: int

    def head_width(self, j: int) -> int:
        f = self.schema.features[j]
        base = 3 * self.n_components if f.kind == "continuous" else f.n_categories
        return base + self.latent_dim

    def head_offset(self, j: int) -> int:
        return sum(self.head_width(i) for i in range(j))

    @property
    def total_width(self) -> int:
        return self.head_offset(self.schema.n_features - 1) + self.head_width(self.schema.n_features - 1)

    def logits_cols(self, j: int) -> np.ndarray:
        off = self.head_offset(j)
        f = self.schema.features[j]
        n = self.n_components if f.kind == "continuous" else f.n_categories
        return np.arange(off, off + n)

    def means_cols(self, j: int) -> np.ndarray:
        off = self.head_offset(j)
        return np.arange(off + self.n_components, off + 2 * self.n_components)

    def scales_cols(self, j: int) -> np.ndarray:
        off = self.head_offset(j)
        return np.arange(off + 2 * self.n_components, off + 3 * self.n_components)

    def latent_cols(self, j: int) -> np.ndarray:
        off = self.head_offset(j)
        f = self.schema.features[j]
        base = 3 * self.n_components if f.kind == "continuous" else f.n_categories
        return np.arange(off + base, off + base + self.latent_dim)


def proposal_input_dim(schema: FeatureSchema) -> int:
    return schema.encoded_width + schema.n_features


def build_proposal_network(
    schema: FeatureSchema,
    hidden_dim: int,
    n_blocks: int,
    n_components: int,
    latent_dim: int,
    rng: np.random.Generator,
) -> tuple[nn.NetworkParams, HeadLayout]:
    layout = HeadLayout(schema=schema, n_components=n_components, latent_dim=latent_dim)
    params = nn.build_residual_mlp(
        input_dim=proposal_input_dim(schema),
        hidden_dim=hidden_dim,
        n_blocks=n_blocks,
        output_dim=layout.total_width,
        rng=rng,
    )
    return params, layout


def floored_scales(raw: np.ndarray, scale_floor: float) -> np.ndarray:
    return nn.softplus(raw) + scale_floor


@dataclass(frozen=True)
class ProposalOutput:
    """View over one batch of head vectors; indexable by (row, feature)."""

    head_out: np.ndarray  # (n, total_width)
    layout: HeadLayout
    scale_floor: float

    def mixture(self, row: int, j: int) -> MixtureParams:
        if not self.layout.schema.is_continuous(j):
            raise ConfigError(f"feature {j} is categorical; use categorical()")
        h = self.head_out[row]
        return MixtureParams(
            logits=h[self.layout.logits_cols(j)].copy(),
            means=h[self.layout.means_cols(j)].copy(),
            scales=floored_scales(h[self.layout.scales_cols(j)], self.scale_floor),
        )

    def categorical(self, row: int, j: int) -> CategoricalParams:
        if self.layout.schema.is_continuous(j):
            raise ConfigError(f"feature {j} is continuous; use mixture()")
        return CategoricalParams(logits=self.head_out[row][self.layout.logits_cols(j)].copy())

    def latent(self, row: int, j: int) -> np.ndarray:
        return self.head_out[row][self.layout.latent_cols(j)].copy()


def proposal_forward(
    params: nn.NetworkParams,
    layout: HeadLayout,
    inputs: np.ndarray,
    scale_floor: float,
    mode: str = nn.EVAL,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
    keep_trace: bool = False,
):
    """Run the proposal network on encoded (n, enc+d) inputs.

    Returns (ProposalOutput, trace); outputs exist for all d dimensions in one
    pass, consumers slice the unobserved ones.
    """
    out, trace = nn.forward(
        params, inputs, mode=mode, dropout_rate=dropout_rate, rng=rng, keep_trace=keep_trace
    )
    out = np.atleast_2d(out)
    return ProposalOutput(head_out=out, layout=layout, scale_floor=scale_floor), trace


def gather_mixtures(
    head_out: np.ndarray,
    layout: HeadLayout,
    rows: np.ndarray,
    dims: np.ndarray,
    scale_floor: float,
):
    """Vectorized per-term mixture gather for continuous dims.

    Returns (MixtureParams with leading axis len(rows), raw_scales) where
    raw_scales are the pre-softplus head entries (needed for backprop).
    """
    cols_logits = np.stack([layout.logits_cols(j) for j in dims])
    cols_means = np.stack([layout.means_cols(j) for j in dims])
    cols_scales = np.stack([layout.scales_cols(j) for j in dims])
    r = rows[:, None]
    logits = head_out[r, cols_logits]
    means = head_out[r, cols_means]
    raw_scales = head_out[r, cols_scales]
    mix = MixtureParams(logits=logits, means=means, scales=floored_scales(raw_scales, scale_floor))
    return mix, raw_scales


def gather_latents(head_out: np.ndarray, layout: HeadLayout, rows: np.ndarray, dims: np.ndarray) -> np.ndarray:
    cols = np.stack([layout.latent_cols(j) for j in dims])
    return head_out[rows[:, None], cols]
