"""Energy network plus importance-sampled normalizer estimation.

The energy network scores a candidate value for one unobserved dimension
given the observed context. Raw network outputs go through softplus and a
hard clip at ``e_max``, so energies live in [0, e_max] and unnormalized
likelihoods exp(-E) in [exp(-e_max), 1]. Normalizing constants are estimated
by importance sampling against the proposal distribution, with all weight
arithmetic in log space.

Categorical dimensions never reach the energy network: their proposal logits
already act as energies and normalize in closed form.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import nn
from .errors import ConfigError, UsageError
from .proposal import CategoricalParams
from .schema import FeatureSchema


# ---------------------------------------------------------------------------
# input assembly

# Input field order (fixed; recorded in checkpoints as the layout descriptor):
#   candidate(1) | encoded values with candidate inserted(enc) | bitmask(d)
#   | dimension one-hot(d) | latent(L)


def energy_input_dim(schema: FeatureSchema, latent_dim: int) -> int:
    return 1 + schema.encoded_width + 2 * schema.n_features + latent_dim


def energy_input_layout(schema: FeatureSchema, latent_dim: int) -> list[tuple[str, int]]:
    return [
        ("candidate", 1),
        ("encoded_values", schema.encoded_width),
        ("bitmask", schema.n_features),
        ("dimension_onehot", schema.n_features),
        ("latent", latent_dim),
    ]


def assemble_energy_inputs(
    schema: FeatureSchema,
    phi_enc: np.ndarray,
    b: np.ndarray,
    dim_index: int,
    gamma: np.ndarray,
    values: np.ndarray,
) -> np.ndarray:
    """(n, D) energy-network inputs for n candidate values of one conditional.

    The candidate appears twice: as a standalone first column and written into
    its own slot of the encoded-value copy, which gives the network a direct
    path from the candidate to the output.
    """
    if not schema.is_continuous(dim_index):
        raise UsageError("energy network inputs are only defined for continuous dimensions")
    values = np.atleast_1d(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    d = schema.n_features
    out = np.empty((n, energy_input_dim(schema, gamma.shape[-1])), dtype=np.float64)
    out[:, 0] = values
    enc = np.broadcast_to(phi_enc, (n, schema.encoded_width)).copy()
    enc[:, schema.encoded_offset(dim_index)] = values
    pos = 1
    out[:, pos : pos + schema.encoded_width] = enc
    pos += schema.encoded_width
    out[:, pos : pos + d] = b
    pos += d
    onehot = np.zeros(d)
    onehot[dim_index] = 1.0
    out[:, pos : pos + d] = onehot
    pos += d
    out[:, pos:] = gamma
    return out


def assemble_energy_batch(
    schema: FeatureSchema,
    ctx_values: np.ndarray,
    ctx_b: np.ndarray,
    rows: np.ndarray,
    dims: np.ndarray,
    gamma: np.ndarray,
    values_all: np.ndarray,
) -> np.ndarray:
    """(M, n_candidates, D) energy inputs for a table of continuous terms.

    ``rows``/``dims`` pick the context row and target dimension of each term;
    ``values_all`` holds that term's candidate values. Context matrices are in
    standardized units with hidden slots still holding their true values; the
    encoding zeroes them.
    """
    from .schema import encode_values

    m, s1 = values_all.shape
    d = schema.n_features
    enc = schema.encoded_width
    latent_dim = gamma.shape[1]
    phi_enc = encode_values(schema, ctx_values, ctx_b)
    out = np.zeros((m, s1, 1 + enc + 2 * d + latent_dim))
    out[:, :, 0] = values_all
    out[:, :, 1 : 1 + enc] = phi_enc[rows][:, None, :]
    enc_off = np.array([schema.encoded_offset(j) for j in dims])
    out[np.arange(m), :, 1 + enc_off] = values_all
    out[:, :, 1 + enc : 1 + enc + d] = ctx_b[rows][:, None, :].astype(np.float64)
    out[np.arange(m), :, 1 + enc + d + dims] = 1.0
    out[:, :, 1 + enc + 2 * d :] = gamma[:, None, :]
    return out


# ---------------------------------------------------------------------------
# energy evaluation

DEFAULT_E_MAX = 30.0


def clipped_energy(raw: np.ndarray, e_max: float = DEFAULT_E_MAX) -> np.ndarray:
    return np.minimum(nn.softplus(raw), e_max)


def clipped_energy_grad(raw: np.ndarray, e_max: float = DEFAULT_E_MAX) -> np.ndarray:
    """d energy / d raw; zero where the clip is active."""
    return np.where(nn.softplus(raw) < e_max, nn.softplus_grad(raw), 0.0)


@dataclass(frozen=True)
class EnergyQuery:
    value: float
    dim_index: int
    phi_enc: np.ndarray  # encoded observed values, zero-imputed
    b: np.ndarray  # bitmask, length d
    gamma: np.ndarray  # latent code for dim_index


def energy_forward(
    params: nn.NetworkParams,
    schema: FeatureSchema,
    query: EnergyQuery,
    e_max: float = DEFAULT_E_MAX,
) -> float:
    """Clipped non-negative energy of one candidate value."""
    if query.b[query.dim_index] != 0:
        raise UsageError(f"dimension {query.dim_index} is observed; energy query invalid")
    x = assemble_energy_inputs(
        schema, query.phi_enc, query.b, query.dim_index, query.gamma, np.array([query.value])
    )
    raw, _ = nn.forward(params, x, keep_trace=False)
    return float(clipped_energy(raw[:, 0], e_max)[0])


def make_energy_fn(
    params: nn.NetworkParams,
    schema: FeatureSchema,
    phi_enc: np.ndarray,
    b: np.ndarray,
    dim_index: int,
    gamma: np.ndarray,
    e_max: float = DEFAULT_E_MAX,
    chunk: int = 262144,
):
    """Vectorized values -> energies closure for one conditional."""
    if b[dim_index] != 0:
        raise UsageError(f"dimension {dim_index} is observed; energy query invalid")

    def fn(values: np.ndarray) -> np.ndarray:
        values = np.atleast_1d(np.asarray(values, dtype=np.float64))
        outs = []
        for lo in range(0, values.shape[0], chunk):
            x = assemble_energy_inputs(schema, phi_enc, b, dim_index, gamma, values[lo : lo + chunk])
            raw, _ = nn.forward(params, x, keep_trace=False)
            outs.append(clipped_energy(raw[:, 0], e_max))
        return np.concatenate(outs)

    return fn


# ---------------------------------------------------------------------------
# normalizer estimation


@dataclass(frozen=True)
class NormalizerEstimate:
    log_z: float
    n_samples: int
    log_weights: np.ndarray  # per-sample log importance weights, diagnostics
    n_excluded: int = 0  # samples dropped for q-density underflow

    @property
    def z(self) -> float:
        return float(np.exp(self.log_z))


def estimate_normalizer(energy_fn, proposal, S: int, rng: np.random.Generator) -> NormalizerEstimate:
    """Z_hat = mean_s exp(-E(x_s)) / q(x_s), x_s ~ q, in log space.

    ``proposal`` needs ``sample(rng, size)`` and ``log_pdf(values)``; the
    mixture-of-Gaussians family satisfies this.
    """
    if S < 1:
        raise ConfigError("S must be >= 1")
    xs = np.asarray(proposal.sample(rng, S), dtype=np.float64).reshape(-1)
    log_q = np.asarray(proposal.log_pdf(xs), dtype=np.float64).reshape(-1)
    keep = np.isfinite(log_q)
    n_excluded = int(S - keep.sum())
    if n_excluded:
        warnings.warn(f"estimate_normalizer: {n_excluded} proposal samples with underflowed density excluded")
        if not keep.any():
            raise UsageError("all proposal samples had zero density; proposal is degenerate")
        xs, log_q = xs[keep], log_q[keep]
    log_w = -np.asarray(energy_fn(xs), dtype=np.float64) - log_q
    log_z = float(logsumexp(log_w) - np.log(log_w.shape[0]))
    return NormalizerEstimate(log_z=log_z, n_samples=S, log_weights=log_w, n_excluded=n_excluded)


def conditional_log_likelihood(energy_fn, proposal, x_value: float, S: int, rng: np.random.Generator) -> float:
    """Importance-sampled log p(x_value | context) = -E(x_value) - log Z_hat."""
    est = estimate_normalizer(energy_fn, proposal, S, rng)
    e = float(np.asarray(energy_fn(np.array([x_value])))[0])
    return -e - est.log_z


def categorical_log_likelihood(params: CategoricalParams, category: int) -> float:
    """Exact log p(category | context); logits act as energies, no sampling."""
    return float(params.log_probs()[..., category])


def snis_mean(energy_fn, proposal, S: int, rng: np.random.Generator) -> float:
    """Self-normalized importance-sampling estimate of the energy-distribution mean.

    Weights are exp(-E)/q ratios; the unknown normalizer cancels.
    """
    if S < 1:
        raise ConfigError("S must be >= 1")
    xs = np.asarray(proposal.sample(rng, S), dtype=np.float64).reshape(-1)
    log_q = np.asarray(proposal.log_pdf(xs), dtype=np.float64).reshape(-1)
    log_w = -np.asarray(energy_fn(xs), dtype=np.float64) - log_q
    w = np.exp(log_w - logsumexp(log_w))
    return float(np.sum(w * xs))


# ---------------------------------------------------------------------------
# trapezoid oracle machinery (shared with the audit)


def trapezoid_normalizer(energy_fn, grid: np.ndarray) -> float:
    """Trapezoidal integral of exp(-E) over an explicit grid."""
    return float(np.trapezoid(np.exp(-np.asarray(energy_fn(grid))), grid))


def proposal_span_grid(mix, n_points: int = 4096, half_width_sigmas: float = 12.0) -> np.ndarray:
    """Integration grid spanning the proposal's extreme components."""
    lo = float(np.min(mix.means) - half_width_sigmas * np.max(mix.scales))
    hi = float(np.max(mix.means) + half_width_sigmas * np.max(mix.scales))
    return np.linspace(lo, hi, n_points)
