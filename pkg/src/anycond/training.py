"""Joint maximum-likelihood training of the proposal and energy networks.

Each step randomly partitions every batch instance into observed and
unobserved features and minimizes

    -(1/M) sum_terms [ log p_energy(x_j | x_o) + log q_proposal(x_j | x_o) ]
        + mse_coefficient * mean_terms (log p_energy - stopgrad(log q))^2

where M counts the unobserved terms in the batch. Gradient stopping follows
the estimator's definition: neither the proposal samples feeding the
normalizer estimate, nor their proposal densities, carry gradients; the
latent codes do (that is the weight sharing between the two networks). The
penalty term updates only the energy network.

During the warm-up phase only the proposal terms contribute and only the
proposal network is updated, so importance sampling starts from a sane
proposal. The learning rate anneals linearly to zero and the returned
checkpoint holds the weights with the best validation likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import logsumexp, softmax

from . import energy as energy_mod
from . import nn
from . import proposal as prop_mod
from .checkpoint import Checkpoint
from .errors import ConfigError, TrainingError
from .masking import MaskedInstance, sample_uniform_cardinality_masks
from .rngs import (
    STREAM_BATCH,
    STREAM_DROPOUT,
    STREAM_IMPORTANCE,
    STREAM_INIT_ENERGY,
    STREAM_INIT_PROPOSAL,
    STREAM_MASKS,
    STREAM_NOISE,
    STREAM_VALIDATION,
    substream,
)
from .schema import FeatureSchema, encode_values


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    warmup_steps: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    dropout: float = 0.0
    mse_coefficient: float = 0.0
    noise_scale: float = 0.001
    proposal_hidden_dim: int = 128
    proposal_blocks: int = 3
    latent_dim: int = 16
    energy_hidden_dim: int = 128
    energy_blocks: int = 3
    importance_samples: int = 20
    n_components: int = 10
    e_max: float = 30.0
    scale_floor: float = 0.001
    seed: int = 0
    validation_cadence: int = 500
    validation_instances: int = 2048

    def __post_init__(self):
        if self.steps < 0 or self.warmup_steps < 0:
            raise ConfigError("steps and warmup_steps must be non-negative")
        if self.steps > 0 and self.warmup_steps >= self.steps:
            raise ConfigError("warm-up steps must be smaller than training steps")
        for name in (
            "batch_size",
            "learning_rate",
            "proposal_hidden_dim",
            "proposal_blocks",
            "latent_dim",
            "energy_hidden_dim",
            "energy_blocks",
            "importance_samples",
            "n_components",
            "e_max",
            "scale_floor",
            "validation_cadence",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict, preset: str | None = None) -> "TrainConfig":
        base = dict(PRESETS[preset]) if preset else {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        base.update(d)
        return cls(**base)


# Published hyperparameter presets for the benchmark tabular datasets.
PRESETS: dict[str, dict] = {
    "power": dict(dropout=0.2, mse_coefficient=1.0, steps=1_600_000, warmup_steps=5000,
                  noise_scale=0.003, learning_rate=1e-4, batch_size=512,
                  proposal_hidden_dim=512, proposal_blocks=4, latent_dim=64),
    "gas": dict(dropout=0.0, mse_coefficient=0.0, steps=1_000_000, warmup_steps=5000,
                noise_scale=0.001, learning_rate=1e-3, batch_size=2048,
                proposal_hidden_dim=512, proposal_blocks=4, latent_dim=64),
    "hepmass": dict(dropout=0.2, mse_coefficient=0.0, steps=1_000_000, warmup_steps=5000,
                    noise_scale=0.001, learning_rate=5e-4, batch_size=2048,
                    proposal_hidden_dim=512, proposal_blocks=4, latent_dim=64),
    "miniboone": dict(dropout=0.5, mse_coefficient=0.0, steps=15_000, warmup_steps=100,
                      noise_scale=0.005, learning_rate=1e-3, batch_size=2048,
                      proposal_hidden_dim=512, proposal_blocks=4, latent_dim=64),
    "bsds": dict(dropout=0.2, mse_coefficient=0.0, steps=1_000_000, warmup_steps=5000,
                 noise_scale=0.001, learning_rate=1e-3, batch_size=2048,
                 proposal_hidden_dim=1024, proposal_blocks=4, latent_dim=64),
    "adult": dict(dropout=0.5, mse_coefficient=1.0, steps=40_000, warmup_steps=2500,
                  noise_scale=0.005, learning_rate=5e-4, batch_size=1024,
                  proposal_hidden_dim=512, proposal_blocks=4, latent_dim=64),
}


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear anneal: lr0 * (1 - step/steps)."""
    if not 0 <= step <= config.steps:
        raise ConfigError("step outside [0, steps]")
    return config.learning_rate * (1.0 - step / config.steps) if config.steps else config.learning_rate


@dataclass
class TrainState:
    proposal_params: nn.NetworkParams
    proposal_adam: nn.AdamState
    energy_params: nn.NetworkParams
    energy_adam: nn.AdamState
    layout: prop_mod.HeadLayout
    schema: FeatureSchema
    step: int = 0
    best_val_ll: float = -math.inf
    best_proposal: nn.NetworkParams | None = None
    best_energy: nn.NetworkParams | None = None
    val_history: list = field(default_factory=list)
    consecutive_bad: int = 0


@dataclass(frozen=True)
class StepMetrics:
    step: int
    loss: float
    proposal_ll: float
    energy_ll: float
    penalty: float
    lr: float
    n_terms: int


def init_state(schema: FeatureSchema, config: TrainConfig) -> TrainState:
    prop_params, layout = prop_mod.build_proposal_network(
        schema,
        hidden_dim=config.proposal_hidden_dim,
        n_blocks=config.proposal_blocks,
        n_components=config.n_components,
        latent_dim=config.latent_dim,
        rng=substream(config.seed, STREAM_INIT_PROPOSAL),
    )
    energy_params = nn.build_residual_mlp(
        input_dim=energy_mod.energy_input_dim(schema, config.latent_dim),
        hidden_dim=config.energy_hidden_dim,
        n_blocks=config.energy_blocks,
        output_dim=1,
        rng=substream(config.seed, STREAM_INIT_ENERGY),
    )
    return TrainState(
        proposal_params=prop_params,
        proposal_adam=nn.AdamState.for_params(prop_params),
        energy_params=energy_params,
        energy_adam=nn.AdamState.for_params(energy_params),
        layout=layout,
        schema=schema,
    )


# ---------------------------------------------------------------------------
# loss core


@dataclass
class SampleRecord:
    """Randomness of one step's importance sampling, for common-random-number
    replays: component indices and standard normals, plus the realized values
    and their proposal densities at the parameters that produced them."""

    comp: np.ndarray  # (M, S)
    eps: np.ndarray  # (M, S)
    x: np.ndarray  # (M, S)
    log_q: np.ndarray  # (M, S)




def batch_loss_and_grads(
    prop_params: nn.NetworkParams,
    energy_params: nn.NetworkParams,
    layout: prop_mod.HeadLayout,
    values: np.ndarray,
    b: np.ndarray,
    unobserved: np.ndarray,
    config: TrainConfig,
    *,
    warmup: bool,
    rng_importance: np.random.Generator | None = None,
    rng_dropout: np.random.Generator | None = None,
    train_mode: bool = True,
    need_grads: bool = True,
    sample_record: SampleRecord | None = None,
    sample_coupling: str = "fresh",  # "fresh" | "frozen" | "crn"
):
    """Loss, metrics, gradients, and the sampling record for one batch.

    ``values`` (n, d) are (noised) standardized values, ``b`` the observation
    masks, ``unobserved`` a boolean (n, d) matrix marking loss terms.
    ``sample_coupling`` controls how importance samples relate to a provided
    record: "frozen" treats the recorded values and densities as constants
    (this is the quantity whose finite differences match the implemented
    gradient), while "crn" regenerates values from the recorded component
    choices and normals under the current parameters (fully differentiated
    coupling, which the implemented gradient intentionally does not follow).
    """
    schema = layout.schema
    n, d = values.shape
    mode = nn.TRAIN if train_mode else nn.EVAL
    x_prop = np.concatenate([encode_values(schema, values, b), b.astype(np.float64)], axis=1)
    prop_out, trace_p = prop_mod.proposal_forward(
        prop_params, layout, x_prop, config.scale_floor,
        mode=mode, dropout_rate=config.dropout, rng=rng_dropout, keep_trace=True,
    )
    head = prop_out.head_out

    cont_rows, cont_dims = np.nonzero(unobserved & np.array([schema.is_continuous(j) for j in range(d)]))
    cat_rows, cat_dims = np.nonzero(unobserved & ~np.array([schema.is_continuous(j) for j in range(d)]))
    m_total = cont_rows.size + cat_rows.size
    if m_total == 0:
        zero = StepMetrics(step=-1, loss=0.0, proposal_ll=float("nan"), energy_ll=float("nan"),
                           penalty=0.0, lr=float("nan"), n_terms=0)
        return zero, None, None, None

    head_grads = np.zeros_like(head) if need_grads else None
    S = config.importance_samples
    sum_logq = 0.0
    sum_logp = 0.0
    sum_sq_gap = 0.0
    record = None

    # --- categorical terms: logits are the energies, likelihood is exact
    if cat_rows.size:
        cat_logq = np.empty(cat_rows.size)
        for j in np.unique(cat_dims):
            sel = cat_dims == j
            rows_j = cat_rows[sel]
            cols = layout.logits_cols(j)
            logits = head[rows_j[:, None], cols]
            logprobs = logits - logsumexp(logits, axis=1, keepdims=True)
            codes = values[rows_j, j].astype(np.int64)
            lq = logprobs[np.arange(rows_j.size), codes]
            cat_logq[sel] = lq
            if need_grads:
                # both objective terms reduce to the categorical likelihood
                coef = (-1.0 if warmup else -2.0) / m_total
                g = -softmax(logits, axis=1)
                g[np.arange(rows_j.size), codes] += 1.0
                np.add.at(head_grads, (rows_j[:, None], cols[None, :]), coef * g)
        sum_logq += float(cat_logq.sum())
        if not warmup:
            sum_logp += float(cat_logq.sum())

    # --- continuous terms
    penalty_value = 0.0
    grads_e = None
    if cont_rows.size:
        mc = cont_rows.size
        mix, raw_scales = prop_mod.gather_mixtures(head, layout, cont_rows, cont_dims, config.scale_floor)
        xval = values[cont_rows, cont_dims]
        logq, dlogits, dmeans, dscales = prop_mod.mog_log_pdf_grads(mix, xval)
        sum_logq += float(logq.sum())
        if need_grads:
            coef_q = -1.0 / m_total
            cols_logits = np.stack([layout.logits_cols(j) for j in cont_dims])
            cols_means = np.stack([layout.means_cols(j) for j in cont_dims])
            cols_scales = np.stack([layout.scales_cols(j) for j in cont_dims])
            np.add.at(head_grads, (cont_rows[:, None], cols_logits), coef_q * dlogits)
            np.add.at(head_grads, (cont_rows[:, None], cols_means), coef_q * dmeans)
            np.add.at(head_grads, (cont_rows[:, None], cols_scales),
                      coef_q * dscales * nn.softplus_grad(raw_scales))

        if not warmup:
            gamma = prop_mod.gather_latents(head, layout, cont_rows, cont_dims)
            # importance samples (stop-gradient except under "crn" coupling)
            if sample_record is None:
                comp, eps = prop_mod.draw_mog_noise(mix, rng_importance, S)
            else:
                comp, eps = sample_record.comp, sample_record.eps
            if sample_record is not None and sample_coupling == "frozen":
                xs, logq_s = sample_record.x, sample_record.log_q
            else:
                xs = prop_mod.mog_from_noise(mix, comp, eps)
                logq_s = prop_mod.mog_log_pdf(prop_mod.expand_for_samples(mix), xs)
            record = SampleRecord(comp=comp, eps=eps, x=xs, log_q=logq_s)

            # one batched energy pass over the data value and all samples
            values_all = np.concatenate([xval[:, None], xs], axis=1)  # (mc, S+1)
            x_e = energy_mod.assemble_energy_batch(
                schema, values, b, cont_rows, cont_dims, gamma, values_all
            )
            raw_e, trace_e = nn.forward(
                energy_params, x_e.reshape(mc * (S + 1), -1),
                mode=mode, dropout_rate=config.dropout, rng=rng_dropout, keep_trace=need_grads,
            )
            raw_e = raw_e.reshape(mc, S + 1)
            e_all = energy_mod.clipped_energy(raw_e, config.e_max)
            log_w = -e_all[:, 1:] - logq_s  # (mc, S)
            log_zhat = logsumexp(log_w, axis=1) - np.log(S)
            logp = -e_all[:, 0] - log_zhat
            sum_logp += float(logp.sum())
            gap = logp - logq  # log q entering the penalty is a constant
            penalty_value = config.mse_coefficient * float(np.mean(gap * gap)) if config.mse_coefficient else 0.0

            if need_grads:
                wbar = softmax(log_w, axis=1)  # d log_zhat / d(-E_s)
                g_logp_main = -1.0 / m_total
                de_main = np.empty_like(e_all)
                de_main[:, 0] = -g_logp_main
                de_main[:, 1:] = g_logp_main * wbar
                de_raw = energy_mod.clipped_energy_grad(raw_e, config.e_max)
                grads_e, dx_e = nn.backward(
                    energy_params, trace_e, (de_main * de_raw).reshape(mc * (S + 1), 1)
                )
                latent_dim = layout.latent_dim
                dgamma = dx_e[:, -latent_dim:].reshape(mc, S + 1, latent_dim).sum(axis=1)
                cols_lat = np.stack([layout.latent_cols(j) for j in cont_dims])
                np.add.at(head_grads, (cont_rows[:, None], cols_lat), dgamma)

                if config.mse_coefficient:
                    # penalty updates the energy network only: latent-code
                    # input gradients are dropped on this pass
                    g_logp_pen = config.mse_coefficient * 2.0 / mc * gap
                    de_pen = np.empty_like(e_all)
                    de_pen[:, 0] = -g_logp_pen
                    de_pen[:, 1:] = g_logp_pen[:, None] * wbar
                    grads_pen, _ = nn.backward(
                        energy_params, trace_e, (de_pen * de_raw).reshape(mc * (S + 1), 1)
                    )
                    grads_e = nn.zip_dense(grads_e, grads_pen, np.add)

    loss = -(sum_logp + sum_logq) / m_total if not warmup else -sum_logq / m_total
    loss += penalty_value
    metrics = StepMetrics(
        step=-1,
        loss=float(loss),
        proposal_ll=float(sum_logq / m_total),
        energy_ll=float(sum_logp / m_total) if not warmup else float("nan"),
        penalty=float(penalty_value),
        lr=float("nan"),
        n_terms=int(m_total),
    )
    grads_p = nn.backward(prop_params, trace_p, head_grads)[0] if need_grads else None
    return metrics, grads_p, grads_e, record


# ---------------------------------------------------------------------------
# step and loop


def _instances_to_arrays(batch: list[MaskedInstance]):
    values = np.stack([inst.values for inst in batch])
    b = np.stack([inst.mask.b for inst in batch])
    missing = np.stack(
        [inst.mask.missing if inst.mask.missing is not None else np.zeros(inst.mask.d, dtype=np.int8)
         for inst in batch]
    )
    return values, b, missing


def training_step(state: TrainState, batch: list[MaskedInstance], config: TrainConfig):
    """One optimization step on pre-masked instances; returns (state, metrics)."""
    values, b, missing = _instances_to_arrays(batch)
    return _training_step_arrays(state, values, b, missing, config)


def _training_step_arrays(state: TrainState, values, b, missing, config: TrainConfig):
    step = state.step
    warmup = step < config.warmup_steps
    unobserved = (b == 0) & (missing == 0)
    lr = lr_at(step, config)

    noise_rng = substream(config.seed, STREAM_NOISE, step)
    cont = state.schema.continuous_indices
    if cont and config.noise_scale > 0:
        noised = values.copy()
        noised[:, cont] += config.noise_scale * noise_rng.standard_normal((values.shape[0], len(cont)))
    else:
        noised = values

    metrics, grads_p, grads_e, _ = batch_loss_and_grads(
        state.proposal_params, state.energy_params, state.layout,
        noised, b, unobserved, config,
        warmup=warmup,
        rng_importance=substream(config.seed, STREAM_IMPORTANCE, step),
        rng_dropout=substream(config.seed, STREAM_DROPOUT, step),
    )
    metrics = replace(metrics, step=step, lr=lr)
    if metrics.n_terms == 0:
        state.step += 1
        return state, replace(metrics, loss=0.0)

    if not math.isfinite(metrics.loss):
        state.consecutive_bad += 1
        if state.consecutive_bad >= 2:
            raise TrainingError(
                f"non-finite loss at steps {step - 1} and {step}: {metrics}"
            )
        state.step += 1
        return state, metrics
    state.consecutive_bad = 0

    state.proposal_params, state.proposal_adam = nn.adam_step(
        state.proposal_params, state.proposal_adam, grads_p, lr
    )
    if not warmup and grads_e is not None:
        state.energy_params, state.energy_adam = nn.adam_step(
            state.energy_params, state.energy_adam, grads_e, lr
        )
    state.step += 1
    return state, metrics


def validation_ll(state: TrainState, values: np.ndarray, masks: np.ndarray, config: TrainConfig) -> float:
    """Mean per-term energy log-likelihood on fixed validation masks, eval mode."""
    unobserved = masks == 0
    metrics, _, _, _ = batch_loss_and_grads(
        state.proposal_params, state.energy_params, state.layout,
        values, masks, unobserved, config,
        warmup=False,
        rng_importance=substream(config.seed, STREAM_VALIDATION, 1),
        train_mode=False,
        need_grads=False,
    )
    return metrics.energy_ll if metrics.n_terms else 0.0


def train(dataset, config: TrainConfig, callbacks=None) -> Checkpoint:
    """Full training loop over a Dataset; returns the best-validation checkpoint.

    ``callbacks``, when given, is a list of callables invoked as
    ``cb(state, metrics)`` after every step (the CLI uses this for logging).
    """
    schema = dataset.schema
    state = init_state(schema, config)
    state.best_proposal = state.proposal_params.copy()
    state.best_energy = state.energy_params.copy()

    train_values = dataset.split_values("train")
    train_missing = dataset.split_missing("train")
    n_train, d = train_values.shape

    val_values = dataset.split_values("val")
    if val_values.shape[0] > config.validation_instances:
        val_values = val_values[: config.validation_instances]
    val_rng = substream(config.seed, STREAM_VALIDATION, 0)
    val_masks = (val_rng.random(val_values.shape) < 0.5).astype(np.int8)
    # a fully observed validation row contributes nothing; that is fine

    for step in range(config.steps):
        batch_rng = substream(config.seed, STREAM_BATCH, step)
        idx = batch_rng.integers(0, n_train, size=min(config.batch_size, n_train))
        values = train_values[idx]
        missing = train_missing[idx]
        mask_rng = substream(config.seed, STREAM_MASKS, step)
        b = sample_uniform_cardinality_masks(d, values.shape[0], mask_rng)
        b = np.where(missing == 1, np.int8(0), b)

        state, metrics = _training_step_arrays(state, values, b, missing, config)

        is_last = step == config.steps - 1
        if (step + 1) % config.validation_cadence == 0 or is_last:
            vll = validation_ll(state, val_values, val_masks, config)
            state.val_history.append((state.step, vll))
            if vll > state.best_val_ll:
                state.best_val_ll = vll
                state.best_proposal = state.proposal_params.copy()
                state.best_energy = state.energy_params.copy()
        if callbacks:
            for cb in callbacks:
                cb(state, metrics)

    return Checkpoint(
        schema=schema,
        standardization=dataset.standardization,
        config=config.to_dict(),
        proposal_params=state.best_proposal,
        energy_params=state.best_energy,
        layout_descriptor=energy_mod.energy_input_layout(schema, config.latent_dim),
        best_val_ll=state.best_val_ll,
        seed_lineage={"seed": config.seed, "init_proposal": STREAM_INIT_PROPOSAL,
                      "init_energy": STREAM_INIT_ENERGY},
    )
