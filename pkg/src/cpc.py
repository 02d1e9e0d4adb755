"""
Contrastive predictive coding: strided conv encoder, GRU context network,
per-offset bilinear prediction heads and the InfoNCE objective.

Parameter names:
    encoder.conv.{i}.weight / .bias      conv layer i, (C_out, C_in, K)
    encoder.conv.{i}.norm_scale / ...    only with channel_norm enabled
    encoder.gru.{w_ih,w_hh,b_ih,b_hh}    context network
    heads.{k}.weight                     W_k for offset k = 1..K, (C_enc, C_ctx)
"""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dsp_features import Waveform
from .error_handler import (
    ArtifactIOError,
    ConfigError,
    InsufficientAudioError,
    InvalidShapeError,
)
from .logging_config import get_logger
from .nn_ops import channel_norm, conv1d, conv1d_output_length, logsumexp
from .optim import OptimizerState, optimizer_step
from .params import ParameterSet, kaiming_uniform, ones_param, uniform, zeros_param
from .recurrent import gru_forward, init_gru
from .tensor import DType, Tape, Tensor, backward, concat, no_grad, relu

logger = get_logger(__name__)

DOWNSAMPLING = 160


class CpcConfig(BaseModel):
    """Encoder geometry, context size and pre-training hyper-parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    conv_channels: int = Field(default=512, ge=1)
    kernel_sizes: list[int] = Field(default_factory=lambda: [10, 8, 4, 4, 4])
    strides: list[int] = Field(default_factory=lambda: [5, 4, 2, 2, 2])
    paddings: list[int] = Field(default_factory=lambda: [3, 2, 1, 1, 1])
    context_dim: int = Field(default=256, ge=1)
    prediction_steps: int = Field(default=12, ge=1)
    crop_length: int = Field(default=20480, ge=DOWNSAMPLING)
    n_negatives: int = Field(default=15, ge=0)
    lr: float = Field(default=2e-4, ge=0)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=100, ge=0)
    channel_norm: bool = False
    dtype: DType = DType.F32

    @model_validator(mode="after")
    def _check_geometry(self) -> Self:
        if not len(self.kernel_sizes) == len(self.strides) == len(self.paddings):
            raise ValueError("kernel_sizes, strides and paddings must have equal length")
        if math.prod(self.strides) != DOWNSAMPLING:
            raise ValueError(
                f"product of strides must be {DOWNSAMPLING}, got {math.prod(self.strides)}"
            )
        if self.crop_length // DOWNSAMPLING <= self.prediction_steps:
            raise ValueError(
                f"crop_length/{DOWNSAMPLING} must exceed prediction_steps "
                f"({self.crop_length // DOWNSAMPLING} <= {self.prediction_steps})"
            )
        return self

    @property
    def n_candidates(self) -> int:
        """N: the positive plus its negatives."""
        return self.n_negatives + 1


def encoded_length(config: CpcConfig, n_samples: int) -> int:
    """Length after the conv chain, or 0 when some layer has no valid output."""
    length = n_samples
    for k, s, p in zip(config.kernel_sizes, config.strides, config.paddings, strict=True):
        if length + 2 * p < k:
            return 0
        length = conv1d_output_length(length, k, s, p)
    return max(length, 0)


class CpcModel:
    """Named parameters plus the forward passes that read them."""

    def __init__(self, config: CpcConfig, params: ParameterSet) -> None:
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: CpcConfig, rng: np.random.Generator) -> CpcModel:
        dtype = config.dtype
        params = ParameterSet()
        c_in = 1
        for i, kernel in enumerate(config.kernel_sizes):
            c_out = config.conv_channels
            params.add(
                f"encoder.conv.{i}.weight",
                kaiming_uniform((c_out, c_in, kernel), c_in * kernel, rng, dtype),
            )
            params.add(f"encoder.conv.{i}.bias", zeros_param((c_out,), dtype))
            if config.channel_norm:
                params.add(f"encoder.conv.{i}.norm_scale", ones_param((c_out,), dtype))
                params.add(f"encoder.conv.{i}.norm_shift", zeros_param((c_out,), dtype))
            c_in = c_out
        for name, tensor in init_gru(config.conv_channels, config.context_dim, rng, dtype).items():
            params.add(f"encoder.gru.{name}", tensor)
        bound = 1.0 / math.sqrt(config.context_dim)
        for k in range(1, config.prediction_steps + 1):
            params.add(
                f"heads.{k}.weight",
                uniform((config.conv_channels, config.context_dim), bound, rng, dtype),
            )
        return cls(config, params)

    def encoder_params(self) -> ParameterSet:
        return self.params.select(["encoder."])

    def head(self, k: int) -> Tensor:
        return self.params[f"heads.{k}.weight"]


# -- forward passes ----------------------------------------------------


def _as_wave_tensor(wave: Tensor | Waveform | np.ndarray, dtype: DType) -> Tensor:
    if isinstance(wave, Waveform):
        wave = wave.samples
    if isinstance(wave, np.ndarray):
        wave = Tensor(wave, dtype)
    if wave.ndim == 1:
        wave = wave.reshape(1, -1)
    if wave.ndim != 2 or wave.shape[0] != 1:
        raise InvalidShapeError("encode expects a (1, L) waveform", wave.shape)
    return wave


def encode(wave: Tensor | Waveform | np.ndarray, model: CpcModel) -> Tensor:
    """Latent sequence Z, shape (T_z, conv_channels)."""
    config = model.config
    x = _as_wave_tensor(wave, config.dtype)
    n_samples = x.shape[1]
    if n_samples < DOWNSAMPLING or encoded_length(config, n_samples) < 1:
        raise InsufficientAudioError(
            f"encoder needs at least {DOWNSAMPLING} samples, got {n_samples}",
            n_samples,
            DOWNSAMPLING,
        )
    for i, (s, p) in enumerate(zip(config.strides, config.paddings, strict=True)):
        x = conv1d(
            x,
            model.params[f"encoder.conv.{i}.weight"],
            model.params[f"encoder.conv.{i}.bias"],
            stride=s,
            padding=p,
        )
        if config.channel_norm:
            x = channel_norm(
                x,
                model.params[f"encoder.conv.{i}.norm_scale"],
                model.params[f"encoder.conv.{i}.norm_shift"],
            )
        x = relu(x)
    return x.T


def contextualize(z: Tensor, model: CpcModel) -> Tensor:
    """Causal summaries C, shape (T_z, context_dim); c_t reads only z_1..z_t."""
    if z.ndim != 2 or z.shape[1] != model.config.conv_channels:
        raise InvalidShapeError(
            f"contextualize expects (T_z, {model.config.conv_channels})", z.shape
        )
    h0 = Tensor(np.zeros(model.config.context_dim), z.dtype)
    return gru_forward(z, h0, model.params.scoped("encoder.gru"))


# -- InfoNCE -----------------------------------------------------------

NegativeSampler = Callable[[np.random.Generator, int, np.ndarray, int], np.ndarray]


def uniform_negatives(
    rng: np.random.Generator, length: int, positives: np.ndarray, count: int
) -> np.ndarray:
    """
    ``count`` indices per positive, uniform over the other ``length - 1`` steps.

    Returns shape (len(positives), count).
    """
    if count == 0:
        return np.zeros((positives.size, 0), dtype=np.intp)
    if length < 2:
        raise InvalidShapeError(f"need at least 2 time steps to draw negatives, got {length}")
    draws = rng.integers(0, length - 1, size=(positives.size, count))
    return draws + (draws >= positives[:, None])


@dataclass
class InfoNceDiagnostics:
    """Per-offset ranking accuracy plus the candidate indices that were scored."""

    ranking_accuracy: dict[int, float]
    n_terms: int
    candidates: dict[int, np.ndarray] = field(default_factory=dict)


def ranking_credit(scores: np.ndarray) -> np.ndarray:
    """
    Per row, 1/(number of maxima) if column 0 attains the maximum, else 0.

    This is the expected accuracy under uniform random tie-breaking.
    """
    top = scores.max(axis=1, keepdims=True)
    at_top = scores == top
    return np.where(at_top[:, 0], 1.0 / at_top.sum(axis=1), 0.0)


def infonce_loss(
    c: Tensor,
    z: Tensor,
    model: CpcModel,
    negative_sampler: NegativeSampler,
    rng: np.random.Generator,
    n_candidates: int | None = None,
) -> tuple[Tensor, InfoNceDiagnostics]:
    """
    Mean over all valid (t, k) of logsumexp(s) - ln N - s_pos.

    Scores are s = (W_k c_t) . z for the positive z_{t+k} (column 0) and N-1
    sampled negatives. The sampler is called once per offset, k = 1..K.
    """
    big_k = model.config.prediction_steps
    n = model.config.n_candidates if n_candidates is None else n_candidates
    t_z = z.shape[0]
    if c.shape[0] != t_z:
        raise InvalidShapeError("C and Z must have equal length", c.shape, z.shape)
    if t_z <= big_k:
        raise InsufficientAudioError(
            f"need more than {big_k} latent frames, got {t_z}", t_z, big_k + 1
        )
    if n < 1:
        raise ConfigError("InfoNCE needs at least the positive candidate", n_candidates=n)
    if n < 2:
        logger.warning("degenerate_contrast", n_candidates=n)

    log_n = math.log(n)
    terms: list[Tensor] = []
    accuracy: dict[int, float] = {}
    candidates: dict[int, np.ndarray] = {}
    for k in range(1, big_k + 1):
        n_terms = t_z - k
        positives = np.arange(k, t_z)
        negatives = negative_sampler(rng, t_z, positives, n - 1)
        idx = np.concatenate([positives[:, None], negatives], axis=1)
        candidates[k] = idx

        predictions = c[:n_terms] @ model.head(k).T
        scores = (predictions.reshape(n_terms, 1, -1) * z[idx]).sum(axis=-1)
        terms.append(logsumexp(scores, axis=1) - log_n - scores[:, 0])
        accuracy[k] = float(ranking_credit(scores.data).mean())

    all_terms = concat(terms, axis=0)
    return all_terms.mean(), InfoNceDiagnostics(accuracy, all_terms.shape[0], candidates)


# -- pre-training ------------------------------------------------------


@dataclass(frozen=True)
class PretrainSchedule:
    """Epoch count and the seed that fixes crops and batch order."""

    epochs: int
    batch_size: int = 8
    seed: int = 0
    epoch_offset: int = 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    ranking_accuracy: dict[int, float]


@dataclass
class PretrainResult:
    model: CpcModel
    curve: list[EpochStats]


def random_crop(samples: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random window of ``length``; shorter inputs are right-zero-padded."""
    if samples.shape[0] <= length:
        return np.pad(samples, (0, length - samples.shape[0]))
    start = int(rng.integers(0, samples.shape[0] - length + 1))
    return samples[start : start + length]


def batch_loss(
    batch: Sequence[np.ndarray],
    model: CpcModel,
    rng: np.random.Generator,
    negative_sampler: NegativeSampler = uniform_negatives,
) -> tuple[Tensor, dict[int, float]]:
    """Mean InfoNCE over the crops of one batch and the mean ranking accuracy per offset."""
    losses = []
    accuracy = {k: 0.0 for k in range(1, model.config.prediction_steps + 1)}
    for crop in batch:
        z = encode(crop, model)
        c = contextualize(z, model)
        loss, diag = infonce_loss(c, z, model, negative_sampler, rng)
        losses.append(loss)
        for k, value in diag.ranking_accuracy.items():
            accuracy[k] += value / len(batch)
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(batch)), accuracy


def pretrain(
    dataset: Sequence[Waveform | np.ndarray],
    model: CpcModel,
    optimizer: OptimizerState,
    schedule: PretrainSchedule,
    negative_sampler: NegativeSampler = uniform_negatives,
) -> PretrainResult:
    """
    Minimize InfoNCE over random crops with one optimizer step per batch.

    Epoch ``e`` (counted from ``schedule.epoch_offset``) draws its order,
    crops and negatives from ``default_rng([seed, e])`` only, so splitting
    the epochs across calls reproduces one long call exactly.
    """
    if not dataset:
        raise ConfigError("pre-training dataset is empty")
    waves = [w.samples if isinstance(w, Waveform) else np.asarray(w) for w in dataset]
    crop_length = model.config.crop_length
    curve: list[EpochStats] = []
    for local_epoch in range(schedule.epochs):
        epoch = schedule.epoch_offset + local_epoch
        rng = np.random.default_rng([schedule.seed, epoch])
        order = rng.permutation(len(waves))
        batch_losses: list[float] = []
        accuracy = {k: 0.0 for k in range(1, model.config.prediction_steps + 1)}
        n_batches = 0
        for start in range(0, len(order), schedule.batch_size):
            batch = [random_crop(waves[i], crop_length, rng) for i in order[start : start + schedule.batch_size]]
            model.params.zero_grad()
            with Tape() as tape:
                loss, batch_acc = batch_loss(batch, model, rng, negative_sampler)
            backward(loss, tape)
            optimizer_step(model.params, optimizer)
            batch_losses.append(loss.item())
            for k, value in batch_acc.items():
                accuracy[k] += value
            n_batches += 1
        model.params.zero_grad()
        stats = EpochStats(
            epoch=epoch,
            loss=float(np.mean(batch_losses)),
            ranking_accuracy={k: v / n_batches for k, v in accuracy.items()},
        )
        curve.append(stats)
        logger.info(
            "cpc_epoch_completed",
            epoch=epoch,
            loss=stats.loss,
            ranking_accuracy_k1=stats.ranking_accuracy[1],
        )
    return PretrainResult(model, curve)


def evaluate_contrastive(
    dataset: Sequence[Waveform | np.ndarray], model: CpcModel, seed: int = 0
) -> tuple[float, dict[int, float]]:
    """Mean InfoNCE and ranking accuracy per offset over one crop of every utterance, without training."""
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    rng = np.random.default_rng([seed, 0xE7A1])
    loss = 0.0
    accuracy = {k: 0.0 for k in range(1, model.config.prediction_steps + 1)}
    with no_grad():
        for wave in dataset:
            samples = wave.samples if isinstance(wave, Waveform) else np.asarray(wave)
            value, acc = batch_loss([random_crop(samples, model.config.crop_length, rng)], model, rng)
            loss += value.item() / len(dataset)
            for k, a in acc.items():
                accuracy[k] += a / len(dataset)
    return loss, accuracy


def evaluate_ranking(
    dataset: Sequence[Waveform | np.ndarray], model: CpcModel, seed: int = 0
) -> dict[int, float]:
    return evaluate_contrastive(dataset, model, seed)[1]


def extract_context_features(
    wave: Tensor | Waveform | np.ndarray, model: CpcModel, finetune: bool = False
) -> Tensor:
    """
    Context features C (T_z, context_dim) for downstream classifiers.

    With ``finetune`` the encoder ops are recorded on the active tape so
    downstream gradients reach ``encoder.*``; otherwise the result is detached.
    """
    if finetune:
        return contextualize(encode(wave, model), model)
    with no_grad():
        return contextualize(encode(wave, model), model).detach()


def write_curve_csv(path: Path, curve: Sequence[EpochStats], prediction_steps: int) -> None:
    """Append rows (epoch, loss, ranking_accuracy_k1..kK); header written for a new file."""
    header = ["epoch", "loss"] + [f"ranking_accuracy_k{k}" for k in range(1, prediction_steps + 1)]
    try:
        is_new = not path.exists()
        with path.open("a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if is_new:
                writer.writerow(header)
            for stats in curve:
                writer.writerow(
                    [stats.epoch, repr(stats.loss)]
                    + [repr(stats.ranking_accuracy[k]) for k in range(1, prediction_steps + 1)]
                )
    except OSError as e:
        raise ArtifactIOError(f"cannot write training curve {path}: {e}", str(path)) from e


class CpcTrainer:
    """A federated client's local pre-training state: model, data and Adam moments."""

    def __init__(
        self,
        model: CpcModel,
        dataset: Sequence[Waveform | np.ndarray],
        optimizer: OptimizerState | None = None,
        seed: int = 0,
    ) -> None:
        if not dataset:
            raise ConfigError("client pre-training dataset is empty")
        self.model = model
        self.dataset = list(dataset)
        self.optimizer = optimizer or OptimizerState.adam(model.config.lr)
        self.seed = seed

    @property
    def params(self) -> ParameterSet:
        return self.model.params

    @property
    def num_samples(self) -> int:
        return len(self.dataset)

    def train_epochs(self, epochs: int, epoch_offset: int) -> list[EpochStats]:
        schedule = PretrainSchedule(
            epochs=epochs,
            batch_size=self.model.config.batch_size,
            seed=self.seed,
            epoch_offset=epoch_offset,
        )
        return pretrain(self.dataset, self.model, self.optimizer, schedule).curve
