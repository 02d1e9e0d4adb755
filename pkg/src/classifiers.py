"""
Downstream three-class classifiers (HC / MCI / AD).

CNN: five blocks of 3x3 conv (padding 1) -> ReLU -> 2x2 max-pool (ceil),
then FC(256) -> FC(256) -> linear(3). CNN-LSTM: the same conv stack, the
pooled map read time-major as a (T', C*F') sequence through stacked LSTMs,
and the last hidden state fed to the same FC head.

Either model reads MFCC matrices or CPC context features. CPC-fed models
carry the pre-trained encoder; with fine-tuning its ``encoder.*`` tensors
join the trainable (and federated) parameter set.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .cpc import DOWNSAMPLING, CpcModel, extract_context_features
from .dsp_features import fit_time
from .error_handler import ConfigError, InvalidShapeError
from .logging_config import get_logger
from .nn_ops import conv2d, cross_entropy, linear, maxpool2d, pooled_extent
from .optim import OptimizerState, optimizer_step
from .params import ParameterSet, kaiming_uniform, uniform, zeros_param
from .recurrent import init_lstm, lstm_stack
from .tensor import DType, Tape, Tensor, backward, no_grad, relu

logger = get_logger(__name__)


class Label(IntEnum):
    HC = 0
    MCI = 1
    AD = 2


class HeadKind(str, Enum):
    CNN = "cnn"
    CNN_LSTM = "cnn-lstm"


class FeatureKind(str, Enum):
    MFCC = "mfcc"
    CPC = "cpc"


class ClassifierConfig(BaseModel):
    """Classifier geometry and local-training hyper-parameters."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    input_time: int = Field(default=259, ge=1)
    input_dim: int = Field(default=20, ge=1)
    conv_filters: list[int] = Field(default_factory=lambda: [32, 32, 32, 64, 128])
    kernel_size: int = Field(default=3, ge=1)
    fc_width: int = Field(default=256, ge=1)
    lstm_layers: int = Field(default=0, ge=0)
    lstm_hidden: int = Field(default=128, ge=1)
    n_classes: int = 3
    lr: float = Field(default=2e-4, ge=0)
    batch_size: int = Field(default=8, ge=1)
    epochs: int = Field(default=100, ge=0)
    dtype: DType = DType.F32

    @model_validator(mode="after")
    def _check(self) -> Self:
        if len(self.conv_filters) != 5:
            raise ValueError("conv_filters must list exactly 5 layers")
        if self.n_classes != len(Label):
            raise ValueError(f"n_classes must be {len(Label)}")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd to keep 'same' padding")
        return self

    @property
    def head(self) -> HeadKind:
        return HeadKind.CNN if self.lstm_layers == 0 else HeadKind.CNN_LSTM

    def with_head(self, head: HeadKind, input_dim: int | None = None) -> ClassifierConfig:
        layers = 0 if head is HeadKind.CNN else max(self.lstm_layers, 2)
        update: dict[str, object] = {"lstm_layers": layers}
        if input_dim is not None:
            update["input_dim"] = input_dim
        return self.model_copy(update=update)

    def pooled_shape(self) -> tuple[int, int]:
        """(T', F') after the five pooling layers."""
        t, f = self.input_time, self.input_dim
        for _ in self.conv_filters:
            t, f = pooled_extent(t), pooled_extent(f)
        return t, f


@dataclass(frozen=True)
class LabeledExample:
    """
    One utterance for the downstream task.

    ``features`` is a (T, D) matrix for MFCC models and the raw waveform
    samples for CPC-fed models.
    """

    features: np.ndarray
    label: Label
    speaker_id: str
    utterance_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", Label(int(self.label)))


def init_classifier(config: ClassifierConfig, rng: np.random.Generator) -> ParameterSet:
    dtype = config.dtype
    params = ParameterSet()
    c_in, ks = 1, config.kernel_size
    for i, c_out in enumerate(config.conv_filters):
        params.add(
            f"classifier.conv.{i}.weight",
            kaiming_uniform((c_out, c_in, ks, ks), c_in * ks * ks, rng, dtype),
        )
        params.add(f"classifier.conv.{i}.bias", zeros_param((c_out,), dtype))
        c_in = c_out

    t_out, f_out = config.pooled_shape()
    if config.lstm_layers:
        d_in = c_in * f_out
        for layer in range(config.lstm_layers):
            for name, tensor in init_lstm(d_in, config.lstm_hidden, rng, dtype).items():
                params.add(f"classifier.lstm.layers.{layer}.{name}", tensor)
            d_in = config.lstm_hidden
        fc_in = config.lstm_hidden
    else:
        fc_in = c_in * t_out * f_out

    for i, (d_in, d_out) in enumerate(
        [(fc_in, config.fc_width), (config.fc_width, config.fc_width)]
    ):
        params.add(f"classifier.fc.{i}.weight", kaiming_uniform((d_out, d_in), d_in, rng, dtype))
        params.add(f"classifier.fc.{i}.bias", zeros_param((d_out,), dtype))
    bound = 1.0 / math.sqrt(config.fc_width)
    params.add("classifier.out.weight", uniform((config.n_classes, config.fc_width), bound, rng, dtype))
    params.add("classifier.out.bias", zeros_param((config.n_classes,), dtype))
    return params


def classifier_forward(features: Tensor, params: ParameterSet, config: ClassifierConfig) -> Tensor:
    """Logits (3,) for one (input_time, input_dim) feature map."""
    if features.shape != (config.input_time, config.input_dim):
        raise InvalidShapeError(
            f"classifier expects ({config.input_time}, {config.input_dim}) features",
            features.shape,
        )
    x = features.reshape(1, config.input_time, config.input_dim)
    pad = config.kernel_size // 2
    for i in range(len(config.conv_filters)):
        x = conv2d(
            x,
            params[f"classifier.conv.{i}.weight"],
            params[f"classifier.conv.{i}.bias"],
            padding=pad,
        )
        x = maxpool2d(relu(x))

    if config.lstm_layers:
        channels, t_out, f_out = x.shape
        sequence = x.transpose(1, 0, 2).reshape(t_out, channels * f_out)
        hidden = lstm_stack(sequence, params.scoped("classifier.lstm"), config.lstm_layers)
        x = hidden[t_out - 1]
    else:
        x = x.reshape(-1)

    for i in range(2):
        x = relu(linear(x, params[f"classifier.fc.{i}.weight"], params[f"classifier.fc.{i}.bias"]))
    return linear(x, params["classifier.out.weight"], params["classifier.out.bias"])


class DownstreamModel:
    """
    Classifier parameters plus, for CPC features, the pre-trained CPC model.

    ``params`` is the trainable set: ``classifier.*`` always, ``encoder.*``
    only when fine-tuning. Frozen context features are cached per utterance.
    """

    def __init__(
        self,
        config: ClassifierConfig,
        classifier: ParameterSet,
        cpc: CpcModel | None = None,
        finetune: bool = True,
    ) -> None:
        if cpc is not None and config.input_dim != cpc.config.context_dim:
            raise ConfigError(
                "classifier input_dim must equal the CPC context_dim",
                input_dim=config.input_dim,
                context_dim=cpc.config.context_dim,
            )
        self.config = config
        self.classifier = classifier
        self.cpc = cpc
        self.finetune = finetune and cpc is not None
        self._cache: dict[str, Tensor] = {}

    @classmethod
    def init(
        cls,
        config: ClassifierConfig,
        rng: np.random.Generator,
        cpc: CpcModel | None = None,
        finetune: bool = True,
    ) -> DownstreamModel:
        return cls(config, init_classifier(config, rng), cpc, finetune)

    @property
    def feature_kind(self) -> FeatureKind:
        return FeatureKind.MFCC if self.cpc is None else FeatureKind.CPC

    @property
    def params(self) -> ParameterSet:
        if self.finetune and self.cpc is not None:
            return self.cpc.encoder_params().merged(self.classifier)
        return self.classifier

    def checkpoint_params(self) -> ParameterSet:
        """Everything needed to rebuild the model: classifier plus any encoder, never heads."""
        if self.cpc is None:
            return self.classifier
        return self.cpc.encoder_params().merged(self.classifier)

    def load(self, source: ParameterSet) -> None:
        self.checkpoint_params().load(source)
        if any(name.startswith("encoder.") for name in source):
            self._cache.clear()

    def features_of(self, example: LabeledExample) -> Tensor:
        config = self.config
        if self.cpc is None:
            return Tensor(fit_time(np.asarray(example.features), config.input_time), config.dtype)
        key = example.utterance_id
        if not self.finetune and key and key in self._cache:
            return self._cache[key]
        samples = fit_time(np.asarray(example.features).reshape(-1), config.input_time * DOWNSAMPLING)
        context = extract_context_features(samples, self.cpc, finetune=self.finetune)
        if not self.finetune and key:
            self._cache[key] = context
        return context

    def forward(self, example: LabeledExample) -> Tensor:
        return classifier_forward(self.features_of(example), self.classifier, self.config)


@dataclass
class TrainHistory:
    """Per-epoch mean loss and training accuracy."""

    epochs: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)


def train_local(
    dataset: Sequence[LabeledExample],
    model: DownstreamModel,
    optimizer: OptimizerState,
    epochs: int,
    seed: int = 0,
    epoch_offset: int = 0,
) -> TrainHistory:
    """
    Cross-entropy minimization, one optimizer step per minibatch.

    Epoch ``e`` shuffles with ``default_rng([seed, e])`` counted from
    ``epoch_offset``, so training split over several calls matches one call.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    history = TrainHistory()
    params = model.params
    batch_size = model.config.batch_size
    for local_epoch in range(epochs):
        epoch = epoch_offset + local_epoch
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
        losses: list[float] = []
        correct = 0
        for start in range(0, len(order), batch_size):
            batch = [dataset[i] for i in order[start : start + batch_size]]
            params.zero_grad()
            with Tape() as tape:
                total: Tensor | None = None
                for example in batch:
                    logits = model.forward(example)
                    correct += int(np.argmax(logits.data) == example.label)
                    ce = cross_entropy(logits, int(example.label))
                    total = ce if total is None else total + ce
                assert total is not None
                loss = total * (1.0 / len(batch))
            backward(loss, tape)
            optimizer_step(params, optimizer)
            losses.append(loss.item())
        params.zero_grad()
        history.epochs.append(epoch)
        history.loss.append(float(np.mean(losses)))
        history.accuracy.append(correct / len(dataset))
        logger.info(
            "classifier_epoch_completed",
            epoch=epoch,
            loss=history.loss[-1],
            train_accuracy=history.accuracy[-1],
        )
    return history


def predict_logits(dataset: Sequence[LabeledExample], model: DownstreamModel) -> np.ndarray:
    """Logits for every example, shape (N, 3)."""
    with no_grad():
        rows = [model.forward(example).data.astype(np.float64) for example in dataset]
    return np.stack(rows) if rows else np.zeros((0, len(Label)))


def argmax_label(logits: np.ndarray) -> Label:
    """Highest logit; ties go to the lowest class index."""
    return Label(int(np.argmax(logits)))


def predict(dataset: Sequence[LabeledExample], model: DownstreamModel) -> list[Label]:
    return [argmax_label(row) for row in predict_logits(dataset, model)]


class ClassifierTrainer:
    """A federated client's local downstream state: model, data and Adam moments."""

    def __init__(
        self,
        model: DownstreamModel,
        dataset: Sequence[LabeledExample],
        optimizer: OptimizerState | None = None,
        seed: int = 0,
    ) -> None:
        if not dataset:
            raise ConfigError("client training dataset is empty")
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

    def train_epochs(self, epochs: int, epoch_offset: int) -> TrainHistory:
        return train_local(
            self.dataset, self.model, self.optimizer, epochs, self.seed, epoch_offset
        )
