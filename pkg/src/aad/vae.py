"""
Variational autoencoder for aad.
Dense ReLU encoder/decoder trained on min-max scaled features; the encoder's
z_mean is the 100-dimensional representation used downstream.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import entr, expit

from aad.errors import ColumnMismatch, ConfigError, CorruptModel, DataError, NonFiniteLoss, ShapeMismatch
from aad.models import FeatureMatrix
from aad.storage import decode_array, encode_array, load_artifact, save_artifact


logger = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7


@dataclass(frozen=True)
class VaeConfig:
    """Architecture and training settings."""
    input_dim: int = 182
    hidden_dims: Tuple[int, ...] = (256, 128, 100)
    latent_dim: int = 100
    epochs: int = 50
    batch_size: int = 128
    learning_rate: float = 1e-3
    seed: int = 0
    validation_fraction: float = 0.1
    check_reparameterization: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim <= 0 or self.latent_dim <= 0 or any(d <= 0 for d in self.hidden_dims):
            raise ConfigError("VAE layer sizes must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("VAE epochs and batch_size must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("VAE learning_rate must be positive")
        if not 0 <= self.validation_fraction < 1:
            raise ConfigError("VAE validation_fraction must lie in [0, 1)")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "latent_dim": self.latent_dim,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
            "validation_fraction": self.validation_fraction,
            "check_reparameterization": self.check_reparameterization,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VaeConfig":
        return cls(**{**data, "hidden_dims": tuple(data.get("hidden_dims", cls.hidden_dims))})


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-column min-max scaling fitted on training rows."""
    column_names: Tuple[str, ...]
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        span = self.maximum - self.minimum
        constant = span <= 0
        scaled = (values - self.minimum) / np.where(constant, 1.0, span)
        scaled = np.clip(scaled, 0.0, 1.0)
        scaled[..., constant] = 0.5
        return scaled

    def to_dict(self) -> Dict[str, Any]:
        return {
            "column_names": list(self.column_names),
            "minimum": encode_array(self.minimum),
            "maximum": encode_array(self.maximum),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Normalizer":
        return cls(
            column_names=tuple(data["column_names"]),
            minimum=decode_array(data["minimum"]),
            maximum=decode_array(data["maximum"]),
        )


def normalize_fit(m: FeatureMatrix) -> Normalizer:
    if m.n_rows == 0:
        raise DataError("Cannot fit a normalizer on zero rows")
    return Normalizer(
        column_names=m.column_names,
        minimum=m.values.min(axis=0),
        maximum=m.values.max(axis=0),
    )


def normalize_apply(n: Normalizer, m: FeatureMatrix) -> FeatureMatrix:
    _check_columns(n, m)
    return m.with_values(m.column_names, n.apply(m.values), m.removed_columns)


def _check_columns(n: Normalizer, m: FeatureMatrix) -> None:
    if tuple(m.column_names) != tuple(n.column_names):
        missing = sorted(set(n.column_names) - set(m.column_names))
        extra = sorted(set(m.column_names) - set(n.column_names))
        raise ColumnMismatch(
            f"Columns differ from training columns (missing: {missing[:5]}, unexpected: {extra[:5]})"
        )


@dataclass(eq=False)
class Dense:
    """Affine layer, x @ weight + bias."""
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray    # (fan_out,)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    def to_dict(self) -> Dict[str, Any]:
        return {"weight": encode_array(self.weight), "bias": encode_array(self.bias)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Dense":
        return cls(weight=decode_array(data["weight"]), bias=decode_array(data["bias"]))


@dataclass(eq=False)
class VaeParams:
    """Encoder stack, the two latent heads, decoder stack and sigmoid output head."""
    encoder: List[Dense]
    z_mean: Dense
    z_log_var: Dense
    decoder: List[Dense]
    output: Dense

    @property
    def input_dim(self) -> int:
        return self.encoder[0].weight.shape[0] if self.encoder else self.z_mean.weight.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.z_mean.weight.shape[1]

    def layers(self) -> List[Dense]:
        return [*self.encoder, self.z_mean, self.z_log_var, *self.decoder, self.output]

    def arrays(self) -> List[np.ndarray]:
        """Every parameter array in a fixed order."""
        return [a for layer in self.layers() for a in (layer.weight, layer.bias)]

    def copy(self) -> "VaeParams":
        def clone(layer: Dense) -> Dense:
            return Dense(layer.weight.copy(), layer.bias.copy())
        return VaeParams(
            encoder=[clone(l) for l in self.encoder],
            z_mean=clone(self.z_mean),
            z_log_var=clone(self.z_log_var),
            decoder=[clone(l) for l in self.decoder],
            output=clone(self.output),
        )

    def zeros_like(self) -> "VaeParams":
        out = self.copy()
        for array in out.arrays():
            array[...] = 0.0
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "encoder": [l.to_dict() for l in self.encoder],
            "z_mean": self.z_mean.to_dict(),
            "z_log_var": self.z_log_var.to_dict(),
            "decoder": [l.to_dict() for l in self.decoder],
            "output": self.output.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VaeParams":
        return cls(
            encoder=[Dense.from_dict(l) for l in data["encoder"]],
            z_mean=Dense.from_dict(data["z_mean"]),
            z_log_var=Dense.from_dict(data["z_log_var"]),
            decoder=[Dense.from_dict(l) for l in data["decoder"]],
            output=Dense.from_dict(data["output"]),
        )


def init_params(cfg: VaeConfig, rng: np.random.Generator) -> VaeParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    def layer(fan_in: int, fan_out: int) -> Dense:
        limit = 1.0 / np.sqrt(fan_in)
        return Dense(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out))

    encoder_sizes = [cfg.input_dim, *cfg.hidden_dims]
    decoder_sizes = [cfg.latent_dim, *reversed(cfg.hidden_dims)]
    return VaeParams(
        encoder=[layer(a, b) for a, b in zip(encoder_sizes, encoder_sizes[1:])],
        z_mean=layer(encoder_sizes[-1], cfg.latent_dim),
        z_log_var=layer(encoder_sizes[-1], cfg.latent_dim),
        decoder=[layer(a, b) for a, b in zip(decoder_sizes, decoder_sizes[1:])],
        output=layer(decoder_sizes[-1], cfg.input_dim),
    )


@dataclass(frozen=True, eq=False)
class LatentCode:
    z_mean: np.ndarray
    z_log_var: np.ndarray
    z: np.ndarray
    epsilon: np.ndarray

    def verify(self) -> None:
        """z must equal z_mean + exp(z_log_var / 2) * epsilon exactly."""
        expected = sample_z(self.z_mean, self.z_log_var, self.epsilon)
        if not np.array_equal(expected, self.z):
            raise AssertionError("Reparameterization identity violated")


def _relu(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, 0.0)


def encode(x: np.ndarray, p: VaeParams) -> Tuple[np.ndarray, np.ndarray]:
    """(z_mean, z_log_var) for one row or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.input_dim:
        raise ShapeMismatch(f"Encoder expects {p.input_dim} inputs, got {x.shape[-1]}")
    h = x
    for layer in p.encoder:
        h = _relu(layer(h))
    return p.z_mean(h), p.z_log_var(h)


def sample_z(z_mean: np.ndarray, z_log_var: np.ndarray, epsilon: np.ndarray) -> np.ndarray:
    z_mean, z_log_var, epsilon = (np.asarray(a, dtype=np.float64) for a in (z_mean, z_log_var, epsilon))
    if not z_mean.shape == z_log_var.shape == epsilon.shape:
        raise ShapeMismatch("z_mean, z_log_var and epsilon must share a shape")
    return z_mean + np.exp(0.5 * z_log_var) * epsilon


def decode(z: np.ndarray, p: VaeParams) -> np.ndarray:
    """Sigmoid reconstruction in (0, 1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != p.latent_dim:
        raise ShapeMismatch(f"Decoder expects {p.latent_dim} latent values, got {z.shape[-1]}")
    g = z
    for layer in p.decoder:
        g = _relu(layer(g))
    return expit(p.output(g))


def vae_losses(x: np.ndarray, x_decoded_mean: np.ndarray, z_mean: np.ndarray,
               z_log_var: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Per-sample reconstruction and KL terms plus the batch mean of their sum.

    xent is summed over features (input_dim times the mean BCE).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_hat = np.clip(np.atleast_2d(x_decoded_mean), BCE_CLAMP, 1.0 - BCE_CLAMP)
    z_mean = np.atleast_2d(z_mean)
    z_log_var = np.atleast_2d(z_log_var)
    xent = -np.sum(x * np.log(x_hat) + (1.0 - x) * np.log(1.0 - x_hat), axis=1)
    kl = -0.5 * np.sum(1.0 + z_log_var - z_mean ** 2 - np.exp(z_log_var), axis=1)
    return xent, kl, float(np.mean(xent + kl))


def vae_loss_and_grads(p: VaeParams, x: np.ndarray, epsilon: np.ndarray,
                       check_reparameterization: bool = False
                       ) -> Tuple[float, VaeParams, np.ndarray]:
    """Batch vae_loss, its gradient w.r.t. every parameter, and the reconstruction."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    epsilon = np.atleast_2d(epsilon)
    batch = x.shape[0]

    enc_inputs, enc_pre = [], []
    h = x
    for layer in p.encoder:
        enc_inputs.append(h)
        a = layer(h)
        enc_pre.append(a)
        h = _relu(a)
    mu = p.z_mean(h)
    log_var = p.z_log_var(h)
    std = np.exp(0.5 * log_var)
    z = mu + std * epsilon
    if check_reparameterization:
        LatentCode(z_mean=mu, z_log_var=log_var, z=z, epsilon=epsilon).verify()

    dec_inputs, dec_pre = [], []
    g = z
    for layer in p.decoder:
        dec_inputs.append(g)
        a = layer(g)
        dec_pre.append(a)
        g = _relu(a)
    x_hat = expit(p.output(g))

    _, _, loss = vae_losses(x, x_hat, mu, log_var)

    grads = p.zeros_like()
    inside = (x_hat >= BCE_CLAMP) & (x_hat <= 1.0 - BCE_CLAMP)
    d_logits = np.where(inside, x_hat - x, 0.0) / batch
    grads.output.weight[...] = g.T @ d_logits
    grads.output.bias[...] = d_logits.sum(axis=0)
    d_g = d_logits @ p.output.weight.T
    for i in reversed(range(len(p.decoder))):
        d_a = d_g * (dec_pre[i] > 0)
        grads.decoder[i].weight[...] = dec_inputs[i].T @ d_a
        grads.decoder[i].bias[...] = d_a.sum(axis=0)
        d_g = d_a @ p.decoder[i].weight.T

    d_mu = d_g + mu / batch
    d_log_var = d_g * epsilon * 0.5 * std + 0.5 * (np.exp(log_var) - 1.0) / batch
    grads.z_mean.weight[...] = h.T @ d_mu
    grads.z_mean.bias[...] = d_mu.sum(axis=0)
    grads.z_log_var.weight[...] = h.T @ d_log_var
    grads.z_log_var.bias[...] = d_log_var.sum(axis=0)
    d_h = d_mu @ p.z_mean.weight.T + d_log_var @ p.z_log_var.weight.T
    for i in reversed(range(len(p.encoder))):
        d_a = d_h * (enc_pre[i] > 0)
        grads.encoder[i].weight[...] = enc_inputs[i].T @ d_a
        grads.encoder[i].bias[...] = d_a.sum(axis=0)
        d_h = d_a @ p.encoder[i].weight.T

    return loss, grads, x_hat


class AdamOptimizer:
    """First-order optimizer with bias-corrected moment estimates."""

    def __init__(self, params: VaeParams, learning_rate: float):
        self.learning_rate = learning_rate
        self.step_count = 0
        self.first = [np.zeros_like(a) for a in params.arrays()]
        self.second = [np.zeros_like(a) for a in params.arrays()]

    def step(self, params: VaeParams, grads: VaeParams) -> None:
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - ADAM_BETA1 ** t
        correction2 = 1.0 - ADAM_BETA2 ** t
        for value, grad, m, v in zip(params.arrays(), grads.arrays(), self.first, self.second):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad * grad
            value -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPSILON)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_vae: float
    val_vae: float
    train_mse: float
    val_mse: float


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    # lowest reachable train_vae: the mean Bernoulli entropy of the training rows
    train_entropy_floor: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def to_dict(self) -> Dict[str, Any]:
        return {"records": [r.__dict__ for r in self.records], "train_entropy_floor": self.train_entropy_floor}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainHistory":
        return cls(records=[EpochRecord(**r) for r in data.get("records", [])],
                   train_entropy_floor=float(data.get("train_entropy_floor", 0.0)))


def write_history_csv(history: TrainHistory, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.__dict__ for r in history.records],
                         columns=["epoch", "train_vae", "val_vae", "train_mse", "val_mse"])
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def entropy_floor(x: np.ndarray) -> float:
    """Mean over rows of the summed Bernoulli entropy; no decoder output scores a lower xent."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return float(np.mean(np.sum(entr(x) + entr(1.0 - x), axis=1)))


def _evaluate(params: VaeParams, x: np.ndarray, rng: np.random.Generator) -> Tuple[float, float]:
    mu, log_var = encode(x, params)
    z = sample_z(mu, log_var, rng.standard_normal(mu.shape))
    x_hat = decode(z, params)
    _, _, loss = vae_losses(x, x_hat, mu, log_var)
    return loss, float(np.mean((x - x_hat) ** 2))


def train(m: FeatureMatrix, cfg: VaeConfig = VaeConfig()
          ) -> Tuple[VaeParams, Normalizer, TrainHistory]:
    """Fit normalizer and VAE on the rows of m (deterministic for a fixed seed)."""
    if m.n_rows == 0:
        raise DataError("Cannot train a VAE on zero rows")
    if not np.all(np.isfinite(m.values)):
        raise DataError("VAE training requires a finite feature matrix")
    if cfg.input_dim != m.n_columns:
        logger.debug("Setting VAE input_dim to %d surviving columns", m.n_columns)
        cfg = replace(cfg, input_dim=m.n_columns)

    normalizer = normalize_fit(m)
    x_all = normalizer.apply(m.values)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg, rng)
    optimizer = AdamOptimizer(params, cfg.learning_rate)

    order = rng.permutation(m.n_rows)
    n_val = int(round(m.n_rows * cfg.validation_fraction))
    if n_val >= m.n_rows:
        n_val = 0
    val_rows, train_rows = order[:n_val], order[n_val:]
    logger.info("Training VAE %d -> %s -> %d on %d rows (%d held out)", cfg.input_dim,
                list(cfg.hidden_dims), cfg.latent_dim, len(train_rows), n_val)

    history = TrainHistory(train_entropy_floor=entropy_floor(x_all[train_rows]))
    for epoch in range(1, cfg.epochs + 1):
        shuffled = train_rows[rng.permutation(len(train_rows))]
        loss_sum = mse_sum = 0.0
        for begin in range(0, len(shuffled), cfg.batch_size):
            x = x_all[shuffled[begin:begin + cfg.batch_size]]
            epsilon = rng.standard_normal((x.shape[0], cfg.latent_dim))
            loss, grads, x_hat = vae_loss_and_grads(params, x, epsilon, cfg.check_reparameterization)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch)
            optimizer.step(params, grads)
            loss_sum += loss * x.shape[0]
            mse_sum += float(np.sum((x - x_hat) ** 2)) / x.shape[1]

        if n_val:
            val_vae, val_mse = _evaluate(params, x_all[val_rows], rng)
        else:
            val_vae = val_mse = float("nan")
        record = EpochRecord(epoch=epoch, train_vae=loss_sum / len(train_rows),
                             val_vae=val_vae, train_mse=mse_sum / len(train_rows), val_mse=val_mse)
        if not np.isfinite(record.train_vae) or not params.is_finite():
            raise NonFiniteLoss(epoch)
        history.records.append(record)
        logger.info("VAE epoch %d/%d: loss %.4f (val %.4f), mse %.5f (val %.5f)", epoch,
                    cfg.epochs, record.train_vae, record.val_vae, record.train_mse, record.val_mse)

    return params, normalizer, history


def latent_column_names(latent_dim: int) -> Tuple[str, ...]:
    return tuple(f"z_{i:03d}" for i in range(latent_dim))


def transform(m: FeatureMatrix, p: VaeParams, n: Normalizer) -> FeatureMatrix:
    """Replace each row by its z_mean; labels and metadata are kept."""
    _check_columns(n, m)
    z_mean, _ = encode(n.apply(m.values), p)
    return m.with_values(latent_column_names(p.latent_dim), z_mean.reshape(m.n_rows, p.latent_dim))


@dataclass(eq=False)
class VaeModel:
    """Everything needed to reproduce a trained encoder."""
    config: VaeConfig
    params: VaeParams
    normalizer: Normalizer
    history: TrainHistory = field(default_factory=TrainHistory)

    def transform(self, m: FeatureMatrix) -> FeatureMatrix:
        return transform(m, self.params, self.normalizer)


def fit_vae(m: FeatureMatrix, cfg: VaeConfig = VaeConfig()) -> VaeModel:
    """train() packed with the config it actually ran with."""
    params, normalizer, history = train(m, cfg)
    return VaeModel(config=replace(cfg, input_dim=params.input_dim), params=params,
                    normalizer=normalizer, history=history)


def save_vae(model: VaeModel, path: Union[str, Path]) -> str:
    payload = {
        "config": model.config.to_dict(),
        "normalizer": model.normalizer.to_dict(),
        "layer_shapes": [list(layer.weight.shape) for layer in model.params.layers()],
        "params": model.params.to_dict(),
        "history": model.history.to_dict(),
    }
    return save_artifact(path, "vae", payload)


def load_vae(path: Union[str, Path]) -> VaeModel:
    kind, payload = load_artifact(path)
    if kind != "vae":
        raise CorruptModel(f"{path}: expected a vae model, found {kind}")
    try:
        model = VaeModel(
            config=VaeConfig.from_dict(payload["config"]),
            params=VaeParams.from_dict(payload["params"]),
            normalizer=Normalizer.from_dict(payload["normalizer"]),
            history=TrainHistory.from_dict(payload.get("history", {})),
        )
    except (KeyError, TypeError) as e:
        raise CorruptModel(f"{path}: incomplete vae payload ({e})") from e
    shapes = [list(layer.weight.shape) for layer in model.params.layers()]
    if shapes != payload.get("layer_shapes"):
        raise CorruptModel(f"{path}: layer shapes disagree with the stored parameters")
    return model
