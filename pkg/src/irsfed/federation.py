"""Centralized and federated training of the estimation CNN.

Federated training is FedSGD: every round the server broadcasts the model
(over a noisy downlink), every user returns one gradient of its local loss
(over a noisy uplink), and the server applies the user-averaged gradient with
a momentum step. Link noise follows the gradient-SNR convention

    SNR_theta = 20 log10(||v||^2 / sigma^2)

where ``v`` is the transmitted vector, so ``sigma^2 = ||v||^2 / 10**(SNR/20)``
per coordinate. Because that variance applies to every one of the ``n``
coordinates, total noise energy exceeds ``||v||^2`` for any SNR below roughly
``20 log10(n)`` dB. The ``per_coordinate`` convention instead compares the
mean power per coordinate with the noise variance,
``sigma^2 = ||v||^2 / (n 10**(SNR/10))``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from irsfed import streams
from irsfed.acquisition import Dataset
from irsfed.errors import DegenerateSignal, NumericFailure
from irsfed.nn import CNN, DropoutMask, draw_dropout_mask, sgd_step

CALIBRATION_SAMPLES = 256

CONVENTIONS = ("literal", "per_coordinate")

LOG_COLUMNS = ["round", "mode", "loss", "val_rmse", "grad_norm_mean", "snr_theta_db", "wall_ms"]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "federated"
    rounds: int = 100
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 128
    snr_theta_db: float = math.inf
    snr_convention: str = "literal"
    downlink_noise: bool = True
    dropout: bool = True
    local_batch: int = 0  # 0 = whole local training set
    shuffle: bool = True
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("centralized", "federated"):
            raise ValueError(f"mode must be 'centralized' or 'federated', got {self.mode!r}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.local_batch < 0:
            raise ValueError("local_batch must be >= 0")
        if math.isnan(self.snr_theta_db) or self.snr_theta_db == -math.inf:
            raise ValueError("snr_theta_db must be a number or +inf")
        if self.snr_convention not in CONVENTIONS:
            raise ValueError(f"snr_convention must be one of {CONVENTIONS}, got {self.snr_convention!r}")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class RoundRecord:
    round: int
    loss: float
    val_rmse: float
    grad_norms: tuple[float, ...]
    realized_snr_db: float
    mask_seed: int | None = None
    wall_ms: float = 0.0

    @property
    def grad_norm_mean(self) -> float:
        return float(np.mean(self.grad_norms))


@dataclass
class TrainResult:
    theta: np.ndarray
    velocity: np.ndarray
    records: list[RoundRecord] = field(default_factory=list)


# -- link model ----------------------------------------------------------------


def link_noise_variance(norm_sq: float, snr_db: float, n: int = 1, convention: str = "literal") -> float:
    """Per-coordinate noise variance for a vector of ``n`` coordinates."""
    if convention == "literal":
        return norm_sq / 10.0 ** (snr_db / 20.0)
    if convention == "per_coordinate":
        return norm_sq / (n * 10.0 ** (snr_db / 10.0))
    raise ValueError(f"unknown SNR convention {convention!r}")


def _noisy(vec, snr_db, rng, support, what, convention="literal"):
    vec = np.asarray(vec, dtype=float)
    if not np.all(np.isfinite(vec)):
        raise NumericFailure(f"non-finite {what} before transmission")
    if snr_db == math.inf:
        return vec.copy(), 0.0
    sent = vec if support is None else vec[support]
    norm_sq = float(sent @ sent)
    if norm_sq == 0.0:
        raise DegenerateSignal(f"zero-norm {what} cannot be sent at finite SNR")
    var = link_noise_variance(norm_sq, snr_db, sent.size, convention)
    out = vec.copy()
    noise = math.sqrt(var) * rng.standard_normal(sent.shape)
    if support is None:
        out += noise
    else:
        out[support] += noise
    return out, var


def noisy_uplink(g, snr_theta_db: float, rng: np.random.Generator, support=None, convention: str = "literal") -> np.ndarray:
    """Gradient as received at the BS.

    ``support`` restricts transmission (and hence noise) to selected
    coordinates; the rest arrive as exact zeros.
    """
    return _noisy(g, snr_theta_db, rng, support, "gradient", convention)[0]


def noisy_downlink(theta, snr_theta_db: float, rng: np.random.Generator, convention: str = "literal") -> np.ndarray:
    """Model as received by one user; pass each user its own stream."""
    return _noisy(theta, snr_theta_db, rng, None, "model", convention)[0]


def aggregate(gradients) -> np.ndarray:
    """Unweighted mean, summed in user order."""
    gradients = list(gradients)
    if not gradients:
        raise ValueError("nothing to aggregate")
    total = np.array(gradients[0], dtype=float)
    for g in gradients[1:]:
        g = np.asarray(g, dtype=float)
        if g.shape != total.shape:
            raise ValueError(f"gradient shapes differ: {g.shape} vs {total.shape}")
        total = total + g
    return total / len(gradients)


def local_gradient(net: CNN, theta, inputs, labels, batch=None, mask: DropoutMask | None = None) -> np.ndarray:
    """Mean per-sample gradient over ``batch`` (all local samples when None)."""
    if batch is not None:
        batch = np.asarray(batch, dtype=int)
        if batch.size == 0:
            raise ValueError("empty batch")
        inputs, labels = inputs[batch], labels[batch]
    return net.loss_and_grad(theta, inputs, labels, mask)[1]


# -- helpers -------------------------------------------------------------------


def round_seed(seed: int, *key: int) -> int:
    state = np.random.SeedSequence(int(seed), spawn_key=(streams.ROUND_MASK,) + tuple(key)).generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def _calibration_subset(n: int) -> np.ndarray:
    if n <= CALIBRATION_SAMPLES:
        return np.arange(n)
    return np.linspace(0, n - 1, CALIBRATION_SAMPLES).round().astype(int)


def _validation_rmse(net: CNN, theta, X_val, Y_val) -> float:
    if len(X_val) == 0:
        return math.nan
    err = net.predict(theta, X_val) - Y_val
    return float(math.sqrt(np.mean(err * err)))


def _realized_snr(sent: np.ndarray, received: np.ndarray, support) -> float:
    """Gradient SNR actually seen, in the literal 20 log10(||g||^2 / var) form."""
    noise = received - sent
    if support is not None:
        noise = noise[support]
    var = float(np.mean(noise * noise))
    return math.inf if var == 0 else 20 * math.log10(float(sent @ sent) / var)


def _check_finite(value: float, theta: np.ndarray, t: int):
    if not math.isfinite(value) or not np.all(np.isfinite(theta)):
        raise NumericFailure("training diverged (non-finite loss or parameters)", round_index=t)


def _initial(net: CNN, config: TrainConfig, parties_x, parties_y, theta0):
    if theta0 is None:
        theta0 = net.init_params(streams.substream(config.seed, streams.INIT))
        subsets = [_calibration_subset(len(x)) for x in parties_x]
        net.calibrate(theta0, [x[s] for x, s in zip(parties_x, subsets)], [y[s] for y, s in zip(parties_y, subsets)])
    theta0 = np.array(theta0, dtype=float)
    if theta0.shape != (net.size,):
        raise ValueError(f"initial theta has shape {theta0.shape}, expected ({net.size},)")
    return theta0


# -- training loops ------------------------------------------------------------


def run_federated(dataset: Dataset, net: CNN, config: TrainConfig, theta0=None) -> TrainResult:
    if config.mode != "federated":
        raise ValueError("run_federated needs mode='federated'")
    K = dataset.geometry.K
    train_idx, val_idx = dataset.split(config.val_fraction)
    X = [np.asarray(dataset.inputs[i], dtype=float) for i in train_idx]
    Y = [np.asarray(dataset.labels[i], dtype=float) for i in train_idx]
    X_val = np.asarray(dataset.inputs[np.concatenate(val_idx)], dtype=float)
    Y_val = np.asarray(dataset.labels[np.concatenate(val_idx)], dtype=float)

    theta = _initial(net, config, X, Y, theta0)
    Y = [y / net.output_scale for y in Y]
    velocity = np.zeros_like(theta)
    down_snr = config.snr_theta_db if config.downlink_noise else math.inf
    records = []
    for t in range(1, config.rounds + 1):
        start = time.perf_counter()
        mask, support, seed_t = None, None, None
        if config.dropout:
            seed_t = round_seed(config.seed, t)
            mask = draw_dropout_mask(net.spec, seed_t, t)
            support = ~net.masked_coordinates(mask)
        received, losses, norms, snrs = [], [], [], []
        for k in range(K):
            theta_k = noisy_downlink(theta, down_snr, streams.substream(config.seed, streams.DOWNLINK, t, k), config.snr_convention)
            if config.local_batch and config.local_batch < len(X[k]):
                rng = streams.substream(config.seed, streams.LOCAL_BATCH, t, k)
                batch = np.sort(rng.choice(len(X[k]), config.local_batch, replace=False))
                loss_k, g_k = net.loss_and_grad(theta_k, X[k][batch], Y[k][batch], mask)
            else:
                loss_k, g_k = net.loss_and_grad(theta_k, X[k], Y[k], mask)
            _check_finite(loss_k, g_k, t)
            uplink = streams.substream(config.seed, streams.UPLINK, t, k)
            g_rx, var = _noisy(g_k, config.snr_theta_db, uplink, support, "gradient", config.snr_convention)
            received.append(g_rx)
            losses.append(loss_k)
            norms.append(float(np.linalg.norm(g_k)))
            snrs.append(_realized_snr(g_k, g_rx, support))
        theta, velocity = sgd_step(theta, velocity, aggregate(received), config.learning_rate, config.momentum)
        loss = float(np.mean(losses))
        _check_finite(loss, theta, t)
        records.append(
            RoundRecord(
                round=t,
                loss=loss,
                val_rmse=_validation_rmse(net, theta, X_val, Y_val),
                grad_norms=tuple(norms),
                realized_snr_db=float(np.mean(snrs)),
                mask_seed=seed_t,
                wall_ms=(time.perf_counter() - start) * 1e3,
            )
        )
    return TrainResult(theta, velocity, records)


def run_centralized(dataset: Dataset, net: CNN, config: TrainConfig, theta0=None) -> TrainResult:
    """Mini-batch momentum SGD on the pooled training data; one record per epoch."""
    if config.mode != "centralized":
        raise ValueError("run_centralized needs mode='centralized'")
    train_idx, val_idx = dataset.split(config.val_fraction)
    pooled = np.concatenate(train_idx)
    X = np.asarray(dataset.inputs[pooled], dtype=float)
    Y = np.asarray(dataset.labels[pooled], dtype=float)
    X_val = np.asarray(dataset.inputs[np.concatenate(val_idx)], dtype=float)
    Y_val = np.asarray(dataset.labels[np.concatenate(val_idx)], dtype=float)

    theta = _initial(net, config, [X], [Y], theta0)
    Y = Y / net.output_scale
    velocity = np.zeros_like(theta)
    n = len(X)
    records = []
    for epoch in range(1, config.rounds + 1):
        start = time.perf_counter()
        order = streams.substream(config.seed, streams.SHUFFLE, epoch).permutation(n) if config.shuffle else np.arange(n)
        total, norms, seed_t = 0.0, [], None
        for step, s in enumerate(range(0, n, config.batch_size)):
            batch = order[s : s + config.batch_size]
            mask = None
            if config.dropout:
                seed_t = round_seed(config.seed, epoch, step)
                mask = draw_dropout_mask(net.spec, seed_t, epoch)
            loss_b, g = net.loss_and_grad(theta, X[batch], Y[batch], mask)
            _check_finite(loss_b, g, epoch)
            theta, velocity = sgd_step(theta, velocity, g, config.learning_rate, config.momentum)
            total += loss_b * len(batch)
            norms.append(float(np.linalg.norm(g)))
        loss = total / n
        _check_finite(loss, theta, epoch)
        records.append(
            RoundRecord(
                round=epoch,
                loss=loss,
                val_rmse=_validation_rmse(net, theta, X_val, Y_val),
                grad_norms=(float(np.mean(norms)),),
                realized_snr_db=math.inf,
                mask_seed=seed_t,
                wall_ms=(time.perf_counter() - start) * 1e3,
            )
        )
    return TrainResult(theta, velocity, records)


def train(dataset: Dataset, net: CNN, config: TrainConfig, theta0=None) -> TrainResult:
    runner = run_federated if config.mode == "federated" else run_centralized
    return runner(dataset, net, config, theta0)


def write_round_log(path, records, config: TrainConfig, preamble: list[str] = (), wall_time: bool = True) -> None:
    """One CSV row per round; ``preamble`` lines are written first as ``# `` comments."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in preamble:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.round,
                    config.mode,
                    repr(r.loss),
                    repr(r.val_rmse),
                    repr(r.grad_norm_mean),
                    repr(float(config.snr_theta_db)),
                    f"{r.wall_ms:.3f}" if wall_time else "0",
                ]
            )
