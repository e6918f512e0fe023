"""Two-stage pilot acquisition and dataset construction.

Stage one keeps every IRS element off and observes the direct channel through
``M_bar`` pilots; stage two switches one element on per frame, yielding ``L``
frames that each see the direct channel plus one cascaded column. The stacked
measurements become a three-slab real tensor (real, imaginary, phase) and the
channels become the regression label.

Measurement noise is circular complex Gaussian. Its variance is set from the
SNR in dB against the mean power of the clean frame over its ``M_bar``
entries, unless a reference ``signal_power`` is supplied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from irsfed import storage, streams
from irsfed.channel import ChannelRealization, SystemGeometry, static_bs_irs_channel, user_realization
from irsfed.errors import DatasetTooLarge

FORMAT_NAME = "irsfed-dataset"
FORMAT_VERSION = 1
DEFAULT_MAX_BYTES = 1 << 30


@dataclass(frozen=True)
class PilotConfig:
    M: int
    M_bar: int

    def __post_init__(self):
        if not 1 <= self.M_bar <= self.M:
            raise ValueError(f"need 1 <= M_bar <= M, got M_bar={self.M_bar}, M={self.M}")


@dataclass(frozen=True)
class IrsSwitchModel:
    epsilon_on: float = 0.0
    epsilon_off: float = 0.0

    def __post_init__(self):
        for name in ("epsilon_on", "epsilon_off"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")

    def all_off(self, L: int) -> np.ndarray:
        return np.full(L, self.epsilon_off, dtype=complex)

    def one_on(self, L: int, element: int) -> np.ndarray:
        psi = self.all_off(L)
        psi[element] = 1.0 - self.epsilon_on
        return psi


IDEAL_SWITCH = IrsSwitchModel()


def pilot_matrix(M: int, M_bar: int) -> np.ndarray:
    """First ``M_bar`` columns of the ``M x M`` identity."""
    PilotConfig(M, M_bar)
    return np.eye(M, M_bar, dtype=complex)


def noise_variance(clean: np.ndarray, snr_db: float, signal_power: float | None = None) -> float:
    if not math.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    if signal_power is None:
        signal_power = float(np.mean(np.abs(clean) ** 2))
    return signal_power / 10.0 ** (snr_db / 10.0)


def add_noise(clean: np.ndarray, snr_db: float | None, rng: np.random.Generator, signal_power: float | None = None) -> np.ndarray:
    """Add CN(0, sigma^2) noise; ``snr_db=None`` means noiseless."""
    if snr_db is None:
        return clean.copy()
    var = noise_variance(clean, snr_db, signal_power)
    noise = rng.standard_normal(clean.shape) + 1j * rng.standard_normal(clean.shape)
    return clean + math.sqrt(var / 2.0) * noise


def _frame(h_bs: np.ndarray, G: np.ndarray | None, psi: np.ndarray | None, pilots: np.ndarray) -> np.ndarray:
    # (h_BS^H + psi^H G^H) S  ==  (h_BS + G psi)^H S
    effective = np.asarray(h_bs, dtype=complex)
    if G is not None and psi is not None:
        effective = effective + G @ psi
    if pilots.shape[0] != effective.shape[0]:
        raise ValueError(f"pilots {pilots.shape} do not match channel length {effective.shape[0]}")
    return effective.conj() @ pilots


def receive_direct(
    h_bs: np.ndarray,
    pilots: np.ndarray,
    snr_db: float | None,
    rng: np.random.Generator,
    *,
    G: np.ndarray | None = None,
    switch: IrsSwitchModel = IDEAL_SWITCH,
    signal_power: float | None = None,
) -> np.ndarray:
    """All elements off: ``h_BS^H S + n``, plus ``eps_off`` leakage when a G is given."""
    psi = None
    if G is not None and switch.epsilon_off > 0:
        psi = switch.all_off(G.shape[1])
    return add_noise(_frame(h_bs, G, psi, pilots), snr_db, rng, signal_power)


def receive_cascaded_frame(
    h_bs: np.ndarray,
    G: np.ndarray,
    element: int,
    pilots: np.ndarray,
    switch: IrsSwitchModel,
    snr_db: float | None,
    rng: np.random.Generator,
    signal_power: float | None = None,
) -> np.ndarray:
    L = G.shape[1]
    if not 0 <= element < L:
        raise ValueError(f"element index {element} outside 0..{L - 1}")
    psi = switch.one_on(L, element)
    return add_noise(_frame(h_bs, G, psi, pilots), snr_db, rng, signal_power)


def acquire(
    real: ChannelRealization,
    pilots: np.ndarray,
    switch: IrsSwitchModel,
    snr_db: float | None,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Run both stages; returns ``y_D`` (M_bar,) and ``Y_C`` (L, M_bar)."""
    y_d = receive_direct(real.h_bs, pilots, snr_db, rng, G=real.G, switch=switch)
    Y_c = np.stack(
        [receive_cascaded_frame(real.h_bs, real.G, l, pilots, switch, snr_db, rng) for l in range(real.G.shape[1])]
    )
    return y_d, Y_c


def build_input(y_d: np.ndarray, Y_c: np.ndarray) -> np.ndarray:
    y_d = np.asarray(y_d).reshape(1, -1)
    Y_c = np.asarray(Y_c)
    if Y_c.ndim != 2 or Y_c.shape[1] != y_d.shape[1]:
        raise ValueError(f"y_D {y_d.shape} and Y_C {Y_c.shape} disagree on pilot count")
    upsilon = np.vstack([y_d, Y_c])
    phase = np.angle(upsilon)
    phase[phase == -math.pi] = math.pi  # keep the range (-pi, pi]
    return np.stack([upsilon.real, upsilon.imag, phase], axis=-1)


def build_label(h_bs: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``[vec(Re S); vec(Im S)]`` with ``S = [h_BS, G]``, column-major vec."""
    h_bs = np.asarray(h_bs)
    G = np.asarray(G)
    if G.ndim != 2 or h_bs.shape != (G.shape[0],):
        raise ValueError(f"h_bs {h_bs.shape} and G {G.shape} disagree")
    sigma = np.column_stack([h_bs, G]).ravel(order="F")
    return np.concatenate([sigma.real, sigma.imag])


def unbuild_label(label: np.ndarray, M: int, L: int) -> tuple[np.ndarray, np.ndarray]:
    sigma = label_to_sigma(label, M, L)
    return sigma[:, 0].copy(), sigma[:, 1:].copy()


def label_to_sigma(label: np.ndarray, M: int, L: int) -> np.ndarray:
    """Inverse of :func:`build_label` as the ``M x (L+1)`` complex matrix.

    Accepts a batch of labels along leading axes.
    """
    label = np.asarray(label)
    n = M * (L + 1)
    if label.shape[-1] != 2 * n:
        raise ValueError(f"label length {label.shape[-1]} != 2*M*(L+1) = {2 * n}")
    sigma = label[..., :n] + 1j * label[..., n:]
    return np.swapaxes(sigma.reshape(label.shape[:-1] + (L + 1, M)), -1, -2)


@dataclass
class Dataset:
    """Samples ordered by user, then realization, then SNR level, then noise copy."""

    geometry: SystemGeometry
    pilots: PilotConfig
    switch: IrsSwitchModel
    snr_levels: tuple[float, ...]
    n_realizations: int
    g_reps: int
    seed: int
    inputs: np.ndarray  # (D, L+1, M_bar, 3) float32
    labels: np.ndarray  # (D, 2M(L+1)) float32
    extra: dict = field(default_factory=dict)

    @property
    def per_user(self) -> int:
        return len(self.snr_levels) * self.n_realizations * self.g_reps

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def user_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.geometry.K), self.per_user)

    @property
    def snr_db(self) -> np.ndarray:
        per_real = np.repeat(np.asarray(self.snr_levels, dtype=float), self.g_reps)
        return np.tile(per_real, self.geometry.K * self.n_realizations)

    def user_slice(self, k: int) -> slice:
        return slice(k * self.per_user, (k + 1) * self.per_user)

    def split(self, val_fraction: float = 0.2) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-user (train, validation) index arrays; validation is the tail of each user."""
        n_val = int(round(val_fraction * self.per_user))
        train, val = [], []
        for k in range(self.geometry.K):
            idx = np.arange(self.user_slice(k).start, self.user_slice(k).stop)
            train.append(idx[: self.per_user - n_val])
            val.append(idx[self.per_user - n_val :])
        return train, val

    def metadata(self) -> dict[str, object]:
        g = self.geometry
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "M": g.M,
            "L": g.L,
            "K": g.K,
            "n_paths": g.n_paths,
            "n_paths_bs": g.n_paths_bs,
            "n_paths_irs": g.n_paths_irs,
            "angle_lo": repr(g.angle_lo),
            "angle_hi": repr(g.angle_hi),
            "m_bar": self.pilots.M_bar,
            "eps_on": repr(self.switch.epsilon_on),
            "eps_off": repr(self.switch.epsilon_off),
            "snr_levels": ",".join(repr(float(s)) for s in self.snr_levels),
            "n_realizations": self.n_realizations,
            "g_reps": self.g_reps,
            "seed": self.seed,
            "n_samples": len(self),
            "input_shape": "x".join(str(d) for d in self.inputs.shape[1:]),
            "label_length": self.labels.shape[1],
        }
        header.update(self.extra)
        return header

    def save(self, path) -> None:
        payload = np.concatenate([self.inputs.reshape(len(self), -1), self.labels], axis=1)
        storage.write_container(path, self.metadata(), payload)

    @classmethod
    def load(cls, path) -> "Dataset":
        header, payload = storage.read_container(path)
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: not a dataset file (format={header.get('format')!r})")
        if int(header["version"]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {header['version']}")
        geometry = SystemGeometry(
            M=int(header["M"]),
            L=int(header["L"]),
            K=int(header["K"]),
            n_paths=int(header["n_paths"]),
            n_paths_bs=int(header["n_paths_bs"]),
            n_paths_irs=int(header["n_paths_irs"]),
            angle_lo=float(header["angle_lo"]),
            angle_hi=float(header["angle_hi"]),
        )
        D = int(header["n_samples"])
        in_shape = tuple(int(d) for d in header["input_shape"].split("x"))
        label_len = int(header["label_length"])
        width = int(np.prod(in_shape)) + label_len
        if payload.size != D * width:
            raise ValueError(f"{path}: payload holds {payload.size} floats, expected {D * width}")
        table = payload.reshape(D, width)
        known = set(cls._known_keys())
        return cls(
            geometry=geometry,
            pilots=PilotConfig(geometry.M, int(header["m_bar"])),
            switch=IrsSwitchModel(float(header["eps_on"]), float(header["eps_off"])),
            snr_levels=tuple(float(s) for s in header["snr_levels"].split(",")),
            n_realizations=int(header["n_realizations"]),
            g_reps=int(header["g_reps"]),
            seed=int(header["seed"]),
            inputs=table[:, : width - label_len].reshape((D,) + in_shape).copy(),
            labels=table[:, width - label_len :].copy(),
            extra={k: v for k, v in header.items() if k not in known},
        )

    @staticmethod
    def _known_keys():
        return (
            "format version M L K n_paths n_paths_bs n_paths_irs angle_lo angle_hi m_bar eps_on eps_off "
            "snr_levels n_realizations g_reps seed n_samples input_shape label_length"
        ).split()


def dataset_size(K: int, n_snr: int, n_realizations: int, g_reps: int) -> int:
    """Number of training pairs, ``|snr levels| * K * N * G``."""
    return n_snr * K * n_realizations * g_reps


def dataset_bytes(geometry: SystemGeometry, M_bar: int, n_samples: int) -> int:
    per_sample = 3 * (geometry.L + 1) * M_bar + 2 * geometry.M * (geometry.L + 1)
    return 4 * per_sample * n_samples


def generate_dataset(
    geometry: SystemGeometry,
    pilots: PilotConfig,
    switch: IrsSwitchModel,
    snr_levels,
    n_realizations: int,
    g_reps: int,
    seed: int,
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> Dataset:
    snr_levels = tuple(float(s) for s in snr_levels)
    if not snr_levels or n_realizations < 1 or g_reps < 1:
        raise ValueError("need at least one SNR level, realization and noise copy")
    if pilots.M != geometry.M:
        raise ValueError(f"pilot config M={pilots.M} but geometry M={geometry.M}")
    D = dataset_size(geometry.K, len(snr_levels), n_realizations, g_reps)
    need = dataset_bytes(geometry, pilots.M_bar, D)
    if need > max_bytes:
        raise DatasetTooLarge(f"dataset of {D} samples needs {need} bytes, budget is {max_bytes}")

    S = pilot_matrix(pilots.M, pilots.M_bar)
    H = static_bs_irs_channel(geometry, seed)
    inputs = np.empty((D, geometry.L + 1, pilots.M_bar, 3), dtype=np.float32)
    labels = np.empty((D, 2 * geometry.M * (geometry.L + 1)), dtype=np.float32)
    i = 0
    for k in range(geometry.K):
        for n in range(n_realizations):
            real = user_realization(geometry, H, k, streams.substream(seed, streams.USER_CHANNEL, k, n))
            label = build_label(real.h_bs, real.G)
            for s_idx, snr in enumerate(snr_levels):
                for g in range(g_reps):
                    rng = streams.substream(seed, streams.MEASUREMENT, k, n, s_idx, g)
                    inputs[i] = build_input(*acquire(real, S, switch, snr, rng))
                    labels[i] = label
                    i += 1
    return Dataset(geometry, pilots, switch, snr_levels, n_realizations, g_reps, seed, inputs, labels)
