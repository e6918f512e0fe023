"""Classical LS / linear-MMSE channel estimators, NMSE and overhead accounting.

Measurements follow ``y = h^H S + n`` (a row of ``M_bar`` samples), i.e. the
conjugated observation ``conj(y) = S^H h + conj(n)`` is linear in ``h``. Both
estimators work on that conjugated form and return ``h`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from irsfed.errors import UndefinedMetric


@dataclass(frozen=True)
class EstimateReport:
    method: str
    nmse: float
    per_user: tuple[float, ...]
    trials: int


@dataclass(frozen=True)
class OverheadReport:
    T_CL: int
    T_FL: int
    P: int

    @property
    def ratio(self) -> float:
        return self.T_CL / self.T_FL


def ls_estimate(y: np.ndarray, pilots: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares ``h`` from ``y = h^H S``.

    Rows of a 2-D ``y`` are treated as independent measurements.
    """
    y = np.asarray(y)
    if y.shape[-1] != pilots.shape[1]:
        raise ValueError(f"measurement length {y.shape[-1]} != pilot count {pilots.shape[1]}")
    # h = pinv(S^H) conj(y)
    A = np.linalg.pinv(pilots.conj().T)
    return y.conj() @ A.T


def mmse_estimate(y: np.ndarray, pilots: np.ndarray, covariance: np.ndarray, noise_var: float) -> np.ndarray:
    """Linear MMSE ``R S (S^H R S + sigma^2 I)^-1 conj(y)`` for a zero-mean channel."""
    R = np.asarray(covariance)
    if R.ndim != 2 or R.shape[0] != R.shape[1] or R.shape[0] != pilots.shape[0]:
        raise ValueError(f"covariance shape {R.shape} does not match {pilots.shape[0]} antennas")
    if not np.allclose(R, R.conj().T, rtol=1e-10, atol=1e-12 * max(1.0, float(np.abs(R).max()))):
        raise ValueError("covariance must be Hermitian")
    y = np.asarray(y)
    if y.shape[-1] != pilots.shape[1]:
        raise ValueError(f"measurement length {y.shape[-1]} != pilot count {pilots.shape[1]}")
    if noise_var < 0:
        raise ValueError("noise variance must be >= 0")
    if math.isinf(noise_var):
        return np.zeros(y.shape[:-1] + (pilots.shape[0],), dtype=complex)
    RS = R @ pilots
    C = pilots.conj().T @ RS + noise_var * np.eye(pilots.shape[1])
    W = RS @ np.linalg.pinv(C, hermitian=True)
    return y.conj() @ W.T


def estimated_noise_var(y: np.ndarray, snr_db: float | None) -> float:
    """Noise variance implied by a frame's received power at a known SNR."""
    if snr_db is None:
        return 0.0
    return float(np.mean(np.abs(y) ** 2)) / (1.0 + 10.0 ** (snr_db / 10.0))


def ls_sigma(y_d: np.ndarray, Y_c: np.ndarray, pilots: np.ndarray, epsilon_on: float = 0.0) -> np.ndarray:
    """LS estimate of ``[h_BS, G]``: solve the direct stage, then each frame minus it."""
    h = ls_estimate(y_d, pilots)
    v = ls_estimate(Y_c, pilots)  # (L, M): h + g_l per frame
    G = (v - h).T / (1.0 - epsilon_on)
    return np.column_stack([h, G])


def channel_covariances(sigmas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample covariances of ``h_BS`` and of each ``h_BS + g_l`` from ``(n, M, L+1)`` truths."""
    sigmas = np.asarray(sigmas)
    h = sigmas[:, :, 0]
    R_h = h.T @ h.conj() / len(h)
    v = sigmas[:, :, 1:] + h[:, :, np.newaxis]  # (n, M, L)
    R_v = np.einsum("nml,nkl->lmk", v, v.conj()) / len(h)
    return R_h, R_v


def mmse_sigma(
    y_d: np.ndarray,
    Y_c: np.ndarray,
    pilots: np.ndarray,
    R_h: np.ndarray,
    R_v: np.ndarray,
    snr_db: float | None,
    epsilon_on: float = 0.0,
) -> np.ndarray:
    """LMMSE counterpart of :func:`ls_sigma` with per-frame covariances."""
    h = mmse_estimate(y_d, pilots, R_h, estimated_noise_var(y_d, snr_db))
    L = Y_c.shape[0]
    v = np.stack([mmse_estimate(Y_c[l], pilots, R_v[l], estimated_noise_var(Y_c[l], snr_db)) for l in range(L)])
    G = (v - h).T / (1.0 - epsilon_on)
    return np.column_stack([h, G])


def nmse_terms(truth: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """Per-item ``||S - S_hat||_F^2 / ||S||_F^2`` over the leading axis."""
    truth = np.asarray(truth)
    estimates = np.asarray(estimates)
    if truth.shape != estimates.shape:
        raise ValueError(f"truth {truth.shape} and estimate {estimates.shape} differ")
    axes = tuple(range(1, truth.ndim))
    energy = np.sum(np.abs(truth) ** 2, axis=axes)
    if np.any(energy == 0):
        raise UndefinedMetric("NMSE undefined for a zero-energy channel")
    return np.sum(np.abs(truth - estimates) ** 2, axis=axes) / energy


def nmse(truth: np.ndarray, estimates: np.ndarray) -> float:
    """Mean normalized squared error over all (trial, user) items on the leading axis."""
    return float(np.mean(nmse_terms(truth, estimates)))


def overhead_cl(M_bar: int, M: int, L: int, D: int) -> int:
    """Symbols uplinked when every user ships its dataset to the BS."""
    if M_bar < 1 or M < 1 or L < 0 or D < 0:
        raise ValueError("overhead_cl needs M_bar, M >= 1 and L, D >= 0")
    return (3 * M_bar * (L + 1) + 2 * M * (L + 1)) * D


def overhead_fl(P: int, T: int, K: int) -> int:
    """Symbols exchanged by T rounds of gradient uplink and model downlink."""
    if P < 1 or T < 1 or K < 1:
        raise ValueError("overhead_fl needs P, T, K >= 1")
    return 2 * P * T * K
