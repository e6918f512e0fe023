"""Geometric narrowband channels for the BS-IRS, BS-user and IRS-user links.

Both the BS and the IRS are modelled as half-wavelength uniform linear arrays,
so a single angle fixes each steering vector. Path gains are CN(0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from irsfed import streams


@dataclass(frozen=True)
class SystemGeometry:
    M: int
    L: int
    K: int
    n_paths: int = 5  # BS-IRS link
    n_paths_bs: int = 5  # BS-user link
    n_paths_irs: int = 5  # IRS-user link
    angle_lo: float = -math.pi / 2
    angle_hi: float = math.pi / 2

    def __post_init__(self):
        for name in ("M", "L", "K", "n_paths", "n_paths_bs", "n_paths_irs"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not (math.isfinite(self.angle_lo) and math.isfinite(self.angle_hi)):
            raise ValueError("angular domain must be finite")
        if not self.angle_lo < self.angle_hi:
            raise ValueError(f"degenerate angular domain [{self.angle_lo}, {self.angle_hi}]")

    def subregion(self, user_index: int) -> tuple[float, float]:
        """Angular sector assigned to one user (equal split of the domain)."""
        if not 0 <= user_index < self.K:
            raise ValueError(f"user_index {user_index} outside 0..{self.K - 1}")
        width = (self.angle_hi - self.angle_lo) / self.K
        lo = self.angle_lo + user_index * width
        return lo, lo + width


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        gains = np.atleast_1d(np.asarray(self.gains, dtype=complex))
        angles = np.atleast_1d(np.asarray(self.angles, dtype=float))
        if gains.ndim != 1 or gains.shape != angles.shape[:1]:
            raise ValueError("gains and angles must have equal length")
        if gains.size < 1:
            raise ValueError("a path set needs at least one path")
        object.__setattr__(self, "gains", gains)
        object.__setattr__(self, "angles", angles)

    def __len__(self):
        return self.gains.size


@dataclass(frozen=True)
class ChannelRealization:
    h_bs: np.ndarray  # (M,)
    h_irs: np.ndarray  # (L,)
    H: np.ndarray  # (M, L)
    G: np.ndarray  # (M, L)


def steering_vector(angle: float, n_elements: int) -> np.ndarray:
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle}")
    if n_elements < 1:
        raise ValueError("n_elements must be >= 1")
    return np.exp(1j * math.pi * np.arange(n_elements) * math.sin(angle))


def _steering_matrix(angles: np.ndarray, n_elements: int) -> np.ndarray:
    # columns are steering vectors
    angles = np.asarray(angles, dtype=float)
    if not np.all(np.isfinite(angles)):
        raise ValueError("angles must be finite")
    return np.exp(1j * math.pi * np.outer(np.arange(n_elements), np.sin(angles)))


def draw_gains(n: int, rng: np.random.Generator) -> np.ndarray:
    return (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2)


def generate_bs_irs_channel(geometry: SystemGeometry, paths: PathSet, irs_angles: np.ndarray) -> np.ndarray:
    """BS-IRS matrix ``sqrt(ML/N) sum_n a_n a_BS(phi_n) a_IRS(phi'_n)^H``.

    ``paths.angles`` holds the BS-side angles and ``irs_angles`` the IRS-side
    angle of each path.
    """
    irs_angles = np.atleast_1d(np.asarray(irs_angles, dtype=float))
    if len(paths) != geometry.n_paths or irs_angles.shape != paths.angles.shape:
        raise ValueError(f"expected {geometry.n_paths} BS-IRS paths, got {len(paths)} gains / {irs_angles.size} IRS angles")
    A_bs = _steering_matrix(paths.angles, geometry.M)
    A_irs = _steering_matrix(irs_angles, geometry.L)
    scale = math.sqrt(geometry.M * geometry.L / geometry.n_paths)
    return scale * (A_bs * paths.gains) @ A_irs.conj().T


def random_bs_irs_channel(geometry: SystemGeometry, rng: np.random.Generator) -> np.ndarray:
    """Draw H with both path angles uniform over the whole angular domain."""
    n = geometry.n_paths
    gains = draw_gains(n, rng)
    bs_angles = rng.uniform(geometry.angle_lo, geometry.angle_hi, n)
    irs_angles = rng.uniform(geometry.angle_lo, geometry.angle_hi, n)
    return generate_bs_irs_channel(geometry, PathSet(gains, bs_angles), irs_angles)


def generate_user_channel(n_elements: int, paths: PathSet) -> np.ndarray:
    """``sqrt(n/N) sum_n a_n a(phi_n)`` for a single-antenna user."""
    if len(paths) < 1:
        raise ValueError("empty path set")
    A = _steering_matrix(paths.angles, n_elements)
    return math.sqrt(n_elements / len(paths)) * (A @ paths.gains)


def cascaded_channel(H: np.ndarray, h_irs: np.ndarray) -> np.ndarray:
    H = np.asarray(H)
    h_irs = np.asarray(h_irs)
    if H.ndim != 2 or h_irs.shape != (H.shape[1],):
        raise ValueError(f"cannot cascade H{H.shape} with h_irs{h_irs.shape}")
    return H * h_irs[np.newaxis, :]


def sample_user_angles(geometry: SystemGeometry, user_index: int, n: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = geometry.subregion(user_index)
    return rng.uniform(lo, hi, n)


def user_realization(geometry: SystemGeometry, H: np.ndarray, user_index: int, rng: np.random.Generator) -> ChannelRealization:
    """One user's direct, IRS-user and cascaded channels over a fixed H."""
    bs_paths = PathSet(
        draw_gains(geometry.n_paths_bs, rng),
        sample_user_angles(geometry, user_index, geometry.n_paths_bs, rng),
    )
    irs_paths = PathSet(
        draw_gains(geometry.n_paths_irs, rng),
        sample_user_angles(geometry, user_index, geometry.n_paths_irs, rng),
    )
    h_bs = generate_user_channel(geometry.M, bs_paths)
    h_irs = generate_user_channel(geometry.L, irs_paths)
    return ChannelRealization(h_bs=h_bs, h_irs=h_irs, H=H, G=cascaded_channel(H, h_irs))


def static_bs_irs_channel(geometry: SystemGeometry, seed: int) -> np.ndarray:
    """The BS-IRS channel shared by every user and realization of one seed."""
    return random_bs_irs_channel(geometry, streams.substream(seed, streams.BS_IRS))
