"""Uplink grant-free NOMA scenario synthesis.

A frame is ``Y = G X + V`` where ``G[n, k] = H[n, k] * S[n, k]`` is the
equivalent channel, ``X`` is K x J and row-sparse (the active set is fixed for
the whole frame) and ``V`` is circular complex Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SNR_MODES = ("per_user", "total")


class ConfigError(ValueError):
    """Raised for scenario parameters that violate the model's constraints."""


@dataclass(frozen=True)
class Constellation:
    name: str
    symbols: np.ndarray  # sorted lexicographically by (re, im)

    @property
    def M(self) -> int:
        return len(self.symbols)

    @property
    def augmented(self) -> np.ndarray:
        """The constellation with the silent symbol 0 appended."""
        return np.concatenate([self.symbols, [0j]])


def _sorted_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=complex)
    order = np.lexsort((pts.imag, pts.real))
    return pts[order]


def get_constellation(name: str = "qpsk") -> Constellation:
    """Unit average energy constellations: ``bpsk``, ``qpsk`` and ``16qam``."""
    key = name.lower()
    if key == "bpsk":
        pts = [-1.0, 1.0]
    elif key == "qpsk":
        pts = [(a + 1j * b) / np.sqrt(2) for a in (-1, 1) for b in (-1, 1)]
    elif key in ("16qam", "qam16"):
        levels = (-3, -1, 1, 3)
        pts = [(a + 1j * b) / np.sqrt(10) for a in levels for b in levels]
    else:
        raise ConfigError(f"unknown modulation {name!r}")
    return Constellation(key, _sorted_points(pts))


@dataclass(frozen=True)
class SystemConfig:
    """Scenario parameters. Defaults are the K=200, N=100, J=7 QPSK setup."""

    K: int = 200
    N: int = 100
    J: int = 7
    sparsity_range: tuple[int, int] = (18, 20)
    modulation: str = "qpsk"
    snr_db: float = 6.0
    beta: float = 0.0
    seed: int = 0
    # "total": SNR is mean received signal power per entry over noise power.
    # "per_user": sigma2 = 10^(-SNR/10), one user's received energy per slot is 1.
    snr_mode: str = "total"
    spreading: str = "complex"  # "complex" or "real" Gaussian sequences

    def __post_init__(self):
        object.__setattr__(self, "sparsity_range", tuple(int(v) for v in self.sparsity_range))
        self.validate()

    def validate(self) -> None:
        if self.K < 1 or self.N < 1:
            raise ConfigError("K and N must be positive")
        if not self.N < self.K:
            raise ConfigError(f"non-orthogonal overloading requires N < K (got N={self.N}, K={self.K})")
        if self.J < 1:
            raise ConfigError(f"J must be >= 1 (got {self.J})")
        lo, hi = self.sparsity_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad sparsity_range {self.sparsity_range}")
        if hi > self.K:
            raise ConfigError(f"sparsity_range {self.sparsity_range} exceeds K={self.K}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1) (got {self.beta})")
        if self.snr_mode not in SNR_MODES:
            raise ConfigError(f"snr_mode must be one of {SNR_MODES}")
        if self.spreading not in ("complex", "real"):
            raise ConfigError("spreading must be 'complex' or 'real'")
        get_constellation(self.modulation)

    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    @property
    def constellation(self) -> Constellation:
        return get_constellation(self.modulation)

    @property
    def noise_variance(self) -> float:
        return noise_variance(self)


def noise_variance(cfg: SystemConfig) -> float:
    """Noise variance per complex entry of ``V``.

    Spreading columns have unit norm, so each user delivers unit energy per
    slot. In ``per_user`` mode that energy is the SNR reference. In ``total``
    mode the reference is the mean received signal power per entry,
    ``E|Gamma| / N``.
    """
    snr = 10.0 ** (cfg.snr_db / 10.0)
    if cfg.snr_mode == "per_user":
        return 1.0 / snr
    mean_active = 0.5 * (cfg.sparsity_range[0] + cfg.sparsity_range[1])
    return max(mean_active, 1.0) / cfg.N / snr


def complex_normal(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """i.i.d. CN(0, var) samples."""
    z = rng.standard_normal(tuple(np.atleast_1d(shape)) + (2,))
    return np.sqrt(var / 2.0) * (z[..., 0] + 1j * z[..., 1])


def generate_spreading(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Random Gaussian spreading sequences, one unit-norm column per user."""
    if cfg.spreading == "real":
        S = rng.standard_normal((cfg.N, cfg.K)).astype(complex)
    else:
        S = complex_normal(rng, (cfg.N, cfg.K))
    return S / np.linalg.norm(S, axis=0, keepdims=True)


def generate_channel(cfg: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Rayleigh channel coefficients ``h[n, k] ~ CN(0, 1)``."""
    return complex_normal(rng, (cfg.N, cfg.K))


def evolve_channel(h_prev: np.ndarray, beta: float, rng: np.random.Generator) -> np.ndarray:
    """One slot of first-order drift: ``(1 - beta) h_prev + beta dh``, ``dh ~ CN(0, 1)``.

    ``beta == 0`` returns a copy of ``h_prev`` without drawing. ``beta == 1`` is
    accepted here (pure innovation) even though scenarios require ``beta < 1``.
    """
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1] (got {beta})")
    if beta == 0.0:
        return h_prev.copy()
    dh = complex_normal(rng, h_prev.shape)
    return (1.0 - beta) * h_prev + beta * dh


@dataclass(frozen=True)
class FrameInstance:
    S: np.ndarray
    H: np.ndarray  # slot-1 channel, the one the receiver knows
    G: np.ndarray
    gamma_true: tuple[int, ...]
    X: np.ndarray
    Y: np.ndarray
    sigma2: float
    H_slots: np.ndarray | None = field(default=None, repr=False)  # J x N x K if drifting

    @property
    def K(self) -> int:
        return self.G.shape[1]

    @property
    def N(self) -> int:
        return self.G.shape[0]

    @property
    def J(self) -> int:
        return self.Y.shape[1]


def generate_frame(
    cfg: SystemConfig,
    S: np.ndarray,
    H: np.ndarray,
    rng: np.random.Generator,
    sigma2: float | None = None,
) -> FrameInstance:
    """Draw the active set, symbols, noise and (optionally) channel drift.

    Draw order is sparsity, support, symbols, noise, drift innovations, so that
    frames sharing a seed but differing only in ``beta`` share everything else.
    """
    K, N, J = cfg.K, cfg.N, cfg.J
    if S.shape != (N, K) or H.shape != (N, K):
        raise ConfigError(f"S and H must be {N}x{K}")
    lo, hi = cfg.sparsity_range
    if hi > K:
        raise ConfigError(f"sparsity_range {cfg.sparsity_range} exceeds K={K}")
    if sigma2 is None:
        sigma2 = noise_variance(cfg)

    n_active = int(rng.integers(lo, hi + 1))
    gamma = np.sort(rng.choice(K, size=n_active, replace=False))
    points = cfg.constellation.symbols
    X = np.zeros((K, J), dtype=complex)
    X[gamma] = points[rng.integers(0, len(points), size=(n_active, J))]
    V = complex_normal(rng, (N, J), sigma2) if sigma2 > 0 else np.zeros((N, J), complex)

    G = H * S
    H_slots = None
    if cfg.beta > 0.0:
        H_slots = np.empty((J, N, K), dtype=complex)
        H_slots[0] = H
        for j in range(1, J):
            H_slots[j] = evolve_channel(H_slots[j - 1], cfg.beta, rng)
        Y = np.einsum("jnk,kj->nj", H_slots * S, X) + V
    else:
        Y = G @ X + V
    return FrameInstance(S, H, G, tuple(int(k) for k in gamma), X, Y, float(sigma2), H_slots)


def synthesize_frame(cfg: SystemConfig, rng: np.random.Generator | int | None = None) -> FrameInstance:
    """Spreading, channel and frame drawn from one stream (``cfg.seed`` by default)."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    S = generate_spreading(cfg, rng)
    H = generate_channel(cfg, rng)
    return generate_frame(cfg, S, H, rng)


# JSON fixtures: complex arrays are nested lists with [re, im] leaves.

FRAME_SCHEMA_VERSION = 1


def complex_to_json(a: np.ndarray) -> list:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def complex_from_json(obj) -> np.ndarray:
    arr = np.asarray(obj, dtype=float)
    if arr.shape[-1:] != (2,):
        raise ValueError("complex entries must be [re, im] pairs")
    return arr[..., 0] + 1j * arr[..., 1]


def frame_to_dict(frame: FrameInstance) -> dict:
    d = {
        "schema": "csmud.frame",
        "version": FRAME_SCHEMA_VERSION,
        "K": frame.K,
        "N": frame.N,
        "J": frame.J,
        "sigma2": frame.sigma2,
        "gamma_true": list(frame.gamma_true),
        "S": complex_to_json(frame.S),
        "H": complex_to_json(frame.H),
        "G": complex_to_json(frame.G),
        "X": complex_to_json(frame.X),
        "Y": complex_to_json(frame.Y),
    }
    if frame.H_slots is not None:
        d["H_slots"] = complex_to_json(frame.H_slots)
    return d


def frame_from_dict(d: dict) -> FrameInstance:
    if d.get("schema") != "csmud.frame":
        raise ValueError("not a csmud.frame document")
    H_slots = complex_from_json(d["H_slots"]) if "H_slots" in d else None
    frame = FrameInstance(
        S=complex_from_json(d["S"]),
        H=complex_from_json(d["H"]),
        G=complex_from_json(d["G"]),
        gamma_true=tuple(int(k) for k in d["gamma_true"]),
        X=complex_from_json(d["X"]),
        Y=complex_from_json(d["Y"]),
        sigma2=float(d["sigma2"]),
        H_slots=H_slots,
    )
    if frame.G.shape != (d["N"], d["K"]) or frame.Y.shape != (d["N"], d["J"]):
        raise ValueError("frame dimensions do not match the declared K, N, J")
    return frame


def save_frame(frame: FrameInstance, path) -> None:
    Path(path).write_text(json.dumps(frame_to_dict(frame)))


def load_frame(path) -> FrameInstance:
    return frame_from_dict(json.loads(Path(path).read_text()))
