"""Fading/AWGN channel: power normalisation, noise calibration, equalisation.

The model is ``Y = h X + N`` with a perfectly known complex gain ``h``. After
equalisation ``h* Y / |h|^2`` the channel is AWGN with deviation
``sigma_n / |h|``. Inside the training graph the transmitted code stays real
and is carried through that equivalent real AWGN channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add, div, frobenius_norm

SINGULAR_GAIN = 1e-9
NORM_TOLERANCE = 1e-3


class ChannelError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    """How channel draws are made.

    ``snr_db`` fixes the SNR; otherwise it is drawn uniformly from
    ``snr_range`` per sample. ``noiseless`` zeroes the noise while the SNR
    value is still produced (and fed to the attention blocks).
    """

    mode: str = "awgn"
    snr_db: float | None = None
    snr_range: tuple[float, float] | None = (0.0, 25.0)
    noiseless: bool = False

    def __post_init__(self):
        if self.mode not in ("awgn", "rayleigh"):
            raise ChannelError(f"unknown channel mode {self.mode!r}")
        if self.snr_db is not None:
            object.__setattr__(self, "snr_range", None)
        elif self.snr_range is None:
            raise ChannelError("need either a fixed snr_db or an snr_range")
        else:
            lo, hi = self.snr_range
            if lo > hi:
                raise ChannelError(f"snr_range lower bound {lo} exceeds upper bound {hi}")

    @classmethod
    def fixed(cls, snr_db: float, mode: str = "awgn", noiseless: bool = False) -> "ChannelConfig":
        return cls(mode=mode, snr_db=snr_db, noiseless=noiseless)

    def with_snr(self, snr_db: float) -> "ChannelConfig":
        return ChannelConfig(self.mode, snr_db, None, self.noiseless)


@dataclass
class ChannelDraw:
    """Channel realisations for a batch (arrays of length B, or scalars)."""

    h: np.ndarray
    snr_db: np.ndarray
    sigma_n: np.ndarray
    k: int
    snr_db_effective: np.ndarray = field(default=None)

    def __post_init__(self):
        self.h = np.atleast_1d(np.asarray(self.h, dtype=np.complex128))
        self.snr_db = np.atleast_1d(np.asarray(self.snr_db, dtype=np.float64))
        self.sigma_n = np.atleast_1d(np.asarray(self.sigma_n, dtype=np.float64))
        if self.snr_db_effective is None:
            self.snr_db_effective = self.snr_db
        if self.k < 1:
            raise ChannelError("symbol count k must be positive")


def noise_sigma_for_snr(snr_db, k: int, h=1.0):
    """Per-element noise deviation giving ``|h|^2 / (k sigma^2) = 10^(snr/10)``."""
    if k < 1:
        raise ChannelError("symbol count k must be positive")
    gain2 = np.abs(np.asarray(h)) ** 2
    sigma = np.sqrt(gain2 / (k * np.power(10.0, np.asarray(snr_db, dtype=np.float64) / 10.0)))
    return float(sigma) if np.ndim(sigma) == 0 else sigma


def power_normalize(x: Tensor, per_sample: bool | None = None) -> Tensor:
    """Scale to unit Frobenius norm (each batch element separately for rank-4 input)."""
    if per_sample is None:
        per_sample = x.ndim == 4
    axes = tuple(range(1, x.ndim)) if per_sample else None
    norm = frobenius_norm(x, axes, keepdims=True)
    if np.any(norm.data == 0):
        raise ChannelError("cannot normalise an all-zero code")
    return div(x, norm)


def _check_normalized(x: np.ndarray, batched: bool) -> None:
    flat = x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)
    norms = np.sqrt((flat.astype(np.float64) ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > NORM_TOLERANCE):
        raise ChannelError(f"input is not power-normalised (norms {norms})")


def apply_fading_awgn(x, draw: ChannelDraw, rng: np.random.Generator,
                      batched: bool = False) -> np.ndarray:
    """Complex received signal ``h X + N``; ``N`` is circular Gaussian, E|N_i|^2 = sigma_n^2."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    _check_normalized(data, batched)
    shape = data.shape
    bshape = (-1,) + (1,) * (len(shape) - 1) if batched else ()
    h = draw.h.reshape(bshape) if batched else draw.h[0]
    sigma = draw.sigma_n.reshape(bshape) if batched else draw.sigma_n[0]
    noise = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * (sigma / math.sqrt(2))
    return h * data.astype(np.complex128) + noise


def equalize(y: np.ndarray, h) -> np.ndarray:
    """Undo a known complex gain: ``h* y / |h|^2``."""
    h = np.asarray(h, dtype=np.complex128)
    if np.any(np.abs(h) < SINGULAR_GAIN):
        raise ChannelError("channel gain is (near) zero; cannot equalise")
    return np.conj(h) * y / np.abs(h) ** 2


def draw_channel(cfg: ChannelConfig, batch: int, k: int, rng: np.random.Generator) -> ChannelDraw:
    """Sample gains and SNRs for ``batch`` transmissions of ``k`` symbols each.

    The noise level follows the nominal SNR at unit average gain; under
    Rayleigh fading the post-equalisation (effective) SNR is shifted by
    ``10 log10 |h|^2``.
    """
    if cfg.snr_db is not None:
        snr = np.full(batch, float(cfg.snr_db))
    else:
        lo, hi = cfg.snr_range
        snr = rng.uniform(lo, hi, size=batch)
    if cfg.mode == "awgn":
        h = np.ones(batch, dtype=np.complex128)
    else:
        h = (rng.standard_normal(batch) + 1j * rng.standard_normal(batch)) / math.sqrt(2)
    if cfg.noiseless or np.all(np.isinf(snr)):
        sigma = np.zeros(batch)
    else:
        sigma = noise_sigma_for_snr(snr, k, 1.0) * np.ones(batch)
    with np.errstate(divide="ignore"):
        effective = snr + 10.0 * np.log10(np.abs(h) ** 2)
    return ChannelDraw(h=h, snr_db=snr, sigma_n=sigma, k=k, snr_db_effective=effective)


def transmit(x: Tensor, cfg: ChannelConfig, rng: np.random.Generator,
             draw: ChannelDraw | None = None) -> tuple[Tensor, np.ndarray]:
    """Normalise, pass through the (equalised) channel, return ``(Y~, effective SNR)``.

    ``x`` is one code ``[C,H,W]`` or a batch ``[B,C,H,W]``. Noise is a
    constant of the graph, so gradients flow through the normalisation only.
    """
    batched = x.ndim == 4
    batch = x.shape[0] if batched else 1
    k = int(np.prod(x.shape[1:] if batched else x.shape))
    if draw is None:
        draw = draw_channel(cfg, batch, k, rng)
    xn = power_normalize(x, per_sample=batched)
    sigma_eq = draw.sigma_n / np.maximum(np.abs(draw.h), SINGULAR_GAIN)
    if np.abs(draw.h).min() < SINGULAR_GAIN:
        raise ChannelError("channel gain is (near) zero; cannot equalise")
    if np.all(sigma_eq == 0):
        y = xn
    else:
        bshape = (-1,) + (1,) * (x.ndim - 1) if batched else ()
        noise = rng.standard_normal(x.shape) * sigma_eq.reshape(bshape) if batched else \
            rng.standard_normal(x.shape) * sigma_eq[0]
        y = add(xn, Tensor(noise.astype(x.dtype)))
    eff = draw.snr_db_effective if batched else draw.snr_db_effective[0]
    return y, eff


def realized_snr_db(x: np.ndarray, noise: np.ndarray, h=1.0) -> float:
    """Empirical ``|h|^2 ||X||^2 / ||N||^2`` in dB."""
    signal = np.abs(h) ** 2 * np.sum(np.abs(x) ** 2)
    return float(10.0 * np.log10(signal / np.sum(np.abs(noise) ** 2)))
