"""Pairwise coherence, envelope cross-frequency coupling, and
synchronization likelihood.

All three measures are amplitude-scale invariant and live in [0, 1].
Coherence pools Welch segments across epochs. Amplitude modulation
band-passes the carrier, takes the analytic-signal envelope (edges
trimmed against filter/Hilbert transients), and distributes the
envelope's fluctuation power over the modulator bands. Synchronization
likelihood follows the Stam-van Dijk recurrence formulation with a
Theiler ring of candidates and a per-reference quantile threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, hilbert, sosfiltfilt

from .datamodel import BandScheme
from .errors import ParameterError, UndefinedRatioError
from .spectral import (
    DEFAULT_OVERLAP,
    DEFAULT_SEG_SECONDS,
    segment_spectra,
)

# A carrier band holding less than this share of total signal power is
# treated as empty: there is no carrier whose envelope could be modulated.
AM_POWER_GATE = 1e-10
# Envelope variance below this multiple of the squared envelope mean is
# treated as a constant (unmodulated) envelope. Finite-window analytic
# signals of pure tones show relative ripple power near 1e-7; genuine
# modulation at >= 0.5% depth sits above 1e-5.
AM_FLAT_GATE = 3e-6


def band_filter(x: np.ndarray, fs: float, f_lo: float, f_hi: float) -> np.ndarray:
    """Zero-phase 4th-order Butterworth band-pass, applied per epoch row."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    nyq = fs / 2.0
    hi = min(f_hi, nyq * 0.999)
    sos = butter(2, [f_lo / nyq, hi / nyq], btype="bandpass", output="sos")
    return sosfiltfilt(sos, x, axis=1)


def _pooled_spectra(x: np.ndarray, fs: float, seg_seconds: float,
                    overlap: float):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if float(np.ptp(x)) == 0.0:
        raise UndefinedRatioError("zero-variance input")
    return segment_spectra(x, fs, seg_seconds, overlap)


def coherence_from_spectra(spec_x: np.ndarray, spec_y: np.ndarray,
                           freqs: np.ndarray, bands: BandScheme
                           ) -> dict[str, float]:
    """Magnitude-squared coherence per band from pooled segment spectra."""
    sxx = np.mean(np.abs(spec_x) ** 2, axis=0)
    syy = np.mean(np.abs(spec_y) ** 2, axis=0)
    sxy = np.mean(spec_x * np.conj(spec_y), axis=0)
    denom = sxx * syy
    with np.errstate(divide="ignore", invalid="ignore"):
        msc = np.where(denom > 0.0, np.abs(sxy) ** 2 / denom, 0.0)
    msc = np.clip(msc, 0.0, 1.0)
    out = {}
    for name, lo, hi in bands.bands:
        bins = np.nonzero((freqs >= lo - 1e-12) & (freqs < hi - 1e-12))[0]
        if bins.size == 0:
            raise ParameterError(
                f"band {name} contains no coherence bins")
        out[name] = float(np.mean(msc[bins]))
    return out


def coherence(x: np.ndarray, y: np.ndarray, fs: float,
              bands: BandScheme | None = None,
              seg_seconds: float = DEFAULT_SEG_SECONDS,
              overlap: float = DEFAULT_OVERLAP) -> dict[str, float]:
    """Per-band magnitude-squared coherence of two component series.

    x and y are [n_epochs, n_samples] (or 1-D); segments are pooled
    across epochs, and at least 4 segments are required.
    """
    bands = bands or BandScheme()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ParameterError(f"series shapes differ: {x.shape} vs {y.shape}")
    freqs, spec_x, _ = _pooled_spectra(x, fs, seg_seconds, overlap)
    _, spec_y, _ = _pooled_spectra(y, fs, seg_seconds, overlap)
    if spec_x.shape[0] < 4:
        raise ParameterError(
            f"coherence needs >= 4 Welch segments, got {spec_x.shape[0]}")
    return coherence_from_spectra(spec_x, spec_y, freqs, bands)


def envelope(x: np.ndarray, fs: float, f_lo: float, f_hi: float,
             trim_seconds: float = 0.5) -> np.ndarray:
    """Band-passed analytic-signal envelope with trimmed epoch edges."""
    xb = band_filter(x, fs, f_lo, f_hi)
    env = np.abs(hilbert(xb, axis=1))
    trim = min(int(round(trim_seconds * fs)), env.shape[1] // 10)
    if trim > 0:
        env = env[:, trim:-trim]
    return env


def amplitude_modulation(x: np.ndarray, fs: float,
                         bands: BandScheme | None = None,
                         seg_seconds: float = DEFAULT_SEG_SECONDS,
                         overlap: float = DEFAULT_OVERLAP
                         ) -> dict[tuple[str, str], float]:
    """Envelope power fractions per (carrier band, modulator band) pair.

    For each carrier band b, the series is band-passed into b and the
    envelope's fluctuation spectrum is integrated over every modulator
    band m with f_hi(m) <= f_hi(b); the DC bin is excluded and power
    below the lowest band edge is the (unreported) sub-band residual,
    so reported fractions plus the residual sum to 1. Keys are
    (carrier name, modulator name); invalid pairs are absent.

    Carrier bands holding a negligible share of signal power, or whose
    envelope is constant, report 0 for every modulator cell.
    """
    bands = bands or BandScheme()
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    total_len = x.shape[0] * x.shape[1]
    if total_len < 8 * fs:
        raise ParameterError(
            f"amplitude modulation needs >= {int(8 * fs)} samples, "
            f"got {total_len}")
    freqs, spectra, _ = _pooled_spectra(x, fs, seg_seconds, overlap)
    mean_sq = np.mean(np.abs(spectra) ** 2, axis=0)
    total_power = float(mean_sq[1:].sum())
    if total_power <= 0.0:
        raise UndefinedRatioError("zero signal power")

    f_floor = bands.f_min
    out: dict[tuple[str, str], float] = {}
    for carrier, c_lo, c_hi in bands.bands:
        modulators = [(m, lo, hi) for m, lo, hi in bands.bands
                      if hi <= c_hi + 1e-12]
        cbins = np.nonzero((freqs >= c_lo - 1e-12) & (freqs < c_hi - 1e-12))[0]
        carrier_power = float(mean_sq[cbins].sum())
        if carrier_power < AM_POWER_GATE * total_power:
            for m, _, _ in modulators:
                out[(carrier, m)] = 0.0
            continue
        env = envelope(x, fs, c_lo, c_hi)
        env_mean = float(env.mean())
        fluct = env - env.mean(axis=1, keepdims=True)
        fluct_power = float(np.mean(fluct ** 2))
        if env_mean > 0.0 and fluct_power < AM_FLAT_GATE * env_mean ** 2:
            for m, _, _ in modulators:
                out[(carrier, m)] = 0.0
            continue
        env_seg = min(seg_seconds, env.shape[1] / fs)
        efreqs, espectra, escale = segment_spectra(fluct, fs, env_seg, overlap)
        epsd = np.mean(np.abs(espectra) ** 2, axis=0)
        in_range = (efreqs > 1e-12) & (efreqs < c_hi - 1e-12)
        denom = float(epsd[in_range].sum())
        if denom <= 0.0:
            raise UndefinedRatioError(
                f"zero envelope power for carrier band {carrier}")
        for m, m_lo, m_hi in modulators:
            mbins = (efreqs >= m_lo - 1e-12) & (efreqs < m_hi - 1e-12)
            out[(carrier, m)] = float(epsd[mbins & in_range].sum() / denom)
    return out


@dataclass(frozen=True)
class SlParams:
    """Synchronization-likelihood embedding and window parameters.

    m: embedding dimension; lag: embedding delay in samples;
    w1/w2: Theiler and candidate windows in embedding-index units;
    p_ref: target fraction of candidates counted as neighbors.
    """

    m: int
    lag: int
    w1: int
    w2: int
    p_ref: float = 0.05

    def __post_init__(self):
        if self.m < 2:
            raise ParameterError(f"embedding dimension must be >= 2, got {self.m}")
        if self.lag < 1:
            raise ParameterError(f"lag must be >= 1, got {self.lag}")
        if not self.w1 < self.w2:
            raise ParameterError(f"need w1 < w2, got w1={self.w1} w2={self.w2}")
        if not 0.0 < self.p_ref < 1.0:
            raise ParameterError(f"p_ref must lie in (0, 1), got {self.p_ref}")

    @property
    def min_samples(self) -> int:
        return self.lag * (self.m - 1) + self.w2


def sl_params_for_band(fs: float, f_lo: float, f_hi: float,
                       p_ref: float = 0.05) -> SlParams:
    """Montez-style defaults tied to the band: lag ~ fs/(3 f_hi), span ~ 3 cycles."""
    lag = max(1, int(round(fs / (3.0 * f_hi))))
    m = int(math.ceil(3.0 * f_hi / f_lo)) + 1
    w1 = 2 * lag * (m - 1)
    w2 = w1 + int(math.ceil(10.0 / p_ref))
    return SlParams(m=m, lag=lag, w1=w1, w2=w2, p_ref=p_ref)


def _embed(x: np.ndarray, m: int, lag: int) -> np.ndarray:
    n = x.size - lag * (m - 1)
    return np.stack([x[k * lag:k * lag + n] for k in range(m)], axis=1)


def sl_neighbor_masks(x: np.ndarray, params: SlParams
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Neighbor mask and per-reference neighbor count for one epoch.

    Candidates for reference i are embeddings j with w1 < |i-j| < w2;
    the k_i = max(1, ceil(p_ref * n_candidates_i)) closest (Euclidean,
    ties broken by candidate order) are the neighbors. Returns
    (mask [n_refs, n_offsets], k [n_refs]).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < params.min_samples:
        raise ParameterError(
            f"series of {x.size} samples is too short for SL: need >= "
            f"{params.min_samples} (lag*(m-1) + w2)")
    emb = _embed(x, params.m, params.lag)
    n = emb.shape[0]
    offsets = np.arange(params.w1 + 1, params.w2)
    n_off = offsets.size
    dist = np.full((n, 2 * n_off), np.inf)
    for idx, off in enumerate(offsets):
        if off >= n:
            break
        d = np.sqrt(np.sum((emb[off:] - emb[:-off]) ** 2, axis=1))
        dist[:n - off, idx] = d          # candidate at i + off
        dist[off:, n_off + idx] = d      # candidate at i - off
    n_valid = np.isfinite(dist).sum(axis=1)
    if (n_valid == 0).all():
        raise ParameterError("no valid SL candidates; series too short")
    k = np.maximum(1, np.ceil(params.p_ref * n_valid).astype(int))
    k = np.minimum(k, np.maximum(n_valid, 1))
    kmax = int(k.max())
    # Partial selection of the kmax closest candidates per row, then an
    # exact sort of just that slice to honor the per-row neighbor count.
    idx = np.argpartition(dist, kmax - 1, axis=1)[:, :kmax]
    sub = np.take_along_axis(dist, idx, axis=1)
    order = np.argsort(sub, axis=1, kind="stable")
    idx_sorted = np.take_along_axis(idx, order, axis=1)
    mask = np.zeros_like(dist, dtype=bool)
    take = np.arange(kmax)[None, :] < k[:, None]
    rows = np.broadcast_to(np.arange(n)[:, None], idx_sorted.shape)
    mask[rows[take], idx_sorted[take]] = True
    usable = n_valid >= 1
    mask[~usable] = False
    return mask, np.where(usable, k, 0)


def sl_from_masks(mask_x: np.ndarray, mask_y: np.ndarray,
                  k: np.ndarray) -> tuple[float, int]:
    """Sum over references of |Nx & Ny| / k, plus the reference count."""
    usable = k > 0
    if not usable.any():
        return 0.0, 0
    shared = (mask_x & mask_y).sum(axis=1)
    frac = shared[usable] / k[usable]
    return float(frac.sum()), int(usable.sum())


def synchronization_likelihood(x: np.ndarray, y: np.ndarray, fs: float,
                               params: SlParams) -> float:
    """Time-averaged synchronization likelihood of two component series.

    x and y are [n_epochs, n_samples] (or 1-D); epochs are embedded
    independently so no embedding vector or candidate pair crosses an
    epoch boundary. Approaches p_ref for independent signals and 1 for
    identical ones.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape != y.shape:
        raise ParameterError(f"series shapes differ: {x.shape} vs {y.shape}")
    total = 0.0
    count = 0
    for ex, ey in zip(x, y):
        mask_x, kx = sl_neighbor_masks(ex, params)
        mask_y, _ = sl_neighbor_masks(ey, params)
        s, c = sl_from_masks(mask_x, mask_y, kx)
        total += s
        count += c
    if count == 0:
        raise ParameterError("no usable SL references")
    return float(np.clip(total / count, 0.0, 1.0))
