"""Welch power spectral density, relative band power, and spectral entropy.

The PSD estimator averages one-sided modified periodograms over Hann
(periodic) segments, pooled across epochs, with per-segment mean removal
and density scaling so that sum(power) * df approximates the signal
variance. Band integrals assign each frequency bin to the band with
f_lo <= f < f_hi, so disjoint adjacent bands never share a bin and
relative powers over a covering scheme sum to exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import BandScheme, EpochSet
from .errors import ParameterError, UndefinedRatioError

#: Default Welch segment length in seconds. 4 s gives 0.25 Hz resolution,
#: which makes every edge of the eight analysis bands an exact bin and
#: keeps the one-bin Hann leakage of an in-band tone inside its band.
DEFAULT_SEG_SECONDS = 4.0
DEFAULT_OVERLAP = 0.5

_ZERO_VARIANCE_EPS = 0.0


@dataclass
class Psd:
    """One-sided PSD per component on a uniform frequency grid."""

    freqs: np.ndarray
    power: np.ndarray  # [n_components, n_bins]
    df: float
    seg_samples: int
    n_segments: int
    zero_variance: np.ndarray  # bool per component

    def band_bins(self, f_lo: float, f_hi: float) -> np.ndarray:
        """Indices of bins with f_lo <= f < f_hi (half-open assignment)."""
        return np.nonzero((self.freqs >= f_lo - 1e-12)
                          & (self.freqs < f_hi - 1e-12))[0]


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def segment_starts(n_samples: int, seg_samples: int, overlap: float) -> list[int]:
    step = seg_samples - int(np.floor(overlap * seg_samples))
    step = max(step, 1)
    return list(range(0, n_samples - seg_samples + 1, step))


def segment_spectra(x: np.ndarray, fs: float, seg_seconds: float,
                    overlap: float) -> tuple[np.ndarray, np.ndarray, float]:
    """Windowed rFFT of every Welch segment of every epoch.

    x is [n_epochs, n_samples]. Returns (freqs, spectra [n_segments_total,
    n_bins], density_scale) where density_scale converts |X|^2 into a
    one-sided density before the edge-bin halving.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_samples = x.shape[1]
    if not 0.0 <= overlap < 1.0:
        raise ParameterError(f"overlap must lie in [0, 1), got {overlap}")
    seg_samples = int(round(seg_seconds * fs))
    if seg_samples < 8:
        raise ParameterError(
            f"segment of {seg_samples} samples is too short (need >= 8)")
    if seg_samples > n_samples:
        raise ParameterError(
            f"segment ({seg_samples} samples) longer than epoch ({n_samples})")
    starts = segment_starts(n_samples, seg_samples, overlap)
    window = hann_periodic(seg_samples)
    segs = []
    for epoch in x:
        for s in starts:
            seg = epoch[s:s + seg_samples]
            seg = (seg - seg.mean()) * window
            segs.append(np.fft.rfft(seg))
    spectra = np.array(segs)
    freqs = np.fft.rfftfreq(seg_samples, d=1.0 / fs)
    scale = 1.0 / (fs * np.sum(window ** 2))
    return freqs, spectra, scale


def _onesided_density(mean_sq: np.ndarray, scale: float,
                      seg_samples: int) -> np.ndarray:
    psd = mean_sq * scale
    psd[1:] *= 2.0
    if seg_samples % 2 == 0:
        psd[-1] /= 2.0
    return psd


def welch_psd(epochs: EpochSet, seg_seconds: float = DEFAULT_SEG_SECONDS,
              overlap: float = DEFAULT_OVERLAP) -> Psd:
    """One-sided Welch PSD per component, averaged over segments and epochs.

    A zero-variance component yields an all-zero PSD and is flagged
    rather than raising, so downstream ratios can report the condition.
    """
    fs = epochs.fs
    n_comp = epochs.n_components
    rows = []
    flags = np.zeros(n_comp, dtype=bool)
    freqs = None
    seg_samples = int(round(seg_seconds * fs))
    for c in range(n_comp):
        x = epochs.data[:, c, :]
        if float(np.ptp(x)) == _ZERO_VARIANCE_EPS:
            flags[c] = True
            freqs_c = np.fft.rfftfreq(seg_samples, d=1.0 / fs)
            rows.append(np.zeros(freqs_c.size))
            freqs = freqs_c
            continue
        freqs, spectra, scale = segment_spectra(x, fs, seg_seconds, overlap)
        mean_sq = np.mean(np.abs(spectra) ** 2, axis=0)
        rows.append(_onesided_density(mean_sq, scale, seg_samples))
    if freqs is None or freqs.size < 2:
        raise ParameterError("PSD needs at least two frequency bins")
    power = np.vstack(rows)
    return Psd(freqs=freqs, power=power, df=float(freqs[1] - freqs[0]),
               seg_samples=seg_samples,
               n_segments=len(segment_starts(epochs.n_samples, seg_samples,
                                             overlap)) * epochs.n_epochs,
               zero_variance=flags)


def band_power(psd: Psd, f_lo: float, f_hi: float) -> np.ndarray:
    """Band-integrated power per component, bin cells of width df."""
    bins = psd.band_bins(f_lo, f_hi)
    if bins.size == 0:
        raise ParameterError(
            f"band [{f_lo}, {f_hi}) contains no PSD bins (df={psd.df})")
    return psd.power[:, bins].sum(axis=1) * psd.df


def relative_power(psd: Psd, bands: BandScheme) -> dict[str, np.ndarray]:
    """Per-band share of total power over the union of the analysis bands.

    Returns {band name: per-component values in [0, 1]}. Shares over a
    disjoint covering scheme sum to 1 per component by construction.
    """
    per_band = {name: band_power(psd, lo, hi) for name, lo, hi in bands.bands}
    total = np.sum(list(per_band.values()), axis=0)
    if np.any(total <= 0.0):
        dead = [int(i) for i in np.nonzero(total <= 0.0)[0]]
        raise UndefinedRatioError(
            f"zero total band power for components {dead}"
            + (" (zero-variance input)" if psd.zero_variance.any() else ""))
    return {name: p / total for name, p in per_band.items()}


def spectral_entropy(psd: Psd, band: tuple[float, float] | None = None
                     ) -> np.ndarray:
    """Normalized Shannon entropy of the bin-wise power distribution.

    Restricted to a (f_lo, f_hi) band when given; divided by log(n_bins)
    so the flat spectrum scores 1 and a single-bin spectrum scores 0.
    """
    if band is None:
        bins = np.arange(psd.freqs.size)
    else:
        bins = psd.band_bins(band[0], band[1])
    if bins.size < 2:
        raise ParameterError("entropy needs at least 2 bins in the range")
    p = psd.power[:, bins]
    total = p.sum(axis=1)
    if np.any(total <= 0.0):
        dead = [int(i) for i in np.nonzero(total <= 0.0)[0]]
        raise UndefinedRatioError(f"zero power in range for components {dead}")
    q = p / total[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0.0, -q * np.log(q), 0.0)
    return terms.sum(axis=1) / np.log(bins.size)
