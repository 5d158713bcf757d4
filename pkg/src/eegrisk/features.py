"""Per-record feature assembly and the feature naming grammar.

Feature names:
    power__<band>__C<k>            relative band power
    entropy__<band>__C<k>          within-band spectral entropy
    coherence__<band>__C<i>-C<j>   magnitude-squared coherence (i < j)
    sl__<band>__C<i>-C<j>          synchronization likelihood (i < j)
    crossfreq__<mod>-<carrier>__C<k>  envelope power fraction

Components are numbered C1..Cn. Column order is fixed: all power
features (band-major, component-minor), then entropy, coherence, sl,
and crossfreq blocks in that order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .connectivity import (
    SlParams,
    amplitude_modulation,
    band_filter,
    coherence_from_spectra,
    sl_from_masks,
    sl_neighbor_masks,
    sl_params_for_band,
)
from .datamodel import BandScheme, EpochSet, FeatureTable
from .errors import UndefinedRatioError
from .spectral import (
    DEFAULT_OVERLAP,
    DEFAULT_SEG_SECONDS,
    relative_power,
    segment_spectra,
    spectral_entropy,
    welch_psd,
)


def component_pairs(n_components: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n_components)
            for j in range(i + 1, n_components)]


def crossfreq_pairs(bands: BandScheme) -> list[tuple[str, str]]:
    """(carrier, modulator) pairs with f_hi(mod) <= f_hi(carrier)."""
    out = []
    for carrier, _, c_hi in bands.bands:
        for mod, _, m_hi in bands.bands:
            if m_hi <= c_hi + 1e-12:
                out.append((carrier, mod))
    return out


def feature_names(bands: BandScheme, n_components: int) -> list[str]:
    comps = [f"C{k + 1}" for k in range(n_components)]
    pairs = [f"C{i + 1}-C{j + 1}" for i, j in component_pairs(n_components)]
    names = []
    for band in bands.names:
        names += [f"power__{band}__{c}" for c in comps]
    for band in bands.names:
        names += [f"entropy__{band}__{c}" for c in comps]
    for band in bands.names:
        names += [f"coherence__{band}__{p}" for p in pairs]
    for band in bands.names:
        names += [f"sl__{band}__{p}" for p in pairs]
    for carrier, mod in crossfreq_pairs(bands):
        names += [f"crossfreq__{mod}-{carrier}__{c}" for c in comps]
    return names


def describe_features(bands: BandScheme, n_components: int) -> str:
    """Human-readable accounting of the realized feature count."""
    n_b = len(bands.bands)
    n_c = n_components
    n_p = len(component_pairs(n_c))
    n_x = len(crossfreq_pairs(bands))
    total = 2 * n_b * n_c + 2 * n_b * n_p + n_x * n_c
    lines = [
        f"bands: {n_b} ({', '.join(bands.names)})",
        f"components: {n_c}",
        f"power:     {n_b} bands x {n_c} components = {n_b * n_c}",
        f"entropy:   {n_b} bands x {n_c} components = {n_b * n_c}",
        f"coherence: {n_b} bands x {n_p} pairs = {n_b * n_p}",
        f"sl:        {n_b} bands x {n_p} pairs = {n_b * n_p}",
        f"crossfreq: {n_x} band pairs x {n_c} components = {n_x * n_c}",
        f"total features: {total}",
    ]
    return "\n".join(lines)


def sl_params_map(bands: BandScheme, fs: float, p_ref: float = 0.05,
                  override: SlParams | None = None) -> dict[str, SlParams]:
    if override is not None:
        return {name: override for name in bands.names}
    return {name: sl_params_for_band(fs, lo, hi, p_ref)
            for name, lo, hi in bands.bands}


def extract_features(epochs: EpochSet, bands: BandScheme | None = None,
                     seg_seconds: float = DEFAULT_SEG_SECONDS,
                     overlap: float = DEFAULT_OVERLAP,
                     sl_params: dict[str, SlParams] | None = None
                     ) -> tuple[list[str], np.ndarray]:
    """Full feature vector for one record, in feature_names order."""
    bands = bands or BandScheme()
    fs = epochs.fs
    n_c = epochs.n_components
    pairs = component_pairs(n_c)
    sl_map = sl_params or sl_params_map(bands, fs)

    psd = welch_psd(epochs, seg_seconds, overlap)
    if psd.zero_variance.any():
        dead = [int(i) for i in np.nonzero(psd.zero_variance)[0]]
        raise UndefinedRatioError(f"zero-variance components: {dead}")
    rel = relative_power(psd, bands)
    values: list[float] = []
    for band in bands.names:
        values += [float(v) for v in rel[band]]
    for name, lo, hi in bands.bands:
        values += [float(v) for v in spectral_entropy(psd, (lo, hi))]

    spectra = []
    freqs = None
    for c in range(n_c):
        freqs, spec, _ = segment_spectra(epochs.data[:, c, :], fs,
                                         seg_seconds, overlap)
        spectra.append(spec)
    coh = {(i, j): coherence_from_spectra(spectra[i], spectra[j], freqs, bands)
           for i, j in pairs}
    for band in bands.names:
        values += [coh[(i, j)][band] for i, j in pairs]

    for name, lo, hi in bands.bands:
        params = sl_map[name]
        filtered = [band_filter(epochs.data[:, c, :], fs, lo, hi)
                    for c in range(n_c)]
        sums = {pair: 0.0 for pair in pairs}
        counts = {pair: 0 for pair in pairs}
        for e in range(epochs.n_epochs):
            masks = []
            ks = []
            for c in range(n_c):
                mask, k = sl_neighbor_masks(filtered[c][e], params)
                masks.append(mask)
                ks.append(k)
            for i, j in pairs:
                s, cnt = sl_from_masks(masks[i], masks[j], ks[i])
                sums[(i, j)] += s
                counts[(i, j)] += cnt
        values += [float(np.clip(sums[p] / counts[p], 0.0, 1.0))
                   for p in pairs]

    am_cells = [amplitude_modulation(epochs.data[:, c, :], fs, bands,
                                     seg_seconds, overlap)
                for c in range(n_c)]
    for carrier, mod in crossfreq_pairs(bands):
        values += [am_cells[c][(carrier, mod)] for c in range(n_c)]

    return feature_names(bands, n_c), np.array(values, dtype=np.float64)


def extract_table(records: list[EpochSet], bands: BandScheme | None = None,
                  seg_seconds: float = DEFAULT_SEG_SECONDS,
                  overlap: float = DEFAULT_OVERLAP,
                  sl_params: dict[str, SlParams] | None = None,
                  threads: int = 1) -> FeatureTable:
    """Extract features for a list of records into a FeatureTable.

    Records are processed independently; with threads > 1 they run in a
    thread pool and results are assembled in input order, so the output
    is identical for any thread count.
    """
    bands = bands or BandScheme()

    def one(ep: EpochSet):
        return extract_features(ep, bands, seg_seconds, overlap, sl_params)

    if threads > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, records))
    else:
        results = [one(ep) for ep in records]
    names = results[0][0]
    values = np.vstack([vals for _, vals in results])
    return FeatureTable(meta=[ep.meta for ep in records],
                        feature_names=names, values=values)
