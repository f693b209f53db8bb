"""
Service layer for designing and applying the octave filter bank.
"""
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.signal import fftconvolve, firwin

from .models import OctaveBank

logger = logging.getLogger(__name__)

FFT_CONVOLUTION_THRESHOLD = 8192
DEFAULT_KAISER_BETA = 6.0


class FilterBankService:
    """Service for octave-band splitting and recombination"""

    @staticmethod
    def octave_centers(num_bands, base_hz):
        return base_hz * 2.0 ** np.arange(num_bands)

    @classmethod
    def design_bank(cls, fs, num_bands, fir_order=None, base_hz=None, kaiser_beta=DEFAULT_KAISER_BETA):
        """
        Complementary crossovers from Kaiser-windowed sinc lowpasses at the
        sqrt(2)-spaced edges. Band b is the difference of adjacent lowpasses,
        the top band is the complement of the last lowpass, so the bands sum
        to a delay of fir_order / 2 samples. Crossovers sit at -6 dB.
        """
        defaults = settings.GFDN
        fir_order = int(fir_order or defaults['fir_order'])
        base_hz = float(base_hz or defaults['band_base_hz'])
        if num_bands < 1:
            raise ValidationError(f'Number of bands must be positive, got {num_bands}')
        if fir_order < 2 or fir_order % 2:
            raise ValidationError(f'Filter order must be even and at least 2, got {fir_order}')

        centers = cls.octave_centers(num_bands, base_hz)
        if fs <= 2.0 * np.sqrt(2.0) * centers[-1]:
            raise ValidationError(
                f'Top band edge {np.sqrt(2.0) * centers[-1]:.1f} Hz is not below Nyquist at fs = {fs}'
            )

        delta = np.zeros(fir_order + 1)
        delta[fir_order // 2] = 1.0
        lowpasses = [
            firwin(fir_order + 1, edge, window=('kaiser', kaiser_beta), fs=fs)
            for edge in centers[:-1] * np.sqrt(2.0)
        ]
        # symmetrize exactly; firwin is symmetric up to rounding
        lowpasses = [0.5 * (lp + lp[::-1]) for lp in lowpasses]

        taps = []
        previous = np.zeros(fir_order + 1)
        for lp in lowpasses:
            taps.append(lp - previous)
            previous = lp
        taps.append(delta - previous)

        bank = OctaveBank(center_freqs=centers, taps=np.array(taps), sample_rate=fs, fir_order=fir_order)
        logger.info(f"Designed {bank}")
        return bank

    @staticmethod
    def split(signal, bank):
        """Full-length convolution of the signal with every band filter, shape (B, len + order)"""
        signal = np.asarray(signal, dtype=float).ravel()
        if not np.all(np.isfinite(signal)):
            raise ValidationError('Signal contains non-finite samples')
        if signal.size > FFT_CONVOLUTION_THRESHOLD:
            return fftconvolve(signal[None, :], bank.taps, axes=-1)
        return np.stack([np.convolve(signal, taps) for taps in bank.taps])

    @staticmethod
    def split_band(signal, bank, band):
        if not 0 <= band < bank.num_bands:
            raise ValidationError(f'Band {band} is out of range for {bank.num_bands} bands')
        signal = np.asarray(signal, dtype=float).ravel()
        if signal.size > FFT_CONVOLUTION_THRESHOLD:
            return fftconvolve(signal, bank.taps[band])
        return np.convolve(signal, bank.taps[band])

    @staticmethod
    def recombine(band_signals, bank=None):
        """Sample-wise sum of the band signals"""
        lengths = {len(band) for band in band_signals}
        if len(lengths) != 1:
            raise ValidationError(f'Band signals have different lengths {sorted(lengths)}')
        if bank is not None and len(band_signals) != bank.num_bands:
            raise ValidationError(f'{len(band_signals)} band signals for a {bank.num_bands}-band bank')
        return np.sum(np.asarray(band_signals, dtype=float), axis=0)

    @staticmethod
    def frequency_response(bank, num_points):
        """Complex band responses G_b on the half-circle grid of a num_points DFT, shape (B, num_points/2 + 1)"""
        if num_points < bank.num_taps:
            raise ValidationError(f'{num_points} points cannot hold {bank.num_taps} taps')
        return np.fft.rfft(bank.taps, n=num_points, axis=-1)

    @classmethod
    def summed_response_db(cls, bank, num_points=4096):
        """Magnitude of the summed bank response in dB with its frequency axis"""
        response = cls.frequency_response(bank, max(num_points, bank.num_taps)).sum(axis=0)
        freqs = np.fft.rfftfreq(max(num_points, bank.num_taps), 1.0 / bank.sample_rate)
        return freqs, 20.0 * np.log10(np.abs(response))

    @staticmethod
    def export_csv(bank, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame(bank.taps.T, columns=[f'{f:g}Hz' for f in bank.center_freqs])
        frame.insert(0, 'tap', np.arange(bank.num_taps))
        frame.to_csv(path, index=False)
        logger.info(f"Wrote filter-bank coefficients to {path}")
        return path
